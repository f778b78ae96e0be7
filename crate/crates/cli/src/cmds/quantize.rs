//! `revcal quantize`: crush a model's weights to k bits per layer and save
//! the result as a new frozen model.

use revcal_core::model_io::save_model;
use revcal_core::quant::{quantize_model, QuantConfig};

use crate::config::{load_config, resolved_value, QuantizeConfig};
use crate::manifest::Run;
use crate::{cmds, RunArgs};

pub fn run(args: &RunArgs) -> anyhow::Result<()> {
    let mut cfg: QuantizeConfig = load_config(&args.config, "quantize")?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }

    let model = cmds::load_model(&cfg.model)?;
    let name = cfg
        .name
        .clone()
        .unwrap_or_else(|| format!("{}-q{}", model.name(), cfg.bits));
    cfg.name = Some(name.clone());

    let mut run = Run::new(
        "quantize",
        cmds::out_dir(args, "quantize"),
        resolved_value(&cfg)?,
        cfg.seed,
        cfg.threads,
    )?;
    run.record_input_model("model", &cfg.model)?;

    let mut q = quantize_model(&model, &QuantConfig::new(cfg.bits, cfg.method))?;
    q.set_name(name.clone());
    println!(
        "quantize: {} -> {} at {} bits ({:?}), {} parameters",
        model.name(),
        name,
        cfg.bits,
        cfg.method,
        q.count_params()
    );

    let model_rel = format!("{name}.rvcl");
    save_model(&q, run.path(&model_rel))?;
    run.record_output_model(&name, &model_rel)?;
    run.record_metric("bits", cfg.bits as f64);
    run.record_metric("parameters", q.count_params() as f64);

    let manifest = run.finish()?;
    println!("wrote {}", manifest.display());
    Ok(())
}
