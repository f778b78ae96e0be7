//! `revcal eval`: score a frozen model on a dataset under a scenario,
//! optionally with a calibrater repairing (or, negated, attacking) the
//! inputs, and append one row to a results CSV.

use revcal_core::training::{evaluate, EvalConfig};

use crate::config::{check_range, load_config, resolved_value, to_core_range, EvalCmdConfig};
use crate::csvout;
use crate::manifest::Run;
use crate::{cmds, RunArgs};

pub fn run(args: &RunArgs) -> anyhow::Result<()> {
    let mut cfg: EvalCmdConfig = load_config(&args.config, "eval")?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(t) = args.threads {
        cfg.threads = t;
    }
    let scenario = cfg.scenario.normalize()?;
    check_range(cfg.input_range)?;

    let model = cmds::load_model(&cfg.model)?;
    let cal = match &cfg.calibrater {
        Some(p) => Some(cmds::load_model(p)?),
        None => None,
    };
    let data = cfg.data.load()?;
    cmds::require_nonempty(&data)?;

    let mut run = Run::new(
        "eval",
        cmds::out_dir(args, "eval"),
        resolved_value(&cfg)?,
        cfg.seed,
        cfg.threads,
    )?;
    run.record_input_model("model", &cfg.model)?;
    if let Some(p) = &cfg.calibrater {
        run.record_input_model("calibrater", p)?;
    }
    run.record_dataset("test", &data);

    let report = evaluate(
        &model,
        cal.as_ref(),
        &data,
        &EvalConfig {
            scenario: scenario.clone(),
            seed: cfg.seed,
            input_range: to_core_range(cfg.input_range),
            negate: cfg.negate,
            threads: cfg.threads,
        },
    )?;

    let cal_label = match &cal {
        None => "none".to_string(),
        Some(c) if cfg.negate => format!("{}-negated", c.name()),
        Some(c) => c.name().to_string(),
    };
    println!(
        "eval: {} (bits {}) on {} under {} with calibrater {}",
        model.name(),
        cmds::bits_label(&model),
        data.id(),
        scenario.name,
        cal_label
    );
    println!(
        "accuracy {:.4} ({}/{})  mean true-class prob {:.4}",
        report.accuracy, report.correct, report.n, report.mean_true_prob
    );

    let row = format!(
        "{},{},{},{},{},{}",
        model.name(),
        cmds::bits_label(&model),
        scenario.name,
        cal_label,
        csvout::cell(report.accuracy),
        report.n
    );
    csvout::append(&run.path(&cfg.results), &csvout::RESULTS, &[row])?;
    run.record_output(&cfg.results);
    run.record_metric("accuracy", report.accuracy);
    run.record_metric("mean_true_prob", report.mean_true_prob);

    let manifest = run.finish()?;
    println!("wrote {}", manifest.display());
    Ok(())
}
