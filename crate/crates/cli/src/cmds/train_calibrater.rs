//! `revcal train-calibrater`: train a small perturbation generator that
//! repairs a frozen classifier's accuracy on shifted inputs. The main
//! model's weights must come out exactly as they went in.

use revcal_core::model::{build_model, size_calibrater, ArchSpec};
use revcal_core::model_io::save_model;
use revcal_core::training::{train_calibrater, CalTrainConfig};

use crate::config::{check_range, load_config, resolved_value, to_core_range, TrainCalibraterConfig};
use crate::csvout;
use crate::manifest::Run;
use crate::{cmds, RunArgs};

pub fn run(args: &RunArgs) -> anyhow::Result<()> {
    let mut cfg: TrainCalibraterConfig = load_config(&args.config, "train-calibrater")?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(t) = args.threads {
        cfg.threads = t;
    }
    let scenario = cfg.scenario.normalize()?;
    check_range(cfg.input_range)?;

    let main = cmds::load_model(&cfg.main)?;
    let data = cfg.data.load()?;
    cmds::require_nonempty(&data)?;

    let arch = match &cfg.hidden {
        Some(widths) => {
            let flat: usize = data.input_shape().iter().product();
            ArchSpec::calibrater_dense(flat, widths.clone(), cfg.head)
        }
        None => size_calibrater(
            data.input_shape(),
            cfg.head,
            main.count_params(),
            cfg.frac,
        )?,
    };

    let mut run = Run::new(
        "train-calibrater",
        cmds::out_dir(args, "train-calibrater"),
        resolved_value(&cfg)?,
        cfg.seed,
        cfg.threads,
    )?;
    run.record_input_model("main", &cfg.main)?;
    run.record_dataset("train", &data);

    let mut cal = build_model(cfg.name.clone(), &arch, cfg.seed)?;
    let ratio = cal.count_params() as f64 / main.count_params() as f64;
    println!(
        "train-calibrater: {} ({} parameters, {:.3} of main {}) on {} (scenario {})",
        cfg.name,
        cal.count_params(),
        ratio,
        main.name(),
        data.id(),
        scenario.name
    );
    run.record_metric("param_fraction", ratio);

    let main_hash_before = main.param_hash();
    let log = train_calibrater(
        &mut cal,
        &main,
        &data,
        &CalTrainConfig {
            epochs: cfg.epochs,
            batch: cfg.batch,
            lr: cfg.lr,
            lr_decay: cfg.lr_decay,
            scenario,
            seed: cfg.seed,
            input_range: to_core_range(cfg.input_range),
            objective: cfg.objective,
        },
    )?;
    for e in &log {
        println!(
            "epoch {:>3}  loss {:.4}  lr {:.5}  calibrated acc {:.4}",
            e.epoch, e.mean_loss, e.lr, e.accuracy
        );
    }
    let unchanged = main.param_hash() == main_hash_before;
    run.record_metric("main_params_unchanged", if unchanged { 1.0 } else { 0.0 });
    anyhow::ensure!(unchanged, "main model parameters moved during calibrater training");

    cal.freeze();
    let model_rel = format!("{}.rvcl", cfg.name);
    save_model(&cal, run.path(&model_rel))?;
    run.record_output_model(&cfg.name, &model_rel)?;

    let log_rel = format!("{}-train-log.csv", cfg.name);
    let rows: Vec<String> = log
        .iter()
        .map(|e| {
            format!(
                "{},{},{},{}",
                e.epoch,
                csvout::cell(e.mean_loss),
                csvout::cell(e.lr),
                csvout::cell(e.accuracy)
            )
        })
        .collect();
    csvout::write_fresh(&run.path(&log_rel), &csvout::TRAIN_LOG, &rows)?;
    run.record_output(&log_rel);
    if let Some(e) = log.last() {
        run.record_metric("final_calibrated_accuracy", e.accuracy);
        run.record_metric("final_mean_loss", e.mean_loss);
    }

    let manifest = run.finish()?;
    println!("wrote {}", manifest.display());
    Ok(())
}
