//! `revcal train-main`: fit a classifier on (optionally augmented)
//! training data, freeze it, and save it with its training log.

use revcal_core::model::build_model;
use revcal_core::model_io::save_model;
use revcal_core::perturb::UNBOUNDED;
use revcal_core::training::{evaluate, fit_classifier, EvalConfig, FitConfig};
use revcal_core::transform::Scenario;

use crate::config::{load_config, resolved_value, TrainMainConfig};
use crate::csvout;
use crate::manifest::Run;
use crate::{cmds, RunArgs};

pub fn run(args: &RunArgs) -> anyhow::Result<()> {
    let mut cfg: TrainMainConfig = load_config(&args.config, "train-main")?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(t) = args.threads {
        cfg.threads = t;
    }
    let scenario = cfg.scenario.normalize()?;

    let data = cfg.data.load()?;
    cmds::require_nonempty(&data)?;
    let arch = cfg.arch.to_spec(data.input_shape(), data.classes())?;

    let mut run = Run::new(
        "train-main",
        cmds::out_dir(args, "train-main"),
        resolved_value(&cfg)?,
        cfg.seed,
        cfg.threads,
    )?;
    run.record_dataset("train", &data);

    let mut model = build_model(cfg.name.clone(), &arch, cfg.seed)?;
    println!(
        "train-main: {} ({} parameters) on {} ({} examples, scenario {})",
        cfg.name,
        model.count_params(),
        data.id(),
        data.len(),
        scenario.name
    );

    let log = fit_classifier(
        &mut model,
        &data,
        &FitConfig {
            epochs: cfg.epochs,
            batch: cfg.batch,
            lr: cfg.lr,
            lr_decay: cfg.lr_decay,
            scenario,
            seed: cfg.seed,
            stop_at_accuracy: cfg.stop_at_accuracy,
        },
    )?;
    for e in &log {
        println!(
            "epoch {:>3}  loss {:.4}  lr {:.5}  train acc {:.4}",
            e.epoch, e.mean_loss, e.lr, e.accuracy
        );
    }
    model.freeze();

    let model_rel = format!("{}.rvcl", cfg.name);
    save_model(&model, run.path(&model_rel))?;
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
        run.record_metric("final_train_accuracy", e.accuracy);
        run.record_metric("final_mean_loss", e.mean_loss);
    }

    if let Some(spec) = &cfg.test {
        let test = spec.load()?;
        cmds::require_nonempty(&test)?;
        run.record_dataset("test", &test);
        let rep = evaluate(
            &model,
            None,
            &test,
            &EvalConfig {
                scenario: Scenario::identity(),
                seed: cfg.seed,
                input_range: UNBOUNDED,
                negate: false,
                threads: cfg.threads,
            },
        )?;
        println!("test accuracy {:.4} on {}", rep.accuracy, test.id());
        run.record_metric("test_accuracy", rep.accuracy);
    }

    let manifest = run.finish()?;
    println!("wrote {}", manifest.display());
    Ok(())
}
