//! `revcal visualize-delta`: render what calibraters actually emit. Each
//! sample image becomes one PGM of the pure perturbation, mid-gray where
//! the delta does nothing.

use revcal_core::transform::scenario_apply;
use revcal_core::Tensor;

use crate::config::{load_config, resolved_value, VisualizeDeltaConfig};
use crate::manifest::Run;
use crate::{cmds, RunArgs};

pub fn run(args: &RunArgs) -> anyhow::Result<()> {
    let mut cfg: VisualizeDeltaConfig = load_config(&args.config, "visualize-delta")?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(t) = args.threads {
        cfg.threads = t;
    }
    let scenario = cfg.scenario.normalize()?;
    anyhow::ensure!(!cfg.calibraters.is_empty(), "no calibraters given");
    anyhow::ensure!(cfg.count > 0, "count must be positive");

    let data = cfg.data.load()?;
    anyhow::ensure!(
        cfg.count <= data.len(),
        "asked for {} samples but {} has only {}",
        cfg.count,
        data.id(),
        data.len()
    );

    let mut run = Run::new(
        "visualize-delta",
        cmds::out_dir(args, "visualize-delta"),
        resolved_value(&cfg)?,
        cfg.seed,
        cfg.threads,
    )?;
    run.record_dataset("samples", &data);

    let idx: Vec<usize> = (0..cfg.count).collect();
    let sample = data.subset("samples", &idx)?;
    let shifted = scenario_apply(&scenario, sample.inputs(), cfg.seed)?;

    let mut files = 0usize;
    for (ci, path) in cfg.calibraters.iter().enumerate() {
        let cal = cmds::load_model(path)?;
        let head = cal.arch().head.ok_or_else(|| {
            anyhow::anyhow!("model {} is not a calibrater (no perturbation head)", cal.name())
        })?;
        run.record_input_model(&format!("calibrater{ci}"), path)?;

        let deltas = cal.output(&shifted)?;
        let per = deltas.numel() / cfg.count;
        // The dataset fixes the image geometry; dense calibraters emit flat
        // rows, so shape each delta by the input's own axes.
        let input_shape: Vec<usize> = sample.inputs().shape()[1..].to_vec();
        let shape: Vec<usize> = if input_shape.iter().product::<usize>() == per {
            input_shape
        } else {
            deltas.shape()[1..].to_vec()
        };
        let mut var_sum = 0.0;
        for i in 0..cfg.count {
            let slice = deltas.data()[i * per..(i + 1) * per].to_vec();
            let mean = slice.iter().sum::<f64>() / per as f64;
            var_sum += slice.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / per as f64;
            let one = Tensor::from_vec(shape.clone(), slice)?;
            let pgm = revcal_core::perturb::perturbation_pgm(&one, head.merge_mode())?;
            let rel = format!("delta-{ci}-{}-{i:02}.pgm", cal.name());
            std::fs::write(run.path(&rel), pgm)?;
            run.record_output(&rel);
            files += 1;
        }
        run.record_metric(
            &format!("mean_delta_variance_{ci}"),
            var_sum / cfg.count as f64,
        );
        println!(
            "{}: {} images, mean delta variance {:.6}",
            cal.name(),
            cfg.count,
            var_sum / cfg.count as f64
        );
    }
    println!("{files} perturbation images");

    let manifest = run.finish()?;
    println!("wrote {}", manifest.display());
    Ok(())
}
