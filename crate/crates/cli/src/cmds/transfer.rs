//! `revcal transfer`: cross every main model with every calibrater on the
//! same shifted data. Mains and calibraters are paired by list position,
//! so cell (i, j) with i != j shows a calibrater helping a model it was
//! never trained for.

use revcal_core::training::{transfer_matrix, EvalConfig};

use crate::config::{check_range, load_config, resolved_value, to_core_range, TransferConfig};
use crate::csvout;
use crate::manifest::Run;
use crate::{cmds, RunArgs};

pub fn run(args: &RunArgs) -> anyhow::Result<()> {
    let mut cfg: TransferConfig = load_config(&args.config, "transfer")?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(t) = args.threads {
        cfg.threads = t;
    }
    let scenario = cfg.scenario.normalize()?;
    check_range(cfg.input_range)?;
    anyhow::ensure!(!cfg.mains.is_empty(), "transfer needs at least one main model");
    anyhow::ensure!(
        !cfg.calibraters.is_empty(),
        "transfer needs at least one calibrater"
    );

    let mut mains = Vec::new();
    for p in &cfg.mains {
        mains.push(cmds::load_model(p)?);
    }
    let mut cals = Vec::new();
    for p in &cfg.calibraters {
        cals.push(cmds::load_model(p)?);
    }
    let data = cfg.data.load()?;
    cmds::require_nonempty(&data)?;

    let mut run = Run::new(
        "transfer",
        cmds::out_dir(args, "transfer"),
        resolved_value(&cfg)?,
        cfg.seed,
        cfg.threads,
    )?;
    for (i, p) in cfg.mains.iter().enumerate() {
        run.record_input_model(&format!("main{i}"), p)?;
    }
    for (j, p) in cfg.calibraters.iter().enumerate() {
        run.record_input_model(&format!("calibrater{j}"), p)?;
    }
    run.record_dataset("test", &data);

    let main_refs: Vec<&_> = mains.iter().collect();
    let cal_refs: Vec<&_> = cals.iter().collect();
    let report = transfer_matrix(
        &main_refs,
        &cal_refs,
        &data,
        &EvalConfig {
            scenario: scenario.clone(),
            seed: cfg.seed,
            input_range: to_core_range(cfg.input_range),
            negate: false,
            threads: cfg.threads,
        },
    )?;

    println!(
        "transfer: {} mains x {} calibraters on {} under {}",
        report.mains.len(),
        report.cals.len(),
        data.id(),
        scenario.name
    );
    let mut rows = Vec::new();
    let mut off_diag = Vec::new();
    for (i, main) in report.mains.iter().enumerate() {
        println!("  {main}: baseline {:.4}", report.baseline[i]);
        rows.push(format!(
            "{main},none,{},",
            csvout::cell(report.baseline[i])
        ));
        for (j, cal) in report.cals.iter().enumerate() {
            let acc = report.cells[i][j];
            let delta = acc - report.baseline[i];
            println!("    with {cal}: {acc:.4} ({delta:+.4})");
            rows.push(format!(
                "{main},{cal},{},{}",
                csvout::cell(acc),
                csvout::cell(delta)
            ));
            run.record_metric(&format!("delta_main{i}_cal{j}"), delta);
            // With equally many mains and calibraters the diagonal pairs
            // each calibrater with its own main; otherwise every cell is a
            // cross-model transfer.
            if report.mains.len() != report.cals.len() || i != j {
                off_diag.push((acc, delta));
            }
        }
    }
    if !off_diag.is_empty() {
        let mean_acc = off_diag.iter().map(|(a, _)| a).sum::<f64>() / off_diag.len() as f64;
        let mean_delta = off_diag.iter().map(|(_, d)| d).sum::<f64>() / off_diag.len() as f64;
        println!("mean off-diagonal delta {mean_delta:+.4} over {} cells", off_diag.len());
        rows.push(format!(
            "all,mean-off-diagonal,{},{}",
            csvout::cell(mean_acc),
            csvout::cell(mean_delta)
        ));
        run.record_metric("mean_off_diagonal_delta", mean_delta);
    }
    csvout::append(&run.path(&cfg.results), &csvout::TRANSFER, &rows)?;
    run.record_output(&cfg.results);

    let manifest = run.finish()?;
    println!("wrote {}", manifest.display());
    Ok(())
}
