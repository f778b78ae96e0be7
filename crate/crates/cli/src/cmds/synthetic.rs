//! `revcal synthetic`: self-contained 2-D demonstrations with plots.
//!
//! `rings`: a linear classifier cannot separate two concentric rings, an
//! additive calibrater moves every point to the right side of the line,
//! and negating that same calibrater throws nearly every point to the
//! wrong side. Repair and attack are the same machine run backwards.
//!
//! `arcs`: a classifier trained on two ellipse rings never sees the arcs
//! where the rings cross the class boundary; a multiplicative calibrater
//! trained only on those arcs drags them back to the correct side.

use revcal_core::data::{gen_circles, gen_ellipses};
use revcal_core::model::{build_model, ArchSpec, Head};
use revcal_core::perturb::{merge, negate_delta, MergeMode, UNBOUNDED};
use revcal_core::training::{
    evaluate, fit_classifier, train_calibrater, CalObjective, CalTrainConfig, EvalConfig,
    FitConfig,
};
use revcal_core::transform::Scenario;
use revcal_core::Tensor;

use crate::config::{load_config, resolved_value, SyntheticConfig, SyntheticTask};
use crate::csvout;
use crate::manifest::Run;
use crate::svg::{boundary_grid, scatter_svg, Bounds, BOUNDARY_RES};
use crate::{cmds, RunArgs};

pub fn run(args: &RunArgs) -> anyhow::Result<()> {
    let mut cfg: SyntheticConfig = load_config(&args.config, "synthetic")?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(t) = args.threads {
        cfg.threads = t;
    }
    let run = Run::new(
        "synthetic",
        cmds::out_dir(args, "synthetic"),
        resolved_value(&cfg)?,
        cfg.seed,
        cfg.threads,
    )?;
    match cfg.task {
        SyntheticTask::Rings => rings(cfg, run),
        SyntheticTask::Arcs => arcs(cfg, run),
    }
}

fn plain_eval(threads: usize) -> EvalConfig {
    EvalConfig {
        scenario: Scenario::identity(),
        seed: 0,
        input_range: UNBOUNDED,
        negate: false,
        threads,
    }
}

fn xy(inputs: &Tensor) -> Vec<(f64, f64)> {
    inputs.data().chunks(2).map(|c| (c[0], c[1])).collect()
}

fn write_plot(
    run: &mut Run,
    rel: &str,
    title: &str,
    bounds: &Bounds,
    raster: &[usize],
    inputs: &Tensor,
    labels: &Tensor,
) -> anyhow::Result<()> {
    let pts = cmds::plot_points(inputs, labels);
    let svg = scatter_svg(title, bounds, Some((BOUNDARY_RES, raster)), &pts);
    std::fs::write(run.path(rel), svg)?;
    run.record_output(rel);
    Ok(())
}

fn rings(cfg: SyntheticConfig, mut run: Run) -> anyhow::Result<()> {
    let train = gen_circles(cfg.n, cfg.seed)?;
    let test = gen_circles(cfg.n, cfg.seed.wrapping_add(1))?;
    run.record_dataset("train", &train);
    run.record_dataset("test", &test);

    let mut main = build_model("rings-linear", &ArchSpec::linear(2, 2), cfg.seed)?;
    fit_classifier(
        &mut main,
        &train,
        &FitConfig {
            epochs: cfg.main_epochs,
            batch: cfg.batch,
            lr: cfg.lr,
            lr_decay: 1.0,
            scenario: Scenario::identity(),
            seed: cfg.seed,
            stop_at_accuracy: None,
        },
    )?;
    main.freeze();

    let head = Head::Additive { eps: cfg.eps };
    let mut cal = build_model(
        "rings-calibrater",
        &ArchSpec::calibrater_dense(2, cfg.hidden.clone(), head),
        cfg.seed.wrapping_add(1),
    )?;
    let log = train_calibrater(
        &mut cal,
        &main,
        &train,
        &CalTrainConfig {
            epochs: cfg.cal_epochs,
            batch: cfg.batch,
            lr: cfg.lr,
            lr_decay: 1.0,
            scenario: Scenario::identity(),
            seed: cfg.seed.wrapping_add(2),
            input_range: UNBOUNDED,
            objective: CalObjective::TrueProb,
        },
    )?;
    if let Some(e) = log.last() {
        println!("calibrater training finished at accuracy {:.4}", e.accuracy);
    }
    cal.freeze();

    let ev = plain_eval(cfg.threads);
    let raw = evaluate(&main, None, &test, &ev)?.accuracy;
    let calibrated = evaluate(&main, Some(&cal), &test, &ev)?.accuracy;
    let negated = evaluate(
        &main,
        Some(&cal),
        &test,
        &EvalConfig {
            negate: true,
            ..ev
        },
    )?
    .accuracy;
    println!(
        "rings: raw {raw:.4}, calibrated {calibrated:.4}, negated {negated:.4} (n {})",
        test.len()
    );

    // Where the calibrater actually puts the points, in both directions.
    let delta = cal.output(test.inputs())?;
    let moved = merge(test.inputs(), &delta, MergeMode::Additive, UNBOUNDED)?;
    let neg = negate_delta(&delta, MergeMode::Additive)?;
    let moved_neg = merge(test.inputs(), &neg, MergeMode::Additive, UNBOUNDED)?;

    let bounds = Bounds::union(
        Bounds::of_points(&xy(test.inputs())),
        Bounds::union(
            Bounds::of_points(&xy(&moved)),
            Bounds::of_points(&xy(&moved_neg)),
        ),
    );
    let raster = boundary_grid(&main, &bounds, BOUNDARY_RES)?;
    write_plot(
        &mut run,
        "rings-raw.svg",
        &format!("raw rings, linear classifier, accuracy {raw:.3}"),
        &bounds,
        &raster,
        test.inputs(),
        test.labels(),
    )?;
    write_plot(
        &mut run,
        "rings-calibrated.svg",
        &format!("calibrated points, accuracy {calibrated:.3}"),
        &bounds,
        &raster,
        &moved,
        test.labels(),
    )?;
    write_plot(
        &mut run,
        "rings-negated.svg",
        &format!("calibrater negated, accuracy {negated:.3}"),
        &bounds,
        &raster,
        &moved_neg,
        test.labels(),
    )?;

    let rows = vec![
        format!("rings,raw,{},{}", csvout::cell(raw), test.len()),
        format!("rings,calibrated,{},{}", csvout::cell(calibrated), test.len()),
        format!("rings,negated,{},{}", csvout::cell(negated), test.len()),
    ];
    csvout::append(&run.path("synthetic.csv"), &csvout::SYNTHETIC, &rows)?;
    run.record_output("synthetic.csv");
    run.record_metric("raw_accuracy", raw);
    run.record_metric("calibrated_accuracy", calibrated);
    run.record_metric("negated_accuracy", negated);

    let manifest = run.finish()?;
    println!("wrote {}", manifest.display());
    Ok(())
}

fn arcs(cfg: SyntheticConfig, mut run: Run) -> anyhow::Result<()> {
    let train = gen_ellipses(cfg.n, cfg.seed)?;
    let test = gen_ellipses(cfg.n, cfg.seed.wrapping_add(1))?;
    run.record_dataset("train-seen", &train.seen);
    run.record_dataset("train-hidden", &train.hidden);
    run.record_dataset("test-seen", &test.seen);
    run.record_dataset("test-hidden", &test.hidden);

    let mut main = build_model("arcs-mlp", &ArchSpec::mlp(2, vec![16], 2), cfg.seed)?;
    fit_classifier(
        &mut main,
        &train.seen,
        &FitConfig {
            epochs: cfg.main_epochs,
            batch: cfg.batch,
            lr: cfg.lr,
            lr_decay: 1.0,
            scenario: Scenario::identity(),
            seed: cfg.seed,
            stop_at_accuracy: Some(1.0),
        },
    )?;
    main.freeze();

    let mut cal = build_model(
        "arcs-calibrater",
        &ArchSpec::calibrater_dense(2, cfg.hidden.clone(), Head::Multiplicative),
        cfg.seed.wrapping_add(1),
    )?;
    train_calibrater(
        &mut cal,
        &main,
        &train.hidden,
        &CalTrainConfig {
            epochs: cfg.cal_epochs,
            batch: cfg.batch,
            lr: cfg.lr,
            lr_decay: 1.0,
            scenario: Scenario::identity(),
            seed: cfg.seed.wrapping_add(2),
            input_range: UNBOUNDED,
            objective: CalObjective::TrueProb,
        },
    )?;
    cal.freeze();

    let ev = plain_eval(cfg.threads);
    let seen_train = evaluate(&main, None, &train.seen, &ev)?.accuracy;
    let seen = evaluate(&main, None, &test.seen, &ev)?.accuracy;
    let hidden_raw = evaluate(&main, None, &test.hidden, &ev)?.accuracy;
    let hidden_cal = evaluate(&main, Some(&cal), &test.hidden, &ev)?.accuracy;
    println!(
        "arcs: seen-train {seen_train:.4}, seen {seen:.4}, hidden raw {hidden_raw:.4}, \
         hidden calibrated {hidden_cal:.4}"
    );

    let delta = cal.output(test.hidden.inputs())?;
    let moved = merge(
        test.hidden.inputs(),
        &delta,
        MergeMode::Multiplicative,
        UNBOUNDED,
    )?;

    let bounds = Bounds::union(
        Bounds::union(
            Bounds::of_points(&xy(test.seen.inputs())),
            Bounds::of_points(&xy(test.hidden.inputs())),
        ),
        Bounds::of_points(&xy(&moved)),
    );
    let raster = boundary_grid(&main, &bounds, BOUNDARY_RES)?;
    write_plot(
        &mut run,
        "arcs-seen.svg",
        &format!("training arcs, accuracy {seen:.3}"),
        &bounds,
        &raster,
        test.seen.inputs(),
        test.seen.labels(),
    )?;
    write_plot(
        &mut run,
        "arcs-hidden.svg",
        &format!("withheld arcs, accuracy {hidden_raw:.3}"),
        &bounds,
        &raster,
        test.hidden.inputs(),
        test.hidden.labels(),
    )?;
    write_plot(
        &mut run,
        "arcs-hidden-calibrated.svg",
        &format!("withheld arcs after calibration, accuracy {hidden_cal:.3}"),
        &bounds,
        &raster,
        &moved,
        test.hidden.labels(),
    )?;
    // Combined view: the seen arcs plus the calibrated hidden arcs.
    let mut all_inputs = test.seen.inputs().data().to_vec();
    all_inputs.extend_from_slice(moved.data());
    let mut all_labels = test.seen.labels().data().to_vec();
    all_labels.extend_from_slice(test.hidden.labels().data().to_vec().as_slice());
    let n_all = test.seen.len() + test.hidden.len();
    let all_x = Tensor::from_vec(vec![n_all, 2], all_inputs)?;
    let all_y = Tensor::from_vec(vec![n_all, 2], all_labels)?;
    write_plot(
        &mut run,
        "arcs-all.svg",
        "seen arcs with calibrated hidden arcs",
        &bounds,
        &raster,
        &all_x,
        &all_y,
    )?;

    let rows = vec![
        format!("arcs,seen-train,{},{}", csvout::cell(seen_train), train.seen.len()),
        format!("arcs,seen,{},{}", csvout::cell(seen), test.seen.len()),
        format!("arcs,hidden-raw,{},{}", csvout::cell(hidden_raw), test.hidden.len()),
        format!(
            "arcs,hidden-calibrated,{},{}",
            csvout::cell(hidden_cal),
            test.hidden.len()
        ),
    ];
    csvout::append(&run.path("synthetic.csv"), &csvout::SYNTHETIC, &rows)?;
    run.record_output("synthetic.csv");
    run.record_metric("seen_train_accuracy", seen_train);
    run.record_metric("seen_accuracy", seen);
    run.record_metric("hidden_raw_accuracy", hidden_raw);
    run.record_metric("hidden_calibrated_accuracy", hidden_cal);

    let manifest = run.finish()?;
    println!("wrote {}", manifest.display());
    Ok(())
}
