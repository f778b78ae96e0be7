//! `revcal attack`: run the iterative sign-gradient perturbation over a
//! test set, in either direction, and report how far accuracy moved.
//!
//! The set is processed in fixed blocks so graph memory stays bounded; the
//! confidence trace is the example-weighted mean over blocks, which keeps
//! the output independent of the block size actually used.

use revcal_core::data::Dataset;
use revcal_core::model::build_model;
use revcal_core::perturb::{self, flip_rate, iterative_attack, UNBOUNDED};
use revcal_core::training::{evaluate, EvalConfig, EVAL_BLOCK};
use revcal_core::transform::Scenario;
use revcal_core::Tensor;

use crate::config::{
    check_range, load_config, resolved_value, to_core_range, AttackCmdConfig, Direction,
};
use crate::csvout;
use crate::manifest::Run;
use crate::{cmds, RunArgs};

pub fn run(args: &RunArgs) -> anyhow::Result<()> {
    let mut cfg: AttackCmdConfig = load_config(&args.config, "attack")?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(t) = args.threads {
        cfg.threads = t;
    }
    check_range(cfg.input_range)?;
    if cfg.steps > 0 {
        cfg.step_size = Some(
            cfg.step_size
                .unwrap_or_else(|| perturb::AttackConfig::default_step(cfg.budget, cfg.steps)),
        );
    }

    let data = cfg.data.load()?;
    cmds::require_nonempty(&data)?;

    let model = match (&cfg.model, &cfg.random_arch) {
        (Some(path), None) => cmds::load_model(path)?,
        (None, Some(choice)) => {
            let arch = choice.to_spec(data.input_shape(), data.classes())?;
            let mut m = build_model("random", &arch, cfg.seed)?;
            m.freeze();
            m
        }
        _ => anyhow::bail!("give exactly one of `model` (a file) or `random_arch`"),
    };

    let mut run = Run::new(
        "attack",
        cmds::out_dir(args, "attack"),
        resolved_value(&cfg)?,
        cfg.seed,
        cfg.threads,
    )?;
    if let Some(path) = &cfg.model {
        run.record_input_model("model", path)?;
    }
    run.record_dataset("test", &data);

    let direction_label = match cfg.direction {
        Direction::Adversarial => "adversarial",
        Direction::Reverse => "reverse",
    };
    let acfg = perturb::AttackConfig {
        mode: cfg.mode,
        budget: cfg.budget,
        steps: cfg.steps,
        step_size: cfg.step_size.unwrap_or(0.0),
        ascend: cfg.direction == Direction::Adversarial,
        input_range: to_core_range(cfg.input_range),
    };
    println!(
        "attack: {} on {} ({} examples), {:?} {}, budget {} over {} steps",
        model.name(),
        data.id(),
        data.len(),
        cfg.mode,
        direction_label,
        cfg.budget,
        cfg.steps
    );

    // Perturb block by block, accumulating outputs and the weighted trace.
    let n = data.len();
    let mut perturbed = Vec::with_capacity(data.inputs().numel());
    let mut trace = vec![0.0; cfg.steps + 1];
    let mut start = 0;
    while start < n {
        let stop = (start + EVAL_BLOCK).min(n);
        let idx: Vec<usize> = (start..stop).collect();
        let block = data.subset("block", &idx)?;
        let res = iterative_attack(&model, block.inputs(), block.labels(), &acfg)?;
        perturbed.extend_from_slice(res.perturbed.data());
        for (acc, v) in trace.iter_mut().zip(&res.true_prob_trace) {
            *acc += v * idx.len() as f64;
        }
        start = stop;
    }
    for v in &mut trace {
        *v /= n as f64;
    }
    let mut shape = data.inputs().shape().to_vec();
    shape[0] = n;
    let perturbed = Tensor::from_vec(shape, perturbed)?;

    let eval_cfg = EvalConfig {
        scenario: Scenario::identity(),
        seed: cfg.seed,
        input_range: UNBOUNDED,
        negate: false,
        threads: cfg.threads,
    };
    let pre = evaluate(&model, None, &data, &eval_cfg)?.accuracy;
    let after_data = Dataset::new(format!("{}-attacked", data.id()), perturbed.clone(), data.labels().clone())?;
    let post = evaluate(&model, None, &after_data, &eval_cfg)?.accuracy;
    let flips = flip_rate(&model, data.inputs(), &perturbed)?;
    println!(
        "accuracy {:.4} -> {:.4}  (flip rate {:.4}, true-class prob {:.4} -> {:.4})",
        pre,
        post,
        flips,
        trace.first().copied().unwrap_or(f64::NAN),
        trace.last().copied().unwrap_or(f64::NAN)
    );

    let mode_label = match cfg.mode {
        perturb::MergeMode::Additive => "additive",
        perturb::MergeMode::Multiplicative => "multiplicative",
    };
    let row = format!(
        "{},{},{},{},{},{},{},{},{}",
        model.name(),
        mode_label,
        direction_label,
        cfg.budget,
        cfg.steps,
        csvout::cell(pre),
        csvout::cell(post),
        csvout::cell(flips),
        n
    );
    csvout::append(&run.path(&cfg.results), &csvout::ATTACK, &[row])?;
    run.record_output(&cfg.results);

    let trace_rows: Vec<String> = trace
        .iter()
        .enumerate()
        .map(|(i, v)| format!("{i},{}", csvout::cell(*v)))
        .collect();
    csvout::write_fresh(&run.path("trace.csv"), &csvout::TRACE, &trace_rows)?;
    run.record_output("trace.csv");

    run.record_metric("pre_accuracy", pre);
    run.record_metric("post_accuracy", post);
    run.record_metric("flip_rate", flips);

    let manifest = run.finish()?;
    println!("wrote {}", manifest.display());
    Ok(())
}
