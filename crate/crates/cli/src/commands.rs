//! The subcommands.

use std::path::Path;

use attrib_core::attribution::Overlay;
use attrib_core::decay::{recovery_report, write_trajectory_csv};
use attrib_core::eval::{
    compare, evaluate_methods, summarize, write_comparisons_csv, write_records_csv, write_summary_csv,
    SaliencyMethod,
};
use attrib_core::netzoo::analysis::{evaluate_topk, scale_shift_sweep, zero_bias_report};
use attrib_core::netzoo::{build_network_with, synth_patch_dataset, DatasetManifest, InitOptions, Split};
use attrib_core::{
    run_decay, Checkpoint, Dataset, DistillConfig, EvalConfig, Explainer, InputShape, Method,
    PerturbConfig,
};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{existing, require, Config};
use crate::run::Run;
use crate::CliError;

/// Everything a command needs besides its own section.
pub struct Context {
    pub config: Config,
    pub seed: u64,
}

fn internal(e: impl ToString) -> CliError {
    CliError::Internal(e.to_string())
}

fn load_data(ctx: &Context, run: &mut Run) -> Result<(Dataset, Dataset), CliError> {
    let data = ctx.config.data.as_ref();
    if let Some(patch) = data.and_then(|d| d.patch.as_ref()) {
        if data.and_then(|d| d.manifest.as_ref()).is_some() {
            return Err(CliError::Config("set either `data.manifest` or `[data.patch]`, not both".into()));
        }
        let cfg = patch.patch_config();
        let train = synth_patch_dataset(patch.seed, patch.train, cfg, Split::Train).map_err(CliError::config)?;
        let test = synth_patch_dataset(patch.seed + 1, patch.test, cfg, Split::Test).map_err(CliError::config)?;
        return Ok((train, test));
    }
    let path = require(data.and_then(|d| d.manifest.as_ref()), "data.manifest")?;
    existing(path, "data.manifest")?;
    run.input(path)?;
    let manifest = DatasetManifest::load(path).map_err(CliError::config)?;
    let train = manifest.load_split(Split::Train).map_err(CliError::config)?;
    let test = manifest.load_split(Split::Test).map_err(CliError::config)?;
    Ok((train, test))
}

fn load_checkpoint(path: &Path, key: &str, run: &mut Run, data: &Dataset) -> Result<Checkpoint, CliError> {
    existing(path, key)?;
    run.input(path)?;
    let ck = Checkpoint::load(path).map_err(|e| CliError::Config(format!("{key}: {e}")))?;
    let [_, h, w, c] = data.dims();
    let spec = ck.spec();
    if spec.input != InputShape::new(h, w, c) || spec.classes != data.classes() {
        return Err(CliError::Config(format!(
            "{key}: network expects {}x{}x{} inputs and {} classes, dataset has {h}x{w}x{c} and {}",
            spec.input.height,
            spec.input.width,
            spec.input.channels,
            spec.classes,
            data.classes()
        )));
    }
    Ok(ck)
}

fn parse_methods(names: &[String], depth: usize, key: &str) -> Result<Vec<Method>, CliError> {
    names
        .iter()
        .map(|n| {
            let m: Method = n.parse().map_err(|e| CliError::Config(format!("{key}: {e}")))?;
            m.validate(depth).map_err(|e| CliError::Config(format!("{key}: {e}")))?;
            Ok(m)
        })
        .collect()
}

fn csv_bytes(f: impl FnOnce(&mut Vec<u8>) -> attrib_core::Result<()>) -> Result<Vec<u8>, CliError> {
    let mut buf = Vec::new();
    f(&mut buf).map_err(internal)?;
    Ok(buf)
}

#[derive(Serialize)]
struct TrainMetrics {
    train_top1: f64,
    test_top1: f64,
    steps: usize,
    final_loss: Option<f64>,
    diverged_at: Option<usize>,
    parameters: usize,
}

pub fn train(ctx: &Context, run: &mut Run) -> Result<(), CliError> {
    let model = require(ctx.config.model.as_ref(), "model")?;
    let section = ctx.config.train.clone().unwrap_or_default();
    let (train, test) = load_data(ctx, run)?;
    let [_, h, w, c] = train.dims();
    let spec = model.spec(InputShape::new(h, w, c), train.classes());
    let init = InitOptions {
        bias_std: model.init_bias_std,
        ..InitOptions::default()
    };
    let ck = build_network_with(&spec, ctx.seed, init).map_err(CliError::config)?;
    let cfg = attrib_core::netzoo::TrainConfig {
        epochs: section.epochs,
        batch_size: section.batch_size,
        optimizer: section.optimizer,
        lr: section.lr,
        seed: ctx.seed,
    };
    if cfg.batch_size == 0 || !(cfg.lr >= 0.0 && cfg.lr.is_finite()) {
        return Err(CliError::Config(format!("train: bad batch_size or lr in {section:?}")));
    }
    let outcome = attrib_core::netzoo::train_classifier(&ck, &train, &cfg).map_err(internal)?;
    let ck = outcome.checkpoint;
    let metrics = TrainMetrics {
        train_top1: evaluate_topk(&ck, &train, 1).map_err(internal)?,
        test_top1: evaluate_topk(&ck, &test, 1).map_err(internal)?,
        steps: outcome.losses.len(),
        final_loss: outcome.losses.last().copied(),
        diverged_at: outcome.diverged_at,
        parameters: ck.parameter_count(),
    };
    let path = run.path("checkpoint.bin")?;
    ck.save(&path).map_err(internal)?;
    let mut losses = String::from("step,loss\n");
    for (i, l) in outcome.losses.iter().enumerate() {
        losses.push_str(&format!("{i},{l}\n"));
    }
    run.write("losses.csv", losses.as_bytes())?;
    run.write_json("metrics.json", &metrics)?;
    if let Some(step) = outcome.diverged_at {
        eprintln!("warning: training diverged at step {step}; kept the last finite checkpoint");
    }
    println!("train top-1 {:.4}  test top-1 {:.4}", metrics.train_top1, metrics.test_top1);
    Ok(())
}

#[derive(Serialize)]
struct MapDump {
    method: String,
    warning: Option<String>,
    values: Vec<Vec<f64>>,
}

#[derive(Serialize)]
struct ImageDump {
    image_id: usize,
    label: usize,
    class: usize,
    logits: Vec<f64>,
    decomposition: attrib_core::DecompositionReport,
    maps: Vec<MapDump>,
}

fn file_stem(method: &Method) -> String {
    method.to_string().replace(':', "-")
}

pub fn explain(ctx: &Context, run: &mut Run) -> Result<(), CliError> {
    let section = require(ctx.config.explain.as_ref(), "explain")?;
    let (_, test) = load_data(ctx, run)?;
    let ck = load_checkpoint(&section.checkpoint, "explain.checkpoint", run, &test)?;
    let depth = ck.spec().layout().map_err(internal)?.depth();
    let methods = parse_methods(&section.methods, depth, "explain.methods")?;
    if let Some(&bad) = section.images.iter().find(|&&i| i >= test.len()) {
        return Err(CliError::Config(format!(
            "explain.images: index {bad} outside a test split of {}",
            test.len()
        )));
    }
    let mut seen = std::collections::BTreeSet::new();
    if let Some(dup) = section.images.iter().find(|&&i| !seen.insert(i)) {
        return Err(CliError::Config(format!("explain.images: index {dup} listed twice")));
    }
    let results: Vec<_> = section
        .images
        .par_iter()
        .map(|&id| -> Result<_, CliError> {
            let image = test.image(id);
            let ex = Explainer::predicted(&ck, &image).map_err(internal)?;
            let maps = methods
                .iter()
                .map(|m| m.saliency(&ck, &test, id, &ex).map_err(internal))
                .collect::<Result<Vec<_>, _>>()?;
            let decomposition = ex.decomposition().map_err(internal)?;
            Ok((id, image, ex.class(), ex.logits().data().to_vec(), decomposition, maps))
        })
        .collect();

    for r in results {
        let (id, image, class, logits, decomposition, maps) = r?;
        let mut dumps = Vec::new();
        for (m, s) in methods.iter().zip(&maps) {
            let path = run.path(format!("heatmaps/img{id:04}_{}.png", file_stem(m)))?;
            let overlay = section.overlay.then_some(Overlay {
                image: &image,
                alpha: 0.6,
            });
            s.render(&path, overlay).map_err(internal)?;
            if let Some(w) = &s.provenance.warning {
                eprintln!("warning: image {id}, {m}: {w}");
            }
            let (h, w) = s.grid();
            dumps.push(MapDump {
                method: m.to_string(),
                warning: s.provenance.warning.clone(),
                values: s.values().data().chunks(w).take(h).map(<[f64]>::to_vec).collect(),
            });
        }
        run.write_json(
            format!("attributions/img{id:04}.json"),
            &ImageDump {
                image_id: id,
                label: test.labels()[id],
                class,
                logits,
                decomposition,
                maps: dumps,
            },
        )?;
    }
    println!("{} heatmaps for {} images", methods.len() * section.images.len(), section.images.len());
    Ok(())
}

/// Smallest sample for which the paired statistics are reported.
pub const MIN_IMAGES: usize = 5;

pub fn evaluate(ctx: &Context, run: &mut Run) -> Result<(), CliError> {
    let section = require(ctx.config.evaluate.as_ref(), "evaluate")?;
    let (_, test) = load_data(ctx, run)?;
    let ck = load_checkpoint(&section.checkpoint, "evaluate.checkpoint", run, &test)?;
    let depth = ck.spec().layout().map_err(internal)?.depth();
    let methods = parse_methods(&section.methods, depth, "evaluate.methods")?;
    if methods.len() < 2 {
        return Err(CliError::Config("evaluate.methods: comparisons need at least two methods".into()));
    }
    let n = section.images.unwrap_or(test.len());
    if n > test.len() {
        return Err(CliError::Config(format!(
            "evaluate.images: {n} requested, the test split has {}",
            test.len()
        )));
    }
    if n < MIN_IMAGES {
        return Err(CliError::Insufficient(format!(
            "{n} images; paired statistics need at least {MIN_IMAGES}"
        )));
    }
    let cfg = EvalConfig {
        perturb: PerturbConfig {
            step_fraction: section.perturb.step_fraction,
            removal_value: section.perturb.removal_value,
            max_fraction: section.perturb.max_fraction,
            ..PerturbConfig::default()
        },
        noise_draws: section.noise_draws,
        seed: ctx.seed,
    };
    cfg.perturb
        .validate()
        .map_err(|e| CliError::Config(format!("evaluate.perturb: {e}")))?;
    let ids: Vec<usize> = (0..n).collect();
    let dyn_methods: Vec<&dyn SaliencyMethod> = methods.iter().map(|m| m as &dyn SaliencyMethod).collect();
    let records = evaluate_methods(&ck, &test, &ids, &dyn_methods, &cfg).map_err(CliError::from_core)?;
    let failed = records.iter().filter(|r| r.error.is_some()).count();
    if failed > 0 {
        eprintln!("warning: {failed} of {} evaluations failed; their metrics are NaN", records.len());
    }

    let mut comparisons = Vec::new();
    for i in 0..methods.len() {
        for j in i + 1..methods.len() {
            for &metric in &section.metrics {
                let c = compare(&records, &methods[i].to_string(), &methods[j].to_string(), metric)
                    .map_err(CliError::from_core)?;
                if c.is_degenerate() {
                    eprintln!("note: {} vs {} on {metric}: every difference is zero", c.method_a, c.method_b);
                }
                comparisons.push(c);
            }
        }
    }
    let mut summary = Vec::new();
    for &metric in &section.metrics {
        summary.extend(summarize(&records, metric).map_err(CliError::from_core)?);
    }
    let bytes = csv_bytes(|b| write_records_csv(b, &records))?;
    run.write("records.csv", &bytes)?;
    let bytes = csv_bytes(|b| write_comparisons_csv(b, &comparisons))?;
    run.write("comparisons.csv", &bytes)?;
    let bytes = csv_bytes(|b| write_summary_csv(b, &summary))?;
    run.write("summary.csv", &bytes)?;
    for c in &comparisons {
        let p = c.test.as_ref().map_or("degenerate".to_string(), |t| format!("{:.3e}", t.p));
        println!(
            "{:>24} vs {:<24} {:<9} median diff {:+.4}  p {p}",
            c.method_a, c.method_b, c.metric, c.median_diff
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct DecaySummary {
    teacher_top1: f64,
    final_top1: f64,
    recovery: attrib_core::decay::Recovery,
    diverged_at: Option<usize>,
}

pub fn decay(ctx: &Context, run: &mut Run) -> Result<(), CliError> {
    let section = require(ctx.config.decay.as_ref(), "decay")?;
    let (train, test) = load_data(ctx, run)?;
    let teacher = load_checkpoint(&section.checkpoint, "decay.checkpoint", run, &test)?;
    section
        .schedule
        .validate()
        .map_err(|e| CliError::Config(format!("decay.schedule: {e}")))?;
    let d = &section.distill;
    if d.batch_size == 0 || !(d.lr >= 0.0 && d.lr.is_finite()) || !(d.temperature > 0.0) {
        return Err(CliError::Config(format!("decay.distill: bad settings {d:?}")));
    }
    let eval = match section.eval_images {
        Some(n) if n == 0 || n > test.len() => {
            return Err(CliError::Config(format!(
                "decay.eval_images: {n} outside 1..={}",
                test.len()
            )))
        }
        Some(n) => test.take(n).map_err(internal)?,
        None => test,
    };
    let cfg = DistillConfig {
        temperature: d.temperature,
        optimizer: d.optimizer,
        lr: d.lr,
        batch_size: d.batch_size,
        seed: ctx.seed,
    };
    let outcome = run_decay(&teacher, &teacher, &train, &eval, &section.schedule, &cfg).map_err(CliError::from_core)?;
    let recovery = recovery_report(&outcome.trajectory, outcome.teacher_top1).map_err(CliError::from_core)?;
    let path = run.path("checkpoint.bin")?;
    outcome.checkpoint.save(&path).map_err(internal)?;
    let bytes = csv_bytes(|b| write_trajectory_csv(b, &outcome.trajectory))?;
    run.write("trajectory.csv", &bytes)?;
    let summary = DecaySummary {
        teacher_top1: outcome.teacher_top1,
        final_top1: outcome.trajectory.last().map_or(f64::NAN, |r| r.top1),
        recovery,
        diverged_at: outcome.diverged_at,
    };
    run.write_json("recovery.json", &summary)?;
    if let Some(step) = outcome.diverged_at {
        eprintln!("warning: fine-tuning diverged at rescale {step}");
    }
    println!(
        "teacher top-1 {:.4}  final top-1 {:.4}  recovery {:.4}",
        summary.teacher_top1, summary.final_top1, recovery.fraction
    );
    Ok(())
}

pub fn robustness(ctx: &Context, run: &mut Run) -> Result<(), CliError> {
    let section = require(ctx.config.robustness.as_ref(), "robustness")?;
    let (_, test) = load_data(ctx, run)?;
    let ck = load_checkpoint(&section.checkpoint, "robustness.checkpoint", run, &test)?;
    if section.scales.is_empty() || section.shifts.is_empty() {
        return Err(CliError::Config("robustness: scales and shifts must be non-empty".into()));
    }
    let table = scale_shift_sweep(&ck, &test, &section.scales, &section.shifts)
        .map_err(|e| CliError::Config(format!("robustness.scales: {e}")))?;
    let mut csv = String::from("scale,shift,top1\n");
    for (i, s) in table.scales.iter().enumerate() {
        for (j, t) in table.shifts.iter().enumerate() {
            csv.push_str(&format!("{s},{t},{}\n", table.accuracy[i][j]));
        }
    }
    run.write("accuracy.csv", csv.as_bytes())?;
    let report = zero_bias_report(&ck, &test).map_err(CliError::from_core)?;
    run.write_json("regression.json", &report)?;
    for (i, s) in table.scales.iter().enumerate() {
        let row: Vec<String> = table.accuracy[i].iter().map(|a| format!("{a:.4}")).collect();
        println!("scale {s:>10}: {}", row.join(" "));
    }
    println!(
        "zero-bias top-1 {:.4} (vanilla {:.4}), mean logit correlation {:.4}",
        report.zero_bias_top1, report.vanilla_top1, report.mean_correlation
    );
    Ok(())
}
