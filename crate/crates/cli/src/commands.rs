//! One function per subcommand.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use coto_core::game::{concentration_summary, shapley_exact, shapley_multilinear, CoalitionValue, ContributionReport};
use coto_core::merge::{
    aligned_fusion, alignment_table, interpolate_sweep, midpoint_drop, stacked_ensemble, sweep_table, weight_fusion,
    AlignSettings, MergeMode,
};
use coto_core::prune::{prune_sweep, prune_table, PrunePattern, PruneSetting, SparsitySpec};
use coto_core::report::{fmt_f64, CsvTable};
use coto_core::rng::{self, Purpose};
use coto_core::tasks::gen_teacher_task;
use coto_core::theory::{p_grid, verify_bound};
use coto_core::trainer::{weight_distance_report, Trainer};
use coto_core::{evaluate, Architecture, Checkpoint, Data, Error, LossKind, Mat, Model, Nonlinearity};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::artifacts::{
    config_for, ensure_dir, save, write_json, write_table, write_text, LoadedCheckpoint, Provenance,
};
use crate::cli::*;
use crate::config::{RunConfig, TaskConfig};
use crate::error::CliError;

/// Headline numbers of a finished training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub config_sha256: String,
    pub seed: u64,
    pub steps: u64,
    pub phase1_fraction: f64,
    pub eval_loss: f64,
    pub eval_accuracy: f64,
    pub train_accuracy: f64,
    pub invocation_fraction: f64,
    /// File name to SHA-256 of its bytes.
    pub checkpoints: BTreeMap<String, String>,
}

pub const INIT_CKPT: &str = "init.ckpt";
pub const EARLY_CKPT: &str = "early.ckpt";
pub const FINAL_CKPT: &str = "final.ckpt";

/// Trains `cfg` into `out`: `init`, `early` (t = ⌊T/4⌋) and `final`
/// checkpoints, metric tables, the config and a summary.
pub fn train_run(cfg: &RunConfig, base: &Path, out: &Path) -> Result<RunSummary, CliError> {
    train_run_from(cfg, base, out, None)
}

/// [`train_run`] starting from `init` instead of the config's initialisation.
pub fn train_run_from(cfg: &RunConfig, base: &Path, out: &Path, init: Option<Model>) -> Result<RunSummary, CliError> {
    let (train, eval) = cfg.datasets(base)?;
    let model = match init {
        Some(m) => m,
        None => cfg.initial_model(&train)?,
    };
    ensure_dir(out)?;
    let stored = with_absolute_paths(cfg, base);
    write_text(&out.join("config.json"), &stored.to_json())?;

    let mut checkpoints = BTreeMap::new();
    checkpoints.insert(INIT_CKPT.into(), save(&Checkpoint::from_model(model.clone()), &out.join(INIT_CKPT))?);
    let tc = cfg.training_config();
    let mut trainer = Trainer::new(model, &train, Some(&eval), tc.clone())?;
    let early = tc.schedule.total_steps / 4;
    trainer.run_until(early).map_err(|e| diverged(e, out))?;
    checkpoints.insert(EARLY_CKPT.into(), save(&trainer.snapshot(), &out.join(EARLY_CKPT))?);
    let (bundle, metrics) = trainer.finish().map_err(|e| diverged(e, out))?;
    checkpoints.insert(FINAL_CKPT.into(), save(&bundle, &out.join(FINAL_CKPT))?);

    let prov = Provenance::new("train").config(cfg).note(format!("seed: {}", cfg.seed));
    write_table(out, "metrics.csv", metrics.steps_table(), &prov)?;
    write_table(out, "eval.csv", metrics.evals_table(), &prov)?;
    let ev = evaluate(&bundle.model, &eval, None, cfg.loss)?;
    let tr = evaluate(&bundle.model, &train, None, cfg.loss)?;
    let summary = RunSummary {
        config_sha256: cfg.digest(),
        seed: cfg.seed,
        steps: bundle.step,
        phase1_fraction: cfg.schedule.phase1_fraction,
        eval_loss: ev.loss,
        eval_accuracy: ev.accuracy,
        train_accuracy: tr.accuracy,
        invocation_fraction: metrics.invocation_fraction(),
        checkpoints,
    };
    write_json(out, "summary.json", &summary, &prov)?;
    Ok(summary)
}

fn with_absolute_paths(cfg: &RunConfig, base: &Path) -> RunConfig {
    let mut c = cfg.clone();
    if let TaskConfig::Csv { train, eval, .. } = &mut c.task {
        let abs = |p: &Path| std::path::absolute(base.join(p)).unwrap_or_else(|_| base.join(p));
        *train = abs(train);
        *eval = abs(eval);
    }
    c
}

/// Writes the diagnostic checkpoint of a diverged run next to the others.
fn diverged(e: Error, out: &Path) -> CliError {
    if let Error::Diverged {
        diagnostic: Some(bytes), ..
    } = &e
    {
        if let Err(w) = coto_core::report::write_atomic(&out.join("diverged.ckpt"), bytes) {
            eprintln!("warning: could not write diverged.ckpt: {w}");
        }
    }
    e.into()
}

pub fn cmd_train(args: &TrainArgs) -> Result<PathBuf, CliError> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let base = args.config.parent().unwrap_or(Path::new(".")).to_path_buf();
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| cfg.output_dir.join(format!("seed-{}", cfg.seed)));
    let s = train_run(&cfg, &base, &out)?;
    println!(
        "trained {} steps: eval accuracy {:.4}, loss {:.4}, adapter invocation fraction {:.4}",
        s.steps, s.eval_accuracy, s.eval_loss, s.invocation_fraction
    );
    println!("wrote {}", out.display());
    Ok(out)
}

struct Pair {
    a: LoadedCheckpoint,
    b: LoadedCheckpoint,
    cfg: RunConfig,
    eval: Data,
}

fn load_pair(args: &PairArgs) -> Result<Pair, CliError> {
    let a = LoadedCheckpoint::load(&args.a)?;
    let b = LoadedCheckpoint::load(&args.b)?;
    let (cfg, base) = config_for(&args.a, args.config.as_deref())?;
    let (_, eval) = cfg.datasets(&base)?;
    Ok(Pair { a, b, cfg, eval })
}

fn pair_provenance(command: &str, p: &Pair) -> Provenance {
    Provenance::new(command)
        .config(&p.cfg)
        .checkpoint("a", &p.a)
        .checkpoint("b", &p.b)
}

pub fn cmd_interpolate(args: &InterpolateArgs) -> Result<PathBuf, CliError> {
    let p = load_pair(&args.pair)?;
    let mode = MergeMode::from(args.mode);
    let points = interpolate_sweep(
        &p.a.bundle.model,
        &p.b.bundle.model,
        args.grid,
        &p.eval,
        mode,
        p.cfg.loss,
        &AlignSettings::default(),
    )?;
    ensure_dir(&args.out)?;
    let mut prov = pair_provenance("interpolate", &p).note(format!("mode: {}", mode.name()));
    if let Ok(d) = midpoint_drop(&points) {
        prov = prov.note(format!("midpoint_accuracy_drop: {}", fmt_f64(d)));
        println!("midpoint accuracy drop {d:.4}");
    }
    let path = write_table(&args.out, &format!("interpolate_{}.csv", mode.name()), sweep_table(&points), &prov)?;
    println!("wrote {}", path.display());
    Ok(path)
}

pub fn cmd_merge(args: &MergeArgs) -> Result<PathBuf, CliError> {
    let p = load_pair(&args.pair)?;
    let (m1, m2) = (&p.a.bundle.model, &p.b.bundle.model);
    let mode = MergeMode::from(args.mode);
    ensure_dir(&args.out)?;
    let prov = pair_provenance("merge", &p)
        .note(format!("mode: {}", mode.name()))
        .note(format!("lambda: {}", fmt_f64(args.lambda)));
    let merged = match mode {
        MergeMode::Fusion => weight_fusion(m1, m2, args.lambda)?,
        MergeMode::Ensemble => stacked_ensemble(m1, m2, args.lambda)?,
        MergeMode::AlignedFusion => {
            let (m, report) = aligned_fusion(m1, m2, args.lambda, &AlignSettings::default())?;
            write_table(&args.out, "alignment.csv", alignment_table(&report), &prov)?;
            m
        }
    };
    let ckpt = args.out.join("merged.ckpt");
    save(&Checkpoint::from_model(merged.clone()), &ckpt)?;
    write_text(&args.out.join("config.json"), &p.cfg.to_json())?;
    let m = evaluate(&merged, &p.eval, None, p.cfg.loss)?;
    let mut t = CsvTable::new(&["lambda", "loss", "accuracy"]);
    t.push(vec![fmt_f64(args.lambda), fmt_f64(m.loss), fmt_f64(m.accuracy)])?;
    write_table(&args.out, "merge.csv", t, &prov)?;
    println!("merged ({}, λ = {}): eval accuracy {:.4}, loss {:.4}", mode.name(), args.lambda, m.accuracy, m.loss);
    println!("wrote {}", ckpt.display());
    Ok(ckpt)
}

/// Sparsity fractions 0, 0.1, …, 0.9.
pub fn default_sparsity_grid() -> Vec<f64> {
    (0..10).map(|k| k as f64 / 10.0).collect()
}

pub fn cmd_prune(args: &PruneArgs) -> Result<PathBuf, CliError> {
    let ckpt = LoadedCheckpoint::load(&args.ckpt)?;
    let (cfg, base) = config_for(&args.ckpt, args.config.as_deref())?;
    let (_, eval) = cfg.datasets(&base)?;
    let mut settings = Vec::new();
    for p in &args.patterns {
        let pattern: PrunePattern = p.parse().map_err(|e: Error| CliError::Usage(format!("--pattern {p}: {e}")))?;
        settings.push(PruneSetting::Pattern(pattern));
    }
    let grid = if args.sparsity_grid.is_empty() && args.patterns.is_empty() {
        default_sparsity_grid()
    } else {
        args.sparsity_grid.clone()
    };
    for f in grid {
        settings.push(PruneSetting::Sparsity(SparsitySpec {
            fraction: f,
            per_layer: args.per_layer,
        }));
    }
    let rows = prune_sweep(&ckpt.bundle.model, &eval, &settings, cfg.loss)?;
    ensure_dir(&args.out)?;
    let prov = Provenance::new("prune")
        .config(&cfg)
        .checkpoint("ckpt", &ckpt)
        .note(format!("ranking: {}", if args.per_layer { "per-layer" } else { "global" }));
    let path = write_table(&args.out, "prune.csv", prune_table(&rows), &prov)?;
    for r in &rows {
        println!("{:>12}  accuracy {:.4}  loss {:.4}", r.setting, r.accuracy, r.loss);
    }
    println!("wrote {}", path.display());
    Ok(path)
}

#[derive(Debug, Serialize)]
struct ShapleySummary<'a> {
    report: &'a ContributionReport,
    contributions: Vec<f64>,
    efficiency_residual: f64,
    evaluations: u64,
    model_sha256: &'a str,
    data_sha256: &'a str,
}

/// Shapley report for `model` on `eval`, with its CSVs written into `out`.
pub fn shapley_report(
    model: &Model,
    eval: &Data,
    kind: LossKind,
    method: MethodArg,
    grid: usize,
    samples: usize,
    seed: u64,
    buckets: usize,
    out: &Path,
    prov: &Provenance,
) -> Result<ContributionReport, CliError> {
    let v = CoalitionValue::new(model, model.digest(), eval, kind)?;
    let report = match method {
        MethodArg::Exact => shapley_exact(&v, grid)?,
        MethodArg::Multilinear => shapley_multilinear(&v, grid, samples, seed)?,
    };
    let prov = prov
        .clone()
        .note("sign: phi and c_p columns are contributions -phi, -c(p); positive lowers the loss")
        .note(format!("method: {:?}", report.method).to_lowercase());
    ensure_dir(out)?;
    write_table(out, "shapley.csv", report.to_table(), &prov)?;
    let summary = concentration_summary(&report, buckets)?;
    let mut sprov = prov.clone();
    if summary.degenerate {
        eprintln!("warning: no adapter lowers the loss; concentration shares fall back to uniform");
        sprov = sprov.note("degenerate: no positive contributions, uniform shares");
    }
    write_table(out, "summary.csv", summary.to_table(), &sprov)?;
    write_json(
        out,
        "shapley.json",
        &ShapleySummary {
            report: &report,
            contributions: report.contributions(),
            efficiency_residual: report.efficiency_residual(),
            evaluations: v.evaluations(),
            model_sha256: &v.model_digest,
            data_sha256: &v.data_digest,
        },
        &prov,
    )?;
    Ok(report)
}

pub fn cmd_shapley(args: &ShapleyArgs) -> Result<PathBuf, CliError> {
    let ckpt = LoadedCheckpoint::load(&args.ckpt)?;
    let (cfg, base) = config_for(&args.ckpt, args.config.as_deref())?;
    let (_, eval) = cfg.datasets(&base)?;
    let prov = Provenance::new("shapley")
        .config(&cfg)
        .checkpoint("ckpt", &ckpt)
        .note(format!("p_grid: {}, samples: {}, seed: {}", args.p_grid, args.samples, args.seed));
    let report = shapley_report(
        &ckpt.bundle.model,
        &eval,
        cfg.loss,
        args.method,
        args.p_grid,
        args.samples,
        args.seed,
        args.buckets,
        &args.out,
        &prov,
    )?;
    for (i, (c, se)) in report.contributions().iter().zip(&report.stderr).enumerate() {
        println!("adapter {}: contribution {c:.6} (stderr {se:.2e})", i + 1);
    }
    println!("efficiency residual: {:.3e}", report.efficiency_residual());
    println!("wrote {}", args.out.join("shapley.csv").display());
    Ok(args.out.join("shapley.csv"))
}

/// Random model on a small synthetic task, with non-zero adapters.
pub fn random_bound_model(depth: usize, seed: u64) -> Result<(Model, Data), CliError> {
    let (data, _) = gen_teacher_task(seed, 200, 4, 3, 1)?;
    let arch = Architecture {
        input_dim: 4,
        widths: vec![5; depth],
        outputs: 3,
        rank: 2,
        alpha: 1.0,
        activation: Nonlinearity::Tanh,
    };
    let mut base = rng::stream(seed, 1, Purpose::Init);
    let mut adapters = rng::stream(seed, 2, Purpose::Init);
    let mut model = Model::from_seeds(&arch, &mut base, &mut adapters)?;
    let mut r = rng::stream(seed, 3, Purpose::Init);
    for ad in model.adapters_mut() {
        ad.b = Mat::from_fn(ad.b.rows(), ad.b.cols(), |_, _| r.random_range(-1.0..1.0));
    }
    Ok((model, data))
}

pub fn cmd_verify_bound(args: &VerifyBoundArgs) -> Result<PathBuf, CliError> {
    let kind = LossKind::from(args.loss);
    let (model, data, prov) = match (&args.ckpt, args.random_model) {
        (Some(path), _) => {
            let ckpt = LoadedCheckpoint::load(path)?;
            let (cfg, base) = config_for(path, args.config.as_deref())?;
            let (_, eval) = cfg.datasets(&base)?;
            let prov = Provenance::new("verify-bound").config(&cfg).checkpoint("ckpt", &ckpt);
            (ckpt.bundle.model, eval, prov)
        }
        (None, Some(depth)) => {
            let (m, d) = random_bound_model(depth, args.seed)?;
            let prov = Provenance::new("verify-bound").note(format!("random model: depth {depth}, seed {}", args.seed));
            (m, d, prov)
        }
        (None, None) => return Err(CliError::Usage("give --ckpt or --random-model".into())),
    };
    let sample = data.head(args.rows.min(data.len()));
    let report = verify_bound(&model, &sample, &p_grid(args.p_grid), kind)?;
    ensure_dir(&args.out)?;
    let prov = prov
        .note(format!("rows: {}, masks: {}", report.rows, report.masks))
        .note(format!("loss: {kind:?}").to_lowercase());
    let path = write_table(&args.out, "bound.csv", report.to_table(), &prov)?;
    println!("minimum gap {:.3e} over {} masks", report.min_gap(), report.masks);
    println!("wrote {}", path.display());
    Ok(path)
}

pub fn cmd_distances(args: &DistancesArgs) -> Result<PathBuf, CliError> {
    let ckpts = args
        .ckpts
        .iter()
        .map(|p| LoadedCheckpoint::load(p))
        .collect::<Result<Vec<_>, _>>()?;
    let labelled: Vec<(String, &[coto_core::Adapter])> = ckpts
        .iter()
        .map(|c| (c.path.display().to_string(), c.bundle.model.adapters()))
        .collect();
    let table = weight_distance_report(&labelled)?;
    ensure_dir(&args.out)?;
    let prov = ckpts
        .iter()
        .enumerate()
        .fold(Provenance::new("distances"), |p, (i, c)| p.checkpoint(&format!("ckpt{}", i + 1), c));
    let path = write_table(&args.out, "distances.csv", table.to_table(), &prov)?;
    println!("wrote {}", path.display());
    Ok(path)
}
