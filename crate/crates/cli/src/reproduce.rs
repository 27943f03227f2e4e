//! Multi-seed reproductions of the directional experiments.
//!
//! Training runs are keyed by `(ρ, seed)` and stored under `<out>/runs`, so
//! figures written into the same directory share their runs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use coto_core::game::concentration_summary;
use coto_core::merge::{interpolate_sweep, midpoint_drop, sweep_table, AlignSettings, MergeMode};
use coto_core::prune::{prune_sweep, prune_table, PrunePattern, PruneRow, PruneSetting, SparsitySpec};
use coto_core::report::{fmt_f64, CsvTable};
use coto_core::rng::{self, Purpose};
use coto_core::trainer::{adapter_distance, load_checkpoint};
use coto_core::{Data, Model, ScheduleShape};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::artifacts::{ensure_dir, write_json, Provenance};
use crate::cli::{Figure, MethodArg, ReproduceArgs};
use crate::commands::{default_sparsity_grid, shapley_report, train_run_from, RunSummary, FINAL_CKPT, INIT_CKPT};
use crate::config::RunConfig;
use crate::error::CliError;

/// Phase-1 fractions swept by the fig9-left reproduction.
pub const PHASE_FRACTIONS: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];
/// Half-width of uniform noise added to a shared adapter initialisation.
pub const INIT_NOISE: f64 = 1e-3;
pub const DEFAULT_CONFIG_PHASE: f64 = 0.75;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriterionVerdict {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub figure: String,
    pub config_sha256: String,
    pub seeds: Vec<u64>,
    pub criteria: Vec<CriterionVerdict>,
    /// Runs or analyses that failed; their criteria are marked failing.
    pub errors: Vec<String>,
}

impl Verdict {
    pub fn passed(&self) -> bool {
        self.errors.is_empty() && self.criteria.iter().all(|c| c.pass)
    }

    pub fn criterion(&self, name: &str) -> Option<&CriterionVerdict> {
        self.criteria.iter().find(|c| c.name == name)
    }
}

/// `wins` out of `n` meets "at least 4 of 5" scaled to `n`.
pub fn majority(wins: usize, n: usize) -> bool {
    n > 0 && 5 * wins >= 4 * n
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct RunKey {
    rho: f64,
    seed: u64,
    /// Seed whose adapter initialisation is shared, perturbed by noise.
    shared_init: Option<u64>,
}

impl RunKey {
    fn new(rho: f64, seed: u64) -> Self {
        Self {
            rho,
            seed,
            shared_init: None,
        }
    }

    fn dir_name(&self) -> String {
        match self.shared_init {
            None => format!("rho-{}-seed-{}", fmt_f64(self.rho), self.seed),
            Some(s) => format!("rho-{}-seed-{}-init-{}-noisy", fmt_f64(self.rho), self.seed, s),
        }
    }
}

struct Run {
    summary: RunSummary,
    init: Model,
    last: Model,
}

pub struct Reproduction {
    cfg: RunConfig,
    base: PathBuf,
    out: PathBuf,
    seeds: usize,
    coto_rho: f64,
    eval: Data,
    errors: Vec<String>,
}

impl Reproduction {
    pub fn new(cfg: RunConfig, base: PathBuf, out: PathBuf, seeds: usize) -> Result<Self, CliError> {
        if seeds == 0 {
            return Err(CliError::Usage("--seeds must be at least 1".into()));
        }
        let coto_rho = if cfg.schedule.phase1_fraction > 0.0 {
            cfg.schedule.phase1_fraction
        } else {
            DEFAULT_CONFIG_PHASE
        };
        let (_, eval) = cfg.datasets(&base)?;
        Ok(Self {
            cfg,
            base,
            out,
            seeds,
            coto_rho,
            eval,
            errors: Vec::new(),
        })
    }

    /// First seed of each pair; pair `k` uses `seed + 2k` and `seed + 2k + 1`.
    fn primary_seeds(&self) -> Vec<u64> {
        (0..self.seeds as u64).map(|k| self.cfg.seed + 2 * k).collect()
    }

    fn pairs(&self) -> Vec<(u64, u64)> {
        self.primary_seeds().into_iter().map(|s| (s, s + 1)).collect()
    }

    fn run_config(&self, key: &RunKey) -> RunConfig {
        self.cfg.with_phase1_fraction(key.rho).with_seed(key.seed)
    }

    fn initial(&self, key: &RunKey, cfg: &RunConfig, data: &Data) -> Result<Model, CliError> {
        let Some(shared) = key.shared_init else {
            return cfg.initial_model(data);
        };
        let mut m = cfg.with_seed(shared).initial_model(data)?;
        let mut r = rng::stream(key.seed, 4, Purpose::Init);
        for ad in m.adapters_mut() {
            for v in ad.a.data_mut().iter_mut().chain(ad.b.data_mut().iter_mut()) {
                *v += r.random_range(-INIT_NOISE..=INIT_NOISE);
            }
        }
        Ok(m)
    }

    fn load_or_train(&self, key: &RunKey) -> Result<Run, CliError> {
        let cfg = self.run_config(key);
        let dir = self.out.join("runs").join(key.dir_name());
        let cached = std::fs::read_to_string(dir.join("summary.json"))
            .ok()
            .and_then(|t| serde_json::from_str::<serde_json::Value>(&t).ok())
            .and_then(|mut v| {
                v.as_object_mut()?.remove("provenance");
                serde_json::from_value::<RunSummary>(v).ok()
            })
            .filter(|s| s.config_sha256 == cfg.digest());
        let summary = match cached {
            Some(s) => s,
            None => {
                let (train, _) = cfg.datasets(&self.base)?;
                let init = self.initial(key, &cfg, &train)?;
                train_run_from(&cfg, &self.base, &dir, Some(init))?
            }
        };
        Ok(Run {
            summary,
            init: load_checkpoint(&dir.join(INIT_CKPT))?.model,
            last: load_checkpoint(&dir.join(FINAL_CKPT))?.model,
        })
    }

    /// Trains (or reloads) every key in parallel; failures are recorded and
    /// left out of the map.
    fn runs(&mut self, keys: &[RunKey]) -> BTreeMap<String, Run> {
        let results: Vec<_> = keys.par_iter().map(|k| (k.dir_name(), self.load_or_train(k))).collect();
        let mut map = BTreeMap::new();
        for (name, r) in results {
            match r {
                Ok(run) => {
                    map.insert(name, run);
                }
                Err(e) => self.errors.push(format!("run {name}: {e}")),
            }
        }
        map
    }

    fn provenance(&self, figure: Figure) -> Provenance {
        Provenance::new(&format!("reproduce --figure {}", figure.name()))
            .config(&self.cfg)
            .note(format!("seeds: {}", self.seeds))
    }

    fn table(&self, name: &str, t: CsvTable, prov: &Provenance) -> Result<(), CliError> {
        let path = self.out.join(name);
        if let Some(dir) = path.parent() {
            ensure_dir(dir)?;
        }
        t.with_provenance(prov.lines().to_vec()).write(&path)?;
        Ok(())
    }

    pub fn run(mut self, figure: Figure) -> Result<Verdict, CliError> {
        ensure_dir(&self.out)?;
        let prov = self.provenance(figure);
        let criteria = match figure {
            Figure::Fig2 => self.fig2(&prov)?,
            Figure::Fig7 => self.fig7(&prov)?,
            Figure::Fig8 => self.fig8(&prov)?,
            Figure::Fig9Left => self.fig9_left(&prov)?,
            Figure::Tab5 => self.tab5(&prov)?,
            Figure::Tab8 => self.tab8(&prov)?,
        };
        let verdict = Verdict {
            figure: figure.name().into(),
            config_sha256: self.cfg.digest(),
            seeds: self.primary_seeds(),
            criteria,
            errors: self.errors,
        };
        write_json(&self.out, &format!("verdict_{}.json", figure.name()), &verdict, &prov)?;
        write_json(&self.out, "verdict.json", &verdict, &prov)?;
        Ok(verdict)
    }

    fn variant_keys(&self, seeds: &[u64]) -> Vec<RunKey> {
        let mut keys = Vec::new();
        for &s in seeds {
            keys.push(RunKey::new(self.coto_rho, s));
            keys.push(RunKey::new(0.0, s));
        }
        keys
    }

    fn fig2(&mut self, prov: &Provenance) -> Result<Vec<CriterionVerdict>, CliError> {
        let pairs = self.pairs();
        let seeds: Vec<u64> = pairs.iter().flat_map(|&(a, b)| [a, b]).collect();
        let runs = self.runs(&self.variant_keys(&seeds));
        let mut summary = CsvTable::new(&["pair", "seed_a", "seed_b", "coto_drop", "baseline_drop"]);
        let (mut wins, mut compared) = (0, 0);
        for (k, &(sa, sb)) in pairs.iter().enumerate() {
            let mut drops = Vec::new();
            for (label, rho) in [("coto", self.coto_rho), ("baseline", 0.0)] {
                let (Some(a), Some(b)) = (get(&runs, rho, sa), get(&runs, rho, sb)) else {
                    continue;
                };
                match interpolate_sweep(
                    &a.last,
                    &b.last,
                    11,
                    &self.eval,
                    MergeMode::Fusion,
                    self.cfg.loss,
                    &AlignSettings::default(),
                ) {
                    Ok(points) => {
                        self.table(&format!("lmc/{label}_pair{k}.csv"), sweep_table(&points), prov)?;
                        drops.push(midpoint_drop(&points)?);
                    }
                    Err(e) => self.errors.push(format!("pair {k} {label}: {e}")),
                }
            }
            if let [c, b] = drops[..] {
                summary.push(vec![k.to_string(), sa.to_string(), sb.to_string(), fmt_f64(c), fmt_f64(b)])?;
                compared += 1;
                wins += usize::from(c < b);
            }
        }
        self.table("lmc_summary.csv", summary, prov)?;
        Ok(vec![CriterionVerdict {
            name: "lmc-midpoint-drop".into(),
            pass: compared == pairs.len() && majority(wins, pairs.len()),
            detail: format!("coto midpoint drop smaller in {wins} of {} pairs", pairs.len()),
        }])
    }

    fn prune_settings(&self) -> Vec<PruneSetting> {
        let k = (self.cfg.model.layers / 3).max(1);
        let mut s: Vec<PruneSetting> = default_sparsity_grid()
            .into_iter()
            .map(|f| PruneSetting::Sparsity(SparsitySpec::global(f)))
            .collect();
        for p in [
            PrunePattern::EveryOther,
            PrunePattern::Low(k),
            PrunePattern::Middle(k),
            PrunePattern::High(k),
            PrunePattern::All,
        ] {
            s.push(PruneSetting::Pattern(p));
        }
        s
    }

    fn fig7(&mut self, prov: &Provenance) -> Result<Vec<CriterionVerdict>, CliError> {
        let seeds = self.primary_seeds();
        let runs = self.runs(&self.variant_keys(&seeds));
        let settings = self.prune_settings();
        let mut summary = CsvTable::new(&["seed", "setting", "coto_accuracy", "baseline_accuracy"]);
        let watched = ["0.5", "every-other"];
        let mut wins = [0usize; 2];
        let mut compared = 0;
        for &s in &seeds {
            let mut rows: Vec<Vec<PruneRow>> = Vec::new();
            for (label, rho) in [("coto", self.coto_rho), ("baseline", 0.0)] {
                let Some(run) = get(&runs, rho, s) else { continue };
                let r = prune_sweep(&run.last, &self.eval, &settings, self.cfg.loss)?;
                self.table(&format!("prune/{label}_seed{s}.csv"), prune_table(&r), prov)?;
                rows.push(r);
            }
            if let [c, b] = &rows[..] {
                compared += 1;
                for (rc, rb) in c.iter().zip(b) {
                    summary.push(vec![s.to_string(), rc.setting.clone(), fmt_f64(rc.accuracy), fmt_f64(rb.accuracy)])?;
                    if let Some(w) = watched.iter().position(|&n| n == rc.setting) {
                        wins[w] += usize::from(rc.accuracy > rb.accuracy);
                    }
                }
            }
        }
        self.table("prune_summary.csv", summary, prov)?;
        let n = seeds.len();
        let complete = compared == n;
        let sparse = CriterionVerdict {
            name: "prune-sparsity-0.5".into(),
            pass: complete && majority(wins[0], n),
            detail: format!("coto more accurate at 50% sparsity in {} of {n} seeds", wins[0]),
        };
        let every = CriterionVerdict {
            name: "prune-every-other".into(),
            pass: complete && majority(wins[1], n),
            detail: format!("coto more accurate with every other adapter removed in {} of {n} seeds", wins[1]),
        };
        let both = CriterionVerdict {
            name: "prune".into(),
            pass: sparse.pass && every.pass,
            detail: "both pruning comparisons hold".into(),
        };
        Ok(vec![sparse, every, both])
    }

    fn fig8(&mut self, prov: &Provenance) -> Result<Vec<CriterionVerdict>, CliError> {
        let seeds = self.primary_seeds();
        let runs = self.runs(&self.variant_keys(&seeds));
        let layers = self.cfg.model.layers;
        let method = if layers <= coto_core::game::EXACT_MAX_PLAYERS {
            MethodArg::Exact
        } else {
            MethodArg::Multilinear
        };
        let mut summary = CsvTable::new(&["seed", "coto_top_share", "baseline_top_share"]);
        let mut wins = 0;
        let mut compared = 0;
        for &s in &seeds {
            let mut shares = Vec::new();
            for (label, rho) in [("coto", self.coto_rho), ("baseline", 0.0)] {
                let Some(run) = get(&runs, rho, s) else { continue };
                let dir = self.out.join(format!("shapley/{label}_seed{s}"));
                let report = shapley_report(&run.last, &self.eval, self.cfg.loss, method, 11, 256, s, 3, &dir, prov)?;
                shares.push(concentration_summary(&report, 3)?.top_share());
            }
            if let [c, b] = shares[..] {
                compared += 1;
                wins += usize::from(c < b);
                summary.push(vec![s.to_string(), fmt_f64(c), fmt_f64(b)])?;
            }
        }
        self.table("balance_summary.csv", summary, prov)?;
        Ok(vec![CriterionVerdict {
            name: "top-third-share".into(),
            pass: compared == seeds.len() && majority(wins, seeds.len()),
            detail: format!(
                "coto's top-third contribution share smaller in {wins} of {} seeds",
                seeds.len()
            ),
        }])
    }

    fn fig9_left(&mut self, prov: &Provenance) -> Result<Vec<CriterionVerdict>, CliError> {
        let seeds = self.primary_seeds();
        let keys: Vec<RunKey> = PHASE_FRACTIONS
            .iter()
            .flat_map(|&r| seeds.iter().map(move |&s| RunKey::new(r, s)))
            .collect();
        let runs = self.runs(&keys);
        let mut table = CsvTable::new(&["rho", "seed", "eval_loss", "eval_accuracy", "invocation_fraction"]);
        let mut means = CsvTable::new(&["rho", "mean_eval_accuracy", "mean_invocation_fraction"]);
        let mut baseline_ok = true;
        for &rho in &PHASE_FRACTIONS {
            let (mut acc, mut inv, mut n) = (0.0, 0.0, 0usize);
            for &s in &seeds {
                let Some(run) = get(&runs, rho, s) else {
                    baseline_ok &= rho != 0.0;
                    continue;
                };
                let r = &run.summary;
                table.push(vec![
                    fmt_f64(rho),
                    s.to_string(),
                    fmt_f64(r.eval_loss),
                    fmt_f64(r.eval_accuracy),
                    fmt_f64(r.invocation_fraction),
                ])?;
                if rho == 0.0 {
                    baseline_ok &= r.invocation_fraction == 1.0;
                }
                acc += r.eval_accuracy;
                inv += r.invocation_fraction;
                n += 1;
            }
            if n > 0 {
                means.push(vec![fmt_f64(rho), fmt_f64(acc / n as f64), fmt_f64(inv / n as f64)])?;
            }
        }
        self.table("phase_sweep.csv", table, prov)?;
        self.table("phase_summary.csv", means, prov)?;
        Ok(vec![CriterionVerdict {
            name: "rho-0-is-baseline".into(),
            pass: baseline_ok,
            detail: "every adapter active at every step when the phase-1 fraction is 0".into(),
        }])
    }

    fn tab5(&mut self, prov: &Provenance) -> Result<Vec<CriterionVerdict>, CliError> {
        let pairs = self.pairs();
        let seeds: Vec<u64> = pairs.iter().flat_map(|&(a, b)| [a, b]).collect();
        let mut keys = self.variant_keys(&seeds);
        for &(a, b) in &pairs {
            for rho in [self.coto_rho, 0.0] {
                for s in [a, b] {
                    keys.push(RunKey {
                        rho,
                        seed: s,
                        shared_init: Some(a),
                    });
                }
            }
        }
        let runs = self.runs(&keys);
        let mut detail = CsvTable::new(&["comparison", "variant", "seed_a", "seed_b", "distance"]);
        let mut summary = CsvTable::new(&["comparison", "variant", "mean", "std", "count"]);
        for (label, rho) in [("coto", self.coto_rho), ("baseline", 0.0)] {
            let mut groups: [(&str, Vec<f64>); 3] = [
                ("init-vs-final", Vec::new()),
                ("final-vs-final", Vec::new()),
                ("final-vs-final-shared-init", Vec::new()),
            ];
            for &s in &seeds {
                if let Some(r) = get(&runs, rho, s) {
                    let d = adapter_distance(r.init.adapters(), r.last.adapters())?;
                    detail.push(vec![groups[0].0.into(), label.into(), s.to_string(), s.to_string(), fmt_f64(d)])?;
                    groups[0].1.push(d);
                }
            }
            for &(a, b) in &pairs {
                if let (Some(x), Some(y)) = (get(&runs, rho, a), get(&runs, rho, b)) {
                    let d = adapter_distance(x.last.adapters(), y.last.adapters())?;
                    detail.push(vec![groups[1].0.into(), label.into(), a.to_string(), b.to_string(), fmt_f64(d)])?;
                    groups[1].1.push(d);
                }
                let noisy = |s| {
                    runs.get(
                        &RunKey {
                            rho,
                            seed: s,
                            shared_init: Some(a),
                        }
                        .dir_name(),
                    )
                };
                if let (Some(x), Some(y)) = (noisy(a), noisy(b)) {
                    let d = adapter_distance(x.last.adapters(), y.last.adapters())?;
                    detail.push(vec![groups[2].0.into(), label.into(), a.to_string(), b.to_string(), fmt_f64(d)])?;
                    groups[2].1.push(d);
                }
            }
            for (name, ds) in &groups {
                let n = ds.len() as f64;
                let mean = ds.iter().sum::<f64>() / n;
                let std = (ds.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0)).sqrt();
                summary.push(vec![
                    name.to_string(),
                    label.into(),
                    fmt_f64(mean),
                    fmt_f64(std),
                    ds.len().to_string(),
                ])?;
            }
        }
        let prov = prov
            .clone()
            .note(format!("shared-init noise: uniform in [-{INIT_NOISE}, {INIT_NOISE}] on every adapter entry"));
        self.table("distances_detail.csv", detail, &prov)?;
        self.table("distances_summary.csv", summary, &prov)?;
        Ok(Vec::new())
    }

    fn tab8(&mut self, prov: &Provenance) -> Result<Vec<CriterionVerdict>, CliError> {
        let seeds = self.primary_seeds();
        let runs = self.runs(&self.variant_keys(&seeds));
        let rho = self.coto_rho;
        let expected = match (self.cfg.schedule.shape, self.cfg.sampler) {
            (ScheduleShape::Linear, coto_core::SamplerMode::Uniform) => Some(rho / 2.0 + (1.0 - rho)),
            _ => None,
        };
        let mut table = CsvTable::new(&["variant", "seed", "invocation_fraction", "adapter_work_saved"]);
        let mut in_range = true;
        let mut fractions = Vec::new();
        for &s in &seeds {
            for (label, r) in [("coto", rho), ("baseline", 0.0)] {
                let Some(run) = get(&runs, r, s) else {
                    in_range = false;
                    continue;
                };
                let f = run.summary.invocation_fraction;
                table.push(vec![label.into(), s.to_string(), fmt_f64(f), fmt_f64(1.0 - f)])?;
                if label == "coto" {
                    fractions.push(f);
                    if let Some(e) = expected {
                        in_range &= (f - e).abs() <= 0.01;
                    }
                }
            }
        }
        let prov = match expected {
            Some(e) => prov.clone().note(format!("expected coto fraction: {}", fmt_f64(e))),
            None => prov.clone(),
        };
        self.table("compute.csv", table, &prov)?;
        Ok(vec![CriterionVerdict {
            name: "invocation-fraction".into(),
            pass: expected.is_some() && in_range,
            detail: match expected {
                Some(e) => format!("coto fractions {fractions:?} within 0.01 of {e}"),
                None => "expected fraction only defined for the linear uniform schedule".into(),
            },
        }])
    }
}

fn get(runs: &BTreeMap<String, Run>, rho: f64, seed: u64) -> Option<&Run> {
    runs.get(&RunKey::new(rho, seed).dir_name())
}

pub fn cmd_reproduce(args: &ReproduceArgs) -> Result<PathBuf, CliError> {
    let (cfg, base) = match &args.config {
        Some(p) => (RunConfig::load(p)?, p.parent().unwrap_or(Path::new(".")).to_path_buf()),
        None => (RunConfig::reference(), PathBuf::from(".")),
    };
    let verdict = Reproduction::new(cfg, base, args.out.clone(), args.seeds)?.run(args.figure)?;
    for c in &verdict.criteria {
        println!("{}: {} ({})", c.name, if c.pass { "pass" } else { "FAIL" }, c.detail);
    }
    for e in &verdict.errors {
        println!("error: {e}");
    }
    let path = args.out.join("verdict.json");
    println!("wrote {}", path.display());
    Ok(path)
}
