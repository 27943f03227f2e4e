//! Structured (whole-adapter) and unstructured (magnitude) pruning.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{GateVector, GatedModel, Predictor};
use crate::numerics::LossKind;
use crate::report::{fmt_f64, CsvTable};
use crate::scalar::Scalar;
use crate::tasks::Dataset;
use crate::trainer::evaluate;

pub const DEFAULT_K: usize = 4;

/// Which adapters to switch off. Layer numbers are 1-based.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PrunePattern {
    /// Switch off layers 2, 4, 6, ...
    EveryOther,
    /// Switch off layers `1..=k`.
    Low(usize),
    /// Switch off `k` centred layers starting at `⌊(L−k)/2⌋ + 1`.
    Middle(usize),
    /// Switch off layers `L−k+1..=L`.
    High(usize),
    /// Keep everything.
    All,
    /// Explicit keep-mask.
    Custom(Vec<bool>),
}

impl PrunePattern {
    pub fn gates(&self, layers: usize) -> Result<GateVector> {
        let off = |range: std::ops::Range<usize>| GateVector::new((0..layers).map(|i| !range.contains(&i)).collect());
        let check_k = |k: usize| {
            if k > layers {
                Err(Error::config(format!("cannot prune {k} of {layers} layers")))
            } else {
                Ok(())
            }
        };
        Ok(match self {
            PrunePattern::EveryOther => GateVector::new((0..layers).map(|i| i % 2 == 0).collect()),
            PrunePattern::Low(k) => {
                check_k(*k)?;
                off(0..*k)
            }
            PrunePattern::Middle(k) => {
                check_k(*k)?;
                let start = (layers - k) / 2;
                off(start..start + k)
            }
            PrunePattern::High(k) => {
                check_k(*k)?;
                off(layers - k..layers)
            }
            PrunePattern::All => GateVector::ones(layers),
            PrunePattern::Custom(mask) => {
                if mask.len() != layers {
                    return Err(Error::config(format!(
                        "custom mask has {} entries for {layers} layers",
                        mask.len()
                    )));
                }
                GateVector::new(mask.clone())
            }
        })
    }
}

impl fmt::Display for PrunePattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PrunePattern::EveryOther => write!(f, "every-other"),
            PrunePattern::Low(k) => write!(f, "low:{k}"),
            PrunePattern::Middle(k) => write!(f, "middle:{k}"),
            PrunePattern::High(k) => write!(f, "high:{k}"),
            PrunePattern::All => write!(f, "all"),
            PrunePattern::Custom(m) => {
                write!(f, "custom:")?;
                m.iter().try_for_each(|&b| write!(f, "{}", u8::from(b)))
            }
        }
    }
}

/// Parses `every-other`, `all`, `low[:k]`, `middle[:k]`, `high[:k]` or
/// `custom:1011…` (1 = keep).
impl FromStr for PrunePattern {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (s, None),
        };
        let k = || -> Result<usize> {
            arg.map_or(Ok(DEFAULT_K), |a| {
                a.parse()
                    .map_err(|_| Error::config(format!("bad layer count in pattern {s:?}")))
            })
        };
        match name {
            "every-other" if arg.is_none() => Ok(PrunePattern::EveryOther),
            "all" if arg.is_none() => Ok(PrunePattern::All),
            "low" => Ok(PrunePattern::Low(k()?)),
            "middle" => Ok(PrunePattern::Middle(k()?)),
            "high" => Ok(PrunePattern::High(k()?)),
            "custom" => arg
                .unwrap_or("")
                .chars()
                .map(|c| match c {
                    '1' => Ok(true),
                    '0' => Ok(false),
                    _ => Err(Error::config(format!("custom mask {s:?} must be 0/1 digits"))),
                })
                .collect::<Result<Vec<_>>>()
                .map(PrunePattern::Custom),
            _ => Err(Error::config(format!("unknown prune pattern {s:?}"))),
        }
    }
}

/// Evaluation gates for a structured pattern; weights are not touched.
pub fn structured_prune<T: Scalar>(model: &GatedModel<T>, pattern: &PrunePattern) -> Result<GateVector> {
    pattern.gates(model.depth())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SparsitySpec {
    pub fraction: f64,
    /// Rank within each layer instead of across all layers.
    #[serde(default)]
    pub per_layer: bool,
}

impl SparsitySpec {
    pub fn global(fraction: f64) -> Self {
        Self {
            fraction,
            per_layer: false,
        }
    }
}

fn floor_share(fraction: f64, n: usize) -> usize {
    ((fraction * n as f64 + 1e-9).floor() as usize).min(n)
}

/// Position of one adapter entry: `(layer, matrix, row-major index)` with
/// matrix 0 = `A`, 1 = `B`.
type EntryId = (usize, usize, usize);

fn ranked_entries<T: Scalar>(model: &GatedModel<T>, layers: std::ops::Range<usize>) -> Vec<EntryId> {
    let mut entries: Vec<(T, EntryId)> = Vec::new();
    for l in layers {
        let ad = &model.adapters()[l];
        for (mi, m) in [&ad.a, &ad.b].into_iter().enumerate() {
            entries.extend(m.data().iter().enumerate().map(|(k, &v)| (v.abs(), (l, mi, k))));
        }
    }
    entries.sort_by(|x, y| match x.0.partial_cmp(&y.0) {
        Some(Ordering::Equal) | None => x.1.cmp(&y.1),
        Some(o) => o,
    });
    entries.into_iter().map(|(_, id)| id).collect()
}

/// Entries that [`unstructured_prune`] would zero, in ranking order.
pub fn pruned_entries<T: Scalar>(model: &GatedModel<T>, spec: &SparsitySpec) -> Result<Vec<EntryId>> {
    if !(0.0..=1.0).contains(&spec.fraction) {
        return Err(Error::config(format!("sparsity {} outside [0, 1]", spec.fraction)));
    }
    let count = |l: std::ops::Range<usize>| -> usize {
        model.adapters()[l].iter().map(|a| a.num_params()).sum()
    };
    let depth = model.depth();
    Ok(if spec.per_layer {
        (0..depth)
            .flat_map(|l| {
                let n = floor_share(spec.fraction, count(l..l + 1));
                ranked_entries(model, l..l + 1).into_iter().take(n)
            })
            .collect()
    } else {
        let n = floor_share(spec.fraction, count(0..depth));
        ranked_entries(model, 0..depth).into_iter().take(n).collect()
    })
}

/// Copy of `model` with the smallest-magnitude adapter entries set to zero.
///
/// Ranking is by `|value|`, ties broken by `(layer, matrix, index)`.
pub fn unstructured_prune<T: Scalar>(model: &GatedModel<T>, spec: &SparsitySpec) -> Result<GatedModel<T>> {
    let mut out = model.clone();
    for (l, mi, k) in pruned_entries(model, spec)? {
        let ad = &mut out.adapters_mut()[l];
        let m = if mi == 0 { &mut ad.a } else { &mut ad.b };
        m.data_mut()[k] = T::zero();
    }
    out.reset_invocation_counts();
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub enum PruneSetting {
    Pattern(PrunePattern),
    Sparsity(SparsitySpec),
}

impl PruneSetting {
    pub fn name(&self) -> String {
        match self {
            PruneSetting::Pattern(p) => p.to_string(),
            PruneSetting::Sparsity(s) => fmt_f64(s.fraction),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruneRow {
    pub setting: String,
    pub loss: f64,
    pub accuracy: f64,
}

/// One evaluation per setting.
pub fn prune_sweep<T: Scalar>(
    model: &GatedModel<T>,
    data: &Dataset<T>,
    settings: &[PruneSetting],
    kind: LossKind,
) -> Result<Vec<PruneRow>> {
    settings
        .par_iter()
        .map(|s| {
            let m = match s {
                PruneSetting::Pattern(p) => evaluate(model, data, Some(&structured_prune(model, p)?), kind)?,
                PruneSetting::Sparsity(sp) => evaluate(&unstructured_prune(model, sp)?, data, None, kind)?,
            };
            Ok(PruneRow {
                setting: s.name(),
                loss: m.loss,
                accuracy: m.accuracy,
            })
        })
        .collect()
}

pub fn prune_table(rows: &[PruneRow]) -> CsvTable {
    let mut t = CsvTable::new(&["setting", "loss", "accuracy"]);
    for r in rows {
        t.rows.push(vec![r.setting.clone(), fmt_f64(r.loss), fmt_f64(r.accuracy)]);
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Architecture, Nonlinearity};
    use crate::numerics::Mat;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn on(g: &GateVector) -> Vec<usize> {
        (0..g.len()).filter(|&i| g.is_active(i)).map(|i| i + 1).collect()
    }

    #[test]
    fn patterns_on_twelve_layers() {
        let low = PrunePattern::Low(4).gates(12).unwrap();
        assert_eq!(on(&low), (5..=12).collect::<Vec<_>>());
        let eo = PrunePattern::EveryOther.gates(12).unwrap();
        assert_eq!(eo.active_count(), 6);
        assert_eq!(on(&eo), vec![1, 3, 5, 7, 9, 11]);
        let mid = PrunePattern::Middle(4).gates(12).unwrap();
        assert_eq!(on(&mid), vec![1, 2, 3, 4, 9, 10, 11, 12]);
        let high = PrunePattern::High(4).gates(12).unwrap();
        assert_eq!(on(&high), (1..=8).collect::<Vec<_>>());
        assert_eq!(PrunePattern::All.gates(12).unwrap(), GateVector::ones(12));
        assert!(PrunePattern::Custom(vec![true; 3]).gates(12).is_err());
        assert!(PrunePattern::Low(13).gates(12).is_err());
    }

    #[test]
    fn pattern_strings_round_trip() {
        for s in ["every-other", "all", "low:4", "middle:2", "high:3", "custom:1010"] {
            assert_eq!(s.parse::<PrunePattern>().unwrap().to_string(), s);
        }
        assert_eq!("low".parse::<PrunePattern>().unwrap(), PrunePattern::Low(4));
        assert!("sideways".parse::<PrunePattern>().is_err());
        assert!("custom:12".parse::<PrunePattern>().is_err());
    }

    fn model(seed: u64) -> GatedModel<f64> {
        let arch = Architecture {
            input_dim: 4,
            widths: vec![5, 5, 5],
            outputs: 3,
            rank: 2,
            alpha: 1.0,
            activation: Nonlinearity::Tanh,
        };
        let mut r1 = ChaCha8Rng::seed_from_u64(seed);
        let mut r2 = ChaCha8Rng::seed_from_u64(seed + 1);
        let mut m = GatedModel::from_seeds(&arch, &mut r1, &mut r2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 2);
        for ad in m.adapters_mut() {
            ad.b = Mat::from_fn(ad.b.rows(), ad.b.cols(), |_, _| rng.random_range(-1.0..1.0));
        }
        // A few exact ties to exercise the tie-break.
        m.adapters_mut()[0].a.set(0, 0, 0.25);
        m.adapters_mut()[2].b.set(1, 1, -0.25);
        m.adapters_mut()[1].a.set(1, 2, 0.25);
        m
    }

    #[test]
    fn global_magnitude_matches_full_sort_oracle() {
        let m = model(3);
        let before = m.adapters().to_vec();
        let mut all: Vec<(f64, usize, usize, usize)> = Vec::new();
        for (l, ad) in m.adapters().iter().enumerate() {
            for (k, v) in ad.a.data().iter().enumerate() {
                all.push((v.abs(), l, 0, k));
            }
            for (k, v) in ad.b.data().iter().enumerate() {
                all.push((v.abs(), l, 1, k));
            }
        }
        all.sort_by(|x, y| x.partial_cmp(y).unwrap());
        let n = all.len();
        let pruned = unstructured_prune(&m, &SparsitySpec::global(0.5)).unwrap();
        let mut zeroed = 0;
        for (i, &(_, l, mi, k)) in all.iter().enumerate() {
            let ad = &pruned.adapters()[l];
            let v = if mi == 0 { ad.a.data()[k] } else { ad.b.data()[k] };
            if i < n / 2 {
                assert_eq!(v, 0.0);
                zeroed += 1;
            } else {
                let orig = &m.adapters()[l];
                assert_eq!(v, if mi == 0 { orig.a.data()[k] } else { orig.b.data()[k] });
            }
        }
        assert_eq!(zeroed, n / 2);
        assert_eq!(m.adapters(), &before[..]);
    }

    #[test]
    fn sparsity_extremes() {
        let m = model(4);
        let (data, _) = crate::tasks::gen_teacher_task::<f64>(1, 60, 4, 3, 1).unwrap();
        let kind = LossKind::SoftmaxCrossEntropy;
        let x = data.inputs.clone();
        let g = GateVector::ones(3);
        let same = unstructured_prune(&m, &SparsitySpec::global(0.0)).unwrap();
        assert_eq!(same.forward(&x, &g).unwrap(), m.forward(&x, &g).unwrap());
        let none = unstructured_prune(&m, &SparsitySpec::global(1.0)).unwrap();
        assert!(none.adapters().iter().all(|a| a.delta().max_abs() == 0.0));
        let rows = prune_sweep(
            &m,
            &data,
            &[
                PruneSetting::Sparsity(SparsitySpec::global(1.0)),
                PruneSetting::Pattern(PrunePattern::Custom(vec![false; 3])),
                PruneSetting::Pattern(PrunePattern::All),
                PruneSetting::Sparsity(SparsitySpec::global(0.0)),
            ],
            kind,
        )
        .unwrap();
        assert_eq!(rows[0].accuracy, rows[1].accuracy);
        assert!((rows[0].loss - rows[1].loss).abs() < 1e-15);
        let full = evaluate(&m, &data, None, kind).unwrap();
        assert_eq!((rows[2].loss, rows[2].accuracy), (full.loss, full.accuracy));
        assert_eq!((rows[3].loss, rows[3].accuracy), (full.loss, full.accuracy));
        assert_eq!(rows[3].setting, "0");
    }

    #[test]
    fn per_layer_ranking() {
        let m = model(5);
        let ids = pruned_entries(&m, &SparsitySpec { fraction: 0.5, per_layer: true }).unwrap();
        for l in 0..3 {
            let n = m.adapters()[l].num_params();
            assert_eq!(ids.iter().filter(|id| id.0 == l).count(), n / 2);
        }
        assert!(pruned_entries(&m, &SparsitySpec::global(1.5)).is_err());
    }
}
