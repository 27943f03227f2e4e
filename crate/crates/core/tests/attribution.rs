use coto_core::game::{concentration_summary, shapley_exact, shapley_multilinear, CoalitionValue, ValueFunction};
use coto_core::rng::{stream, Purpose};
use coto_core::theory::{p_grid, verify_bound, BOUND_TOLERANCE};
use coto_core::{
    evaluate, train, Architecture, Data, GateVector, LossKind, Matrix, Model, Nonlinearity, ScheduleSpec,
    TeacherTask, TrainingConfig,
};

const CE: LossKind = LossKind::SoftmaxCrossEntropy;

fn trained(layers: usize) -> (Model, Data) {
    let (tr, ev) = TeacherTask {
        seed: 5,
        n: 300,
        dim: 5,
        classes: 3,
        teacher_depth: 2,
    }
    .generate()
    .unwrap();
    let arch = Architecture {
        input_dim: 5,
        widths: vec![5; layers],
        outputs: 3,
        rank: 2,
        alpha: 1.0,
        activation: Nonlinearity::Tanh,
    };
    let m = Model::from_seeds(&arch, &mut stream(2, 1, Purpose::Init), &mut stream(2, 2, Purpose::Init)).unwrap();
    let cfg = TrainingConfig::new(ScheduleSpec::linear(0.75, 400), 0.02, 16, 4);
    let (bundle, _) = train(m, &tr, None, cfg).unwrap();
    (bundle.model, ev)
}

fn loss_of(m: &Model, ev: &Data, coalition: u64) -> f64 {
    let gates = GateVector::from_bits(coalition, m.adapters().len());
    evaluate(m, ev, Some(&gates), CE).unwrap().loss
}

/// Shapley values by averaging marginal contributions over every ordering.
fn permutation_oracle(n: usize, v: impl Fn(u64) -> f64) -> Vec<f64> {
    fn orderings(rest: Vec<usize>, prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if rest.is_empty() {
            out.push(prefix.clone());
            return;
        }
        for k in 0..rest.len() {
            let mut r = rest.clone();
            prefix.push(r.remove(k));
            orderings(r, prefix, out);
            prefix.pop();
        }
    }
    let mut all = Vec::new();
    orderings((0..n).collect(), &mut Vec::new(), &mut all);
    let mut phi = vec![0.0; n];
    for order in &all {
        let mut s = 0u64;
        for &i in order {
            phi[i] += v(s | 1 << i) - v(s);
            s |= 1 << i;
        }
    }
    phi.iter().map(|x| x / all.len() as f64).collect()
}

#[test]
fn exact_values_match_orderings_on_a_trained_model() {
    let (m, ev) = trained(5);
    let game = CoalitionValue::new(&m, m.digest(), &ev, CE).unwrap();
    let r = shapley_exact(&game, 11).unwrap();
    let oracle = permutation_oracle(5, |s| loss_of(&m, &ev, s));
    for (a, b) in r.phi.iter().zip(&oracle) {
        assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
    }
    assert!(r.efficiency_residual().abs() <= 1e-9);
    assert!(game.cached() <= 32);

    let ml = shapley_multilinear(&game, 11, 256, 3).unwrap();
    for (a, b) in ml.phi.iter().zip(&r.phi) {
        assert!((a - b).abs() <= 0.02_f64.max(0.05 * b.abs()), "{a} vs {b}");
    }
    let summary = concentration_summary(&r, 3).unwrap();
    assert!((summary.shares.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
}

#[test]
fn cached_values_equal_fresh_recomputation() {
    let (m, ev) = trained(4);
    let game = CoalitionValue::new(&m, m.digest(), &ev, CE).unwrap();
    let first: Vec<f64> = (0..16).map(|s| game.value(s).unwrap()).collect();
    let again: Vec<f64> = (0..16).map(|s| game.value(s).unwrap()).collect();
    assert_eq!(game.evaluations(), 16);
    for s in 0..16u64 {
        let fresh = CoalitionValue::new(&m, m.digest(), &ev, CE).unwrap();
        assert_eq!(fresh.value(s).unwrap().to_bits(), first[s as usize].to_bits());
        assert_eq!(again[s as usize].to_bits(), first[s as usize].to_bits());
    }
}

#[test]
fn zeroed_adapter_is_a_dummy_for_both_estimators() {
    let (mut m, ev) = trained(5);
    let b = &mut m.adapters_mut()[2].b;
    *b = Matrix::zeros(b.rows(), b.cols());
    let game = CoalitionValue::new(&m, m.digest(), &ev, CE).unwrap();
    assert_eq!(shapley_exact(&game, 11).unwrap().phi[2], 0.0);
    let ml = shapley_multilinear(&game, 11, 64, 9).unwrap();
    assert!(ml.phi[2].abs() <= ml.stderr[2], "{} {}", ml.phi[2], ml.stderr[2]);
}

#[test]
fn bound_holds_for_a_trained_model() {
    let (m, ev) = trained(6);
    let rows = ev.head(32);
    for kind in [LossKind::Mse, CE] {
        let r = verify_bound(&m, &rows, &p_grid(11), kind).unwrap();
        assert!(r.min_gap() >= -BOUND_TOLERANCE);
        assert_eq!(r.masks, 64);
        for k in 0..r.p.len() {
            assert!((r.lhs[k] - r.decomposition[k]).abs() <= 1e-10);
        }
    }
}
