//! Behavioural checks of the trainer and stability harness against
//! independently computed expectations.

use nalgebra::DMatrix;
use ordstab::network::{Edge, Relation};
use ordstab::stability::{feature_stats, resample_and_fit, ResampleMode, ResamplePlan};
use ordstab::synthetic::{generate, oracle_probs, GeneratorSpec, WeightPlacement};
use ordstab::trainer::Objective;
use ordstab::{
    fit, select_features, Dataset, FeatureNetwork, OrdinalModel, RegularizerKind, RegularizerMatrix,
    TrainingConfig, Variant,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn logistic(u: f64) -> f64 {
    1.0 / (1.0 + (-u).exp())
}

/// Rows `x`, labels drawn from a cumulative logistic model with weights `w`.
fn logistic_data(rng: &mut ChaCha8Rng, n: usize, w: &[f64], tau: &[f64]) -> Dataset<f64> {
    let d = w.len();
    let mut rows = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let x: Vec<f64> = (0..d).map(|_| rng.random::<f64>()).collect();
        let s: f64 = x.iter().zip(w).map(|(a, b)| a * b).sum();
        let u: f64 = rng.random();
        let label = 1 + tau.iter().filter(|t| u > logistic(**t - s)).count();
        rows.push(x);
        y.push(label);
    }
    Dataset::from_rows(rows, y, tau.len() + 1).unwrap()
}

#[test]
fn separable_toy_is_classified_perfectly() {
    let rows: Vec<Vec<f64>> = (0..40).map(|i| vec![i as f64 / 39.0]).collect();
    let y: Vec<usize> = rows.iter().map(|r| if r[0] > 0.5 { 2 } else { 1 }).collect();
    let data = Dataset::from_rows(rows, y.clone(), 2).unwrap();
    let cfg = TrainingConfig {
        alpha: 1e-5,
        ..Default::default()
    };
    let res = fit(&data, &cfg, Variant::Cumulative, None, None).unwrap();
    // larger x means a higher class, so the weight is positive
    assert!(res.model.weights(0)[0] > 0.0);
    for (i, &label) in y.iter().enumerate() {
        assert_eq!(res.model.predict_class(data.row(i)).unwrap(), label);
    }
    assert!(res.objective <= res.initial_objective);
}

#[test]
fn network_penalty_pulls_duplicate_columns_together() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let base = logistic_data(&mut rng, 400, &[4.0, 0.0, -1.0], &[1.5, 3.0]);
    // column 1 is a noisy copy of column 0
    let rows: Vec<Vec<f64>> = (0..base.n())
        .map(|i| {
            let r = base.row(i);
            vec![r[0], r[0] + rng.random_range(-0.1..0.1), r[2]]
        })
        .collect();
    let data = Dataset::from_rows(rows, base.labels().to_vec(), 3).unwrap();
    let net = FeatureNetwork::from_edges(
        3,
        [Edge {
            a: 0,
            b: 1,
            relation: Relation::SameCode,
        }],
    )
    .unwrap();
    let reg = RegularizerMatrix::build(RegularizerKind::Laplacian, &net).unwrap();
    let gap = |beta: f64| {
        let cfg = TrainingConfig {
            alpha: 1e-2,
            beta,
            ..Default::default()
        };
        let r = fit(&data, &cfg, Variant::Cumulative, Some(&reg), None).unwrap();
        let w = r.model.weights(0);
        (w[0] - w[1]).abs()
    };
    let plain = gap(0.0);
    let tied = gap(1e-1);
    assert!(plain > 0.1, "beta=0 gap {plain}");
    assert!(tied < plain, "beta>0 gap {tied} vs beta=0 gap {plain}");
}

#[test]
fn cumulative_objective_is_midpoint_convex_in_weights() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let data = logistic_data(&mut rng, 60, &[2.0, -1.0, 0.5, 0.0], &[0.0, 1.0]);
    let net = FeatureNetwork::from_edges(
        4,
        [
            Edge {
                a: 0,
                b: 1,
                relation: Relation::SameCode,
            },
            Edge {
                a: 2,
                b: 3,
                relation: Relation::SharedAncestor,
            },
        ],
    )
    .unwrap();
    for kind in [RegularizerKind::Laplacian, RegularizerKind::RandomWalk] {
        let reg = RegularizerMatrix::build(kind, &net).unwrap();
        let cfg = TrainingConfig {
            alpha: 0.05,
            beta: 0.1,
            epsilon: 1e-2,
            ..Default::default()
        };
        let obj = Objective::new(&data, Variant::Cumulative, &cfg, Some(&reg)).unwrap();
        let tau = [0.3, (0.8f64).ln()];
        for _ in 0..200 {
            let mut a: Vec<f64> = (0..4).map(|_| rng.random_range(-3.0..3.0)).collect();
            let mut b: Vec<f64> = (0..4).map(|_| rng.random_range(-3.0..3.0)).collect();
            let mid: Vec<f64> = a.iter().zip(&b).map(|(x, y)| 0.5 * (x + y)).collect();
            let mut m = mid.clone();
            a.extend(tau);
            b.extend(tau);
            m.extend(tau);
            let fa = obj.value(&a).unwrap();
            let fb = obj.value(&b).unwrap();
            let fm = obj.value(&m).unwrap();
            assert!(fm <= 0.5 * (fa + fb) + 1e-9, "{kind}: {fm} > mean of {fa}, {fb}");
        }
    }
}

fn small_cohort(seed: u64) -> Dataset<f64> {
    let spec = GeneratorSpec {
        n_patients: 800,
        n_groups: 4,
        n_independent: 4,
        seed,
        ..Default::default()
    };
    generate(&spec).unwrap().dataset().unwrap()
}

#[test]
fn results_are_stable_across_an_order_of_magnitude_of_epsilon() {
    let data = small_cohort(2);
    let run = |epsilon: f64| {
        let cfg = TrainingConfig {
            epsilon,
            ..Default::default()
        };
        let r = fit(&data, &cfg, Variant::Cumulative, None, None).unwrap();
        let (m, sel) = select_features(&r.model, cfg.selection_threshold);
        (m, sel, r.objective)
    };
    let (m0, s0, _) = run(1e-4);
    for eps in [1e-5, 1e-3] {
        let (m, s, _) = run(eps);
        let inter = s0.intersection(&s).count() as f64;
        let union = s0.union(&s).count() as f64;
        assert!(inter / union >= 0.9, "eps {eps}: jaccard {}", inter / union);
        let scale = m0.weights(0).iter().fold(0.0f64, |a, w| a.max(w.abs()));
        let drift = m0
            .weights(0)
            .iter()
            .zip(m.weights(0))
            .fold(0.0f64, |a, (x, y)| a.max((x - y).abs()));
        assert!(drift <= 0.05 * scale, "eps {eps}: weight drift {drift} of {scale}");
        let p0 = m0.probs(data.row(0)).unwrap();
        let p = m.probs(data.row(0)).unwrap();
        for (a, b) in p0.iter().zip(&p) {
            assert!((a - b).abs() < 0.01);
        }
    }
}

#[test]
fn fits_are_bit_reproducible_and_traces_monotone() {
    let data = small_cohort(4);
    for variant in Variant::ALL {
        let cfg = TrainingConfig::default();
        let a = fit(&data, &cfg, variant, None, None).unwrap();
        let b = fit(&data, &cfg, variant, None, None).unwrap();
        assert_eq!(a.model.params(), b.model.params());
        assert!(a.objective <= a.initial_objective);
        for w in a.trace.windows(2) {
            assert!(w[1].objective <= w[0].objective, "{variant}: trace rises");
        }
    }
}

#[test]
fn single_precision_fit_tracks_double() {
    let data = small_cohort(5);
    let cfg = TrainingConfig {
        alpha: 1e-3,
        ..Default::default()
    };
    let r64 = fit(&data, &cfg, Variant::Cumulative, None, None).unwrap();
    let r32 = fit(&data.cast::<f32>(), &cfg, Variant::Cumulative, None, None).unwrap();
    assert!((r32.objective as f64 - r64.objective).abs() < 1e-3 * r64.objective);
    let p64 = r64.model.probs(data.row(0)).unwrap();
    let x32: Vec<f32> = data.row(0).iter().map(|v| *v as f32).collect();
    let p32 = r32.model.probs(&x32).unwrap();
    for (a, b) in p64.iter().zip(&p32) {
        assert!((a - *b as f64).abs() < 1e-2);
    }
}

#[test]
fn laplacian_and_random_walk_are_positive_semidefinite() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..20 {
        let d = rng.random_range(2..40);
        let mut edges = Vec::new();
        for a in 0..d {
            for b in a + 1..d {
                if rng.random::<f64>() < 0.2 {
                    edges.push(Edge {
                        a,
                        b,
                        relation: Relation::SameCode,
                    });
                }
            }
        }
        let net = FeatureNetwork::from_edges(d, edges).unwrap();
        for kind in [RegularizerKind::Laplacian, RegularizerKind::RandomWalk] {
            let s = RegularizerMatrix::<f64>::build(kind, &net).unwrap();
            let dense = s.matrix().to_dense();
            let m = DMatrix::from_fn(d, d, |i, j| dense[i][j]);
            assert!((&m - m.transpose()).amax() < 1e-12);
            assert!(m.symmetric_eigen().eigenvalues.min() >= -1e-10);
        }
    }
}

#[test]
fn generator_oracle_matches_model_probabilities() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for variant in [Variant::Cumulative, Variant::StagewiseShared] {
        for _ in 0..1000 {
            let l = rng.random_range(2..=5);
            let mut tau = vec![rng.random_range(-3.0..1.0)];
            for _ in 1..l - 1 {
                let last = *tau.last().unwrap();
                tau.push(last + rng.random_range(0.01..2.0));
            }
            let w: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
            let x: Vec<f64> = (0..3).map(|_| rng.random::<f64>()).collect();
            let model = OrdinalModel::new(variant, vec![w.clone()], tau.clone()).unwrap();
            let score: f64 = w.iter().zip(&x).map(|(a, b)| a * b).sum();
            let oracle = oracle_probs(variant, &tau, score);
            for (a, b) in model.probs(&x).unwrap().iter().zip(&oracle) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }
}

#[test]
fn zero_weights_reproduce_target_proportions() {
    let spec = GeneratorSpec {
        n_patients: 3000,
        n_groups: 2,
        n_independent: 2,
        n_true: 0,
        placement: WeightPlacement::Features,
        class_proportions: vec![0.7, 0.2, 0.1],
        seed: 9,
        ..Default::default()
    };
    let cohort = generate(&spec).unwrap();
    let n = spec.n_patients as f64;
    for (c, &p) in spec.class_proportions.iter().enumerate() {
        let observed = cohort.truth.class_counts[c] as f64;
        let sd = (n * p * (1.0 - p)).sqrt();
        assert!((observed - n * p).abs() <= 3.0 * sd, "class {}: {observed}", c + 1);
    }
}

#[test]
fn correlated_pair_is_selected_unstably() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let n = 400;
    let mut rows = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let a: f64 = rng.random();
        let b = a + rng.random_range(-0.02..0.02);
        let noise: Vec<f64> = (0..4).map(|_| rng.random::<f64>()).collect();
        let u: f64 = rng.random();
        y.push(if u > logistic(2.0 - 5.0 * a) { 2 } else { 1 });
        let mut r = vec![a, b];
        r.extend(noise);
        rows.push(r);
    }
    let data = Dataset::from_rows(rows, y, 2).unwrap();
    let cfg = TrainingConfig {
        alpha: 2e-2,
        ..Default::default()
    };
    let plan = ResamplePlan::new(ResampleMode::SubsampleHalf, 30, 3);
    let snaps = resample_and_fit(&data, &plan, &cfg, Variant::Cumulative, None).unwrap();
    let stats = feature_stats(&snaps.block(0));
    let union = snaps
        .samples
        .iter()
        .filter(|w| w[0] != 0.0 || w[1] != 0.0)
        .count() as f64
        / snaps.len() as f64;
    let (fa, fb) = (stats[0].selection_freq, stats[1].selection_freq);
    assert!(fa < 1.0 && fb < 1.0, "frequencies {fa}, {fb}");
    assert!(union > fa && union > fb, "union {union} vs {fa}, {fb}");
}
