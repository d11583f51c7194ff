//! Invariants of the public API, checked on random inputs.

use convex_attn::convex::{
    self, attention_importance, convex_forward, convex_objective, dataset_masks, gate_mask, group_lasso_penalty,
    sample_gates, ConvexParams, ConvexVariant,
};
use convex_attn::data::{one_hot_embed, split_dataset, Dataset, EmbeddingSpec, Sample, Target, TokenMatrix};
use convex_attn::losses::LossKind;
use convex_attn::nonconvex::{alt_forward, project_to_simplex, softmax_rows, AltAttnParams, AltHead, AltVariant};
use convex_attn::recovery::{self, balanced_rescale, beta_shutoff, recover_nonconvex};
use convex_attn::rng;
use convex_attn::solver::{self, lipschitz_estimate, Algorithm, Problem, SolveConfig, StepRule};
use convex_attn::tasks::{self, mod_inverse, ModularTaskSpec};
use ndarray::Array2;
use proptest::prelude::*;

fn gaussian(seed: u64, rows: usize, cols: usize) -> Array2<f64> {
    let mut g = rng::keyed(seed, 2000, 0);
    Array2::from_shape_vec((rows, cols), rng::normal_vec(&mut g, rows * cols)).unwrap()
}

fn random_params(variant: ConvexVariant, n: usize, d: usize, c: usize, h: usize, seed: u64) -> ConvexParams {
    let mut p = ConvexParams::zeros(variant, n, d, c, h).unwrap();
    for (i, z) in p.z.iter_mut().enumerate() {
        *z = gaussian(seed * 101 + i as u64, n, d);
    }
    p
}

fn instance(seed: u64, n_samples: usize, n: usize, d: usize, c: usize) -> Dataset {
    let mut g = rng::keyed(seed, 2001, 0);
    let samples = (0..n_samples)
        .map(|i| {
            let y = rng::normal_vec(&mut g, c);
            let target = if c == 1 { Target::Scalar(y[0]) } else { Target::Vector(y) };
            Sample::new(TokenMatrix::new(gaussian(seed * 1000 + i as u64, n, d)).unwrap(), target)
        })
        .collect();
    Dataset::from_samples(samples, None).unwrap()
}

fn certified(max_iters: usize, tol: f64) -> SolveConfig {
    SolveConfig { max_iters, tol_kkt: tol, step_rule: StepRule::LipschitzAuto, ..SolveConfig::default() }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn splits_partition_the_samples(n_samples in 2usize..40, frac in 0.1f64..1.0, seed in 0u64..1000) {
        prop_assume!((n_samples as f64 * frac).floor() >= 1.0);
        let data = instance(seed, n_samples, 2, 2, 1);
        let (train, test) = split_dataset(&data, frac, seed).unwrap();
        prop_assert_eq!(train.len() + test.len(), n_samples);
        let mut seen: Vec<f64> = train.samples().iter().chain(test.samples()).map(|s| s.x.as_array()[[0, 0]]).collect();
        seen.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut all: Vec<f64> = data.samples().iter().map(|s| s.x.as_array()[[0, 0]]).collect();
        all.sort_by(|a, b| a.partial_cmp(b).unwrap());
        prop_assert_eq!(seen, all);
    }

    #[test]
    fn embeddings_are_pure(ids in prop::collection::vec(0usize..7, 1..6), seed in 0u64..100) {
        let spec = EmbeddingSpec::fixed_random(7, 3, seed);
        prop_assert_eq!(one_hot_embed(&ids, &spec).unwrap(), one_hot_embed(&ids, &spec).unwrap());
    }

    #[test]
    fn softmax_rows_are_stochastic_and_shift_invariant(seed in 0u64..1000, shift in -50.0f64..50.0) {
        let u = gaussian(seed, 3, 5) * 4.0;
        let a = softmax_rows(&u).unwrap();
        for r in a.rows() {
            prop_assert!((r.sum() - 1.0).abs() < 1e-12);
        }
        let b = softmax_rows(&(&u + shift)).unwrap();
        prop_assert!(a.iter().zip(b.iter()).all(|(x, y)| (x - y).abs() < 1e-12));
    }

    #[test]
    fn simplex_projection_is_nearest_and_idempotent(v in prop::collection::vec(-5.0f64..5.0, 1..8)) {
        let p = project_to_simplex(&v).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|x| *x >= 0.0));
        let again = project_to_simplex(&p).unwrap();
        prop_assert!(p.iter().zip(&again).all(|(a, b)| (a - b).abs() < 1e-12));
        let dist = |q: &[f64]| v.iter().zip(q).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        let dp = dist(&p);
        for k in 0..v.len() {
            let mut e = vec![0.0; v.len()];
            e[k] = 1.0;
            prop_assert!(dp <= dist(&e) + 1e-12);
        }
    }

    #[test]
    fn alt_forward_is_balanced_homogeneous(seed in 0u64..1000, alpha in 0.1f64..10.0, vector in any::<bool>()) {
        let (variant, c) = if vector { (AltVariant::Vector, 2) } else { (AltVariant::Scalar, 1) };
        let p = AltAttnParams::init(variant, 2, 4, 3, c, &mut rng::keyed(seed, 2002, 0));
        let x = TokenMatrix::new(gaussian(seed, 4, 3)).unwrap();
        let scaled = AltAttnParams {
            heads: p
                .heads
                .iter()
                .map(|h| AltHead {
                    w1: h.w1.clone(),
                    w2: h.w2.iter().map(|v| v * alpha).collect(),
                    w3: h.w3.iter().map(|v| v / alpha).collect(),
                })
                .collect(),
            ..p.clone()
        };
        let a = alt_forward(&x, &p, None).unwrap();
        let b = alt_forward(&x, &scaled, None).unwrap();
        prop_assert!(a.iter().zip(&b).all(|(u, v)| (u - v).abs() <= 1e-12 * (1.0 + u.abs())));
    }

    #[test]
    fn balanced_rescale_never_raises_the_regularizer(
        w2 in prop::collection::vec(-3.0f64..3.0, 1..5),
        w3 in -3.0f64..3.0,
    ) {
        let (a, b) = balanced_rescale(&w2, &[w3]);
        let reg = |u: &[f64], s: f64| 0.5 * (u.iter().map(|v| v * v).sum::<f64>() + s * s);
        prop_assert!(reg(&a, b[0]) <= reg(&w2, w3) + 1e-12);
    }

    #[test]
    fn convex_forward_is_linear(seed in 0u64..1000, a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let (n, d, c, h) = (4, 3, 2, 3);
        let p = random_params(ConvexVariant::Fcn, n, d, c, h, seed);
        let q = random_params(ConvexVariant::Fcn, n, d, c, h, seed + 7);
        let x = TokenMatrix::new(gaussian(seed + 3, n, d)).unwrap();
        let mask = gate_mask(&sample_gates(seed, h, n, d).unwrap(), &x).unwrap();
        let lhs = convex_forward(&p.combine(a, &q, b), &x, Some(&mask)).unwrap();
        let fp = convex_forward(&p, &x, Some(&mask)).unwrap();
        let fq = convex_forward(&q, &x, Some(&mask)).unwrap();
        for l in 0..c {
            prop_assert!((lhs[l] - (a * fp[l] + b * fq[l])).abs() < 1e-12 * (1.0 + lhs[l].abs()) * 10.0);
        }
    }

    #[test]
    fn penalty_is_a_norm(seed in 0u64..1000, a in -4.0f64..4.0) {
        let p = random_params(ConvexVariant::Vector, 4, 3, 2, 1, seed);
        let q = random_params(ConvexVariant::Vector, 4, 3, 2, 1, seed + 1);
        let sum = p.combine(1.0, &q, 1.0);
        prop_assert!(group_lasso_penalty(&sum) <= group_lasso_penalty(&p) + group_lasso_penalty(&q) + 1e-12);
        let scaled = p.combine(a, &q, 0.0);
        prop_assert!((group_lasso_penalty(&scaled) - a.abs() * group_lasso_penalty(&p)).abs() < 1e-10);
    }

    #[test]
    fn convex_objective_is_convex_along_chords(seed in 0u64..1000, t in 0.0f64..1.0) {
        let data = instance(seed, 6, 3, 2, 2);
        let p = random_params(ConvexVariant::Vector, 3, 2, 2, 1, seed);
        let q = random_params(ConvexVariant::Vector, 3, 2, 2, 1, seed + 1);
        let obj = |z: &ConvexParams| convex_objective(z, &data, 0.3, LossKind::Squared, None).unwrap();
        let mid = obj(&p.combine(t, &q, 1.0 - t));
        prop_assert!(mid <= t * obj(&p) + (1.0 - t) * obj(&q) + 1e-9);
    }
}

#[test]
fn masks_do_not_depend_on_parameters() {
    let data = instance(3, 8, 4, 3, 2);
    let gates = sample_gates(9, 3, 4, 3).unwrap();
    let before = dataset_masks(&gates, &data).unwrap();
    let init = ConvexParams::zeros_for(ConvexVariant::Fcn, &data, 3).unwrap();
    let beta = 0.1 * beta_shutoff(&data, LossKind::Squared, Some(&before), ConvexVariant::Fcn).unwrap();
    let problem = Problem { data: &data, beta, kind: LossKind::Squared, masks: Some(&before) };
    solver::solve(&init, &problem, &certified(5000, 1e-8)).unwrap();
    assert_eq!(dataset_masks(&gates, &data).unwrap(), before);
}

#[test]
fn recovered_attention_sits_on_nonzero_rows() {
    let data = instance(4, 10, 5, 3, 1);
    let beta = 0.2 * beta_shutoff(&data, LossKind::Squared, None, ConvexVariant::Scalar).unwrap();
    let init = ConvexParams::zeros_for(ConvexVariant::Scalar, &data, 1).unwrap();
    let problem = Problem { data: &data, beta, kind: LossKind::Squared, masks: None };
    let (z, rep) = solver::solve(&init, &problem, &certified(20000, 1e-9)).unwrap();
    assert!(rep.converged);
    let imp = attention_importance(&z);
    let alt = recover_nonconvex(&z, AltVariant::Scalar, 5).unwrap();
    let tokens: Vec<usize> = alt.heads.iter().map(|h| h.w1.iter().position(|v| *v == 1.0).unwrap()).collect();
    assert!(!tokens.is_empty());
    assert!((imp.mass_on(&tokens) - 1.0).abs() < 1e-12);
    for k in 0..5 {
        assert_eq!(imp.scores[k] > 0.0, tokens.contains(&k));
    }
}

#[test]
fn ista_with_a_safe_step_is_monotone() {
    for seed in 0..5 {
        let data = instance(seed, 8, 4, 3, 1);
        let lip = lipschitz_estimate(&data, None, ConvexVariant::Scalar).unwrap();
        let beta = 0.1 * beta_shutoff(&data, LossKind::Squared, None, ConvexVariant::Scalar).unwrap();
        let config = SolveConfig {
            max_iters: 300,
            tol_kkt: 1e-14,
            step_rule: StepRule::Fixed { eta: 1.0 / lip },
            algorithm: Algorithm::Ista,
            eval_interval: 1,
            ..SolveConfig::default()
        };
        let init = ConvexParams::zeros_for(ConvexVariant::Scalar, &data, 1).unwrap();
        let problem = Problem { data: &data, beta, kind: LossKind::Squared, masks: None };
        let (_, rep) = solver::solve(&init, &problem, &config).unwrap();
        for w in rep.objective.windows(2) {
            assert!(w[1] <= w[0] + 1e-10, "seed {seed}: {} -> {}", w[0], w[1]);
        }
    }
}

#[test]
fn converged_solves_satisfy_stationarity_and_ignore_the_start() {
    for seed in 0..5 {
        let data = instance(seed, 10, 4, 3, 2);
        let beta = 0.1 * beta_shutoff(&data, LossKind::Squared, None, ConvexVariant::Vector).unwrap();
        let problem = Problem { data: &data, beta, kind: LossKind::Squared, masks: None };
        let tol = 1e-9;
        let zero = ConvexParams::zeros_for(ConvexVariant::Vector, &data, 1).unwrap();
        let random = random_params(ConvexVariant::Vector, 4, 3, 2, 1, seed);
        let (za, ra) = solver::solve(&zero, &problem, &certified(50000, tol)).unwrap();
        let (zb, rb) = solver::solve(&random, &problem, &certified(50000, tol)).unwrap();
        assert!(ra.converged && rb.converged);
        let grad = convex::smooth_grad(&za, &data, LossKind::Squared, None).unwrap();
        for (zm, gm) in za.z.iter().zip(&grad.z) {
            for (zr, gr) in zm.rows().into_iter().zip(gm.rows()) {
                let zn = zr.dot(&zr).sqrt();
                if zn == 0.0 {
                    assert!(gr.dot(&gr).sqrt() <= beta + tol);
                } else {
                    for (g, z) in gr.iter().zip(zr) {
                        assert!((g + beta * z / zn).abs() <= tol);
                    }
                }
            }
        }
        let (oa, ob) = (ra.final_objective(), rb.final_objective());
        // Each start has a subgradient of norm at most tol per row, so by
        // convexity the objectives differ by at most that norm times the distance.
        let dist = za.combine(1.0, &zb, -1.0).z.iter().map(|m| m.iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt();
        let rows = (za.n * za.c * za.h) as f64;
        assert!((oa - ob).abs() <= tol * rows.sqrt() * dist + 1e-12, "seed {seed}: {oa} vs {ob}");
        assert!((convex_objective(&zb, &data, beta, LossKind::Squared, None).unwrap() - ob).abs() < 1e-12);
    }
}

#[test]
fn certificates_tighten_with_the_tolerance() {
    for seed in 0..5 {
        let data = instance(seed, 10, 5, 4, 1);
        let beta = 0.1 * beta_shutoff(&data, LossKind::Squared, None, ConvexVariant::Scalar).unwrap();
        let init = ConvexParams::zeros_for(ConvexVariant::Scalar, &data, 1).unwrap();
        let problem = Problem { data: &data, beta, kind: LossKind::Squared, masks: None };
        let residuals: Vec<f64> = [1e-4, 1e-6, 1e-8]
            .iter()
            .map(|&tol| {
                let (z, _) = solver::solve(&init, &problem, &certified(50000, tol)).unwrap();
                let r = recovery::kkt_certificate(&z, &data, beta, LossKind::Squared, None).unwrap().residual();
                assert!(r <= tol);
                r
            })
            .collect();
        assert!(residuals.windows(2).all(|w| w[1] <= w[0]), "seed {seed}: {residuals:?}");
    }
}

#[test]
fn modular_labels_match_modular_inverses() {
    for p in [2u64, 3, 5, 7, 11, 13] {
        let data = tasks::gen_modular_division(&ModularTaskSpec::new(p)).unwrap();
        assert_eq!(data.len() as u64, p * (p - 1));
        let mut pairs = std::collections::HashSet::new();
        for s in data.samples() {
            let t = s.tokens.as_ref().unwrap();
            let (a, b) = (t[0] as u64, t[2] as u64);
            assert!(pairs.insert((a, b)));
            let c = (a * mod_inverse(b, p).unwrap()) % p;
            assert_eq!(s.target, Target::Class(c as usize));
        }
    }
}

#[test]
fn teacher_data_is_noise_free_and_reproducible() {
    let teacher = tasks::teacher_params(6, 4, 3, 2, 11).unwrap();
    let data = tasks::teacher_dataset(&teacher, 6, 4, 30, 11).unwrap();
    for s in data.samples() {
        let y = alt_forward(&s.x, &teacher, None).unwrap();
        let stored = s.target.values().unwrap();
        assert!(y.iter().zip(&stored).all(|(a, b)| (a - b).abs() <= 1e-12));
    }
    let (again, _) = tasks::gen_synthetic_teacher(6, 4, 3, 2, 30, 11).unwrap();
    assert_eq!(again.to_json().unwrap(), data.to_json().unwrap());
}
