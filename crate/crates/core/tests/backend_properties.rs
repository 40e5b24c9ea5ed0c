mod common;

use std::collections::HashMap;

use common::*;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;
use vbackend::backends::*;
use vbackend::pipeline::*;
use vbackend::psvm::*;
use vbackend::{Embedding, EmbeddingSet, EnrollmentManifest, ScoreSet, Trial, PRIMARY_OPERATING_POINTS};

fn random_plda(seed: u64, d: usize) -> PldaModel {
    let mut r = rng(seed);
    let mu = DVector::from_vec(normal_vec(&mut r, d));
    PldaModel::new(mu, random_spd(&mut r, d, 0.2), random_spd(&mut r, d, 0.5)).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn plda_is_symmetric(seed in any::<u64>(), d in 1usize..8) {
        let m = random_plda(seed, d);
        let mut r = rng(seed ^ 1);
        let e = normal_vec(&mut r, d);
        let t = normal_vec(&mut r, d);
        let s = m.scoring().unwrap();
        prop_assert_eq!(s.score(&e, &t).unwrap().to_bits(), s.score(&t, &e).unwrap().to_bits());
    }

    #[test]
    fn psvm_init_preserves_plda(seed in any::<u64>(), d in 1usize..10) {
        let m = random_plda(seed, d);
        let p = init_psvm_from_plda(&m).unwrap();
        let mut r = rng(seed ^ 2);
        for _ in 0..20 {
            let e = normal_vec(&mut r, d);
            let t = normal_vec(&mut r, d);
            let a = score_psvm(&p, &e, &t, None).unwrap();
            let b = score_plda(&m, &[&e], &t).unwrap();
            prop_assert!((a - b).abs() < 1e-8 * (1.0 + b.abs()), "{} vs {}", a, b);
            prop_assert_eq!(a.to_bits(), score_psvm(&p, &t, &e, None).unwrap().to_bits());
        }
    }

    #[test]
    fn snorm_is_affine_invariant(seed in any::<u64>(), a in 0.1..10.0f64, b in -5.0..5.0f64, frac in 0.05..1.0f64) {
        let mut r = rng(seed);
        let raw = ScoreSet::new(vec![Trial::new("m", "t")], vec![r.random_range(-3.0..3.0)]).unwrap();
        let ec: Vec<f64> = normal_vec(&mut r, 25);
        let pc: Vec<f64> = normal_vec(&mut r, 31);
        let maps = |f: &dyn Fn(f64) -> f64| {
            let e: HashMap<String, Vec<f64>> = [("m".to_string(), ec.iter().map(|v| f(*v)).collect())].into();
            let p: HashMap<String, Vec<f64>> = [("t".to_string(), pc.iter().map(|v| f(*v)).collect())].into();
            (e, p)
        };
        let (e1, p1) = maps(&|v| v);
        let (e2, p2) = maps(&|v| a * v + b);
        let s1 = adaptive_snorm(&raw, &e1, &p1, frac).unwrap().scores()[0];
        let s2 = adaptive_snorm(&raw.map(|v| a * v + b).unwrap(), &e2, &p2, frac).unwrap().scores()[0];
        prop_assert!((s1 - s2).abs() < 1e-9 * (1.0 + s1.abs()));
    }
}

#[test]
fn snorm_cohort_duplication_invariance() {
    let mut r = rng(5);
    let raw = ScoreSet::new(vec![Trial::new("m", "t")], vec![0.7]).unwrap();
    let ec = normal_vec(&mut r, 10);
    let pc = normal_vec(&mut r, 20);
    let dup = |v: &Vec<f64>| v.iter().chain(v.iter()).copied().collect::<Vec<_>>();
    let a = adaptive_snorm(
        &raw,
        &[("m".to_string(), ec.clone())].into(),
        &[("t".to_string(), pc.clone())].into(),
        0.3,
    )
    .unwrap();
    let b = adaptive_snorm(
        &raw,
        &[("m".to_string(), dup(&ec))].into(),
        &[("t".to_string(), dup(&pc))].into(),
        0.3,
    )
    .unwrap();
    assert!((a.scores()[0] - b.scores()[0]).abs() < 1e-12);
}

#[test]
fn em_log_likelihood_never_decreases() {
    for seed in 0..3 {
        let mut r = rng(seed);
        let d = 4;
        let mu = DVector::from_vec(normal_vec(&mut r, d));
        let b = random_spd(&mut r, d, 0.1);
        let w = random_spd(&mut r, d, 0.3);
        let set = gaussian_corpus(&mut r, &mu, &b, &w, 60, 3 + seed as usize);
        let fit = fit_plda_em(&set, 20).unwrap();
        assert_eq!(fit.log_likelihoods.len(), 21);
        for w in fit.log_likelihoods.windows(2) {
            assert!(w[1] >= w[0] - 1e-9 * w[0].abs(), "{:?}", fit.log_likelihoods);
        }
    }
}

#[test]
fn batch_scoring_matches_single_and_thread_count() {
    let d = 6;
    let m = random_plda(11, d);
    let mut r = rng(12);
    let mk = |r: &mut rand_chacha::ChaCha8Rng, p: &str, n: usize| {
        EmbeddingSet::new(d, (0..n).map(|i| Embedding::new(format!("{p}{i}"), normal_vec(r, d))).collect()).unwrap()
    };
    let enroll = mk(&mut r, "e", 20);
    let probe = mk(&mut r, "t", 30);
    let trials: Vec<Trial> = (0..600).map(|k| Trial::new(format!("e{}", k % 20), format!("t{}", k % 30))).collect();
    let manifest = EnrollmentManifest::default();
    let scorer = m.scoring().unwrap();
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| score_trials(&scorer, &enroll, &probe, &manifest, &trials).unwrap())
    };
    let one = run(1);
    assert_eq!(one, run(4));
    for (t, s) in one.trials().iter().zip(one.scores()) {
        let e = &enroll.get(&t.model_id).unwrap().vector;
        let p = &probe.get(&t.segment_id).unwrap().vector;
        let direct = score_plda(&m, &[e], p).unwrap();
        assert!((s - direct).abs() < 1e-9 * (1.0 + direct.abs()));
    }
    let psvm = init_psvm_from_plda(&m).unwrap();
    let ps = score_trials(&psvm, &enroll, &probe, &manifest, &trials).unwrap();
    for (a, b) in ps.scores().iter().zip(one.scores()) {
        assert!((a - b).abs() < 1e-8 * (1.0 + b.abs()));
    }
}

fn fd_check(tau: f64, seed: u64) -> f64 {
    let mut r = rng(seed);
    let d = 3;
    let n = 20;
    let base = init_psvm_from_plda(&random_plda(seed, d)).unwrap();
    // perturb so every parameter, including duration weights, is nonzero
    let mut p = base.to_params();
    for v in p.iter_mut() {
        *v += 0.1 * r.random_range(-1.0..1.0);
    }
    let m = PsvmModel::from_params(d, &p).unwrap();
    let e = random_matrix(&mut r, n, d);
    let t = random_matrix(&mut r, n, d);
    let phi = DMatrix::from_fn(n, 3, |_, _| r.random_range(5.0..8.0));
    let same = (0..n).map(|i| i % 3 == 0).collect();
    let data = PairData::new(e, t, Some(phi), same).unwrap();
    // keep scores near the thresholds so the sigmoids are not saturated
    let scores = data.scores(&m).unwrap();
    let mut shifted = m.clone();
    shifted.bias += 4.0 - scores.iter().sum::<f64>() / n as f64;
    let ops = PRIMARY_OPERATING_POINTS;
    let (_, grad) = smoothed_dcf_loss_and_gradient(&shifted, &data, &ops, tau).unwrap();
    let p0 = shifted.to_params();
    let mut worst: f64 = 0.0;
    for k in 0..p0.len() {
        let h = 1e-5 * (1.0 + p0[k].abs());
        let mut hi = p0.clone();
        let mut lo = p0.clone();
        hi[k] += h;
        lo[k] -= h;
        let fh = smoothed_dcf_loss(&PsvmModel::from_params(d, &hi).unwrap(), &data, &ops, tau).unwrap();
        let fl = smoothed_dcf_loss(&PsvmModel::from_params(d, &lo).unwrap(), &data, &ops, tau).unwrap();
        let numeric = (fh - fl) / (2.0 * h);
        let rel = (grad[k] - numeric).abs() / grad[k].abs().max(numeric.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    worst
}

#[test]
fn psvm_gradient_matches_finite_differences() {
    for (tau, seed) in [(0.1, 1), (0.3, 2), (1.0, 3), (2.0, 4)] {
        let err = fd_check(tau, seed);
        assert!(err < 1e-5, "tau {tau}: relative error {err}");
    }
}

#[test]
fn refinement_never_increases_full_batch_loss() {
    let mut r = rng(21);
    let d = 4;
    let m = init_psvm_from_plda(&random_plda(21, d)).unwrap();
    let n = 200;
    let e = random_matrix(&mut r, n, d);
    let same: Vec<bool> = (0..n).map(|i| i % 4 == 0).collect();
    let t = DMatrix::from_fn(n, d, |i, j| if same[i] { e[(i, j)] + 0.3 * r.random_range(-1.0..1.0) } else { r.random_range(-2.0..2.0) });
    let data = PairData::new(e, t, None, same).unwrap();
    let cfg = RefineConfig {
        learning_rate: 0.05,
        batch_size: usize::MAX,
        epochs: 30,
        ..RefineConfig::default()
    };
    let out = refine_psvm(&m, &data, &PRIMARY_OPERATING_POINTS, &cfg).unwrap();
    assert!(out.final_loss <= out.initial_loss);
    let again = refine_psvm(&m, &data, &PRIMARY_OPERATING_POINTS, &cfg).unwrap();
    assert_eq!(out.model, again.model);
}

#[test]
fn lda_and_stacking_dims() {
    let mut r = rng(3);
    let d = 8;
    let b = random_spd(&mut r, d, 0.5);
    let set = gaussian_corpus(&mut r, &DVector::zeros(d), &b, &DMatrix::identity(d, d), 30, 4);
    let lda = fit_lda(&set, 5).unwrap().value;
    assert_eq!(lda.transform.out_dim(), 5);
    let stacked = stack_embeddings(&[&set, &set, &set]).unwrap();
    assert_eq!(stacked.dim(), 24);
    let ln = length_normalize_set(&stacked).unwrap();
    for rec in ln.records() {
        let n: f64 = rec.vector.iter().map(|v| v * v).sum();
        assert!((n - 1.0).abs() < 1e-12);
    }
}
