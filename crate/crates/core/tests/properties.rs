use crossfit_bridge::bridge::{
    deconfounded_summary, draw_reference, fit_bridge_crossfit, prepare_crossfit, BridgeAtom, BridgeEstimate,
    BridgeSystem, ContextEmbedding, EmbeddingBasis, RefMeasure, Stage2Settings, TensorGrid,
};
use crossfit_bridge::kernel::{gram_sym, median_heuristic, KernelSpec};
use crossfit_bridge::nuisance::{make_folds, NuisanceSettings};
use crossfit_bridge::rng::rng_from_seed;
use crossfit_bridge::synthetic::{extract_cmr, observed, sample_dataset, CmrKind, GaussianPomdp, PomdpSpec};
use crossfit_bridge::PointSet;
use nalgebra::DVector;
use proptest::prelude::*;
use rand::Rng;

/// Random embeddings over 1-D W points and random atoms with 2-D z.
fn random_system(seed: u64, atoms: usize, bw_z: f64) -> BridgeSystem {
    let mut rng = rng_from_seed(seed);
    let n_w = 8;
    let points = PointSet::from_flat(1, (0..n_w).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
    let n_c = 6;
    let contexts = (0..n_c)
        .map(|i| ContextEmbedding {
            fold: 0,
            source_index: i,
            support: 0,
            weights: (0..n_w).map(|_| rng.random_range(-0.5..1.0) / n_w as f64).collect(),
        })
        .collect();
    let basis = EmbeddingBasis {
        kernel_w: KernelSpec::gaussian(1.0).unwrap(),
        points,
        supports: vec![(0..n_w).collect()],
        contexts,
    };
    let atoms = (0..atoms)
        .map(|i| {
            let c = rng.random_range(0..n_c);
            BridgeAtom {
                fold: 0,
                context: c,
                source_index: i,
                z: vec![rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)],
                target: rng.random_range(0.0..1.0),
            }
        })
        .collect();
    BridgeSystem::from_parts(basis, atoms, KernelSpec::gaussian(bw_z).unwrap()).unwrap()
}

fn gaussian_fit(n: usize, seed: u64) -> (BridgeSystem, PointSet) {
    let model = GaussianPomdp::new(PomdpSpec::default()).unwrap();
    let eps = observed(&sample_dataset(&model, n, seed));
    let data = extract_cmr(&eps, 1, CmrKind::Transition).unwrap();
    let s2 = Stage2Settings { m_per_fold: 4, ..Default::default() };
    let fit = prepare_crossfit(&data, 4, &NuisanceSettings::default(), &s2, seed).unwrap();
    let ms = PointSet::from_rows(&eps.iter().map(|e| e.m.clone()).collect::<Vec<_>>()).unwrap();
    (fit.system, ms)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn closed_form_beats_every_perturbation(seed in 0u64..10_000, d in 2usize..20, log_l in -4.0f64..0.0, scale in 1e-3f64..10.0) {
        let sys = random_system(seed, d, 0.8);
        let lambda = 10f64.powf(log_l);
        let b = fit_bridge_crossfit(&sys, lambda).unwrap();
        let best = sys.objective(&b.alpha, lambda);
        let mut rng = rng_from_seed(seed ^ 0xabc);
        let probe: Vec<f64> = b.alpha.iter().map(|a| a + scale * rng.random_range(-1.0..1.0)).collect();
        prop_assert!(sys.objective(&probe, lambda) >= best * (1.0 - 1e-12) - 1e-15);
    }

    #[test]
    fn closed_form_zeroes_the_gradient(seed in 0u64..10_000, d in 2usize..20, log_l in -3.0f64..0.0) {
        let sys = random_system(seed, d, 0.8);
        let lambda = 10f64.powf(log_l);
        let b = fit_bridge_crossfit(&sys, lambda).unwrap();
        // one residual term per atom: L(α) = ‖Gα − y‖²/n + λαᵀGα
        let g = sys.gram.entries();
        let n = d as f64;
        let a = DVector::from_column_slice(&b.alpha);
        let y = DVector::from_column_slice(&sys.targets);
        let grad = g * (g * &a - &y) * (2.0 / n) + g * &a * (2.0 * lambda);
        let scale = (g * &y).norm() * (2.0 / n);
        prop_assert!(grad.norm() <= 1e-8 * (1.0 + scale), "{} vs {}", grad.norm(), scale);
    }

    #[test]
    fn folds_partition_any_divisible_sample(k in 2usize..7, per in 1usize..30, seed in any::<u64>()) {
        let n = k * per;
        let f = make_folds(n, k, seed).unwrap();
        let mut seen = vec![false; n];
        for j in 0..k {
            prop_assert_eq!(f.fold(j).len(), per);
            for &i in f.fold(j) {
                prop_assert!(!seen[i]);
                seen[i] = true;
            }
            prop_assert_eq!(f.complement(j).len(), n - per);
        }
        prop_assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn gram_matrices_are_symmetric_psd(seed in any::<u64>(), n in 2usize..30, dim in 1usize..4, bw in 0.1f64..5.0) {
        let mut rng = rng_from_seed(seed);
        let p = PointSet::from_flat(dim, (0..n * dim).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap();
        let g = gram_sym(&KernelSpec::gaussian(bw).unwrap(), &p);
        prop_assert!(g.max_asymmetry() == 0.0);
        prop_assert!(g.min_eigenvalue() > -1e-10);
        prop_assert!(g.entries().diagonal().iter().all(|v| (v - 1.0).abs() < 1e-15));
    }

    #[test]
    fn median_bandwidth_scales_with_the_data(seed in any::<u64>(), n in 3usize..25, c in 0.1f64..10.0) {
        let mut rng = rng_from_seed(seed);
        let p = PointSet::from_flat(2, (0..2 * n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let q = PointSet::from_flat(2, p.as_flat().iter().map(|v| c * v).collect()).unwrap();
        let (a, b) = (median_heuristic(&p).unwrap(), median_heuristic(&q).unwrap());
        prop_assert!((b - c * a).abs() <= 1e-9 * b);
    }

    #[test]
    fn reference_draws_stay_in_the_box(seed in any::<u64>(), m in 1usize..50) {
        let nu = RefMeasure::uniform_box(vec![-1.0, 0.5], vec![2.0, 0.75]).unwrap();
        let z = draw_reference(&nu, m, seed);
        prop_assert_eq!(z.len(), m);
        for r in z.iter() {
            prop_assert!((-1.0..=2.0).contains(&r[0]) && (0.5..=0.75).contains(&r[1]));
        }
        prop_assert_eq!(z, draw_reference(&nu, m, seed));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    /// The summary clips the bridge at zero and renormalizes, so a positive rescaling
    /// of the coefficients cannot change it.
    #[test]
    fn summary_ignores_positive_rescaling(seed in 0u64..1000, c in 0.01f64..100.0) {
        let (sys, ms) = gaussian_fit(40, seed);
        let b = fit_bridge_crossfit(&sys, 1e-3).unwrap();
        let scaled = b.with_alpha(b.alpha.iter().map(|a| c * a).collect()).unwrap();
        let nu = &sys.measures[0];
        let grid = TensorGrid::over_box(&nu.lower, &nu.upper, 10).unwrap();
        for u in 0..2u8 {
            let s0 = deconfounded_summary(&b, &ms, u, &grid).unwrap();
            let s1 = deconfounded_summary(&scaled, &ms, u, &grid).unwrap();
            prop_assert!((s0 - s1).abs() < 1e-9 * (1.0 + s0.abs()));
            prop_assert!(s0 >= grid.axis(0)[0] - 1e-12 && s0 <= *grid.axis(0).last().unwrap() + 1e-12);
        }
    }
}

#[test]
fn stored_bridges_evaluate_identically() {
    let (sys, _) = gaussian_fit(40, 3);
    let b = fit_bridge_crossfit(&sys, 1e-3).unwrap();
    let text = serde_json::to_string(&b.to_artifact()).unwrap();
    let back = BridgeEstimate::from_artifact(serde_json::from_str(&text).unwrap()).unwrap();
    let mut rng = rng_from_seed(5);
    for _ in 0..20 {
        let w = [f64::from(rng.random_range(0..2u8)), rng.random_range(-2.0..3.0)];
        let z = [rng.random_range(-2.0..3.0), rng.random_range(-2.0..3.0)];
        assert_eq!(
            crossfit_bridge::bridge::bridge_eval(&b, &w, &z).unwrap(),
            crossfit_bridge::bridge::bridge_eval(&back, &w, &z).unwrap()
        );
    }
}

#[test]
fn fits_do_not_depend_on_the_thread_count() {
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let (sys, _) = gaussian_fit(80, 9);
            fit_bridge_crossfit(&sys, 1e-3).unwrap().alpha
        })
    };
    assert_eq!(run(1), run(4));
}
