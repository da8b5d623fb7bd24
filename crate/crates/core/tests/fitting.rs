use cmp_core::training::hybrid_closed_form;
use cmp_core::{
    bounds, conditional_log_likelihood, fit, generate_ground_truth, kfold_cv, one_component_fit, sample_dataset, select_components, Algorithm,
    CmpParams64, CvConfig, GroundTruthSpec, OneComponentConfig, SamplingPlan, SpikeDataset64, TrainConfig,
};

fn small_problem(seed: u64, latent_dim: usize) -> (CmpParams64, SpikeDataset64) {
    let spec = GroundTruthSpec {
        neurons: 6,
        latent_dim,
        pref_stim_seed: seed,
        ..GroundTruthSpec::default()
    };
    let truth = generate_ground_truth(&spec).unwrap();
    let plan = SamplingPlan {
        stimulus_count: 6,
        trials_per_stimulus: 30,
        rng_seed: seed,
    };
    let d = sample_dataset(&truth, &plan).unwrap();
    (truth, d)
}

fn quick(algorithm: Algorithm) -> TrainConfig {
    TrainConfig {
        algorithm,
        epochs: 30,
        minibatch_size: 30,
        restarts: 4,
        rng_seed: 5,
        ..TrainConfig::default()
    }
}

#[test]
fn fits_are_identical_across_thread_pools() {
    let (_, d) = small_problem(1, 3);
    for algorithm in Algorithm::ALL {
        let cfg = quick(algorithm);
        let run = |threads| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| fit(&d, 3, &cfg)).unwrap()
        };
        let (a, b) = (run(1), run(3));
        assert_eq!(a.nll_trace, b.nll_trace);
        assert_eq!(a.final_params, b.final_params);
        assert_eq!(a.restart_final_nll, b.restart_final_nll);
    }
}

#[test]
fn best_restart_is_selected() {
    let (_, d) = small_problem(2, 3);
    let r = fit(&d, 3, &quick(Algorithm::Hybrid)).unwrap();
    let finals: Vec<f64> = r.restart_final_nll.iter().map(|x| x.unwrap()).collect();
    let best = finals.iter().cloned().fold(f64::INFINITY, f64::min);
    assert_eq!(r.final_nll(), best);
    assert_eq!(finals[r.restart_index], best);
    assert_eq!(r.nll_trace.len(), 31);
}

#[test]
fn trained_models_land_between_the_bounds() {
    let (truth, d) = small_problem(3, 3);
    let b = bounds(&d, Some(&truth)).unwrap();
    let cfg = TrainConfig {
        epochs: 100,
        minibatch_size: 30,
        restarts: 4,
        ..TrainConfig::default()
    };
    let r = fit(&d, 3, &cfg).unwrap();
    assert!(r.final_nll() < b.upper_bound_nll, "{} vs {}", r.final_nll(), b.upper_bound_nll);
    assert!(r.final_nll() < r.nll_trace[0]);
}

#[test]
fn warm_start_from_the_single_component_fit() {
    let (_, d) = small_problem(4, 2);
    let one = one_component_fit(&d, &OneComponentConfig::default()).unwrap();
    let mut p = CmpParams64::zeros(d.neurons(), 3);
    p.harmonium.bias_n = one.params.harmonium.bias_n.clone();
    p.link = one.params.link.clone();
    let start = -conditional_log_likelihood(&d, &p).unwrap();
    assert!((start - one.nll).abs() < 1e-12);
    for _ in 0..10 {
        p = hybrid_closed_form(&d, &p).unwrap().0;
        assert!(-conditional_log_likelihood(&d, &p).unwrap() <= one.nll + 1e-9);
    }
}

#[test]
fn cross_validation_cells_do_not_depend_on_order() {
    let (_, d) = small_problem(5, 2);
    let cfg = TrainConfig {
        epochs: 10,
        minibatch_size: 30,
        restarts: 2,
        ..TrainConfig::default()
    };
    let cv = CvConfig { folds: 3, rng_seed: 4 };
    let a = kfold_cv(&d, &[1, 3], &cfg, &cv).unwrap();
    let b = kfold_cv(&d, &[3, 1], &cfg, &cv).unwrap();
    assert_eq!(a.mean, b.mean.iter().rev().cloned().collect::<Vec<_>>());
    assert_eq!(a.held_out[2][1], b.held_out[2][0]);
    assert_eq!(a.relative_gain[0], 0.0);
    assert_eq!(select_components(&a), a.selected_components);

    let reversed: Vec<usize> = (0..d.len()).rev().collect();
    let c = kfold_cv(&d.subset(&reversed).unwrap(), &[1, 3], &cfg, &cv).unwrap();
    assert!((a.mean[0] - c.mean[0]).abs() < 1e-12, "{} vs {}", a.mean[0], c.mean[0]);
}

#[test]
fn single_component_grid_reports_zero_gain() {
    let (_, d) = small_problem(6, 0);
    let r = kfold_cv(&d, &[1], &quick(Algorithm::Hybrid), &CvConfig::default()).unwrap();
    assert_eq!(r.relative_gain, vec![0.0]);
    assert_eq!(r.selected_components, 1);
    assert_eq!(r.held_out.len(), 10);
    assert!(r.mean[0].is_finite() && r.std_error[0] >= 0.0);
}
