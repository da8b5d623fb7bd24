use cmp_core::seed::rng_from_seed;
use cmp_core::training::{all_responsibilities, em_surrogate, mean_ll_gradient, mean_surrogate_gradient};
use cmp_core::{
    conditional_ll_gradients, conditional_log_likelihood, generate_ground_truth, sample_dataset, CmpParams,
    CmpParams64, GroundTruthSpec, SamplingPlan, SpikeDataset64, Stimulus,
};
use proptest::prelude::*;
use rand::Rng;

fn setup(seed: u64) -> (CmpParams64, SpikeDataset64) {
    let spec = GroundTruthSpec {
        neurons: 5,
        latent_dim: 3,
        pref_stim_seed: seed,
        ..GroundTruthSpec::default()
    };
    let truth: CmpParams64 = generate_ground_truth(&spec).unwrap();
    let plan = SamplingPlan {
        stimulus_count: 6,
        trials_per_stimulus: 15,
        rng_seed: seed,
    };
    let d = sample_dataset(&truth, &plan).unwrap();
    let mut rng = rng_from_seed(seed + 1000);
    let mut p = truth.clone();
    let mut flat = p.to_flat();
    for v in flat.iter_mut() {
        *v += rng.random_range(-0.3..0.3);
    }
    p.assign_flat(&flat);
    (p, d)
}

fn finite_difference(p: &CmpParams64, f: impl Fn(&CmpParams64) -> f64) -> Vec<f64> {
    let h = 1e-5;
    let base = p.to_flat();
    (0..base.len())
        .map(|i| {
            let mut q = p.clone();
            let mut x = base.clone();
            x[i] = base[i] + h;
            q.assign_flat(&x);
            let up = f(&q);
            x[i] = base[i] - h;
            q.assign_flat(&x);
            (up - f(&q)) / (2.0 * h)
        })
        .collect()
}

fn assert_close(analytic: &[f64], numeric: &[f64], tol: f64) {
    let diff = analytic.iter().zip(numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let scale = numeric.iter().map(|b| b * b).sum::<f64>().sqrt().max(1e-8);
    assert!(diff / scale <= tol, "relative error {} exceeds {tol}", diff / scale);
}

#[test]
fn full_data_gradient_matches_finite_differences() {
    for seed in 0..3 {
        let (p, d) = setup(seed);
        let all: Vec<usize> = (0..d.len()).collect();
        let analytic = mean_ll_gradient(&d, &p, &all).to_flat();
        let numeric = finite_difference(&p, |q| conditional_log_likelihood(&d, q).unwrap());
        assert_close(&analytic, &numeric, 1e-6);
    }
}

#[test]
fn surrogate_gradient_matches_finite_differences() {
    for seed in 0..3 {
        let (p, d) = setup(seed);
        let frozen = all_responsibilities(&d, &p);
        let all: Vec<usize> = (0..d.len()).collect();
        let analytic = mean_surrogate_gradient(&d, &p, &frozen, &all).to_flat();
        // Move away from the tangent point so the two objectives differ.
        let mut q = p.clone();
        q.harmonium.bias_c.iter_mut().for_each(|v| *v += 0.4);
        let numeric = finite_difference(&p, |x| em_surrogate(&d, x, &frozen));
        assert_close(&analytic, &numeric, 1e-6);
        let moved = mean_surrogate_gradient(&d, &q, &frozen, &all).to_flat();
        let numeric = finite_difference(&q, |x| em_surrogate(&d, x, &frozen));
        assert_close(&moved, &numeric, 1e-6);
    }
}

#[test]
fn minibatch_gradients_average_to_the_full_gradient() {
    let (p, d) = setup(7);
    let all: Vec<usize> = (0..d.len()).collect();
    let full = mean_ll_gradient(&d, &p, &all).to_flat();
    let (a, b) = all.split_at(40);
    let ga = mean_ll_gradient(&d, &p, a).to_flat();
    let gb = mean_ll_gradient(&d, &p, b).to_flat();
    let n = d.len() as f64;
    for i in 0..full.len() {
        let combined = (ga[i] * a.len() as f64 + gb[i] * b.len() as f64) / n;
        assert!((combined - full[i]).abs() < 1e-12);
    }
}

#[test]
fn single_precision_gradient_tracks_double() {
    let (p, d) = setup(11);
    let p32: CmpParams<f32> = CmpParams::new(
        cmp_core::HarmoniumParams::new(
            p.harmonium.bias_n.iter().map(|&v| v as f32).collect(),
            p.harmonium.bias_c.iter().map(|&v| v as f32).collect(),
            p.harmonium.interaction.map(|v| v as f32),
        )
        .unwrap(),
        p.link.map(|v| v as f32),
    )
    .unwrap();
    for t in d.trials().iter().take(20) {
        let g64 = conditional_ll_gradients(&t.counts, t.stimulus, &p).unwrap().to_flat();
        let z32 = Stimulus::new(t.stimulus.angle() as f32);
        let g32 = conditional_ll_gradients(&t.counts, z32, &p32).unwrap().to_flat();
        for (a, b) in g64.iter().zip(&g32) {
            assert!((a - f64::from(*b)).abs() <= 1e-3 * (1.0 + a.abs()), "{a} vs {b}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conditional_gradient_is_finite_difference_of_density(
        seed in 0u64..1000,
        z in 0.0f64..std::f64::consts::PI,
        counts in proptest::collection::vec(0u32..12, 5),
    ) {
        let (p, _) = setup(seed % 5);
        let n = cmp_core::CountVector::new(counts);
        let z = Stimulus::new(z);
        let analytic = conditional_ll_gradients(&n, z, &p).unwrap().to_flat();
        let numeric = finite_difference(&p, |q| cmp_core::conditional_log_density(&n, z, q).unwrap());
        let diff = analytic.iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale = numeric.iter().map(|b| b * b).sum::<f64>().sqrt().max(1e-8);
        prop_assert!(diff / scale <= 1e-4);
    }
}
