//! Pilot run over seeds 0..20 of the default synthetic experiment. Prints, per
//! seed, the bounds, the best-of-10 Hybrid training NLL and the mean Frobenius
//! distance between fitted and ground-truth noise correlations, followed by
//! summary statistics. An optional argument sets the neuron count.
//!
//! ```text
//! cargo run --release -p cmp-core --example pilot
//! cargo run --release -p cmp-core --example pilot -- 200
//! ```

use std::f64::consts::PI;

use cmp_core::cmp::conditioned_moments;
use cmp_core::eval::bounds;
use cmp_core::*;

fn frobenius(a: &Matrix64, b: &Matrix64) -> f64 {
    a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt()
}

fn correlation_distance(fitted: &CmpParams64, truth: &CmpParams64) -> f64 {
    let zs = [0.0, 0.33 * PI, 0.67 * PI];
    zs.iter()
        .map(|&z| {
            let z = Stimulus::new(z);
            frobenius(&conditioned_moments(fitted, z).correlation, &conditioned_moments(truth, z).correlation)
        })
        .sum::<f64>()
        / zs.len() as f64
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn main() {
    let neurons: usize = std::env::args()
        .nth(1)
        .map(|a| a.parse().expect("neuron count"))
        .unwrap_or(20);
    let mut excess = Vec::new();
    let mut distances = Vec::new();
    println!("seed,upper,lower,hybrid,excess,corr_distance,identity_distance");
    for seed in 0..20u64 {
        let spec = GroundTruthSpec {
            neurons,
            pref_stim_seed: seed,
            ..GroundTruthSpec::default()
        };
        let truth: CmpParams64 = generate_ground_truth(&spec).unwrap();
        let plan = SamplingPlan {
            rng_seed: seed,
            ..SamplingPlan::default()
        };
        let d = sample_dataset(&truth, &plan).unwrap();
        let b = bounds(&d, Some(&truth)).unwrap();
        let lower = b.lower_bound_nll.unwrap();
        let cfg = TrainConfig {
            rng_seed: seed,
            ..TrainConfig::default()
        };
        let report = fit(&d, 7, &cfg).unwrap();
        let identity = CmpParams64::zeros(d.neurons(), 0);
        let dist = correlation_distance(&report.final_params, &truth);
        let id_dist = correlation_distance(&identity, &truth);
        println!(
            "{seed},{:.6},{lower:.6},{:.6},{:.6},{dist:.6},{id_dist:.6}",
            b.upper_bound_nll,
            report.final_nll(),
            report.final_nll() - lower
        );
        excess.push(report.final_nll() - lower);
        distances.push(dist);
    }
    excess.sort_by(f64::total_cmp);
    distances.sort_by(f64::total_cmp);
    println!("max excess over lower bound: {:.6}", excess[excess.len() - 1]);
    println!("seeds at or below lower bound: {}", excess.iter().filter(|&&e| e <= 0.0).count());
    println!("90th percentile correlation distance: {:.6}", percentile(&distances, 0.9));
}
