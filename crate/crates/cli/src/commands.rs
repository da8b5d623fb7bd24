//! The four subcommands. Each reads its inputs, runs the library, and writes
//! its artifacts under the output directory; nothing is ever written to an
//! input path.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use cmp_core::{
    bounds, conditioned_moments, empirical_correlations, fit, generate_ground_truth_detailed, kfold_cv,
    sample_dataset, stimulus_grid, tuning_curves, weight_curve, Algorithm, CmpParams64, CvConfig, FitReport64,
    GroundTruth, GroundTruthSpec, Matrix64, SamplingPlan, SpikeDataset64, Stimulus, Stimulus64,
};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::io::{read_dataset, read_json, write_dataset, write_json, write_table};

/// Contents of `ground_truth.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthArtifact {
    pub spec: GroundTruthSpec,
    pub plan: SamplingPlan,
    pub truth: GroundTruth<f64>,
}

/// Contents of `bounds.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundsArtifact {
    /// Training NLL of the best single-component model.
    pub upper_bound_nll: f64,
    /// Training NLL of the ground truth, when known.
    pub lower_bound_nll: Option<f64>,
}

pub fn fit_report_name(a: Algorithm) -> String {
    format!("fit_report_{}.json", a.name())
}

fn fmt(v: f64) -> String {
    v.to_string()
}

fn weight_rows(label: &str, p: &CmpParams64, grid: &[Stimulus64]) -> CliResult<Vec<Vec<String>>> {
    let w = weight_curve(p, grid)?;
    let mut rows = Vec::with_capacity(grid.len() * w.cols());
    for (s, z) in grid.iter().enumerate() {
        for j in 0..w.cols() {
            rows.push(vec![label.to_string(), fmt(z.angle()), j.to_string(), fmt(w.get(s, j))]);
        }
    }
    Ok(rows)
}

fn tuning_rows(label: &str, p: &CmpParams64, grid: &[Stimulus64]) -> CliResult<Vec<Vec<String>>> {
    let t = tuning_curves(p, grid)?;
    let mut rows = Vec::with_capacity(grid.len() * t.cols());
    for (s, z) in grid.iter().enumerate() {
        for k in 0..t.cols() {
            rows.push(vec![label.to_string(), fmt(z.angle()), (k + 1).to_string(), fmt(t.get(s, k))]);
        }
    }
    Ok(rows)
}

/// Upper-triangle model correlations at each stimulus.
fn correlation_rows(label: &str, p: &CmpParams64, stimuli: &[Stimulus64]) -> Vec<Vec<String>> {
    let mut rows = Vec::new();
    for &z in stimuli {
        let c = conditioned_moments(p, z).correlation;
        for a in 0..c.rows() {
            for b in a + 1..c.cols() {
                rows.push(vec![
                    label.to_string(),
                    fmt(z.angle()),
                    (a + 1).to_string(),
                    (b + 1).to_string(),
                    fmt(c.get(a, b)),
                ]);
            }
        }
    }
    rows
}

const WEIGHT_HEADER: [&str; 4] = ["model", "stimulus", "component", "weight"];
const TUNING_HEADER: [&str; 4] = ["model", "stimulus", "neuron", "rate"];
const CORRELATION_HEADER: [&str; 5] = ["model", "stimulus", "neuron_a", "neuron_b", "correlation"];

fn write_curves(out: &Path, prefix: &str, models: &[(&str, &CmpParams64)], points: usize) -> CliResult<Vec<PathBuf>> {
    let grid = stimulus_grid::<f64>(points);
    let mut weights = Vec::new();
    let mut tuning = Vec::new();
    for (label, p) in models {
        weights.extend(weight_rows(label, p, &grid)?);
        tuning.extend(tuning_rows(label, p, &grid)?);
    }
    let w = out.join(format!("{prefix}weight_curves.csv"));
    let t = out.join(format!("{prefix}tuning_curves.csv"));
    write_table(&w, "cmp-weight-curves", &WEIGHT_HEADER, &weights)?;
    write_table(&t, "cmp-tuning-curves", &TUNING_HEADER, &tuning)?;
    Ok(vec![w, t])
}

fn load_truth(cfg: &RunConfig, d: &SpikeDataset64) -> CliResult<Option<TruthArtifact>> {
    let Some(path) = &cfg.truth else { return Ok(None) };
    let art: TruthArtifact = read_json(path, "synth")?;
    art.truth.params.validate().map_err(|e| CliError::Artifact {
        path: path.clone(),
        message: e.to_string(),
    })?;
    if art.truth.params.neurons() != d.neurons() {
        return Err(CliError::Artifact {
            path: path.clone(),
            message: format!(
                "ground truth has {} neurons, dataset has {}",
                art.truth.params.neurons(),
                d.neurons()
            ),
        });
    }
    Ok(Some(art))
}

fn check_batch(cfg: &RunConfig, d: &SpikeDataset64) -> CliResult<()> {
    cfg.train_config(Algorithm::Hybrid).validate(d.len())?;
    Ok(())
}

pub fn synth(cfg: &RunConfig) -> CliResult<Vec<PathBuf>> {
    let spec = cfg.ground_truth_spec();
    let plan = cfg.sampling_plan();
    let truth = generate_ground_truth_detailed::<f64>(&spec)?;
    let d = sample_dataset(&truth.params, &plan)?;
    let out = &cfg.out;
    let mut written = Vec::new();

    let truth_path = out.join("ground_truth.json");
    let dataset_path = out.join("dataset.csv");
    write_json(
        &truth_path,
        &TruthArtifact {
            spec,
            plan,
            truth: truth.clone(),
        },
    )?;
    write_dataset(&dataset_path, &d)?;
    written.push(truth_path);
    written.push(dataset_path);

    written.extend(write_curves(out, "truth_", &[("truth", &truth.params)], cfg.fit.curve_points)?);
    let corr = out.join("truth_correlations.csv");
    let rows = correlation_rows("truth", &truth.params, &d.distinct_stimuli());
    write_table(&corr, "cmp-correlations", &CORRELATION_HEADER, &rows)?;
    written.push(corr);
    Ok(written)
}

pub fn fit_command(cfg: &RunConfig) -> CliResult<Vec<PathBuf>> {
    let d = read_dataset(&cfg.dataset_path())?;
    check_batch(cfg, &d)?;
    let truth = load_truth(cfg, &d)?;
    let out = &cfg.out;
    let latent_dim = cfg.fit.components - 1;
    let mut written = Vec::new();

    let mut reports: Vec<FitReport64> = Vec::new();
    for alg in cfg.fit.algorithm.algorithms() {
        let report = fit(&d, latent_dim, &cfg.train_config(alg))?;
        log::info!(
            "{}: final NLL {:.6} (restart {}, {:.2}s)",
            alg.name(),
            report.final_nll(),
            report.restart_index,
            report.wall_time
        );
        let path = out.join(fit_report_name(alg));
        write_json(&path, &report)?;
        written.push(path);
        reports.push(report);
    }

    let b = bounds(&d, truth.as_ref().map(|t| &t.truth.params))?;
    let bounds_path = out.join("bounds.json");
    write_json(
        &bounds_path,
        &BoundsArtifact {
            upper_bound_nll: b.upper_bound_nll,
            lower_bound_nll: b.lower_bound_nll,
        },
    )?;
    written.push(bounds_path);

    let mut header = vec!["epoch".to_string()];
    header.extend(reports.iter().map(|r| r.algorithm.name().to_string()));
    let epochs = reports[0].nll_trace.len();
    let rows: Vec<Vec<String>> = (0..epochs)
        .map(|e| {
            let mut row = vec![e.to_string()];
            row.extend(reports.iter().map(|r| fmt(r.nll_trace[e])));
            row
        })
        .collect();
    let trace_path = out.join("nll_trace.csv");
    write_table(&trace_path, "cmp-nll-trace", &header, &rows)?;
    written.push(trace_path);

    let models: Vec<(&str, &CmpParams64)> = reports
        .iter()
        .map(|r| (r.algorithm.name(), &r.final_params))
        .collect();
    written.extend(write_curves(out, "", &models, cfg.fit.curve_points)?);

    let stimuli = d.distinct_stimuli();
    let rows: Vec<Vec<String>> = models
        .iter()
        .flat_map(|(label, p)| correlation_rows(label, p, &stimuli))
        .collect();
    let corr = out.join("model_correlations.csv");
    write_table(&corr, "cmp-correlations", &CORRELATION_HEADER, &rows)?;
    written.push(corr);
    Ok(written)
}

pub fn cv_command(cfg: &RunConfig) -> CliResult<Vec<PathBuf>> {
    let d = read_dataset(&cfg.dataset_path())?;
    let train_cfg = cfg.train_config(cfg.fit.algorithm.primary());
    let cv = CvConfig {
        folds: cfg.cv.folds,
        rng_seed: cfg.seed,
    };
    if d.len() < cv.folds {
        return Err(CliError::Config(format!("{} folds need at least as many trials, found {}", cv.folds, d.len())));
    }
    let report = kfold_cv(&d, &cfg.cv.grid, &train_cfg, &cv)?;
    log::info!("selected {} components", report.selected_components);
    let out = &cfg.out;
    let json = out.join("cv_report.json");
    write_json(&json, &report)?;
    let rows: Vec<Vec<String>> = report
        .component_grid
        .iter()
        .enumerate()
        .map(|(g, c)| {
            vec![
                c.to_string(),
                fmt(report.relative_gain[g]),
                fmt(report.std_error[g]),
                fmt(report.mean[g]),
            ]
        })
        .collect();
    let csv = out.join("relative_gain.csv");
    write_table(
        &csv,
        "cmp-relative-gain",
        &["components", "relative_gain", "std_error", "held_out_log_likelihood"],
        &rows,
    )?;
    Ok(vec![json, csv])
}

fn circular_distance(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(PI);
    d.min(PI - d)
}

/// The dataset stimulus closest to `z` on the half-circle; ties go to the
/// smaller angle.
pub fn nearest_stimulus(stimuli: &[Stimulus64], z: f64) -> Stimulus64 {
    let z = Stimulus::new(z).angle();
    *stimuli
        .iter()
        .min_by(|a, b| circular_distance(a.angle(), z).total_cmp(&circular_distance(b.angle(), z)))
        .expect("dataset has at least one stimulus")
}

/// One square matrix per stimulus: `upper` above the diagonal, `lower` below,
/// ones on it.
fn paired_rows(requested: f64, z: f64, upper: &Matrix64, lower: &Matrix64, sources: [&str; 2]) -> Vec<Vec<String>> {
    let m = upper.rows();
    let mut rows = Vec::with_capacity(m * m);
    for a in 0..m {
        for b in 0..m {
            let (value, source) = match a.cmp(&b) {
                std::cmp::Ordering::Less => (upper.get(a, b), sources[0]),
                std::cmp::Ordering::Greater => (lower.get(a, b), sources[1]),
                std::cmp::Ordering::Equal => (1.0, "diagonal"),
            };
            rows.push(vec![
                fmt(requested),
                fmt(z),
                (a + 1).to_string(),
                (b + 1).to_string(),
                fmt(value),
                source.to_string(),
            ]);
        }
    }
    rows
}

const PAIRED_HEADER: [&str; 6] = ["requested", "stimulus", "row", "col", "correlation", "source"];

pub fn report_command(cfg: &RunConfig) -> CliResult<Vec<PathBuf>> {
    let d = read_dataset(&cfg.dataset_path())?;
    let alg = cfg.fit.algorithm.primary();
    let report_path = cfg.out.join(fit_report_name(alg));
    let report: FitReport64 = read_json(&report_path, "fit")?;
    let model = &report.final_params;
    model.validate().map_err(|e| CliError::Artifact {
        path: report_path.clone(),
        message: e.to_string(),
    })?;
    if model.neurons() != d.neurons() {
        return Err(CliError::Artifact {
            path: report_path,
            message: format!("model has {} neurons, dataset has {}", model.neurons(), d.neurons()),
        });
    }
    let truth = load_truth(cfg, &d)?;
    let out = &cfg.out;
    let mut written = Vec::new();

    let empirical = empirical_correlations(&d)?;
    let stimuli: Vec<Stimulus64> = empirical.iter().map(|e| e.stimulus).collect();
    let mut rows = Vec::new();
    for &requested in &cfg.report.stimuli {
        let z = nearest_stimulus(&stimuli, requested);
        let emp = empirical.iter().find(|e| e.stimulus == z).expect("stimulus from the same list");
        if !emp.undefined.is_empty() {
            log::warn!(
                "stimulus {}: neurons {:?} never vary; their empirical correlations are reported as 0",
                z.angle(),
                emp.undefined.iter().map(|k| k + 1).collect::<Vec<_>>()
            );
        }
        let fitted = conditioned_moments(model, z).correlation;
        rows.extend(paired_rows(requested, z.angle(), &emp.correlation, &fitted, ["empirical", alg.name()]));
    }
    let paired = out.join("paired_correlations.csv");
    write_table(&paired, "cmp-paired-correlations", &PAIRED_HEADER, &rows)?;
    written.push(paired);

    let mut models: Vec<(&str, &CmpParams64)> = vec![(alg.name(), model)];
    if let Some(t) = &truth {
        let mut rows = Vec::new();
        for &requested in &cfg.report.stimuli {
            let z = Stimulus::new(requested);
            let upper = conditioned_moments(&t.truth.params, z).correlation;
            let lower = conditioned_moments(model, z).correlation;
            rows.extend(paired_rows(requested, z.angle(), &upper, &lower, ["truth", alg.name()]));
        }
        let path = out.join("paired_correlations_truth.csv");
        write_table(&path, "cmp-paired-correlations", &PAIRED_HEADER, &rows)?;
        written.push(path);
        models.push(("truth", &t.truth.params));
    }

    let grid = stimulus_grid::<f64>(cfg.fit.curve_points);
    let mut weights = Vec::new();
    for (label, p) in &models {
        weights.extend(weight_rows(label, p, &grid)?);
    }
    let path = out.join("report_weight_curves.csv");
    write_table(&path, "cmp-weight-curves", &WEIGHT_HEADER, &weights)?;
    written.push(path);
    Ok(written)
}
