use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::config::{ExperimentConfig, FilterKind, Scenario};
use super::results::{emit_results, rows_to_csv, sort_rows, write_atomic, Format, ResultRow};
use super::trajectory::{
    generate_trajectory, radar_base, split_seed, true_dynamics, DataParams, TrajectoryRecord,
};
use crate::divergence::AdaptivePolicy;
use crate::error::{FilterError, Result};
use crate::filter::{FilterSession, FilterSpec};
use crate::gaussian::{GaussianBelief, SpdMatrix};
use crate::models::{
    black_scholes_model, radar_model, sensor_model, LinearDynamics, LinearMeasurement,
    MeasurementModel, OptionContract,
};
use crate::oracle::reference_kf;

/// A run whose error exceeds this multiple of the measurement-only baseline
/// counts as diverged.
pub const DIVERGENCE_FACTOR: f64 = 100.0;

/// One combination of sweep coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct SweepPoint {
    pub sigma_cv: Option<f64>,
    /// `None` hands the filters the true process noise.
    pub sigma_q: Option<f64>,
    pub sigma_r: Option<f64>,
}

impl SweepPoint {
    fn data(&self) -> DataParams {
        DataParams {
            sigma_cv: self.sigma_cv,
            sigma_r: self.sigma_r,
        }
    }
}

/// Cartesian product of the configured sweep axes.
pub fn sweep_points(cfg: &ExperimentConfig) -> Vec<SweepPoint> {
    let axis = |xs: &[f64]| -> Vec<Option<f64>> {
        if xs.is_empty() {
            vec![None]
        } else {
            xs.iter().copied().map(Some).collect()
        }
    };
    let sigma_r = if cfg.scenario == Scenario::Radar {
        vec![None]
    } else {
        axis(&cfg.sigma_r)
    };
    let mut points = Vec::new();
    for &sigma_cv in &axis(&cfg.sigma_cv) {
        for &sigma_q in &axis(&cfg.filter_sigma_q) {
            for &sigma_r in &sigma_r {
                points.push(SweepPoint {
                    sigma_cv,
                    sigma_q,
                    sigma_r,
                });
            }
        }
    }
    points
}

/// A filter configuration evaluated at every sweep point.
#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    pub spec: FilterSpec,
    pub r_max: Option<f64>,
    /// Particle filter whose budget is matched to the adaptive runs.
    pub matched_budget: bool,
}

impl Variant {
    pub fn label(&self) -> String {
        match self.r_max {
            Some(r) => format!("{}|r={r}", self.spec),
            None => self.spec.to_string(),
        }
    }
}

/// Expands the configured filter kinds into concrete variants.
pub fn variants(cfg: &ExperimentConfig) -> Vec<Variant> {
    let policy = |r: f64| AdaptivePolicy {
        s_base: cfg.adaptive.s_base,
        r_max_target: r,
        s_floor: cfg.adaptive.s_floor,
        s_cap: cfg.adaptive.s_cap,
        confidence: cfg.adaptive.confidence,
    };
    let r_axis: Vec<Option<f64>> = if cfg.r_max.is_empty() {
        vec![None]
    } else {
        cfg.r_max.iter().copied().map(Some).collect()
    };
    let mut out = Vec::new();
    let fixed = |spec| Variant {
        spec,
        r_max: None,
        matched_budget: false,
    };
    for kind in &cfg.filters {
        match kind {
            FilterKind::Ekf => out.push(fixed(FilterSpec::Ekf)),
            FilterKind::Ukf => out.push(fixed(FilterSpec::Ukf {
                lambda: cfg.ukf_lambda,
            })),
            FilterKind::Skf => out.push(fixed(FilterSpec::Skf(cfg.skf))),
            FilterKind::Pf => {
                for &r in &r_axis {
                    out.push(Variant {
                        spec: FilterSpec::Pf {
                            particles: cfg.budgets.pf,
                        },
                        r_max: r,
                        matched_budget: r.is_some(),
                    });
                }
            }
            FilterKind::Mkf => {
                for &r in &r_axis {
                    out.push(Variant {
                        spec: FilterSpec::Mkf {
                            samples: cfg.budgets.mkf,
                            proposal: cfg.proposal,
                            adaptive: r.map(policy),
                        },
                        r_max: r,
                        matched_budget: false,
                    });
                }
            }
            FilterKind::Akf => {
                for &alpha in &cfg.alphas {
                    for &r in &r_axis {
                        out.push(Variant {
                            spec: FilterSpec::Akf {
                                alpha,
                                samples: cfg.budgets.akf,
                                proposal: cfg.proposal,
                                adaptive: r.map(policy),
                            },
                            r_max: r,
                            matched_budget: false,
                        });
                    }
                }
            }
        }
    }
    out
}

/// Process model handed to the filters at a sweep point.
pub fn filter_dynamics(cfg: &ExperimentConfig, point: &SweepPoint) -> Result<LinearDynamics> {
    let truth = true_dynamics(cfg, point.sigma_cv)?;
    match point.sigma_q {
        Some(q) => LinearDynamics::isotropic(truth.transition().clone(), q),
        None => Ok(truth),
    }
}

/// Measurement model for each step of a tracking or custom-1d trajectory.
pub fn step_models(
    cfg: &ExperimentConfig,
    point: &SweepPoint,
    traj: &TrajectoryRecord,
) -> Result<Vec<Box<dyn MeasurementModel>>> {
    let n = traj.measurements.len();
    match cfg.scenario {
        Scenario::Radar => {
            let m = radar_model(cfg.radar_noise[0], cfg.radar_noise[1])?;
            Ok((0..n).map(|_| Box::new(m.clone()) as Box<dyn MeasurementModel>).collect())
        }
        Scenario::Sensor => {
            let layout = traj
                .layout
                .as_ref()
                .ok_or_else(|| FilterError::ConfigError("sensor trajectory without layout".into()))?;
            let sigma_r = point.sigma_r.unwrap_or(20.0);
            traj.active_sensors
                .iter()
                .map(|ids| Ok(Box::new(sensor_model(layout, ids, sigma_r)?) as Box<dyn MeasurementModel>))
                .collect()
        }
        Scenario::Custom1d => {
            let r = point.sigma_r.unwrap_or(0.5);
            let m = LinearMeasurement::new(DMatrix::identity(1, 1), SpdMatrix::scaled_identity(1, r * r))?;
            Ok((0..n).map(|_| Box::new(m.clone()) as Box<dyn MeasurementModel>).collect())
        }
        Scenario::Options => Err(FilterError::ConfigError(
            "options trajectories use per-contract models".into(),
        )),
    }
}

fn contract_models(
    cfg: &ExperimentConfig,
    point: &SweepPoint,
    traj: &TrajectoryRecord,
    contract: usize,
) -> Result<Vec<Box<dyn MeasurementModel>>> {
    let path = &traj.contracts[contract];
    let sigma_r = point.sigma_r.unwrap_or(1e-2);
    path.maturities
        .iter()
        .enumerate()
        .map(|(k, &m)| {
            let c = OptionContract::new(path.strike, m, traj.spots[k + 1])?;
            Ok(Box::new(black_scholes_model(c, sigma_r, cfg.options.jacobian)?) as Box<dyn MeasurementModel>)
        })
        .collect()
}

pub fn initial_belief(cfg: &ExperimentConfig, traj: &TrajectoryRecord) -> Result<GaussianBelief> {
    GaussianBelief::new(
        DVector::from_column_slice(&traj.filter_init),
        SpdMatrix::from_diagonal(&cfg.initial_cov)?,
    )
}

fn position_sq_error(scenario: Scenario, est: &[f64], truth: &[f64]) -> f64 {
    match scenario {
        Scenario::Custom1d => (est[0] - truth[0]).powi(2),
        _ => (est[0] - truth[0]).powi(2) + (est[2] - truth[2]).powi(2),
    }
}

fn error_metric(scenario: Scenario) -> &'static str {
    match scenario {
        Scenario::Custom1d => "mse",
        _ => "mse_position",
    }
}

fn option_metrics(k: usize) -> [String; 2] {
    [format!("option{}_mae_call", k + 1), format!("option{}_mae_put", k + 1)]
}

/// Metrics of the measurement-only baseline.
pub fn base_metrics(cfg: &ExperimentConfig, traj: &TrajectoryRecord) -> Result<Vec<(String, f64)>> {
    match cfg.scenario {
        Scenario::Options => {
            let mut out = Vec::new();
            for (k, path) in traj.contracts.iter().enumerate() {
                let names = option_metrics(k);
                for leg in 0..2 {
                    let errs: Vec<f64> = path
                        .quotes
                        .windows(2)
                        .map(|w| (w[1][leg] - w[0][leg]).abs())
                        .collect();
                    out.push((names[leg].clone(), mean(&errs)));
                }
            }
            Ok(out)
        }
        scenario => {
            let layout = traj.layout.as_ref();
            let errs = traj.measurements
                .iter()
                .enumerate()
                .map(|(t, y)| {
                    let truth = &traj.states[t + 1];
                    let est = match scenario {
                        Scenario::Radar => {
                            let p = radar_base(y);
                            vec![p[0], 0.0, p[1], 0.0]
                        }
                        Scenario::Sensor => {
                            let layout = layout.ok_or_else(|| {
                                FilterError::ConfigError("sensor trajectory without layout".into())
                            })?;
                            let ids = &traj.active_sensors[t];
                            let n = ids.len() as f64;
                            let cx = ids.iter().map(|&i| layout.positions[i][0]).sum::<f64>() / n;
                            let cy = ids.iter().map(|&i| layout.positions[i][1]).sum::<f64>() / n;
                            vec![cx, 0.0, cy, 0.0]
                        }
                        _ => y.clone(),
                    };
                    Ok(position_sq_error(scenario, &est, truth))
                })
                .collect::<Result<Vec<f64>>>()?;
            Ok(vec![(error_metric(scenario).to_string(), mean(&errs))])
        }
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len().max(1) as f64
}

/// Everything recorded about one filter on one trajectory.
#[derive(Debug, Clone, Default)]
pub struct RunOutput {
    /// Posterior means after each measurement (tracking and custom-1d).
    pub estimates: Vec<DVector<f64>>,
    /// One-step-ahead `[call, put]` predictions per contract (options).
    pub predictions: Vec<Vec<[f64; 2]>>,
    /// Propagated states the option predictions were priced at.
    pub predicted_states: Vec<Vec<DVector<f64>>>,
    pub metrics: Vec<(String, f64)>,
    pub diverged: bool,
    pub error: Option<String>,
    pub flagged_steps: usize,
    pub mean_samples: f64,
    pub runtime_ms: f64,
}

/// Runs one filter over a trajectory and scores it against the baseline.
pub fn run_filter(
    spec: &FilterSpec,
    traj: &TrajectoryRecord,
    cfg: &ExperimentConfig,
    point: &SweepPoint,
    seed: u64,
) -> Result<RunOutput> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dynamics = filter_dynamics(cfg, point)?;
    let init = initial_belief(cfg, traj)?;
    let base = base_metrics(cfg, traj)?;
    let mut out = RunOutput::default();
    let mut samples = 0usize;
    let mut steps = 0usize;

    let result: Result<()> = (|| {
        if cfg.scenario == Scenario::Options {
            for k in 0..traj.contracts.len() {
                let models = contract_models(cfg, point, traj, k)?;
                let quotes = &traj.contracts[k].quotes;
                let mut session = FilterSession::new(spec.clone(), init.clone(), &dynamics, &mut rng)?;
                let mut preds = Vec::with_capacity(models.len());
                let mut states = Vec::with_capacity(models.len());
                for (model, q) in models.iter().zip(quotes) {
                    let x = dynamics.propagate(&session.belief().mean);
                    let p = model.eval(&x)?;
                    preds.push([p[0], p[1]]);
                    states.push(x);
                    let report =
                        session.step(&dynamics, model.as_ref(), &DVector::from_column_slice(q), &mut rng)?;
                    samples += report.samples;
                    steps += 1;
                }
                out.flagged_steps += session.flagged_steps();
                let names = option_metrics(k);
                for leg in 0..2 {
                    let errs: Vec<f64> = preds
                        .iter()
                        .zip(quotes)
                        .skip(1)
                        .map(|(p, q)| (p[leg] - q[leg]).abs())
                        .collect();
                    out.metrics.push((names[leg].clone(), mean(&errs)));
                }
                out.predictions.push(preds);
                out.predicted_states.push(states);
            }
        } else {
            let models = step_models(cfg, point, traj)?;
            let mut session = FilterSession::new(spec.clone(), init.clone(), &dynamics, &mut rng)?;
            let mut errs = Vec::with_capacity(models.len());
            for (t, (model, y)) in models.iter().zip(&traj.measurements).enumerate() {
                let report =
                    session.step(&dynamics, model.as_ref(), &DVector::from_column_slice(y), &mut rng)?;
                samples += report.samples;
                steps += 1;
                let est = session.belief().mean.clone();
                errs.push(position_sq_error(cfg.scenario, est.as_slice(), &traj.states[t + 1]));
                out.estimates.push(est);
            }
            out.flagged_steps = session.flagged_steps();
            out.metrics.push((error_metric(cfg.scenario).to_string(), mean(&errs)));
        }
        Ok(())
    })();

    if let Err(e) = result {
        out.error = Some(e.to_string());
        out.diverged = true;
    }
    for ((_, v), (_, b)) in out.metrics.iter().zip(&base) {
        if !v.is_finite() || *v > DIVERGENCE_FACTOR * b {
            out.diverged = true;
        }
    }
    out.mean_samples = samples as f64 / steps.max(1) as f64;
    out.runtime_ms = start.elapsed().as_secs_f64() * 1e3;
    Ok(out)
}

/// Reference Kalman filter on a custom-1d trajectory.
fn reference_metrics(cfg: &ExperimentConfig, point: &SweepPoint, traj: &TrajectoryRecord) -> Result<f64> {
    let dynamics = filter_dynamics(cfg, point)?;
    let r = point.sigma_r.unwrap_or(0.5);
    let ys: Vec<DVector<f64>> = traj.measurements.iter().map(|y| DVector::from_column_slice(y)).collect();
    let init = initial_belief(cfg, traj)?;
    let post = reference_kf(
        &ys,
        dynamics.transition(),
        dynamics.process_noise(),
        &DMatrix::identity(1, 1),
        &DMatrix::from_element(1, 1, r * r),
        &init.mean,
        init.cov.matrix(),
    )?;
    let errs: Vec<f64> = post
        .iter()
        .enumerate()
        .map(|(t, b)| (b.mean[0] - traj.states[t + 1][0]).powi(2))
        .collect();
    Ok(mean(&errs))
}

/// Results of every variant on one trial.
#[derive(Debug, Clone)]
pub struct TrialOutcome {
    pub trajectory: TrajectoryRecord,
    pub base: Vec<(String, f64)>,
    pub reference: Option<f64>,
    pub runs: Vec<RunOutput>,
}

pub fn run_trial(
    cfg: &ExperimentConfig,
    point_index: usize,
    point: &SweepPoint,
    variants: &[Variant],
    trial: usize,
) -> Result<TrialOutcome> {
    let traj = generate_trajectory(cfg, trial, point.data())?;
    let base = base_metrics(cfg, &traj)?;
    let reference = if cfg.scenario == Scenario::Custom1d {
        Some(reference_metrics(cfg, point, &traj)?)
    } else {
        None
    };
    let mut runs: Vec<Option<RunOutput>> = vec![None; variants.len()];
    // adaptive runs first so matched particle budgets are known
    let order: Vec<usize> = (0..variants.len())
        .filter(|&i| !variants[i].matched_budget)
        .chain((0..variants.len()).filter(|&i| variants[i].matched_budget))
        .collect();
    for i in order {
        let v = &variants[i];
        let seed = split_seed(traj.seed, &v.label(), point_index as u64);
        let spec = if v.matched_budget {
            let budget = variants
                .iter()
                .zip(&runs)
                .find(|(o, r)| o.r_max == v.r_max && !o.matched_budget && r.is_some() && o.spec.name() != "pf")
                .and_then(|(_, r)| r.as_ref())
                .map(|r| r.mean_samples.round() as usize)
                .unwrap_or(cfg.budgets.pf)
                .max(cfg.scenario.state_dim() + 1);
            FilterSpec::Pf { particles: budget }
        } else {
            v.spec.clone()
        };
        runs[i] = Some(run_filter(&spec, &traj, cfg, point, seed)?);
    }
    Ok(TrialOutcome {
        trajectory: traj,
        base,
        reference,
        runs: runs.into_iter().map(|r| r.expect("every variant ran")).collect(),
    })
}

/// Runs `trials` independent trials on a bounded pool of worker threads.
fn run_trials(
    cfg: &ExperimentConfig,
    point_index: usize,
    point: &SweepPoint,
    variants: &[Variant],
) -> Result<Vec<TrialOutcome>> {
    let workers = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
        .min(cfg.trials);
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<TrialOutcome>>>> =
        Mutex::new((0..cfg.trials).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let k = next.fetch_add(1, Ordering::Relaxed);
                if k >= cfg.trials {
                    break;
                }
                let outcome = run_trial(cfg, point_index, point, variants, k);
                slots.lock().expect("result slots")[k] = Some(outcome);
            });
        }
    });
    slots
        .into_inner()
        .expect("result slots")
        .into_iter()
        .map(|s| s.expect("every trial ran"))
        .collect()
}

fn aggregate(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let m = mean(values);
    if values.len() < 2 {
        return (m, 0.0);
    }
    let var = values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

fn point_rows(
    cfg: &ExperimentConfig,
    point: &SweepPoint,
    variants: &[Variant],
    trials: &[TrialOutcome],
) -> Vec<ResultRow> {
    let scenario = cfg.scenario.as_str().to_string();
    let sigma_r = if cfg.scenario == Scenario::Radar { None } else { point.sigma_r };
    let row = |filter: &str, alpha, r_max, metric: &str, value: Option<f64>, stderr, runtime_ms| ResultRow {
        scenario: scenario.clone(),
        filter: filter.to_string(),
        sigma_q: point.sigma_q,
        sigma_cv: point.sigma_cv,
        sigma_r,
        alpha,
        r_max,
        metric: metric.to_string(),
        value,
        stderr,
        trials: trials.len(),
        runtime_ms,
    };
    let mut rows = Vec::new();

    let mut base: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for t in trials {
        for (name, v) in &t.base {
            base.entry(name.as_str()).or_default().push(*v);
        }
    }
    for (name, vals) in &base {
        let (m, se) = aggregate(vals);
        rows.push(row("base", None, None, name, Some(m), Some(se), 0.0));
    }
    if cfg.scenario == Scenario::Custom1d {
        let vals: Vec<f64> = trials.iter().filter_map(|t| t.reference).collect();
        let (m, se) = aggregate(&vals);
        rows.push(row("kf", None, None, "mse", Some(m), Some(se), 0.0));
    }

    for (i, v) in variants.iter().enumerate() {
        let runs: Vec<&RunOutput> = trials.iter().map(|t| &t.runs[i]).collect();
        let runtime: f64 = runs.iter().map(|r| r.runtime_ms).sum();
        let diverged = runs.iter().filter(|r| r.diverged).count();
        let alpha = v.spec.alpha();
        let names: Vec<String> = runs
            .iter()
            .find(|r| !r.metrics.is_empty())
            .map(|r| r.metrics.iter().map(|(n, _)| n.clone()).collect())
            .unwrap_or_else(|| base.keys().map(|k| k.to_string()).collect());
        for name in &names {
            let vals: Vec<f64> = runs
                .iter()
                .filter(|r| !r.diverged)
                .filter_map(|r| r.metrics.iter().find(|(n, _)| n == name).map(|(_, v)| *v))
                .collect();
            let (value, stderr) = if diverged == 0 && vals.len() == runs.len() {
                let (m, se) = aggregate(&vals);
                (Some(m), Some(se))
            } else {
                (None, None)
            };
            rows.push(row(v.spec.name(), alpha, v.r_max, name, value, stderr, runtime));
        }
        rows.push(row(
            v.spec.name(),
            alpha,
            v.r_max,
            "diverged_trials",
            Some(diverged as f64),
            Some(0.0),
            runtime,
        ));
        let flagged: Vec<f64> = runs.iter().map(|r| r.flagged_steps as f64).collect();
        let (m, se) = aggregate(&flagged);
        rows.push(row(v.spec.name(), alpha, v.r_max, "flagged_steps", Some(m), Some(se), runtime));
        if v.r_max.is_some() {
            let vals: Vec<f64> = runs.iter().map(|r| r.mean_samples).collect();
            let (m, se) = aggregate(&vals);
            rows.push(row(v.spec.name(), alpha, v.r_max, "samples_mean", Some(m), Some(se), runtime));
        }
    }
    rows
}

/// Where a sweep writes its files.
#[derive(Debug, Clone)]
pub struct OutputSpec {
    pub dir: PathBuf,
    pub stem: String,
}

impl OutputSpec {
    pub fn new(dir: &Path, stem: &str) -> Self {
        OutputSpec {
            dir: dir.to_path_buf(),
            stem: stem.to_string(),
        }
    }

    fn path(&self, suffix: &str) -> PathBuf {
        self.dir.join(format!("{}{suffix}", self.stem))
    }
}

#[derive(Serialize)]
struct SavedTrajectory<'a> {
    point: SweepPoint,
    trial: usize,
    record: &'a TrajectoryRecord,
}

/// Runs every sweep point and trial, aggregates rows, and (with an output
/// spec) writes CSV and JSON. A partial CSV is rewritten after each sweep
/// point so an interrupted run leaves its completed points on disk.
pub fn run_sweep(cfg: &ExperimentConfig, output: Option<&OutputSpec>) -> Result<Vec<ResultRow>> {
    cfg.validate()?;
    let variants = variants(cfg);
    let points = sweep_points(cfg);
    if let Some(out) = output {
        std::fs::create_dir_all(&out.dir)?;
        write_atomic(&out.path(".config.json"), &(cfg.to_json() + "\n"))?;
    }
    let mut rows = Vec::new();
    let mut saved = Vec::new();
    for (pi, point) in points.iter().enumerate() {
        let trials = run_trials(cfg, pi, point, &variants)?;
        rows.extend(point_rows(cfg, point, &variants, &trials));
        if let Some(out) = output {
            let mut partial = rows.clone();
            sort_rows(&mut partial);
            write_atomic(&out.path(".partial.csv"), &rows_to_csv(&partial)?)?;
            if cfg.save_trajectories {
                saved.extend(trials.into_iter().enumerate().map(|(k, t)| (*point, k, t.trajectory)));
            }
        }
    }
    sort_rows(&mut rows);
    if let Some(out) = output {
        emit_results(&rows, &out.dir, &out.stem, Format::Csv)?;
        emit_results(&rows, &out.dir, &out.stem, Format::Json)?;
        if cfg.save_trajectories {
            let doc: Vec<SavedTrajectory> = saved
                .iter()
                .map(|(point, trial, record)| SavedTrajectory {
                    point: *point,
                    trial: *trial,
                    record,
                })
                .collect();
            let text = serde_json::to_string(&doc).map_err(|e| FilterError::Io(e.to_string()))?;
            write_atomic(&out.path(".trajectories.json"), &text)?;
        }
        let partial = out.path(".partial.csv");
        if partial.exists() {
            std::fs::remove_file(partial)?;
        }
    }
    Ok(rows)
}
