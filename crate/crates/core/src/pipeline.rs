//! End-to-end runs: simulate, train, filter, evaluate, and write artifacts.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::config::{Method, ModelConfig, ModelKind, RunConfig, STATE_DIM};
use crate::ensemble::stream_seed;
use crate::error::{Error, Phase, Result};
use crate::filter::{Filter, FilterSettings, ModelSlot};
use crate::koopman::{fit_koopman, KoopmanModel, LiftingParams};
use crate::linalg::{psd_project, spd_solve, Covariance, ModelBelief, StateVector};
use crate::models::{fit_rff_predictor, residual_covariance, BicyclePredictor, Predictor, RffRegressor};
use crate::persist;
use crate::simulator::{from_csv_str, sense, simulate_truth, to_csv_string, SensorModel, Trajectory};

pub const STATE_NAMES: [&str; STATE_DIM] = ["vx", "vy", "yaw_rate"];
pub const RFF_FORMAT: &str = "rff-regressor";
pub const KOOPMAN_FORMAT: &str = "koopman-model";

const SENSOR_STREAM: u64 = 1;
const FILTER_STREAM: u64 = 2;
/// Process noise standard deviations used when none are configured.
const DEFAULT_NOISE_STD: [f64; STATE_DIM] = [0.01, 0.005, 0.002];

/// A trained or configured model, ready to be placed in a filter.
#[derive(Debug, Clone)]
pub struct BuiltModel {
    pub config: ModelConfig,
    pub predictor: Arc<dyn Predictor>,
    pub koopman: Option<Arc<KoopmanModel>>,
    /// Process noise (Jacobian path) or sampling covariance (ensemble path).
    pub noise: Covariance,
}

/// Simulate every training scenario (noise-free states).
pub fn training_data(cfg: &RunConfig) -> Result<Vec<Trajectory>> {
    cfg.training
        .iter()
        .map(|sc| simulate_truth(sc, &cfg.vehicle))
        .collect::<Result<_>>()
        .map_err(|e| e.at(Phase::Simulate, 0))
}

pub fn train_rff(m: &ModelConfig, data: &[Trajectory]) -> Result<RffRegressor> {
    fit_rff_predictor(data, &m.rff)
}

pub fn train_koopman(m: &ModelConfig, data: &[Trajectory], floor: f64) -> Result<KoopmanModel> {
    let k = &m.koopman;
    let lifting = if k.lifted_dim == STATE_DIM {
        LiftingParams::identity(STATE_DIM)
    } else {
        LiftingParams::from_data(data, k.lifted_dim, k.bandwidth, k.seed)?
    };
    fit_koopman(data, lifting, k.lambda, floor)
}

fn diag_cov(std: &[f64]) -> Result<Covariance> {
    Covariance::from_diagonal(&std.iter().map(|s| s * s).collect::<Vec<_>>())
}

/// Build (load or train) every configured model.
pub fn build_models(cfg: &RunConfig, training: &[Trajectory]) -> Result<Vec<BuiltModel>> {
    let floor = cfg.fusion.eigen_floor;
    let dt = match (&cfg.scenario, training.first()) {
        (Some(sc), _) => sc.dt_s,
        (None, Some(t)) => t.dt,
        (None, None) => crate::simulator::DEFAULT_DT,
    };
    let mut out = Vec::with_capacity(cfg.models.len());
    for m in &cfg.models {
        let train = |e: Error| e.at(Phase::Train, 0);
        let (predictor, koopman): (Arc<dyn Predictor>, Option<Arc<KoopmanModel>>) = match m.kind {
            ModelKind::Physics => (Arc::new(BicyclePredictor::new(cfg.vehicle, dt)), None),
            ModelKind::Rff => {
                let r: RffRegressor = match &m.file {
                    Some(p) => persist::load(RFF_FORMAT, p)?,
                    None => train_rff(m, training).map_err(train)?,
                };
                (Arc::new(r), None)
            }
            ModelKind::Koopman => {
                let k: KoopmanModel = match &m.file {
                    Some(p) => persist::load(KOOPMAN_FORMAT, p)?,
                    None => train_koopman(m, training, floor).map_err(train)?,
                };
                let k = Arc::new(k);
                (k.clone(), Some(k))
            }
        };
        if predictor.state_dim() != STATE_DIM {
            return Err(Error::Config(format!(
                "model `{}` has state dimension {}, expected {STATE_DIM}",
                m.name,
                predictor.state_dim()
            )));
        }
        let configured = match m.method {
            Method::Ensemble => m.sampling_std.as_deref(),
            Method::KoopmanLinearization => m.process_noise_std.as_deref(),
        };
        let noise = if m.calibrate {
            let r = residual_covariance(predictor.as_ref(), training).map_err(|e| e.at(Phase::Calibration, 0))?;
            psd_project(&r, floor)?
        } else {
            diag_cov(configured.unwrap_or(&DEFAULT_NOISE_STD))?
        };
        out.push(BuiltModel {
            config: m.clone(),
            predictor,
            koopman,
            noise,
        });
    }
    Ok(out)
}

/// Truth, observations and models shared by every filter run on one scenario.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub config: RunConfig,
    pub truth: Trajectory,
    pub sensors: SensorModel,
    pub models: Vec<BuiltModel>,
}

/// Simulated (or loaded) truth with observations, and the sensor model.
pub fn observed_truth(cfg: &RunConfig) -> Result<(Trajectory, SensorModel)> {
    let sensors = SensorModel::new(&cfg.sensors, &cfg.vehicle)?;
    let mut truth = match (&cfg.scenario, &cfg.truth_file) {
        (Some(sc), None) => simulate_truth(sc, &cfg.vehicle).map_err(|e| e.at(Phase::Simulate, 0))?,
        (None, Some(path)) => from_csv_str(&fs::read_to_string(path)?)?,
        _ => return Err(Error::Config("set exactly one of `scenario` or `truth_file`".into())),
    };
    if truth.len() < 2 {
        return Err(Error::Config("scenario yields fewer than two samples".into()));
    }
    if truth.observations.is_empty() {
        truth.observations = sense(&truth, &sensors, cfg.sensors.dropout, stream_seed(cfg.seed, SENSOR_STREAM))?;
    } else if truth.observation_dim() != sensors.dim() {
        return Err(Error::Config(format!(
            "truth file has {} observation channels, sensor configuration expects {}",
            truth.observation_dim(),
            sensors.dim()
        )));
    }
    Ok((truth, sensors))
}

pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    cfg.validate()?;
    let (truth, sensors) = observed_truth(cfg)?;
    let training = training_data(cfg)?;
    let models = build_models(cfg, &training)?;
    Ok(Prepared {
        config: cfg.clone(),
        truth,
        sensors,
        models,
    })
}

/// Per-step outputs of one filter run.
#[derive(Debug, Clone)]
pub struct FilterRun {
    pub model_names: Vec<String>,
    /// Consensus analysis per sample; index 0 is the prior.
    pub estimates: Vec<ModelBelief>,
    /// Fusion weight per model for samples 1.., so `weights[k - 1]` belongs to sample `k`.
    pub weights: Vec<Vec<f64>>,
    pub covariance_violations: usize,
    pub wall_time_s: f64,
}

fn prior(cfg: &RunConfig, x0: &StateVector) -> Result<ModelBelief> {
    let mean = x0 + DVector::from_column_slice(&cfg.init.offset);
    ModelBelief::new("consensus", mean, diag_cov(&cfg.init.std)?)
}

fn slot_for(model: &BuiltModel, all: &[BuiltModel], prior: &ModelBelief, floor: f64) -> Result<ModelSlot> {
    let c = &model.config;
    match (c.method, &model.koopman) {
        (Method::KoopmanLinearization, Some(k)) => {
            let direct = match &c.direct {
                Some(name) => all
                    .iter()
                    .find(|m| &m.config.name == name)
                    .map(|m| m.predictor.clone())
                    .ok_or_else(|| Error::Config(format!("unknown direct model `{name}`")))?,
                None => k.clone(),
            };
            ModelSlot::lifted(&c.name, k.clone(), direct, c.alpha, c.koopman.feature_var, prior, floor)
        }
        (Method::KoopmanLinearization, None) => Ok(ModelSlot::linearized(
            &c.name,
            model.predictor.clone(),
            model.noise.clone(),
            prior,
        )),
        (Method::Ensemble, _) => Ok(ModelSlot::ensemble(
            &c.name,
            model.predictor.clone(),
            model.noise.clone(),
            c.members,
            prior,
        )),
    }
}

/// Filter over the models at `roster` (indices into `prep.models`, in fusion
/// order), initialized at the configured prior.
pub fn build_filter(prep: &Prepared, roster: &[usize]) -> Result<(Filter, ModelBelief)> {
    let cfg = &prep.config;
    let floor = cfg.fusion.eigen_floor;
    let p0 = prior(cfg, &prep.truth.states[0])?;
    let slots = roster
        .iter()
        .map(|&i| slot_for(&prep.models[i], &prep.models, &p0, floor))
        .collect::<Result<Vec<_>>>()?;
    let settings = FilterSettings {
        window: cfg.fusion.window,
        forgetting: cfg.fusion.forgetting,
        floor,
        adaptive: cfg.fusion.adaptive,
        seed: stream_seed(cfg.seed, FILTER_STREAM),
    };
    Ok((Filter::new(slots, settings)?, p0))
}

/// Run the filter over the prepared scenario with the models at `roster`.
pub fn run_filter(prep: &Prepared, roster: &[usize]) -> Result<FilterRun> {
    let (mut filter, p0) = build_filter(prep, roster)?;
    let start = Instant::now();
    let len = prep.truth.len();
    let mut estimates = Vec::with_capacity(len);
    let mut weights = Vec::with_capacity(len - 1);
    estimates.push(p0);
    for k in 1..len {
        let frame = prep.sensors.frame(&prep.truth.observations[k], prep.truth.times[k])?;
        let out = filter.step(&prep.truth.controls[k - 1], &frame)?;
        estimates.push(out.analysis);
        weights.push(out.weights);
    }
    Ok(FilterRun {
        model_names: roster.iter().map(|&i| prep.models[i].config.name.clone()).collect(),
        estimates,
        weights,
        covariance_violations: filter.covariance_violations(),
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub rmse: Vec<f64>,
    pub peak_abs_error: Vec<f64>,
    /// Mean of `e^T P^-1 e` over all samples.
    pub nees_mean: f64,
}

/// Accuracy and consistency of `estimates` (with covariances `covs`) against `truth`.
pub fn evaluate(truth: &[StateVector], estimates: &[StateVector], covs: &[Covariance]) -> Result<Metrics> {
    if truth.len() != estimates.len() || truth.len() != covs.len() {
        return Err(Error::DimensionMismatch {
            context: "evaluation series length",
            expected: truth.len(),
            found: if estimates.len() != truth.len() { estimates.len() } else { covs.len() },
        });
    }
    if truth.is_empty() {
        return Err(Error::DegenerateData("nothing to evaluate".into()));
    }
    let n = truth[0].len();
    let mut sq = vec![0.0; n];
    let mut peak = vec![0.0f64; n];
    let mut nees = 0.0;
    for ((x, xh), p) in truth.iter().zip(estimates).zip(covs) {
        if x.len() != n || xh.len() != n || p.dim() != n {
            return Err(Error::DimensionMismatch {
                context: "evaluation state",
                expected: n,
                found: xh.len(),
            });
        }
        let e = x - xh;
        for i in 0..n {
            sq[i] += e[i] * e[i];
            peak[i] = peak[i].max(e[i].abs());
        }
        let pe = spd_solve(p.matrix(), &DMatrix::from_column_slice(n, 1, e.as_slice()), "estimate covariance")?;
        nees += e.dot(&pe.column(0));
    }
    let count = truth.len() as f64;
    Ok(Metrics {
        rmse: sq.iter().map(|s| (s / count).sqrt()).collect(),
        peak_abs_error: peak,
        nees_mean: nees / count,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub float_model: String,
    pub arch: String,
    pub os: String,
    pub version: String,
}

impl Environment {
    fn current() -> Self {
        Environment {
            float_model: "IEEE-754 binary64, round-to-nearest-even".into(),
            arch: std::env::consts::ARCH.into(),
            os: std::env::consts::OS.into(),
            version: env!("CARGO_PKG_VERSION").into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub source: String,
    pub samples: usize,
    pub dt_s: f64,
    pub seed: u64,
    pub models: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateMetrics {
    pub state: String,
    pub rmse: f64,
    pub peak_abs_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelWeight {
    pub model: String,
    /// Time average of `trace(W_m) / n`.
    pub mean_weight: f64,
}

/// Evaluation report; field order is the serialized key order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub environment: Environment,
    pub run: RunInfo,
    pub nees_mean: f64,
    pub covariance_violations: usize,
    pub states: Vec<StateMetrics>,
    pub fusion_weights: Vec<ModelWeight>,
}

impl EvaluationReport {
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serialization(e.to_string()))
    }

    pub fn rmse(&self, state: usize) -> f64 {
        self.states[state].rmse
    }
}

fn source_label(cfg: &RunConfig) -> String {
    match (&cfg.scenario, &cfg.truth_file) {
        (Some(sc), _) => format!("{:?} mu={} speed={} m/s", sc.kind, sc.friction_mu, sc.speed_m_s),
        (None, Some(p)) => p.display().to_string(),
        (None, None) => String::new(),
    }
}

pub fn report_for(prep: &Prepared, run: &FilterRun) -> Result<EvaluationReport> {
    let means: Vec<_> = run.estimates.iter().map(|b| b.mean.clone()).collect();
    let covs: Vec<_> = run.estimates.iter().map(|b| b.cov.clone()).collect();
    let metrics = evaluate(&prep.truth.states, &means, &covs).map_err(|e| e.at(Phase::Evaluate, 0))?;
    Ok(build_report(&prep.config, prep.truth.dt, &metrics, run))
}

fn build_report(cfg: &RunConfig, dt: f64, metrics: &Metrics, run: &FilterRun) -> EvaluationReport {
    let steps = run.weights.len().max(1) as f64;
    let fusion_weights = run
        .model_names
        .iter()
        .enumerate()
        .map(|(i, name)| ModelWeight {
            model: name.clone(),
            mean_weight: run.weights.iter().map(|w| w[i]).sum::<f64>() / steps,
        })
        .collect();
    EvaluationReport {
        environment: Environment::current(),
        run: RunInfo {
            source: source_label(cfg),
            samples: run.estimates.len(),
            dt_s: dt,
            seed: cfg.seed,
            models: run.model_names.clone(),
        },
        nees_mean: metrics.nees_mean,
        covariance_violations: run.covariance_violations,
        states: STATE_NAMES
            .iter()
            .enumerate()
            .map(|(i, s)| StateMetrics {
                state: s.to_string(),
                rmse: metrics.rmse[i],
                peak_abs_error: metrics.peak_abs_error[i],
            })
            .collect(),
        fusion_weights,
    }
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub prepared: Prepared,
    pub run: FilterRun,
    pub report: EvaluationReport,
}

/// Simulate (or load), train, filter and evaluate with every configured model.
pub fn run_pipeline(cfg: &RunConfig) -> Result<PipelineOutput> {
    let prepared = prepare(cfg)?;
    let roster: Vec<usize> = (0..prepared.models.len()).collect();
    let run = run_filter(&prepared, &roster)?;
    let report = report_for(&prepared, &run)?;
    Ok(PipelineOutput { prepared, run, report })
}

fn fmt(v: f64) -> String {
    format!("{v:.16e}")
}

/// Estimate CSV: `t, x1..xn` then the covariance row-major as `p11..pnn`.
pub fn estimates_csv(times: &[f64], estimates: &[ModelBelief]) -> String {
    let n = estimates.first().map_or(STATE_DIM, |b| b.dim());
    let mut out = String::from("t");
    for i in 1..=n {
        let _ = write!(out, ",x{i}");
    }
    for i in 1..=n {
        for j in 1..=n {
            let _ = write!(out, ",p{i}{j}");
        }
    }
    out.push('\n');
    for (t, b) in times.iter().zip(estimates) {
        out.push_str(&fmt(*t));
        for v in b.mean.iter() {
            out.push(',');
            out.push_str(&fmt(*v));
        }
        for i in 0..n {
            for j in 0..n {
                out.push(',');
                out.push_str(&fmt(b.cov[(i, j)]));
            }
        }
        out.push('\n');
    }
    out
}

/// Parse an estimate CSV back into times and beliefs.
pub fn parse_estimates_csv(text: &str) -> Result<(Vec<f64>, Vec<ModelBelief>)> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(Error::Csv {
        line: 1,
        message: "missing header".into(),
    })?;
    let cols = header.split(',').count();
    let n = (1..=8).find(|n| 1 + n + n * n == cols).ok_or(Error::Csv {
        line: 1,
        message: format!("{cols} columns do not match `t, x1..xn, p11..pnn`"),
    })?;
    let mut times = Vec::new();
    let mut beliefs = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let line_no = i + 1;
        let vals: Vec<f64> = line
            .split(',')
            .map(|c| c.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Csv {
                line: line_no,
                message: e.to_string(),
            })?;
        if vals.len() != cols {
            return Err(Error::Csv {
                line: line_no,
                message: format!("expected {cols} columns, found {}", vals.len()),
            });
        }
        times.push(vals[0]);
        let mean = DVector::from_column_slice(&vals[1..=n]);
        let cov = DMatrix::from_row_slice(n, n, &vals[1 + n..]);
        let cov = Covariance::new(cov).map_err(|e| Error::Csv {
            line: line_no,
            message: e.to_string(),
        })?;
        beliefs.push(ModelBelief::new("consensus", mean, cov)?);
    }
    Ok((times, beliefs))
}

/// Plot data for state `i`: `t, truth, estimate, lo2sigma, hi2sigma`.
pub fn plot_csv(truth: &Trajectory, estimates: &[ModelBelief], i: usize) -> String {
    let mut out = String::from("t,truth,estimate,lo2sigma,hi2sigma\n");
    for ((t, x), b) in truth.times.iter().zip(&truth.states).zip(estimates) {
        let sd = b.cov[(i, i)].max(0.0).sqrt();
        let m = b.mean[i];
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            fmt(*t),
            fmt(x[i]),
            fmt(m),
            fmt(m - 2.0 * sd),
            fmt(m + 2.0 * sd)
        );
    }
    out
}

pub fn weights_csv(times: &[f64], names: &[String], weights: &[Vec<f64>]) -> String {
    let mut out = String::from("t");
    for n in names {
        out.push(',');
        out.push_str(n);
    }
    out.push('\n');
    for (t, w) in times.iter().skip(1).zip(weights) {
        out.push_str(&fmt(*t));
        for v in w {
            out.push(',');
            out.push_str(&fmt(*v));
        }
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, Serialize)]
struct Timing {
    wall_time_s: f64,
    mean_step_us: f64,
}

/// Write truth, estimates, weights, report, plot data and timing into `dir`.
///
/// Everything except `timing.toml` is a deterministic function of the
/// configuration and seeds.
pub fn write_outputs(out: &PipelineOutput, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let truth = &out.prepared.truth;
    fs::write(dir.join("truth.csv"), to_csv_string(truth)?)?;
    fs::write(dir.join("estimate.csv"), estimates_csv(&truth.times, &out.run.estimates))?;
    fs::write(dir.join("weights.csv"), weights_csv(&truth.times, &out.run.model_names, &out.run.weights))?;
    fs::write(dir.join("report.toml"), out.report.to_toml()?)?;
    for (i, name) in STATE_NAMES.iter().enumerate() {
        fs::write(dir.join(format!("plot_{name}.csv")), plot_csv(truth, &out.run.estimates, i))?;
    }
    let steps = out.run.weights.len().max(1) as f64;
    let timing = Timing {
        wall_time_s: out.run.wall_time_s,
        mean_step_us: out.run.wall_time_s / steps * 1e6,
    };
    fs::write(
        dir.join("timing.toml"),
        toml::to_string(&timing).map_err(|e| Error::Serialization(e.to_string()))?,
    )?;
    Ok(())
}

/// Report for stored truth and estimate CSV files.
pub fn evaluate_files(truth_csv: &Path, estimate_csv: &Path) -> Result<Metrics> {
    let truth = from_csv_str(&fs::read_to_string(truth_csv)?)?;
    let (_, beliefs) = parse_estimates_csv(&fs::read_to_string(estimate_csv)?)?;
    let means: Vec<_> = beliefs.iter().map(|b| b.mean.clone()).collect();
    let covs: Vec<_> = beliefs.iter().map(|b| b.cov.clone()).collect();
    evaluate(&truth.states, &means, &covs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub label: String,
    pub models: Vec<String>,
    pub rmse: Vec<f64>,
    pub nees_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub states: Vec<String>,
    pub rows: Vec<ComparisonRow>,
}

impl Comparison {
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serialization(e.to_string()))
    }

    pub fn table(&self) -> String {
        let mut out = format!("{:<24}", "filter");
        for s in &self.states {
            let _ = write!(out, " {:>14}", format!("rmse_{s}"));
        }
        let _ = writeln!(out, " {:>10}", "nees");
        for r in &self.rows {
            let _ = write!(out, "{:<24}", r.label);
            for v in &r.rmse {
                let _ = write!(out, " {v:>14.6e}");
            }
            let _ = writeln!(out, " {:>10.3}", r.nees_mean);
        }
        out
    }
}

/// Single-model baselines and the fused filter on one scenario.
///
/// `roster` restricts and orders the models; all configured models otherwise.
/// Filter runs execute concurrently, one thread each.
pub fn compare(cfg: &RunConfig, roster: Option<&[String]>) -> Result<Comparison> {
    let prep = prepare(cfg)?;
    let index: HashMap<&str, usize> = prep
        .models
        .iter()
        .enumerate()
        .map(|(i, m)| (m.config.name.as_str(), i))
        .collect();
    let selected: Vec<usize> = match roster {
        Some(names) => names
            .iter()
            .map(|n| {
                index
                    .get(n.as_str())
                    .copied()
                    .ok_or_else(|| Error::Config(format!("unknown model `{n}` in roster")))
            })
            .collect::<Result<_>>()?,
        None => (0..prep.models.len()).collect(),
    };
    if selected.is_empty() {
        return Err(Error::Config("empty model roster".into()));
    }
    let mut jobs: Vec<(String, Vec<usize>)> = selected
        .iter()
        .map(|&i| (format!("{} only", prep.models[i].config.name), vec![i]))
        .collect();
    if selected.len() > 1 {
        jobs.push(("fused".into(), selected.clone()));
    }
    let results: Vec<Result<ComparisonRow>> = std::thread::scope(|s| {
        let handles: Vec<_> = jobs
            .iter()
            .map(|(label, r)| {
                let prep = &prep;
                s.spawn(move || -> Result<ComparisonRow> {
                    let run = run_filter(prep, r)?;
                    let report = report_for(prep, &run)?;
                    Ok(ComparisonRow {
                        label: label.clone(),
                        models: run.model_names,
                        rmse: report.states.iter().map(|s| s.rmse).collect(),
                        nees_mean: report.nees_mean,
                    })
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("filter thread panicked"))
            .collect()
    });
    Ok(Comparison {
        states: STATE_NAMES.iter().map(|s| s.to_string()).collect(),
        rows: results.into_iter().collect::<Result<_>>()?,
    })
}
