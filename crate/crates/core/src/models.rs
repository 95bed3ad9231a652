//! Predictors: the single-track physics model and a random-feature regressor.

use std::f64::consts::PI;
use std::fmt;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{check_finite_vec, spd_solve, ControlVector, StateVector};
use crate::simulator::Trajectory;

/// Below this longitudinal speed the slip-angle expressions are singular.
pub const STANDSTILL_VX: f64 = 0.1;

/// Relative step used by [`finite_difference_jacobian`].
pub const JACOBIAN_REL_STEP: f64 = 1e-6;

/// Layer sizes of the feed-forward networks the random-feature regressor
/// stands in for (inputs, hidden..., outputs). Informational only.
pub const REFERENCE_NETWORK_SIZING: [usize; 4] = [8, 25, 15, 6];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VehicleParams {
    pub mass_kg: f64,
    pub yaw_inertia_kg_m2: f64,
    /// Front axle to centre of gravity.
    pub a_m: f64,
    /// Rear axle to centre of gravity.
    pub b_m: f64,
    pub tire_radius_m: f64,
    /// Per-axle cornering stiffness, N/rad.
    pub cornering_stiffness_n_rad: f64,
    pub wheel_inertia_kg_m2: f64,
    pub steering_ratio: f64,
}

impl Default for VehicleParams {
    fn default() -> Self {
        VehicleParams {
            mass_kg: 2271.0,
            yaw_inertia_kg_m2: 4600.0,
            a_m: 1.42,
            b_m: 1.43,
            tire_radius_m: 0.347,
            cornering_stiffness_n_rad: 83700.0,
            wheel_inertia_kg_m2: 1.7,
            steering_ratio: 18.0,
        }
    }
}

impl VehicleParams {
    pub fn wheelbase(&self) -> f64 {
        self.a_m + self.b_m
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("mass_kg", self.mass_kg),
            ("yaw_inertia_kg_m2", self.yaw_inertia_kg_m2),
            ("a_m", self.a_m),
            ("b_m", self.b_m),
            ("tire_radius_m", self.tire_radius_m),
            ("cornering_stiffness_n_rad", self.cornering_stiffness_n_rad),
            ("wheel_inertia_kg_m2", self.wheel_inertia_kg_m2),
            ("steering_ratio", self.steering_ratio),
        ];
        for (name, v) in fields {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("vehicle parameter {name} must be > 0, got {v}")));
            }
        }
        Ok(())
    }

    /// Steering-wheel angle to road-wheel angle.
    pub fn road_wheel_angle(&self, steering_wheel_rad: f64) -> f64 {
        steering_wheel_rad / self.steering_ratio
    }
}

fn check_state_control(x: &StateVector, u: &ControlVector, n: usize, q: usize) -> Result<()> {
    if x.len() != n {
        return Err(Error::DimensionMismatch {
            context: "state vector",
            expected: n,
            found: x.len(),
        });
    }
    if u.len() != q {
        return Err(Error::DimensionMismatch {
            context: "control vector",
            expected: q,
            found: u.len(),
        });
    }
    check_finite_vec(x, "state vector")?;
    check_finite_vec(u, "control vector")
}

/// One explicit-Euler step of the linear-tire single-track model.
///
/// State `[vx, vy, r]`, control `[road-wheel angle, total drive torque]`.
pub fn bicycle_step(x: &StateVector, u: &ControlVector, p: &VehicleParams, dt: f64) -> Result<StateVector> {
    check_state_control(x, u, 3, 2)?;
    if !(dt > 0.0) {
        return Err(Error::Config(format!("integration step must be > 0, got {dt}")));
    }
    let (vx, vy, r) = (x[0], x[1], x[2]);
    let (delta, torque) = (u[0], u[1]);
    if vx <= STANDSTILL_VX {
        return Err(Error::KinematicSingularity { vx });
    }
    let alpha_f = delta - (vy + p.a_m * r) / vx;
    let alpha_r = -(vy - p.b_m * r) / vx;
    let fyf = p.cornering_stiffness_n_rad * alpha_f;
    let fyr = p.cornering_stiffness_n_rad * alpha_r;
    let cos_d = delta.cos();

    let dvx = torque / (p.tire_radius_m * p.mass_kg) + r * vy;
    let dvy = (fyf * cos_d + fyr) / p.mass_kg - r * vx;
    let dr = (p.a_m * fyf * cos_d - p.b_m * fyr) / p.yaw_inertia_kg_m2;

    Ok(StateVector::from_column_slice(&[
        vx + dt * dvx,
        vy + dt * dvy,
        r + dt * dr,
    ]))
}

/// Central-difference Jacobian of `f` at `x` with per-component step
/// `rel_step * (1 + |x_i|)`.
pub fn finite_difference_jacobian_with_step<F>(f: F, x: &StateVector, rel_step: f64) -> Result<DMatrix<f64>>
where
    F: Fn(&StateVector) -> Result<StateVector>,
{
    let n = x.len();
    let mut jac: Option<DMatrix<f64>> = None;
    for i in 0..n {
        let h = rel_step * (1.0 + x[i].abs());
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[i] += h;
        xm[i] -= h;
        let col = (f(&xp)? - f(&xm)?) / (2.0 * h);
        let jac = jac.get_or_insert_with(|| DMatrix::zeros(col.len(), n));
        jac.set_column(i, &col);
    }
    Ok(jac.unwrap_or_else(|| DMatrix::zeros(0, 0)))
}

pub fn finite_difference_jacobian<F>(f: F, x: &StateVector) -> Result<DMatrix<f64>>
where
    F: Fn(&StateVector) -> Result<StateVector>,
{
    finite_difference_jacobian_with_step(f, x, JACOBIAN_REL_STEP)
}

pub fn bicycle_jacobian(x: &StateVector, u: &ControlVector, p: &VehicleParams, dt: f64) -> Result<DMatrix<f64>> {
    bicycle_step(x, u, p, dt)?;
    finite_difference_jacobian(|xx| bicycle_step(xx, u, p, dt), x)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictorKind {
    Physics,
    DataDriven,
}

/// One-step state predictor `x_{t+1} = f(x_t, u_t)`.
///
/// Implementations must be deterministic and immutable once built.
pub trait Predictor: Send + Sync + fmt::Debug {
    fn kind(&self) -> PredictorKind;
    fn state_dim(&self) -> usize;
    fn control_dim(&self) -> usize;

    /// Unchecked one-step map; callers go through [`Predictor::predict`].
    fn step(&self, x: &StateVector, u: &ControlVector) -> Result<StateVector>;

    fn predict(&self, x: &StateVector, u: &ControlVector) -> Result<StateVector> {
        check_state_control(x, u, self.state_dim(), self.control_dim())?;
        let out = self.step(x, u)?;
        if out.len() != self.state_dim() {
            return Err(Error::DimensionMismatch {
                context: "predictor output",
                expected: self.state_dim(),
                found: out.len(),
            });
        }
        check_finite_vec(&out, "predictor output")?;
        Ok(out)
    }

    fn jacobian(&self, x: &StateVector, u: &ControlVector) -> Result<DMatrix<f64>> {
        self.predict(x, u)?;
        finite_difference_jacobian(|xx| self.predict(xx, u), x)
    }
}

/// Physics predictor backed by [`bicycle_step`].
#[derive(Debug, Clone)]
pub struct BicyclePredictor {
    pub params: VehicleParams,
    pub dt: f64,
}

impl BicyclePredictor {
    pub fn new(params: VehicleParams, dt: f64) -> Self {
        BicyclePredictor { params, dt }
    }
}

impl Predictor for BicyclePredictor {
    fn kind(&self) -> PredictorKind {
        PredictorKind::Physics
    }

    fn state_dim(&self) -> usize {
        3
    }

    fn control_dim(&self) -> usize {
        2
    }

    fn step(&self, x: &StateVector, u: &ControlVector) -> Result<StateVector> {
        bicycle_step(x, u, &self.params, self.dt)
    }
}

/// Per-channel affine normalization `(v - mean) / scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: DVector<f64>,
    pub scale: DVector<f64>,
}

impl Normalization {
    pub fn identity(dim: usize) -> Self {
        Normalization {
            mean: DVector::zeros(dim),
            scale: DVector::from_element(dim, 1.0),
        }
    }

    /// Column statistics of `samples` (dim x L); zero-spread channels get scale 1.
    pub fn fit(samples: &DMatrix<f64>) -> Self {
        let dim = samples.nrows();
        let count = samples.ncols().max(1) as f64;
        let mean = DVector::from_fn(dim, |i, _| samples.row(i).sum() / count);
        let scale = DVector::from_fn(dim, |i, _| {
            let var = samples.row(i).iter().map(|v| (v - mean[i]).powi(2)).sum::<f64>() / count;
            let sd = var.sqrt();
            if sd > 1e-12 * (1.0 + mean[i].abs()) {
                sd
            } else {
                1.0
            }
        });
        Normalization { mean, scale }
    }

    pub fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        (v - &self.mean).component_div(&self.scale)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Settings for [`fit_rff_predictor`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RffConfig {
    pub features: usize,
    pub ridge: f64,
    /// Kernel length scale on normalized inputs; frequencies ~ N(0, bandwidth^-2).
    pub bandwidth: f64,
    pub seed: u64,
}

impl Default for RffConfig {
    fn default() -> Self {
        RffConfig {
            features: 256,
            ridge: 1e-8,
            bandwidth: 4.0,
            seed: 0,
        }
    }
}

/// Random-Fourier-feature ridge regressor predicting the one-step state increment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RffRegressor {
    pub state_dim: usize,
    pub control_dim: usize,
    /// d_f x (n + q)
    pub frequencies: DMatrix<f64>,
    pub phases: DVector<f64>,
    /// n x d_f
    pub weights: DMatrix<f64>,
    pub feature_scale: f64,
    pub ridge: f64,
    pub bandwidth: f64,
    pub input_norm: Normalization,
}

impl RffRegressor {
    pub fn features(&self) -> usize {
        self.phases.len()
    }

    fn feature_vector(&self, input: &DVector<f64>) -> DVector<f64> {
        let w = self.input_norm.apply(input);
        let mut arg = &self.frequencies * w + &self.phases;
        arg.apply(|v| *v = self.feature_scale * v.cos());
        arg
    }

    fn input(x: &StateVector, u: &ControlVector) -> DVector<f64> {
        DVector::from_iterator(x.len() + u.len(), x.iter().chain(u.iter()).copied())
    }
}

impl Predictor for RffRegressor {
    fn kind(&self) -> PredictorKind {
        PredictorKind::DataDriven
    }

    fn state_dim(&self) -> usize {
        self.state_dim
    }

    fn control_dim(&self) -> usize {
        self.control_dim
    }

    fn step(&self, x: &StateVector, u: &ControlVector) -> Result<StateVector> {
        let phi = self.feature_vector(&Self::input(x, u));
        Ok(x + &self.weights * phi)
    }
}

/// Stacked one-step transitions: inputs `[x_t; u_t]`, current states, successors.
pub(crate) struct Transitions {
    pub states: DMatrix<f64>,
    pub controls: DMatrix<f64>,
    pub successors: DMatrix<f64>,
}

pub(crate) fn collect_transitions(data: &[Trajectory]) -> Result<Transitions> {
    let first = data
        .iter()
        .find(|t| !t.states.is_empty())
        .ok_or_else(|| Error::DegenerateData("no samples".into()))?;
    let n = first.states[0].len();
    let q = first.controls[0].len();
    let count: usize = data.iter().map(|t| t.len().saturating_sub(1)).sum();
    let mut states = DMatrix::zeros(n, count);
    let mut controls = DMatrix::zeros(q, count);
    let mut successors = DMatrix::zeros(n, count);
    let mut col = 0;
    for traj in data {
        for t in 0..traj.len().saturating_sub(1) {
            let (x, u, next) = (&traj.states[t], &traj.controls[t], &traj.states[t + 1]);
            if x.len() != n || next.len() != n || u.len() != q {
                return Err(Error::IncompatibleTraining(format!(
                    "trajectory dimensions differ (expected n={n}, q={q})"
                )));
            }
            states.set_column(col, x);
            controls.set_column(col, u);
            successors.set_column(col, next);
            col += 1;
        }
    }
    Ok(Transitions {
        states,
        controls,
        successors,
    })
}

/// Fit a random-feature ridge regressor to the one-step transitions in `data`.
///
/// The regression target is the increment `x_{t+1} - x_t`, so the identity map
/// is represented exactly by zero weights.
pub fn fit_rff_predictor(data: &[Trajectory], cfg: &RffConfig) -> Result<RffRegressor> {
    if cfg.features == 0 {
        return Err(Error::Config("random-feature count must be >= 1".into()));
    }
    if !(cfg.ridge > 0.0) || !(cfg.bandwidth > 0.0) {
        return Err(Error::Config("ridge and bandwidth must be > 0".into()));
    }
    let tr = collect_transitions(data)?;
    let samples = tr.states.ncols();
    if samples < 2 {
        return Err(Error::DegenerateData(format!("{samples} transition(s); need at least 2")));
    }
    let (n, q) = (tr.states.nrows(), tr.controls.nrows());
    let inputs = DMatrix::from_fn(n + q, samples, |i, l| {
        if i < n {
            tr.states[(i, l)]
        } else {
            tr.controls[(i - n, l)]
        }
    });
    let first = inputs.column(0).clone_owned();
    if inputs.column_iter().all(|c| c == first) {
        return Err(Error::DegenerateData(
            "all samples identical; regression is rank-deficient".into(),
        ));
    }

    let input_norm = Normalization::fit(&inputs);
    let d_f = cfg.features;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut frequencies = DMatrix::zeros(d_f, n + q);
    let mut phases = DVector::zeros(d_f);
    // one feature at a time so smaller feature sets are prefixes of larger ones
    for k in 0..d_f {
        for j in 0..n + q {
            let z: f64 = rng.sample(StandardNormal);
            frequencies[(k, j)] = z / cfg.bandwidth;
        }
        phases[k] = rng.random_range(0.0..2.0 * PI);
    }
    let mut model = RffRegressor {
        state_dim: n,
        control_dim: q,
        frequencies,
        phases,
        weights: DMatrix::zeros(n, d_f),
        feature_scale: (2.0 / d_f as f64).sqrt(),
        ridge: cfg.ridge,
        bandwidth: cfg.bandwidth,
        input_norm,
    };

    let mut phi = DMatrix::zeros(d_f, samples);
    for (l, col) in inputs.column_iter().enumerate() {
        phi.set_column(l, &model.feature_vector(&col.clone_owned()));
    }
    let targets = &tr.successors - &tr.states;
    let mut gram = &phi * phi.transpose();
    for k in 0..d_f {
        gram[(k, k)] += cfg.ridge;
    }
    let rhs = &phi * targets.transpose();
    let wt = spd_solve(&gram, &rhs, "random-feature ridge system")?;
    model.weights = wt.transpose();
    Ok(model)
}

/// Mean-square one-step prediction error `E[e e^T]` of `model` over `data`,
/// bias included. Used to seed model-error covariances from historical data.
pub fn residual_covariance(model: &dyn Predictor, data: &[Trajectory]) -> Result<DMatrix<f64>> {
    let n = model.state_dim();
    let mut acc = DMatrix::zeros(n, n);
    let mut count = 0usize;
    for traj in data {
        for t in 0..traj.len().saturating_sub(1) {
            let e = &traj.states[t + 1] - model.predict(&traj.states[t], &traj.controls[t])?;
            acc += &e * e.transpose();
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::DegenerateData("no transitions for residual statistics".into()));
    }
    Ok(acc / count as f64)
}
