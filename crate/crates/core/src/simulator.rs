//! Ground truth: a saturating-tire single-track model, scripted maneuvers,
//! synthetic sensors and trajectory CSV I/O.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::MeasurementFrame;
use crate::linalg::{Covariance, ControlVector, StateVector};
use crate::models::{VehicleParams, STANDSTILL_VX};

pub const GRAVITY: f64 = 9.81;
/// Default sample period (200 Hz).
pub const DEFAULT_DT: f64 = 0.005;
/// RK4 substeps per sample.
pub const DEFAULT_SUBSTEPS: usize = 10;
/// Yaw rate beyond which the vehicle is considered spun out.
pub const SPIN_OUT_YAW_RATE: f64 = 3.0;
/// Speed used as the initial condition of launch maneuvers.
pub const LAUNCH_START_SPEED: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    SineSteer,
    StepSteer,
    Launch,
    DoubleLaneChange,
    ConstantRadius,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub kind: ScenarioKind,
    pub duration_s: f64,
    #[serde(default = "default_dt")]
    pub dt_s: f64,
    pub speed_m_s: f64,
    #[serde(default)]
    pub steer_amplitude_rad: f64,
    #[serde(default = "default_frequency")]
    pub steer_frequency_hz: f64,
    #[serde(default = "default_mu")]
    pub friction_mu: f64,
    /// Proportional speed-regulation gain; 0 means no drive torque at all.
    #[serde(default = "default_speed_gain")]
    pub speed_gain_per_s: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_dt() -> f64 {
    DEFAULT_DT
}
fn default_frequency() -> f64 {
    0.5
}
fn default_mu() -> f64 {
    1.0
}
fn default_speed_gain() -> f64 {
    2.0
}

impl Scenario {
    pub fn new(kind: ScenarioKind, duration_s: f64, speed_m_s: f64) -> Self {
        Scenario {
            kind,
            duration_s,
            dt_s: DEFAULT_DT,
            speed_m_s,
            steer_amplitude_rad: 0.0,
            steer_frequency_hz: default_frequency(),
            friction_mu: 1.0,
            speed_gain_per_s: default_speed_gain(),
            seed: 0,
        }
    }

    pub fn sine_steer(duration_s: f64, speed_m_s: f64, amplitude_rad: f64, frequency_hz: f64) -> Self {
        Scenario {
            steer_amplitude_rad: amplitude_rad,
            steer_frequency_hz: frequency_hz,
            ..Scenario::new(ScenarioKind::SineSteer, duration_s, speed_m_s)
        }
    }

    pub fn with_mu(mut self, mu: f64) -> Self {
        self.friction_mu = mu;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt_s > 0.0) {
            return Err(Error::InvalidScenario(format!("dt_s must be > 0, got {}", self.dt_s)));
        }
        if !(self.duration_s >= self.dt_s) {
            return Err(Error::InvalidScenario(format!(
                "duration_s {} shorter than dt_s {}",
                self.duration_s, self.dt_s
            )));
        }
        if !(self.friction_mu > 0.0 && self.friction_mu <= 1.2) {
            return Err(Error::InvalidScenario(format!(
                "friction_mu must lie in (0, 1.2], got {}",
                self.friction_mu
            )));
        }
        if !(self.speed_m_s > 0.0) || !self.steer_amplitude_rad.is_finite() || !(self.steer_frequency_hz >= 0.0) {
            return Err(Error::InvalidScenario("speed, amplitude and frequency must be finite, speed > 0".into()));
        }
        if !(self.speed_gain_per_s >= 0.0) {
            return Err(Error::InvalidScenario("speed_gain_per_s must be >= 0".into()));
        }
        Ok(())
    }

    pub fn samples(&self) -> usize {
        (self.duration_s / self.dt_s + 1e-9).floor() as usize
    }

    fn label(&self) -> String {
        format!("{:?}", self.kind)
    }

    /// Road-wheel steering angle commanded at time `t`.
    pub fn steering(&self, t: f64) -> f64 {
        let a = self.steer_amplitude_rad;
        let w = 2.0 * PI * self.steer_frequency_hz;
        match self.kind {
            ScenarioKind::SineSteer => a * (w * t).sin(),
            ScenarioKind::StepSteer => {
                if t >= 1.0 {
                    a
                } else {
                    0.0
                }
            }
            ScenarioKind::Launch => 0.0,
            ScenarioKind::DoubleLaneChange => {
                let period = if self.steer_frequency_hz > 0.0 {
                    1.0 / self.steer_frequency_hz
                } else {
                    return 0.0;
                };
                let s = t - 1.0;
                if (0.0..period).contains(&s) {
                    a * (w * s).sin()
                } else if (2.0 * period..3.0 * period).contains(&s) {
                    -a * (w * (s - 2.0 * period)).sin()
                } else {
                    0.0
                }
            }
            ScenarioKind::ConstantRadius => a * t.min(1.0),
        }
    }

    fn initial_speed(&self) -> f64 {
        match self.kind {
            ScenarioKind::Launch => LAUNCH_START_SPEED,
            _ => self.speed_m_s,
        }
    }
}

/// Measured values and availability flags for one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub values: DVector<f64>,
    pub mask: Vec<bool>,
}

impl Observation {
    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// Time-indexed states, controls and (optionally) observations.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    pub dt: f64,
    pub times: Vec<f64>,
    pub states: Vec<StateVector>,
    pub controls: Vec<ControlVector>,
    /// Either empty or one entry per sample.
    pub observations: Vec<Observation>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn state_dim(&self) -> usize {
        self.states.first().map_or(0, |s| s.len())
    }

    pub fn control_dim(&self) -> usize {
        self.controls.first().map_or(0, |u| u.len())
    }

    pub fn observation_dim(&self) -> usize {
        self.observations.first().map_or(0, |o| o.dim())
    }

    pub fn validate(&self) -> Result<()> {
        let len = self.len();
        if self.states.len() != len || self.controls.len() != len {
            return Err(Error::InvalidScenario("trajectory series lengths differ".into()));
        }
        if !self.observations.is_empty() && self.observations.len() != len {
            return Err(Error::InvalidScenario("observation series length differs".into()));
        }
        for w in self.times.windows(2) {
            let step = w[1] - w[0];
            if !(step > 0.0) || (step - self.dt).abs() > 1e-9 * self.dt.max(1.0) * (1.0 + w[1].abs()) {
                return Err(Error::InvalidScenario("times are not uniformly increasing".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct TruthModel<'a> {
    p: &'a VehicleParams,
    mu: f64,
    fz_front: f64,
    fz_rear: f64,
}

impl<'a> TruthModel<'a> {
    fn new(p: &'a VehicleParams, mu: f64) -> Self {
        let l = p.wheelbase();
        TruthModel {
            p,
            mu,
            fz_front: p.mass_kg * GRAVITY * p.b_m / l,
            fz_rear: p.mass_kg * GRAVITY * p.a_m / l,
        }
    }

    fn lateral_force(&self, alpha: f64, fz: f64) -> f64 {
        let cap = self.mu * fz;
        cap * (self.p.cornering_stiffness_n_rad * alpha / cap).tanh()
    }

    fn slip_angles(&self, s: &[f64; 3], delta: f64) -> (f64, f64) {
        let [vx, vy, r] = *s;
        let alpha_f = delta - (vy + self.p.a_m * r).atan2(vx);
        let alpha_r = -(vy - self.p.b_m * r).atan2(vx);
        (alpha_f, alpha_r)
    }

    fn derivative(&self, s: &[f64; 3], delta: f64, torque: f64) -> [f64; 3] {
        let p = self.p;
        let [vx, vy, r] = *s;
        let (alpha_f, alpha_r) = self.slip_angles(s, delta);
        let fyf = self.lateral_force(alpha_f, self.fz_front);
        let fyr = self.lateral_force(alpha_r, self.fz_rear);
        let (sin_d, cos_d) = delta.sin_cos();
        let fx = torque / p.tire_radius_m;
        [
            (fx - fyf * sin_d) / p.mass_kg + r * vy,
            (fyf * cos_d + fyr) / p.mass_kg - r * vx,
            (p.a_m * fyf * cos_d - p.b_m * fyr) / p.yaw_inertia_kg_m2,
        ]
    }

    fn rk4(&self, s: [f64; 3], delta: f64, torque: f64, h: f64) -> [f64; 3] {
        let add = |a: &[f64; 3], k: &[f64; 3], c: f64| [a[0] + c * k[0], a[1] + c * k[1], a[2] + c * k[2]];
        let k1 = self.derivative(&s, delta, torque);
        let k2 = self.derivative(&add(&s, &k1, h / 2.0), delta, torque);
        let k3 = self.derivative(&add(&s, &k2, h / 2.0), delta, torque);
        let k4 = self.derivative(&add(&s, &k3, h), delta, torque);
        std::array::from_fn(|i| s[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
    }
}

/// Largest front/rear slip-angle magnitude of a state under the truth model's
/// kinematics. Used to label high-slip segments.
pub fn max_slip_angle(state: &StateVector, control: &ControlVector, p: &VehicleParams) -> f64 {
    let tm = TruthModel::new(p, 1.0);
    let (af, ar) = tm.slip_angles(&[state[0], state[1], state[2]], control[0]);
    af.abs().max(ar.abs())
}

/// Simulate `sc` with RK4 at `dt / DEFAULT_SUBSTEPS`, returning states and
/// controls (no observations).
pub fn simulate_truth(sc: &Scenario, p: &VehicleParams) -> Result<Trajectory> {
    simulate_truth_with_substeps(sc, p, DEFAULT_SUBSTEPS)
}

pub fn simulate_truth_with_substeps(sc: &Scenario, p: &VehicleParams, substeps: usize) -> Result<Trajectory> {
    sc.validate()?;
    p.validate()?;
    let substeps = substeps.max(1);
    let model = TruthModel::new(p, sc.friction_mu);
    let samples = sc.samples();
    let h = sc.dt_s / substeps as f64;
    let torque_cap = sc.friction_mu * p.mass_kg * GRAVITY * p.tire_radius_m;

    let mut traj = Trajectory {
        dt: sc.dt_s,
        times: Vec::with_capacity(samples),
        states: Vec::with_capacity(samples),
        controls: Vec::with_capacity(samples),
        observations: Vec::new(),
    };
    let mut s = [sc.initial_speed(), 0.0, 0.0];
    for k in 0..samples {
        let t = k as f64 * sc.dt_s;
        let delta = sc.steering(t);
        let torque = (sc.speed_gain_per_s * p.mass_kg * p.tire_radius_m * (sc.speed_m_s - s[0]))
            .clamp(-torque_cap, torque_cap);
        traj.times.push(t);
        traj.states.push(StateVector::from_column_slice(&s));
        traj.controls.push(ControlVector::from_column_slice(&[delta, torque]));
        for _ in 0..substeps {
            s = model.rk4(s, delta, torque, h);
        }
        // a spin shows up either as runaway yaw or as forward speed collapsing
        if !s.iter().all(|v| v.is_finite()) || s[2].abs() > SPIN_OUT_YAW_RATE || s[0] <= STANDSTILL_VX {
            return Err(Error::Infeasible {
                scenario: sc.label(),
                mu: sc.friction_mu,
                yaw_rate: s[2],
                vx: s[0],
                time: t + sc.dt_s,
            });
        }
    }
    Ok(traj)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObservationMode {
    /// Longitudinal velocity, lateral velocity and yaw rate.
    Full,
    /// Lateral velocity unavailable, as on a production vehicle.
    Deployment,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    Vx,
    Vy,
    YawRate,
    WheelSpeed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensorConfig {
    #[serde(default = "default_mode")]
    pub mode: ObservationMode,
    #[serde(default = "default_sigma_v")]
    pub sigma_vx_m_s: f64,
    #[serde(default = "default_sigma_v")]
    pub sigma_vy_m_s: f64,
    #[serde(default = "default_sigma_yaw")]
    pub sigma_yaw_rad_s: f64,
    #[serde(default = "default_sigma_wheel")]
    pub sigma_wheel_rad_s: f64,
    /// Add a wheel-speed channel (`vx / R_w`).
    #[serde(default)]
    pub wheel_speed: bool,
    /// Per-channel, per-sample dropout probability.
    #[serde(default)]
    pub dropout: f64,
}

fn default_mode() -> ObservationMode {
    ObservationMode::Deployment
}
fn default_sigma_v() -> f64 {
    0.05
}
fn default_sigma_yaw() -> f64 {
    0.01
}
fn default_sigma_wheel() -> f64 {
    0.1
}

impl Default for SensorConfig {
    fn default() -> Self {
        SensorConfig {
            mode: default_mode(),
            sigma_vx_m_s: default_sigma_v(),
            sigma_vy_m_s: default_sigma_v(),
            sigma_yaw_rad_s: default_sigma_yaw(),
            sigma_wheel_rad_s: default_sigma_wheel(),
            wheel_speed: false,
            dropout: 0.0,
        }
    }
}

impl SensorConfig {
    pub fn noiseless(mode: ObservationMode) -> Self {
        SensorConfig {
            mode,
            sigma_vx_m_s: 0.0,
            sigma_vy_m_s: 0.0,
            sigma_yaw_rad_s: 0.0,
            sigma_wheel_rad_s: 0.0,
            wheel_speed: false,
            dropout: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for s in [self.sigma_vx_m_s, self.sigma_vy_m_s, self.sigma_yaw_rad_s, self.sigma_wheel_rad_s] {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(Error::Config(format!("sensor standard deviation must be >= 0, got {s}")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        Ok(())
    }

    pub fn channels(&self) -> Vec<Channel> {
        let mut ch = match self.mode {
            ObservationMode::Full => vec![Channel::Vx, Channel::Vy, Channel::YawRate],
            ObservationMode::Deployment => vec![Channel::Vx, Channel::YawRate],
        };
        if self.wheel_speed {
            ch.push(Channel::WheelSpeed);
        }
        ch
    }
}

/// Linear observation model (H, R) derived from a [`SensorConfig`].
#[derive(Debug, Clone, PartialEq)]
pub struct SensorModel {
    pub channels: Vec<Channel>,
    pub h: DMatrix<f64>,
    pub r: Covariance,
}

impl SensorModel {
    pub fn new(cfg: &SensorConfig, p: &VehicleParams) -> Result<Self> {
        cfg.validate()?;
        let channels = cfg.channels();
        let m = channels.len();
        let mut h = DMatrix::zeros(m, 3);
        let mut sigma = Vec::with_capacity(m);
        for (i, ch) in channels.iter().enumerate() {
            match ch {
                Channel::Vx => {
                    h[(i, 0)] = 1.0;
                    sigma.push(cfg.sigma_vx_m_s);
                }
                Channel::Vy => {
                    h[(i, 1)] = 1.0;
                    sigma.push(cfg.sigma_vy_m_s);
                }
                Channel::YawRate => {
                    h[(i, 2)] = 1.0;
                    sigma.push(cfg.sigma_yaw_rad_s);
                }
                Channel::WheelSpeed => {
                    h[(i, 0)] = 1.0 / p.tire_radius_m;
                    sigma.push(cfg.sigma_wheel_rad_s);
                }
            }
        }
        let var: Vec<f64> = sigma.iter().map(|s| s * s).collect();
        Ok(SensorModel {
            channels,
            h,
            r: Covariance::from_diagonal(&var)?,
        })
    }

    pub fn dim(&self) -> usize {
        self.channels.len()
    }

    pub fn sigma(&self) -> Vec<f64> {
        (0..self.dim()).map(|i| self.r[(i, i)].sqrt()).collect()
    }

    /// Full-size frame for observation `obs` at time `t`; missing channels
    /// stay flagged in the frame's mask.
    pub fn frame(&self, obs: &Observation, t: f64) -> Result<MeasurementFrame> {
        MeasurementFrame::with_mask(obs.values.clone(), self.h.clone(), self.r.clone(), t, obs.mask.clone())
    }
}

/// Synthesize noisy observations of `traj.states`.
pub fn sense(traj: &Trajectory, sensors: &SensorModel, dropout: f64, seed: u64) -> Result<Vec<Observation>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sigma = sensors.sigma();
    let mut out = Vec::with_capacity(traj.len());
    for s in &traj.states {
        if s.len() != sensors.h.ncols() {
            return Err(Error::DimensionMismatch {
                context: "sensor model state",
                expected: sensors.h.ncols(),
                found: s.len(),
            });
        }
        let clean = &sensors.h * s;
        let mut values = DVector::zeros(sensors.dim());
        let mut mask = Vec::with_capacity(sensors.dim());
        for i in 0..sensors.dim() {
            let z: f64 = rng.sample(StandardNormal);
            let drop: f64 = rng.random();
            if drop < dropout {
                values[i] = f64::NAN;
                mask.push(false);
            } else {
                values[i] = clean[i] + sigma[i] * z;
                mask.push(true);
            }
        }
        out.push(Observation { values, mask });
    }
    Ok(out)
}

fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        "NaN".to_owned()
    } else {
        format!("{v:.16e}")
    }
}

fn csv_header(n: usize, q: usize, p: usize) -> String {
    let mut cols = vec!["t".to_owned()];
    cols.extend((1..=n).map(|i| format!("x{i}")));
    cols.extend((1..=q).map(|i| format!("u{i}")));
    cols.extend((1..=p).map(|i| format!("y{i}")));
    cols.extend((1..=p).map(|i| format!("y_mask{i}")));
    cols.join(",")
}

/// Write `traj` in the trajectory CSV schema.
///
/// Line 1 is the column header, line 2 the `# n=.. q=.. p=.. dt=..` comment,
/// then one row per sample with 17 significant digits.
pub fn export_csv(traj: &Trajectory, path: &Path) -> Result<()> {
    fs::write(path, to_csv_string(traj)?)?;
    Ok(())
}

pub fn to_csv_string(traj: &Trajectory) -> Result<String> {
    traj.validate()?;
    let (n, q, p) = (traj.state_dim(), traj.control_dim(), traj.observation_dim());
    let mut s = String::new();
    s.push_str(&csv_header(n, q, p));
    s.push('\n');
    let _ = writeln!(s, "# n={n} q={q} p={p} dt={}", traj.dt);
    for k in 0..traj.len() {
        let mut row = vec![fmt_f64(traj.times[k])];
        row.extend(traj.states[k].iter().map(|v| fmt_f64(*v)));
        row.extend(traj.controls[k].iter().map(|v| fmt_f64(*v)));
        if let Some(obs) = traj.observations.get(k) {
            row.extend(obs.values.iter().map(|v| fmt_f64(*v)));
            row.extend(obs.mask.iter().map(|m| if *m { "1".to_owned() } else { "0".to_owned() }));
        }
        s.push_str(&row.join(","));
        s.push('\n');
    }
    Ok(s)
}

pub fn import_csv(path: &Path) -> Result<Trajectory> {
    from_csv_str(&fs::read_to_string(path)?)
}

fn parse_meta(line: &str, line_no: usize) -> Result<(usize, usize, usize, f64)> {
    let err = |m: &str| Error::Csv {
        line: line_no,
        message: m.to_owned(),
    };
    let body = line.strip_prefix('#').ok_or_else(|| err("expected `# n=.. q=.. p=.. dt=..` comment"))?;
    let (mut n, mut q, mut p, mut dt) = (None, None, None, None);
    for tok in body.split_whitespace() {
        let (k, v) = tok.split_once('=').ok_or_else(|| err("malformed key=value in comment"))?;
        match k {
            "n" => n = v.parse().ok(),
            "q" => q = v.parse().ok(),
            "p" => p = v.parse().ok(),
            "dt" => dt = v.parse().ok(),
            _ => return Err(err(&format!("unknown key `{k}` in comment"))),
        }
    }
    match (n, q, p, dt) {
        (Some(n), Some(q), Some(p), Some(dt)) => Ok((n, q, p, dt)),
        _ => Err(err("comment must define n, q, p and dt")),
    }
}

pub fn from_csv_str(text: &str) -> Result<Trajectory> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (_, header) = lines.next().ok_or(Error::Csv {
        line: 1,
        message: "missing header".into(),
    })?;
    let (meta_no, meta) = lines.next().ok_or(Error::Csv {
        line: 2,
        message: "missing `# n=.. q=.. p=.. dt=..` comment".into(),
    })?;
    let (n, q, p, dt) = parse_meta(meta, meta_no)?;
    let expected = csv_header(n, q, p);
    if header.trim() != expected {
        return Err(Error::Csv {
            line: 1,
            message: format!("header does not match schema `{expected}`"),
        });
    }
    let width = 1 + n + q + 2 * p;
    let mut traj = Trajectory {
        dt,
        ..Trajectory::default()
    };
    for (line_no, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if cells.len() != width {
            return Err(Error::Csv {
                line: line_no,
                message: format!("expected {width} columns, found {}", cells.len()),
            });
        }
        let mut vals = Vec::with_capacity(width);
        for (c, cell) in cells.iter().enumerate() {
            let v: f64 = cell.parse().map_err(|_| Error::Csv {
                line: line_no,
                message: format!("column {} is not numeric: `{cell}`", c + 1),
            })?;
            vals.push(v);
        }
        traj.times.push(vals[0]);
        traj.states.push(StateVector::from_column_slice(&vals[1..1 + n]));
        traj.controls.push(ControlVector::from_column_slice(&vals[1 + n..1 + n + q]));
        if p > 0 {
            let values = DVector::from_column_slice(&vals[1 + n + q..1 + n + q + p]);
            let mut mask = Vec::with_capacity(p);
            for m in &vals[1 + n + q + p..] {
                match *m {
                    1.0 => mask.push(true),
                    0.0 => mask.push(false),
                    _ => {
                        return Err(Error::Csv {
                            line: line_no,
                            message: format!("mask values must be 0 or 1, got {m}"),
                        })
                    }
                }
            }
            traj.observations.push(Observation { values, mask });
        }
    }
    traj.validate().map_err(|e| Error::Csv {
        line: 0,
        message: e.to_string(),
    })?;
    Ok(traj)
}
