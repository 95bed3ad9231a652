//! Bilinear Koopman models in a random-Fourier-feature observable space:
//! lifting, regularized least-squares identification, per-step conversion to
//! a linear time-varying system, and analytic covariance propagation.

use std::f64::consts::PI;
use std::ops::Range;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{khatri_rao, kron_identity, psd_project, spd_solve, Covariance, ControlVector, ModelBelief, StateVector};
use crate::models::{collect_transitions, Normalization, Predictor, PredictorKind};
use crate::simulator::Trajectory;

pub const DEFAULT_LIFTED_DIM: usize = 64;
/// Weight of the Koopman forecast against the direct predictor embedding.
pub const DEFAULT_BLEND: f64 = 0.8;

/// Lifting `z = [x; sqrt(2/(d-n)) cos(W x_norm + b)]`.
///
/// The first `n` coordinates are the raw state; `d == n` is the identity lifting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LiftingParams {
    pub state_dim: usize,
    pub lifted_dim: usize,
    /// (d - n) x n
    pub frequencies: DMatrix<f64>,
    pub phases: DVector<f64>,
    pub bandwidth: f64,
    pub state_norm: Normalization,
}

impl LiftingParams {
    pub fn identity(n: usize) -> Self {
        LiftingParams {
            state_dim: n,
            lifted_dim: n,
            frequencies: DMatrix::zeros(0, n),
            phases: DVector::zeros(0),
            bandwidth: 1.0,
            state_norm: Normalization::identity(n),
        }
    }

    pub fn random(lifted_dim: usize, bandwidth: f64, state_norm: Normalization, seed: u64) -> Result<Self> {
        let n = state_norm.dim();
        if lifted_dim <= n {
            return Err(Error::Config(format!(
                "lifted dimension {lifted_dim} must exceed state dimension {n}"
            )));
        }
        if !(bandwidth > 0.0) {
            return Err(Error::Config("lifting bandwidth must be > 0".into()));
        }
        let extra = lifted_dim - n;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut frequencies = DMatrix::zeros(extra, n);
        let mut phases = DVector::zeros(extra);
        for k in 0..extra {
            for j in 0..n {
                let z: f64 = rng.sample(StandardNormal);
                frequencies[(k, j)] = z / bandwidth;
            }
            phases[k] = rng.random_range(0.0..2.0 * PI);
        }
        Ok(LiftingParams {
            state_dim: n,
            lifted_dim,
            frequencies,
            phases,
            bandwidth,
            state_norm,
        })
    }

    /// Random lifting normalized by the state statistics of `data`.
    pub fn from_data(data: &[Trajectory], lifted_dim: usize, bandwidth: f64, seed: u64) -> Result<Self> {
        let tr = collect_transitions(data)?;
        LiftingParams::random(lifted_dim, bandwidth, Normalization::fit(&tr.states), seed)
    }

    pub fn feature_scale(&self) -> f64 {
        let extra = self.lifted_dim - self.state_dim;
        if extra == 0 {
            0.0
        } else {
            (2.0 / extra as f64).sqrt()
        }
    }
}

pub fn lift(x: &StateVector, l: &LiftingParams) -> DVector<f64> {
    let n = l.state_dim;
    let scale = l.feature_scale();
    let mut z = DVector::zeros(l.lifted_dim);
    z.rows_mut(0, n).copy_from(x);
    if l.lifted_dim > n {
        let arg = &l.frequencies * l.state_norm.apply(x) + &l.phases;
        for (k, a) in arg.iter().enumerate() {
            z[n + k] = scale * a.cos();
        }
    }
    z
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KoopmanHyper {
    pub lambda_a: f64,
    pub lambda_b: f64,
    pub lambda_h: f64,
    pub lambda_c: f64,
    pub lambda_q: f64,
    pub lambda_r: f64,
    /// Learn `C_K` by ridge regression instead of fixing it to `[I | 0]`.
    pub learn_output_map: bool,
}

impl Default for KoopmanHyper {
    fn default() -> Self {
        KoopmanHyper {
            lambda_a: 1e-6,
            lambda_b: 1e-6,
            lambda_h: 1e-6,
            lambda_c: 0.0,
            lambda_q: 1e-9,
            lambda_r: 1e-9,
            learn_output_map: false,
        }
    }
}

impl KoopmanHyper {
    pub fn uniform(lambda: f64) -> Self {
        KoopmanHyper {
            lambda_a: lambda,
            lambda_b: lambda,
            lambda_h: lambda,
            lambda_c: lambda,
            lambda_q: lambda,
            lambda_r: lambda,
            learn_output_map: false,
        }
    }

    fn validate(&self) -> Result<()> {
        for v in [self.lambda_a, self.lambda_b, self.lambda_h, self.lambda_c, self.lambda_q, self.lambda_r] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("regularization weights must be >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// `z' = A z + B u + H (u ⊗ z) + w`, `x = C z + v`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KoopmanModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub h: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub q: Covariance,
    pub r: Covariance,
    pub lifting: LiftingParams,
    pub hyper: KoopmanHyper,
}

impl KoopmanModel {
    pub fn lifted_dim(&self) -> usize {
        self.lifting.lifted_dim
    }

    pub fn state_dim(&self) -> usize {
        self.lifting.state_dim
    }

    pub fn control_dim(&self) -> usize {
        self.b.ncols()
    }
}

/// Training matrices in lifted coordinates.
#[derive(Debug, Clone)]
pub struct LiftedData {
    /// successors, d x L
    pub next: DMatrix<f64>,
    /// predecessors, d x L
    pub prev: DMatrix<f64>,
    /// q x L
    pub controls: DMatrix<f64>,
    /// original successor states, n x L
    pub states: DMatrix<f64>,
}

pub fn lifted_data(data: &[Trajectory], l: &LiftingParams) -> Result<LiftedData> {
    let tr = collect_transitions(data)?;
    if tr.states.nrows() != l.state_dim {
        return Err(Error::DimensionMismatch {
            context: "lifting state dimension",
            expected: l.state_dim,
            found: tr.states.nrows(),
        });
    }
    let count = tr.states.ncols();
    let mut prev = DMatrix::zeros(l.lifted_dim, count);
    let mut next = DMatrix::zeros(l.lifted_dim, count);
    for k in 0..count {
        prev.set_column(k, &lift(&tr.states.column(k).clone_owned(), l));
        next.set_column(k, &lift(&tr.successors.column(k).clone_owned(), l));
    }
    Ok(LiftedData {
        next,
        prev,
        controls: tr.controls,
        states: tr.successors,
    })
}

fn regressor(ld: &LiftedData) -> Result<DMatrix<f64>> {
    let bilinear = khatri_rao(&ld.controls, &ld.prev)?;
    let (d, q) = (ld.prev.nrows(), ld.controls.nrows());
    let count = ld.prev.ncols();
    let mut phi = DMatrix::zeros(d + q + d * q, count);
    phi.rows_mut(0, d).copy_from(&ld.prev);
    phi.rows_mut(d, q).copy_from(&ld.controls);
    phi.rows_mut(d + q, d * q).copy_from(&bilinear);
    Ok(phi)
}

/// Ratio of smallest to largest eigenvalue below which a Gram block counts as singular.
const RANK_TOL: f64 = 1e-13;

fn is_deficient(gram: &DMatrix<f64>) -> bool {
    if gram.nrows() == 0 {
        return false;
    }
    let eig = SymmetricEigen::new(gram.clone()).eigenvalues;
    let max = eig.amax();
    max <= 0.0 || eig.min() <= RANK_TOL * max
}

/// Ridge solve `Theta = X Phi^T (Phi Phi^T + L Lambda)^-1`, naming the
/// regressor block responsible when the system is singular.
fn block_ridge(
    phi: &DMatrix<f64>,
    target: &DMatrix<f64>,
    penalties: &[(&'static str, Range<usize>, f64)],
) -> Result<DMatrix<f64>> {
    let count = phi.ncols() as f64;
    let mut gram = phi * phi.transpose();
    for (_, range, lambda) in penalties {
        for i in range.clone() {
            gram[(i, i)] += count * lambda;
        }
    }
    if is_deficient(&gram) {
        for (name, range, _) in penalties {
            let len = range.len();
            let block = gram.view((range.start, range.start), (len, len)).clone_owned();
            if is_deficient(&block) {
                return Err(Error::RankDeficient { block: name });
            }
        }
        return Err(Error::RankDeficient { block: "joint regressor" });
    }
    let rhs = phi * target.transpose();
    let theta_t = spd_solve(&gram, &rhs, "koopman regression").map_err(|_| Error::RankDeficient {
        block: "joint regressor",
    })?;
    Ok(theta_t.transpose())
}

/// Identify a bilinear Koopman model from trajectory data.
///
/// Stage one solves the Tikhonov-regularized regression for `[A B H]` against
/// the stacked regressors `[X~; U; U ⊙ X~]` (and for `C` when learned); stage
/// two sets `Q_K`, `R_K` to their closed-form minimizers given the operators:
/// the residual second moment plus the regularization and trace terms.
pub fn fit_koopman(data: &[Trajectory], lifting: LiftingParams, hyper: KoopmanHyper, floor: f64) -> Result<KoopmanModel> {
    hyper.validate()?;
    let ld = lifted_data(data, &lifting)?;
    let (n, d, q) = (lifting.state_dim, lifting.lifted_dim, ld.controls.nrows());
    let count = ld.prev.ncols();
    let needed = d + q + d * q;
    if count < needed {
        return Err(Error::IncompatibleTraining(format!(
            "{count} transitions; need at least {needed} for d={d}, q={q}"
        )));
    }
    // Controls enter the regression divided by their RMS so that torque (in
    // N m) and steering (in rad) see comparable penalties; the scale is folded
    // back into B and H afterwards.
    let scale: Vec<f64> = ld
        .controls
        .row_iter()
        .map(|r| {
            let rms = (r.norm_squared() / count as f64).sqrt();
            if rms > 0.0 && rms.is_finite() { rms } else { 1.0 }
        })
        .collect();
    let mut scaled = ld.clone();
    for (j, s) in scale.iter().enumerate() {
        scaled.controls.row_mut(j).scale_mut(1.0 / s);
    }
    let phi = regressor(&scaled)?;
    let theta = block_ridge(
        &phi,
        &ld.next,
        &[
            ("A (lifted state)", 0..d, hyper.lambda_a),
            ("B (control)", d..d + q, hyper.lambda_b),
            ("H (bilinear)", d + q..needed, hyper.lambda_h),
        ],
    )?;
    let a = theta.columns(0, d).clone_owned();
    let b = theta.columns(d, q).clone_owned();
    let h = theta.columns(d + q, d * q).clone_owned();

    let c = if hyper.learn_output_map {
        block_ridge(&ld.next, &ld.states, &[("C (output)", 0..d, hyper.lambda_c)])?
    } else {
        let mut c = DMatrix::zeros(n, d);
        c.view_mut((0, 0), (n, n)).fill_with_identity();
        c
    };

    let l = count as f64;
    let resid = &ld.next - &theta * &phi;
    let mut q_k = &resid * resid.transpose() / l
        + hyper.lambda_a * &a * a.transpose()
        + hyper.lambda_b * &b * b.transpose()
        + hyper.lambda_h * &h * h.transpose();
    for i in 0..d {
        q_k[(i, i)] += hyper.lambda_q;
    }
    let out_resid = &ld.states - &c * &ld.next;
    let mut r_k = &out_resid * out_resid.transpose() / l + hyper.lambda_c * &c * c.transpose();
    for i in 0..n {
        r_k[(i, i)] += hyper.lambda_r;
    }

    let mut b = b;
    let mut h = h;
    for (j, s) in scale.iter().enumerate() {
        b.column_mut(j).scale_mut(1.0 / s);
        h.columns_mut(j * d, d).scale_mut(1.0 / s);
    }
    Ok(KoopmanModel {
        a,
        b,
        h,
        c,
        q: psd_project(&q_k, floor)?,
        r: psd_project(&r_k, floor)?,
        lifting,
        hyper,
    })
}

/// Squared Frobenius norm of the lifted one-step regression residual on `data`.
pub fn regression_residual(model: &KoopmanModel, data: &[Trajectory]) -> Result<f64> {
    let ld = lifted_data(data, &model.lifting)?;
    let phi = regressor(&ld)?;
    let mut theta = DMatrix::zeros(model.lifted_dim(), phi.nrows());
    let (d, q) = (model.lifted_dim(), model.control_dim());
    theta.columns_mut(0, d).copy_from(&model.a);
    theta.columns_mut(d, q).copy_from(&model.b);
    theta.columns_mut(d + q, d * q).copy_from(&model.h);
    Ok((&ld.next - theta * phi).norm_squared())
}

/// Freeze the control: `A_t = A + H (u ⊗ I)`, `v_t = B u`.
pub fn ltv_matrices(k: &KoopmanModel, u: &ControlVector) -> (DMatrix<f64>, DVector<f64>) {
    let d = k.lifted_dim();
    let a_t = &k.a + &k.h * kron_identity(u, d);
    (a_t, &k.b * u)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LiftedBelief {
    pub mean: DVector<f64>,
    pub cov: Covariance,
}

/// Lifted forecast: blended mean `alpha (A_t z + v_t) + (1 - alpha) lift(f(C z, u))`
/// and covariance `A_t P A_t^T + Q_K`.
pub fn koopman_forecast(
    belief: &LiftedBelief,
    k: &KoopmanModel,
    u: &ControlVector,
    predictor: &dyn Predictor,
    alpha: f64,
    floor: f64,
) -> Result<LiftedBelief> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("blend alpha must lie in [0, 1], got {alpha}")));
    }
    if belief.mean.len() != k.lifted_dim() {
        return Err(Error::DimensionMismatch {
            context: "lifted belief",
            expected: k.lifted_dim(),
            found: belief.mean.len(),
        });
    }
    let (a_t, v_t) = ltv_matrices(k, u);
    let z_koop = &a_t * &belief.mean + v_t;
    let mean = if alpha < 1.0 {
        let direct = predictor.predict(&(&k.c * &belief.mean), u)?;
        let z_direct = lift(&direct, &k.lifting);
        alpha * z_koop + (1.0 - alpha) * z_direct
    } else {
        z_koop
    };
    let cov = &a_t * belief.cov.matrix() * a_t.transpose() + k.q.matrix();
    Ok(LiftedBelief {
        mean,
        cov: psd_project(&cov, floor)?,
    })
}

/// State-space view `(C z, C P C^T + extra)` of a lifted belief.
pub fn project_to_state(
    belief: &LiftedBelief,
    k: &KoopmanModel,
    extra: Option<&DMatrix<f64>>,
    model_id: &str,
    floor: f64,
) -> Result<ModelBelief> {
    let mean = &k.c * &belief.mean;
    let mut cov = &k.c * belief.cov.matrix() * k.c.transpose();
    if let Some(e) = extra {
        cov += e;
    }
    ModelBelief::new(model_id, mean, psd_project(&cov, floor)?)
}

/// Re-anchor a lifted belief on a state-space analysis: mean `lift(x)`,
/// state block `P`, feature block kept from `forecast`, cross block zero.
///
/// Features are cosines bounded by the feature scale `s`, so no direction of
/// the kept block can carry more variance than `s^2`; larger eigenvalues are
/// clipped there. Measurements never reach the feature block, and without the
/// cap a marginally expanding `A_t` inflates it without limit.
pub fn reanchor(analysis: &ModelBelief, forecast: &LiftedBelief, k: &KoopmanModel, floor: f64) -> Result<LiftedBelief> {
    let (n, d) = (k.state_dim(), k.lifted_dim());
    let mut cov = DMatrix::zeros(d, d);
    cov.view_mut((0, 0), (n, n)).copy_from(analysis.cov.matrix());
    if d > n {
        let block = forecast.cov.view((n, n), (d - n, d - n)).clone_owned();
        let cap = k.lifting.feature_scale().powi(2);
        let eig = SymmetricEigen::new(block);
        let clipped = eig.eigenvalues.map(|l| l.min(cap));
        let block = &eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose();
        cov.view_mut((n, n), (d - n, d - n)).copy_from(&block);
    }
    Ok(LiftedBelief {
        mean: lift(&analysis.mean, &k.lifting),
        cov: psd_project(&cov, floor)?,
    })
}

/// Initial lifted belief from a state-space prior; the feature block gets
/// `feature_var * I`.
pub fn initial_lifted_belief(prior: &ModelBelief, k: &KoopmanModel, feature_var: f64, floor: f64) -> Result<LiftedBelief> {
    let (n, d) = (k.state_dim(), k.lifted_dim());
    let mut cov = DMatrix::zeros(d, d);
    cov.view_mut((0, 0), (n, n)).copy_from(prior.cov.matrix());
    for i in n..d {
        cov[(i, i)] = feature_var;
    }
    Ok(LiftedBelief {
        mean: lift(&prior.mean, &k.lifting),
        cov: psd_project(&cov, floor)?,
    })
}

impl Predictor for KoopmanModel {
    fn kind(&self) -> PredictorKind {
        PredictorKind::DataDriven
    }

    fn state_dim(&self) -> usize {
        self.lifting.state_dim
    }

    fn control_dim(&self) -> usize {
        self.b.ncols()
    }

    fn step(&self, x: &StateVector, u: &ControlVector) -> Result<StateVector> {
        let (a_t, v_t) = ltv_matrices(self, u);
        Ok(&self.c * (a_t * lift(x, &self.lifting) + v_t))
    }
}
