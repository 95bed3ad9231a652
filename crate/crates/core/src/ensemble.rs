//! Ensemble-based covariance propagation, usable with any [`Predictor`].

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg::{check_finite_vec, pinv, psd_project, Covariance, ControlVector, ModelBelief, StateVector};
use crate::models::Predictor;

/// Default ensemble size per model.
pub const DEFAULT_MEMBERS: usize = 100;
/// Default forgetting factor for [`adapt_sampling_cov`].
pub const DEFAULT_FORGETTING: f64 = 0.98;

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleSet {
    pub members: Vec<StateVector>,
    pub sampling_cov: Covariance,
    pub seed: u64,
}

impl EnsembleSet {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

/// Derive an independent seed for `stream` from `base` (SplitMix64 finalizer).
pub fn stream_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x632B_E59B_D9B4_E019);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Lower square-root factor `L` with `L L^T = S`. Cholesky when `S` is
/// definite, otherwise the symmetric eigen-root for semidefinite `S`.
fn sqrt_factor(s: &Covariance) -> Result<DMatrix<f64>> {
    if let Some(chol) = s.matrix().clone().cholesky() {
        return Ok(chol.l());
    }
    let eig = SymmetricEigen::new(s.matrix().clone());
    let scale = s.amax().max(1.0);
    let min = eig.eigenvalues.min();
    if min < -1e-9 * scale {
        return Err(Error::NotPsd { min_eigenvalue: min });
    }
    let root = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&root))
}

/// Draw `count` members `x + eta_i`, `eta_i ~ N(0, S)`, from a seeded stream.
pub fn generate_ensemble(x: &StateVector, s: &Covariance, count: usize, seed: u64) -> Result<EnsembleSet> {
    if count < 2 {
        return Err(Error::EnsembleTooSmall(count));
    }
    if s.dim() != x.len() {
        return Err(Error::DimensionMismatch {
            context: "sampling covariance",
            expected: x.len(),
            found: s.dim(),
        });
    }
    check_finite_vec(x, "ensemble centre")?;
    s.validate()?;
    let l = sqrt_factor(s)?;
    let n = x.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let members = (0..count)
        .map(|_| {
            let z = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
            x + &l * z
        })
        .collect();
    Ok(EnsembleSet {
        members,
        sampling_cov: s.clone(),
        seed,
    })
}

/// Advance every member through `model`; member order is preserved.
pub fn propagate_ensemble(model: &dyn Predictor, e: &EnsembleSet, u: &ControlVector) -> Result<EnsembleSet> {
    let members = e
        .members
        .iter()
        .enumerate()
        .map(|(index, x)| {
            model.predict(x, u).map_err(|source| Error::Member {
                index,
                source: Box::new(source),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EnsembleSet {
        members,
        sampling_cov: e.sampling_cov.clone(),
        seed: e.seed,
    })
}

/// Ensemble mean and unbiased sample covariance (divisor `N - 1`), floored.
pub fn ensemble_statistics(e: &EnsembleSet, model_id: &str, floor: f64) -> Result<ModelBelief> {
    let count = e.members.len();
    if count < 2 {
        return Err(Error::EnsembleTooSmall(count));
    }
    let n = e.members[0].len();
    let mut mean = DVector::zeros(n);
    for m in &e.members {
        mean += m;
    }
    mean /= count as f64;
    let mut cov = DMatrix::zeros(n, n);
    for m in &e.members {
        let d = m - &mean;
        cov += &d * d.transpose();
    }
    cov /= (count - 1) as f64;
    ModelBelief::new(model_id, mean, psd_project(&cov, floor)?)
}

/// State indices that `h` observes (columns with any nonzero entry).
pub fn observed_states(h: &DMatrix<f64>) -> Vec<usize> {
    (0..h.ncols()).filter(|&j| h.column(j).iter().any(|v| *v != 0.0)).collect()
}

/// Exponential-forgetting update of a sampling covariance from innovation
/// statistics.
///
/// `E = pinv(H) psd(C - R) pinv(H)^T`; on observed states
/// `S' = rho S + (1 - rho) E`, unobserved rows and columns keep their values,
/// and the result is floored.
pub fn adapt_sampling_cov(
    s: &Covariance,
    innovation_cov: &DMatrix<f64>,
    h: &DMatrix<f64>,
    r: &DMatrix<f64>,
    rho: f64,
    floor: f64,
) -> Result<Covariance> {
    let n = s.dim();
    let p = h.nrows();
    if h.ncols() != n {
        return Err(Error::DimensionMismatch {
            context: "observation matrix columns",
            expected: n,
            found: h.ncols(),
        });
    }
    if innovation_cov.shape() != (p, p) || r.shape() != (p, p) {
        return Err(Error::DimensionMismatch {
            context: "innovation covariance",
            expected: p,
            found: innovation_cov.nrows(),
        });
    }
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::Config(format!("forgetting factor must lie in [0, 1], got {rho}")));
    }
    let excess = psd_project(&(innovation_cov - r), 0.0)?;
    let hp = pinv(h);
    let e = &hp * excess.matrix() * hp.transpose();
    let obs = observed_states(h);
    let mut out = s.matrix().clone();
    for &i in &obs {
        for &j in &obs {
            out[(i, j)] = rho * s[(i, j)] + (1.0 - rho) * e[(i, j)];
        }
    }
    psd_project(&out, floor)
}
