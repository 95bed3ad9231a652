//! Shared numeric vocabulary: Kronecker/Khatri-Rao products, covariance
//! hygiene, and the belief type exchanged between models and the fusion core.

use std::ops::Deref;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// State vector; default layout is `[vx (m/s), vy (m/s), r (rad/s)]`.
pub type StateVector = DVector<f64>;
/// Control vector; default layout is `[road-wheel angle (rad), drive torque (N m)]`.
pub type ControlVector = DVector<f64>;

/// Default eigenvalue floor applied by [`psd_project`].
pub const EIGEN_FLOOR: f64 = 1e-9;

/// Relative tolerance for the covariance symmetry invariant.
pub const SYMMETRY_TOL: f64 = 1e-10;
/// Most negative eigenvalue a covariance may carry before hygiene.
pub const NEGATIVE_EIGEN_TOL: f64 = 1e-9;

/// `u ⊗ z`, control index outermost: `out[i*d + j] = u[i] * z[j]`.
pub fn kron(u: &DVector<f64>, z: &DVector<f64>) -> DVector<f64> {
    let d = z.len();
    DVector::from_fn(u.len() * d, |k, _| u[k / d] * z[k % d])
}

/// Column-wise Kronecker product of `u` (q x L) and `z` (d x L).
pub fn khatri_rao(u: &DMatrix<f64>, z: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if u.ncols() != z.ncols() {
        return Err(Error::IncompatibleTraining(format!(
            "khatri-rao operands have {} and {} columns",
            u.ncols(),
            z.ncols()
        )));
    }
    let d = z.nrows();
    Ok(DMatrix::from_fn(u.nrows() * d, u.ncols(), |k, l| {
        u[(k / d, l)] * z[(k % d, l)]
    }))
}

/// `kron(u, I_d)`: a vertical stack of `u[i] * I_d` blocks (d*q x d).
pub fn kron_identity(u: &DVector<f64>, d: usize) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(d * u.len(), d);
    for (i, ui) in u.iter().enumerate() {
        for j in 0..d {
            out[(i * d + j, j)] = *ui;
        }
    }
    out
}

pub fn check_finite_vec(v: &DVector<f64>, context: &'static str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(context))
    }
}

pub fn check_finite_mat(m: &DMatrix<f64>, context: &'static str) -> Result<()> {
    if m.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(context))
    }
}

fn symmetrize(p: &DMatrix<f64>) -> DMatrix<f64> {
    (p + p.transpose()) * 0.5
}

/// Symmetrize `p` and clamp its eigenvalues from below at `floor`.
///
/// Input that is already symmetric with every eigenvalue at or above the floor
/// comes back as `(P + P^T)/2` without an eigen-reconstruction, so the
/// projection is exactly idempotent.
pub fn psd_project(p: &DMatrix<f64>, floor: f64) -> Result<Covariance> {
    if !p.is_square() {
        return Err(Error::NotSquare {
            rows: p.nrows(),
            cols: p.ncols(),
        });
    }
    check_finite_mat(p, "psd_project input")?;
    let sym = symmetrize(p);
    if sym.nrows() == 0 {
        return Ok(Covariance(sym));
    }
    let eig = SymmetricEigen::new(sym.clone());
    if eig.eigenvalues.iter().all(|&l| l >= floor) {
        return Ok(Covariance(sym));
    }
    let clamped = eig.eigenvalues.map(|l| l.max(floor));
    let v = &eig.eigenvectors;
    let rebuilt = v * DMatrix::from_diagonal(&clamped) * v.transpose();
    Ok(Covariance(symmetrize(&rebuilt)))
}

/// Solve `S X = B` for symmetric positive definite `S` via Cholesky.
pub fn spd_solve(s: &DMatrix<f64>, b: &DMatrix<f64>, context: &'static str) -> Result<DMatrix<f64>> {
    let chol = s.clone().cholesky().ok_or(Error::Singular(context))?;
    let x = chol.solve(b);
    check_finite_mat(&x, context)?;
    Ok(x)
}

/// Moore-Penrose pseudo-inverse.
pub fn pinv(m: &DMatrix<f64>) -> DMatrix<f64> {
    if m.is_empty() {
        return DMatrix::zeros(m.ncols(), m.nrows());
    }
    let svd = m.clone().svd(true, true);
    let tol = f64::EPSILON * (m.nrows().max(m.ncols()) as f64) * svd.singular_values.max();
    svd.pseudo_inverse(tol)
        .unwrap_or_else(|_| DMatrix::zeros(m.ncols(), m.nrows()))
}

/// A symmetric positive-semidefinite matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Covariance(DMatrix<f64>);

impl Covariance {
    /// Wraps `m` after checking the covariance invariants.
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        let c = Covariance(m);
        c.validate()?;
        Ok(c)
    }

    pub fn identity(n: usize) -> Self {
        Covariance(DMatrix::identity(n, n))
    }

    pub fn zeros(n: usize) -> Self {
        Covariance(DMatrix::zeros(n, n))
    }

    pub fn from_diagonal(diag: &[f64]) -> Result<Self> {
        Covariance::new(DMatrix::from_diagonal(&DVector::from_column_slice(diag)))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    /// Symmetry to [`SYMMETRY_TOL`] (relative) and eigenvalues no lower than
    /// `-NEGATIVE_EIGEN_TOL` scaled by the matrix magnitude.
    pub fn validate(&self) -> Result<()> {
        validate_covariance(&self.0)
    }

    pub fn min_eigenvalue(&self) -> f64 {
        if self.0.nrows() == 0 {
            return 0.0;
        }
        SymmetricEigen::new(symmetrize(&self.0)).eigenvalues.min()
    }
}

impl Deref for Covariance {
    type Target = DMatrix<f64>;

    fn deref(&self) -> &DMatrix<f64> {
        &self.0
    }
}

/// Checks the covariance invariants on a raw matrix.
pub fn validate_covariance(m: &DMatrix<f64>) -> Result<()> {
    if !m.is_square() {
        return Err(Error::NotSquare {
            rows: m.nrows(),
            cols: m.ncols(),
        });
    }
    check_finite_mat(m, "covariance")?;
    let scale = m.amax().max(1.0);
    let asym = (m - m.transpose()).amax();
    if asym > SYMMETRY_TOL * scale {
        return Err(Error::NotPsd {
            min_eigenvalue: f64::NAN,
        });
    }
    if m.nrows() > 0 {
        let min_eig = SymmetricEigen::new(symmetrize(m)).eigenvalues.min();
        if min_eig < -NEGATIVE_EIGEN_TOL * scale {
            return Err(Error::NotPsd {
                min_eigenvalue: min_eig,
            });
        }
    }
    Ok(())
}

/// One model's (mean, covariance) pair at one instant.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBelief {
    pub model_id: String,
    pub mean: StateVector,
    pub cov: Covariance,
}

impl ModelBelief {
    pub fn new(model_id: impl Into<String>, mean: StateVector, cov: Covariance) -> Result<Self> {
        if cov.dim() != mean.len() {
            return Err(Error::DimensionMismatch {
                context: "belief covariance",
                expected: mean.len(),
                found: cov.dim(),
            });
        }
        Ok(ModelBelief {
            model_id: model_id.into(),
            mean,
            cov,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}
