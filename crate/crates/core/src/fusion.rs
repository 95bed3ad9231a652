//! Consensus fusion of model beliefs, the measurement update, feedback to the
//! individual models, and innovation statistics.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{check_finite_vec, psd_project, spd_solve, Covariance, ModelBelief};

/// Maps the reference state space into a model's state space (`n_m x n`).
#[derive(Debug, Clone, PartialEq)]
pub struct Transform(DMatrix<f64>);

impl Transform {
    pub fn identity(n: usize) -> Self {
        Transform(DMatrix::identity(n, n))
    }

    /// Requires full row rank.
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if m.nrows() > m.ncols() || m.rank(1e-12 * m.amax().max(1.0)) != m.nrows() {
            return Err(Error::InvalidTransform(format!(
                "{}x{} matrix is not full row rank",
                m.nrows(),
                m.ncols()
            )));
        }
        Ok(Transform(m))
    }

    /// Rows of the identity picking out `indices` of an `n`-state.
    pub fn selector(n: usize, indices: &[usize]) -> Result<Self> {
        let mut m = DMatrix::zeros(indices.len(), n);
        for (row, &i) in indices.iter().enumerate() {
            if i >= n {
                return Err(Error::InvalidTransform(format!("index {i} out of range for n={n}")));
            }
            m[(row, i)] = 1.0;
        }
        Transform::new(m)
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn is_identity(&self) -> bool {
        self.0.is_square() && self.0 == DMatrix::identity(self.0.nrows(), self.0.ncols())
    }
}

/// A measurement `y = H x + v`, `v ~ N(0, R)`, with per-channel availability.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementFrame {
    pub y: DVector<f64>,
    pub h: DMatrix<f64>,
    pub r: Covariance,
    pub timestamp: f64,
    pub mask: Vec<bool>,
}

impl MeasurementFrame {
    pub fn new(y: DVector<f64>, h: DMatrix<f64>, r: Covariance, timestamp: f64) -> Result<Self> {
        let mask = vec![true; y.len()];
        MeasurementFrame::with_mask(y, h, r, timestamp, mask)
    }

    pub fn with_mask(
        y: DVector<f64>,
        h: DMatrix<f64>,
        r: Covariance,
        timestamp: f64,
        mask: Vec<bool>,
    ) -> Result<Self> {
        let p = y.len();
        for (what, found) in [("observation matrix rows", h.nrows()), ("measurement covariance", r.dim()), ("mask", mask.len())] {
            if found != p {
                return Err(Error::DimensionMismatch {
                    context: what,
                    expected: p,
                    found,
                });
            }
        }
        Ok(MeasurementFrame {
            y,
            h,
            r,
            timestamp,
            mask,
        })
    }

    pub fn is_complete(&self) -> bool {
        self.mask.iter().all(|m| *m)
    }

    /// The frame restricted to available channels.
    pub fn observed(&self) -> (DVector<f64>, DMatrix<f64>, DMatrix<f64>) {
        let idx: Vec<usize> = (0..self.y.len()).filter(|&i| self.mask[i]).collect();
        let y = DVector::from_fn(idx.len(), |i, _| self.y[idx[i]]);
        let h = self.h.select_rows(idx.iter());
        let r = DMatrix::from_fn(idx.len(), idx.len(), |i, j| self.r[(idx[i], idx[j])]);
        (y, h, r)
    }
}

fn check_dims(consensus: &ModelBelief, model: &ModelBelief, t: &Transform) -> Result<()> {
    let tm = t.matrix();
    if tm.ncols() != consensus.dim() {
        return Err(Error::DimensionMismatch {
            context: "transform columns",
            expected: consensus.dim(),
            found: tm.ncols(),
        });
    }
    if tm.nrows() != model.dim() {
        return Err(Error::DimensionMismatch {
            context: "transform rows",
            expected: model.dim(),
            found: tm.nrows(),
        });
    }
    Ok(())
}

/// Fold one more model into the consensus:
/// `K = P T^T (T P T^T + P_m)^-1`, `x += K (x_m - T x)`, `P = (I - K T) P`.
pub fn fuse_pair(consensus: &ModelBelief, model: &ModelBelief, t: &Transform, floor: f64) -> Result<ModelBelief> {
    check_dims(consensus, model, t)?;
    let tm = t.matrix();
    let p = consensus.cov.matrix();
    let tp = tm * p;
    let s = &tp * tm.transpose() + model.cov.matrix();
    // K^T = S^-1 T P since S and P are symmetric
    let gain = spd_solve(&s, &tp, "model-incorporation covariance")?.transpose();
    let mean = &consensus.mean + &gain * (&model.mean - tm * &consensus.mean);
    check_finite_vec(&mean, "fused mean")?;
    let n = consensus.dim();
    let cov = (DMatrix::identity(n, n) - &gain * tm) * p;
    ModelBelief::new(consensus.model_id.clone(), mean, psd_project(&cov, floor)?)
}

/// Left fold of [`fuse_pair`] starting from the first belief, whose transform
/// must be the identity.
pub fn fuse_all(beliefs: &[ModelBelief], transforms: &[Transform], floor: f64) -> Result<ModelBelief> {
    let first = beliefs.first().ok_or(Error::EmptyFusion)?;
    if transforms.len() != beliefs.len() {
        return Err(Error::DimensionMismatch {
            context: "transform count",
            expected: beliefs.len(),
            found: transforms.len(),
        });
    }
    if !transforms[0].is_identity() || transforms[0].matrix().nrows() != first.dim() {
        return Err(Error::InvalidTransform("reference model transform must be the identity".into()));
    }
    let mut consensus = ModelBelief {
        model_id: "consensus".into(),
        ..first.clone()
    };
    for (belief, t) in beliefs.iter().zip(transforms).skip(1) {
        consensus = fuse_pair(&consensus, belief, t, floor)?;
    }
    Ok(consensus)
}

/// Effective weight of each model in a fused estimate, `P_fused T_m^T P_m^-1 T_m`.
///
/// For the fold above these sum to the identity.
pub fn fusion_weights(fused: &ModelBelief, beliefs: &[ModelBelief], transforms: &[Transform]) -> Result<Vec<DMatrix<f64>>> {
    beliefs
        .iter()
        .zip(transforms)
        .map(|(b, t)| {
            let pinv_t = spd_solve(b.cov.matrix(), t.matrix(), "model covariance")?;
            Ok(fused.cov.matrix() * t.matrix().transpose() * pinv_t)
        })
        .collect()
}

/// Kalman measurement update with the Joseph-form covariance
/// `(I - K H) P (I - K H)^T + K R K^T`. Missing channels are dropped.
pub fn measurement_update(consensus: &ModelBelief, frame: &MeasurementFrame, floor: f64) -> Result<ModelBelief> {
    if frame.h.ncols() != consensus.dim() {
        return Err(Error::DimensionMismatch {
            context: "observation matrix columns",
            expected: consensus.dim(),
            found: frame.h.ncols(),
        });
    }
    let (y, h, r) = frame.observed();
    if y.is_empty() {
        return Ok(consensus.clone());
    }
    check_finite_vec(&y, "measurement")?;
    let p = consensus.cov.matrix();
    let hp = &h * p;
    let s = &hp * h.transpose() + &r;
    let gain = spd_solve(&s, &hp, "innovation covariance")?.transpose();
    let innovation = &y - &h * &consensus.mean;
    let mean = &consensus.mean + &gain * innovation;
    check_finite_vec(&mean, "analysis mean")?;
    let n = consensus.dim();
    let ikh = DMatrix::identity(n, n) - &gain * &h;
    let cov = &ikh * p * ikh.transpose() + &gain * r * gain.transpose();
    ModelBelief::new(consensus.model_id.clone(), mean, psd_project(&cov, floor)?)
}

/// Map the analysis into each model's space: `x_m = T_m x`, `P_m = T_m P T_m^T`.
pub fn feedback(analysis: &ModelBelief, transforms: &[Transform], floor: f64) -> Result<Vec<ModelBelief>> {
    transforms
        .iter()
        .map(|t| {
            let tm = t.matrix();
            if tm.ncols() != analysis.dim() {
                return Err(Error::DimensionMismatch {
                    context: "transform columns",
                    expected: analysis.dim(),
                    found: tm.ncols(),
                });
            }
            let cov = tm * analysis.cov.matrix() * tm.transpose();
            ModelBelief::new(analysis.model_id.clone(), tm * &analysis.mean, psd_project(&cov, floor)?)
        })
        .collect()
}

/// Ring buffer of the most recent innovations `y - H x^f` of one model.
#[derive(Debug, Clone, PartialEq)]
pub struct InnovationWindow {
    pub model_id: String,
    capacity: usize,
    buffer: VecDeque<DVector<f64>>,
}

impl InnovationWindow {
    pub fn new(model_id: impl Into<String>, capacity: usize) -> Self {
        InnovationWindow {
            model_id: model_id.into(),
            capacity: capacity.max(1),
            buffer: VecDeque::with_capacity(capacity.max(1)),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.buffer.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buffer.is_empty()
    }

    pub fn innovations(&self) -> impl Iterator<Item = &DVector<f64>> {
        self.buffer.iter()
    }

    pub fn push(&mut self, d: DVector<f64>) {
        if self.buffer.len() == self.capacity {
            self.buffer.pop_front();
        }
        self.buffer.push_back(d);
    }

    /// Append `y - H x^f`. Frames with missing channels are skipped so every
    /// stored innovation has the same layout; returns whether one was stored.
    pub fn record_innovation(&mut self, frame: &MeasurementFrame, forecast: &ModelBelief) -> Result<bool> {
        if frame.h.ncols() != forecast.dim() {
            return Err(Error::DimensionMismatch {
                context: "observation matrix columns",
                expected: forecast.dim(),
                found: frame.h.ncols(),
            });
        }
        if !frame.is_complete() {
            return Ok(false);
        }
        if let Some(last) = self.buffer.back() {
            if last.len() != frame.y.len() {
                self.buffer.clear();
            }
        }
        self.push(&frame.y - &frame.h * &forecast.mean);
        Ok(true)
    }

    /// Empirical innovation covariance `1/(W-1) sum d d^T`.
    pub fn innovation_covariance(&self) -> Result<DMatrix<f64>> {
        let count = self.buffer.len();
        if count < 2 {
            return Err(Error::InsufficientInnovations(count));
        }
        let p = self.buffer[0].len();
        let mut c = DMatrix::zeros(p, p);
        for d in &self.buffer {
            c += d * d.transpose();
        }
        Ok(c / (count - 1) as f64)
    }

    /// Observed-space model error implied by the innovations,
    /// `psd_project(C - R)`, with `C` from [`Self::innovation_covariance`].
    pub fn estimate_model_error(&self, r: &DMatrix<f64>, floor: f64) -> Result<Covariance> {
        let c = self.innovation_covariance()?;
        if r.shape() != c.shape() {
            return Err(Error::DimensionMismatch {
                context: "measurement covariance",
                expected: c.nrows(),
                found: r.nrows(),
            });
        }
        psd_project(&(c - r), floor)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::EIGEN_FLOOR;
    use approx::assert_abs_diff_eq;

    fn scalar(x: f64, p: f64) -> ModelBelief {
        ModelBelief::new("m", DVector::from_element(1, x), Covariance::from_diagonal(&[p]).unwrap()).unwrap()
    }

    fn t1() -> Transform {
        Transform::identity(1)
    }

    #[test]
    fn fuse_pair_examples() {
        let f = fuse_pair(&scalar(0.0, 1.0), &scalar(2.0, 1.0), &t1(), EIGEN_FLOOR).unwrap();
        assert_abs_diff_eq!(f.mean[0], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(f.cov[(0, 0)], 0.5, epsilon = 1e-15);

        let f = fuse_pair(&scalar(0.0, 1.0), &scalar(4.0, 3.0), &t1(), EIGEN_FLOOR).unwrap();
        assert_abs_diff_eq!(f.mean[0], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(f.cov[(0, 0)], 0.75, epsilon = 1e-15);
    }

    #[test]
    fn uninformative_model_is_ignored() {
        let c = ModelBelief::new(
            "c",
            DVector::from_column_slice(&[1.0, 2.0]),
            Covariance::new(DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 0.5])).unwrap(),
        )
        .unwrap();
        let m = ModelBelief::new(
            "m",
            DVector::from_column_slice(&[50.0, -30.0]),
            Covariance::new(DMatrix::identity(2, 2) * 1e12).unwrap(),
        )
        .unwrap();
        let f = fuse_pair(&c, &m, &Transform::identity(2), EIGEN_FLOOR).unwrap();
        for i in 0..2 {
            assert!((f.mean[i] - c.mean[i]).abs() <= 1e-6 * c.mean[i].abs());
        }
    }

    #[test]
    fn fuse_all_examples() {
        assert!(matches!(fuse_all(&[], &[], EIGEN_FLOOR), Err(Error::EmptyFusion)));

        let single = fuse_all(&[scalar(3.0, 2.0)], &[t1()], EIGEN_FLOOR).unwrap();
        assert_eq!(single.mean[0], 3.0);
        assert_eq!(single.cov[(0, 0)], 2.0);

        let beliefs = [scalar(0.0, 1.0), scalar(3.0, 1.0), scalar(3.0, 1.0)];
        let ts = vec![t1(); 3];
        let f = fuse_all(&beliefs, &ts, EIGEN_FLOOR).unwrap();
        assert_abs_diff_eq!(f.cov[(0, 0)], 1.0 / 3.0, epsilon = 1e-14);
        assert_abs_diff_eq!(f.mean[0], 2.0, epsilon = 1e-14);

        let rev = [scalar(3.0, 1.0), scalar(3.0, 1.0), scalar(0.0, 1.0)];
        let g = fuse_all(&rev, &ts, EIGEN_FLOOR).unwrap();
        assert_abs_diff_eq!(g.mean[0], f.mean[0], epsilon = 1e-10);
        assert_abs_diff_eq!(g.cov[(0, 0)], f.cov[(0, 0)], epsilon = 1e-10);

        let w = fusion_weights(&f, &beliefs, &ts).unwrap();
        let total: f64 = w.iter().map(|m| m[(0, 0)]).sum();
        assert_abs_diff_eq!(total, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn fuse_all_requires_identity_reference() {
        let b = [scalar(0.0, 1.0)];
        let t = [Transform::new(DMatrix::from_element(1, 1, 2.0)).unwrap()];
        assert!(fuse_all(&b, &t, EIGEN_FLOOR).is_err());
    }

    #[test]
    fn selector_transform_fusion() {
        // a model that only sees the first two of three states
        let c = ModelBelief::new(
            "c",
            DVector::from_column_slice(&[0.0, 0.0, 1.0]),
            Covariance::identity(3),
        )
        .unwrap();
        let m = ModelBelief::new("m", DVector::from_column_slice(&[2.0, 2.0]), Covariance::identity(2)).unwrap();
        let t = Transform::selector(3, &[0, 1]).unwrap();
        let f = fuse_pair(&c, &m, &t, EIGEN_FLOOR).unwrap();
        assert_abs_diff_eq!(f.mean, DVector::from_column_slice(&[1.0, 1.0, 1.0]), epsilon = 1e-14);
        assert_abs_diff_eq!(f.cov[(2, 2)], 1.0, epsilon = 1e-14);
        assert!(Transform::new(DMatrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn measurement_update_examples() {
        let h = DMatrix::from_element(1, 1, 1.0);
        let r = Covariance::from_diagonal(&[1.0]).unwrap();
        let frame = MeasurementFrame::new(DVector::from_element(1, 3.0), h.clone(), r, 0.0).unwrap();
        let a = measurement_update(&scalar(1.0, 1.0), &frame, EIGEN_FLOOR).unwrap();
        assert_abs_diff_eq!(a.mean[0], 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(a.cov[(0, 0)], 0.5, epsilon = 1e-15);

        let x = DVector::from_column_slice(&[1.0, -2.0, 0.5]);
        let prior = ModelBelief::new("c", x.clone(), Covariance::identity(3)).unwrap();
        let y = DVector::from_column_slice(&[4.0, 1.0, -3.0]);
        let loose = MeasurementFrame::new(
            y.clone(),
            DMatrix::identity(3, 3),
            Covariance::new(DMatrix::identity(3, 3) * 1e12).unwrap(),
            0.0,
        )
        .unwrap();
        let a = measurement_update(&prior, &loose, EIGEN_FLOOR).unwrap();
        for i in 0..3 {
            assert!((a.mean[i] - x[i]).abs() <= 1e-6 * x[i].abs());
        }
        let tight = MeasurementFrame::new(
            y.clone(),
            DMatrix::identity(3, 3),
            Covariance::new(DMatrix::identity(3, 3) * 1e-12).unwrap(),
            0.0,
        )
        .unwrap();
        let a = measurement_update(&prior, &tight, EIGEN_FLOOR).unwrap();
        assert!((&a.mean - &y).amax() <= 1e-6);
    }

    #[test]
    fn measurement_update_skips_missing_channels() {
        let prior = ModelBelief::new("c", DVector::from_column_slice(&[1.0, 1.0]), Covariance::identity(2)).unwrap();
        let frame = MeasurementFrame::with_mask(
            DVector::from_column_slice(&[f64::NAN, 3.0]),
            DMatrix::identity(2, 2),
            Covariance::identity(2),
            0.0,
            vec![false, true],
        )
        .unwrap();
        let a = measurement_update(&prior, &frame, EIGEN_FLOOR).unwrap();
        assert_eq!(a.mean[0], 1.0);
        assert_abs_diff_eq!(a.mean[1], 2.0, epsilon = 1e-15);

        let none = MeasurementFrame::with_mask(
            DVector::from_column_slice(&[f64::NAN, f64::NAN]),
            DMatrix::identity(2, 2),
            Covariance::identity(2),
            0.0,
            vec![false, false],
        )
        .unwrap();
        assert_eq!(measurement_update(&prior, &none, EIGEN_FLOOR).unwrap(), prior);
    }

    #[test]
    fn singular_innovation_covariance_is_an_error() {
        let prior = ModelBelief::new("c", DVector::from_element(1, 0.0), Covariance::zeros(1)).unwrap();
        let frame = MeasurementFrame::new(
            DVector::from_element(1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
            Covariance::zeros(1),
            0.0,
        )
        .unwrap();
        assert!(matches!(
            measurement_update(&prior, &frame, EIGEN_FLOOR),
            Err(Error::Singular(_))
        ));
    }

    #[test]
    fn feedback_examples() {
        let cov = Covariance::new(DMatrix::from_row_slice(3, 3, &[2.0, 0.3, 0.1, 0.3, 1.0, 0.2, 0.1, 0.2, 0.5])).unwrap();
        let a = ModelBelief::new("c", DVector::from_column_slice(&[1.0, 2.0, 3.0]), cov.clone()).unwrap();
        let out = feedback(&a, &[Transform::identity(3), Transform::identity(3)], EIGEN_FLOOR).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].mean, a.mean);
        assert_eq!(out[0].cov, a.cov);

        let sel = feedback(&a, &[Transform::selector(3, &[0, 1]).unwrap()], EIGEN_FLOOR).unwrap();
        assert_eq!(sel[0].mean, DVector::from_column_slice(&[1.0, 2.0]));
        assert_eq!(sel[0].cov.matrix(), &DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]));
        assert!(sel[0].cov.validate().is_ok());
    }

    fn frame_y(y: &[f64]) -> MeasurementFrame {
        let p = y.len();
        MeasurementFrame::new(
            DVector::from_column_slice(y),
            DMatrix::identity(p, p),
            Covariance::identity(p),
            0.0,
        )
        .unwrap()
    }

    #[test]
    fn innovation_window_semantics() {
        let mut w = InnovationWindow::new("m", 3);
        let forecast = scalar(2.0, 1.0);
        w.record_innovation(&frame_y(&[2.0]), &forecast).unwrap();
        assert_eq!(w.innovations().next().unwrap()[0], 0.0);

        for y in [3.0, 4.0, 5.0, 6.0] {
            w.record_innovation(&frame_y(&[y]), &forecast).unwrap();
            assert!(w.len() <= 3);
        }
        assert_eq!(w.len(), 3);
        let got: Vec<f64> = w.innovations().map(|d| d[0]).collect();
        assert_eq!(got, vec![2.0, 3.0, 4.0]);
    }

    #[test]
    fn model_error_estimates() {
        let zero_r = DMatrix::zeros(1, 1);
        let mut w = InnovationWindow::new("m", 10);
        assert!(matches!(w.estimate_model_error(&zero_r, 0.0), Err(Error::InsufficientInnovations(0))));
        w.push(DVector::from_element(1, -1.0));
        w.push(DVector::from_element(1, 1.0));
        assert_abs_diff_eq!(w.estimate_model_error(&zero_r, 0.0).unwrap()[(0, 0)], 2.0, epsilon = 1e-15);

        let mut z = InnovationWindow::new("m", 10);
        for _ in 0..5 {
            z.push(DVector::zeros(2));
        }
        let e = z.estimate_model_error(&DMatrix::zeros(2, 2), EIGEN_FLOOR).unwrap();
        assert_abs_diff_eq!(e.matrix(), &(DMatrix::identity(2, 2) * EIGEN_FLOOR), epsilon = 1e-18);

        let c = w.innovation_covariance().unwrap();
        let e = w.estimate_model_error(&c, 0.0).unwrap();
        assert_abs_diff_eq!(e[(0, 0)], 0.0, epsilon = 1e-15);
    }
}
