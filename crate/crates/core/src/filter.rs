//! The multi-model consensus filter: per-model forecasts, fusion, measurement
//! update, feedback, and innovation-driven covariance adaptation.

use std::collections::VecDeque;
use std::sync::Arc;

use nalgebra::DMatrix;

use crate::ensemble::{adapt_sampling_cov, ensemble_statistics, generate_ensemble, propagate_ensemble, stream_seed};
use crate::error::{Error, Phase, Result};
use crate::fusion::{feedback, fuse_all, fusion_weights, measurement_update, InnovationWindow, MeasurementFrame, Transform};
use crate::koopman::{initial_lifted_belief, koopman_forecast, project_to_state, reanchor, KoopmanModel, LiftedBelief};
use crate::linalg::{pinv, psd_project, ControlVector, Covariance, ModelBelief};
use crate::models::Predictor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterSettings {
    pub window: usize,
    pub forgetting: f64,
    pub floor: f64,
    pub adaptive: bool,
    pub seed: u64,
}

#[derive(Debug, Clone)]
enum Propagation {
    Linearized {
        q_base: Covariance,
        correction: DMatrix<f64>,
    },
    Ensemble {
        sampling: Covariance,
        members: usize,
    },
    Lifted {
        model: Arc<KoopmanModel>,
        direct: Arc<dyn Predictor>,
        alpha: f64,
        belief: LiftedBelief,
        forecast: Option<LiftedBelief>,
    },
}

/// One model's state inside a [`Filter`].
#[derive(Debug, Clone)]
pub struct ModelSlot {
    name: String,
    predictor: Arc<dyn Predictor>,
    propagation: Propagation,
    analysis: ModelBelief,
    window: InnovationWindow,
    /// `H (P^f - N) H^T` per recorded innovation, `N` being the adapted part.
    baselines: VecDeque<DMatrix<f64>>,
}

impl ModelSlot {
    fn new(name: &str, predictor: Arc<dyn Predictor>, propagation: Propagation, prior: &ModelBelief) -> Self {
        ModelSlot {
            name: name.to_owned(),
            predictor,
            propagation,
            analysis: ModelBelief {
                model_id: name.to_owned(),
                ..prior.clone()
            },
            window: InnovationWindow::new(name, 1),
            baselines: VecDeque::new(),
        }
    }

    /// Jacobian propagation `P^f = F P F^T + Q`.
    pub fn linearized(name: &str, predictor: Arc<dyn Predictor>, q: Covariance, prior: &ModelBelief) -> Self {
        let n = q.dim();
        Self::new(
            name,
            predictor,
            Propagation::Linearized {
                q_base: q,
                correction: DMatrix::zeros(n, n),
            },
            prior,
        )
    }

    /// Ensemble propagation with sampling covariance `s`.
    pub fn ensemble(name: &str, predictor: Arc<dyn Predictor>, s: Covariance, members: usize, prior: &ModelBelief) -> Self {
        Self::new(name, predictor, Propagation::Ensemble { sampling: s, members }, prior)
    }

    /// Lifted-space Koopman propagation blended with `direct` predictions.
    pub fn lifted(
        name: &str,
        model: Arc<KoopmanModel>,
        direct: Arc<dyn Predictor>,
        alpha: f64,
        feature_var: f64,
        prior: &ModelBelief,
        floor: f64,
    ) -> Result<Self> {
        let belief = initial_lifted_belief(prior, &model, feature_var, floor)?;
        Ok(Self::new(
            name,
            model.clone(),
            Propagation::Lifted {
                model,
                direct,
                alpha,
                belief,
                forecast: None,
            },
            prior,
        ))
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn analysis(&self) -> &ModelBelief {
        &self.analysis
    }

    /// Current sampling covariance (ensemble) or total process noise (Jacobian).
    pub fn noise_covariance(&self) -> Option<DMatrix<f64>> {
        match &self.propagation {
            Propagation::Linearized { q_base, correction } => Some(q_base.matrix() + correction),
            Propagation::Ensemble { sampling, .. } => Some(sampling.matrix().clone()),
            Propagation::Lifted { .. } => None,
        }
    }

    fn forecast(&mut self, u: &ControlVector, seed: u64, floor: f64) -> Result<ModelBelief> {
        let x = &self.analysis.mean;
        let p = self.analysis.cov.matrix();
        match &mut self.propagation {
            Propagation::Linearized { q_base, correction } => {
                let mean = self.predictor.predict(x, u)?;
                let f = self.predictor.jacobian(x, u)?;
                let cov = &f * p * f.transpose() + q_base.matrix() + &*correction;
                ModelBelief::new(&self.name, mean, psd_project(&cov, floor)?)
            }
            Propagation::Ensemble { sampling, members } => {
                let spread = psd_project(&(p + sampling.matrix()), floor)?;
                let e = generate_ensemble(x, &spread, *members, seed)?;
                let e = propagate_ensemble(self.predictor.as_ref(), &e, u)?;
                ensemble_statistics(&e, &self.name, floor)
            }
            Propagation::Lifted {
                model,
                direct,
                alpha,
                belief,
                forecast,
            } => {
                let lf = koopman_forecast(belief, model, u, direct.as_ref(), *alpha, floor)?;
                let out = project_to_state(&lf, model, None, &self.name, floor)?;
                *forecast = Some(lf);
                Ok(out)
            }
        }
    }

    fn absorb(&mut self, analysis: ModelBelief, floor: f64) -> Result<()> {
        if let Propagation::Lifted {
            model, belief, forecast, ..
        } = &mut self.propagation
        {
            let lf = forecast.as_ref().ok_or(Error::Singular("lifted forecast missing"))?;
            *belief = reanchor(&analysis, lf, model, floor)?;
        }
        self.analysis = ModelBelief {
            model_id: self.name.clone(),
            ..analysis
        };
        Ok(())
    }

    fn record(&mut self, frame: &MeasurementFrame, forecast: &ModelBelief) -> Result<()> {
        let adapted = match &self.propagation {
            Propagation::Linearized { correction, .. } => correction.clone(),
            Propagation::Ensemble { sampling, .. } => sampling.matrix().clone(),
            Propagation::Lifted { .. } => return Ok(()),
        };
        if self.window.record_innovation(frame, forecast)? {
            let base = &frame.h * (forecast.cov.matrix() - adapted) * frame.h.transpose();
            self.baselines.push_back(base);
            while self.baselines.len() > self.window.capacity() {
                self.baselines.pop_front();
            }
        }
        Ok(())
    }

    /// Expected innovation covariance without the adapted noise term.
    fn expected_baseline(&self, r: &DMatrix<f64>) -> DMatrix<f64> {
        let mut mean = DMatrix::zeros(r.nrows(), r.ncols());
        for b in &self.baselines {
            mean += b;
        }
        r + mean / self.baselines.len() as f64
    }

    fn adapt(&mut self, frame: &MeasurementFrame, step: usize, s: &FilterSettings) -> Result<()> {
        if self.window.len() < 2 {
            return Ok(());
        }
        let baseline = self.expected_baseline(frame.r.matrix());
        match &mut self.propagation {
            Propagation::Ensemble { sampling, .. } => {
                let c = self.window.innovation_covariance()?;
                *sampling = adapt_sampling_cov(sampling, &c, &frame.h, &baseline, s.forgetting, s.floor)?;
            }
            Propagation::Linearized { correction, .. } => {
                let refresh = (s.window / 2).max(1);
                if step.is_multiple_of(refresh) {
                    let excess = self.window.estimate_model_error(&baseline, s.floor)?;
                    let hp = pinv(&frame.h);
                    *correction = &hp * excess.matrix() * hp.transpose();
                }
            }
            Propagation::Lifted { .. } => {}
        }
        Ok(())
    }
}

/// Everything produced by one filter step.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub forecasts: Vec<ModelBelief>,
    pub fused: ModelBelief,
    pub analysis: ModelBelief,
    /// `trace(W_m) / n` per model; sums to one.
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Filter {
    slots: Vec<ModelSlot>,
    transforms: Vec<Transform>,
    settings: FilterSettings,
    step: usize,
    violations: usize,
}

impl Filter {
    /// All models share the reference state space.
    pub fn new(mut slots: Vec<ModelSlot>, settings: FilterSettings) -> Result<Self> {
        if slots.is_empty() {
            return Err(Error::EmptyFusion);
        }
        let n = slots[0].analysis.dim();
        for s in &mut slots {
            s.window = InnovationWindow::new(s.name.clone(), settings.window);
        }
        Ok(Filter {
            transforms: vec![Transform::identity(n); slots.len()],
            slots,
            settings,
            step: 0,
            violations: 0,
        })
    }

    pub fn slots(&self) -> &[ModelSlot] {
        &self.slots
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    /// Covariances that failed the symmetry/PSD audit so far.
    pub fn covariance_violations(&self) -> usize {
        self.violations
    }

    fn audit(&mut self, cov: &Covariance) {
        if cov.validate().is_err() {
            self.violations += 1;
        }
    }

    /// Advance one step: forecast all models with `u` (the control applied
    /// since the previous sample), fuse, update with `frame`, feed back.
    pub fn step(&mut self, u: &ControlVector, frame: &MeasurementFrame) -> Result<StepOutput> {
        let k = self.step + 1;
        let floor = self.settings.floor;

        let mut forecasts = Vec::with_capacity(self.slots.len());
        for (i, slot) in self.slots.iter_mut().enumerate() {
            let seed = stream_seed(stream_seed(self.settings.seed, i as u64), k as u64);
            let f = slot.forecast(u, seed, floor).map_err(|e| {
                Error::Member {
                    index: i,
                    source: Box::new(e),
                }
                .at(Phase::Forecast, k)
            })?;
            forecasts.push(f);
        }
        for f in &forecasts {
            self.audit(&f.cov);
        }

        let fused = fuse_all(&forecasts, &self.transforms, floor).map_err(|e| e.at(Phase::Fusion, k))?;
        self.audit(&fused.cov);
        let n = fused.dim() as f64;
        let weights = fusion_weights(&fused, &forecasts, &self.transforms)
            .map_err(|e| e.at(Phase::Fusion, k))?
            .iter()
            .map(|w| w.trace() / n)
            .collect();

        if self.settings.adaptive {
            for (slot, f) in self.slots.iter_mut().zip(&forecasts) {
                slot.record(frame, f).map_err(|e| e.at(Phase::Calibration, k))?;
            }
        }

        let analysis = measurement_update(&fused, frame, floor).map_err(|e| e.at(Phase::MeasurementUpdate, k))?;
        self.audit(&analysis.cov);

        let beliefs = feedback(&analysis, &self.transforms, floor).map_err(|e| e.at(Phase::Feedback, k))?;
        for b in &beliefs {
            self.audit(&b.cov);
        }
        for (slot, b) in self.slots.iter_mut().zip(beliefs) {
            slot.absorb(b, floor).map_err(|e| e.at(Phase::Feedback, k))?;
        }

        if self.settings.adaptive {
            let settings = self.settings;
            for slot in &mut self.slots {
                slot.adapt(frame, k, &settings).map_err(|e| e.at(Phase::Calibration, k))?;
            }
        }

        self.step = k;
        Ok(StepOutput {
            forecasts,
            fused,
            analysis,
            weights,
        })
    }
}
