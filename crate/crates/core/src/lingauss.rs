//! Linear-Gaussian building blocks: the box motion and sensor models, Kalman
//! prediction and correction, the dimensionless association probability and
//! the Mahalanobis distance used for merging.
//!
//! The state is `[cx, cy, vx, vy, w, h]` (pixels and pixels per frame
//! period) and a measurement is `[cx, cy, w, h]`.

use nalgebra::{Cholesky, SMatrix, SVector, U4, U6};

use crate::error::{HispError, Result};

pub type StateVector = SVector<f64, 6>;
pub type StateMatrix = SMatrix<f64, 6, 6>;
pub type MeasVector = SVector<f64, 4>;
pub type MeasMatrix = SMatrix<f64, 4, 4>;
pub type ObservationMatrix = SMatrix<f64, 4, 6>;

/// Gaussian single-object density.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianState {
    pub mean: StateVector,
    pub cov: StateMatrix,
}

impl GaussianState {
    pub fn new(mean: StateVector, cov: StateMatrix) -> Self {
        Self { mean, cov }
    }

    /// Checks finiteness, symmetry and positive definiteness.
    pub fn validate(&self) -> Result<()> {
        if !self.mean.iter().all(|v| v.is_finite()) || !self.cov.iter().all(|v| v.is_finite()) {
            return Err(HispError::numerical("non-finite gaussian state"));
        }
        if (0..6).any(|i| self.cov[(i, i)] <= 0.0) {
            return Err(HispError::numerical("non-positive covariance diagonal"));
        }
        if asymmetry(&self.cov) > 1e-9 * self.cov.amax().max(f64::MIN_POSITIVE) {
            return Err(HispError::numerical("asymmetric covariance"));
        }
        if Cholesky::new(self.cov).is_none() {
            return Err(HispError::numerical("covariance is not positive definite"));
        }
        Ok(())
    }

    /// Box part of the mean, `[cx, cy, w, h]`.
    pub fn box_estimate(&self) -> MeasVector {
        MeasVector::new(self.mean[0], self.mean[1], self.mean[4], self.mean[5])
    }

    fn is_finite(&self) -> bool {
        self.mean
            .iter()
            .chain(self.cov.iter())
            .all(|v| v.is_finite())
    }
}

/// Bounding-box measurement `[cx, cy, w, h]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeasurementVector(pub MeasVector);

impl MeasurementVector {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        let z = MeasVector::new(cx, cy, w, h);
        if !z.iter().all(|v| v.is_finite()) || w <= 0.0 || h <= 0.0 {
            return Err(HispError::numerical(format!("invalid measurement {z:?}")));
        }
        Ok(Self(z))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MotionModel {
    pub transition: StateMatrix,
    pub process_noise: StateMatrix,
    /// Probability that an object present at the previous frame is still present.
    pub survival_prob: f64,
    pub dt: f64,
}

impl MotionModel {
    /// Constant-velocity box model with a random-walk on the box size.
    pub fn constant_velocity(dt: f64, sigma_v: f64, survival_prob: f64) -> Self {
        let mut f = StateMatrix::identity();
        f[(0, 2)] = dt;
        f[(1, 3)] = dt;

        let q = sigma_v * sigma_v;
        let mut noise = StateMatrix::zeros();
        for i in 0..2 {
            noise[(i, i)] = q * dt.powi(4) / 4.0;
            noise[(i, i + 2)] = q * dt.powi(3) / 2.0;
            noise[(i + 2, i)] = q * dt.powi(3) / 2.0;
            noise[(i + 2, i + 2)] = q * dt * dt;
            noise[(i + 4, i + 4)] = q;
        }
        Self {
            transition: f,
            process_noise: noise,
            survival_prob,
            dt,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.survival_prob > 0.0 && self.survival_prob <= 1.0) {
            return Err(HispError::Config(format!(
                "survival probability {} outside (0, 1]",
                self.survival_prob
            )));
        }
        if asymmetry(&self.process_noise) > 1e-9 * self.process_noise.amax().max(1.0) {
            return Err(HispError::Config("process noise is not symmetric".into()));
        }
        let eig = self.process_noise.symmetric_eigenvalues();
        if eig
            .iter()
            .any(|&e| e < -1e-9 * self.process_noise.amax().max(1.0))
        {
            return Err(HispError::Config("process noise is not PSD".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensorModel {
    pub observation: ObservationMatrix,
    pub noise: MeasMatrix,
    pub detection_prob: f64,
    /// Clutter probability per pixel, constant over the frame.
    pub clutter_density: f64,
    pub frame_width: f64,
    pub frame_height: f64,
}

impl SensorModel {
    /// Box sensor observing the centre and size with isotropic noise.
    pub fn box_sensor(
        sigma_r: f64,
        detection_prob: f64,
        clutter_mean: f64,
        frame_width: f64,
        frame_height: f64,
    ) -> Self {
        let mut h = ObservationMatrix::zeros();
        h[(0, 0)] = 1.0;
        h[(1, 1)] = 1.0;
        h[(2, 4)] = 1.0;
        h[(3, 5)] = 1.0;
        Self {
            observation: h,
            noise: MeasMatrix::identity() * (sigma_r * sigma_r),
            detection_prob,
            clutter_density: clutter_mean / (frame_width * frame_height),
            frame_width,
            frame_height,
        }
    }

    pub fn frame_area(&self) -> f64 {
        self.frame_width * self.frame_height
    }

    pub fn validate(&self, motion: &MotionModel) -> Result<()> {
        if !(self.detection_prob > 0.0 && self.detection_prob < 1.0) {
            return Err(HispError::Config(format!(
                "detection probability {} outside (0, 1)",
                self.detection_prob
            )));
        }
        if !(0.0..1.0).contains(&self.clutter_density) {
            return Err(HispError::Config(format!(
                "clutter density {} outside [0, 1)",
                self.clutter_density
            )));
        }
        if self.detection_prob >= motion.survival_prob {
            return Err(HispError::Config(format!(
                "detection probability {} must be below the survival probability {}",
                self.detection_prob, motion.survival_prob
            )));
        }
        if Cholesky::new(self.noise).is_none() {
            return Err(HispError::Config(
                "measurement noise is not positive definite".into(),
            ));
        }
        Ok(())
    }
}

fn asymmetry<const N: usize>(m: &SMatrix<f64, N, N>) -> f64 {
    (m - m.transpose()).amax()
}

fn symmetrize<const N: usize>(m: SMatrix<f64, N, N>) -> SMatrix<f64, N, N> {
    (m + m.transpose()) * 0.5
}

fn log_det_chol<const N: usize>(chol: &Cholesky<f64, nalgebra::Const<N>>) -> f64 {
    let l = chol.l_dirty();
    2.0 * (0..N).map(|i| l[(i, i)].ln()).sum::<f64>()
}

pub fn kf_predict(state: &GaussianState, model: &MotionModel) -> Result<GaussianState> {
    let f = &model.transition;
    let out = GaussianState {
        mean: f * state.mean,
        cov: symmetrize(f * state.cov * f.transpose() + model.process_noise),
    };
    if !out.is_finite() {
        return Err(HispError::numerical(
            "kf_predict produced non-finite values",
        ));
    }
    Ok(out)
}

/// Innovation of a measurement against a predicted state.
#[derive(Debug, Clone)]
pub struct Innovation {
    /// `H m - z`
    pub residual: MeasVector,
    pub cov: MeasMatrix,
    chol: Cholesky<f64, U4>,
}

impl Innovation {
    pub fn new(state: &GaussianState, z: &MeasurementVector, model: &SensorModel) -> Result<Self> {
        let h = &model.observation;
        let cov = symmetrize(h * state.cov * h.transpose() + model.noise);
        let chol = Cholesky::new(cov)
            .ok_or_else(|| HispError::numerical("singular innovation covariance"))?;
        Ok(Self {
            residual: h * state.mean - z.0,
            cov,
            chol,
        })
    }

    /// Squared Mahalanobis norm of the residual.
    pub fn distance_sq(&self) -> f64 {
        let y = self.chol.solve(&self.residual);
        self.residual.dot(&y)
    }

    pub fn log_det(&self) -> f64 {
        log_det_chol(&self.chol)
    }
}

/// Kalman correction in Joseph form. Returns the posterior and the innovation covariance.
pub fn kf_update(
    state: &GaussianState,
    z: &MeasurementVector,
    model: &SensorModel,
) -> Result<(GaussianState, MeasMatrix)> {
    let innov = Innovation::new(state, z, model)?;
    Ok((correct(state, &innov, model)?, innov.cov))
}

pub(crate) fn correct(
    state: &GaussianState,
    innov: &Innovation,
    model: &SensorModel,
) -> Result<GaussianState> {
    let h = &model.observation;
    // K = P Hᵀ S⁻¹, obtained as (S⁻¹ H P)ᵀ
    let gain: SMatrix<f64, 6, 4> = innov.chol.solve(&(h * state.cov)).transpose();
    let mean = state.mean - gain * innov.residual;
    let a = StateMatrix::identity() - gain * h;
    let cov = symmetrize(a * state.cov * a.transpose() + gain * model.noise * gain.transpose());
    let out = GaussianState { mean, cov };
    if !out.is_finite() {
        return Err(HispError::numerical("kf_update produced non-finite values"));
    }
    Ok(out)
}

/// `g · sqrt(|R|/|S|) · exp(-½ νᵀ S⁻¹ ν)` with `ν = H m − z`; always in `[0, 1]`.
pub fn association_probability(
    state: &GaussianState,
    z: &MeasurementVector,
    model: &SensorModel,
    appearance_lik: f64,
) -> Result<f64> {
    let innov = Innovation::new(state, z, model)?;
    association_from_innovation(&innov, model, appearance_lik)
}

pub(crate) fn association_from_innovation(
    innov: &Innovation,
    model: &SensorModel,
    appearance_lik: f64,
) -> Result<f64> {
    let r_chol = Cholesky::<f64, U4>::new(model.noise)
        .ok_or_else(|| HispError::numerical("measurement noise not positive definite"))?;
    let log_ratio = 0.5 * (log_det_chol(&r_chol) - innov.log_det());
    let p = appearance_lik * (log_ratio - 0.5 * innov.distance_sq()).exp();
    if !p.is_finite() {
        return Err(HispError::numerical(
            "association probability is not finite",
        ));
    }
    Ok(p.min(appearance_lik))
}

/// Mahalanobis distance between two densities under the pooled covariance `½(Pa + Pb)`.
pub fn mahalanobis(a: &GaussianState, b: &GaussianState) -> Result<f64> {
    let pooled = symmetrize((a.cov + b.cov) * 0.5);
    let chol = Cholesky::<f64, U6>::new(pooled)
        .ok_or_else(|| HispError::numerical("singular pooled covariance"))?;
    let d = a.mean - b.mean;
    Ok(d.dot(&chol.solve(&d)).max(0.0).sqrt())
}
