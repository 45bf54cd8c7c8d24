//! Weighted least squares state estimation over `z = H x + e` and the
//! residual-norm bad data detector (BDD).

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::grid::MeasurementMatrix;
use crate::stats;

#[derive(Debug, Error, PartialEq)]
pub enum EstimationError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("measurement standard deviation {index} is not positive: {value}")]
    NonpositiveStdDev { index: usize, value: f64 },
    #[error("gain matrix H^T D^-1 H is not positive definite")]
    SingularGain,
    #[error("need at least {required} samples, got {got}")]
    InsufficientSamples { required: usize, got: usize },
    #[error("quantile {0} must lie in (0, 1)")]
    BadQuantile(f64),
    #[error("BDD threshold must be >= 0, got {0}")]
    NegativeThreshold(f64),
}

/// Independent zero-mean Gaussian measurement noise, `D = diag(std^2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseModel {
    std_devs: Vec<f64>,
}

impl NoiseModel {
    pub fn new(std_devs: Vec<f64>) -> Result<Self, EstimationError> {
        for (index, &value) in std_devs.iter().enumerate() {
            if !(value > 0.0) || !value.is_finite() {
                return Err(EstimationError::NonpositiveStdDev { index, value });
            }
        }
        Ok(Self { std_devs })
    }

    pub fn uniform(m: usize, sigma: f64) -> Result<Self, EstimationError> {
        Self::new(vec![sigma; m])
    }

    pub fn std_devs(&self) -> &[f64] {
        &self.std_devs
    }

    pub fn len(&self) -> usize {
        self.std_devs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.std_devs.is_empty()
    }
}

/// WLS estimator with the gain `K = (H^T D^-1 H)^-1 H^T D^-1` cached.
#[derive(Debug, Clone)]
pub struct WlsEstimator {
    gain: DMatrix<f64>,
    measurement: MeasurementMatrix,
    noise: NoiseModel,
}

impl WlsEstimator {
    pub fn new(measurement: MeasurementMatrix, noise: NoiseModel) -> Result<Self, EstimationError> {
        let m = measurement.n_measurements();
        if noise.len() != m {
            return Err(EstimationError::DimensionMismatch {
                expected: m,
                got: noise.len(),
            });
        }
        let h = &measurement.values;
        // H^T D^-1
        let mut ht_dinv = h.transpose();
        for (j, s) in noise.std_devs().iter().enumerate() {
            let w = 1.0 / (s * s);
            ht_dinv.column_mut(j).scale_mut(w);
        }
        let normal = &ht_dinv * h;
        let chol = normal.cholesky().ok_or(EstimationError::SingularGain)?;
        let gain = chol.solve(&ht_dinv);
        Ok(Self {
            gain,
            measurement,
            noise,
        })
    }

    pub fn gain(&self) -> &DMatrix<f64> {
        &self.gain
    }

    pub fn measurement(&self) -> &MeasurementMatrix {
        &self.measurement
    }

    pub fn noise(&self) -> &NoiseModel {
        &self.noise
    }

    pub fn n_measurements(&self) -> usize {
        self.measurement.n_measurements()
    }

    fn check(&self, z: &DVector<f64>) -> Result<(), EstimationError> {
        let m = self.n_measurements();
        if z.len() != m {
            return Err(EstimationError::DimensionMismatch {
                expected: m,
                got: z.len(),
            });
        }
        Ok(())
    }

    /// `x_hat = K z`.
    pub fn estimate(&self, z: &DVector<f64>) -> Result<DVector<f64>, EstimationError> {
        self.check(z)?;
        Ok(&self.gain * z)
    }

    /// `r = z - H x_hat`.
    pub fn residual(&self, z: &DVector<f64>) -> Result<DVector<f64>, EstimationError> {
        let x_hat = self.estimate(z)?;
        Ok(z - &self.measurement.values * x_hat)
    }

    pub fn residual_norm(&self, z: &DVector<f64>) -> Result<f64, EstimationError> {
        Ok(self.residual(z)?.norm())
    }
}

pub fn wls_estimate(est: &WlsEstimator, z: &DVector<f64>) -> Result<DVector<f64>, EstimationError> {
    est.estimate(z)
}

pub fn residual(est: &WlsEstimator, z: &DVector<f64>) -> Result<DVector<f64>, EstimationError> {
    est.residual(z)
}

/// Alarm when the 2-norm of the WLS residual exceeds `threshold`.
#[derive(Debug, Clone)]
pub struct BddDetector {
    threshold: f64,
    estimator: WlsEstimator,
}

impl BddDetector {
    pub fn new(estimator: WlsEstimator, threshold: f64) -> Result<Self, EstimationError> {
        if !(threshold >= 0.0) {
            return Err(EstimationError::NegativeThreshold(threshold));
        }
        Ok(Self {
            threshold,
            estimator,
        })
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn estimator(&self) -> &WlsEstimator {
        &self.estimator
    }

    pub fn detect(&self, z: &DVector<f64>) -> Result<bool, EstimationError> {
        Ok(self.estimator.residual_norm(z)? > self.threshold)
    }
}

pub fn bdd_detect(det: &BddDetector, z: &DVector<f64>) -> Result<bool, EstimationError> {
    det.detect(z)
}

pub const MIN_CALIBRATION_SAMPLES: usize = 100;

/// Nearest-rank `quantile` of the residual norms of normal measurements.
pub fn calibrate_bdd_threshold(
    est: &WlsEstimator,
    normal_measurements: &[DVector<f64>],
    quantile: f64,
) -> Result<f64, EstimationError> {
    if !(quantile > 0.0 && quantile < 1.0) {
        return Err(EstimationError::BadQuantile(quantile));
    }
    if normal_measurements.len() < MIN_CALIBRATION_SAMPLES {
        return Err(EstimationError::InsufficientSamples {
            required: MIN_CALIBRATION_SAMPLES,
            got: normal_measurements.len(),
        });
    }
    let norms = normal_measurements
        .iter()
        .map(|z| est.residual_norm(z))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(threshold_from_norms(&norms, quantile))
}

pub(crate) fn threshold_from_norms(norms: &[f64], quantile: f64) -> f64 {
    stats::nearest_rank_quantile(norms, quantile).unwrap_or(0.0)
}
