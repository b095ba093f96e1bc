//! Residual dynamics model: a linear map from the commanded wrench and the
//! gravity direction in the body frame to a residual wrench, trained offline
//! by ridge regression on residuals reconstructed from IMU data.

use crate::dynamics::{InertialParams, Wrench};
use crate::so3::UnitQuaternion;
use nalgebra::{DMatrix, DVector, SVector, Vector3};
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

pub const N_FEATURES: usize = 9;
/// Features plus the bias column.
pub const N_COLUMNS: usize = N_FEATURES + 1;
pub const MIN_LOG_RATE: f64 = 100.0;
pub const DEFAULT_LAMBDA: f64 = 1e5;
pub const SMOOTHING_CUTOFF: f64 = 20.0;

pub type FeatureVector = SVector<f64, N_FEATURES>;

#[derive(Debug, Error)]
pub enum ResidualError {
    #[error("normal equations are singular; use λ > 0 or a richer data set")]
    SingularNormalEquations,
    #[error("log rate {rate:.1} Hz is below {MIN_LOG_RATE} Hz")]
    RateTooLow { rate: f64 },
    #[error("sampling interval at sample {index} deviates from the nominal period")]
    NonUniformSampling { index: usize },
    #[error("need more than {needed} samples, got {got}")]
    NotEnoughSamples { needed: usize, got: usize },
    #[error("regularization must be finite and non-negative, got {0}")]
    InvalidLambda(f64),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// `(w_a, third row of R_B)`.
pub fn build_features(w: &Wrench, q: &UnitQuaternion) -> FeatureVector {
    let r = q.to_rotation_matrix();
    let row = r.matrix().row(2);
    let mut x = FeatureVector::zeros();
    x.fixed_rows_mut::<6>(0).copy_from(&w.to_vector());
    x[6] = row[0];
    x[7] = row[1];
    x[8] = row[2];
    x
}

/// One IMU-rate sample. `accel` is the bias-corrected specific force in the
/// body frame, so `m·accel` is the total non-gravitational force.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainingSample {
    pub time: f64,
    pub wrench: Wrench,
    pub attitude: UnitQuaternion,
    pub accel: Vector3<f64>,
    pub gyro: Vector3<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SampleRecord {
    t: f64,
    fx: f64,
    fy: f64,
    fz: f64,
    tx: f64,
    ty: f64,
    tz: f64,
    qw: f64,
    qx: f64,
    qy: f64,
    qz: f64,
    ax: f64,
    ay: f64,
    az: f64,
    gx: f64,
    gy: f64,
    gz: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingLog {
    pub samples: Vec<TrainingSample>,
}

impl TrainingLog {
    pub fn write_csv(&self, path: &Path) -> Result<(), ResidualError> {
        let mut w = csv::Writer::from_path(path)?;
        for s in &self.samples {
            let q = s.attitude.to_array();
            w.serialize(SampleRecord {
                t: s.time,
                fx: s.wrench.force.x,
                fy: s.wrench.force.y,
                fz: s.wrench.force.z,
                tx: s.wrench.torque.x,
                ty: s.wrench.torque.y,
                tz: s.wrench.torque.z,
                qw: q[0],
                qx: q[1],
                qy: q[2],
                qz: q[3],
                ax: s.accel.x,
                ay: s.accel.y,
                az: s.accel.z,
                gx: s.gyro.x,
                gy: s.gyro.y,
                gz: s.gyro.z,
            })?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self, ResidualError> {
        let mut r = csv::Reader::from_path(path)?;
        let mut samples = Vec::new();
        for rec in r.deserialize() {
            let s: SampleRecord = rec?;
            samples.push(TrainingSample {
                time: s.t,
                wrench: Wrench::new(Vector3::new(s.fx, s.fy, s.fz), Vector3::new(s.tx, s.ty, s.tz)),
                attitude: UnitQuaternion::from_slice(&[s.qw, s.qx, s.qy, s.qz]),
                accel: Vector3::new(s.ax, s.ay, s.az),
                gyro: Vector3::new(s.gx, s.gy, s.gz),
            });
        }
        Ok(Self { samples })
    }

    /// Sample period, after checking the log is uniform and fast enough.
    pub fn period(&self) -> Result<f64, ResidualError> {
        let n = self.samples.len();
        if n < 3 {
            return Err(ResidualError::NotEnoughSamples { needed: 2, got: n });
        }
        let dt = (self.samples[n - 1].time - self.samples[0].time) / (n - 1) as f64;
        for i in 1..n {
            let step = self.samples[i].time - self.samples[i - 1].time;
            if !(step > 0.0) || (step - dt).abs() > 1e-6 * dt.max(1e-3) {
                return Err(ResidualError::NonUniformSampling { index: i });
            }
        }
        let rate = 1.0 / dt;
        if rate < MIN_LOG_RATE - 1e-9 {
            return Err(ResidualError::RateTooLow { rate });
        }
        Ok(dt)
    }
}

/// Second-order Butterworth low-pass as a transposed direct-form II biquad.
#[derive(Debug, Clone, Copy)]
struct Butterworth2 {
    b: [f64; 3],
    a: [f64; 2],
}

impl Butterworth2 {
    fn new(cutoff: f64, rate: f64) -> Self {
        let k = (std::f64::consts::PI * cutoff / rate).tan();
        let s2 = std::f64::consts::SQRT_2;
        let norm = 1.0 / (1.0 + s2 * k + k * k);
        let b0 = k * k * norm;
        Self {
            b: [b0, 2.0 * b0, b0],
            a: [2.0 * (k * k - 1.0) * norm, (1.0 - s2 * k + k * k) * norm],
        }
    }

    /// Filters in place, starting from the steady state of the first sample.
    fn run(&self, x: &mut [f64]) {
        let Some(&x0) = x.first() else { return };
        let mut z2 = (self.b[2] - self.a[1]) * x0;
        let mut z1 = (self.b[1] - self.a[0]) * x0 + z2;
        for v in x.iter_mut() {
            let input = *v;
            let y = self.b[0] * input + z1;
            z1 = self.b[1] * input - self.a[0] * y + z2;
            z2 = self.b[2] * input - self.a[1] * y;
            *v = y;
        }
    }

    fn filtfilt(&self, x: &mut [f64]) {
        self.run(x);
        x.reverse();
        self.run(x);
        x.reverse();
    }
}

/// Central-difference derivative with one-sided ends.
fn differentiate(x: &[f64], dt: f64) -> Vec<f64> {
    let n = x.len();
    (0..n)
        .map(|i| match i {
            0 => (x[1] - x[0]) / dt,
            i if i == n - 1 => (x[n - 1] - x[n - 2]) / dt,
            i => (x[i + 1] - x[i - 1]) / (2.0 * dt),
        })
        .collect()
}

/// Smoothed angular acceleration from the gyro channel.
pub fn angular_acceleration(log: &TrainingLog) -> Result<Vec<Vector3<f64>>, ResidualError> {
    let dt = log.period()?;
    let filter = Butterworth2::new(SMOOTHING_CUTOFF, 1.0 / dt);
    let mut axes = Vec::with_capacity(3);
    for k in 0..3 {
        let w: Vec<f64> = log.samples.iter().map(|s| s.gyro[k]).collect();
        let mut d = differentiate(&w, dt);
        filter.filtfilt(&mut d);
        axes.push(d);
    }
    Ok((0..log.samples.len())
        .map(|i| Vector3::new(axes[0][i], axes[1][i], axes[2][i]))
        .collect())
}

/// Measured residual per sample: `(m·a − f_a, J·ω̇ + ω × Jω − τ_a)`.
pub fn compute_residuals(log: &TrainingLog, params: &InertialParams) -> Result<Vec<Wrench>, ResidualError> {
    let wdot = angular_acceleration(log)?;
    let j = params.inertia;
    Ok(log
        .samples
        .iter()
        .zip(wdot)
        .map(|(s, wd)| {
            let w = s.gyro;
            Wrench::new(
                s.accel * params.mass - s.wrench.force,
                j * wd + w.cross(&(j * w)) - s.wrench.torque,
            )
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualModel {
    /// `6 × (n_f + 1)`, bias in the last column.
    pub coefficients: DMatrix<f64>,
    pub lambda: f64,
    pub samples: usize,
    pub training_rmse: [f64; 6],
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    lambda: f64,
    samples: usize,
    training_rmse: [f64; 6],
    /// Row-major.
    coefficients: Vec<Vec<f64>>,
}

impl ResidualModel {
    pub fn zero() -> Self {
        Self {
            coefficients: DMatrix::zeros(6, N_COLUMNS),
            lambda: 0.0,
            samples: 0,
            training_rmse: [0.0; 6],
        }
    }

    pub fn predict(&self, features: &[f64]) -> Result<Wrench, ResidualError> {
        if features.len() + 1 != self.coefficients.ncols() {
            return Err(ResidualError::Dimension(format!(
                "model has {} feature columns, got {} features",
                self.coefficients.ncols() - 1,
                features.len()
            )));
        }
        let mut x = DVector::from_element(features.len() + 1, 1.0);
        x.rows_mut(0, features.len()).copy_from_slice(features);
        let y = &self.coefficients * x;
        Ok(Wrench::from_slice(y.as_slice()))
    }

    pub fn to_json(&self) -> Result<String, ResidualError> {
        let rows = self
            .coefficients
            .row_iter()
            .map(|r| r.iter().copied().collect())
            .collect();
        Ok(serde_json::to_string_pretty(&ModelFile {
            lambda: self.lambda,
            samples: self.samples,
            training_rmse: self.training_rmse,
            coefficients: rows,
        })?)
    }

    pub fn from_json(s: &str) -> Result<Self, ResidualError> {
        let f: ModelFile = serde_json::from_str(s)?;
        if f.coefficients.len() != 6 {
            return Err(ResidualError::Dimension(format!("expected 6 rows, got {}", f.coefficients.len())));
        }
        let cols = f.coefficients[0].len();
        if cols < 1 || f.coefficients.iter().any(|r| r.len() != cols) {
            return Err(ResidualError::Dimension("ragged coefficient rows".into()));
        }
        let flat: Vec<f64> = f.coefficients.concat();
        if flat.iter().any(|v| !v.is_finite()) {
            return Err(ResidualError::Dimension("non-finite coefficient".into()));
        }
        Ok(Self {
            coefficients: DMatrix::from_row_slice(6, cols, &flat),
            lambda: f.lambda,
            samples: f.samples,
            training_rmse: f.training_rmse,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), ResidualError> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ResidualError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

pub fn predict_residual(model: &ResidualModel, features: &FeatureVector) -> Result<Wrench, ResidualError> {
    model.predict(features.as_slice())
}

/// Ridge regression of each output column of `y` on the columns of `x`
/// (the caller appends the bias column). Returns `C` with one row per output.
pub fn ridge_solve(x: &DMatrix<f64>, y: &DMatrix<f64>, lambda: f64) -> Result<DMatrix<f64>, ResidualError> {
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(ResidualError::InvalidLambda(lambda));
    }
    if x.nrows() != y.nrows() {
        return Err(ResidualError::Dimension(format!("X has {} rows, Y has {}", x.nrows(), y.nrows())));
    }
    if x.nrows() < x.ncols() {
        return Err(ResidualError::NotEnoughSamples {
            needed: x.ncols(),
            got: x.nrows(),
        });
    }
    let xtx = x.transpose() * x;
    let normal = &xtx + DMatrix::identity(x.ncols(), x.ncols()) * lambda;
    let scale = normal.diagonal().amax().max(f64::MIN_POSITIVE);
    let chol = normal.cholesky().ok_or(ResidualError::SingularNormalEquations)?;
    let l = chol.l_dirty();
    let min_pivot = (0..x.ncols()).map(|i| l[(i, i)] * l[(i, i)]).fold(f64::INFINITY, f64::min);
    if min_pivot < 1e-13 * scale {
        return Err(ResidualError::SingularNormalEquations);
    }
    Ok(chol.solve(&(x.transpose() * y)).transpose())
}

/// Per-axis root-mean-square of `Y − X Cᵀ`.
pub fn per_axis_rmse(c: &DMatrix<f64>, x: &DMatrix<f64>, y: &DMatrix<f64>) -> Vec<f64> {
    let e = y - x * c.transpose();
    let n = e.nrows().max(1) as f64;
    e.column_iter().map(|col| (col.norm_squared() / n).sqrt()).collect()
}

/// Design matrix with the bias column appended.
pub fn design_matrix(features: &[FeatureVector]) -> DMatrix<f64> {
    let mut x = DMatrix::from_element(features.len(), N_COLUMNS, 1.0);
    for (i, f) in features.iter().enumerate() {
        for k in 0..N_FEATURES {
            x[(i, k)] = f[k];
        }
    }
    x
}

pub fn target_matrix(residuals: &[Wrench]) -> DMatrix<f64> {
    let mut y = DMatrix::zeros(residuals.len(), 6);
    for (i, w) in residuals.iter().enumerate() {
        y.row_mut(i).copy_from(&w.to_vector().transpose());
    }
    y
}

/// Fits the residual model on a design matrix that already includes the bias column.
pub fn ridge_fit(x: &DMatrix<f64>, y: &DMatrix<f64>, lambda: f64) -> Result<ResidualModel, ResidualError> {
    if y.ncols() != 6 {
        return Err(ResidualError::Dimension(format!("Y must have 6 columns, got {}", y.ncols())));
    }
    if x.nrows() <= x.ncols() {
        return Err(ResidualError::NotEnoughSamples {
            needed: x.ncols(),
            got: x.nrows(),
        });
    }
    let c = ridge_solve(x, y, lambda)?;
    let rmse = per_axis_rmse(&c, x, y);
    Ok(ResidualModel {
        training_rmse: [rmse[0], rmse[1], rmse[2], rmse[3], rmse[4], rmse[5]],
        coefficients: c,
        lambda,
        samples: x.nrows(),
    })
}

/// Force and torque error summary in the layout of a raw-vs-model table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GroupError {
    pub force_rmse: f64,
    pub force_std: f64,
    pub torque_rmse: f64,
    pub torque_std: f64,
}

/// RMSE of the per-sample error norm and its standard deviation, per group.
pub fn training_rmse(model: &ResidualModel, x: &DMatrix<f64>, y: &DMatrix<f64>) -> GroupError {
    group_error(&(y - x * model.coefficients.transpose()))
}

pub fn group_error(e: &DMatrix<f64>) -> GroupError {
    let stats = |offset: usize| {
        let norms: Vec<f64> = e.row_iter().map(|r| r.columns(offset, 3).norm()).collect();
        let n = norms.len().max(1) as f64;
        let rmse = (norms.iter().map(|v| v * v).sum::<f64>() / n).sqrt();
        let mean = norms.iter().sum::<f64>() / n;
        let std = (norms.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        (rmse, std)
    };
    let (force_rmse, force_std) = stats(0);
    let (torque_rmse, torque_std) = stats(3);
    GroupError {
        force_rmse,
        force_std,
        torque_rmse,
        torque_std,
    }
}

/// Features and measured residuals from a log, then a ridge fit.
pub fn fit_from_log(log: &TrainingLog, params: &InertialParams, lambda: f64) -> Result<ResidualModel, ResidualError> {
    let residuals = compute_residuals(log, params)?;
    let features: Vec<FeatureVector> = log
        .samples
        .iter()
        .map(|s| build_features(&s.wrench, &s.attitude))
        .collect();
    ridge_fit(&design_matrix(&features), &target_matrix(&residuals), lambda)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hover_features() {
        let w = Wrench::new(Vector3::new(0.0, 0.0, 42.77), Vector3::zeros());
        let f = build_features(&w, &UnitQuaternion::identity());
        let expected = [0.0, 0.0, 42.77, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0];
        assert_eq!(f.as_slice(), &expected);
        let f = build_features(&w, &UnitQuaternion::from_euler_zyx(std::f64::consts::FRAC_PI_2, 0.0, 0.0));
        assert!((f[6]).abs() < 1e-15 && (f[7] - 1.0).abs() < 1e-15 && f[8].abs() < 1e-15);
    }

    #[test]
    fn features_follow_euler_form() {
        let (roll, pitch) = (0.3, -0.5);
        let f = build_features(&Wrench::zero(), &UnitQuaternion::from_euler_zyx(roll, pitch, 1.2));
        assert!((f[6] + pitch.sin()).abs() < 1e-12);
        assert!((f[7] - pitch.cos() * roll.sin()).abs() < 1e-12);
        assert!((f[8] - pitch.cos() * roll.cos()).abs() < 1e-12);
    }

    #[test]
    fn square_system_interpolates() {
        let x = DMatrix::from_fn(10, 10, |i, j| if i == j { 2.0 } else { 0.1 * (i + 2 * j) as f64 / 10.0 });
        let y = DMatrix::from_fn(10, 6, |i, j| (i as f64 - j as f64) * 0.3);
        let c = ridge_solve(&x, &y, 0.0).unwrap();
        assert!((x * c.transpose() - y).amax() < 1e-12);
    }

    #[test]
    fn huge_lambda_shrinks_to_zero() {
        let x = DMatrix::from_fn(50, 10, |i, j| ((i * 7 + j * 3) % 11) as f64 / 11.0);
        let y = DMatrix::from_fn(50, 6, |i, j| ((i + j) % 5) as f64);
        let m = ridge_fit(&x, &y, 1e12).unwrap();
        assert!(m.coefficients.amax() < 1e-6);
    }

    #[test]
    fn rank_deficient_without_regularization_fails() {
        let mut x = DMatrix::from_fn(40, 10, |i, j| ((i * 5 + j * 3) % 13) as f64);
        let col = x.column(0).into_owned();
        x.set_column(1, &(col * 2.0));
        let y = DMatrix::zeros(40, 6);
        assert!(matches!(ridge_solve(&x, &y, 0.0), Err(ResidualError::SingularNormalEquations)));
        assert!(ridge_solve(&x, &y, 1.0).is_ok());
    }

    #[test]
    fn bias_only_model_is_constant() {
        let mut m = ResidualModel::zero();
        m.coefficients[(2, N_FEATURES)] = -2.0;
        for k in 0..3 {
            let f = FeatureVector::from_element(k as f64 * 3.7);
            let w = predict_residual(&m, &f).unwrap();
            assert_eq!(w.force, Vector3::new(0.0, 0.0, -2.0));
            assert_eq!(w.torque, Vector3::zeros());
        }
        assert_eq!(predict_residual(&ResidualModel::zero(), &FeatureVector::from_element(1.0)).unwrap(), Wrench::zero());
    }

    #[test]
    fn json_round_trip_is_row_major() {
        let mut m = ResidualModel::zero();
        m.coefficients[(0, 1)] = 3.0;
        m.lambda = 1e5;
        let s = m.to_json().unwrap();
        let v: serde_json::Value = serde_json::from_str(&s).unwrap();
        assert_eq!(v["coefficients"][0][1], 3.0);
        assert_eq!(ResidualModel::from_json(&s).unwrap(), m);
    }

    #[test]
    fn filter_passes_constants_and_damps_high_frequencies() {
        let f = Butterworth2::new(20.0, 1000.0);
        let mut c = vec![1.5; 200];
        f.filtfilt(&mut c);
        assert!(c.iter().all(|v| (v - 1.5).abs() < 1e-12));
        let mut hf: Vec<f64> = (0..2000).map(|i| (i as f64 * 0.5 * std::f64::consts::PI).sin()).collect();
        f.filtfilt(&mut hf);
        assert!(hf[500..1500].iter().all(|v| v.abs() < 1e-3));
    }

    #[test]
    fn sampling_checks() {
        let sample = |t: f64| TrainingSample {
            time: t,
            wrench: Wrench::zero(),
            attitude: UnitQuaternion::identity(),
            accel: Vector3::zeros(),
            gyro: Vector3::zeros(),
        };
        let slow = TrainingLog {
            samples: (0..10).map(|i| sample(i as f64 * 0.02)).collect(),
        };
        assert!(matches!(slow.period(), Err(ResidualError::RateTooLow { .. })));
        let mut uneven = TrainingLog {
            samples: (0..10).map(|i| sample(i as f64 * 0.005)).collect(),
        };
        uneven.samples[4].time += 0.001;
        assert!(matches!(uneven.period(), Err(ResidualError::NonUniformSampling { .. })));
    }

    proptest! {
        #[test]
        fn prediction_is_affine(a in -2.0f64..2.0, b in -2.0f64..2.0, seed in 0u64..1000) {
            let c = DMatrix::from_fn(6, N_COLUMNS, |i, j| (((i * 31 + j * 17) as u64 + seed) % 23) as f64 - 11.0);
            let m = ResidualModel { coefficients: c, ..ResidualModel::zero() };
            let x1 = FeatureVector::from_fn(|i, _| i as f64 * 0.3 - 1.0);
            let x2 = FeatureVector::from_fn(|i, _| (i as f64).sin());
            // the bias enters with weight a + b in the combination
            let lhs = m.predict((x1 * a + x2 * b).as_slice()).unwrap().to_vector();
            let p1 = m.predict(x1.as_slice()).unwrap().to_vector();
            let p2 = m.predict(x2.as_slice()).unwrap().to_vector();
            let bias = m.coefficients.column(N_FEATURES).into_owned();
            let rhs = p1 * a + p2 * b + bias * (1.0 - a - b);
            prop_assert!((lhs - rhs).amax() < 1e-9);
        }
    }
}
