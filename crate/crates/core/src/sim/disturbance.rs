//! Ground-truth residual wrench acting on the plant.

use crate::dynamics::Wrench;
use crate::residual::{build_features, ResidualModel, N_COLUMNS};
use crate::so3::UnitQuaternion;
use nalgebra::{DMatrix, Matrix3, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DisturbanceKind {
    #[default]
    Zero,
    /// Force fixed in the yaw-local frame, torque fixed in the body frame.
    ConstantLocal,
    /// `C_true · (features; 1)` plus white noise.
    LinearFeatures,
    /// Body-frame constant plus white noise.
    ConstantPlusNoise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DisturbanceConfig {
    pub kind: DisturbanceKind,
    pub force: [f64; 3],
    pub torque: [f64; 3],
    /// Per-axis standard deviation of the white component, redrawn every plant tick.
    pub noise_std: [f64; 6],
    /// Row-major `6 × 10` ground truth; the built-in truth is used when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub coefficients: Option<Vec<Vec<f64>>>,
}

impl Default for DisturbanceConfig {
    fn default() -> Self {
        Self {
            kind: DisturbanceKind::Zero,
            force: [0.0; 3],
            torque: [0.0; 3],
            noise_std: [0.0; 6],
            coefficients: None,
        }
    }
}

/// Built-in feature-linear truth: a thrust-scale error, a lateral coupling,
/// a centre-of-mass offset and constant offsets.
pub fn default_true_coefficients() -> DMatrix<f64> {
    let mut c = DMatrix::zeros(6, N_COLUMNS);
    // forces react to the commanded force
    c[(0, 0)] = -0.04;
    c[(1, 1)] = -0.04;
    c[(2, 2)] = -0.06;
    c[(0, 2)] = 0.02;
    // gravity direction in the body frame (mass mismatch and airframe drag)
    c[(0, 6)] = 0.6;
    c[(1, 7)] = 0.6;
    c[(2, 8)] = -0.8;
    // torque from a centre-of-mass offset r: τ = −m g r × e3_B
    let r = Vector3::new(0.01, -0.008, 0.0);
    let m: Matrix3<f64> = -4.36 * 9.81 * Matrix3::new(0.0, -r.z, r.y, r.z, 0.0, -r.x, -r.y, r.x, 0.0);
    for i in 0..3 {
        for j in 0..3 {
            c[(3 + i, 6 + j)] = m[(i, j)];
        }
    }
    c[(3, 4)] = 0.05;
    c[(5, 2)] = 0.003;
    // constant offsets
    c[(0, 9)] = 0.3;
    c[(1, 9)] = -0.4;
    c[(2, 9)] = -0.5;
    c[(3, 9)] = 0.02;
    c[(4, 9)] = -0.03;
    c[(5, 9)] = 0.04;
    c
}

impl DisturbanceConfig {
    pub fn true_coefficients(&self) -> Result<DMatrix<f64>, String> {
        match &self.coefficients {
            None => Ok(default_true_coefficients()),
            Some(rows) => {
                if rows.len() != 6 || rows.iter().any(|r| r.len() != N_COLUMNS) {
                    return Err(format!("coefficients must be 6 rows of {N_COLUMNS} values"));
                }
                Ok(DMatrix::from_row_slice(6, N_COLUMNS, &rows.concat()))
            }
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.noise_std.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err("noise_std entries must be finite and non-negative".into());
        }
        let values = self.force.iter().chain(self.torque.iter());
        if values.into_iter().any(|v| !v.is_finite()) {
            return Err("force and torque must be finite".into());
        }
        self.true_coefficients().map(|_| ())
    }
}

/// Evaluates the configured truth. The noise draws use the caller's generator.
#[derive(Debug, Clone)]
pub struct TrueDisturbance {
    kind: DisturbanceKind,
    constant: Wrench,
    noise_std: [f64; 6],
    truth: ResidualModel,
}

impl TrueDisturbance {
    pub fn new(cfg: &DisturbanceConfig) -> Result<Self, String> {
        cfg.validate()?;
        let truth = ResidualModel {
            coefficients: cfg.true_coefficients()?,
            ..ResidualModel::zero()
        };
        Ok(Self {
            kind: cfg.kind,
            constant: Wrench::new(Vector3::from(cfg.force), Vector3::from(cfg.torque)),
            noise_std: cfg.noise_std,
            truth,
        })
    }

    pub fn kind(&self) -> DisturbanceKind {
        self.kind
    }

    /// Body-frame disturbance given the realized actuator wrench and attitude.
    pub fn evaluate<R: Rng>(&self, actuator: &Wrench, q: &UnitQuaternion, rng: &mut R) -> Wrench {
        let base = match self.kind {
            DisturbanceKind::Zero => return Wrench::zero(),
            DisturbanceKind::ConstantLocal => {
                let r = *q.to_rotation_matrix().matrix();
                let psi = r[(1, 0)].atan2(r[(0, 0)]);
                let local_to_body = r.transpose() * UnitQuaternion::from_yaw(psi).to_rotation_matrix().matrix();
                return Wrench::new(local_to_body * self.constant.force, self.constant.torque);
            }
            DisturbanceKind::ConstantPlusNoise => self.constant,
            DisturbanceKind::LinearFeatures => self
                .truth
                .predict(build_features(actuator, q).as_slice())
                .expect("truth has the feature layout"),
        };
        let mut v = base.to_vector();
        for (i, s) in self.noise_std.iter().enumerate() {
            if *s > 0.0 {
                let n: f64 = rng.sample(StandardNormal);
                v[i] += s * n;
            }
        }
        Wrench::from_vector(&v)
    }
}
