//! Pose and IMU models with seeded white noise.

use crate::dynamics::RigidState;
use crate::ekf::PoseMeasurement;
use crate::so3::UnitQuaternion;
use nalgebra::Vector3;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensorConfig {
    pub pose_rate: f64,
    /// m
    pub position_std: f64,
    /// rad
    pub attitude_std: f64,
    /// s
    pub pose_latency: f64,
    pub imu_rate: f64,
    /// m/s²/√Hz
    pub accel_noise_density: f64,
    /// rad/s/√Hz
    pub gyro_noise_density: f64,
    /// m/s², known to the logger and removed from the logged channel
    pub accel_bias: [f64; 3],
}

impl Default for SensorConfig {
    fn default() -> Self {
        Self {
            pose_rate: 100.0,
            position_std: 0.002,
            attitude_std: 0.2f64.to_radians(),
            pose_latency: 0.0,
            imu_rate: 200.0,
            accel_noise_density: 0.004,
            gyro_noise_density: 0.0003,
            accel_bias: [0.05, -0.03, 0.02],
        }
    }
}

impl SensorConfig {
    pub fn validate(&self, control_rate: f64) -> Result<(), String> {
        if !(self.pose_rate >= control_rate && self.imu_rate >= control_rate) {
            return Err(format!("sensor rates must be at least the control rate {control_rate} Hz"));
        }
        let stds = [
            self.position_std,
            self.attitude_std,
            self.pose_latency,
            self.accel_noise_density,
            self.gyro_noise_density,
        ];
        if stds.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err("sensor noise terms and latency must be finite and non-negative".into());
        }
        Ok(())
    }
}

fn gaussian3<R: Rng>(rng: &mut R, std: f64) -> Vector3<f64> {
    let mut v = Vector3::zeros();
    for i in 0..3 {
        let n: f64 = rng.sample(StandardNormal);
        v[i] = std * n;
    }
    v
}

/// Noisy pose with a fixed latency expressed in plant ticks.
#[derive(Debug, Clone)]
pub struct PoseSensor {
    position_std: f64,
    attitude_std: f64,
    delay_ticks: usize,
    history: VecDeque<(f64, RigidState)>,
}

impl PoseSensor {
    pub fn new(cfg: &SensorConfig, plant_dt: f64) -> Self {
        let delay_ticks = (cfg.pose_latency / plant_dt).round() as usize;
        Self {
            position_std: cfg.position_std,
            attitude_std: cfg.attitude_std,
            delay_ticks,
            history: VecDeque::with_capacity(delay_ticks + 1),
        }
    }

    /// Records the true state of the current tick.
    pub fn record(&mut self, time: f64, x: &RigidState) {
        self.history.push_back((time, *x));
        while self.history.len() > self.delay_ticks + 1 {
            self.history.pop_front();
        }
    }

    /// Measurement of the state `latency` ago, once that much history exists.
    pub fn measure<R: Rng>(&self, rng: &mut R) -> Option<PoseMeasurement> {
        if self.history.len() <= self.delay_ticks {
            return None;
        }
        let (time, x) = self.history.front()?;
        let dp = gaussian3(rng, self.position_std);
        let dtheta = gaussian3(rng, self.attitude_std);
        Some(PoseMeasurement {
            time: *time,
            position: x.position + dp,
            attitude: x.attitude.multiply(&UnitQuaternion::from_rotation_vector(&dtheta)),
        })
    }
}

/// Specific force and angular rate in the body frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImuSample {
    pub accel: Vector3<f64>,
    pub gyro: Vector3<f64>,
}

#[derive(Debug, Clone)]
pub struct Imu {
    accel_std: f64,
    gyro_std: f64,
    bias: Vector3<f64>,
}

impl Imu {
    pub fn new(cfg: &SensorConfig) -> Self {
        let bandwidth = cfg.imu_rate.sqrt();
        Self {
            accel_std: cfg.accel_noise_density * bandwidth,
            gyro_std: cfg.gyro_noise_density * bandwidth,
            bias: Vector3::from(cfg.accel_bias),
        }
    }

    /// Raw reading, including the accelerometer bias.
    pub fn measure<R: Rng>(&self, specific_force: &Vector3<f64>, rate: &Vector3<f64>, rng: &mut R) -> ImuSample {
        ImuSample {
            accel: specific_force + self.bias + gaussian3(rng, self.accel_std),
            gyro: rate + gaussian3(rng, self.gyro_std),
        }
    }

    pub fn bias(&self) -> Vector3<f64> {
        self.bias
    }
}
