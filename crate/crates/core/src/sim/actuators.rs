//! Servo and rotor models: rate-limited first-order tracking of the commands.

use crate::allocation::{wrap_angle, ActuatorCommand};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ActuatorPlantModel {
    /// s
    pub servo_time_constant: f64,
    /// rad/s
    pub servo_rate_limit: f64,
    /// s
    pub thrust_time_constant: f64,
    /// N/s
    pub thrust_rate_limit: f64,
    /// N
    pub thrust_min: f64,
    /// N
    pub thrust_max: f64,
}

impl Default for ActuatorPlantModel {
    fn default() -> Self {
        Self {
            servo_time_constant: 0.05,
            servo_rate_limit: 10.0,
            thrust_time_constant: 0.03,
            thrust_rate_limit: 100.0,
            thrust_min: 0.0,
            thrust_max: 16.0,
        }
    }
}

impl ActuatorPlantModel {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.servo_time_constant > 0.0 && self.thrust_time_constant > 0.0) {
            return Err("actuator time constants must be positive".into());
        }
        if !(self.servo_rate_limit > 0.0 && self.thrust_rate_limit > 0.0) {
            return Err("actuator rate limits must be positive".into());
        }
        if !(self.thrust_min >= 0.0 && self.thrust_min < self.thrust_max) {
            return Err("thrust bounds must satisfy 0 <= min < max".into());
        }
        Ok(())
    }

    /// One step of exact first-order decay towards `target`, then rate limited.
    fn track(value: f64, error: f64, tau: f64, rate: f64, dt: f64) -> f64 {
        let step = error * (1.0 - (-dt / tau).exp());
        value + step.clamp(-rate * dt, rate * dt)
    }

    /// Advances `state` towards `command` by `dt`. Tilt errors are taken the
    /// short way round.
    pub fn step(&self, state: &mut ActuatorCommand, command: &ActuatorCommand, dt: f64) {
        for (a, c) in state.tilt.iter_mut().zip(command.tilt.iter()) {
            let e = wrap_angle(c - *a);
            *a = Self::track(*a, e, self.servo_time_constant, self.servo_rate_limit, dt);
        }
        for (t, c) in state.thrust.iter_mut().zip(command.thrust.iter()) {
            let target = c.clamp(self.thrust_min, self.thrust_max);
            let next = Self::track(*t, target - *t, self.thrust_time_constant, self.thrust_rate_limit, dt);
            *t = next.clamp(self.thrust_min, self.thrust_max);
        }
    }
}
