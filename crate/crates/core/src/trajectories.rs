//! Reference trajectories: square, attitude excursions, bent lemniscate,
//! position steps, and sampled references loaded from CSV.
//!
//! Every sampler returns world-frame position and velocity, attitude, and the
//! body-frame angular velocity that is consistent with the attitude path.

use crate::controllers::ReferencePoint;
use crate::so3::{euler_zyx_rates_to_body, UnitQuaternion};
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use std::f64::consts::{PI, TAU};
use std::path::{Path, PathBuf};
use thiserror::Error;

/// Hold at the start position before a moving trajectory begins.
pub const LEAD_IN: f64 = 1.0;
/// Hold at the end position after the motion.
pub const LEAD_OUT: f64 = 2.0;
pub const DEFAULT_ALTITUDE: f64 = 1.0;

#[derive(Debug, Error)]
pub enum TrajectoryError {
    #[error("invalid trajectory parameter: {0}")]
    Invalid(String),
    #[error("reference CSV: {0}")]
    Csv(#[from] csv::Error),
    #[error("reference CSV has fewer than two rows or non-increasing time at row {0}")]
    Timestamps(usize),
}

#[derive(Debug, Clone, PartialEq)]
enum Shape {
    Hover {
        position: Vector3<f64>,
        attitude: UnitQuaternion,
    },
    Square {
        leg: f64,
        v_max: f64,
        altitude: f64,
    },
    Attitude {
        max_angle: f64,
        position: Vector3<f64>,
    },
    Lemniscate {
        period: f64,
        amplitude: f64,
        bend: f64,
        altitude: f64,
    },
    StepX {
        length: f64,
        dwell: f64,
        altitude: f64,
    },
    Sampled(Vec<ReferencePoint>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceTrajectory {
    pub name: String,
    pub duration: f64,
    shape: Shape,
}

/// Trapezoidal velocity profile over one leg of length `leg`:
/// returns (distance, speed, acceleration) at time `t` into the leg.
fn trapezoid(leg: f64, v: f64, t: f64) -> (f64, f64, f64) {
    let a = 2.0 * v * v / leg;
    let ta = v / a;
    let total = leg_time(leg, v);
    if t <= 0.0 {
        (0.0, 0.0, 0.0)
    } else if t < ta {
        (0.5 * a * t * t, a * t, a)
    } else if t < total - ta {
        (0.5 * a * ta * ta + v * (t - ta), v, 0.0)
    } else if t < total {
        let r = total - t;
        (leg - 0.5 * a * r * r, a * r, -a)
    } else {
        (leg, 0.0, 0.0)
    }
}

fn leg_time(leg: f64, v: f64) -> f64 {
    1.5 * leg / v
}

/// `A sin³(2π s)` on `s ∈ [0, 1]`, zero outside; returns value and rate in `s`.
fn sin_cubed(amplitude: f64, s: f64) -> (f64, f64) {
    if !(0.0..=1.0).contains(&s) {
        return (0.0, 0.0);
    }
    let (sn, cs) = (TAU * s).sin_cos();
    (amplitude * sn.powi(3), amplitude * 3.0 * sn * sn * cs * TAU)
}

/// Smooth time warp with zero rate at both ends; returns σ and dσ/ds.
fn warp(s: f64) -> (f64, f64) {
    let s = s.clamp(0.0, 1.0);
    (s - (TAU * s).sin() / TAU, 1.0 - (TAU * s).cos())
}

/// Unit-amplitude lemniscate point and its derivative in the warped phase.
fn lemniscate_unit(phase: f64) -> ([f64; 2], [f64; 2]) {
    let th = TAU * phase;
    let (s, c) = th.sin_cos();
    let (s2, c2) = (2.0 * th).sin_cos();
    ([s, 0.5 * s2], [TAU * c, TAU * c2])
}

impl ReferenceTrajectory {
    pub fn hover(position: Vector3<f64>, attitude: UnitQuaternion, duration: f64) -> Self {
        Self {
            name: "hover".into(),
            duration,
            shape: Shape::Hover { position, attitude },
        }
    }

    /// Closed horizontal square through `(0,0), (leg,0), (leg,leg), (0,leg)`.
    pub fn square(leg: f64, v_max: f64) -> Result<Self, TrajectoryError> {
        if !(leg > 0.0 && v_max > 0.0) {
            return Err(TrajectoryError::Invalid("square needs leg > 0 and v_max > 0".into()));
        }
        Ok(Self {
            name: "square".into(),
            duration: LEAD_IN + 4.0 * leg_time(leg, v_max) + LEAD_OUT,
            shape: Shape::Square {
                leg,
                v_max,
                altitude: DEFAULT_ALTITUDE,
            },
        })
    }

    /// Roll excursion to `±max_angle`, then the same in pitch.
    pub fn attitude_profile(max_angle: f64, duration: f64) -> Result<Self, TrajectoryError> {
        if !(max_angle > 0.0 && max_angle < PI / 2.0) {
            return Err(TrajectoryError::Invalid("max_angle must lie in (0, π/2)".into()));
        }
        if !(duration > 2.0 * LEAD_IN) {
            return Err(TrajectoryError::Invalid(format!("attitude profile needs more than {} s", 2.0 * LEAD_IN)));
        }
        Ok(Self {
            name: "attitude".into(),
            duration,
            shape: Shape::Attitude {
                max_angle,
                position: Vector3::new(0.0, 0.0, DEFAULT_ALTITUDE),
            },
        })
    }

    /// Gerono lemniscate on the surface `z = h − k x²` with the pitch aligned to
    /// the surface slope. The amplitude is chosen so the peak speed is `v_peak`
    /// and `k` so the pitch reaches `bend_pitch_max` at the lobe tips.
    pub fn lemniscate(duration: f64, v_peak: f64, bend_pitch_max: f64) -> Result<Self, TrajectoryError> {
        if !(duration > 0.0 && v_peak > 0.0 && bend_pitch_max >= 0.0 && bend_pitch_max < PI / 2.0) {
            return Err(TrajectoryError::Invalid("lemniscate needs positive duration and speed, pitch in [0, π/2)".into()));
        }
        let mut shape = Shape::Lemniscate {
            period: duration,
            amplitude: 1.0,
            bend: bend_pitch_max.tan() / 2.0,
            altitude: DEFAULT_ALTITUDE,
        };
        let unit = Self {
            name: String::new(),
            duration,
            shape: shape.clone(),
        };
        let n = 20_000;
        let peak = (0..=n)
            .map(|i| unit.sample(LEAD_IN + duration * i as f64 / n as f64).velocity.norm())
            .fold(0.0, f64::max);
        // speed scales linearly with the amplitude when k·a is held fixed
        let a = v_peak / peak;
        if let Shape::Lemniscate { amplitude, bend, .. } = &mut shape {
            *amplitude = a;
            *bend /= a;
        }
        Ok(Self {
            name: "lemniscate".into(),
            duration: LEAD_IN + duration + LEAD_OUT,
            shape,
        })
    }

    pub fn lemniscate_slow() -> Self {
        let mut t = Self::lemniscate(15.0, 0.9, 30f64.to_radians()).expect("valid preset");
        t.name = "lemniscate-slow".into();
        t
    }

    pub fn lemniscate_fast() -> Self {
        let mut t = Self::lemniscate(5.5, 2.9, 30f64.to_radians()).expect("valid preset");
        t.name = "lemniscate-fast".into();
        t
    }

    /// Position step along x and back, each followed by `dwell` seconds.
    pub fn step_x(length: f64, dwell: f64) -> Result<Self, TrajectoryError> {
        if !(length > 0.0 && dwell > 0.0) {
            return Err(TrajectoryError::Invalid("step needs length > 0 and dwell > 0".into()));
        }
        Ok(Self {
            name: "step-x".into(),
            duration: LEAD_IN + 2.0 * dwell,
            shape: Shape::StepX {
                length,
                dwell,
                altitude: DEFAULT_ALTITUDE,
            },
        })
    }

    /// Linear interpolation between rows; normalized linear blend for attitude.
    pub fn sampled(name: &str, points: Vec<ReferencePoint>) -> Result<Self, TrajectoryError> {
        if points.len() < 2 {
            return Err(TrajectoryError::Timestamps(points.len()));
        }
        for i in 1..points.len() {
            if !(points[i].time > points[i - 1].time) {
                return Err(TrajectoryError::Timestamps(i));
            }
        }
        Ok(Self {
            name: name.into(),
            duration: points[points.len() - 1].time,
            shape: Shape::Sampled(points),
        })
    }

    /// Columns `t,px,py,pz,qw,qx,qy,qz,vx,vy,vz,wx,wy,wz`; velocity in the world
    /// frame, angular velocity in the body frame.
    pub fn from_csv(path: &Path) -> Result<Self, TrajectoryError> {
        let mut r = csv::Reader::from_path(path)?;
        let mut points = Vec::new();
        for row in r.deserialize() {
            let v: [f64; 14] = row?;
            points.push(ReferencePoint {
                time: v[0],
                position: Vector3::new(v[1], v[2], v[3]),
                attitude: UnitQuaternion::from_slice(&v[4..8]),
                velocity: Vector3::new(v[8], v[9], v[10]),
                angular_velocity: Vector3::new(v[11], v[12], v[13]),
            });
        }
        let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("custom");
        Self::sampled(name, points)
    }

    pub fn start(&self) -> ReferencePoint {
        self.sample(0.0)
    }

    /// Reference at time `t`; times outside `[0, duration]` hold the end points.
    pub fn sample(&self, t: f64) -> ReferencePoint {
        let mut r = match &self.shape {
            Shape::Hover { position, attitude } => ReferencePoint::hover(*position, *attitude),
            Shape::Square { leg, v_max, altitude } => {
                let corners = [[0.0, 0.0], [*leg, 0.0], [*leg, *leg], [0.0, *leg], [0.0, 0.0]];
                let tl = leg_time(*leg, *v_max);
                let tau = (t - LEAD_IN).max(0.0);
                let i = ((tau / tl).floor() as usize).min(4);
                let (pos, vel) = if i >= 4 {
                    (corners[4], [0.0, 0.0])
                } else {
                    let (d, v, _) = trapezoid(*leg, *v_max, tau - i as f64 * tl);
                    let (a, b) = (corners[i], corners[i + 1]);
                    let dir = [(b[0] - a[0]) / leg, (b[1] - a[1]) / leg];
                    ([a[0] + dir[0] * d, a[1] + dir[1] * d], [dir[0] * v, dir[1] * v])
                };
                let mut r = ReferencePoint::hover(Vector3::new(pos[0], pos[1], *altitude), UnitQuaternion::identity());
                r.velocity = Vector3::new(vel[0], vel[1], 0.0);
                r
            }
            Shape::Attitude { max_angle, position } => {
                let half = (self.duration - 2.0 * LEAD_IN) / 2.0;
                let (roll, roll_rate) = sin_cubed(*max_angle, (t - LEAD_IN) / half);
                let (pitch, pitch_rate) = sin_cubed(*max_angle, (t - LEAD_IN - half) / half);
                let euler = Vector3::new(roll, pitch, 0.0);
                let rates = Vector3::new(roll_rate / half, pitch_rate / half, 0.0);
                let mut r = ReferencePoint::hover(*position, UnitQuaternion::from_euler_zyx(roll, pitch, 0.0));
                r.angular_velocity = euler_zyx_rates_to_body(&euler, &rates);
                r
            }
            Shape::Lemniscate {
                period,
                amplitude,
                bend,
                altitude,
            } => {
                let s = (t - LEAD_IN) / period;
                let (sigma, dsigma) = warp(s);
                let active = (0.0..=1.0).contains(&s);
                let ([ux, uy], [dux, duy]) = lemniscate_unit(sigma);
                let rate = if active { dsigma / period } else { 0.0 };
                let (x, y) = (amplitude * ux, amplitude * uy);
                let (vx, vy) = (amplitude * dux * rate, amplitude * duy * rate);
                let z = altitude - bend * x * x;
                let vz = -2.0 * bend * x * vx;
                let slope = 2.0 * bend * x;
                let pitch = slope.atan();
                let pitch_rate = 2.0 * bend * vx / (1.0 + slope * slope);
                ReferencePoint {
                    time: 0.0,
                    position: Vector3::new(x, y, z),
                    velocity: Vector3::new(vx, vy, vz),
                    attitude: UnitQuaternion::from_euler_zyx(0.0, pitch, 0.0),
                    angular_velocity: Vector3::new(0.0, pitch_rate, 0.0),
                }
            }
            Shape::StepX { length, dwell, altitude } => {
                let x = if t >= LEAD_IN && t < LEAD_IN + dwell { *length } else { 0.0 };
                ReferencePoint::hover(Vector3::new(x, 0.0, *altitude), UnitQuaternion::identity())
            }
            Shape::Sampled(points) => interpolate(points, t),
        };
        r.time = t;
        r
    }

    /// Times at which the reference jumps on purpose.
    pub fn discontinuities(&self) -> Vec<f64> {
        match &self.shape {
            Shape::StepX { dwell, .. } => vec![LEAD_IN, LEAD_IN + dwell],
            _ => Vec::new(),
        }
    }
}

fn interpolate(points: &[ReferencePoint], t: f64) -> ReferencePoint {
    if t <= points[0].time {
        return points[0];
    }
    let last = points[points.len() - 1];
    if t >= last.time {
        return last;
    }
    let i = points.partition_point(|p| p.time <= t) - 1;
    let (a, b) = (&points[i], &points[i + 1]);
    let s = (t - a.time) / (b.time - a.time);
    let qa = a.attitude.coords();
    let mut qb = b.attitude.coords();
    if qa.dot(&qb) < 0.0 {
        qb = -qb;
    }
    let q = qa * (1.0 - s) + qb * s;
    ReferencePoint {
        time: t,
        position: a.position.lerp(&b.position, s),
        velocity: a.velocity.lerp(&b.velocity, s),
        attitude: UnitQuaternion::from_slice(q.as_slice()),
        angular_velocity: a.angular_velocity.lerp(&b.angular_velocity, s),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrajectoryKind {
    Hover,
    Square,
    Attitude,
    LemniscateSlow,
    LemniscateFast,
    Lemniscate,
    StepX,
    Csv,
}

/// Trajectory selection in the experiment config. Unset parameters take the
/// preset values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectorySpec {
    pub kind: TrajectoryKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duration: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speed: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub leg: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_angle_deg: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub length: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dwell: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
}

impl TrajectorySpec {
    pub fn preset(kind: TrajectoryKind) -> Self {
        Self {
            kind,
            duration: None,
            speed: None,
            leg: None,
            max_angle_deg: None,
            length: None,
            dwell: None,
            path: None,
        }
    }

    pub fn build(&self) -> Result<ReferenceTrajectory, TrajectoryError> {
        use TrajectoryKind::*;
        let altitude = Vector3::new(0.0, 0.0, DEFAULT_ALTITUDE);
        match self.kind {
            Hover => Ok(ReferenceTrajectory::hover(
                altitude,
                UnitQuaternion::identity(),
                self.duration.unwrap_or(10.0),
            )),
            Square => ReferenceTrajectory::square(self.leg.unwrap_or(1.0), self.speed.unwrap_or(1.0)),
            Attitude => ReferenceTrajectory::attitude_profile(
                self.max_angle_deg.unwrap_or(45.0).to_radians(),
                self.duration.unwrap_or(27.0),
            ),
            LemniscateSlow => Ok(ReferenceTrajectory::lemniscate_slow()),
            LemniscateFast => Ok(ReferenceTrajectory::lemniscate_fast()),
            Lemniscate => ReferenceTrajectory::lemniscate(
                self.duration.unwrap_or(15.0),
                self.speed.unwrap_or(0.9),
                self.max_angle_deg.unwrap_or(30.0).to_radians(),
            ),
            StepX => ReferenceTrajectory::step_x(self.length.unwrap_or(1.0), self.dwell.unwrap_or(5.0)),
            Csv => {
                let path = self
                    .path
                    .as_ref()
                    .ok_or_else(|| TrajectoryError::Invalid("csv trajectory needs `path`".into()))?;
                ReferenceTrajectory::from_csv(path)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Largest relative mismatch between sampled rates and central differences.
    fn consistency(traj: &ReferenceTrajectory) -> (f64, f64) {
        let h = 1e-3;
        let (mut dv, mut dw) = (0.0f64, 0.0f64);
        let jumps = traj.discontinuities();
        let mut t = h;
        while t < traj.duration - h {
            if jumps.iter().any(|j| (t - j).abs() < 2.0 * h) {
                t += h;
                continue;
            }
            let (a, b, r) = (traj.sample(t - h), traj.sample(t + h), traj.sample(t));
            let v_fd = (b.position - a.position) / (2.0 * h);
            let scale = r.velocity.norm().max(1.0);
            dv = dv.max((v_fd - r.velocity).norm() / scale);
            // body rate from the quaternion difference
            let w_fd = a.attitude.inverse().multiply(&b.attitude).to_rotation_vector() / (2.0 * h);
            let scale = r.angular_velocity.norm().max(1.0);
            dw = dw.max((w_fd - r.angular_velocity).norm() / scale);
            t += h;
        }
        (dv, dw)
    }

    #[test]
    fn square_visits_corners_in_order() {
        let tr = ReferenceTrajectory::square(1.0, 0.5).unwrap();
        let tl = leg_time(1.0, 0.5);
        let expected = [[1.0, 0.0], [1.0, 1.0], [0.0, 1.0], [0.0, 0.0]];
        for (i, c) in expected.iter().enumerate() {
            let p = tr.sample(LEAD_IN + (i + 1) as f64 * tl).position;
            assert!((p.x - c[0]).abs() < 1e-12 && (p.y - c[1]).abs() < 1e-12, "corner {i}: {p}");
        }
        let (s, e) = (tr.sample(0.0), tr.sample(tr.duration));
        assert!((s.position - e.position).norm() < 1e-12);
    }

    #[test]
    fn square_reaches_peak_speed() {
        let tr = ReferenceTrajectory::square(1.0, 3.0).unwrap();
        let peak = (0..=10_000)
            .map(|i| tr.sample(tr.duration * i as f64 / 10_000.0).velocity.norm())
            .fold(0.0, f64::max);
        assert!((peak - 3.0).abs() < 1e-9);
    }

    #[test]
    fn attitude_profile_extremes() {
        let tr = ReferenceTrajectory::attitude_profile(45f64.to_radians(), 27.0).unwrap();
        let mut max_roll = 0.0f64;
        let mut max_pitch = 0.0f64;
        let p0 = tr.sample(0.0).position;
        for i in 0..=27_000 {
            let r = tr.sample(i as f64 * 1e-3);
            let e = r.attitude.euler_zyx().unwrap();
            max_roll = max_roll.max(e.x.abs());
            max_pitch = max_pitch.max(e.y.abs());
            assert_eq!(r.position, p0);
        }
        assert!((max_roll - 0.785_398_163_4).abs() < 1e-6);
        assert!((max_pitch - 0.785_398_163_4).abs() < 1e-6);
    }

    #[test]
    fn lemniscate_presets() {
        for (tr, lo, hi) in [
            (ReferenceTrajectory::lemniscate_slow(), 0.85, 0.95),
            (ReferenceTrajectory::lemniscate_fast(), 2.7, 3.0),
        ] {
            let mut peak = 0.0f64;
            let mut pitch = 0.0f64;
            for i in 0..=20_000 {
                let r = tr.sample(tr.duration * i as f64 / 20_000.0);
                peak = peak.max(r.velocity.norm());
                pitch = pitch.max(r.attitude.euler_zyx().unwrap().y.abs());
            }
            assert!(peak >= lo && peak <= hi, "{}: peak {peak}", tr.name);
            assert!((pitch.to_degrees() - 30.0).abs() < 0.5, "{}: pitch {}", tr.name, pitch.to_degrees());
        }
    }

    #[test]
    fn step_is_a_pure_position_jump() {
        let tr = ReferenceTrajectory::step_x(1.0, 5.0).unwrap();
        let before = tr.sample(LEAD_IN - 1e-9);
        let after = tr.sample(LEAD_IN);
        assert!((after.position.x - before.position.x - 1.0).abs() < 1e-15);
        for i in 0..=1100 {
            assert_eq!(tr.sample(i as f64 * 0.01).velocity, Vector3::zeros());
        }
        let back = tr.sample(LEAD_IN + 5.0);
        assert_eq!(back.position.x, 0.0);
    }

    #[test]
    fn derivatives_are_consistent() {
        let all = [
            ReferenceTrajectory::square(1.0, 1.0).unwrap(),
            ReferenceTrajectory::attitude_profile(45f64.to_radians(), 27.0).unwrap(),
            ReferenceTrajectory::lemniscate_slow(),
            ReferenceTrajectory::lemniscate_fast(),
            ReferenceTrajectory::step_x(1.0, 5.0).unwrap(),
        ];
        for tr in &all {
            let (dv, dw) = consistency(tr);
            assert!(dv < 1e-3 && dw < 1e-3, "{}: {dv} {dw}", tr.name);
        }
    }

    #[test]
    fn sampled_interpolates_and_round_trips_csv() {
        let tr = ReferenceTrajectory::lemniscate_slow();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ref.csv");
        let mut w = csv::Writer::from_path(&path).unwrap();
        w.write_record(["t", "px", "py", "pz", "qw", "qx", "qy", "qz", "vx", "vy", "vz", "wx", "wy", "wz"])
            .unwrap();
        for i in 0..=1000 {
            let r = tr.sample(i as f64 * 0.01);
            let q = r.attitude.to_array();
            let row = [
                r.time, r.position.x, r.position.y, r.position.z, q[0], q[1], q[2], q[3], r.velocity.x,
                r.velocity.y, r.velocity.z, r.angular_velocity.x, r.angular_velocity.y, r.angular_velocity.z,
            ];
            w.write_record(row.iter().map(|v| v.to_string())).unwrap();
        }
        w.flush().unwrap();
        let loaded = ReferenceTrajectory::from_csv(&path).unwrap();
        assert_eq!(loaded.duration, 10.0);
        let (a, b) = (loaded.sample(5.0), tr.sample(5.0));
        assert!((a.position - b.position).norm() < 1e-12);
        let mid = loaded.sample(5.005);
        assert!((mid.position - tr.sample(5.005).position).norm() < 1e-4);
    }
}
