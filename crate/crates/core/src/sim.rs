//! Rigid-body quadcopter simulation with per-propeller fault injection.
//!
//! Plus-configuration frame: propellers 1 and 3 sit on the body x-axis
//! (at +x and -x), propellers 2 and 4 on the body y-axis (at +y and -y).
//! Propellers 1 and 3 spin opposite to 2 and 4. Angular velocity is stored
//! in the inertial frame; Euler's equations are integrated in the body frame.

use std::fmt;

use nalgebra::{Matrix3, Quaternion, Rotation3, UnitQuaternion, Vector3};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Length of a flattened state vector.
pub const STATE_DIM: usize = 18;

/// Control period at 100 Hz.
pub const DEFAULT_DT: f64 = 0.01;

const HOVER_ROTOR_SPEED: f64 = 400.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QuadParams {
    pub mass: f64,
    pub arm_length: f64,
    pub inertia_diag: [f64; 3],
    pub thrust_coeff: f64,
    pub rotor_torque_coeff: f64,
    pub rot_drag_coeff: f64,
    pub gravity: f64,
    pub max_rotor_speed: f64,
}

impl Default for QuadParams {
    fn default() -> Self {
        let mass = 0.4;
        let gravity = 9.81;
        let thrust_coeff = mass * gravity / (4.0 * HOVER_ROTOR_SPEED * HOVER_ROTOR_SPEED);
        Self {
            mass,
            arm_length: 0.17,
            inertia_diag: [7e-3, 7e-3, 12e-3],
            thrust_coeff,
            rotor_torque_coeff: 0.016 * thrust_coeff,
            rot_drag_coeff: 16e-3,
            gravity,
            max_rotor_speed: 2.0 * HOVER_ROTOR_SPEED,
        }
    }
}

impl QuadParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidParameter(what.to_string()));
        if !(self.mass > 0.0) {
            return bad("mass must be > 0");
        }
        if !(self.arm_length > 0.0) {
            return bad("arm_length must be > 0");
        }
        if self.inertia_diag.iter().any(|&i| !(i > 0.0)) {
            return bad("inertia entries must be > 0");
        }
        if !(self.thrust_coeff > 0.0) {
            return bad("thrust_coeff must be > 0");
        }
        if !(self.max_rotor_speed > 0.0) {
            return bad("max_rotor_speed must be > 0");
        }
        Ok(())
    }

    /// Rotor speed at which four healthy rotors exactly balance gravity.
    pub fn hover_rotor_speed(&self) -> f64 {
        (self.mass * self.gravity / (4.0 * self.thrust_coeff)).sqrt()
    }

    pub fn inertia(&self) -> Matrix3<f64> {
        Matrix3::from_diagonal(&Vector3::from(self.inertia_diag))
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let p: Self = serde_json::from_str(s)?;
        p.validate()?;
        Ok(p)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadState {
    /// Body-to-inertial rotation.
    pub rotation: Matrix3<f64>,
    pub position: Vector3<f64>,
    pub lin_vel: Vector3<f64>,
    /// Angular velocity, inertial frame.
    pub ang_vel: Vector3<f64>,
}

impl Default for QuadState {
    fn default() -> Self {
        Self {
            rotation: Matrix3::identity(),
            position: Vector3::zeros(),
            lin_vel: Vector3::zeros(),
            ang_vel: Vector3::zeros(),
        }
    }
}

impl QuadState {
    pub fn at(position: Vector3<f64>) -> Self {
        Self {
            position,
            ..Self::default()
        }
    }

    pub fn body_ang_vel(&self) -> Vector3<f64> {
        self.rotation.transpose() * self.ang_vel
    }

    /// Same state with the position re-expressed relative to `origin`.
    pub fn relative_to(&self, origin: &Vector3<f64>) -> Self {
        Self {
            position: self.position - origin,
            ..*self
        }
    }

    pub fn is_finite(&self) -> bool {
        self.rotation.iter().all(|v| v.is_finite())
            && self.position.iter().all(|v| v.is_finite())
            && self.lin_vel.iter().all(|v| v.is_finite())
            && self.ang_vel.iter().all(|v| v.is_finite())
    }

    /// Largest entry of |RᵀR − I|.
    pub fn orthonormality_error(&self) -> f64 {
        (self.rotation.transpose() * self.rotation - Matrix3::identity()).amax()
    }
}

/// Which of the four propellers produce thrust.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FaultMask {
    pub functional: [bool; 4],
}

impl Default for FaultMask {
    fn default() -> Self {
        Self::healthy()
    }
}

impl FaultMask {
    pub const fn healthy() -> Self {
        Self {
            functional: [true; 4],
        }
    }

    /// Mask with the given propellers (1-based) failed.
    pub fn with_failed(failed: &[usize]) -> Result<Self> {
        let mut functional = [true; 4];
        for &p in failed {
            if !(1..=4).contains(&p) {
                return Err(Error::InvalidParameter(format!(
                    "propeller index {p} outside 1..=4"
                )));
            }
            functional[p - 1] = false;
        }
        let mask = Self { functional };
        mask.validate()?;
        Ok(mask)
    }

    /// Marks propeller `prop` (1-based) failed without checking support.
    pub fn fail(&self, prop: usize) -> Self {
        let mut m = *self;
        m.functional[prop - 1] = false;
        m
    }

    pub fn functional_count(&self) -> usize {
        self.functional.iter().filter(|&&f| f).count()
    }

    pub fn is_functional(&self, prop: usize) -> bool {
        self.functional[prop - 1]
    }

    /// 1-based indices of failed propellers, ascending.
    pub fn failed(&self) -> Vec<usize> {
        (1..=4).filter(|&p| !self.functional[p - 1]).collect()
    }

    pub fn is_supported(&self) -> bool {
        match self.failed().as_slice() {
            [] | [_] => true,
            [a, b] => b - a == 2,
            _ => false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.is_supported() {
            Ok(())
        } else {
            Err(Error::UnsupportedMask(self.to_string()))
        }
    }

    /// The seven supported configurations.
    pub fn all_supported() -> Vec<Self> {
        let mut v = vec![Self::healthy()];
        for p in 1..=4 {
            v.push(Self::healthy().fail(p));
        }
        v.push(Self::healthy().fail(1).fail(3));
        v.push(Self::healthy().fail(2).fail(4));
        v
    }
}

/// Propeller opposite to `prop` across the frame.
pub fn opposite_propeller(prop: usize) -> usize {
    (prop + 1) % 4 + 1
}

impl fmt::Display for FaultMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let failed = self.failed();
        if failed.is_empty() {
            write!(f, "healthy")
        } else {
            let s: Vec<String> = failed.iter().map(|p| p.to_string()).collect();
            write!(f, "failed[{}]", s.join(","))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RotorCommand {
    pub speeds: [f64; 4],
}

impl RotorCommand {
    pub fn new(speeds: [f64; 4]) -> Self {
        Self { speeds }
    }

    pub fn uniform(speed: f64) -> Self {
        Self { speeds: [speed; 4] }
    }
}

/// Body-frame force and torque.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Wrench {
    pub force: Vector3<f64>,
    pub torque: Vector3<f64>,
}

impl Wrench {
    pub fn zero() -> Self {
        Self {
            force: Vector3::zeros(),
            torque: Vector3::zeros(),
        }
    }
}

impl std::ops::Add for Wrench {
    type Output = Wrench;
    fn add(self, o: Wrench) -> Wrench {
        Wrench {
            force: self.force + o.force,
            torque: self.torque + o.torque,
        }
    }
}

/// Yaw reaction sign per propeller.
const SPIN: [f64; 4] = [1.0, -1.0, 1.0, -1.0];

/// Plus-frame mixer. `w_body` feeds the rotational drag term.
pub fn mix_forces(
    cmd: &RotorCommand,
    mask: &FaultMask,
    params: &QuadParams,
    w_body: &Vector3<f64>,
) -> Result<Wrench> {
    for (index, &speed) in cmd.speeds.iter().enumerate() {
        if !(0.0..=params.max_rotor_speed).contains(&speed) {
            return Err(Error::RotorSpeedOutOfRange {
                index: index + 1,
                speed,
                max: params.max_rotor_speed,
            });
        }
    }
    let mut thrust = [0.0; 4];
    let mut yaw = 0.0;
    for i in 0..4 {
        if mask.functional[i] {
            let w2 = cmd.speeds[i] * cmd.speeds[i];
            thrust[i] = params.thrust_coeff * w2;
            yaw += SPIN[i] * params.rotor_torque_coeff * w2;
        }
    }
    let arm = params.arm_length;
    let force = Vector3::new(0.0, 0.0, thrust.iter().sum());
    let torque = Vector3::new(
        arm * (thrust[1] - thrust[3]),
        arm * (thrust[2] - thrust[0]),
        yaw,
    ) - params.rot_drag_coeff * w_body;
    Ok(Wrench { force, torque })
}

/// One semi-implicit Euler step of the Newton–Euler equations.
///
/// Velocities are updated first and the new velocities drive position and
/// attitude. The rotation is advanced by the exact exponential of the new
/// inertial angular velocity and then re-orthonormalized.
pub fn step(
    state: &QuadState,
    cmd: &RotorCommand,
    extra: &Wrench,
    mask: &FaultMask,
    params: &QuadParams,
    dt: f64,
) -> Result<QuadState> {
    if !(dt > 0.0) {
        return Err(Error::InvalidParameter(format!("dt must be > 0, got {dt}")));
    }
    if !state.is_finite() {
        return Err(Error::NonFinite("state"));
    }
    if cmd.speeds.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("rotor command"));
    }
    if !(extra.force.iter().chain(extra.torque.iter())).all(|v| v.is_finite()) {
        return Err(Error::NonFinite("extra force/torque"));
    }

    let r = state.rotation;
    let w_body = r.transpose() * state.ang_vel;
    let wrench = mix_forces(cmd, mask, params, &w_body)? + *extra;

    let gravity = Vector3::new(0.0, 0.0, -params.gravity);
    let acc = r * wrench.force / params.mass + gravity;
    let lin_vel = state.lin_vel + acc * dt;
    let position = state.position + lin_vel * dt;

    let inertia = Vector3::from(params.inertia_diag);
    let gyro = w_body.cross(&inertia.component_mul(&w_body));
    let w_dot = (wrench.torque - gyro).component_div(&inertia);
    let w_body_next = w_body + w_dot * dt;
    let ang_vel = r * w_body_next;

    let rotation = orthonormalize(&(Rotation3::new(ang_vel * dt).into_inner() * r));

    Ok(QuadState {
        rotation,
        position,
        lin_vel,
        ang_vel,
    })
}

/// Gram–Schmidt on the columns; the third column is rebuilt as a cross product.
pub fn orthonormalize(m: &Matrix3<f64>) -> Matrix3<f64> {
    let x = m.column(0).normalize();
    let y_raw = m.column(1) - x * x.dot(&m.column(1));
    let y = y_raw.normalize();
    let z = x.cross(&y);
    Matrix3::from_columns(&[x, y, z])
}

/// Layout: rotation row-major (9), position (3), linear velocity (3), angular velocity (3).
pub fn flatten_state(state: &QuadState) -> [f64; STATE_DIM] {
    let mut out = [0.0; STATE_DIM];
    for r in 0..3 {
        for c in 0..3 {
            out[r * 3 + c] = state.rotation[(r, c)];
        }
    }
    out[9..12].copy_from_slice(state.position.as_slice());
    out[12..15].copy_from_slice(state.lin_vel.as_slice());
    out[15..18].copy_from_slice(state.ang_vel.as_slice());
    out
}

pub fn unflatten_state(v: &[f64; STATE_DIM]) -> QuadState {
    QuadState {
        rotation: Matrix3::from_row_slice(&v[0..9]),
        position: Vector3::from_column_slice(&v[9..12]),
        lin_vel: Vector3::from_column_slice(&v[12..15]),
        ang_vel: Vector3::from_column_slice(&v[15..18]),
    }
}

/// Angle between the body z-axis and the inertial z-axis, in [0, π].
pub fn axis_tilt_angle(state: &QuadState) -> f64 {
    state.rotation[(2, 2)].clamp(-1.0, 1.0).acos()
}

/// ṅ = −w_body × n for a body-fixed unit axis n.
pub fn n_vector_derivative(n: &Vector3<f64>, w_body: &Vector3<f64>) -> Vector3<f64> {
    -w_body.cross(n)
}

/// Roll, pitch, yaw (ZYX convention) of a rotation matrix.
pub fn euler_zyx(r: &Matrix3<f64>) -> Vector3<f64> {
    let roll = r[(2, 1)].atan2(r[(2, 2)]);
    let pitch = (-r[(2, 0)]).clamp(-1.0, 1.0).asin();
    let yaw = r[(1, 0)].atan2(r[(0, 0)]);
    Vector3::new(roll, pitch, yaw)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    /// Truncated (±3σ) normal: position σ=1 m, velocities σ=5, quaternion elements σ=1.
    Gaussian3Sigma,
    /// Rotation uniform on SO(3); position and velocities uniform in [−1, 1].
    Uniform,
}

fn truncated_normal<R: Rng + ?Sized>(rng: &mut R, sigma: f64) -> f64 {
    let normal = Normal::new(0.0, sigma).expect("sigma > 0");
    loop {
        let x: f64 = normal.sample(rng);
        if x.abs() <= 3.0 * sigma {
            return x;
        }
    }
}

fn quat_to_matrix(w: f64, x: f64, y: f64, z: f64) -> Matrix3<f64> {
    UnitQuaternion::from_quaternion(Quaternion::new(w, x, y, z))
        .to_rotation_matrix()
        .into_inner()
}

pub fn sample_initial_state<R: Rng + ?Sized>(rng: &mut R, mode: InitMode) -> QuadState {
    match mode {
        InitMode::Gaussian3Sigma => {
            let position = Vector3::from_fn(|_, _| truncated_normal(rng, 1.0));
            let q: [f64; 4] = std::array::from_fn(|_| truncated_normal(rng, 1.0));
            let ang_vel = Vector3::from_fn(|_, _| truncated_normal(rng, 5.0));
            let lin_vel = Vector3::from_fn(|_, _| truncated_normal(rng, 5.0));
            QuadState {
                rotation: orthonormalize(&quat_to_matrix(q[0], q[1], q[2], q[3])),
                position,
                lin_vel,
                ang_vel,
            }
        }
        InitMode::Uniform => {
            // Shoemake's subgroup algorithm.
            let (u1, u2, u3): (f64, f64, f64) = (rng.gen(), rng.gen(), rng.gen());
            let tau = std::f64::consts::TAU;
            let (a, b) = ((1.0 - u1).sqrt(), u1.sqrt());
            let rotation = quat_to_matrix(
                b * (tau * u3).cos(),
                a * (tau * u2).sin(),
                a * (tau * u2).cos(),
                b * (tau * u3).sin(),
            );
            let mut uni = || Vector3::from_fn(|_, _| rng.gen_range(-1.0..=1.0));
            let position = uni();
            let lin_vel = uni();
            let ang_vel = uni();
            QuadState {
                rotation: orthonormalize(&rotation),
                position,
                lin_vel,
                ang_vel,
            }
        }
    }
}
