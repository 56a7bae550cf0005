//! Inner-loop PD attitude stabilizer.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::sim::{euler_zyx, QuadState};

/// Per-axis gains; the z pair is one sixth of the x/y pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PdGains {
    pub kp_xy: f64,
    pub kd_xy: f64,
    pub kp_z: f64,
    pub kd_z: f64,
}

impl Default for PdGains {
    fn default() -> Self {
        Self {
            kp_xy: -0.2,
            kd_xy: -0.06,
            kp_z: -0.033,
            kd_z: -0.01,
        }
    }
}

/// τ_b = k_p ⊙ Rᵀq + k_d ⊙ Rᵀw, with `euler` the ZYX angles of `rotation`
/// and `ang_vel` in the inertial frame.
pub fn pd_torque(
    rotation: &Matrix3<f64>,
    euler: &Vector3<f64>,
    ang_vel: &Vector3<f64>,
    gains: &PdGains,
) -> Vector3<f64> {
    let q_b = rotation.transpose() * euler;
    let w_b = rotation.transpose() * ang_vel;
    let kp = Vector3::new(gains.kp_xy, gains.kp_xy, gains.kp_z);
    let kd = Vector3::new(gains.kd_xy, gains.kd_xy, gains.kd_z);
    kp.component_mul(&q_b) + kd.component_mul(&w_b)
}

pub fn pd_torque_for_state(state: &QuadState, gains: &PdGains) -> Vector3<f64> {
    pd_torque(
        &state.rotation,
        &euler_zyx(&state.rotation),
        &state.ang_vel,
        gains,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use nalgebra::Rotation3;
    use proptest::prelude::*;

    #[test]
    fn zero_error_zero_torque() {
        let t = pd_torque(
            &Matrix3::identity(),
            &Vector3::zeros(),
            &Vector3::zeros(),
            &PdGains::default(),
        );
        assert_eq!(t, Vector3::zeros());
        assert_eq!(
            pd_torque_for_state(&QuadState::default(), &PdGains::default()),
            Vector3::zeros()
        );
    }

    #[test]
    fn roll_error_uses_xy_gain() {
        let t = pd_torque(
            &Matrix3::identity(),
            &Vector3::new(0.1, 0.0, 0.0),
            &Vector3::zeros(),
            &PdGains::default(),
        );
        assert_abs_diff_eq!(t, Vector3::new(-0.02, 0.0, 0.0), epsilon = 1e-15);
    }

    #[test]
    fn yaw_rate_uses_z_gain() {
        let t = pd_torque(
            &Matrix3::identity(),
            &Vector3::zeros(),
            &Vector3::new(0.0, 0.0, 1.0),
            &PdGains::default(),
        );
        assert_abs_diff_eq!(t, Vector3::new(0.0, 0.0, -0.01), epsilon = 1e-15);
    }

    #[test]
    fn z_gains_are_one_sixth() {
        let g = PdGains::default();
        assert!((g.kp_z - g.kp_xy / 6.0).abs() < 1e-3);
        assert!((g.kd_z - g.kd_xy / 6.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn linear_in_errors(
            roll in -1.0..1.0f64, pitch in -1.0..1.0f64, yaw in -3.0..3.0f64,
            q in prop::array::uniform3(-1.0..1.0f64),
            w in prop::array::uniform3(-5.0..5.0f64),
            a in -3.0..3.0f64,
        ) {
            let r = Rotation3::from_euler_angles(roll, pitch, yaw).into_inner();
            let (q, w) = (Vector3::from(q), Vector3::from(w));
            let g = PdGains::default();
            let lhs = pd_torque(&r, &(q * a), &(w * a), &g);
            let rhs = pd_torque(&r, &q, &w, &g) * a;
            prop_assert!((lhs - rhs).amax() < 1e-12);
        }
    }
}
