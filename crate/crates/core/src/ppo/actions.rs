use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::nn::MlpParams;
use crate::pd::{pd_torque_for_state, PdGains};
use crate::sim::{mix_forces, FaultMask, QuadParams, QuadState, RotorCommand, Wrench, STATE_DIM};

/// Spreads `outputs` over the functional propellers in ascending index
/// order; failed slots stay zero.
pub fn cyclic_assign(outputs: &[f64], mask: &FaultMask) -> Result<[f64; 4]> {
    let n = mask.functional_count();
    if outputs.len() != n {
        return Err(Error::Arity {
            expected: n,
            found: outputs.len(),
        });
    }
    let mut slots = [0.0; 4];
    let mut it = outputs.iter();
    for (i, slot) in slots.iter_mut().enumerate() {
        if mask.functional[i] {
            *slot = *it.next().expect("count checked");
        }
    }
    Ok(slots)
}

/// Rotor speed for a normalized policy output: ω_hover·(1 + 0.5·o), clamped
/// to the motor range.
pub fn output_to_speed(o: f64, params: &QuadParams) -> f64 {
    (params.hover_rotor_speed() * (1.0 + 0.5 * o)).clamp(0.0, params.max_rotor_speed)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlOutput {
    pub rotor: RotorCommand,
    pub pd_torque: Vector3<f64>,
    /// Mixer output plus PD torque, body frame.
    pub total: Wrench,
}

impl ControlOutput {
    /// The part of the control that `sim::step` adds on top of the mixer.
    pub fn extra(&self) -> Wrench {
        Wrench {
            force: Vector3::zeros(),
            torque: self.pd_torque,
        }
    }
}

/// Converts policy outputs to rotor speeds, runs them through the mixer and
/// adds the PD torque.
pub fn combine_actions(
    policy_out: &[f64],
    mask: &FaultMask,
    state: &QuadState,
    gains: &PdGains,
    params: &QuadParams,
) -> Result<ControlOutput> {
    if policy_out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("policy output"));
    }
    let speeds: Vec<f64> = policy_out.iter().map(|&o| output_to_speed(o, params)).collect();
    let rotor = RotorCommand::new(cyclic_assign(&speeds, mask)?);
    let mixed = mix_forces(&rotor, mask, params, &state.body_ang_vel())?;
    let pd = pd_torque_for_state(state, gains);
    let total = Wrench {
        force: mixed.force,
        torque: mixed.torque + pd,
    };
    Ok(ControlOutput {
        rotor,
        pd_torque: pd,
        total,
    })
}

/// Deterministic policy mean, squashed to [−1, 1].
pub fn policy_mean(policy: &MlpParams, observation: &[f64; STATE_DIM]) -> Result<Vec<f64>> {
    Ok(policy
        .forward(observation)?
        .into_iter()
        .map(f64::tanh)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn identity_when_healthy() {
        let out = cyclic_assign(&[1.0, 2.0, 3.0, 4.0], &FaultMask::healthy()).unwrap();
        assert_eq!(out, [1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn prop3_failed_skips_slot_three() {
        let mask = FaultMask::with_failed(&[3]).unwrap();
        assert_eq!(cyclic_assign(&[1.0, 2.0, 3.0], &mask).unwrap(), [1.0, 2.0, 0.0, 3.0]);
    }

    #[test]
    fn opposing_pair_failed() {
        let mask = FaultMask::with_failed(&[2, 4]).unwrap();
        assert_eq!(cyclic_assign(&[7.0, 8.0], &mask).unwrap(), [7.0, 0.0, 8.0, 0.0]);
    }

    #[test]
    fn arity_checked() {
        let mask = FaultMask::with_failed(&[2, 4]).unwrap();
        assert!(matches!(
            cyclic_assign(&[1.0, 2.0, 3.0], &mask),
            Err(Error::Arity { expected: 2, found: 3 })
        ));
    }

    #[test]
    fn zero_output_hover_feedforward() {
        let p = QuadParams::default();
        let s = QuadState::at(Vector3::new(0.0, 0.0, 5.0));
        let c = combine_actions(&[0.0; 4], &FaultMask::healthy(), &s, &PdGains::default(), &p).unwrap();
        assert_abs_diff_eq!(c.total.force, Vector3::new(0.0, 0.0, p.mass * p.gravity), epsilon = 1e-12);
        assert_abs_diff_eq!(c.total.torque, Vector3::zeros(), epsilon = 1e-15);
    }

    #[test]
    fn equal_outputs_change_only_thrust() {
        let p = QuadParams::default();
        let s = QuadState::default();
        let g = PdGains::default();
        let base = combine_actions(&[0.0; 4], &FaultMask::healthy(), &s, &g, &p).unwrap();
        let up = combine_actions(&[0.4; 4], &FaultMask::healthy(), &s, &g, &p).unwrap();
        assert!(up.total.force.z > base.total.force.z);
        assert_abs_diff_eq!(up.total.torque, base.total.torque, epsilon = 1e-15);
    }

    #[test]
    fn prop1_failed_matches_mixer() {
        let p = QuadParams::default();
        let s = QuadState::default();
        let mask = FaultMask::with_failed(&[1]).unwrap();
        let c = combine_actions(&[0.0; 3], &mask, &s, &PdGains::default(), &p).unwrap();
        let mg = p.mass * p.gravity;
        assert_abs_diff_eq!(c.total.force.z, 0.75 * mg, epsilon = 1e-12);
        // props 2,3,4 remain: τy = arm·T3, yaw = c_Q·ω²·(−1 + 1 − 1)
        let t = mg / 4.0;
        let q = p.rotor_torque_coeff * p.hover_rotor_speed().powi(2);
        assert_abs_diff_eq!(c.total.torque, Vector3::new(0.0, p.arm_length * t, -q), epsilon = 1e-12);
    }

    #[test]
    fn speed_mapping_is_clamped() {
        let p = QuadParams::default();
        assert_eq!(output_to_speed(0.0, &p), p.hover_rotor_speed());
        assert_eq!(output_to_speed(-5.0, &p), 0.0);
        assert_eq!(output_to_speed(5.0, &p), p.max_rotor_speed);
    }
}
