use crate::sim::{axis_tilt_angle, QuadState};

pub const POSITION_WEIGHT: f64 = 2e-3;
pub const RATE_WEIGHT: f64 = 1e-4;
pub const TILT_WEIGHT: f64 = 5e-4;

/// Per-step cost of a waypoint-relative state. Lower is better.
pub fn reward(state: &QuadState) -> f64 {
    POSITION_WEIGHT * state.position.norm()
        + RATE_WEIGHT * state.ang_vel.norm()
        + TILT_WEIGHT * axis_tilt_angle(state)
}

/// Discounted tail sums v_t = Σ_{i≥t} γ^{i−t} r_i + γ^{T−t} V_T.
pub fn mc_returns(rewards: &[f64], terminal_value: f64, gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = terminal_value;
    for (t, r) in rewards.iter().enumerate().rev() {
        acc = r + gamma * acc;
        out[t] = acc;
    }
    out
}
