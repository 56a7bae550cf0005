//! Fault-tolerant quadcopter control.
//!
//! A rigid-body simulator with propeller fault injection, PPO-trained
//! controllers for 4, 3 and 2 (opposing) functional propellers, LSTM fault
//! detectors and a supervisor that switches controllers mid-flight.

pub mod error;
pub mod experiments;
pub mod fd;
pub mod hash;
pub mod nn;
pub mod pd;
pub mod ppo;
pub mod sim;
pub mod supervisor;

pub use error::{Error, Result};
pub use pd::{pd_torque, PdGains};
pub use sim::{FaultMask, QuadParams, QuadState, RotorCommand, Wrench};
