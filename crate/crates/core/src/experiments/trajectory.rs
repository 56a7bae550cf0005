use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::ppo::Scenario;
use crate::sim::{axis_tilt_angle, QuadState};

/// One control step of a flight, inertial frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub t_s: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub vx: f64,
    pub vy: f64,
    pub vz: f64,
    pub wx: f64,
    pub wy: f64,
    pub wz: f64,
    pub alpha: f64,
    pub omega1: f64,
    pub omega2: f64,
    pub omega3: f64,
    pub omega4: f64,
    pub active_controller: String,
    pub reward: f64,
}

impl TrajectoryRow {
    pub fn new(t_s: f64, state: &QuadState, rotors: [f64; 4], active: Scenario, reward: f64) -> Self {
        let (p, v, w) = (state.position, state.lin_vel, state.ang_vel);
        Self {
            t_s,
            x: p.x,
            y: p.y,
            z: p.z,
            vx: v.x,
            vy: v.y,
            vz: v.z,
            wx: w.x,
            wy: w.y,
            wz: w.z,
            alpha: axis_tilt_angle(state),
            omega1: rotors[0],
            omega2: rotors[1],
            omega3: rotors[2],
            omega4: rotors[3],
            active_controller: active.file_stem(),
            reward,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrajectoryLog {
    pub rows: Vec<TrajectoryRow>,
}

impl TrajectoryLog {
    pub fn to_writer<W: Write>(&self, w: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(w);
        if self.rows.is_empty() {
            w.write_record([
                "t_s", "x", "y", "z", "vx", "vy", "vz", "wx", "wy", "wz", "alpha", "omega1", "omega2", "omega3",
                "omega4", "active_controller", "reward",
            ])?;
        }
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn from_reader<R: Read>(r: R) -> Result<Self> {
        let rows = csv::Reader::from_reader(r)
            .deserialize()
            .collect::<std::result::Result<Vec<TrajectoryRow>, _>>()?;
        Ok(Self { rows })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_writer(std::io::BufWriter::new(std::fs::File::create(path)?))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_reader(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}
