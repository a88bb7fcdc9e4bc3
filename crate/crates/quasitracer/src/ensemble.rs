//! Seeded collections of planar sample paths on a shared uniform macro
//! time grid. Persistence uses the long CSV format `path_id,t,x1,x2`.

use crate::error::{Error, Result};
use crate::field::Vec2;
use std::io::Write;

/// Uniform macro output grid: `points_per_unit` intervals per unit of time,
/// at least one interval, endpoints included.
pub fn macro_grid(t0: f64, t1: f64, points_per_unit: usize) -> Vec<f64> {
    let span = t1 - t0;
    let k = ((span * points_per_unit as f64).round() as usize).max(1);
    (0..=k).map(|i| t0 + span * i as f64 / k as f64).collect()
}

/// Paths sampled on a common time grid; `paths[p][m]` is path `p` at
/// `times[m]`.
#[derive(Clone, Debug)]
pub struct TrajectoryEnsemble {
    pub label: String,
    pub times: Vec<f64>,
    pub paths: Vec<Vec<Vec2>>,
}

impl TrajectoryEnsemble {
    pub fn new(label: impl Into<String>, times: Vec<f64>, paths: Vec<Vec<Vec2>>) -> Result<Self> {
        if times.len() < 2 {
            return Err(Error::invalid("time grid needs at least two points"));
        }
        if paths.is_empty() {
            return Err(Error::invalid("ensemble needs at least one path"));
        }
        if paths.iter().any(|p| p.len() != times.len()) {
            return Err(Error::invalid("every path must be sampled on the shared grid"));
        }
        Ok(Self {
            label: label.into(),
            times,
            paths,
        })
    }

    pub fn n_paths(&self) -> usize {
        self.paths.len()
    }

    pub fn n_times(&self) -> usize {
        self.times.len()
    }

    /// Cloud of positions at time index `m`, in path-id order.
    pub fn positions_at(&self, m: usize) -> Vec<Vec2> {
        self.paths.iter().map(|p| p[m]).collect()
    }

    pub fn endpoints(&self) -> Vec<Vec2> {
        self.positions_at(self.times.len() - 1)
    }

    /// Long-format dump, one row per (path, time) pair, path-major order.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["path_id", "t", "x1", "x2"])?;
        for (pid, path) in self.paths.iter().enumerate() {
            for (t, x) in self.times.iter().zip(path) {
                w.serialize((pid, t, x[0], x[1]))?;
            }
        }
        w.flush()?;
        Ok(())
    }
}
