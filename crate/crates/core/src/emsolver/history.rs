//! Solver output and magnetization loss.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::powerlaw::PowerLawParams;
use super::SolverError;
use crate::geometry::{ElementMesh, Symmetry};

/// Accepted time step of a ramp, kept for auditing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub time: f64,
    pub dt: f64,
    pub iterations: usize,
    pub constraint_error: f64,
}

/// Loop current densities `J_phi` (A/m^2, referred to the superconducting
/// layer) at a sequence of snapshot times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurrentDensityHistory {
    pub mesh: ElementMesh,
    pub times: Vec<f64>,
    /// `current_density[snapshot][element]`.
    pub current_density: Vec<Vec<f64>>,
    /// Empty for histories that did not come from the time stepper.
    pub steps: Vec<StepRecord>,
}

impl CurrentDensityHistory {
    pub fn n_snapshots(&self) -> usize {
        self.times.len()
    }

    /// Element currents (A) at snapshot `index`.
    pub fn element_currents(&self, index: usize) -> Vec<f64> {
        let delta = self.mesh.config.sc_layer_thickness;
        self.current_density[index]
            .iter()
            .zip(&self.mesh.elements)
            .map(|(j, e)| j * e.width * delta)
            .collect()
    }

    /// Fraction of the loops of `pancake` (upper half) whose `|J|` exceeds
    /// `threshold * j_c` at snapshot `index`.
    pub fn penetration_fraction(&self, index: usize, pancake: usize, threshold: f64, j_c: f64) -> f64 {
        let mut total = 0usize;
        let mut above = 0usize;
        for (j, e) in self.current_density[index].iter().zip(&self.mesh.elements) {
            if e.pancake == pancake && !e.mirrored {
                total += 1;
                if j.abs() > threshold * j_c {
                    above += 1;
                }
            }
        }
        if total == 0 {
            0.0
        } else {
            above as f64 / total as f64
        }
    }

    /// Writes one CSV per snapshot with columns `turn,pancake,r,z,Jphi` (SI).
    pub fn write_snapshot_csvs(&self, dir: &Path, prefix: &str) -> Result<Vec<PathBuf>, SolverError> {
        std::fs::create_dir_all(dir)?;
        let mut written = Vec::with_capacity(self.times.len());
        for (index, (time, field)) in self.times.iter().zip(&self.current_density).enumerate() {
            let mut text = String::from("turn,pancake,r,z,Jphi\n");
            for (e, j) in self.mesh.elements.iter().zip(field) {
                let _ = writeln!(text, "{},{},{:e},{:e},{:e}", e.turn, e.pancake, e.r, e.z, j);
            }
            let path = dir.join(format!("{prefix}_{index:03}_t{time:.4}.csv"));
            std::fs::write(&path, text)?;
            written.push(path);
        }
        Ok(written)
    }
}

/// Instantaneous dissipated power `sum E(J) J V_element` (W) at every
/// snapshot, doubled for midplane-mirrored meshes.
pub fn dissipation_power(history: &CurrentDensityHistory, params: &PowerLawParams) -> Vec<f64> {
    let delta = history.mesh.config.sc_layer_thickness;
    let halves = match history.mesh.symmetry {
        Symmetry::MidplaneMirror => 2.0,
        Symmetry::None => 1.0,
    };
    history
        .current_density
        .iter()
        .map(|field| {
            let sum: f64 = field
                .iter()
                .zip(&history.mesh.elements)
                .map(|(&j, e)| params.dissipation_density(j) * 2.0 * PI * e.r * e.width * delta)
                .sum();
            halves * sum
        })
        .collect()
}

/// Energy dissipated in the superconductor over the recorded snapshots (J),
/// by the trapezoidal rule in time.
pub fn magnetization_loss(
    history: &CurrentDensityHistory,
    params: &PowerLawParams,
) -> Result<f64, SolverError> {
    if history.times.len() < 2 {
        return Err(SolverError::TooFewSnapshots(history.times.len()));
    }
    let power = dissipation_power(history, params);
    Ok(history
        .times
        .windows(2)
        .zip(power.windows(2))
        .map(|(t, p)| 0.5 * (t[1] - t[0]) * (p[0] + p[1]))
        .sum())
}
