//! Training rows, split plans and the binary dataset format.
//!
//! A dataset file is the magic `SFDS`, a version byte, the manifest length
//! as a little-endian `u64`, the UTF-8 JSON manifest and then the packed
//! rows: seven little-endian `f32` per row (six inputs, one target). The
//! manifest carries a 64-bit FNV-1a checksum of the row payload.

use std::collections::HashSet;
use std::fmt;
use std::hash::Hasher;
use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::emsolver::{
    solve_ramp, CurrentDensityHistory, PowerLawParams, RampOptions, SolverError,
};
use crate::geometry::{build_solenoid, discretize, ElementMesh, GeometryError, SolenoidConfig};

pub const MAGIC: &[u8; 4] = b"SFDS";
pub const FORMAT_VERSION: u8 = 1;
pub const ROW_VALUES: usize = 7;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a dataset file (bad magic)")]
    BadMagic,
    #[error("unsupported dataset version {found}, expected {expected}")]
    Version { found: u8, expected: u8 },
    #[error("truncated dataset file: {0}")]
    Truncated(String),
    #[error("checksum mismatch: manifest says {expected:016x}, payload hashes to {found:016x}")]
    Checksum { expected: u64, found: u64 },
    #[error("malformed manifest: {0}")]
    Manifest(String),
    #[error("record count {records} does not match the manifest ({manifest})")]
    CountMismatch { records: usize, manifest: usize },
    #[error("invalid split plan: {0}")]
    Plan(String),
    #[error("configuration N={n_turns}, Np={n_pancakes_half}: {source}")]
    Solver {
        n_turns: usize,
        n_pancakes_half: usize,
        source: SolverError,
    },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Affine maps between physical quantities and network inputs/outputs.
///
/// Inputs: `r' = (r - r_offset) r_scale`, `z' = (z - z_offset) z_scale`,
/// `t' = t t_scale`, `N' = N / n_scale`, `Np' = Np / np_scale`,
/// `p' = p / p_scale`. Output: `y = (J / j_c + 1) / 4`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub r_offset: f64,
    pub r_scale: f64,
    pub z_offset: f64,
    pub z_scale: f64,
    pub t_scale: f64,
    pub n_scale: f64,
    pub np_scale: f64,
    pub p_scale: f64,
    pub j_c: f64,
}

impl Default for Normalization {
    fn default() -> Self {
        Self {
            r_offset: 10e-3,
            r_scale: 100.0,
            z_offset: 5e-4,
            z_scale: 250.0,
            t_scale: 1.0,
            n_scale: 100.0,
            np_scale: 10.0,
            p_scale: 10.0,
            j_c: 5e10,
        }
    }
}

/// One query point in physical units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RawInputs {
    pub r: f64,
    pub z: f64,
    pub t: f64,
    pub n_turns: f64,
    pub n_pancakes_half: f64,
    pub pancake: f64,
}

impl Normalization {
    pub fn normalize_inputs(&self, raw: &RawInputs) -> [f64; 6] {
        [
            (raw.r - self.r_offset) * self.r_scale,
            (raw.z - self.z_offset) * self.z_scale,
            raw.t * self.t_scale,
            raw.n_turns / self.n_scale,
            raw.n_pancakes_half / self.np_scale,
            raw.pancake / self.p_scale,
        ]
    }

    pub fn denormalize_inputs(&self, x: &[f64; 6]) -> RawInputs {
        RawInputs {
            r: x[0] / self.r_scale + self.r_offset,
            z: x[1] / self.z_scale + self.z_offset,
            t: x[2] / self.t_scale,
            n_turns: x[3] * self.n_scale,
            n_pancakes_half: x[4] * self.np_scale,
            pancake: x[5] * self.p_scale,
        }
    }

    pub fn normalize_output(&self, current_density: f64) -> f64 {
        (current_density / self.j_c + 1.0) / 4.0
    }

    pub fn denormalize_output(&self, y: f64) -> f64 {
        (4.0 * y - 1.0) * self.j_c
    }
}

/// A training row as stored on disk.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub inputs: [f32; 6],
    pub target: f32,
}

/// Normalized, 32-bit-rounded inputs for every (snapshot, element) of a
/// mesh, snapshot major. These are exactly the inputs stored for a solver
/// history on the same mesh and times.
pub fn mesh_queries(mesh: &ElementMesh, times: &[f64], norm: &Normalization) -> Vec<[f32; 6]> {
    let config = &mesh.config;
    let mut queries = Vec::with_capacity(times.len() * mesh.len());
    for &t in times {
        for e in &mesh.elements {
            let x = norm.normalize_inputs(&RawInputs {
                r: e.r,
                z: e.z,
                t,
                n_turns: config.n_turns as f64,
                n_pancakes_half: config.n_pancakes_half as f64,
                pancake: e.pancake as f64,
            });
            queries.push(x.map(|v| v as f32));
        }
    }
    queries
}

/// Normalized rows for every (snapshot, element) of `history`, snapshot
/// major.
pub fn sample_history(history: &CurrentDensityHistory, norm: &Normalization) -> Vec<SampleRecord> {
    mesh_queries(&history.mesh, &history.times, norm)
        .into_iter()
        .zip(history.current_density.iter().flatten())
        .map(|(inputs, &j)| SampleRecord {
            inputs,
            target: norm.normalize_output(j) as f32,
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SplitKind {
    #[serde(rename = "train")]
    Train,
    #[serde(rename = "interp_val")]
    InterpVal,
    #[serde(rename = "extrap_N")]
    ExtrapN,
    #[serde(rename = "extrap_Np")]
    ExtrapNp,
    #[serde(rename = "extrap_both")]
    ExtrapBoth,
}

impl SplitKind {
    pub const ALL: [SplitKind; 5] = [
        SplitKind::Train,
        SplitKind::InterpVal,
        SplitKind::ExtrapN,
        SplitKind::ExtrapNp,
        SplitKind::ExtrapBoth,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SplitKind::Train => "train",
            SplitKind::InterpVal => "interp_val",
            SplitKind::ExtrapN => "extrap_N",
            SplitKind::ExtrapNp => "extrap_Np",
            SplitKind::ExtrapBoth => "extrap_both",
        }
    }

    pub fn is_extrapolation(self) -> bool {
        matches!(self, SplitKind::ExtrapN | SplitKind::ExtrapNp | SplitKind::ExtrapBoth)
    }
}

impl fmt::Display for SplitKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A winding configuration `(N, Np)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Winding {
    pub n_turns: usize,
    pub n_pancakes_half: usize,
}

impl Winding {
    pub fn new(n_turns: usize, n_pancakes_half: usize) -> Self {
        Self {
            n_turns,
            n_pancakes_half,
        }
    }
}

impl From<(usize, usize)> for Winding {
    fn from((n, np): (usize, usize)) -> Self {
        Self::new(n, np)
    }
}

impl fmt::Display for Winding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "N={} Np={}", self.n_turns, self.n_pancakes_half)
    }
}

/// Winding configurations per split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub train: Vec<(usize, usize)>,
    pub interp_val: Vec<(usize, usize)>,
    #[serde(rename = "extrap_N")]
    pub extrap_n: Vec<(usize, usize)>,
    #[serde(rename = "extrap_Np")]
    pub extrap_np: Vec<(usize, usize)>,
    pub extrap_both: Vec<(usize, usize)>,
}

fn grid(ns: &[usize], nps: &[usize]) -> Vec<(usize, usize)> {
    ns.iter().flat_map(|&n| nps.iter().map(move |&np| (n, np))).collect()
}

impl SplitPlan {
    /// Full-size plan: 25 training, 9 interpolation and 16 extrapolation
    /// configurations.
    pub fn full_scale() -> Self {
        Self {
            train: grid(&[10, 30, 50, 70, 100], &[1, 3, 5, 7, 10]),
            interp_val: grid(&[20, 60, 90], &[2, 6, 9]),
            extrap_n: grid(&[125, 150, 200, 250], &[10]),
            extrap_np: grid(&[100], &[12, 15, 20, 25]),
            extrap_both: vec![
                (125, 12),
                (150, 15),
                (175, 18),
                (200, 20),
                (225, 22),
                (250, 25),
                (110, 11),
                (140, 14),
            ],
        }
    }

    /// Laptop-scale plan. `(18, 3)` extrapolates 50% beyond the training
    /// maximum in both directions.
    pub fn desk() -> Self {
        Self {
            train: grid(&[4, 8, 12], &[1, 2]),
            interp_val: grid(&[6, 10], &[1, 2]),
            extrap_n: grid(&[15, 18], &[2]),
            extrap_np: grid(&[12], &[3]),
            extrap_both: vec![(15, 3), (18, 3)],
        }
    }

    pub fn split(&self, kind: SplitKind) -> &[(usize, usize)] {
        match kind {
            SplitKind::Train => &self.train,
            SplitKind::InterpVal => &self.interp_val,
            SplitKind::ExtrapN => &self.extrap_n,
            SplitKind::ExtrapNp => &self.extrap_np,
            SplitKind::ExtrapBoth => &self.extrap_both,
        }
    }

    /// Checks uniqueness, disjointness and the position of every split
    /// relative to the training range `[N_min, N_max] x [Np_min, Np_max]`.
    ///
    /// Interpolation configurations lie in the closed training box, strictly
    /// inside in at least one dimension, and are not training points.
    /// Extrapolation configurations exceed the training maximum in their
    /// declared dimension(s) and stay within the closed range in the other.
    pub fn validate(&self) -> Result<(), DatasetError> {
        let plan_error = |msg: String| Err(DatasetError::Plan(msg));
        if self.train.is_empty() {
            return plan_error("training split is empty".into());
        }
        let mut seen = HashSet::new();
        for kind in SplitKind::ALL {
            for &(n, np) in self.split(kind) {
                if n == 0 || np == 0 {
                    return plan_error(format!("{kind}: zero count in ({n}, {np})"));
                }
                if !seen.insert((n, np)) {
                    return plan_error(format!("({n}, {np}) appears more than once"));
                }
            }
        }
        let n_lo = self.train.iter().map(|c| c.0).min().unwrap();
        let n_hi = self.train.iter().map(|c| c.0).max().unwrap();
        let np_lo = self.train.iter().map(|c| c.1).min().unwrap();
        let np_hi = self.train.iter().map(|c| c.1).max().unwrap();
        let n_inside = |n: usize| (n_lo..=n_hi).contains(&n);
        let np_inside = |np: usize| (np_lo..=np_hi).contains(&np);

        for &(n, np) in &self.interp_val {
            let strict = (n > n_lo && n < n_hi) || (np > np_lo && np < np_hi);
            if !(n_inside(n) && np_inside(np) && strict) {
                return plan_error(format!("interp_val ({n}, {np}) is not inside the training range"));
            }
        }
        for &(n, np) in &self.extrap_n {
            if !(n > n_hi && np_inside(np)) {
                return plan_error(format!("extrap_N ({n}, {np}) must exceed N={n_hi} only"));
            }
        }
        for &(n, np) in &self.extrap_np {
            if !(np > np_hi && n_inside(n)) {
                return plan_error(format!("extrap_Np ({n}, {np}) must exceed Np={np_hi} only"));
            }
        }
        for &(n, np) in &self.extrap_both {
            if !(n > n_hi && np > np_hi) {
                return plan_error(format!(
                    "extrap_both ({n}, {np}) must exceed N={n_hi} and Np={np_hi}"
                ));
            }
        }
        Ok(())
    }
}

/// How solver histories are sampled into rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingSettings {
    /// Geometry template; the winding counts are overridden per configuration.
    pub base: SolenoidConfig,
    pub params: PowerLawParams,
    pub resolution: f64,
    pub snapshot_times: Vec<f64>,
    pub ramp: RampOptions,
    pub normalization: Normalization,
}

impl SamplingSettings {
    pub fn config_for(&self, winding: Winding) -> SolenoidConfig {
        let mut config = self.base;
        config.n_turns = winding.n_turns;
        config.n_pancakes_half = winding.n_pancakes_half;
        config
    }

    pub fn mesh_for(&self, winding: Winding) -> Result<ElementMesh, DatasetError> {
        let geometry = build_solenoid(&self.config_for(winding))?;
        Ok(discretize(&geometry, self.resolution)?)
    }

    pub fn points_per_tape(&self) -> Result<usize, DatasetError> {
        Ok(self.mesh_for(Winding::new(1, 1))?.points_per_tape)
    }

    /// Rows one configuration contributes.
    pub fn rows_for(&self, winding: Winding) -> Result<usize, DatasetError> {
        Ok(winding.n_turns
            * winding.n_pancakes_half
            * self.points_per_tape()?
            * self.snapshot_times.len())
    }

    pub fn solve(&self, winding: Winding) -> Result<CurrentDensityHistory, DatasetError> {
        let mesh = self.mesh_for(winding)?;
        solve_ramp(&mesh, &self.params, &self.snapshot_times, &self.ramp).map_err(|source| {
            DatasetError::Solver {
                n_turns: winding.n_turns,
                n_pancakes_half: winding.n_pancakes_half,
                source,
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigEntry {
    pub winding: Winding,
    pub rows: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub split: SplitKind,
    pub configs: Vec<ConfigEntry>,
    pub snapshot_times: Vec<f64>,
    pub points_per_tape: usize,
    pub resolution: f64,
    pub base_config: SolenoidConfig,
    pub params: PowerLawParams,
    pub normalization: Normalization,
    pub row_count: usize,
    /// FNV-1a (64-bit) of the row payload; filled in on write.
    pub checksum: u64,
}

impl DatasetManifest {
    pub fn new(split: SplitKind, windings: &[Winding], settings: &SamplingSettings) -> Result<Self, DatasetError> {
        let configs = windings
            .iter()
            .map(|&winding| Ok(ConfigEntry { winding, rows: settings.rows_for(winding)? }))
            .collect::<Result<Vec<_>, DatasetError>>()?;
        let row_count = configs.iter().map(|c| c.rows).sum();
        Ok(Self {
            split,
            configs,
            snapshot_times: settings.snapshot_times.clone(),
            points_per_tape: settings.points_per_tape()?,
            resolution: settings.resolution,
            base_config: settings.base,
            params: settings.params,
            normalization: settings.normalization,
            row_count,
            checksum: 0,
        })
    }

    pub fn windings(&self) -> Vec<Winding> {
        self.configs.iter().map(|c| c.winding).collect()
    }

    /// Row range of configuration `index` within the file.
    pub fn config_rows(&self, index: usize) -> std::ops::Range<usize> {
        let start: usize = self.configs[..index].iter().map(|c| c.rows).sum();
        start..start + self.configs[index].rows
    }

    pub fn sampling(&self, ramp: RampOptions) -> SamplingSettings {
        SamplingSettings {
            base: self.base_config,
            params: self.params,
            resolution: self.resolution,
            snapshot_times: self.snapshot_times.clone(),
            ramp,
            normalization: self.normalization,
        }
    }

    fn validate(&self) -> Result<(), DatasetError> {
        let mut seen = HashSet::new();
        for c in &self.configs {
            if !seen.insert(c.winding) {
                return Err(DatasetError::Manifest(format!("duplicate configuration {}", c.winding)));
            }
        }
        let total: usize = self.configs.iter().map(|c| c.rows).sum();
        if total != self.row_count {
            return Err(DatasetError::Manifest(format!(
                "configuration rows sum to {total}, manifest says {}",
                self.row_count
            )));
        }
        Ok(())
    }
}

/// Manifests for every split of `plan`, in split order.
pub fn build_splits(plan: &SplitPlan, settings: &SamplingSettings) -> Result<Vec<DatasetManifest>, DatasetError> {
    plan.validate()?;
    SplitKind::ALL
        .iter()
        .map(|&kind| {
            let windings: Vec<Winding> = plan.split(kind).iter().map(|&c| c.into()).collect();
            DatasetManifest::new(kind, &windings, settings)
        })
        .collect()
}

/// Solves every configuration of `manifest` (in parallel) and returns the
/// rows in manifest order together with the solver histories.
pub fn generate_split(
    manifest: &DatasetManifest,
    settings: &SamplingSettings,
) -> Result<(Vec<SampleRecord>, Vec<CurrentDensityHistory>), DatasetError> {
    let histories = manifest
        .configs
        .par_iter()
        .map(|c| settings.solve(c.winding))
        .collect::<Result<Vec<_>, _>>()?;
    let mut records = Vec::with_capacity(manifest.row_count);
    for history in &histories {
        records.extend(sample_history(history, &settings.normalization));
    }
    Ok((records, histories))
}

/// Rebuilds the solver field of configuration `index` from its stored rows.
pub fn reconstruct_history(
    records: &[SampleRecord],
    manifest: &DatasetManifest,
    index: usize,
) -> Result<CurrentDensityHistory, DatasetError> {
    let winding = manifest.configs[index].winding;
    let mesh = manifest.sampling(RampOptions::default()).mesh_for(winding)?;
    let rows = manifest.config_rows(index);
    if rows.end > records.len() || rows.len() != mesh.len() * manifest.snapshot_times.len() {
        return Err(DatasetError::CountMismatch {
            records: records.len(),
            manifest: rows.end,
        });
    }
    let norm = &manifest.normalization;
    let current_density = records[rows]
        .chunks(mesh.len())
        .map(|snapshot| {
            snapshot
                .iter()
                .map(|r| norm.denormalize_output(r.target as f64))
                .collect()
        })
        .collect();
    Ok(CurrentDensityHistory {
        mesh,
        times: manifest.snapshot_times.clone(),
        current_density,
        steps: Vec::new(),
    })
}

fn encode_rows(records: &[SampleRecord]) -> Vec<u8> {
    let mut payload = Vec::with_capacity(records.len() * ROW_VALUES * 4);
    for r in records {
        for v in r.inputs.iter().chain(std::iter::once(&r.target)) {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    payload
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hasher = fnv::FnvHasher::default();
    hasher.write(bytes);
    hasher.finish()
}

/// Writes `records` under `manifest`, whose row count and checksum are
/// updated to match the payload.
pub fn write_dataset(
    records: &[SampleRecord],
    manifest: &mut DatasetManifest,
    path: &Path,
) -> Result<(), DatasetError> {
    if records.len() != manifest.row_count {
        return Err(DatasetError::CountMismatch {
            records: records.len(),
            manifest: manifest.row_count,
        });
    }
    manifest.validate()?;
    let payload = encode_rows(records);
    manifest.checksum = fnv1a64(&payload);
    let json = serde_json::to_vec(manifest).map_err(|e| DatasetError::Manifest(e.to_string()))?;

    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    file.write_all(MAGIC)?;
    file.write_all(&[FORMAT_VERSION])?;
    file.write_all(&(json.len() as u64).to_le_bytes())?;
    file.write_all(&json)?;
    file.write_all(&payload)?;
    file.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<(Vec<SampleRecord>, DatasetManifest), DatasetError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_dataset(&bytes)
}

pub fn decode_dataset(bytes: &[u8]) -> Result<(Vec<SampleRecord>, DatasetManifest), DatasetError> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(DatasetError::BadMagic);
    }
    if bytes.len() < 13 {
        return Err(DatasetError::Truncated("header".into()));
    }
    if bytes[4] != FORMAT_VERSION {
        return Err(DatasetError::Version {
            found: bytes[4],
            expected: FORMAT_VERSION,
        });
    }
    let json_len = u64::from_le_bytes(bytes[5..13].try_into().unwrap()) as usize;
    let json_end = 13usize
        .checked_add(json_len)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| DatasetError::Truncated("manifest".into()))?;
    let manifest: DatasetManifest = serde_json::from_slice(&bytes[13..json_end])
        .map_err(|e| DatasetError::Manifest(e.to_string()))?;
    manifest.validate()?;

    let payload = &bytes[json_end..];
    let expected_len = manifest.row_count * ROW_VALUES * 4;
    if payload.len() < expected_len {
        return Err(DatasetError::Truncated(format!(
            "{} payload bytes, expected {expected_len}",
            payload.len()
        )));
    }
    if payload.len() > expected_len {
        return Err(DatasetError::Manifest(format!(
            "{} trailing bytes after the rows",
            payload.len() - expected_len
        )));
    }
    let found = fnv1a64(payload);
    if found != manifest.checksum {
        return Err(DatasetError::Checksum {
            expected: manifest.checksum,
            found,
        });
    }
    let records = payload
        .chunks_exact(ROW_VALUES * 4)
        .map(|row| {
            let mut values = [0f32; ROW_VALUES];
            for (v, b) in values.iter_mut().zip(row.chunks_exact(4)) {
                *v = f32::from_le_bytes(b.try_into().unwrap());
            }
            SampleRecord {
                inputs: [values[0], values[1], values[2], values[3], values[4], values[5]],
                target: values[6],
            }
        })
        .collect();
    Ok((records, manifest))
}
