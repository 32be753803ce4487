//! Pipeline configuration file (TOML).

use std::path::{Path, PathBuf};

use hts_surrogate::autonet::{LrSchedule, NetworkArch, NetworkKind};
use hts_surrogate::dataset::{Normalization, SamplingSettings, SplitKind, SplitPlan, Winding};
use hts_surrogate::emsolver::{PowerLawParams, RampOptions};
use hts_surrogate::geometry::{self, SolenoidConfig};
use hts_surrogate::trainer::TrainHyper;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Magnet constants; winding counts come from the split plan.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometrySection {
    pub inner_radius: f64,
    pub tape_width: f64,
    pub tape_thickness: f64,
    pub pancake_gap: f64,
    pub op_current: f64,
    pub ramp_rate: f64,
    pub sc_layer_thickness: f64,
}

impl Default for GeometrySection {
    fn default() -> Self {
        Self {
            inner_radius: geometry::INNER_RADIUS,
            tape_width: geometry::TAPE_WIDTH,
            tape_thickness: geometry::TAPE_THICKNESS,
            pancake_gap: geometry::PANCAKE_GAP,
            op_current: geometry::OP_CURRENT,
            ramp_rate: geometry::RAMP_RATE,
            sc_layer_thickness: geometry::SC_LAYER_THICKNESS,
        }
    }
}

impl GeometrySection {
    pub fn base_config(&self) -> SolenoidConfig {
        SolenoidConfig {
            inner_radius: self.inner_radius,
            tape_width: self.tape_width,
            tape_thickness: self.tape_thickness,
            n_turns: 1,
            n_pancakes_half: 1,
            pancake_gap: self.pancake_gap,
            op_current: self.op_current,
            ramp_rate: self.ramp_rate,
            sc_layer_thickness: self.sc_layer_thickness,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    /// Collocation spacing along the tape width (m).
    pub resolution: f64,
    /// Snapshots, uniformly spaced over the ramp including both ends.
    pub snapshots: usize,
    /// Time-step cap of the solver (s).
    pub max_dt: f64,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            resolution: 2e-4,
            snapshots: 11,
            max_dt: RampOptions::default().max_dt.unwrap_or(5e-3),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSpec {
    pub kind: NetworkKind,
    /// Layer count for plain networks, residual block count otherwise.
    pub depth: usize,
    pub hidden_width: usize,
}

impl ArchSpec {
    pub fn arch(&self) -> NetworkArch {
        match self.kind {
            NetworkKind::Plain => NetworkArch::plain(self.depth, self.hidden_width),
            NetworkKind::Residual => NetworkArch::residual(self.depth, self.hidden_width),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    pub batch_size_train: usize,
    pub batch_size_val: usize,
    pub max_epochs: usize,
    pub shuffle: bool,
    pub lr_initial: f64,
    pub lr_factor: f64,
    pub lr_period: usize,
    pub divergence_factor: f64,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let h = TrainHyper::default();
        Self {
            batch_size_train: h.batch_size_train,
            batch_size_val: h.batch_size_val,
            max_epochs: h.max_epochs,
            shuffle: h.shuffle,
            lr_initial: h.lr.initial,
            lr_factor: h.lr.factor,
            lr_period: h.lr.period,
            divergence_factor: h.divergence_factor,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub archs: Vec<ArchSpec>,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    /// Error maps cover points where `|J_ref| / Jc` exceeds this.
    pub error_threshold: f64,
    pub batch_size: usize,
    /// Snapshot indices for which error maps are written.
    pub map_snapshots: Vec<usize>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            error_threshold: hts_surrogate::analysis::DEFAULT_ERROR_THRESHOLD,
            batch_size: 8192,
            map_snapshots: vec![5, 10],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchSection {
    pub configs: Vec<(usize, usize)>,
    pub repetitions: usize,
}

impl Default for BenchSection {
    fn default() -> Self {
        Self {
            configs: vec![(8, 2), (12, 3), (16, 4)],
            repetitions: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub output_dir: PathBuf,
    pub seed: u64,
    #[serde(default)]
    pub geometry: GeometrySection,
    #[serde(default)]
    pub power_law: PowerLawParams,
    #[serde(default)]
    pub normalization: Normalization,
    #[serde(default)]
    pub dataset: DatasetSection,
    pub splits: SplitPlan,
    pub network: ArchSpec,
    #[serde(default)]
    pub training: TrainingSection,
    pub sweep: SweepSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub bench: BenchSection,
}

impl PipelineConfig {
    /// Laptop-scale setup: 6 training windings, 21 points per tape, 11
    /// snapshots.
    pub fn desk() -> Self {
        Self {
            output_dir: PathBuf::from("runs/desk"),
            seed: 0,
            geometry: GeometrySection::default(),
            power_law: PowerLawParams::default(),
            normalization: Normalization::default(),
            dataset: DatasetSection::default(),
            splits: SplitPlan::desk(),
            network: ArchSpec { kind: NetworkKind::Residual, depth: 3, hidden_width: 64 },
            training: TrainingSection {
                batch_size_train: 32,
                lr_initial: 2e-3,
                ..TrainingSection::default()
            },
            sweep: SweepSection {
                archs: vec![
                    ArchSpec { kind: NetworkKind::Residual, depth: 3, hidden_width: 64 },
                    ArchSpec { kind: NetworkKind::Plain, depth: 6, hidden_width: 64 },
                ],
                seeds: vec![0, 1],
            },
            eval: EvalSection::default(),
            bench: BenchSection::default(),
        }
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let config: Self = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |msg: String| Err(CliError::Config(msg));
        self.geometry.base_config().validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.power_law.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.splits.validate().map_err(|e| CliError::Config(e.to_string()))?;
        if self.dataset.snapshots < 2 {
            return bad("dataset.snapshots must be at least 2".into());
        }
        if !(self.dataset.max_dt > 0.0) {
            return bad("dataset.max_dt must be positive".into());
        }
        self.sampling().mesh_for(Winding::new(1, 1)).map_err(|e| CliError::Config(e.to_string()))?;
        self.network.arch().validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.hyper().validate().map_err(|e| CliError::Config(e.to_string()))?;
        if self.sweep.archs.is_empty() || self.sweep.seeds.is_empty() {
            return bad("sweep needs at least one architecture and one seed".into());
        }
        for a in &self.sweep.archs {
            a.arch().validate().map_err(|e| CliError::Config(e.to_string()))?;
        }
        if self.eval.batch_size == 0 {
            return bad("eval.batch_size must be at least 1".into());
        }
        if let Some(&s) = self.eval.map_snapshots.iter().find(|&&s| s >= self.dataset.snapshots) {
            return bad(format!("eval.map_snapshots entry {s} exceeds the snapshot count"));
        }
        if self.bench.repetitions < 3 {
            return bad("bench.repetitions must be at least 3".into());
        }
        if self.bench.configs.iter().any(|&(n, np)| n == 0 || np == 0) {
            return bad("bench configurations need at least one turn and one pancake".into());
        }
        Ok(())
    }

    pub fn snapshot_times(&self) -> Vec<f64> {
        let duration = self.geometry.base_config().ramp_duration();
        let last = (self.dataset.snapshots - 1) as f64;
        (0..self.dataset.snapshots).map(|k| duration * k as f64 / last).collect()
    }

    pub fn sampling(&self) -> SamplingSettings {
        SamplingSettings {
            base: self.geometry.base_config(),
            params: self.power_law,
            resolution: self.dataset.resolution,
            snapshot_times: self.snapshot_times(),
            ramp: RampOptions { max_dt: Some(self.dataset.max_dt), ..RampOptions::default() },
            normalization: self.normalization,
        }
    }

    pub fn hyper(&self) -> TrainHyper {
        let t = &self.training;
        TrainHyper {
            batch_size_train: t.batch_size_train,
            batch_size_val: t.batch_size_val,
            max_epochs: t.max_epochs,
            seed: self.seed,
            shuffle: t.shuffle,
            lr: LrSchedule { initial: t.lr_initial, factor: t.lr_factor, period: t.lr_period },
            divergence_factor: t.divergence_factor,
        }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.output_dir.join("data")
    }

    pub fn dataset_path(&self, split: SplitKind) -> PathBuf {
        self.data_dir().join(format!("{}.sfds", split.name()))
    }

    pub fn model_dir(&self) -> PathBuf {
        self.output_dir.join("models")
    }

    pub fn train_run_path(&self) -> PathBuf {
        self.model_dir().join(format!("{}_seed{}_run.json", self.network.arch().label(), self.seed))
    }
}
