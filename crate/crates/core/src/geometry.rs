//! Solenoid configuration and its discretization into axisymmetric loops.
//!
//! Coordinates are SI (meters). The winding is described in the upper half
//! of the meridian plane: pancake 1 sits next to the midplane `z = 0` and the
//! stack grows upward, turn 1 is the innermost turn. Each tape is a thin
//! sheet of width `tape_width` along `z` located at the radial center of its
//! turn band.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Inner winding radius of the reference magnet (m).
pub const INNER_RADIUS: f64 = 10e-3;
/// Tape width (m).
pub const TAPE_WIDTH: f64 = 4e-3;
/// Tape thickness, i.e. radial pitch of the winding (m).
pub const TAPE_THICKNESS: f64 = 0.1e-3;
/// Axial gap between neighbouring pancakes (m). Half of it separates
/// pancake 1 from the midplane.
pub const PANCAKE_GAP: f64 = 1e-3;
/// Operating current (A).
pub const OP_CURRENT: f64 = 50.0;
/// Current ramp rate (A/s).
pub const RAMP_RATE: f64 = 50.0;
/// Superconducting layer thickness used to turn sheet currents into
/// current densities (m).
pub const SC_LAYER_THICKNESS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("{name} must be positive and finite, got {value}")]
    NonPositive { name: &'static str, value: f64 },
    #[error("{name} must be at least 1")]
    ZeroCount { name: &'static str },
    #[error("resolution {resolution} m does not divide tape width {width} m")]
    IndivisibleResolution { resolution: f64, width: f64 },
}

/// Magnet parameters. `n_pancakes_half` counts the pancakes of the upper
/// half only (the quarter model); the physical magnet has twice as many.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolenoidConfig {
    pub inner_radius: f64,
    pub tape_width: f64,
    pub tape_thickness: f64,
    pub n_turns: usize,
    pub n_pancakes_half: usize,
    pub pancake_gap: f64,
    pub op_current: f64,
    pub ramp_rate: f64,
    pub sc_layer_thickness: f64,
}

impl SolenoidConfig {
    /// Reference magnet constants with the given winding counts.
    pub fn with_windings(n_turns: usize, n_pancakes_half: usize) -> Self {
        Self {
            inner_radius: INNER_RADIUS,
            tape_width: TAPE_WIDTH,
            tape_thickness: TAPE_THICKNESS,
            n_turns,
            n_pancakes_half,
            pancake_gap: PANCAKE_GAP,
            op_current: OP_CURRENT,
            ramp_rate: RAMP_RATE,
            sc_layer_thickness: SC_LAYER_THICKNESS,
        }
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let lengths = [
            ("inner_radius", self.inner_radius),
            ("tape_width", self.tape_width),
            ("tape_thickness", self.tape_thickness),
            ("pancake_gap", self.pancake_gap),
            ("op_current", self.op_current),
            ("ramp_rate", self.ramp_rate),
            ("sc_layer_thickness", self.sc_layer_thickness),
        ];
        for (name, value) in lengths {
            if !(value.is_finite() && value > 0.0) {
                return Err(GeometryError::NonPositive { name, value });
            }
        }
        if self.n_turns == 0 {
            return Err(GeometryError::ZeroCount { name: "n_turns" });
        }
        if self.n_pancakes_half == 0 {
            return Err(GeometryError::ZeroCount {
                name: "n_pancakes_half",
            });
        }
        Ok(())
    }

    /// Time to reach the operating current (s).
    pub fn ramp_duration(&self) -> f64 {
        self.op_current / self.ramp_rate
    }

    /// Transport current at time `t` of the linear ramp, clamped at the
    /// operating current.
    pub fn transport_current(&self, t: f64) -> f64 {
        (self.ramp_rate * t).min(self.op_current)
    }

    /// Critical current of one tape, `jc * width * sc_layer_thickness`.
    pub fn critical_current(&self, jc: f64) -> f64 {
        jc * self.tape_width * self.sc_layer_thickness
    }

    /// Radius of the center of turn `turn` (1-based).
    pub fn turn_radius(&self, turn: usize) -> f64 {
        self.inner_radius + (turn as f64 - 0.5) * self.tape_thickness
    }

    /// Axial extent `[lower, upper]` of pancake `pancake` (1-based).
    pub fn pancake_z_range(&self, pancake: usize) -> (f64, f64) {
        let lower =
            0.5 * self.pancake_gap + (pancake as f64 - 1.0) * (self.tape_width + self.pancake_gap);
        (lower, lower + self.tape_width)
    }
}

/// How the modeled tapes relate to the physical magnet.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Symmetry {
    /// Upper half only; the lower half is the mirror image across `z = 0`
    /// and carries identical currents. Axisymmetry about `r = 0` is implied.
    MidplaneMirror,
    /// Every tape is modeled explicitly.
    None,
}

/// One turn of one pancake.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TapePlacement {
    pub turn: usize,
    pub pancake: usize,
    /// True for tapes below the midplane of an unfolded stack.
    pub mirrored: bool,
    pub r_inner: f64,
    pub r_outer: f64,
    pub r_center: f64,
    pub z_lower: f64,
    pub z_upper: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolenoidGeometry {
    pub config: SolenoidConfig,
    pub symmetry: Symmetry,
    /// Ordered pancake-major, turn-minor.
    pub tapes: Vec<TapePlacement>,
}

pub fn build_solenoid(config: &SolenoidConfig) -> Result<SolenoidGeometry, GeometryError> {
    config.validate()?;
    let mut tapes = Vec::with_capacity(config.n_turns * config.n_pancakes_half);
    for pancake in 1..=config.n_pancakes_half {
        let (z_lower, z_upper) = config.pancake_z_range(pancake);
        for turn in 1..=config.n_turns {
            let r_inner = config.inner_radius + (turn as f64 - 1.0) * config.tape_thickness;
            tapes.push(TapePlacement {
                turn,
                pancake,
                mirrored: false,
                r_inner,
                r_outer: config.inner_radius + turn as f64 * config.tape_thickness,
                r_center: config.turn_radius(turn),
                z_lower,
                z_upper,
            });
        }
    }
    Ok(SolenoidGeometry {
        config: *config,
        symmetry: Symmetry::MidplaneMirror,
        tapes,
    })
}

impl SolenoidGeometry {
    /// Materializes the lower half of a mirrored geometry. The mirrored
    /// tapes follow the upper ones in the same order.
    pub fn unfold(&self) -> SolenoidGeometry {
        let mut tapes = self.tapes.clone();
        if self.symmetry == Symmetry::MidplaneMirror {
            tapes.extend(self.tapes.iter().map(|t| TapePlacement {
                mirrored: true,
                z_lower: -t.z_upper,
                z_upper: -t.z_lower,
                ..*t
            }));
        }
        SolenoidGeometry {
            config: self.config,
            symmetry: Symmetry::None,
            tapes,
        }
    }

    /// The same tapes without the implied mirror half, e.g. a lone tape.
    pub fn isolated(&self) -> SolenoidGeometry {
        SolenoidGeometry {
            symmetry: Symmetry::None,
            ..self.clone()
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("geometry serializes")
    }
}

/// One collocation loop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeshElement {
    /// Index of the owning tape in [`ElementMesh::tapes`].
    pub tape: usize,
    pub turn: usize,
    pub pancake: usize,
    pub mirrored: bool,
    pub r: f64,
    pub z: f64,
    /// Axial width of the tape strip attributed to this loop.
    pub width: f64,
    /// Axial extent `[strip_lo, strip_hi]` of that strip.
    pub strip_lo: f64,
    pub strip_hi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElementMesh {
    pub config: SolenoidConfig,
    pub symmetry: Symmetry,
    pub points_per_tape: usize,
    pub tapes: Vec<TapePlacement>,
    /// Tape-major; within a tape ordered by increasing `z`.
    pub elements: Vec<MeshElement>,
}

impl ElementMesh {
    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn n_tapes(&self) -> usize {
        self.tapes.len()
    }

    pub fn tape_elements(&self, tape: usize) -> std::ops::Range<usize> {
        let start = tape * self.points_per_tape;
        start..start + self.points_per_tape
    }
}

/// Splits every tape into `tape_width / resolution + 1` edge-inclusive
/// collocation loops. Interior loops own one spacing of tape width, the two
/// end loops half a spacing each.
pub fn discretize(
    geometry: &SolenoidGeometry,
    resolution: f64,
) -> Result<ElementMesh, GeometryError> {
    let width = geometry.config.tape_width;
    if !(resolution.is_finite() && resolution > 0.0) {
        return Err(GeometryError::NonPositive {
            name: "resolution",
            value: resolution,
        });
    }
    let ratio = width / resolution;
    let intervals = ratio.round();
    if intervals < 1.0 || (ratio - intervals).abs() > 1e-9 * ratio.max(1.0) {
        return Err(GeometryError::IndivisibleResolution { resolution, width });
    }
    let intervals = intervals as usize;
    let points_per_tape = intervals + 1;
    let spacing = width / intervals as f64;

    let mut elements = Vec::with_capacity(geometry.tapes.len() * points_per_tape);
    for (tape_index, tape) in geometry.tapes.iter().enumerate() {
        let span = tape.z_upper - tape.z_lower;
        let heights: Vec<f64> = (0..points_per_tape)
            .map(|j| collocation_z(tape, span, j, intervals))
            .collect();
        for (j, &z) in heights.iter().enumerate() {
            let edge = j == 0 || j == intervals;
            elements.push(MeshElement {
                tape: tape_index,
                turn: tape.turn,
                pancake: tape.pancake,
                mirrored: tape.mirrored,
                r: tape.r_center,
                z,
                width: if edge { 0.5 * spacing } else { spacing },
                strip_lo: if j == 0 { z } else { 0.5 * (heights[j - 1] + z) },
                strip_hi: if j == intervals { z } else { 0.5 * (z + heights[j + 1]) },
            });
        }
    }
    Ok(ElementMesh {
        config: geometry.config,
        symmetry: geometry.symmetry,
        points_per_tape,
        tapes: geometry.tapes.clone(),
        elements,
    })
}

/// Mirrored tapes reuse the upper tape's heights negated, so mirror pairs
/// are exact.
fn collocation_z(tape: &TapePlacement, span: f64, j: usize, intervals: usize) -> f64 {
    let upper_half = |lower: f64, upper: f64, k: usize| {
        if k == intervals {
            upper
        } else {
            lower + span * (k as f64 / intervals as f64)
        }
    };
    if tape.mirrored {
        -upper_half(-tape.z_upper, -tape.z_lower, intervals - j)
    } else {
        upper_half(tape.z_lower, tape.z_upper, j)
    }
}
