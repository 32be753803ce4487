//! Coaxial loop inductances and the dense element inductance matrix.

use std::f64::consts::PI;

use rayon::prelude::*;

use super::elliptic::agm_kernel;
use super::SolverError;
use crate::geometry::{ElementMesh, Symmetry};

/// Vacuum permeability (H/m).
pub const MU_0: f64 = 4.0e-7 * PI;

/// Geometric-mean distance of a thin straight segment of unit length from
/// itself, `exp(-3/2)`.
pub const SEGMENT_GMD_RATIO: f64 = 0.223_130_160_148_429_83;

/// A circular filament coaxial with the `z` axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Loop {
    pub r: f64,
    pub z: f64,
}

impl Loop {
    pub fn new(r: f64, z: f64) -> Self {
        Self { r, z }
    }

    pub fn mirrored(self) -> Self {
        Self { r: self.r, z: -self.z }
    }
}

/// Mutual inductance of two coaxial filaments,
/// `mu0 sqrt(ra rb) [(2/k - k) K(k) - (2/k) E(k)]` with
/// `k^2 = 4 ra rb / ((ra + rb)^2 + (za - zb)^2)`.
pub fn mutual_inductance(a: Loop, b: Loop) -> Result<f64, SolverError> {
    for r in [a.r, b.r] {
        if !(r.is_finite() && r > 0.0) {
            return Err(SolverError::InvalidInput(format!(
                "loop radius must be positive, got {r}"
            )));
        }
    }
    if !(a.z.is_finite() && b.z.is_finite()) {
        return Err(SolverError::InvalidInput("loop height must be finite".into()));
    }
    if a.r == b.r && a.z == b.z {
        return Err(SolverError::CoincidentLoops { r: a.r, z: a.z });
    }
    Ok(mutual_unchecked(a, b))
}

pub(crate) fn mutual_unchecked(a: Loop, b: Loop) -> f64 {
    let dz = a.z - b.z;
    let dr = a.r - b.r;
    let sum = a.r + b.r;
    let denom = sum * sum + dz * dz;
    let m = 4.0 * a.r * b.r / denom;
    let m1 = (dr * dr + dz * dz) / denom;
    let (k_int, tail) = agm_kernel(m, m1);
    MU_0 * (a.r * b.r).sqrt() * k_int * tail / m.sqrt()
}

/// Self inductance of a loop carrying a thin strip of axial width
/// `element_width`, taken as the mutual inductance of two loops separated
/// by the strip's geometric-mean distance `width * exp(-3/2)`.
pub fn self_inductance(a: Loop, element_width: f64) -> Result<f64, SolverError> {
    if !(element_width.is_finite() && element_width > 0.0) {
        return Err(SolverError::InvalidInput(format!(
            "element width must be positive, got {element_width}"
        )));
    }
    if !(a.r.is_finite() && a.r > 0.0) {
        return Err(SolverError::InvalidInput(format!(
            "loop radius must be positive, got {}",
            a.r
        )));
    }
    if element_width >= a.r {
        return Err(SolverError::InvalidInput(format!(
            "element width {element_width} must be much smaller than radius {}",
            a.r
        )));
    }
    Ok(mutual_unchecked(
        a,
        Loop::new(a.r, a.z + SEGMENT_GMD_RATIO * element_width),
    ))
}

/// Dense symmetric loop-inductance matrix (H), row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct InductanceMatrix {
    n: usize,
    data: Vec<f64>,
}

impl InductanceMatrix {
    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// `out = L x`.
    pub fn mul_vec(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.n);
        for (o, row) in out.iter_mut().zip(self.data.chunks_exact(self.n)) {
            *o = row.iter().zip(x).map(|(l, v)| l * v).sum();
        }
    }
}

/// Loops closer than this many strip widths are coupled through the
/// width-averaged kernel instead of the filament formula; over the next
/// `BLEND_WIDTHS` the two are blended linearly so the coupling stays
/// continuous in the separation.
const NEAR_FIELD_WIDTHS: f64 = 4.0;
const BLEND_WIDTHS: f64 = 2.0;
const NEAR_FIELD_ORDER: usize = 8;

/// Axial strip of a tape at radius `r` spanning `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Strip {
    pub r: f64,
    pub lo: f64,
    pub hi: f64,
}

impl Strip {
    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn center(&self) -> Loop {
        Loop::new(self.r, 0.5 * (self.lo + self.hi))
    }

    pub fn mirrored(self) -> Self {
        Self {
            r: self.r,
            lo: -self.hi,
            hi: -self.lo,
        }
    }
}

/// Mutual inductance of two uniformly loaded, non-overlapping strips. Far
/// pairs use the filament formula between strip centers; near pairs average
/// the filament kernel over both widths by Gauss-Legendre quadrature.
pub fn strip_mutual_inductance(a: Strip, b: Strip) -> f64 {
    // Fixed argument order makes the result bit-symmetric.
    let (a, b) = if precedes(b, a) { (b, a) } else { (a, b) };
    let (ca, cb) = (a.center(), b.center());
    let widths = (ca.r - cb.r).hypot(ca.z - cb.z) / a.width().max(b.width());
    let blend = ((widths - NEAR_FIELD_WIDTHS) / BLEND_WIDTHS).clamp(0.0, 1.0);
    if blend == 1.0 {
        return mutual_unchecked(ca, cb);
    }
    let nodes = gauss_legendre_unit(NEAR_FIELD_ORDER);
    let mut total = 0.0;
    for &(xa, wa) in &nodes {
        let za = a.lo + a.width() * xa;
        for &(xb, wb) in &nodes {
            let zb = b.lo + b.width() * xb;
            total += wa * wb * mutual_unchecked(Loop::new(a.r, za), Loop::new(b.r, zb));
        }
    }
    if blend > 0.0 {
        total += blend * (mutual_unchecked(ca, cb) - total);
    }
    total
}

fn precedes(a: Strip, b: Strip) -> bool {
    (a.r, a.lo, a.hi) < (b.r, b.lo, b.hi)
}

/// Coupling of `a` to the image of `b`, evaluated identically for `(b, a)`.
fn image_mutual(a: Strip, b: Strip) -> f64 {
    if precedes(b, a) {
        strip_mutual_inductance(b, a.mirrored())
    } else {
        strip_mutual_inductance(a, b.mirrored())
    }
}

/// Gauss-Legendre nodes and weights on [0, 1], by Newton on P_n.
pub(crate) fn gauss_legendre_unit(order: usize) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(order);
    for i in 0..order {
        let mut x = (PI * (i as f64 + 0.75) / (order as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=order {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = order as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        out.push((0.5 * (x + 1.0), 0.5 * w));
    }
    out
}

/// `L[i][j] = M(i, j) + M(i, mirror(j))`, with the self term on the
/// diagonal. Each loop carries the strip `[strip_lo, strip_hi]` of its tape.
/// The image terms are present only for midplane-mirrored meshes.
pub fn assemble_inductance_matrix(mesh: &ElementMesh) -> Result<InductanceMatrix, SolverError> {
    let n = mesh.len();
    let mirror = mesh.symmetry == Symmetry::MidplaneMirror;
    let strips: Vec<Strip> = mesh
        .elements
        .iter()
        .map(|e| Strip {
            r: e.r,
            lo: e.strip_lo,
            hi: e.strip_hi,
        })
        .collect();
    for s in &strips {
        if mirror && s.lo < 0.0 {
            return Err(SolverError::InvalidInput(
                "mirrored mesh has a strip below the mirror plane".into(),
            ));
        }
        // Validates radius and width once so the parallel fill below can
        // use the unchecked kernels.
        self_inductance(s.center(), s.width())?;
    }
    let mut data = vec![0.0; n * n];
    data.par_chunks_mut(n.max(1))
        .enumerate()
        .for_each(|(i, row)| {
            let a = strips[i];
            for j in i..n {
                let b = strips[j];
                let mut value = if i == j {
                    let c = a.center();
                    mutual_unchecked(c, Loop::new(c.r, c.z + SEGMENT_GMD_RATIO * a.width()))
                } else {
                    strip_mutual_inductance(a, b)
                };
                if mirror {
                    value += image_mutual(a, b);
                }
                row[j] = value;
            }
        });
    for i in 0..n {
        for j in 0..i {
            data[i * n + j] = data[j * n + i];
        }
    }
    Ok(InductanceMatrix { n, data })
}
