//! Evaluation of a trained surrogate against solver output: split losses,
//! thresholded relative-error maps, magnetization-loss errors and timing.

use std::fmt::Write as _;
use std::time::Instant;

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autonet::{AutonetError, InferenceNet, NetworkParams};
use crate::dataset::{mesh_queries, DatasetError, Normalization, SamplingSettings, SplitKind, Winding};
use crate::emsolver::{magnetization_loss, solve_ramp, CurrentDensityHistory, PowerLawParams, SolverError};
use crate::geometry::ElementMesh;
use crate::trainer::{evaluate_loss, TrainData};

/// Error maps only cover points where the reference exceeds this fraction
/// of `Jc`.
pub const DEFAULT_ERROR_THRESHOLD: f64 = 0.4;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error(transparent)]
    Network(#[from] AutonetError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error("empty input: {0}")]
    Empty(String),
    #[error("grids are not congruent: {0}")]
    Shape(String),
}

/// Axis-aligned box of normalized inputs seen in training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InputDomain {
    pub lo: [f64; 6],
    pub hi: [f64; 6],
}

impl InputDomain {
    pub fn from_data(data: &TrainData) -> Option<Self> {
        if data.is_empty() {
            return None;
        }
        let mut lo = [f64::INFINITY; 6];
        let mut hi = [f64::NEG_INFINITY; 6];
        for row in data.inputs.rows() {
            for k in 0..6 {
                lo[k] = lo[k].min(row[k]);
                hi[k] = hi[k].max(row[k]);
            }
        }
        Some(Self { lo, hi })
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter().zip(self.lo.iter().zip(&self.hi)).all(|(v, (lo, hi))| lo <= v && v <= hi)
    }
}

#[derive(Debug, Clone)]
pub struct FieldPrediction {
    pub history: CurrentDensityHistory,
    /// Queries outside the training input box; these are extrapolations.
    pub out_of_domain: usize,
    pub queries: usize,
}

/// Surrogate current density on the collocation points of `mesh` at
/// `times`, evaluated in 32-bit tiles by [`InferenceNet`].
pub fn predict_field(
    params: &NetworkParams,
    mesh: &ElementMesh,
    times: &[f64],
    norm: &Normalization,
    domain: Option<&InputDomain>,
) -> Result<FieldPrediction, AnalysisError> {
    if mesh.is_empty() || times.is_empty() {
        return Err(AnalysisError::Empty("query grid".into()));
    }
    let queries = mesh_queries(mesh, times, norm);
    let out_of_domain = domain.map_or(0, |d| {
        queries.iter().filter(|q| !d.contains(&q.map(f64::from))).count()
    });
    let inputs = ArrayView2::from_shape((queries.len(), 6), queries.as_flattened())
        .map_err(|e| AnalysisError::Shape(e.to_string()))?;
    let outputs = InferenceNet::new(params).predict(inputs)?;
    let current_density = outputs
        .as_slice()
        .expect("fresh array is contiguous")
        .chunks(mesh.len())
        .map(|snapshot| snapshot.iter().map(|&y| norm.denormalize_output(y as f64)).collect())
        .collect();
    Ok(FieldPrediction {
        history: CurrentDensityHistory {
            mesh: mesh.clone(),
            times: times.to_vec(),
            current_density,
            steps: Vec::new(),
        },
        out_of_domain,
        queries: queries.len(),
    })
}

/// Size-weighted mean squared error of the model over a split.
pub fn eval_split(params: &NetworkParams, data: &TrainData, batch_size: usize) -> Result<f64, AnalysisError> {
    if data.is_empty() {
        return Err(AnalysisError::Empty("split has no rows".into()));
    }
    Ok(evaluate_loss(params, data, batch_size)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitLoss {
    pub split: SplitKind,
    pub rows: usize,
    pub mse: f64,
}

/// Relative error on a (snapshot x element) grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorMap {
    pub snapshots: usize,
    pub elements: usize,
    pub threshold: f64,
    /// Snapshot major; `None` where the reference is below the threshold.
    pub values: Vec<Option<f64>>,
    pub evaluated: usize,
    pub max: Option<f64>,
    pub mean: Option<f64>,
}

impl ErrorMap {
    pub fn get(&self, snapshot: usize, element: usize) -> Option<f64> {
        self.values[snapshot * self.elements + element]
    }

    pub fn rows(&self) -> Vec<Vec<Option<f64>>> {
        self.values.chunks(self.elements.max(1)).map(|r| r.to_vec()).collect()
    }

    /// `snapshot,element,relative_error` with empty cells where masked.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("snapshot,element,relative_error\n");
        for (k, v) in self.values.iter().enumerate() {
            let cell = v.map(|e| format!("{e:e}")).unwrap_or_default();
            let _ = writeln!(out, "{},{},{cell}", k / self.elements, k % self.elements);
        }
        out
    }
}

/// `|pred - ref| / |ref|` wherever `|ref| / j_c` exceeds `threshold`.
pub fn relative_error_map(
    predicted: &CurrentDensityHistory,
    reference: &CurrentDensityHistory,
    j_c: f64,
    threshold: f64,
) -> Result<ErrorMap, AnalysisError> {
    let snapshots = reference.current_density.len();
    let elements = reference.mesh.len();
    if predicted.current_density.len() != snapshots
        || predicted.current_density.iter().any(|f| f.len() != elements)
        || reference.current_density.iter().any(|f| f.len() != elements)
    {
        return Err(AnalysisError::Shape("prediction and reference differ in size".into()));
    }
    let values: Vec<Option<f64>> = predicted
        .current_density
        .iter()
        .flatten()
        .zip(reference.current_density.iter().flatten())
        .map(|(&p, &r)| (r.abs() / j_c > threshold).then(|| (p - r).abs() / r.abs()))
        .collect();
    let evaluated: Vec<f64> = values.iter().flatten().copied().collect();
    let max = evaluated.iter().copied().reduce(f64::max);
    let mean = (!evaluated.is_empty()).then(|| evaluated.iter().sum::<f64>() / evaluated.len() as f64);
    Ok(ErrorMap {
        snapshots,
        elements,
        threshold,
        evaluated: evaluated.len(),
        values,
        max,
        mean,
    })
}

/// `|surrogate - reference| / reference`; `None` when the reference is zero.
pub fn loss_relative_error(surrogate: f64, reference: f64) -> Option<f64> {
    (reference != 0.0).then(|| (surrogate - reference).abs() / reference.abs())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossErrorEntry {
    pub winding: Winding,
    pub solver_loss: f64,
    pub surrogate_loss: f64,
    pub relative_error: Option<f64>,
    pub out_of_domain: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

/// Magnetization-loss error of the surrogate for each solver history. The
/// surrogate loss applies the power law to the predicted current density on
/// the solver's own grid.
pub fn loss_error_surface(
    params: &NetworkParams,
    references: &[CurrentDensityHistory],
    power_law: &PowerLawParams,
    norm: &Normalization,
    domain: Option<&InputDomain>,
) -> Result<Vec<LossErrorEntry>, AnalysisError> {
    references
        .iter()
        .map(|reference| {
            let prediction = predict_field(params, &reference.mesh, &reference.times, norm, domain)?;
            let solver_loss = magnetization_loss(reference, power_law)?;
            let surrogate_loss = magnetization_loss(&prediction.history, power_law)?;
            let relative_error = loss_relative_error(surrogate_loss, solver_loss);
            let config = &reference.mesh.config;
            Ok(LossErrorEntry {
                winding: Winding::new(config.n_turns, config.n_pancakes_half),
                solver_loss,
                surrogate_loss,
                relative_error,
                out_of_domain: prediction.out_of_domain,
                note: relative_error.is_none().then(|| "solver loss is zero; excluded".to_string()),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub winding: Winding,
    pub elements: usize,
    pub queries: usize,
    pub repetitions: usize,
    /// Medians over the repetitions (s).
    pub solver_seconds: f64,
    pub surrogate_seconds: f64,
    pub speedup: f64,
}

/// Reference full-scale timing (N = 100, Np = 10) kept alongside measured rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PublishedTiming {
    pub n_turns: usize,
    pub n_pancakes: usize,
    pub solver_seconds: f64,
    pub surrogate_seconds: f64,
}

impl Default for PublishedTiming {
    fn default() -> Self {
        Self {
            n_turns: 100,
            n_pancakes: 10,
            solver_seconds: 3600.0 + 13.0 * 60.0,
            surrogate_seconds: 0.107,
        }
    }
}

impl PublishedTiming {
    pub fn speedup(&self) -> f64 {
        self.solver_seconds / self.surrogate_seconds
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingTable {
    pub rows: Vec<TimingRow>,
    pub published: PublishedTiming,
}

pub fn median(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Median wall time of a full solver ramp and of surrogate inference on the
/// same query grid, per configuration. Runs sequentially in this thread.
pub fn timing_benchmark(
    params: &NetworkParams,
    settings: &SamplingSettings,
    windings: &[Winding],
    repetitions: usize,
) -> Result<TimingTable, AnalysisError> {
    if repetitions < 3 {
        return Err(AnalysisError::Empty(format!("{repetitions} repetitions; at least 3 are required")));
    }
    let mut rows = Vec::with_capacity(windings.len());
    for &winding in windings {
        let mesh = settings.mesh_for(winding)?;
        let times = &settings.snapshot_times;
        // Warm-up pass for both.
        predict_field(params, &mesh, times, &settings.normalization, None)?;
        let mut solver = Vec::with_capacity(repetitions);
        let mut surrogate = Vec::with_capacity(repetitions);
        for _ in 0..repetitions {
            let start = Instant::now();
            solve_ramp(&mesh, &settings.params, times, &settings.ramp)?;
            solver.push(start.elapsed().as_secs_f64());
            let start = Instant::now();
            let prediction = predict_field(params, &mesh, times, &settings.normalization, None)?;
            surrogate.push(start.elapsed().as_secs_f64());
            std::hint::black_box(prediction);
        }
        let solver_seconds = median(&solver);
        let surrogate_seconds = median(&surrogate);
        rows.push(TimingRow {
            winding,
            elements: mesh.len(),
            queries: mesh.len() * times.len(),
            repetitions,
            solver_seconds,
            surrogate_seconds,
            speedup: solver_seconds / surrogate_seconds,
        });
    }
    Ok(TimingTable {
        rows,
        published: PublishedTiming::default(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorMapSummary {
    pub winding: Winding,
    pub snapshot: usize,
    pub time: f64,
    pub evaluated: usize,
    pub max: Option<f64>,
    pub mean: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split_losses: Vec<SplitLoss>,
    pub loss_errors: Vec<LossErrorEntry>,
    pub error_maps: Vec<ErrorMapSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timing: Option<TimingTable>,
}

impl EvalReport {
    pub fn split_loss(&self, split: SplitKind) -> Option<f64> {
        self.split_losses.iter().find(|s| s.split == split).map(|s| s.mse)
    }

    /// `n_turns,n_pancakes_half,solver_loss,surrogate_loss,relative_error`.
    pub fn loss_errors_csv(&self) -> String {
        let mut out = String::from("n_turns,n_pancakes_half,solver_loss,surrogate_loss,relative_error\n");
        for e in &self.loss_errors {
            let rel = e.relative_error.map(|v| format!("{v:e}")).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{},{:e},{:e},{rel}",
                e.winding.n_turns, e.winding.n_pancakes_half, e.solver_loss, e.surrogate_loss
            );
        }
        out
    }

    pub fn timing_csv(&self) -> Option<String> {
        let table = self.timing.as_ref()?;
        let mut out = String::from("n_turns,n_pancakes_half,queries,repetitions,solver_s,surrogate_s,speedup\n");
        for r in &table.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{:.6},{:.6},{:.1}",
                r.winding.n_turns, r.winding.n_pancakes_half, r.queries, r.repetitions, r.solver_seconds,
                r.surrogate_seconds, r.speedup
            );
        }
        Some(out)
    }
}

fn colormap(v: f64) -> String {
    const STOPS: [(f64, [f64; 3]); 5] = [
        (0.0, [68.0, 1.0, 84.0]),
        (0.25, [59.0, 82.0, 139.0]),
        (0.5, [33.0, 145.0, 140.0]),
        (0.75, [94.0, 201.0, 98.0]),
        (1.0, [253.0, 231.0, 37.0]),
    ];
    let v = if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 };
    let k = STOPS.iter().position(|s| s.0 >= v).unwrap_or(4).max(1);
    let (a, b) = (STOPS[k - 1], STOPS[k]);
    let f = (v - a.0) / (b.0 - a.0);
    let c: Vec<u8> = (0..3).map(|i| (a.1[i] + f * (b.1[i] - a.1[i])).round() as u8).collect();
    format!("#{:02x}{:02x}{:02x}", c[0], c[1], c[2])
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Standalone SVG heatmap of `rows` (first row at the top). Cells map
/// linearly from `[lo, hi]` onto the colour scale; `None` cells are grey.
pub fn svg_heatmap(title: &str, rows: &[Vec<Option<f64>>], lo: f64, hi: f64, x_label: &str, y_label: &str) -> String {
    let n_rows = rows.len().max(1);
    let n_cols = rows.iter().map(|r| r.len()).max().unwrap_or(1).max(1);
    let (left, top, plot_w, plot_h) = (60.0, 40.0, 640.0, 360.0);
    let (cw, ch) = (plot_w / n_cols as f64, plot_h / n_rows as f64);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{cx}\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"16\">{t}</text>\n",
        w = left + plot_w + 110.0,
        h = top + plot_h + 50.0,
        cx = left + plot_w / 2.0,
        t = escape(title)
    );
    for (i, row) in rows.iter().enumerate() {
        for (j, cell) in row.iter().enumerate() {
            let fill = cell.map_or_else(|| "#d0d0d0".to_string(), |v| colormap((v - lo) / span));
            let _ = writeln!(
                svg,
                "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"{fill}\"/>",
                left + j as f64 * cw,
                top + i as f64 * ch,
                cw + 0.05,
                ch + 0.05
            );
        }
    }
    for k in 0..=10 {
        let v = k as f64 / 10.0;
        let _ = writeln!(
            svg,
            "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"20\" height=\"{:.2}\" fill=\"{}\"/>",
            left + plot_w + 20.0,
            top + plot_h * (1.0 - v) - plot_h / 11.0,
            plot_h / 11.0 + 0.5,
            colormap(v)
        );
    }
    let _ = write!(
        svg,
        "<text x=\"{lx}\" y=\"{ty}\" font-family=\"sans-serif\" font-size=\"11\">{hi:.3}</text>\n\
         <text x=\"{lx}\" y=\"{by}\" font-family=\"sans-serif\" font-size=\"11\">{lo:.3}</text>\n\
         <text x=\"{cx}\" y=\"{xy}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"13\">{xl}</text>\n\
         <text x=\"18\" y=\"{cy}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"13\" transform=\"rotate(-90 18 {cy})\">{yl}</text>\n\
         </svg>\n",
        lx = left + plot_w + 45.0,
        ty = top + 10.0,
        by = top + plot_h,
        cx = left + plot_w / 2.0,
        xy = top + plot_h + 30.0,
        cy = top + plot_h / 2.0,
        xl = escape(x_label),
        yl = escape(y_label),
    );
    svg
}

/// Standalone SVG line plot of named `(x, y)` series, optionally with a
/// log10 y axis (non-positive points are dropped there).
pub fn svg_line_plot(title: &str, series: &[(String, Vec<(f64, f64)>)], log_y: bool, x_label: &str, y_label: &str) -> String {
    const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];
    let ty = |y: f64| if log_y { y.log10() } else { y };
    let points: Vec<Vec<(f64, f64)>> = series
        .iter()
        .map(|(_, pts)| {
            pts.iter()
                .filter(|(x, y)| x.is_finite() && y.is_finite() && (!log_y || *y > 0.0))
                .map(|&(x, y)| (x, ty(y)))
                .collect()
        })
        .collect();
    let all = points.iter().flatten();
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in all {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !(x1 > x0) {
        x0 -= 0.5;
        x1 = x0 + 1.0;
    }
    if !(y1 > y0) {
        y0 -= 0.5;
        y1 = y0 + 1.0;
    }
    let (left, top, plot_w, plot_h) = (70.0, 40.0, 600.0, 340.0);
    let sx = |x: f64| left + (x - x0) / (x1 - x0) * plot_w;
    let sy = |y: f64| top + (1.0 - (y - y0) / (y1 - y0)) * plot_h;
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{cx}\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"16\">{t}</text>\n\
         <rect x=\"{left}\" y=\"{top}\" width=\"{plot_w}\" height=\"{plot_h}\" fill=\"none\" stroke=\"black\"/>\n",
        w = left + plot_w + 160.0,
        h = top + plot_h + 60.0,
        cx = left + plot_w / 2.0,
        t = escape(title)
    );
    for k in 0..=4 {
        let f = k as f64 / 4.0;
        let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
        let ylab = if log_y { format!("1e{yv:.1}") } else { format!("{yv:.3e}") };
        let _ = writeln!(
            svg,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">{xv:.3}</text>\n\
             <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">{ylab}</text>",
            sx(xv),
            top + plot_h + 16.0,
            left - 6.0,
            sy(yv) + 4.0
        );
    }
    for (k, ((name, _), pts)) in series.iter().zip(&points).enumerate() {
        let color = COLORS[k % COLORS.len()];
        let path: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        if !path.is_empty() {
            let _ = writeln!(
                svg,
                "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>",
                path.join(" ")
            );
        }
        let ly = top + 14.0 + 18.0 * k as f64;
        let _ = writeln!(
            svg,
            "<line x1=\"{a:.1}\" y1=\"{ly:.1}\" x2=\"{b:.1}\" y2=\"{ly:.1}\" stroke=\"{color}\" stroke-width=\"2\"/>\n\
             <text x=\"{c:.1}\" y=\"{ty:.1}\" font-family=\"sans-serif\" font-size=\"12\">{n}</text>",
            a = left + plot_w + 12.0,
            b = left + plot_w + 32.0,
            c = left + plot_w + 38.0,
            ty = ly + 4.0,
            n = escape(name)
        );
    }
    let _ = write!(
        svg,
        "<text x=\"{cx}\" y=\"{xy}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"13\">{xl}</text>\n\
         <text x=\"16\" y=\"{cy}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"13\" transform=\"rotate(-90 16 {cy})\">{yl}</text>\n\
         </svg>\n",
        cx = left + plot_w / 2.0,
        xy = top + plot_h + 40.0,
        cy = top + plot_h / 2.0,
        xl = escape(x_label),
        yl = escape(y_label),
    );
    svg
}
