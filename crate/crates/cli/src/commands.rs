//! Subcommand implementations.

use std::path::{Path, PathBuf};
use std::time::Instant;

use hts_surrogate::analysis::{
    loss_error_surface, predict_field, relative_error_map, svg_heatmap, svg_line_plot, timing_benchmark, ErrorMap,
    ErrorMapSummary, EvalReport, InputDomain, SplitLoss,
};
use hts_surrogate::autonet::{load_params_expecting, save_params, NetworkParams};
use hts_surrogate::dataset::{
    build_splits, generate_split, read_dataset, reconstruct_history, write_dataset, DatasetManifest, SampleRecord,
    SplitKind, Winding,
};
use hts_surrogate::emsolver::CurrentDensityHistory;
use hts_surrogate::trainer::{
    batch_count, checkpoint_name, run_sweep, train, train_from, RunStatus, TrainData, TrainRun,
};
use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::CliError;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunOptions {
    pub dry_run: bool,
    pub resume: bool,
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, contents).map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("report serializes") + "\n"
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub split: SplitKind,
    pub file: String,
    pub rows: usize,
    pub checksum: String,
    pub configs: Vec<Winding>,
}

/// Solves every configuration of the split plan and writes one dataset file
/// per split plus `data/index.json`.
pub fn cmd_generate(config: &PipelineConfig, opts: RunOptions) -> Result<Vec<IndexEntry>, CliError> {
    let settings = config.sampling();
    let manifests = build_splits(&config.splits, &settings)?;
    if opts.dry_run {
        let mut total = 0;
        for m in &manifests {
            println!("{:<12} {} configurations, {} rows", m.split.name(), m.configs.len(), m.row_count);
            for c in &m.configs {
                println!("    {} -> {} rows", c.winding, c.rows);
            }
            total += m.row_count;
        }
        println!("total {total} rows; dry run, nothing written");
        return Ok(Vec::new());
    }
    let mut index = Vec::with_capacity(manifests.len());
    for mut manifest in manifests {
        let start = Instant::now();
        let (records, _) = generate_split(&manifest, &settings)?;
        let path = config.dataset_path(manifest.split);
        std::fs::create_dir_all(config.data_dir())?;
        write_dataset(&records, &mut manifest, &path)?;
        println!(
            "{:<12} {:>8} rows  {:>7.1} s  {}",
            manifest.split.name(),
            records.len(),
            start.elapsed().as_secs_f64(),
            path.display()
        );
        index.push(IndexEntry {
            split: manifest.split,
            file: path.file_name().unwrap().to_string_lossy().into_owned(),
            rows: manifest.row_count,
            checksum: format!("{:016x}", manifest.checksum),
            configs: manifest.windings(),
        });
    }
    write_file(&config.data_dir().join("index.json"), to_json(&index))?;
    Ok(index)
}

/// Reads a split and checks it was generated with the current settings.
pub fn load_split(config: &PipelineConfig, split: SplitKind) -> Result<(Vec<SampleRecord>, DatasetManifest), CliError> {
    let path = config.dataset_path(split);
    if !path.exists() {
        return Err(CliError::Data(format!(
            "missing dataset file {}; run `generate` first",
            path.display()
        )));
    }
    let (records, manifest) = read_dataset(&path)?;
    let settings = config.sampling();
    if manifest.normalization != settings.normalization
        || manifest.snapshot_times != settings.snapshot_times
        || manifest.params != settings.params
        || manifest.resolution != settings.resolution
    {
        return Err(CliError::Data(format!(
            "{} was generated with different settings; rerun `generate`",
            path.display()
        )));
    }
    Ok((records, manifest))
}

fn load_data(config: &PipelineConfig, split: SplitKind) -> Result<TrainData, CliError> {
    Ok(TrainData::from_records(&load_split(config, split)?.0))
}

/// Final weights of the most recent `train` run, whatever its architecture.
pub fn latest_model_path(config: &PipelineConfig) -> PathBuf {
    config.model_dir().join("latest.sfnn")
}

fn loss_curve_svg(run: &TrainRun) -> String {
    let series = |v: &[f64]| v.iter().enumerate().map(|(e, &l)| (e as f64, l)).collect::<Vec<_>>();
    let saved: Vec<(f64, f64)> = run.saved_epochs.iter().map(|&e| (e as f64, run.train_loss[e])).collect();
    svg_line_plot(
        &format!("{} seed {}", run.arch.label(), run.seed),
        &[
            ("train".to_string(), series(&run.train_loss)),
            ("validation".to_string(), series(&run.val_loss)),
            ("saved (train)".to_string(), saved),
        ],
        true,
        "epoch",
        "MSE",
    )
}

fn status_error(run: &TrainRun) -> Option<CliError> {
    match &run.status {
        RunStatus::Completed => None,
        RunStatus::Diverged { epoch, loss, initial } => Some(CliError::Divergence(format!(
            "{} seed {}: train loss {loss:e} at epoch {epoch} exceeds the guard (initial {initial:e})",
            run.arch.label(),
            run.seed
        ))),
        RunStatus::NonFinite { epoch, message } => Some(CliError::Divergence(format!(
            "{} seed {}: epoch {epoch}: {message}",
            run.arch.label(),
            run.seed
        ))),
    }
}

/// Trains the configured network on the training split, validating on the
/// interpolation split.
pub fn cmd_train(config: &PipelineConfig, opts: RunOptions) -> Result<TrainRun, CliError> {
    let arch = config.network.arch();
    let hyper = config.hyper();
    let train_data = load_data(config, SplitKind::Train)?;
    let val_data = load_data(config, SplitKind::InterpVal)?;
    let initial: Option<NetworkParams> = if opts.resume {
        let path = latest_model_path(config);
        if !path.exists() {
            return Err(CliError::Data(format!("nothing to resume: {} does not exist", path.display())));
        }
        Some(load_params_expecting(&path, &arch)?.0)
    } else {
        None
    };
    if opts.dry_run {
        println!(
            "{}: {} parameters, {} training rows ({} batches of {}), {} validation rows, up to {} epochs{}",
            arch.label(),
            arch.parameter_count(),
            train_data.len(),
            batch_count(train_data.len(), hyper.batch_size_train),
            hyper.batch_size_train,
            val_data.len(),
            hyper.max_epochs,
            if initial.is_some() { ", resuming" } else { "" }
        );
        return Ok(empty_run(config));
    }
    let dir = config.model_dir();
    std::fs::create_dir_all(&dir)?;
    let result = match initial {
        Some(params) => train_from(&train_data, &val_data, params, &hyper, Some(&dir)),
        None => train(&train_data, &val_data, arch, &hyper, Some(&dir)),
    };
    let (model, run) = result?;
    save_params(&model.params, Some(model.epoch), &latest_model_path(config))?;
    write_file(&config.train_run_path(), to_json(&run))?;
    let stem = format!("{}_seed{}", arch.label(), config.seed);
    write_file(&dir.join(format!("{stem}_loss.csv")), run.to_csv())?;
    write_file(&dir.join(format!("{stem}_loss.svg")), loss_curve_svg(&run))?;
    println!(
        "{}: {} epochs, {} checkpoints, saved epoch {}, train {:.3e}, interp_val {:.3e}",
        arch.label(),
        run.train_loss.len(),
        run.saved_epochs.len(),
        model.epoch,
        run.saved_model_train_loss,
        run.best_val
    );
    match status_error(&run) {
        Some(err) => Err(err),
        None => Ok(run),
    }
}

fn empty_run(config: &PipelineConfig) -> TrainRun {
    TrainRun {
        arch: config.network.arch(),
        seed: config.seed,
        train_loss: Vec::new(),
        val_loss: Vec::new(),
        saved_epochs: Vec::new(),
        best_train: f64::INFINITY,
        best_val: f64::INFINITY,
        saved_model_train_loss: f64::NAN,
        epoch_seconds: Vec::new(),
        status: RunStatus::Completed,
    }
}

/// Trains every (architecture, seed) pair of the sweep section.
pub fn cmd_sweep(
    config: &PipelineConfig,
    opts: RunOptions,
) -> Result<hts_surrogate::trainer::SweepReport, CliError> {
    let archs: Vec<_> = config.sweep.archs.iter().map(|a| a.arch()).collect();
    let seeds = &config.sweep.seeds;
    if opts.dry_run {
        for a in &archs {
            println!("{:<16} {} parameters x {} seeds", a.label(), a.parameter_count(), seeds.len());
        }
        println!("{} runs; dry run, nothing trained", archs.len() * seeds.len());
        return Ok(hts_surrogate::trainer::SweepReport { runs: Vec::new(), summaries: Vec::new() });
    }
    let train_data = load_data(config, SplitKind::Train)?;
    let val_data = load_data(config, SplitKind::InterpVal)?;
    let dir = config.output_dir.join("sweep");
    std::fs::create_dir_all(&dir)?;
    let report = run_sweep(&train_data, &val_data, &archs, seeds, &config.hyper(), Some(&dir))?;
    write_file(&dir.join("sweep_report.json"), to_json(&report))?;
    let mut csv = String::from("arch,runs,mean_train,var_train,mean_val,var_val,mean_epoch_s,non_converged\n");
    for s in &report.summaries {
        println!(
            "{:<16} runs {}  train {:.3e} (var {:.1e})  val {:.3e} (var {:.1e}){}",
            s.label,
            s.completed_runs,
            s.mean_train,
            s.var_train,
            s.mean_val,
            s.var_val,
            if s.non_converged { "  NOT CONVERGED" } else { "" }
        );
        csv += &format!(
            "{},{},{:e},{:e},{:e},{:e},{:.6},{}\n",
            s.label, s.completed_runs, s.mean_train, s.var_train, s.mean_val, s.var_val, s.mean_epoch_seconds,
            s.non_converged
        );
    }
    write_file(&dir.join("sweep_summary.csv"), csv)?;
    let failed: Vec<String> = report
        .runs
        .iter()
        .filter(|r| !matches!(r.status, RunStatus::Completed))
        .map(|r| format!("{} seed {}", r.arch.label(), r.seed))
        .collect();
    if failed.is_empty() {
        Ok(report)
    } else {
        Err(CliError::Divergence(format!("runs did not complete: {}", failed.join(", "))))
    }
}

/// Loads the checkpoint of the configured architecture and seed saved by the
/// last `train` run.
pub fn load_trained_model(config: &PipelineConfig) -> Result<(NetworkParams, TrainRun), CliError> {
    let run_path = config.train_run_path();
    let text = std::fs::read_to_string(&run_path)
        .map_err(|_| CliError::Data(format!("missing checkpoint record {}; run `train` first", run_path.display())))?;
    let run: TrainRun = serde_json::from_str(&text).map_err(|e| CliError::Data(e.to_string()))?;
    let epoch = *run
        .saved_epochs
        .last()
        .ok_or_else(|| CliError::Data(format!("{} has no saved epoch", run_path.display())))?;
    let path = config.model_dir().join(checkpoint_name(&run.arch, run.seed, epoch));
    if !path.exists() {
        return Err(CliError::Data(format!("missing checkpoint {}", path.display())));
    }
    let (params, _) = load_params_expecting(&path, &config.network.arch())?;
    Ok((params, run))
}

/// Spatial layout of one snapshot: rows run down the stack (top pancake
/// first), columns run over turns.
fn spatial_rows(history: &CurrentDensityHistory, values: &[Option<f64>]) -> Vec<Vec<Option<f64>>> {
    let mesh = &history.mesh;
    let p = mesh.points_per_tape;
    let np = mesh.config.n_pancakes_half;
    let mut rows = vec![vec![None; mesh.config.n_turns]; np * p];
    for tape in 0..mesh.n_tapes() {
        for (j, idx) in mesh.tape_elements(tape).enumerate() {
            let e = &mesh.elements[idx];
            let row = (np - e.pancake) * p + (p - 1 - j);
            rows[row][e.turn - 1] = values[idx];
        }
    }
    rows
}

fn error_map_outputs(
    dir: &Path,
    winding: Winding,
    reference: &CurrentDensityHistory,
    map: &ErrorMap,
    snapshots: &[usize],
) -> Result<Vec<ErrorMapSummary>, CliError> {
    let stem = format!("N{}_Np{}", winding.n_turns, winding.n_pancakes_half);
    write_file(&dir.join(format!("error_map_{stem}.csv")), map.to_csv())?;
    let mut summaries = Vec::new();
    for &s in snapshots {
        let values: Vec<Option<f64>> = (0..map.elements).map(|e| map.get(s, e)).collect();
        let evaluated: Vec<f64> = values.iter().flatten().copied().collect();
        let max = evaluated.iter().copied().reduce(f64::max);
        let mean = (!evaluated.is_empty()).then(|| evaluated.iter().sum::<f64>() / evaluated.len() as f64);
        let time = reference.times[s];
        let rows = spatial_rows(reference, &values);
        let svg = svg_heatmap(
            &format!("relative error {stem}, t = {time:.2} s (|J|/Jc > {})", map.threshold),
            &rows,
            0.0,
            max.unwrap_or(1.0).clamp(1e-3, 1.0),
            "turn",
            "position along the stack",
        );
        write_file(&dir.join(format!("error_map_{stem}_s{s:02}.svg")), svg)?;
        summaries.push(ErrorMapSummary { winding, snapshot: s, time, evaluated: evaluated.len(), max, mean });
    }
    Ok(summaries)
}

/// Split losses, magnetization-loss errors and error maps of the trained
/// model on every split.
pub fn cmd_eval(config: &PipelineConfig, opts: RunOptions) -> Result<EvalReport, CliError> {
    if opts.dry_run {
        for kind in SplitKind::ALL {
            println!("{:<12} {:?}", kind.name(), config.splits.split(kind));
        }
        println!("dry run, nothing evaluated");
        return Ok(EvalReport { split_losses: Vec::new(), loss_errors: Vec::new(), error_maps: Vec::new(), timing: None });
    }
    let (params, run) = load_trained_model(config)?;
    let batch = config.eval.batch_size;
    let dir = config.output_dir.join("eval");
    std::fs::create_dir_all(&dir)?;

    let mut split_losses = Vec::new();
    let mut loss_errors = Vec::new();
    let mut error_maps = Vec::new();
    let mut domain = None;
    for kind in SplitKind::ALL {
        let (records, manifest) = load_split(config, kind)?;
        let data = TrainData::from_records(&records);
        if kind == SplitKind::Train {
            domain = InputDomain::from_data(&data);
        }
        let mse = hts_surrogate::analysis::eval_split(&params, &data, batch)?;
        println!("{:<12} {:>8} rows  MSE {mse:.3e}", kind.name(), data.len());
        split_losses.push(SplitLoss { split: kind, rows: data.len(), mse });

        let references = (0..manifest.configs.len())
            .map(|i| reconstruct_history(&records, &manifest, i))
            .collect::<Result<Vec<_>, _>>()?;
        let entries =
            loss_error_surface(&params, &references, &config.power_law, &config.normalization, domain.as_ref())?;
        for (entry, reference) in entries.into_iter().zip(&references) {
            let prediction = predict_field(&params, &reference.mesh, &reference.times, &config.normalization, None)?;
            let map = relative_error_map(
                &prediction.history,
                reference,
                config.power_law.j_c,
                config.eval.error_threshold,
            )?;
            error_maps.extend(error_map_outputs(&dir, entry.winding, reference, &map, &config.eval.map_snapshots)?);
            println!(
                "    {:<10} loss solver {:.4e} J  surrogate {:.4e} J  error {}",
                entry.winding.to_string(),
                entry.solver_loss,
                entry.surrogate_loss,
                entry.relative_error.map_or("n/a".to_string(), |e| format!("{:.2}%", 100.0 * e))
            );
            loss_errors.push(entry);
        }
    }
    let report = EvalReport { split_losses, loss_errors, error_maps, timing: None };
    write_file(&dir.join("eval_report.json"), to_json(&report))?;
    write_file(&dir.join("loss_errors.csv"), report.loss_errors_csv())?;
    write_file(&dir.join("loss_curve.svg"), loss_curve_svg(&run))?;
    let mut csv = String::from("split,rows,mse\n");
    for s in &report.split_losses {
        csv += &format!("{},{},{:e}\n", s.split.name(), s.rows, s.mse);
    }
    write_file(&dir.join("split_losses.csv"), csv)?;
    Ok(report)
}

/// Median solver and surrogate wall times on the bench configurations.
pub fn cmd_bench(config: &PipelineConfig, opts: RunOptions) -> Result<hts_surrogate::analysis::TimingTable, CliError> {
    let windings: Vec<Winding> = config.bench.configs.iter().map(|&c| c.into()).collect();
    let settings = config.sampling();
    if opts.dry_run {
        for w in &windings {
            let mesh = settings.mesh_for(*w)?;
            println!("{w}: {} loops, {} queries", mesh.len(), mesh.len() * settings.snapshot_times.len());
        }
        println!("{} repetitions each; dry run, nothing timed", config.bench.repetitions);
        return Ok(hts_surrogate::analysis::TimingTable { rows: Vec::new(), published: Default::default() });
    }
    let (params, _) = load_trained_model(config)?;
    let table = timing_benchmark(&params, &settings, &windings, config.bench.repetitions)?;
    for r in &table.rows {
        println!(
            "{:<10} {:>6} queries  solver {:>9.4} s  surrogate {:>9.6} s  speedup {:>9.1}x",
            r.winding.to_string(),
            r.queries,
            r.solver_seconds,
            r.surrogate_seconds,
            r.speedup
        );
    }
    println!(
        "published full scale (N={}, Np={}): {:.0} s vs {} s, {:.0}x",
        table.published.n_turns,
        table.published.n_pancakes,
        table.published.solver_seconds,
        table.published.surrogate_seconds,
        table.published.speedup()
    );
    let dir = config.output_dir.join("bench");
    write_file(&dir.join("timing.json"), to_json(&table))?;
    let report = EvalReport { split_losses: Vec::new(), loss_errors: Vec::new(), error_maps: Vec::new(), timing: Some(table.clone()) };
    write_file(&dir.join("timing.csv"), report.timing_csv().unwrap_or_default())?;
    Ok(table)
}
