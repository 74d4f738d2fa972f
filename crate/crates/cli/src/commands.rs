//! The four subcommands and their artifacts.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::Value;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

use spamp_core::descent::{
    expected_clipped_descent_mc, sample_norms, smoothness_probe, SmoothnessReport, GENERATOR_NAME,
    STREAM_PROTOCOL,
};
use spamp_core::shaping::ClipThreshold;
use spamp_core::state::LayerShaperSnapshot;
use spamp_core::trainer::{train, PipelineMode, RunMetrics, RunSummary};

use crate::config::{AnalyzeConfig, ProbeConfig, RunConfig};
use crate::CliError;

#[derive(Clone, Copy, Serialize)]
struct GeneratorInfo {
    name: &'static str,
    streams: &'static str,
}

const GENERATOR: GeneratorInfo = GeneratorInfo {
    name: GENERATOR_NAME,
    streams: STREAM_PROTOCOL,
};

fn write_text(path: &Path, contents: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)
            .map_err(|e| CliError::config(format!("cannot create {}: {e}", parent.display())))?;
    }
    fs::write(path, contents)
        .map_err(|e| CliError::config(format!("cannot write {}: {e}", path.display())))
}

fn to_pretty_json<T: Serialize>(value: &T) -> String {
    let mut text = serde_json::to_string_pretty(value).expect("artifacts serialize");
    text.push('\n');
    text
}

fn resolve_out(override_dir: &Option<PathBuf>, config_out: &Option<String>) -> PathBuf {
    override_dir
        .clone()
        .or_else(|| config_out.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"))
}

// --- run -------------------------------------------------------------------

#[derive(Serialize)]
struct RunArtifact<'a> {
    config: &'a RunConfig,
    generator: GeneratorInfo,
    summary: &'a RunSummary,
    shaper_states: &'a Option<Vec<LayerShaperSnapshot>>,
}

fn execute_run(config: &RunConfig) -> Result<(RunMetrics, RunSummary), CliError> {
    let problem = config.build_problem()?;
    let metrics = train(
        &problem,
        &config.pipeline,
        &config.noise,
        config.steps,
        config.seed,
    )
    .map_err(|e| CliError::config(e.to_string()))?;
    let summary = metrics.summarize(&config.summary_spec(metrics.initial_loss));
    Ok((metrics, summary))
}

fn write_run_artifacts(
    config: &RunConfig,
    metrics: &RunMetrics,
    summary: &RunSummary,
    dir: &Path,
) -> Result<(), CliError> {
    write_text(&dir.join("run.csv"), &metrics.to_csv())?;
    let artifact = RunArtifact {
        config,
        generator: GENERATOR,
        summary,
        shaper_states: &metrics.shaper_states,
    };
    write_text(&dir.join("summary.json"), &to_pretty_json(&artifact))
}

/// Execute one run, write `run.csv` and `summary.json`, and print a
/// one-line summary. Exit status 2 flags a run that hit the divergence
/// guard; the artifacts are still written.
pub fn cmd_run(mut config: RunConfig, out: Option<PathBuf>) -> Result<i32, CliError> {
    let dir = resolve_out(&out, &config.out);
    config.out = Some(dir.to_string_lossy().into_owned());
    let (metrics, summary) = execute_run(&config)?;
    write_run_artifacts(&config, &metrics, &summary, &dir)?;
    println!(
        "final_loss={} clip_frequency={} max_update_magnitude={} diverged={}",
        summary.final_loss, summary.clip_frequency, summary.max_update_magnitude, summary.diverged
    );
    Ok(if summary.diverged { 2 } else { 0 })
}

// --- compare ----------------------------------------------------------------

#[derive(Serialize)]
struct CellRecord {
    mode: String,
    seed: u64,
    ok: bool,
    diverged: Option<bool>,
    final_loss: Option<f64>,
    error: Option<String>,
    artifact_dir: String,
}

#[derive(Serialize)]
struct CompareRow {
    mode: String,
    cells: usize,
    diverged: usize,
    failed: usize,
    threshold_reached: usize,
    final_loss_mean: Option<f64>,
    final_loss_std: Option<f64>,
    steps_to_threshold_mean: Option<f64>,
    steps_to_threshold_std: Option<f64>,
    max_update_mean: Option<f64>,
    max_update_std: Option<f64>,
    clip_frequency_mean: Option<f64>,
    clip_frequency_std: Option<f64>,
}

#[derive(Serialize)]
struct ComparisonArtifact<'a> {
    config: &'a RunConfig,
    modes: &'a [String],
    seeds: &'a [u64],
    generator: GeneratorInfo,
    rows: &'a [CompareRow],
    cells: &'a [CellRecord],
}

fn population_stats(values: &[f64]) -> (Option<f64>, Option<f64>) {
    if values.is_empty() {
        return (None, None);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let variance = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (Some(mean), Some(variance.sqrt()))
}

fn opt(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{v}"),
        None => "NaN".to_string(),
    }
}

/// Run every mode against every seed with identical problem, noise, and
/// initialization, then tabulate per-mode statistics. A failed or diverged
/// cell is recorded, not fatal.
pub fn cmd_compare(
    mut config: RunConfig,
    modes: Vec<String>,
    seeds: Vec<u64>,
    out: Option<PathBuf>,
) -> Result<i32, CliError> {
    if modes.len() < 2 {
        return Err(CliError::config("compare needs at least 2 modes".into()));
    }
    if seeds.is_empty() {
        return Err(CliError::config("compare needs at least 1 seed".into()));
    }
    let parsed_modes: Vec<PipelineMode> = modes
        .iter()
        .map(|name| {
            PipelineMode::parse(name).ok_or_else(|| {
                let valid: Vec<&str> = PipelineMode::ALL.iter().map(|m| m.name()).collect();
                CliError::config(format!(
                    "unknown mode '{name}'; valid modes: {}",
                    valid.join(", ")
                ))
            })
        })
        .collect::<Result<_, _>>()?;

    let dir = resolve_out(&out, &config.out);
    config.out = Some(dir.to_string_lossy().into_owned());

    let cells: Vec<(PipelineMode, u64)> = parsed_modes
        .iter()
        .flat_map(|&mode| seeds.iter().map(move |&seed| (mode, seed)))
        .collect();

    let run_cell = |&(mode, seed): &(PipelineMode, u64)| -> CellRecord {
        let mut cell_config = config.clone();
        cell_config.pipeline.mode = mode;
        cell_config.seed = seed;
        let cell_dir = dir
            .join("cells")
            .join(format!("{}-seed{}", mode.name(), seed));
        cell_config.out = Some(cell_dir.to_string_lossy().into_owned());
        let outcome = execute_run(&cell_config).and_then(|(metrics, summary)| {
            write_run_artifacts(&cell_config, &metrics, &summary, &cell_dir)?;
            Ok(summary)
        });
        match outcome {
            Ok(summary) => CellRecord {
                mode: mode.name().to_string(),
                seed,
                ok: true,
                diverged: Some(summary.diverged),
                final_loss: Some(summary.final_loss),
                error: None,
                artifact_dir: cell_dir.to_string_lossy().into_owned(),
            },
            Err(e) => CellRecord {
                mode: mode.name().to_string(),
                seed,
                ok: false,
                diverged: None,
                final_loss: None,
                error: Some(e.to_string()),
                artifact_dir: cell_dir.to_string_lossy().into_owned(),
            },
        }
    };

    #[cfg(feature = "parallel")]
    let records: Vec<CellRecord> = cells.par_iter().map(run_cell).collect();
    #[cfg(not(feature = "parallel"))]
    let records: Vec<CellRecord> = cells.iter().map(run_cell).collect();

    // Per-mode aggregation over clean (completed, non-diverged) cells; the
    // summaries are re-read from the cell artifacts to keep this a pure
    // fold over what was recorded.
    let mut rows = Vec::with_capacity(parsed_modes.len());
    for mode in &parsed_modes {
        let mode_records: Vec<&CellRecord> =
            records.iter().filter(|r| r.mode == mode.name()).collect();
        let mut finals = Vec::new();
        let mut max_updates = Vec::new();
        let mut clip_freqs = Vec::new();
        let mut thresholds = Vec::new();
        let mut diverged = 0usize;
        let mut failed = 0usize;
        for record in &mode_records {
            if !record.ok {
                failed += 1;
                continue;
            }
            if record.diverged == Some(true) {
                diverged += 1;
                continue;
            }
            let summary_path = Path::new(&record.artifact_dir).join("summary.json");
            let text = fs::read_to_string(&summary_path).map_err(|e| {
                CliError::config(format!("cannot read {}: {e}", summary_path.display()))
            })?;
            let value: Value = serde_json::from_str(&text)
                .map_err(|e| CliError::config(format!("bad cell summary: {e}")))?;
            let summary = &value["summary"];
            finals.push(summary["final_loss"].as_f64().unwrap_or(f64::NAN));
            max_updates.push(summary["max_update_magnitude"].as_f64().unwrap_or(f64::NAN));
            clip_freqs.push(summary["clip_frequency"].as_f64().unwrap_or(f64::NAN));
            if let Some(steps) = summary["steps_to_threshold"].as_u64() {
                thresholds.push(steps as f64);
            }
        }
        let (final_loss_mean, final_loss_std) = population_stats(&finals);
        let (steps_mean, steps_std) = population_stats(&thresholds);
        let (max_mean, max_std) = population_stats(&max_updates);
        let (clip_mean, clip_std) = population_stats(&clip_freqs);
        rows.push(CompareRow {
            mode: mode.name().to_string(),
            cells: mode_records.len(),
            diverged,
            failed,
            threshold_reached: thresholds.len(),
            final_loss_mean,
            final_loss_std,
            steps_to_threshold_mean: steps_mean,
            steps_to_threshold_std: steps_std,
            max_update_mean: max_mean,
            max_update_std: max_std,
            clip_frequency_mean: clip_mean,
            clip_frequency_std: clip_std,
        });
    }

    let mut csv = String::from(
        "mode,cells,diverged,failed,threshold_reached,final_loss_mean,final_loss_std,\
         steps_to_threshold_mean,steps_to_threshold_std,max_update_mean,max_update_std,\
         clip_frequency_mean,clip_frequency_std\n",
    );
    for row in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            row.mode,
            row.cells,
            row.diverged,
            row.failed,
            row.threshold_reached,
            opt(row.final_loss_mean),
            opt(row.final_loss_std),
            opt(row.steps_to_threshold_mean),
            opt(row.steps_to_threshold_std),
            opt(row.max_update_mean),
            opt(row.max_update_std),
            opt(row.clip_frequency_mean),
            opt(row.clip_frequency_std),
        ));
    }
    write_text(&dir.join("comparison.csv"), &csv)?;
    let artifact = ComparisonArtifact {
        config: &config,
        modes: &modes,
        seeds: &seeds,
        generator: GENERATOR,
        rows: &rows,
        cells: &records,
    };
    write_text(&dir.join("comparison.json"), &to_pretty_json(&artifact))?;

    for row in &rows {
        println!(
            "{}: final_loss {} +- {} (cells {}, diverged {}, failed {})",
            row.mode,
            opt(row.final_loss_mean),
            opt(row.final_loss_std),
            row.cells,
            row.diverged,
            row.failed
        );
    }
    Ok(0)
}

// --- analyze ----------------------------------------------------------------

#[derive(Serialize)]
struct AnalysisRecord {
    model: String,
    params: Value,
    eta: f64,
    tau: f64,
    n: usize,
    seed: u64,
    expected_descent: f64,
    standard_error: f64,
}

#[derive(Serialize)]
struct AnalysisArtifact<'a> {
    config: &'a AnalyzeConfig,
    generator: GeneratorInfo,
    records: &'a [AnalysisRecord],
}

/// Evaluate the expected clipped descent over the (eta, tau) grid, reusing
/// one sample set for every cell so the grid is comparable cell to cell.
pub fn cmd_analyze(mut config: AnalyzeConfig, out: Option<PathBuf>) -> Result<i32, CliError> {
    if config.etas.is_empty() || config.taus.is_empty() {
        return Err(CliError::config(
            "analyze needs non-empty eta and tau grids".into(),
        ));
    }
    if config.n == 0 {
        return Err(CliError::config("analyze needs n >= 1 samples".into()));
    }
    config
        .model
        .validate()
        .map_err(|e| CliError::config(e.to_string()))?;
    let dir = resolve_out(&out, &config.out);
    config.out = Some(dir.to_string_lossy().into_owned());

    let samples = sample_norms(&config.model, config.n, config.seed)
        .map_err(|e| CliError::config(e.to_string()))?;

    let model_value = serde_json::to_value(config.model).expect("model serializes");
    let mut params = model_value.as_object().cloned().unwrap_or_default();
    params.remove("kind");

    let mut records = Vec::with_capacity(config.etas.len() * config.taus.len());
    for &eta in &config.etas {
        for &tau in &config.taus {
            let threshold =
                ClipThreshold::new(tau).map_err(|e| CliError::config(format!("tau grid: {e}")))?;
            let estimate = expected_clipped_descent_mc(&samples, eta, threshold)
                .map_err(|e| CliError::config(e.to_string()))?;
            records.push(AnalysisRecord {
                model: config.model.kind_name().to_string(),
                params: Value::Object(params.clone()),
                eta,
                tau,
                n: config.n,
                seed: config.seed,
                expected_descent: estimate.expected_descent,
                standard_error: estimate.standard_error,
            });
        }
    }

    let artifact = AnalysisArtifact {
        config: &config,
        generator: GENERATOR,
        records: &records,
    };
    write_text(&dir.join("analysis.json"), &to_pretty_json(&artifact))?;
    println!(
        "analyzed {} cells over {} samples of the {} model",
        records.len(),
        config.n,
        config.model.kind_name()
    );
    Ok(0)
}

// --- probe ------------------------------------------------------------------

#[derive(Serialize)]
struct ProbeArtifact<'a> {
    config: &'a ProbeConfig,
    reports: &'a [SmoothnessReport],
}

/// Probe the operator's norm map across the configured radii.
pub fn cmd_probe(mut config: ProbeConfig, out: Option<PathBuf>) -> Result<i32, CliError> {
    if config.probe_norms.is_empty() {
        return Err(CliError::config(
            "probe needs a non-empty probe_norms grid".into(),
        ));
    }
    let dir = resolve_out(&out, &config.out);
    config.out = Some(dir.to_string_lossy().into_owned());

    let reports: Vec<SmoothnessReport> = config
        .probe_norms
        .iter()
        .map(|&r| {
            smoothness_probe(&config.operator, r, config.h_step)
                .map_err(|e| CliError::config(e.to_string()))
        })
        .collect::<Result<_, _>>()?;

    let artifact = ProbeArtifact {
        config: &config,
        reports: &reports,
    };
    write_text(&dir.join("probe.json"), &to_pretty_json(&artifact))?;
    for report in &reports {
        println!(
            "{} at {}: slope gap {}",
            report.operator_name, report.probe_norm, report.slope_gap
        );
    }
    Ok(0)
}
