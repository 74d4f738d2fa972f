//! Configuration loading: strict JSON documents plus `--set` overrides.
//!
//! Every config is a single JSON file validated against a closed schema;
//! unknown keys are an error so typos never pass silently.

use std::path::Path;

use serde::{de::DeserializeOwned, Deserialize, Serialize};
use serde_json::Value;

use spamp_core::descent::{ProbeOperator, TailModel};
use spamp_core::trainer::{NoiseSpec, PipelineConfig, ProblemSpec, SummarySpec, ToyProblem};

use crate::CliError;

/// Full description of one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub problem: ProblemSpec,
    #[serde(default)]
    pub noise: NoiseSpec,
    pub pipeline: PipelineConfig,
    pub steps: u64,
    pub seed: u64,
    /// Output directory; `--out` overrides it, `out` is the fallback.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<String>,
    /// Loss level for the steps-to-threshold metric. Defaults to 1% of the
    /// initial loss for quadratic problems and to no threshold otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss_threshold: Option<f64>,
    /// Step ranges for update-magnitude statistics; defaults to thirds.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intervals: Option<Vec<[u64; 2]>>,
    /// Steps at which inter-layer norm statistics are taken; defaults to
    /// quartiles.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoints: Option<Vec<u64>>,
}

impl RunConfig {
    pub fn build_problem(&self) -> Result<ToyProblem, CliError> {
        self.problem
            .build()
            .map_err(|e| CliError::config(e.to_string()))
    }

    /// Resolve the summary layout, filling the quadratic default threshold
    /// from the run's initial loss.
    pub fn summary_spec(&self, initial_loss: f64) -> SummarySpec {
        let mut spec = SummarySpec::default_for(self.steps);
        if let Some(ranges) = &self.intervals {
            spec.intervals = ranges.iter().map(|r| (r[0], r[1])).collect();
        }
        if let Some(steps) = &self.checkpoints {
            spec.checkpoints = steps.clone();
        }
        spec.loss_threshold = self.loss_threshold.or(match self.problem {
            ProblemSpec::Quadratic { .. } => Some(0.01 * initial_loss),
            _ => None,
        });
        spec
    }
}

/// Grid evaluation of the expected clipped descent under a tail model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalyzeConfig {
    pub model: TailModel,
    pub etas: Vec<f64>,
    pub taus: Vec<f64>,
    pub n: usize,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<String>,
}

/// Smoothness probe of one operator across a grid of radii.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    pub operator: ProbeOperator,
    pub probe_norms: Vec<f64>,
    pub h_step: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<String>,
}

/// Read a JSON config, apply `--set key=value` overrides and an optional
/// seed override, and deserialize strictly.
pub fn load_config<T: DeserializeOwned>(
    path: &Path,
    sets: &[String],
    seed: Option<u64>,
) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        CliError::config(format!("cannot read config file {}: {e}", path.display()))
    })?;
    let mut value: Value = serde_json::from_str(&text).map_err(|e| {
        CliError::config(format!(
            "config file {} is not valid JSON: {e}",
            path.display()
        ))
    })?;
    for set in sets {
        apply_override(&mut value, set)?;
    }
    if let Some(seed) = seed {
        let root = value
            .as_object_mut()
            .ok_or_else(|| CliError::config("config root must be a JSON object".into()))?;
        root.insert("seed".into(), Value::from(seed));
    }
    serde_json::from_value(value)
        .map_err(|e| CliError::config(format!("invalid configuration: {e}")))
}

/// Apply one `key.path=value` override. The value is parsed as JSON when
/// possible and treated as a string otherwise. Intermediate objects are
/// created as needed; the final strict deserialization rejects keys the
/// schema does not know.
fn apply_override(root: &mut Value, set: &str) -> Result<(), CliError> {
    let (path, raw_value) = set.split_once('=').ok_or_else(|| {
        CliError::config(format!("override '{set}' is not of the form key=value"))
    })?;
    if path.is_empty() {
        return Err(CliError::config(format!(
            "override '{set}' has an empty key"
        )));
    }
    let value: Value =
        serde_json::from_str(raw_value).unwrap_or_else(|_| Value::String(raw_value.to_string()));

    let mut cursor = root;
    let segments: Vec<&str> = path.split('.').collect();
    for (i, segment) in segments.iter().enumerate() {
        let last = i + 1 == segments.len();
        if let Ok(index) = segment.parse::<usize>() {
            let array = cursor.as_array_mut().ok_or_else(|| {
                CliError::config(format!(
                    "override key '{path}': '{segment}' indexes a non-array"
                ))
            })?;
            if index >= array.len() {
                return Err(CliError::config(format!(
                    "override key '{path}': index {index} out of range (len {})",
                    array.len()
                )));
            }
            if last {
                array[index] = value;
                return Ok(());
            }
            cursor = &mut array[index];
        } else {
            let object = cursor.as_object_mut().ok_or_else(|| {
                CliError::config(format!(
                    "override key '{path}': '{segment}' indexes a non-object"
                ))
            })?;
            if last {
                object.insert(segment.to_string(), value);
                return Ok(());
            }
            cursor = object
                .entry(segment.to_string())
                .or_insert_with(|| Value::Object(Default::default()));
        }
    }
    Ok(())
}
