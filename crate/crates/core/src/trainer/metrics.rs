//! Per-step telemetry and run summaries.
//!
//! Summary statistics use population variance throughout: layer counts are
//! small and fixed, and the estimator choice is recorded in the output.

use serde::Serialize;

use crate::state::LayerShaperSnapshot;

/// Fixed header of the per-step CSV artifact. The `tau` column carries the
/// gradient-norm bound in effect for that layer at that step (the tracked
/// threshold for spamp, the fixed threshold for the clipping modes, the
/// budget divided by the learning rate for update clipping) and `NaN` for
/// modes that bound nothing.
pub const CSV_HEADER: &str =
    "step,layer,loss,raw_norm,shaped_norm,tau,alpha,update_magnitude,clipped";

/// One per-layer telemetry row.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub layer: usize,
    /// Loss at the parameters this step's gradient was computed from.
    pub loss: f64,
    pub raw_norm: f64,
    pub shaped_norm: f64,
    pub norm_bound: Option<f64>,
    pub alpha: f64,
    /// `eta_eff * ||g~||` for this layer.
    pub update_magnitude: f64,
    pub clipped: bool,
    /// Learning rate actually applied this step (not part of the CSV).
    pub eta: f64,
}

/// Everything one run produced.
#[derive(Clone, Debug, PartialEq)]
pub struct RunMetrics {
    pub records: Vec<StepRecord>,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub steps_completed: u64,
    pub requested_steps: u64,
    pub n_layers: usize,
    pub diverged: bool,
    pub shaper_states: Option<Vec<LayerShaperSnapshot>>,
}

impl RunMetrics {
    /// Serialize the per-step records. Floats use the shortest decimal
    /// representation that round-trips.
    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(64 * (self.records.len() + 1));
        out.push_str(CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            let tau = r.norm_bound.unwrap_or(f64::NAN);
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                r.step,
                r.layer,
                r.loss,
                r.raw_norm,
                r.shaped_norm,
                tau,
                r.alpha,
                r.update_magnitude,
                r.clipped
            ));
        }
        out
    }

    /// Norm of the whole parameter change at each recorded step:
    /// `eta_eff * sqrt(sum_l ||g~_l||^2)`.
    pub fn per_step_update_magnitudes(&self) -> Vec<f64> {
        self.records
            .chunks(self.n_layers)
            .map(|step| {
                step.iter()
                    .map(|r| r.update_magnitude * r.update_magnitude)
                    .sum::<f64>()
                    .sqrt()
            })
            .collect()
    }

    pub fn summarize(&self, spec: &SummarySpec) -> RunSummary {
        let step_updates = self.per_step_update_magnitudes();
        let max_update_magnitude = step_updates.iter().cloned().fold(0.0, f64::max);

        let clipped_steps = self
            .records
            .chunks(self.n_layers)
            .filter(|step| step.iter().any(|r| r.clipped))
            .count();
        let clip_frequency = if step_updates.is_empty() {
            0.0
        } else {
            clipped_steps as f64 / step_updates.len() as f64
        };

        let steps_to_threshold = spec.loss_threshold.and_then(|threshold| {
            self.records
                .chunks(self.n_layers)
                .find(|step| step[0].loss < threshold)
                .map(|step| step[0].step)
        });

        let mut update_intervals = Vec::new();
        let mut skipped_intervals = Vec::new();
        for &(start, end) in &spec.intervals {
            let slice: Vec<f64> = step_updates
                .iter()
                .enumerate()
                .filter(|(t, _)| {
                    let t = *t as u64;
                    t >= start && t < end
                })
                .map(|(_, &u)| u)
                .collect();
            if start >= end {
                skipped_intervals.push(SkippedInterval {
                    start,
                    end,
                    reason: "empty range".into(),
                });
            } else if slice.is_empty() {
                skipped_intervals.push(SkippedInterval {
                    start,
                    end,
                    reason: "no recorded steps".into(),
                });
            } else {
                let mean = slice.iter().sum::<f64>() / slice.len() as f64;
                let variance =
                    slice.iter().map(|u| (u - mean) * (u - mean)).sum::<f64>() / slice.len() as f64;
                update_intervals.push(IntervalStats {
                    start,
                    end,
                    update_std: variance.sqrt(),
                    update_max: slice.iter().cloned().fold(0.0, f64::max),
                });
            }
        }

        let checkpoints = spec
            .checkpoints
            .iter()
            .filter(|&&step| step < self.steps_completed)
            .map(|&step| {
                let base = (step * self.n_layers as u64) as usize;
                let rows = &self.records[base..base + self.n_layers];
                let (raw_mean, raw_var) = mean_variance(rows.iter().map(|r| r.raw_norm));
                let (shaped_mean, shaped_var) = mean_variance(rows.iter().map(|r| r.shaped_norm));
                CheckpointStats {
                    step,
                    raw_norm_mean: raw_mean,
                    raw_norm_variance: raw_var,
                    shaped_norm_mean: shaped_mean,
                    shaped_norm_variance: shaped_var,
                }
            })
            .collect();

        RunSummary {
            diverged: self.diverged,
            steps_completed: self.steps_completed,
            requested_steps: self.requested_steps,
            initial_loss: self.initial_loss,
            final_loss: self.final_loss,
            loss_threshold: spec.loss_threshold,
            steps_to_threshold,
            clip_frequency,
            max_update_magnitude,
            update_intervals,
            skipped_intervals,
            checkpoints,
            variance_kind: "population",
        }
    }
}

/// Population mean and variance.
fn mean_variance(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let variance = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, variance)
}

/// What to aggregate in a summary: step intervals for update-magnitude
/// stats, checkpoint steps for inter-layer norm stats, and the loss
/// threshold for the steps-to-threshold metric.
#[derive(Clone, Debug, PartialEq)]
pub struct SummarySpec {
    pub intervals: Vec<(u64, u64)>,
    pub checkpoints: Vec<u64>,
    pub loss_threshold: Option<f64>,
}

impl SummarySpec {
    /// Defaults for a run of `steps`: three equal intervals and checkpoints
    /// at the quartiles.
    pub fn default_for(steps: u64) -> Self {
        let third = (steps / 3).max(1);
        let intervals = vec![
            (0, third.min(steps)),
            (third.min(steps), (2 * third).min(steps)),
            ((2 * third).min(steps), steps),
        ];
        let mut checkpoints: Vec<u64> =
            [steps / 4, steps / 2, 3 * steps / 4, steps.saturating_sub(1)]
                .into_iter()
                .collect();
        checkpoints.dedup();
        Self {
            intervals,
            checkpoints,
            loss_threshold: None,
        }
    }

    pub fn with_loss_threshold(mut self, threshold: Option<f64>) -> Self {
        self.loss_threshold = threshold;
        self
    }
}

/// Update-magnitude statistics over one step interval.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IntervalStats {
    pub start: u64,
    pub end: u64,
    pub update_std: f64,
    pub update_max: f64,
}

/// An interval that produced no statistics, with the reason.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SkippedInterval {
    pub start: u64,
    pub end: u64,
    pub reason: String,
}

/// Inter-layer norm statistics at one checkpoint step.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckpointStats {
    pub step: u64,
    pub raw_norm_mean: f64,
    pub raw_norm_variance: f64,
    pub shaped_norm_mean: f64,
    pub shaped_norm_variance: f64,
}

/// Aggregated view of one run.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunSummary {
    pub diverged: bool,
    pub steps_completed: u64,
    pub requested_steps: u64,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub loss_threshold: Option<f64>,
    pub steps_to_threshold: Option<u64>,
    pub clip_frequency: f64,
    pub max_update_magnitude: f64,
    pub update_intervals: Vec<IntervalStats>,
    pub skipped_intervals: Vec<SkippedInterval>,
    pub checkpoints: Vec<CheckpointStats>,
    pub variance_kind: &'static str,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(step: u64, layer: usize, loss: f64, update: f64, clipped: bool) -> StepRecord {
        StepRecord {
            step,
            layer,
            loss,
            raw_norm: 1.0,
            shaped_norm: 1.0,
            norm_bound: None,
            alpha: 1.0,
            update_magnitude: update,
            clipped,
            eta: 0.1,
        }
    }

    fn metrics_two_layers() -> RunMetrics {
        let mut records = Vec::new();
        for step in 0..4u64 {
            records.push(record(step, 0, 10.0 / (step + 1) as f64, 0.3, step == 2));
            records.push(record(step, 1, 10.0 / (step + 1) as f64, 0.4, false));
        }
        RunMetrics {
            records,
            initial_loss: 10.0,
            final_loss: 2.0,
            steps_completed: 4,
            requested_steps: 4,
            n_layers: 2,
            diverged: false,
            shaper_states: None,
        }
    }

    #[test]
    fn csv_shape_and_header() {
        let m = metrics_two_layers();
        let csv = m.to_csv();
        let lines: Vec<&str> = csv.trim_end().lines().collect();
        assert_eq!(lines[0], CSV_HEADER);
        assert_eq!(lines.len(), 1 + 4 * 2);
        // Missing bound serializes as NaN.
        assert!(lines[1].contains("NaN"));
        assert!(csv.ends_with('\n'));
    }

    #[test]
    fn constant_updates_have_zero_std() {
        let m = metrics_two_layers();
        let spec = SummarySpec {
            intervals: vec![(0, 4)],
            checkpoints: vec![],
            loss_threshold: None,
        };
        let s = m.summarize(&spec);
        let expected = (0.3f64 * 0.3 + 0.4 * 0.4).sqrt();
        assert!(s.update_intervals[0].update_std < 1e-15);
        assert!((s.update_intervals[0].update_max - expected).abs() < 1e-15);
        assert!((s.max_update_magnitude - expected).abs() < 1e-15);
    }

    #[test]
    fn interlayer_population_variance() {
        let mut m = metrics_two_layers();
        m.records[0].raw_norm = 1.0;
        m.records[1].raw_norm = 3.0;
        let spec = SummarySpec {
            intervals: vec![],
            checkpoints: vec![0],
            loss_threshold: None,
        };
        let s = m.summarize(&spec);
        assert_eq!(s.checkpoints[0].raw_norm_mean, 2.0);
        assert_eq!(s.checkpoints[0].raw_norm_variance, 1.0);
    }

    #[test]
    fn empty_intervals_are_flagged_and_excluded() {
        let m = metrics_two_layers();
        let spec = SummarySpec {
            intervals: vec![(0, 2), (3, 3), (10, 20)],
            checkpoints: vec![],
            loss_threshold: None,
        };
        let s = m.summarize(&spec);
        assert_eq!(s.update_intervals.len(), 1);
        assert_eq!(s.skipped_intervals.len(), 2);
        assert_eq!(s.skipped_intervals[0].reason, "empty range");
        assert_eq!(s.skipped_intervals[1].reason, "no recorded steps");
    }

    #[test]
    fn clip_frequency_counts_steps_with_any_clip() {
        let m = metrics_two_layers();
        let s = m.summarize(&SummarySpec::default_for(4));
        assert_eq!(s.clip_frequency, 0.25);
    }

    #[test]
    fn steps_to_threshold_uses_recorded_loss() {
        let m = metrics_two_layers();
        let spec = SummarySpec::default_for(4).with_loss_threshold(Some(4.0));
        // Losses are 10, 5, 10/3, 2.5 -> first below 4.0 at step 2.
        assert_eq!(m.summarize(&spec).steps_to_threshold, Some(2));
        let spec = SummarySpec::default_for(4).with_loss_threshold(Some(0.1));
        assert_eq!(m.summarize(&spec).steps_to_threshold, None);
    }

    #[test]
    fn checkpoints_beyond_run_are_dropped() {
        let m = metrics_two_layers();
        let spec = SummarySpec {
            intervals: vec![],
            checkpoints: vec![0, 3, 4, 100],
            loss_threshold: None,
        };
        let s = m.summarize(&spec);
        let steps: Vec<u64> = s.checkpoints.iter().map(|c| c.step).collect();
        assert_eq!(steps, vec![0, 3]);
    }
}
