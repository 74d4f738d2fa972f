//! The per-step shaping stage: one of six mutually exclusive modes applied
//! to the per-layer gradients before the parameter update.

use serde::{Deserialize, Serialize};

use super::schedule::LrSchedule;
use super::TrainError;
use crate::shaping::{hard_clip, l2_norm, update_clip, ClipThreshold, GradientVector, UpdateBound};
use crate::state::{LayerShaperSnapshot, LayerShaperState, SpampParams, UpdateBudgetTracker};

/// Which shaping stage a run uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PipelineMode {
    /// Plain SGD: gradients pass through untouched.
    Baseline,
    /// Hard norm clipping at a fixed threshold.
    FixedClip,
    /// Linear learning-rate warmup combined with fixed clipping.
    WarmupFixedClip,
    /// Scale the learning rate down so the update magnitude stays within a
    /// fixed budget: `eta_eff = min(eta, delta / ||g||)`.
    Gradnorm,
    /// Rescale the gradient so `eta * ||g~||` stays within an adaptive
    /// budget tracked per layer.
    UpdateClip,
    /// Per-layer adaptive shaping: EMA threshold, dynamic power exponent,
    /// norm projection.
    Spamp,
}

impl PipelineMode {
    pub const ALL: [PipelineMode; 6] = [
        PipelineMode::Baseline,
        PipelineMode::FixedClip,
        PipelineMode::WarmupFixedClip,
        PipelineMode::Gradnorm,
        PipelineMode::UpdateClip,
        PipelineMode::Spamp,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            PipelineMode::Baseline => "baseline",
            PipelineMode::FixedClip => "fixed_clip",
            PipelineMode::WarmupFixedClip => "warmup_fixed_clip",
            PipelineMode::Gradnorm => "gradnorm",
            PipelineMode::UpdateClip => "update_clip",
            PipelineMode::Spamp => "spamp",
        }
    }

    pub fn parse(name: &str) -> Option<PipelineMode> {
        Self::ALL.iter().copied().find(|m| m.name() == name)
    }
}

fn default_tau_fixed() -> f64 {
    1.0
}

/// Parameters of the adaptive update-magnitude budget.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UpdateClipParams {
    pub beta: f64,
    pub epsilon: f64,
}

impl Default for UpdateClipParams {
    fn default() -> Self {
        Self {
            beta: 0.99,
            epsilon: 0.01,
        }
    }
}

/// Fixed update budget for the inverse learning-rate mode.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradnormParams {
    pub delta: f64,
}

impl Default for GradnormParams {
    fn default() -> Self {
        Self { delta: 1.0 }
    }
}

/// Full shaping-stage configuration. Exactly one mode is active per run;
/// parameter blocks for inactive modes are ignored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub mode: PipelineMode,
    #[serde(default = "default_tau_fixed")]
    pub tau_fixed: f64,
    /// Warmup length for `warmup_fixed_clip`; defaults to 5% of the run.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warmup_steps: Option<u64>,
    #[serde(default)]
    pub spamp: SpampParams,
    #[serde(default)]
    pub update_clip: UpdateClipParams,
    #[serde(default)]
    pub gradnorm: GradnormParams,
    pub lr: LrSchedule,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.tau_fixed.is_finite() && self.tau_fixed > 0.0) {
            return Err(TrainError::InvalidConfig(format!(
                "tau_fixed must be positive, got {}",
                self.tau_fixed
            )));
        }
        self.spamp.validate().map_err(TrainError::from)?;
        if !(self.update_clip.epsilon.is_finite() && self.update_clip.epsilon > 0.0) {
            return Err(TrainError::InvalidConfig(format!(
                "update_clip.epsilon must be positive, got {}",
                self.update_clip.epsilon
            )));
        }
        if !(self.update_clip.beta.is_finite() && (0.0..1.0).contains(&self.update_clip.beta)) {
            return Err(TrainError::InvalidConfig(format!(
                "update_clip.beta must lie in [0, 1), got {}",
                self.update_clip.beta
            )));
        }
        if !(self.gradnorm.delta.is_finite() && self.gradnorm.delta > 0.0) {
            return Err(TrainError::InvalidConfig(format!(
                "gradnorm.delta must be positive, got {}",
                self.gradnorm.delta
            )));
        }
        Ok(())
    }

    /// Warmup length in effect for a run of `steps`.
    pub fn effective_warmup(&self, steps: u64) -> u64 {
        self.warmup_steps.unwrap_or(steps / 20).max(1)
    }
}

/// Shaping outcome for one layer at one step.
pub(crate) struct LayerShaping {
    pub shaped: GradientVector,
    pub raw_norm: f64,
    pub shaped_norm: f64,
    /// Bound on the shaped gradient norm in effect this step, when the mode
    /// defines one.
    pub norm_bound: Option<f64>,
    pub alpha: f64,
    pub clipped: bool,
}

/// Shaping outcome for one full step.
pub(crate) struct StepShaping {
    /// Learning rate actually applied to the update (differs from the
    /// scheduled rate only in gradnorm mode).
    pub eta_eff: f64,
    pub layers: Vec<LayerShaping>,
}

enum StageState {
    Stateless,
    UpdateClip(Vec<UpdateBudgetTracker>),
    Spamp(Vec<LayerShaperState>),
}

/// Mutable shaping stage owned by one run.
pub(crate) struct Pipeline {
    mode: PipelineMode,
    tau_fixed: f64,
    gradnorm_delta: f64,
    stage: StageState,
}

impl Pipeline {
    pub fn new(cfg: &PipelineConfig, n_layers: usize) -> Result<Self, TrainError> {
        cfg.validate()?;
        let stage = match cfg.mode {
            PipelineMode::UpdateClip => StageState::UpdateClip(
                (0..n_layers)
                    .map(|_| {
                        UpdateBudgetTracker::new(cfg.update_clip.beta, cfg.update_clip.epsilon)
                    })
                    .collect::<Result<_, _>>()?,
            ),
            PipelineMode::Spamp => StageState::Spamp(
                (0..n_layers)
                    .map(|l| LayerShaperState::new(crate::shaping::LayerId(l), &cfg.spamp))
                    .collect::<Result<_, _>>()?,
            ),
            _ => StageState::Stateless,
        };
        Ok(Self {
            mode: cfg.mode,
            tau_fixed: cfg.tau_fixed,
            gradnorm_delta: cfg.gradnorm.delta,
            stage,
        })
    }

    pub fn apply(
        &mut self,
        grads: Vec<GradientVector>,
        eta: f64,
    ) -> Result<StepShaping, TrainError> {
        let mut eta_eff = eta;
        let mut layers = Vec::with_capacity(grads.len());

        match (&mut self.stage, self.mode) {
            (StageState::Stateless, PipelineMode::Baseline) => {
                for g in grads {
                    let norm = l2_norm(&g);
                    layers.push(LayerShaping {
                        raw_norm: norm,
                        shaped_norm: norm,
                        norm_bound: None,
                        alpha: 1.0,
                        clipped: false,
                        shaped: g,
                    });
                }
            }
            (StageState::Stateless, PipelineMode::FixedClip | PipelineMode::WarmupFixedClip) => {
                let tau = ClipThreshold::new(self.tau_fixed)?;
                for g in grads {
                    let raw_norm = l2_norm(&g);
                    let shaped = hard_clip(&g, tau);
                    let shaped_norm = l2_norm(&shaped);
                    layers.push(LayerShaping {
                        raw_norm,
                        shaped_norm,
                        norm_bound: Some(self.tau_fixed),
                        alpha: 1.0,
                        clipped: raw_norm > self.tau_fixed,
                        shaped,
                    });
                }
            }
            (StageState::Stateless, PipelineMode::Gradnorm) => {
                let total: f64 = grads.iter().map(|g| l2_norm(g).powi(2)).sum::<f64>().sqrt();
                if total > 0.0 {
                    eta_eff = eta.min(self.gradnorm_delta / total);
                }
                let clipped = eta_eff < eta;
                for g in grads {
                    let norm = l2_norm(&g);
                    layers.push(LayerShaping {
                        raw_norm: norm,
                        shaped_norm: norm,
                        norm_bound: None,
                        alpha: 1.0,
                        clipped,
                        shaped: g,
                    });
                }
            }
            (StageState::UpdateClip(trackers), _) => {
                for (tracker, g) in trackers.iter_mut().zip(grads) {
                    let raw_norm = l2_norm(&g);
                    let (delta, next) = tracker.observe(eta, raw_norm)?;
                    *tracker = next;
                    let shaped = update_clip(&g, eta, UpdateBound::new(delta)?)?;
                    let shaped_norm = l2_norm(&shaped);
                    layers.push(LayerShaping {
                        raw_norm,
                        shaped_norm,
                        norm_bound: Some(delta / eta),
                        alpha: 1.0,
                        clipped: eta * raw_norm > delta,
                        shaped,
                    });
                }
            }
            (StageState::Spamp(states), _) => {
                for (state, g) in states.iter_mut().zip(grads) {
                    let (shaped, next, d) = state.step(&g, eta)?;
                    *state = next;
                    let shaped_norm = l2_norm(&shaped);
                    layers.push(LayerShaping {
                        raw_norm: d.raw_norm,
                        shaped_norm,
                        norm_bound: Some(d.tau_after),
                        alpha: d.alpha_used,
                        clipped: d.projected,
                        shaped,
                    });
                }
            }
            (StageState::Stateless, mode) => {
                return Err(TrainError::InvalidConfig(format!(
                    "pipeline stage missing for mode {}",
                    mode.name()
                )))
            }
        }

        Ok(StepShaping { eta_eff, layers })
    }

    /// Snapshots of the per-layer shaper states, for spamp runs.
    pub fn shaper_snapshots(&self) -> Option<Vec<LayerShaperSnapshot>> {
        match &self.stage {
            StageState::Spamp(states) => Some(states.iter().map(|s| s.snapshot()).collect()),
            _ => None,
        }
    }
}
