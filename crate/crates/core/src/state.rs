//! Stateful trackers and the per-layer adaptive shaping step.
//!
//! All state here uses value semantics: an update consumes nothing and
//! returns the advanced tracker, so distinct layers can be processed
//! concurrently without synchronization and a step can never half-apply.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::shaping::{
    l2_norm, power_shape, project_to_norm, ClipThreshold, GradientVector, LayerId, ShapingError,
};

/// Errors from the stateful trackers.
#[derive(Clone, Debug, PartialEq)]
pub enum StateError {
    /// A tracker was fed a NaN or infinite observation.
    NonFiniteInput {
        name: &'static str,
        value: f64,
    },
    /// A constructor parameter violated its constraint.
    InvalidParameter {
        name: &'static str,
        value: f64,
    },
    /// Per-layer state was asked to process a gradient from another layer.
    LayerMismatch {
        state: LayerId,
        gradient: LayerId,
    },
    /// Tracked state became inconsistent (e.g. a negative threshold).
    InvalidState(&'static str),
    /// A quantile was requested from an empty history.
    EmptyHistory,
    Shaping(ShapingError),
}

impl fmt::Display for StateError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StateError::NonFiniteInput { name, value } => {
                write!(f, "non-finite input {name} = {value}")
            }
            StateError::InvalidParameter { name, value } => {
                write!(f, "invalid parameter {name} = {value}")
            }
            StateError::LayerMismatch { state, gradient } => {
                write!(
                    f,
                    "state for layer {state} given gradient for layer {gradient}"
                )
            }
            StateError::InvalidState(what) => write!(f, "invalid state: {what}"),
            StateError::EmptyHistory => write!(f, "norm history is empty"),
            StateError::Shaping(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for StateError {}

impl From<ShapingError> for StateError {
    fn from(e: ShapingError) -> Self {
        StateError::Shaping(e)
    }
}

/// Exponential moving average with smoothing factor `beta` in `[0, 1)`.
///
/// The first observation initializes the average directly (`value = x`)
/// instead of decaying from an arbitrary constant; with `beta` near one a
/// bad seed value would otherwise dominate for thousands of steps. After
/// initialization each update applies `value := beta * value + (1 - beta) * x`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EmaTracker {
    beta: f64,
    value: f64,
    initialized: bool,
}

impl EmaTracker {
    pub fn new(beta: f64) -> Result<Self, StateError> {
        if !(beta.is_finite() && (0.0..1.0).contains(&beta)) {
            return Err(StateError::InvalidParameter {
                name: "beta",
                value: beta,
            });
        }
        Ok(Self {
            beta,
            value: 0.0,
            initialized: false,
        })
    }

    /// A tracker that starts from a known value instead of the first
    /// observation.
    pub fn with_value(beta: f64, value: f64) -> Result<Self, StateError> {
        if !value.is_finite() {
            return Err(StateError::NonFiniteInput {
                name: "initial value",
                value,
            });
        }
        let mut t = Self::new(beta)?;
        t.value = value;
        t.initialized = true;
        Ok(t)
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    /// The current average, or `None` before the first observation.
    pub fn value(&self) -> Option<f64> {
        self.initialized.then_some(self.value)
    }

    /// Feed one observation, returning the advanced tracker.
    pub fn update(&self, x: f64) -> Result<EmaTracker, StateError> {
        if !x.is_finite() {
            return Err(StateError::NonFiniteInput {
                name: "observation",
                value: x,
            });
        }
        let value = if self.initialized {
            self.beta * self.value + (1.0 - self.beta) * x
        } else {
            x
        };
        Ok(EmaTracker {
            beta: self.beta,
            value,
            initialized: true,
        })
    }
}

/// How the shaping-exponent map reads the current gradient.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaInput {
    /// Feed the scale-free ratio `||g|| / tau` to the exponent map.
    #[default]
    Ratio,
    /// Feed the raw norm `||g||` directly (not scale-free across layers;
    /// kept available behind this switch for comparison).
    RawNorm,
}

fn default_beta() -> f64 {
    0.99
}
fn default_alpha_min() -> f64 {
    0.7
}
fn default_alpha_max() -> f64 {
    1.0
}
fn default_kappa() -> f64 {
    0.3
}

/// Parameters of the per-layer shaper: EMA smoothing, the exponent range,
/// and the slope of the exponent map.
///
/// Defaults: `beta = 0.99`, exponents in `[0.7, 1.0]`, `kappa = 0.3` — with
/// this slope the exponent reaches its lower bound when the gradient norm is
/// twice the tracked threshold.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpampParams {
    pub beta: f64,
    pub alpha_min: f64,
    pub alpha_max: f64,
    pub kappa: f64,
    pub alpha_input: AlphaInput,
    /// Optional explicit starting threshold; when absent the first observed
    /// norm initializes the tracker.
    pub tau_init: Option<f64>,
}

impl Default for SpampParams {
    fn default() -> Self {
        Self {
            beta: default_beta(),
            alpha_min: default_alpha_min(),
            alpha_max: default_alpha_max(),
            kappa: default_kappa(),
            alpha_input: AlphaInput::Ratio,
            tau_init: None,
        }
    }
}

impl SpampParams {
    pub fn validate(&self) -> Result<(), StateError> {
        if !(self.alpha_min.is_finite() && self.alpha_min > 0.0) {
            return Err(StateError::InvalidParameter {
                name: "alpha_min",
                value: self.alpha_min,
            });
        }
        if !(self.alpha_max.is_finite() && self.alpha_max >= self.alpha_min) {
            return Err(StateError::InvalidParameter {
                name: "alpha_max",
                value: self.alpha_max,
            });
        }
        if !(self.kappa.is_finite() && self.kappa >= 0.0) {
            return Err(StateError::InvalidParameter {
                name: "kappa",
                value: self.kappa,
            });
        }
        if let Some(tau) = self.tau_init {
            if !(tau.is_finite() && tau > 0.0) {
                return Err(StateError::InvalidParameter {
                    name: "tau_init",
                    value: tau,
                });
            }
        }
        Ok(())
    }
}

/// Per-layer shaper state: the tracked norm threshold plus the exponent-map
/// parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerShaperState {
    layer: LayerId,
    tau: EmaTracker,
    alpha_min: f64,
    alpha_max: f64,
    kappa: f64,
    alpha_input: AlphaInput,
    step_count: u64,
}

/// Telemetry for one shaping step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SpampDiagnostics {
    pub raw_norm: f64,
    pub tau_after: f64,
    pub alpha_used: f64,
    pub shaped_norm_pre_projection: f64,
    pub projected: bool,
    /// `eta * ||g~||` for the gradient actually returned.
    pub update_magnitude: f64,
}

/// Flat snapshot of a layer's shaper state, as persisted in run artifacts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerShaperSnapshot {
    pub layer_id: usize,
    pub tau: Option<f64>,
    pub beta: f64,
    pub alpha_min: f64,
    pub alpha_max: f64,
    pub kappa: f64,
    pub step_count: u64,
}

impl LayerShaperState {
    pub fn new(layer: LayerId, params: &SpampParams) -> Result<Self, StateError> {
        params.validate()?;
        let tau = match params.tau_init {
            Some(v) => EmaTracker::with_value(params.beta, v)?,
            None => EmaTracker::new(params.beta)?,
        };
        Ok(Self {
            layer,
            tau,
            alpha_min: params.alpha_min,
            alpha_max: params.alpha_max,
            kappa: params.kappa,
            alpha_input: params.alpha_input,
            step_count: 0,
        })
    }

    pub fn layer(&self) -> LayerId {
        self.layer
    }

    pub fn tau(&self) -> &EmaTracker {
        &self.tau
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn snapshot(&self) -> LayerShaperSnapshot {
        LayerShaperSnapshot {
            layer_id: self.layer.0,
            tau: self.tau.value(),
            beta: self.tau.beta(),
            alpha_min: self.alpha_min,
            alpha_max: self.alpha_max,
            kappa: self.kappa,
            step_count: self.step_count,
        }
    }

    /// The exponent map `h`: `clamp(alpha_max - kappa * max(0, r - 1),
    /// alpha_min, alpha_max)`. Monotone non-increasing in `r`; equals
    /// `alpha_max` for `r <= 1`.
    pub fn shaping_exponent(&self, r: f64) -> Result<f64, StateError> {
        if !(r.is_finite() && r >= 0.0) {
            return Err(StateError::NonFiniteInput {
                name: "ratio",
                value: r,
            });
        }
        let excess = (r - 1.0).max(0.0);
        Ok((self.alpha_max - self.kappa * excess).clamp(self.alpha_min, self.alpha_max))
    }

    /// One full shaping step for this layer:
    ///
    /// 1. advance the threshold EMA with the raw norm,
    /// 2. pick the exponent from the norm-to-threshold ratio,
    /// 3. apply the power transform,
    /// 4. project back onto the threshold ball if the shaped norm exceeds it.
    ///
    /// Returns the shaped gradient, the advanced state, and step telemetry.
    /// The parameter update itself (`theta -= eta * g~`) is the caller's job.
    /// The threshold EMA always observes the raw norm, never the shaped one;
    /// feeding shaped norms back would let the threshold collapse.
    pub fn step(
        &self,
        g: &GradientVector,
        eta: f64,
    ) -> Result<(GradientVector, LayerShaperState, SpampDiagnostics), StateError> {
        if !(eta.is_finite() && eta > 0.0) {
            return Err(StateError::InvalidParameter {
                name: "eta",
                value: eta,
            });
        }
        if g.layer() != self.layer {
            return Err(StateError::LayerMismatch {
                state: self.layer,
                gradient: g.layer(),
            });
        }

        let raw_norm = l2_norm(g);
        let tau = self.tau.update(raw_norm)?;
        let tau_value = tau.value().expect("updated tracker is initialized");
        if tau_value < 0.0 || !tau_value.is_finite() {
            return Err(StateError::InvalidState("threshold EMA left [0, inf)"));
        }

        // tau can only be zero for an all-zero norm stream, in which case the
        // gradient is zero and shaping is the identity on it.
        let ratio = if raw_norm == 0.0 || tau_value == 0.0 {
            0.0
        } else {
            match self.alpha_input {
                AlphaInput::Ratio => raw_norm / tau_value,
                AlphaInput::RawNorm => raw_norm,
            }
        };
        let alpha = self.shaping_exponent(ratio)?;
        let shaped = power_shape(g, alpha)?;
        let shaped_pre = l2_norm(&shaped);

        let projected = tau_value > 0.0 && shaped_pre > tau_value;
        let shaped = if projected {
            let tau_bound = ClipThreshold::new(tau_value).map_err(StateError::Shaping)?;
            project_to_norm(&shaped, tau_bound)
        } else {
            shaped
        };

        let next = LayerShaperState {
            layer: self.layer,
            tau,
            alpha_min: self.alpha_min,
            alpha_max: self.alpha_max,
            kappa: self.kappa,
            alpha_input: self.alpha_input,
            step_count: self.step_count + 1,
        };
        let diagnostics = SpampDiagnostics {
            raw_norm,
            tau_after: tau_value,
            alpha_used: alpha,
            shaped_norm_pre_projection: shaped_pre,
            projected,
            update_magnitude: eta * l2_norm(&shaped),
        };
        Ok((shaped, next, diagnostics))
    }
}

/// Tracks the running update magnitude `eta * ||g||` and derives the
/// adaptive bound `delta_t = EMA + epsilon`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UpdateBudgetTracker {
    ema: EmaTracker,
    epsilon: f64,
}

impl UpdateBudgetTracker {
    pub fn new(beta: f64, epsilon: f64) -> Result<Self, StateError> {
        if !(epsilon.is_finite() && epsilon > 0.0) {
            return Err(StateError::InvalidParameter {
                name: "epsilon",
                value: epsilon,
            });
        }
        Ok(Self {
            ema: EmaTracker::new(beta)?,
            epsilon,
        })
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn ema(&self) -> &EmaTracker {
        &self.ema
    }

    /// Feed `eta * grad_norm` into the EMA and return the current bound
    /// together with the advanced tracker. The epsilon floor keeps the bound
    /// strictly positive.
    pub fn observe(
        &self,
        eta: f64,
        grad_norm: f64,
    ) -> Result<(f64, UpdateBudgetTracker), StateError> {
        if !(eta.is_finite() && eta > 0.0) {
            return Err(StateError::InvalidParameter {
                name: "eta",
                value: eta,
            });
        }
        if !(grad_norm.is_finite() && grad_norm >= 0.0) {
            return Err(StateError::NonFiniteInput {
                name: "grad_norm",
                value: grad_norm,
            });
        }
        let ema = self.ema.update(eta * grad_norm)?;
        let delta = ema.value().expect("updated tracker is initialized") + self.epsilon;
        Ok((
            delta,
            UpdateBudgetTracker {
                ema,
                epsilon: self.epsilon,
            },
        ))
    }
}

/// Bounded window of observed gradient norms, for quantile-based thresholds.
#[derive(Clone, Debug, PartialEq)]
pub struct NormHistory {
    samples: Vec<f64>,
    capacity: usize,
    next: usize,
}

impl NormHistory {
    pub fn new(capacity: usize) -> Result<Self, StateError> {
        if capacity == 0 {
            return Err(StateError::InvalidParameter {
                name: "capacity",
                value: 0.0,
            });
        }
        Ok(Self {
            samples: Vec::new(),
            capacity,
            next: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Record one norm observation, overwriting the oldest once full.
    pub fn push(&mut self, norm: f64) -> Result<(), StateError> {
        if !(norm.is_finite() && norm >= 0.0) {
            return Err(StateError::NonFiniteInput {
                name: "norm",
                value: norm,
            });
        }
        if self.samples.len() < self.capacity {
            self.samples.push(norm);
        } else {
            self.samples[self.next] = norm;
        }
        self.next = (self.next + 1) % self.capacity;
        Ok(())
    }

    /// Nearest-rank quantile: sort ascending and take the element at index
    /// `ceil(q * n) - 1`, clamped to the valid range. `q = 0.5` gives the
    /// median-style threshold. No interpolation, so the result is always an
    /// observed value and is reproducible across platforms.
    pub fn quantile(&self, q: f64) -> Result<f64, StateError> {
        if self.samples.is_empty() {
            return Err(StateError::EmptyHistory);
        }
        if !(q.is_finite() && (0.0..=1.0).contains(&q)) {
            return Err(StateError::InvalidParameter {
                name: "q",
                value: q,
            });
        }
        let mut sorted = self.samples.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).expect("norms are finite"));
        let n = sorted.len();
        let rank = (q * n as f64).ceil() as isize - 1;
        let index = rank.clamp(0, n as isize - 1) as usize;
        Ok(sorted[index])
    }
}
