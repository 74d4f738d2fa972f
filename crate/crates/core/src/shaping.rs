//! Pure, stateless gradient shaping operators.
//!
//! Every operator here is a pure function: it never mutates its input and
//! carries no state, so operators compose freely and are safe to call from
//! any number of threads. The catalog covers hard norm clipping, norm
//! projection, normalization, component-wise power shaping, warmup scaling,
//! and update-magnitude clipping.

use std::fmt;

/// Identifies one layer of a model. Opaque to the operators; only used to
/// keep per-layer gradients and per-layer state paired up.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LayerId(pub usize);

impl fmt::Display for LayerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Errors from the shaping operators.
#[derive(Clone, Debug, PartialEq)]
pub enum ShapingError {
    /// A gradient component was NaN or infinite.
    NonFiniteComponent { layer: LayerId, index: usize },
    /// A gradient vector had no components.
    EmptyGradient { layer: LayerId },
    /// A scalar parameter violated its constraint (e.g. a non-positive
    /// exponent or learning rate).
    InvalidParameter { name: &'static str, value: f64 },
    /// An operator that requires a nonzero gradient was given a zero vector.
    ZeroGradient { layer: LayerId },
    /// An operator produced a non-finite component (overflow).
    NonFiniteResult { name: &'static str, layer: LayerId },
}

impl fmt::Display for ShapingError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ShapingError::NonFiniteComponent { layer, index } => {
                write!(
                    f,
                    "gradient for layer {layer} has non-finite component at index {index}"
                )
            }
            ShapingError::EmptyGradient { layer } => {
                write!(f, "gradient for layer {layer} has no components")
            }
            ShapingError::InvalidParameter { name, value } => {
                write!(f, "invalid parameter {name} = {value}")
            }
            ShapingError::ZeroGradient { layer } => {
                write!(f, "cannot normalize zero gradient for layer {layer}")
            }
            ShapingError::NonFiniteResult { name, layer } => {
                write!(
                    f,
                    "{name} produced a non-finite component for layer {layer}"
                )
            }
        }
    }
}

impl std::error::Error for ShapingError {}

/// One layer's gradient: the partial derivatives of the loss with respect to
/// every parameter of that layer, flattened into a single vector.
///
/// Invariants enforced at construction: at least one component, all
/// components finite.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientVector {
    layer: LayerId,
    components: Vec<f64>,
}

impl GradientVector {
    pub fn new(layer: LayerId, components: Vec<f64>) -> Result<Self, ShapingError> {
        if components.is_empty() {
            return Err(ShapingError::EmptyGradient { layer });
        }
        for (index, c) in components.iter().enumerate() {
            if !c.is_finite() {
                return Err(ShapingError::NonFiniteComponent { layer, index });
            }
        }
        Ok(Self { layer, components })
    }

    /// Internal constructor for operator outputs whose components are known
    /// to be finite (e.g. rescaling by a factor in [0, 1]).
    fn from_parts(layer: LayerId, components: Vec<f64>) -> Self {
        debug_assert!(!components.is_empty());
        debug_assert!(components.iter().all(|c| c.is_finite()));
        Self { layer, components }
    }

    pub fn layer(&self) -> LayerId {
        self.layer
    }

    pub fn components(&self) -> &[f64] {
        &self.components
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn into_components(self) -> Vec<f64> {
        self.components
    }
}

/// A positive gradient-norm threshold.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClipThreshold(f64);

impl ClipThreshold {
    pub fn new(value: f64) -> Result<Self, ShapingError> {
        if !(value.is_finite() && value > 0.0) {
            return Err(ShapingError::InvalidParameter {
                name: "clip threshold",
                value,
            });
        }
        Ok(Self(value))
    }

    pub fn value(&self) -> f64 {
        self.0
    }
}

/// A positive bound on the per-step update magnitude `eta * ||g||`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UpdateBound(f64);

impl UpdateBound {
    pub fn new(value: f64) -> Result<Self, ShapingError> {
        if !(value.is_finite() && value > 0.0) {
            return Err(ShapingError::InvalidParameter {
                name: "update bound",
                value,
            });
        }
        Ok(Self(value))
    }

    pub fn value(&self) -> f64 {
        self.0
    }
}

/// The l2 norm of a gradient: `sqrt(sum_i g_i^2)`.
pub fn l2_norm(g: &GradientVector) -> f64 {
    g.components.iter().map(|c| c * c).sum::<f64>().sqrt()
}

fn validate_eta(name: &'static str, eta: f64) -> Result<(), ShapingError> {
    if !(eta.is_finite() && eta > 0.0) {
        return Err(ShapingError::InvalidParameter { name, value: eta });
    }
    Ok(())
}

/// Rescale `g` to norm `target` when its norm exceeds `target`; otherwise
/// return it unchanged. The zero vector always takes the unchanged branch,
/// so no division by zero can occur.
fn clip_to_norm(g: &GradientVector, target: f64) -> (GradientVector, bool) {
    let norm = l2_norm(g);
    if norm <= target {
        (g.clone(), false)
    } else {
        let scale = target / norm;
        let components = g.components.iter().map(|c| c * scale).collect();
        (GradientVector::from_parts(g.layer, components), true)
    }
}

/// Hard norm clipping: identity below the threshold, rescale to norm `tau`
/// above it. Direction is always preserved.
pub fn hard_clip(g: &GradientVector, tau: ClipThreshold) -> GradientVector {
    clip_to_norm(g, tau.value()).0
}

/// Rescale a (typically already shaped) gradient back onto the norm ball of
/// radius `tau`. Same contract as [`hard_clip`]; kept as a distinct named
/// operation because the shaping pipeline applies it after the power
/// transform rather than to the raw gradient.
pub fn project_to_norm(g: &GradientVector, tau: ClipThreshold) -> GradientVector {
    clip_to_norm(g, tau.value()).0
}

/// Unit-direction update: `g / ||g||`. Rejects the zero gradient.
pub fn normalize(g: &GradientVector) -> Result<GradientVector, ShapingError> {
    let norm = l2_norm(g);
    if norm == 0.0 {
        return Err(ShapingError::ZeroGradient { layer: g.layer });
    }
    let components = g.components.iter().map(|c| c / norm).collect();
    Ok(GradientVector::from_parts(g.layer, components))
}

/// Component-wise power transform: `sign(g_i) * |g_i|^alpha`.
///
/// `alpha = 1` is the exact identity. `alpha < 1` compresses components with
/// magnitude above one and amplifies those below one; the pipeline relies on
/// a subsequent norm projection to bound the total, so the amplification is
/// deliberate and not corrected here.
pub fn power_shape(g: &GradientVector, alpha: f64) -> Result<GradientVector, ShapingError> {
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(ShapingError::InvalidParameter {
            name: "alpha",
            value: alpha,
        });
    }
    if alpha == 1.0 {
        return Ok(g.clone());
    }
    let components: Vec<f64> = g
        .components
        .iter()
        .map(|&c| {
            if c == 0.0 {
                0.0
            } else {
                c.signum() * c.abs().powf(alpha)
            }
        })
        .collect();
    if components.iter().any(|c| !c.is_finite()) {
        return Err(ShapingError::NonFiniteResult {
            name: "power_shape",
            layer: g.layer,
        });
    }
    Ok(GradientVector::from_parts(g.layer, components))
}

/// The norm of the power-shaped gradient, `(sum_i |g_i|^(2 alpha))^(1/2)`,
/// computed directly rather than by materializing the shaped vector.
pub fn shaped_norm(g: &GradientVector, alpha: f64) -> Result<f64, ShapingError> {
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(ShapingError::InvalidParameter {
            name: "alpha",
            value: alpha,
        });
    }
    let sum: f64 = g
        .components
        .iter()
        .map(|&c| {
            if c == 0.0 {
                0.0
            } else {
                c.abs().powf(2.0 * alpha)
            }
        })
        .sum();
    if !sum.is_finite() {
        return Err(ShapingError::NonFiniteResult {
            name: "shaped_norm",
            layer: g.layer,
        });
    }
    Ok(sum.sqrt())
}

/// Update clipping: rescale `g` so that `eta * ||g~|| <= delta`. Gradients
/// whose update magnitude is already within the bound pass unchanged.
pub fn update_clip(
    g: &GradientVector,
    eta: f64,
    delta: UpdateBound,
) -> Result<GradientVector, ShapingError> {
    validate_eta("eta", eta)?;
    let norm = l2_norm(g);
    if eta * norm <= delta.value() {
        Ok(g.clone())
    } else {
        let scale = delta.value() / (eta * norm);
        let components = g.components.iter().map(|c| c * scale).collect();
        Ok(GradientVector::from_parts(g.layer, components))
    }
}

/// Warmup scaling: multiply every component by the current learning-rate
/// factor `eta_t`.
pub fn warmup_scale(g: &GradientVector, eta_t: f64) -> Result<GradientVector, ShapingError> {
    validate_eta("eta_t", eta_t)?;
    let components: Vec<f64> = g.components.iter().map(|c| c * eta_t).collect();
    if components.iter().any(|c| !c.is_finite()) {
        return Err(ShapingError::NonFiniteResult {
            name: "warmup_scale",
            layer: g.layer,
        });
    }
    Ok(GradientVector::from_parts(g.layer, components))
}
