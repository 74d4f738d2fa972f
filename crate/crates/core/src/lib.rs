//! Statistics-driven gradient shaping for stochastic gradient descent.
//!
//! The crate is organized around three layers:
//!
//! - [`shaping`] — pure, stateless operators on per-layer gradients: hard
//!   clipping, normalization, power transforms, warmup scaling, and
//!   update-magnitude clipping.
//! - [`state`] — the stateful side: per-layer EMA threshold tracking, dynamic
//!   shaping exponents, the adaptive update-budget tracker, and the full
//!   per-layer shaping step that composes them.
//! - [`descent`] — analytic and Monte-Carlo tooling for expected clipped
//!   descent under heavy-tailed gradient-norm models, plus finite-difference
//!   smoothness probes of the shaping operators.
//!
//! [`trainer`] wires everything into a small training harness over toy
//! problems with exact gradient oracles, and [`exec`] selects between the
//! rayon-backed and sequential execution paths (both produce bit-identical
//! results).

pub mod descent;
pub mod exec;
pub mod shaping;
pub mod state;
pub mod trainer;

pub use shaping::{ClipThreshold, GradientVector, LayerId, ShapingError, UpdateBound};
pub use state::{
    EmaTracker, LayerShaperState, NormHistory, SpampDiagnostics, SpampParams, StateError,
    UpdateBudgetTracker,
};
