//! Seeded gradient noise: per-component Gaussian perturbation, step-level
//! spike injection, and batch-variance emulation by alternating the noise
//! scale.
//!
//! Stream layout (all ChaCha8, seeded from the run seed unless noted):
//! step `t` owns streams `t * 1024 ..`: channel 0 decides the spike, channel
//! `1 + l` perturbs layer `l`. Parameter initialization uses streams from
//! `2^60`, and problem data generation uses streams from `2^61` seeded from
//! the problem's `data_seed`, so data stays fixed across run seeds.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::problem::ToyProblem;
use super::TrainError;
use crate::shaping::GradientVector;

const STEP_STRIDE: u64 = 1024;
const INIT_STREAM_BASE: u64 = 1 << 60;
const DATA_STREAM_BASE: u64 = 1 << 61;

/// Maximum number of layers the per-step stream layout can address.
pub const MAX_LAYERS: usize = (STEP_STRIDE - 1) as usize;

pub(crate) fn step_rng(seed: u64, step: u64, channel: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step * STEP_STRIDE + channel);
    rng
}

pub(crate) fn init_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(INIT_STREAM_BASE + index);
    rng
}

pub(crate) fn data_rng(data_seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(data_seed);
    rng.set_stream(DATA_STREAM_BASE + index);
    rng
}

/// One standard normal draw via Box-Muller (consumes two uniforms).
pub(crate) fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random();
    let u2: f64 = rng.random();
    (-2.0 * (1.0 - u1).ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Alternate between two noise scales every `period` steps, emulating a
/// small-batch / large-batch schedule (small batches mean noisier
/// gradients, hence the higher scale).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchAlternation {
    pub period: u64,
    pub low_noise_std: f64,
    pub high_noise_std: f64,
}

/// Gradient perturbation settings. Spike defaults are scale 5 at 2% of
/// steps.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSpec {
    /// Standard deviation of additive per-component Gaussian noise.
    pub gradient_noise_std: f64,
    /// Per-step probability that the entire gradient is scaled up.
    pub spike_probability: f64,
    pub spike_scale: f64,
    /// When set, replaces `gradient_noise_std` with a phase-dependent value.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_alternation: Option<BatchAlternation>,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            gradient_noise_std: 0.0,
            spike_probability: 0.02,
            spike_scale: 5.0,
            batch_alternation: None,
        }
    }
}

impl NoiseSpec {
    /// A spec with no perturbation at all.
    pub fn none() -> Self {
        Self {
            spike_probability: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.gradient_noise_std.is_finite() && self.gradient_noise_std >= 0.0) {
            return Err(TrainError::InvalidConfig(format!(
                "gradient_noise_std must be non-negative, got {}",
                self.gradient_noise_std
            )));
        }
        if !(self.spike_probability.is_finite() && (0.0..=1.0).contains(&self.spike_probability)) {
            return Err(TrainError::InvalidConfig(format!(
                "spike_probability must lie in [0, 1], got {}",
                self.spike_probability
            )));
        }
        if !(self.spike_scale.is_finite() && self.spike_scale > 0.0) {
            return Err(TrainError::InvalidConfig(format!(
                "spike_scale must be positive, got {}",
                self.spike_scale
            )));
        }
        if let Some(alt) = &self.batch_alternation {
            if alt.period == 0 {
                return Err(TrainError::InvalidConfig(
                    "batch_alternation.period must be at least 1".into(),
                ));
            }
            for (name, v) in [
                ("low_noise_std", alt.low_noise_std),
                ("high_noise_std", alt.high_noise_std),
            ] {
                if !(v.is_finite() && v >= 0.0) {
                    return Err(TrainError::InvalidConfig(format!(
                        "batch_alternation.{name} must be non-negative, got {v}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Noise standard deviation in effect at `step`. Phases start low:
    /// steps `[0, period)` use `low_noise_std`, the next `period` steps use
    /// `high_noise_std`, and so on.
    pub fn noise_std_at(&self, step: u64) -> f64 {
        match &self.batch_alternation {
            Some(alt) => {
                if (step / alt.period).is_multiple_of(2) {
                    alt.low_noise_std
                } else {
                    alt.high_noise_std
                }
            }
            None => self.gradient_noise_std,
        }
    }
}

/// The exact gradient at `theta`, perturbed according to `noise`.
/// Deterministic in `(seed, step)`; layers use disjoint streams so the
/// number of layers never shifts another layer's draws.
pub fn noisy_gradient(
    problem: &ToyProblem,
    theta: &[Vec<f64>],
    noise: &NoiseSpec,
    step: u64,
    seed: u64,
) -> Result<Vec<GradientVector>, TrainError> {
    noise.validate()?;
    let grads = problem.exact_gradient(theta)?;
    if grads.len() > MAX_LAYERS {
        return Err(TrainError::InvalidConfig(format!(
            "problem has {} layers; the stream layout supports at most {MAX_LAYERS}",
            grads.len()
        )));
    }

    let std = noise.noise_std_at(step);
    let spike = noise.spike_probability > 0.0 && {
        let mut rng = step_rng(seed, step, 0);
        rng.random::<f64>() < noise.spike_probability
    };
    let scale = if spike { noise.spike_scale } else { 1.0 };

    if std == 0.0 && scale == 1.0 {
        return Ok(grads);
    }

    grads
        .into_iter()
        .enumerate()
        .map(|(l, g)| {
            let layer = g.layer();
            let mut components = g.into_components();
            if std > 0.0 {
                let mut rng = step_rng(seed, step, 1 + l as u64);
                for c in components.iter_mut() {
                    *c += std * standard_normal(&mut rng);
                }
            }
            if scale != 1.0 {
                for c in components.iter_mut() {
                    *c *= scale;
                }
            }
            GradientVector::new(layer, components).map_err(TrainError::from)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shaping::l2_norm;
    use crate::trainer::problem::ProblemSpec;

    fn quadratic() -> ToyProblem {
        ProblemSpec::Quadratic {
            a: None,
            a_diag: Some(vec![1.0, 1.0]),
            b: vec![0.0, 0.0],
            theta0: vec![3.0, 4.0],
        }
        .build()
        .unwrap()
    }

    #[test]
    fn degenerate_noise_is_exact_gradient() {
        let p = quadratic();
        let theta = vec![vec![3.0, 4.0]];
        let spec = NoiseSpec::none();
        let noisy = noisy_gradient(&p, &theta, &spec, 0, 1).unwrap();
        let exact = p.exact_gradient(&theta).unwrap();
        assert_eq!(noisy, exact);
    }

    #[test]
    fn certain_spike_scales_exactly() {
        let p = quadratic();
        let theta = vec![vec![3.0, 4.0]];
        let spec = NoiseSpec {
            gradient_noise_std: 0.0,
            spike_probability: 1.0,
            spike_scale: 5.0,
            batch_alternation: None,
        };
        for step in 0..10 {
            let noisy = noisy_gradient(&p, &theta, &spec, step, 1).unwrap();
            assert_eq!(noisy[0].components(), &[15.0, 20.0]);
        }
    }

    #[test]
    fn noise_std_is_statistically_right() {
        let p = quadratic();
        let theta = vec![vec![3.0, 4.0]];
        let spec = NoiseSpec {
            gradient_noise_std: 0.1,
            spike_probability: 0.0,
            spike_scale: 5.0,
            batch_alternation: None,
        };
        let n = 10_000;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for step in 0..n {
            let noisy = noisy_gradient(&p, &theta, &spec, step, 7).unwrap();
            let d = noisy[0].components()[0] - 3.0;
            sum += d;
            sum_sq += d * d;
        }
        let mean = sum / n as f64;
        let std = (sum_sq / n as f64 - mean * mean).sqrt();
        assert!((std - 0.1).abs() / 0.1 < 0.05, "sample std {std}");
    }

    #[test]
    fn deterministic_in_seed_and_step() {
        let p = quadratic();
        let theta = vec![vec![3.0, 4.0]];
        let spec = NoiseSpec {
            gradient_noise_std: 0.5,
            ..NoiseSpec::default()
        };
        let a = noisy_gradient(&p, &theta, &spec, 3, 1).unwrap();
        let b = noisy_gradient(&p, &theta, &spec, 3, 1).unwrap();
        assert_eq!(a, b);
        let c = noisy_gradient(&p, &theta, &spec, 4, 1).unwrap();
        assert_ne!(a, c);
        let d = noisy_gradient(&p, &theta, &spec, 3, 2).unwrap();
        assert_ne!(a, d);
    }

    #[test]
    fn spike_frequency_tracks_probability() {
        let p = quadratic();
        let theta = vec![vec![3.0, 4.0]];
        let spec = NoiseSpec {
            gradient_noise_std: 0.0,
            spike_probability: 0.02,
            spike_scale: 5.0,
            batch_alternation: None,
        };
        let exact_norm = l2_norm(&p.exact_gradient(&theta).unwrap()[0]);
        let n = 20_000;
        let spikes = (0..n)
            .filter(|&step| {
                let g = noisy_gradient(&p, &theta, &spec, step, 42).unwrap();
                l2_norm(&g[0]) > 2.0 * exact_norm
            })
            .count();
        let rate = spikes as f64 / n as f64;
        assert!((rate - 0.02).abs() < 0.005, "spike rate {rate}");
    }

    #[test]
    fn alternation_switches_phase() {
        let spec = NoiseSpec {
            gradient_noise_std: 9.0,
            spike_probability: 0.0,
            spike_scale: 5.0,
            batch_alternation: Some(BatchAlternation {
                period: 100,
                low_noise_std: 0.1,
                high_noise_std: 1.0,
            }),
        };
        assert_eq!(spec.noise_std_at(0), 0.1);
        assert_eq!(spec.noise_std_at(99), 0.1);
        assert_eq!(spec.noise_std_at(100), 1.0);
        assert_eq!(spec.noise_std_at(199), 1.0);
        assert_eq!(spec.noise_std_at(200), 0.1);
    }

    #[test]
    fn validation_catches_bad_specs() {
        let spec = NoiseSpec {
            spike_probability: 1.5,
            ..NoiseSpec::default()
        };
        assert!(spec.validate().is_err());
        let spec = NoiseSpec {
            gradient_noise_std: -1.0,
            ..NoiseSpec::default()
        };
        assert!(spec.validate().is_err());
        let spec = NoiseSpec {
            batch_alternation: Some(BatchAlternation {
                period: 0,
                low_noise_std: 0.0,
                high_noise_std: 0.0,
            }),
            ..NoiseSpec::default()
        };
        assert!(spec.validate().is_err());
    }
}
