//! The training loop.

use super::metrics::{RunMetrics, StepRecord};
use super::noise::{noisy_gradient, NoiseSpec};
use super::pipeline::{Pipeline, PipelineConfig, PipelineMode};
use super::problem::ToyProblem;
use super::TrainError;

/// A run is flagged as diverged once the loss exceeds this multiple of the
/// initial loss (or stops being finite).
pub const DIVERGENCE_FACTOR: f64 = 1e6;

/// Run `steps` of noisy gradient descent with the configured shaping stage.
///
/// Per step: compute the noisy per-layer gradients at the current
/// parameters, shape them, and apply `theta -= eta_eff * g~` per layer. The
/// loss recorded for a step is the loss at the parameters the gradient was
/// taken from. If the loss exceeds [`DIVERGENCE_FACTOR`] times its initial
/// value or becomes non-finite the run stops early with the `diverged` flag
/// set; that is a recorded outcome, not an error.
///
/// Identical `(problem, pipeline, noise, steps, seed)` always produce
/// identical metrics.
pub fn train(
    problem: &ToyProblem,
    pipeline_cfg: &PipelineConfig,
    noise: &NoiseSpec,
    steps: u64,
    seed: u64,
) -> Result<RunMetrics, TrainError> {
    if steps == 0 {
        return Err(TrainError::InvalidConfig("steps must be at least 1".into()));
    }
    noise.validate()?;
    let schedule = pipeline_cfg.lr.resolve(steps)?;
    let warmup = pipeline_cfg.effective_warmup(steps);
    let mut pipeline = Pipeline::new(pipeline_cfg, problem.n_layers())?;

    let mut theta = problem.initial_theta(seed);
    let initial_loss = problem.loss(&theta);
    if !initial_loss.is_finite() {
        return Err(TrainError::InvalidConfig(format!(
            "initial loss is not finite ({initial_loss})"
        )));
    }
    // Relative guard, floored so a start exactly at the minimum does not
    // treat every later positive loss as divergence.
    let guard = DIVERGENCE_FACTOR * initial_loss.max(f64::EPSILON);

    let n_layers = problem.n_layers();
    let mut records = Vec::with_capacity((steps as usize) * n_layers);
    let mut diverged = false;
    let mut final_loss = initial_loss;
    let mut steps_completed = 0;

    for t in 0..steps {
        let loss = problem.loss(&theta);
        final_loss = loss;
        if !loss.is_finite() || loss > guard {
            diverged = true;
            break;
        }

        let mut eta = schedule.eta(t);
        if pipeline_cfg.mode == PipelineMode::WarmupFixedClip {
            let ramp = ((t + 1) as f64 / warmup as f64).min(1.0);
            eta *= ramp;
        }

        let grads = noisy_gradient(problem, &theta, noise, t, seed)?;
        let shaping = pipeline.apply(grads, eta)?;

        for (l, layer) in shaping.layers.iter().enumerate() {
            for (param, g) in theta[l].iter_mut().zip(layer.shaped.components()) {
                *param -= shaping.eta_eff * g;
            }
            records.push(StepRecord {
                step: t,
                layer: l,
                loss,
                raw_norm: layer.raw_norm,
                shaped_norm: layer.shaped_norm,
                norm_bound: layer.norm_bound,
                alpha: layer.alpha,
                update_magnitude: shaping.eta_eff * layer.shaped_norm,
                clipped: layer.clipped,
                eta: shaping.eta_eff,
            });
        }
        steps_completed = t + 1;
    }

    if !diverged {
        final_loss = problem.loss(&theta);
    }

    Ok(RunMetrics {
        records,
        initial_loss,
        final_loss,
        steps_completed,
        requested_steps: steps,
        n_layers,
        diverged,
        shaper_states: pipeline.shaper_snapshots(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::state::SpampParams;
    use crate::trainer::pipeline::{GradnormParams, UpdateClipParams};
    use crate::trainer::problem::ProblemSpec;
    use crate::trainer::schedule::LrSchedule;

    fn quadratic(diag: &[f64], theta0: &[f64]) -> ToyProblem {
        ProblemSpec::Quadratic {
            a: None,
            a_diag: Some(diag.to_vec()),
            b: vec![0.0; diag.len()],
            theta0: theta0.to_vec(),
        }
        .build()
        .unwrap()
    }

    fn cfg(mode: PipelineMode, eta: f64) -> PipelineConfig {
        PipelineConfig {
            mode,
            tau_fixed: 1.0,
            warmup_steps: None,
            spamp: SpampParams::default(),
            update_clip: UpdateClipParams::default(),
            gradnorm: GradnormParams::default(),
            lr: LrSchedule {
                initial: eta,
                decay_horizon: Some(0),
            },
        }
    }

    #[test]
    fn baseline_matches_closed_form_decay() {
        // Isotropic quadratic: theta shrinks by (1 - eta) per step, the loss
        // by (1 - eta)^2.
        let p = quadratic(&[1.0, 1.0], &[10.0, 10.0]);
        let m = train(
            &p,
            &cfg(PipelineMode::Baseline, 0.1),
            &NoiseSpec::none(),
            200,
            0,
        )
        .unwrap();
        assert!(!m.diverged);
        let mut expected = 100.0;
        for step in m.records.iter() {
            assert!((step.loss - expected).abs() <= 1e-9 * expected.max(1e-12));
            expected *= 0.9 * 0.9;
        }
        assert!(m.final_loss < 1e-6);
    }

    #[test]
    fn fixed_clip_updates_have_norm_eta_tau_while_clipping() {
        let p = quadratic(&[1.0, 1.0], &[10.0, 10.0]);
        // ||theta0|| = sqrt(200) ~ 14.1; clipped updates shrink it by
        // eta * tau = 0.1 per step, so clipping stops after ~132 steps.
        let m = train(
            &p,
            &cfg(PipelineMode::FixedClip, 0.1),
            &NoiseSpec::none(),
            200,
            0,
        )
        .unwrap();
        for r in &m.records {
            if r.clipped {
                assert!((r.update_magnitude - 0.1).abs() < 1e-12);
            }
        }
        // The run starts clipped (||g|| ~ 14) and eventually passes below
        // the threshold.
        assert!(m.records.first().unwrap().clipped);
        assert!(!m.records.last().unwrap().clipped);
    }

    #[test]
    fn noiseless_descent_is_monotone_below_stability_limit() {
        let p = quadratic(&[1.0, 4.0], &[3.0, -2.0]);
        // eta < 2 / L = 0.5.
        let m = train(
            &p,
            &cfg(PipelineMode::Baseline, 0.4),
            &NoiseSpec::none(),
            100,
            0,
        )
        .unwrap();
        let losses: Vec<f64> = m.records.chunks(1).map(|c| c[0].loss).collect();
        assert!(losses.windows(2).all(|w| w[1] <= w[0] + 1e-12));
    }

    #[test]
    fn divergence_guard_trips_and_flags() {
        let p = quadratic(&[1.0, 100.0], &[1.0, 1.0]);
        let m = train(
            &p,
            &cfg(PipelineMode::Baseline, 10.0),
            &NoiseSpec::none(),
            50,
            0,
        )
        .unwrap();
        assert!(m.diverged);
        assert!(m.steps_completed < 50);
        assert!(m.final_loss > 1e6 * m.initial_loss || !m.final_loss.is_finite());
    }

    #[test]
    fn spamp_updates_respect_tracked_threshold() {
        let p = quadratic(&[1.0, 2.0], &[5.0, 5.0]);
        let noise = NoiseSpec {
            gradient_noise_std: 0.3,
            ..NoiseSpec::default()
        };
        let m = train(&p, &cfg(PipelineMode::Spamp, 0.05), &noise, 500, 3).unwrap();
        assert!(!m.diverged);
        for r in &m.records {
            let bound = r.norm_bound.unwrap();
            assert!(
                r.update_magnitude <= r.eta * bound * (1.0 + 1e-12),
                "step {}: update {} vs eta*tau {}",
                r.step,
                r.update_magnitude,
                r.eta * bound
            );
        }
        // Second-moment form of the same bound: the mean squared update
        // magnitude never exceeds the squared worst-case budget.
        let mean_sq = m
            .records
            .iter()
            .map(|r| r.update_magnitude * r.update_magnitude)
            .sum::<f64>()
            / m.records.len() as f64;
        let max_budget_sq = m
            .records
            .iter()
            .map(|r| (r.eta * r.norm_bound.unwrap()).powi(2))
            .fold(0.0, f64::max);
        assert!(mean_sq <= max_budget_sq * (1.0 + 1e-12));
    }

    #[test]
    fn batch_alternation_shows_up_in_interval_stats() {
        let p = quadratic(&[1.0, 1.0], &[1.0, 1.0]);
        let noise = NoiseSpec {
            gradient_noise_std: 0.0,
            spike_probability: 0.0,
            spike_scale: 5.0,
            batch_alternation: Some(crate::trainer::BatchAlternation {
                period: 100,
                low_noise_std: 0.05,
                high_noise_std: 0.5,
            }),
        };
        let m = train(&p, &cfg(PipelineMode::Baseline, 0.1), &noise, 400, 5).unwrap();
        let spec = crate::trainer::SummarySpec {
            intervals: vec![(0, 100), (100, 200), (200, 300), (300, 400)],
            checkpoints: vec![],
            loss_threshold: None,
        };
        let s = m.summarize(&spec);
        // Phases 1 and 3 run at 10x the noise scale of phases 0 and 2; by
        // interval 2 the iterate sits at the noise floor, so the update
        // variability tracks the phase.
        let stds: Vec<f64> = s.update_intervals.iter().map(|i| i.update_std).collect();
        assert!(stds[3] > 2.0 * stds[2], "{stds:?}");
        assert!(stds[1] > 2.0 * stds[2], "{stds:?}");
    }

    #[test]
    fn update_clip_updates_respect_budget() {
        let p = quadratic(&[1.0, 2.0], &[5.0, 5.0]);
        let noise = NoiseSpec {
            gradient_noise_std: 0.3,
            ..NoiseSpec::default()
        };
        let m = train(&p, &cfg(PipelineMode::UpdateClip, 0.05), &noise, 500, 3).unwrap();
        for r in &m.records {
            let delta = r.eta * r.norm_bound.unwrap();
            assert!(r.update_magnitude <= delta * (1.0 + 1e-12));
        }
    }

    #[test]
    fn identical_runs_are_identical() {
        let p = quadratic(&[1.0, 3.0], &[4.0, -4.0]);
        let noise = NoiseSpec {
            gradient_noise_std: 0.2,
            ..NoiseSpec::default()
        };
        let a = train(&p, &cfg(PipelineMode::Spamp, 0.05), &noise, 300, 9).unwrap();
        let b = train(&p, &cfg(PipelineMode::Spamp, 0.05), &noise, 300, 9).unwrap();
        assert_eq!(a, b);
        let c = train(&p, &cfg(PipelineMode::Spamp, 0.05), &noise, 300, 10).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn warmup_ramps_learning_rate() {
        let p = quadratic(&[1.0, 1.0], &[10.0, 10.0]);
        let mut config = cfg(PipelineMode::WarmupFixedClip, 0.1);
        config.warmup_steps = Some(10);
        let m = train(&p, &config, &NoiseSpec::none(), 50, 0).unwrap();
        // During warmup the clipped update magnitude is eta * ramp * tau.
        let r0 = &m.records[0];
        assert!(r0.clipped);
        assert!((r0.update_magnitude - 0.1 * 0.1).abs() < 1e-12);
        let r9 = &m.records[9];
        assert!((r9.update_magnitude - 0.1).abs() < 1e-12);
    }

    #[test]
    fn csv_row_count_contract() {
        let p = ProblemSpec::Mlp {
            layer_sizes: vec![3, 5, 2],
            n_samples: 8,
            data_seed: 0,
            init_scales: None,
        }
        .build()
        .unwrap();
        let m = train(
            &p,
            &cfg(PipelineMode::Spamp, 0.05),
            &NoiseSpec::none(),
            20,
            1,
        )
        .unwrap();
        let csv = m.to_csv();
        assert_eq!(csv.trim_end().lines().count(), 1 + 20 * 2);
    }
}
