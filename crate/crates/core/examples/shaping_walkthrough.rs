//! Walk through the shaping toolkit on a tiny problem: the pure operators,
//! one adaptive per-layer step, and a three-mode training comparison.
//!
//! Run with: cargo run -p spamp-core --example shaping_walkthrough

use spamp_core::shaping::{hard_clip, l2_norm, power_shape, ClipThreshold, GradientVector, LayerId};
use spamp_core::state::{LayerShaperState, SpampParams};
use spamp_core::trainer::{
    train, GradnormParams, LrSchedule, NoiseSpec, PipelineConfig, PipelineMode, ProblemSpec,
    SummarySpec, UpdateClipParams,
};

fn main() {
    // Pure operators.
    let g = GradientVector::new(LayerId(0), vec![3.0, 4.0]).unwrap();
    let tau = ClipThreshold::new(1.0).unwrap();
    let clipped = hard_clip(&g, tau);
    let softened = power_shape(&g, 0.7).unwrap();
    println!("raw norm            {:.4}", l2_norm(&g));
    println!("hard clipped at 1   {:.4}", l2_norm(&clipped));
    println!("power shaped (0.7)  {:.4}", l2_norm(&softened));

    // One adaptive step: the threshold absorbs the observed norm, the
    // exponent reacts to the norm-to-threshold ratio, and the projection
    // caps the result.
    let params = SpampParams { tau_init: Some(1.0), ..SpampParams::default() };
    let state = LayerShaperState::new(LayerId(0), &params).unwrap();
    let (shaped, _, d) = state.step(&g, 0.1).unwrap();
    println!(
        "adaptive step: tau {:.4}, alpha {:.2}, projected {}, shaped norm {:.4}",
        d.tau_after,
        d.alpha_used,
        d.projected,
        l2_norm(&shaped)
    );

    // Desk-scale comparison on a noisy quadratic with occasional 5x spikes.
    let problem = ProblemSpec::Quadratic {
        a: None,
        a_diag: Some(vec![0.05, 3.0]),
        b: vec![0.0, 0.0],
        theta0: vec![2.0, 0.5],
    }
    .build()
    .unwrap();
    let noise = NoiseSpec {
        gradient_noise_std: 0.002,
        spike_probability: 0.02,
        spike_scale: 5.0,
        batch_alternation: None,
    };
    let steps = 600;
    let spec = SummarySpec::default_for(steps);

    println!("\n{:<12} {:>12} {:>12} {:>10}", "mode", "final loss", "max update", "clip freq");
    for mode in [PipelineMode::Baseline, PipelineMode::FixedClip, PipelineMode::Spamp] {
        let cfg = PipelineConfig {
            mode,
            tau_fixed: 1.0,
            warmup_steps: None,
            spamp: params,
            update_clip: UpdateClipParams::default(),
            gradnorm: GradnormParams::default(),
            lr: LrSchedule { initial: 0.25, decay_horizon: Some(steps) },
        };
        let summary = train(&problem, &cfg, &noise, steps, 7).unwrap().summarize(&spec);
        println!(
            "{:<12} {:>12.3e} {:>12.4} {:>10.3}",
            mode.name(),
            summary.final_loss,
            summary.max_update_magnitude,
            summary.clip_frequency
        );
    }
}
