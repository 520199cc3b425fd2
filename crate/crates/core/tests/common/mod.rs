#![allow(dead_code)]

use scribblediff::augment::AdaptiveForm;
use scribblediff::denoiser::{DenoiserConfig, DenoiserTrainConfig};
use scribblediff::pipeline::{DataConfig, EvalConfig, ExperimentConfig, SchemeSpec, SweepConfig, SynthesisConfig};
use scribblediff::schedule::ScheduleConfig;
use scribblediff::segmentor::{SegTrainConfig, SegmentorConfig};
use scribblediff::shapesworld::WorldConfig;

/// A whole study on 8×8 scenes that runs in seconds.
pub fn tiny_config() -> ExperimentConfig {
    ExperimentConfig {
        seed: 3,
        world: WorldConfig {
            height: 8,
            width: 8,
            min_visible_fraction: 0.05,
            ..WorldConfig::default()
        },
        schedule: ScheduleConfig {
            timesteps: 20,
            ..ScheduleConfig::default()
        },
        denoiser: DenoiserConfig {
            height: 8,
            width: 8,
            base_width: 4,
            depth: 2,
            time_embed_dim: 8,
            timesteps: 20,
            ..DenoiserConfig::default()
        },
        denoiser_train: DenoiserTrainConfig {
            epochs: 2,
            batch_size: 4,
            ..DenoiserTrainConfig::default()
        },
        synthesis: SynthesisConfig {
            steps: 3,
            lambdas: vec![0.5, 1.0],
            ..SynthesisConfig::default()
        },
        schemes: vec![
            SchemeSpec::None,
            SchemeSpec::Fixed { lambda: 1.0 },
            SchemeSpec::Uniform {
                lambdas: Some(vec![0.5, 1.0]),
                once: false,
            },
            SchemeSpec::Adaptive {
                lambdas: Some(vec![0.5, 1.0]),
                form: AdaptiveForm::Blocks,
            },
        ],
        segmentor: SegmentorConfig {
            width: 6,
            dilations: vec![1, 2],
            ..SegmentorConfig::default()
        },
        segmentor_train: SegTrainConfig {
            epochs: 2,
            batch_size: 4,
            ..SegTrainConfig::default()
        },
        data: DataConfig {
            train_size: 12,
            val_size: 6,
            splits: vec![1.0, 0.5],
        },
        eval: EvalConfig {
            seeds: 2,
            fd_samples: 6,
            ..EvalConfig::default()
        },
        sweeps: SweepConfig {
            w_values: vec![0.0, 2.0],
            lambda_values: vec![0.25, 0.5, 1.0],
            samples: 4,
        },
        ..ExperimentConfig::default()
    }
}
