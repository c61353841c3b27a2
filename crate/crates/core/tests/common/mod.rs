#![allow(dead_code)]

use dgae_core::config::{EvalConfig, ExperimentConfig, ScheduleConfig, StageConfig};
use dgae_core::denoiser::DenoiserConfig;
use dgae_core::encoder::EncoderConfig;
use dgae_core::gae::{Attribute, AttributeLayout, GaeConfig};

/// A configuration small enough to train for thousands of steps in seconds.
pub fn tiny_config(run_dir: &std::path::Path) -> ExperimentConfig {
    let attr = |name: &str, cardinality, width| Attribute { name: name.into(), cardinality, width };
    ExperimentConfig {
        seed: 7,
        resolution: 16,
        run_dir: run_dir.to_path_buf(),
        schedule: ScheduleConfig { steps: 50, beta_start: 1e-4, beta_end: 0.2 },
        encoder: EncoderConfig { resolution: 16, stage_channels: vec![4, 8], blocks_per_stage: 1, d_sem: 6, ..Default::default() },
        denoiser: DenoiserConfig {
            resolution: 16,
            channels: vec![4, 8],
            attention_sides: vec![8],
            d_sem: 6,
            time_dim: 8,
            cond_hidden: 8,
            ..Default::default()
        },
        gae: GaeConfig {
            d_sem: 6,
            hidden: 8,
            layout: AttributeLayout::new(vec![attr("identity", 6, 2), attr("background", 8, 2), attr("pose", 10, 2)])
                .unwrap(),
            bottleneck_factor: 4,
            decoder_groups: 2,
        },
        pretrain: StageConfig { steps: 40, batch: 4, log_every: 10, checkpoint_every: 20, ..StageConfig::pretrain() },
        refine: StageConfig { steps: 40, batch: 8, log_every: 10, checkpoint_every: 20, ..StageConfig::refine() },
        joint: StageConfig { steps: 20, batch: 8, log_every: 5, checkpoint_every: 10, ..StageConfig::joint() },
        eval: EvalConfig { sample_steps: 10, recon_images: 8, recombinations: 10, ppl_pairs: 4, ..EvalConfig::default() },
    }
}

pub fn scratch_dir(name: &str) -> std::path::PathBuf {
    let dir = std::env::temp_dir().join(format!("dgae-test-{}-{name}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}
