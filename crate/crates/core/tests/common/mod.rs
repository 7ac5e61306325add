#![allow(dead_code)]

use morpheus::corpus::{generate_synthetic, SyntheticCorpus, SyntheticSpec};
use morpheus::trainer::TrainingConfig;

/// A small synthetic corpus that trains in well under a second per epoch.
pub fn small_corpus() -> SyntheticCorpus {
    generate_synthetic(&SyntheticSpec {
        roles_count: 9,
        dialogues_per_role: 4,
        turns_per_dialogue: 3,
        ..SyntheticSpec::default()
    })
    .unwrap()
}

pub fn small_config() -> TrainingConfig {
    TrainingConfig {
        codebook_size: 8,
        d_model: 16,
        layers: 1,
        heads: 2,
        max_sequence_length: 48,
        learning_rate: 3e-3,
        warmup_steps: 2,
        batch_size: 4,
        stage1_epochs: 1,
        stage3_epochs: 1,
        em_max_iters: 20,
        ..TrainingConfig::default()
    }
}
