#![allow(dead_code)]

use antidistill::distill::TrainConfig;
use antidistill::model::ModelConfig;
use antidistill::pipeline::ExperimentConfig;
use antidistill::tasks::{TaskConfig, Vocab};

pub fn tiny_model(seed: u64) -> ModelConfig {
    ModelConfig {
        vocab_size: Vocab::SIZE,
        d_model: 16,
        n_layers: 1,
        n_heads: 2,
        d_ff: 24,
        max_seq_len: 64,
        init_seed: seed,
    }
}

/// A config small enough that every stage finishes in well under a second.
pub fn tiny_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.task = TaskConfig {
        seed: 3,
        operand_counts: (2, 3),
        operand_digits: (1, 1),
        teacher_corpus_size: 48,
        pool_size: 40,
        test_size: 12,
        train_fraction: 0.7,
    };
    cfg.teacher = tiny_model(1);
    cfg.proxy = tiny_model(2);
    cfg.student = tiny_model(3);
    let quick = TrainConfig {
        learning_rate: 3e-3,
        epochs: 1,
        batch_size: 8,
        eval_interval_steps: 2,
        ..TrainConfig::default()
    };
    cfg.teacher_training.train = quick.clone();
    cfg.teacher_training.gate = 0.0;
    cfg.teacher_training.min_rounds = 1;
    cfg.teacher_training.max_rounds = 1;
    cfg.base_training = quick.clone();
    cfg.base_examples = 24;
    cfg.distill = quick;
    cfg.sampler.max_tokens = 12;
    cfg.icl_k = 1;
    cfg.sweep.lambdas = vec![0.0, 0.3];
    cfg.sweep.taus = vec![0.6];
    cfg.sweep.permutation_lambdas = vec![0.3];
    cfg.sweep.seeds = vec![0, 1];
    cfg
}
