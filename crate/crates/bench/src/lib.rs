//! Shared fixtures for the criterion benchmarks.

use oar_core::policy::{ModelParams, PolicyConfig};
use oar_core::tasks::{self, vocab, TaskInstance};

pub fn bench_policy_config() -> PolicyConfig {
    PolicyConfig {
        vocab_size: vocab::USED,
        d_model: 48,
        n_layers: 4,
        n_heads: 4,
        max_seq_len: 96,
        pad_id: vocab::PAD,
        bos_id: vocab::BOS,
        eos_id: vocab::EOS,
    }
}

pub fn bench_model(seed: u64) -> ModelParams {
    ModelParams::init(&bench_policy_config(), seed).expect("bench config is valid")
}

/// A fixed task whose gold trace serves as the benchmark response.
pub fn bench_task() -> TaskInstance {
    tasks::generate_task(7, 2).expect("difficulty 2 is valid")
}
