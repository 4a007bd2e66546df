//! Finite-difference checks of the hand-written backward pass.

mod common;

use common::gradients::worst_relative_error;
use gdrt::model::ModelConfig;

#[test]
fn one_block_matches_finite_differences() {
    let config = ModelConfig {
        embed_dim: 16,
        num_heads: 2,
        num_layers: 1,
        ..ModelConfig::new(24, 12, 3)
    };
    let err = worst_relative_error(&config, 30);
    eprintln!("worst relative error {err:e}");
    assert!(err < 1e-4, "worst relative error {err:e}");
}

#[test]
fn two_blocks_match_finite_differences() {
    let config = ModelConfig {
        embed_dim: 16,
        num_heads: 1,
        num_layers: 2,
        ..ModelConfig::new(24, 12, 5)
    };
    let err = worst_relative_error(&config, 30);
    eprintln!("worst relative error {err:e}");
    assert!(err < 1e-4, "worst relative error {err:e}");
}
