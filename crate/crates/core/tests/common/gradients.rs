//! Central finite differences against the hand-written backward pass.

use gdrt::model::{backward, LossGraph, LossTerm, ModelConfig, ModelParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn graph(seed: u64, vocab: usize, len: usize) -> LossGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let terms = (0..2)
        .map(|_| {
            let tokens: Vec<u32> = (0..len).map(|_| rng.random_range(0..vocab as u32)).collect();
            let targets = (len / 2..len - 1)
                .map(|p| (p, tokens[p + 1], rng.random_range(0.2..1.5)))
                .collect();
            LossTerm { tokens, targets }
        })
        .collect();
    LossGraph { terms, constant: 0.25 }
}

fn loss(params: &ModelParams, g: &LossGraph) -> f64 {
    backward(params, g).unwrap().0
}

/// Central differences at `samples` random coordinates; returns the worst
/// relative error.
pub fn worst_relative_error(config: &ModelConfig, samples: usize) -> f64 {
    let params = ModelParams::init(config).unwrap();
    let g = graph(config.seed + 100, config.vocab_size, 10);
    let (_, grad) = backward(&params, &g).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed + 7);
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    let mut picked = 0;
    while picked < samples {
        let i = rng.random_range(0..params.len());
        // Coordinates the loss cannot see (unused embedding rows) are
        // exactly zero on both sides and carry no information.
        if grad[i] == 0.0 {
            continue;
        }
        picked += 1;
        let mut plus = params.clone();
        plus.data[i] += h;
        let mut minus = params.clone();
        minus.data[i] -= h;
        let numeric = (loss(&plus, &g) - loss(&minus, &g)) / (2.0 * h);
        let denom = grad[i].abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((grad[i] - numeric).abs() / denom);
    }
    worst
}
