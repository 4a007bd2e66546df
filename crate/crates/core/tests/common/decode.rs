//! Exhaustive scoring of every catalog title, the reference for
//! constrained beam search.

use gdrt::corpus::{generate_corpus, Corpus, CorpusConfig};
use gdrt::decode::{beam_search, build_trie, BeamConfig};
use gdrt::model::{score_tokens, ModelConfig, ModelParams};

pub fn corpus(items: usize) -> Corpus {
    generate_corpus(&CorpusConfig {
        num_users: 40,
        num_items: items,
        ..CorpusConfig::default()
    })
    .unwrap()
}

pub fn exhaustive(params: &ModelParams, corpus: &Corpus, prompt: &[u32]) -> Vec<(usize, f64)> {
    let mut ranked: Vec<(usize, f64)> = corpus
        .catalog
        .items
        .iter()
        .map(|it| {
            let target = corpus.catalog.target_tokens(it.item_id);
            let mut seq = prompt.to_vec();
            seq.extend_from_slice(&target);
            let preds: Vec<_> = target
                .iter()
                .enumerate()
                .map(|(t, &tok)| (prompt.len() + t - 1, tok))
                .collect();
            (it.item_id, score_tokens(params, &seq, &preds).unwrap().iter().sum())
        })
        .collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked
}

pub fn model(seed: u64) -> ModelParams {
    ModelParams::init(&ModelConfig {
        embed_dim: 16,
        ..ModelConfig::new(64, 64, seed)
    })
    .unwrap()
}

/// Number of (model, prompt) pairs where a full-width beam disagrees with
/// exhaustive scoring, over `models` random models and `prompts` prompts
/// on a `items`-item catalog.
pub fn beam_mismatches(items: usize, models: &[u64], prompts: usize) -> usize {
    let c = corpus(items);
    let trie = build_trie(&c.catalog).unwrap();
    let cfg = BeamConfig {
        beam_size: items,
        top_k: items,
        length_normalize: false,
    };
    let prompts: Vec<_> = c.all_instances().take(prompts).map(|i| i.prompt()).collect();
    let mut bad = 0;
    for &seed in models {
        let p = model(seed);
        for prompt in &prompts {
            let beam = beam_search(&p, prompt, &trie, &cfg).unwrap();
            let exact = exhaustive(&p, &c, prompt);
            let same_order = beam.iter().map(|r| r.0).eq(exact.iter().map(|r| r.0));
            let same_scores = beam.iter().zip(&exact).all(|(b, e)| (b.1 - e.1).abs() < 1e-9);
            if !(same_order && same_scores) {
                bad += 1;
            }
        }
    }
    bad
}
