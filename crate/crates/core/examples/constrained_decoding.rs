//! Trie-constrained beam search only ever produces catalog titles.
//!
//! cargo run --release --example constrained_decoding

use gdrt::corpus::{generate_corpus, CorpusConfig};
use gdrt::decode::{beam_search, build_trie, BeamConfig};
use gdrt::model::{ModelConfig, ModelParams};

fn main() -> gdrt::Result<()> {
    let corpus = generate_corpus(&CorpusConfig {
        num_users: 20,
        ..CorpusConfig::default()
    })?;
    let trie = build_trie(&corpus.catalog)?;
    println!("trie over {} titles", trie.num_terminals());
    let params = ModelParams::init(&ModelConfig::new(
        corpus.config.vocab_size,
        corpus.max_sequence_len(),
        5,
    ))?;
    let prompt = corpus.test[0].prompt();
    for (beam, normalize) in [(1, false), (10, false), (10, true)] {
        let cfg = BeamConfig {
            beam_size: beam,
            top_k: beam.min(5),
            length_normalize: normalize,
        };
        let ranked = beam_search(&params, &prompt, &trie, &cfg)?;
        println!("beam {beam:>2} length-normalised {normalize:<5}:");
        for (item, score) in ranked {
            let title: Vec<String> = corpus
                .catalog
                .title(item)
                .iter()
                .map(|&t| corpus.catalog.layout.surface(t))
                .collect();
            println!("  item {item:>3} {score:>8.3}  {}", title.join(" "));
        }
    }
    Ok(())
}
