//! Fine-tune the same model with plain SFT and with group-reweighted
//! training, then compare accuracy and exposure bias on the test split.
//!
//! cargo run --release --example sft_vs_gdrt

use gdrt::corpus::{generate_corpus, CorpusConfig};
use gdrt::decode::{build_trie, recommend, BeamConfig};
use gdrt::eval::evaluate;
use gdrt::pipeline::{train_base, train_reference, ExperimentSpec};
use gdrt::relevance::{item_relevance, partition_items, partition_tokens, token_relevance, GroupingMethod};
use gdrt::trainer::{select_checkpoint, train, Method, TrainConfig, Validation};

fn main() -> gdrt::Result<()> {
    let mut spec = ExperimentSpec::new("compare", 3, std::env::temp_dir());
    spec.corpus = CorpusConfig {
        num_users: 800,
        ..CorpusConfig::default()
    };
    let corpus = generate_corpus(&spec.corpus_config()?)?;
    let (base, _) = train_base(&spec, &corpus)?;
    let (reference, _) = train_reference(&spec, &corpus, &base)?;
    let scores = token_relevance(&reference, &corpus.train)?;
    let groups = partition_tokens(&scores, 5, GroupingMethod::Kmeans, 0)?;
    let item_groups = partition_items(&item_relevance(&reference, &corpus.catalog)?, 5)?;
    let trie = build_trie(&corpus.catalog)?;
    let validation = Validation {
        instances: &corpus.valid,
        trie: &trie,
        beam: BeamConfig::default(),
    };

    for (method, tau) in [(Method::Sft, 0.0), (Method::Gdrt, 0.1), (Method::Gdrt, 1.0)] {
        let config = TrainConfig {
            epochs: 3,
            lr: 1e-4,
            groups: 5,
            tau: if tau > 0.0 { tau } else { 0.5 },
            ..TrainConfig::new(method, 1)
        };
        let out = train(&reference, &corpus.train, Some(&groups), Some(&validation), &config)?;
        let (best, valid) = select_checkpoint(&out.checkpoints, &validation)?;
        let recs = recommend(
            &out.checkpoints[best].params()?,
            &corpus.test,
            &trie,
            &BeamConfig::default(),
        )?;
        let r = evaluate(&recs, &corpus.test, &item_groups, 5, &[5, 10])?;
        let name = match method {
            Method::Sft => "sft".to_string(),
            _ => format!("gdrt tau={tau}"),
        };
        println!(
            "{name:<14} epoch {} valid NDCG@5 {valid:.4}  test NDCG@10 {:.4}  MGU@5 {:.4}  DGU@5 {:.4}  mean Q {:?}",
            best + 1,
            r.ndcg[&10],
            r.mgu[&5],
            r.dgu[&5],
            out.log
                .mean_weights()
                .iter()
                .map(|q| (q * 100.0).round() / 100.0)
                .collect::<Vec<_>>()
        );
    }
    Ok(())
}
