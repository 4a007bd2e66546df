//! Score target tokens with a reference model and split them into
//! relevance groups.
//!
//! cargo run --release --example relevance_groups

use gdrt::corpus::{generate_corpus, CorpusConfig};
use gdrt::pipeline::{train_base, train_reference, ExperimentSpec};
use gdrt::relevance::{
    group_loss_profile, item_relevance, partition_items, partition_tokens, token_relevance, GroupingMethod,
};
use gdrt::stats::mean;

fn main() -> gdrt::Result<()> {
    let mut spec = ExperimentSpec::new("relevance", 7, std::env::temp_dir());
    spec.corpus = CorpusConfig {
        num_users: 600,
        ..CorpusConfig::default()
    };
    let corpus = generate_corpus(&spec.corpus_config()?)?;
    let (base, _) = train_base(&spec, &corpus)?;
    let (reference, _) = train_reference(&spec, &corpus, &base)?;

    let scores = token_relevance(&reference, &corpus.train)?;
    println!("{} target tokens scored", scores.len());
    for method in [GroupingMethod::Kmeans, GroupingMethod::Quantile] {
        let groups = partition_tokens(&scores, 5, method, 0)?;
        let loss = group_loss_profile(&reference, &corpus.train, &groups)?;
        println!("{method:?}:");
        for g in 0..5 {
            println!(
                "  group {}  size {:>5}  centroid {:>7.3}  loss {:.3}",
                g + 1,
                groups.sizes()[g],
                groups.centroids[g],
                loss[g]
            );
        }
    }

    let items = item_relevance(&reference, &corpus.catalog)?;
    let (hype, plain): (Vec<_>, Vec<_>) = items.iter().partition(|r| corpus.catalog.items[r.item_id].hype);
    let avg = |xs: &[&gdrt::relevance::ItemRelevance]| mean(&xs.iter().map(|r| r.score).collect::<Vec<_>>());
    println!("item relevance: hype {:.3}, other {:.3}", avg(&hype), avg(&plain));
    let item_groups = partition_items(&items, 5)?;
    let hype_in_g1 = corpus
        .catalog
        .hype_items()
        .iter()
        .filter(|&&i| item_groups[i] == 0)
        .count();
    println!(
        "{hype_in_g1} of {} hype items fall in item group 1",
        corpus.catalog.hype_items().len()
    );
    Ok(())
}
