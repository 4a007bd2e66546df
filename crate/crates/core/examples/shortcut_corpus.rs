//! Generate the synthetic corpus and show the planted task-token shortcut.
//!
//! cargo run --release --example shortcut_corpus [-- <out_dir>]

use gdrt::corpus::{cooccurrence_report, expected_preference_hype_rate, generate_corpus, CorpusConfig};

fn main() -> gdrt::Result<()> {
    let config = CorpusConfig::default();
    let corpus = generate_corpus(&config)?;
    println!(
        "{} items ({} hype), {} / {} / {} train / valid / test instances",
        corpus.catalog.len(),
        corpus.catalog.hype_items().len(),
        corpus.train.len(),
        corpus.valid.len(),
        corpus.test.len()
    );
    let hype_share = |instances: &[gdrt::corpus::PromptInstance]| {
        instances
            .iter()
            .filter(|i| corpus.catalog.items[i.target_item].hype)
            .count() as f64
            / instances.len() as f64
    };
    let pref = expected_preference_hype_rate(&corpus.catalog);
    println!(
        "hype targets: train {:.3} (expected {:.3}), test {:.3} (expected {:.3})",
        hype_share(&corpus.train),
        config.shortcut_strength + (1.0 - config.shortcut_strength) * pref,
        hype_share(&corpus.test),
        pref
    );
    let r = cooccurrence_report(&corpus.train, &corpus.catalog)?;
    println!("co-occurrence with target tokens (mean rate):");
    println!("  task tokens     {:.3}", r.task.mean_rate);
    println!("  title prefix    {:.3}", r.prefix.mean_rate);
    println!("  hype prefix     {:.3}", r.hype_prefix.mean_rate);
    println!("  history tokens  {:.3}", r.history.mean_rate);

    let inst = &corpus.train[0];
    let words = |ts: &[u32]| {
        ts.iter()
            .map(|&t| corpus.catalog.layout.surface(t))
            .collect::<Vec<_>>()
            .join(" ")
    };
    println!(
        "first instance:\n  task    {}\n  history {}\n  target  {}",
        words(&inst.task_tokens),
        words(&inst.history_tokens),
        words(&inst.target_tokens)
    );

    if let Some(dir) = std::env::args().nth(1) {
        corpus.write_dir(std::path::Path::new(&dir))?;
        println!("written to {dir}");
    }
    Ok(())
}
