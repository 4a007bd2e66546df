//! How much each input span contributes to the target log-probability,
//! before and after SFT on the shortcut corpus.
//!
//! cargo run --release --example span_attribution

use gdrt::attribution::attribution_ratios;
use gdrt::corpus::{generate_corpus, CorpusConfig};
use gdrt::pipeline::{train_base, ExperimentSpec};
use gdrt::trainer::{train, Method, TrainConfig};

fn main() -> gdrt::Result<()> {
    let mut spec = ExperimentSpec::new("attribution", 5, std::env::temp_dir());
    spec.corpus = CorpusConfig {
        num_users: 600,
        ..CorpusConfig::default()
    };
    let corpus = generate_corpus(&spec.corpus_config()?)?;
    let (base, _) = train_base(&spec, &corpus)?;
    let show = |name: &str, s: &gdrt::attribution::AttributionSummary| {
        println!(
            "{name:<10} |task| {:.4}  |history| {:.4}  |prefix| {:.4}  task:history {:.3}  prefix:history {:.3}",
            s.mean_abs_task, s.mean_abs_history, s.mean_abs_prefix, s.task_history_ratio, s.prefix_history_ratio
        );
    };
    show("base", &attribution_ratios(&base, &corpus.test)?);
    let config = TrainConfig {
        epochs: 3,
        lr: 1e-3,
        ..TrainConfig::new(Method::Sft, 5)
    };
    let out = train(&base, &corpus.train, None, None, &config)?;
    for ck in &out.checkpoints {
        show(
            &format!("sft ep {}", ck.epoch),
            &attribution_ratios(&ck.params()?, &corpus.test)?,
        );
    }
    Ok(())
}
