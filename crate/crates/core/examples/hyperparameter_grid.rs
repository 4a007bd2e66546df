//! A reduced end-to-end experiment: corpus, base and reference models,
//! relevance groups, SFT and a small G x tau grid, with every artifact
//! written to disk.
//!
//! cargo run --release --example hyperparameter_grid [-- <out_dir>]

use gdrt::corpus::CorpusConfig;
use gdrt::pipeline::{run_pipeline, ExperimentSpec, StageSpec};

fn main() -> gdrt::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(Into::into)
        .unwrap_or_else(|| std::env::temp_dir().join("gdrt-grid"));
    let mut spec = ExperimentSpec::new("small-grid", 42, out);
    spec.corpus = CorpusConfig {
        num_users: 500,
        ..CorpusConfig::default()
    };
    spec.pretrain.epochs = 3;
    spec.finetune = StageSpec {
        epochs: 3,
        ..spec.finetune
    };
    spec.group_grid = vec![2, 5];
    spec.tau_grid = vec![0.1, 0.5, 1.0];
    spec.save_checkpoints = false;
    let summary = run_pipeline(&spec, false)?;
    for c in &summary.cells {
        println!(
            "{:<18} best epoch {}  valid NDCG@5 {:.4}  test NDCG@10 {:.4}  MGU@5 {:.4}",
            c.cell.label,
            c.best_epoch,
            c.valid_ndcg5[c.best_epoch - 1],
            c.best.ndcg[&10],
            c.best.mgu[&5]
        );
    }
    if let Some(grid) = &summary.grid {
        println!(
            "grid shape {:?}, interior winners {:?}",
            grid.shape, grid.interior_winners
        );
    }
    println!("artifacts in {}", spec.experiment_dir().display());
    Ok(())
}
