use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use gdrt::attribution::attribution_ratios;
use gdrt::corpus::{generate_corpus, Corpus, CorpusConfig, Split};
use gdrt::decode::{build_trie, read_recommendations, recommend, write_recommendations, BeamConfig};
use gdrt::dro::verify_lemma;
use gdrt::eval::{evaluate, group_shares_csv};
use gdrt::io;
use gdrt::model::{Checkpoint, ModelConfig, ModelParams};
use gdrt::pipeline::{run_pipeline, ExperimentSpec};
use gdrt::relevance::{
    item_relevance, partition_items, partition_tokens, read_scores, token_relevance, write_scores, GroupAssignment,
    GroupingMethod, KMEANS_SEED,
};
use gdrt::trainer::{train, Method, TrainConfig, Validation};
use gdrt::{GdrtError, Result};

#[derive(Parser)]
#[command(
    name = "gdrt",
    version,
    about = "Relevance-grouped DRO token reweighting for generative recommenders"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Overrides the seed of the config being run.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file or directory, depending on the command.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus directory.
    Gen {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Token and item relevance under a frozen checkpoint.
    Score {
        #[arg(long, alias = "checkpoint")]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value = "train")]
        split: Split,
        /// Number of item relevance groups.
        #[arg(long, default_value_t = 5)]
        item_groups: usize,
    },
    /// Partition token relevance scores into groups.
    Group {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long = "G", alias = "groups")]
        groups: usize,
        #[arg(long, default_value = "kmeans")]
        method: GroupingMethod,
    },
    /// Fine-tune a checkpoint and keep one checkpoint per epoch.
    Train {
        #[arg(long)]
        method: Method,
        /// TrainConfig JSON; missing fields take their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        groups: Option<PathBuf>,
        /// Starting checkpoint; a fresh model when absent.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Constrained beam-search recommendations.
    Recommend {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long, default_value_t = 10)]
        topk: usize,
        #[arg(long, default_value_t = 10)]
        beam: usize,
        #[arg(long)]
        length_normalize: bool,
    },
    /// Accuracy and group-exposure metrics.
    Eval {
        #[arg(long)]
        recs: PathBuf,
        /// Corpus directory holding the catalog and evaluated split.
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long)]
        groups_items: PathBuf,
        #[arg(long = "K", value_delimiter = ',', default_value = "5,10")]
        ks: Vec<usize>,
    },
    /// Span-ablation attribution ratios.
    Attribute {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
    },
    /// Check the closed-form group weights against a numeric oracle.
    VerifyLemma {
        #[arg(long, default_value_t = 200)]
        trials: usize,
        #[arg(long, default_value_t = 1e-6)]
        tol: f64,
    },
    /// Run a full experiment spec.
    Run {
        #[arg(long)]
        spec: PathBuf,
    },
}

fn out_or(common: &Common, default: &str) -> PathBuf {
    common.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn load_params(path: &Path) -> Result<ModelParams> {
    Checkpoint::load(path)?.params()
}

fn log(common: &Common, msg: &str) {
    if !common.quiet {
        eprintln!("{msg}");
    }
}

fn run(cli: Cli) -> Result<bool> {
    let c = &cli.common;
    match cli.command {
        Command::Gen { config } => {
            let mut cfg = match config {
                Some(p) => io::read_json::<CorpusConfig>(&p)?,
                None => CorpusConfig::default(),
            };
            if let Some(s) = c.seed {
                cfg.seed = s;
            }
            let corpus = generate_corpus(&cfg)?;
            let out = out_or(c, "corpus");
            corpus.write_dir(&out)?;
            log(
                c,
                &format!(
                    "{} items, {}/{}/{} instances in {}",
                    corpus.catalog.len(),
                    corpus.train.len(),
                    corpus.valid.len(),
                    corpus.test.len(),
                    out.display()
                ),
            );
        }
        Command::Score {
            ckpt,
            corpus,
            split,
            item_groups,
        } => {
            let params = load_params(&ckpt)?;
            let corpus = Corpus::read_dir(&corpus)?;
            let out = out_or(c, "relevance");
            let scores = token_relevance(&params, corpus.split(split))?;
            write_scores(&out.join("scores.jsonl"), &scores)?;
            let items = item_relevance(&params, &corpus.catalog)?;
            io::write_jsonl(&out.join("items.jsonl"), &items)?;
            io::write_json(&out.join("item_groups.json"), &partition_items(&items, item_groups)?)?;
            log(c, &format!("{} token scores in {}", scores.len(), out.display()));
        }
        Command::Group { scores, groups, method } => {
            let scores = read_scores(&scores)?;
            let a = partition_tokens(&scores, groups, method, c.seed.unwrap_or(KMEANS_SEED))?;
            let out = out_or(c, "groups.json");
            a.save(&out)?;
            log(c, &format!("group sizes {:?}", a.sizes()));
        }
        Command::Train {
            method,
            config,
            corpus,
            groups,
            init,
        } => {
            let mut raw = match config {
                Some(p) => io::read_json::<serde_json::Value>(&p)?,
                None => serde_json::json!({}),
            };
            let obj = raw
                .as_object_mut()
                .ok_or_else(|| GdrtError::InvalidConfig("train config must be a JSON object".into()))?;
            obj.insert("method".into(), serde_json::to_value(method).expect("enum"));
            if let Some(s) = c.seed {
                obj.insert("seed".into(), s.into());
            }
            obj.entry("seed").or_insert(0.into());
            let config: TrainConfig = serde_json::from_value(raw).map_err(|e| GdrtError::json("train config", e))?;
            let corpus = Corpus::read_dir(&corpus)?;
            let assignment = groups.map(|p| GroupAssignment::load(&p)).transpose()?;
            let initial = match init {
                Some(p) => load_params(&p)?,
                None => ModelParams::init(&ModelConfig::new(
                    corpus.config.vocab_size,
                    corpus.max_sequence_len(),
                    config.seed,
                ))?,
            };
            let trie = build_trie(&corpus.catalog)?;
            let validation = Validation {
                instances: &corpus.valid,
                trie: &trie,
                beam: BeamConfig::default(),
            };
            let out = out_or(c, "train");
            let outcome = train(&initial, &corpus.train, assignment.as_ref(), Some(&validation), &config)?;
            outcome.log.save(&out.join("trainlog.jsonl"))?;
            for ck in &outcome.checkpoints {
                ck.save(&out.join(format!("ckpt-epoch{}.json", ck.epoch)))?;
            }
            let valid: Vec<f64> = outcome
                .log
                .epochs
                .iter()
                .map(|e| e.valid_ndcg5.unwrap_or(0.0))
                .collect();
            let best = gdrt::trainer::argmax_earliest(&valid).expect("at least one epoch");
            outcome.checkpoints[best].save(&out.join("best.json"))?;
            log(
                c,
                &format!("validation NDCG@5 per epoch {valid:?}, best epoch {}", best + 1),
            );
        }
        Command::Recommend {
            ckpt,
            corpus,
            split,
            topk,
            beam,
            length_normalize,
        } => {
            let params = load_params(&ckpt)?;
            let corpus = Corpus::read_dir(&corpus)?;
            let trie = build_trie(&corpus.catalog)?;
            let cfg = BeamConfig {
                beam_size: beam,
                top_k: topk,
                length_normalize,
            };
            let recs = recommend(&params, corpus.split(split), &trie, &cfg)?;
            write_recommendations(&out_or(c, "recs.jsonl"), &recs)?;
            log(c, &format!("{} recommendation lists", recs.len()));
        }
        Command::Eval {
            recs,
            corpus,
            split,
            groups_items,
            ks,
        } => {
            let recs = read_recommendations(&recs)?;
            let corpus = Corpus::read_dir(&corpus)?;
            let item_groups: Vec<usize> = io::read_json(&groups_items)?;
            if item_groups.len() != corpus.catalog.len() {
                return Err(GdrtError::ShapeMismatch(format!(
                    "{} item groups for {} catalog items",
                    item_groups.len(),
                    corpus.catalog.len()
                )));
            }
            let groups = item_groups.iter().max().map_or(0, |g| g + 1);
            let report = evaluate(&recs, corpus.split(split), &item_groups, groups, &ks)?;
            let out = out_or(c, "report.json");
            io::write_json(&out, &report)?;
            io::write_text(&out.with_extension("csv"), &group_shares_csv(&report))?;
            if !c.quiet {
                println!("{}", serde_json::to_string_pretty(&report).expect("serializable"));
            }
        }
        Command::Attribute { ckpt, corpus, split } => {
            let params = load_params(&ckpt)?;
            let corpus = Corpus::read_dir(&corpus)?;
            let summary = attribution_ratios(&params, corpus.split(split))?;
            io::write_json(&out_or(c, "attrib.json"), &summary)?;
            if !c.quiet {
                println!("{}", serde_json::to_string_pretty(&summary).expect("serializable"));
            }
        }
        Command::VerifyLemma { trials, tol } => {
            let report = verify_lemma(trials, tol, c.seed.unwrap_or(42))?;
            if let Some(out) = &c.out {
                io::write_json(out, &report)?;
            }
            if !c.quiet {
                println!(
                    "{}",
                    serde_json::json!({
                        "trials": report.trials,
                        "tolerance": report.tolerance,
                        "max_residual": report.max_residual,
                        "violations": report.violations,
                    })
                );
            }
            return Ok(report.passed());
        }
        Command::Run { spec } => {
            let mut spec = ExperimentSpec::load(&spec)?;
            if let Some(s) = c.seed {
                spec.seed = s;
            }
            if let Some(o) = &c.out {
                spec.out_dir = o.clone();
            }
            let summary = run_pipeline(&spec, c.quiet)?;
            if !c.quiet {
                for cell in &summary.cells {
                    println!(
                        "{:<22} best epoch {} NDCG@10 {:.4} MGU@5 {:.4} DGU@5 {:.4}",
                        cell.cell.label,
                        cell.best_epoch,
                        cell.best.ndcg.get(&10).copied().unwrap_or(f64::NAN),
                        cell.best.mgu.get(&5).copied().unwrap_or(f64::NAN),
                        cell.best.dgu.get(&5).copied().unwrap_or(f64::NAN),
                    );
                }
            }
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            // wrapped errors already carry their source in the message
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
