//! End-to-end experiment: corpus, base model, relevance groups, one
//! training cell per method and grid point, test-split evaluation,
//! attribution and the summary files, all driven by one seed.
//!
//! Layout of an experiment directory:
//!
//! ```text
//! corpus/                     config.json catalog.jsonl {train,valid,test}.jsonl
//! base/ reference/            ckpt.json trainlog.jsonl
//! relevance/                  scores.jsonl items.jsonl item_groups.json groups-G{g}.json
//! cells/<label>/              trainlog.jsonl ckpt-epoch{k}.json best.json recs.jsonl
//!                             report.json group_shares.csv attrib.json
//! summary.json summary.csv grid.csv grid_shape.json curve.csv attribution.csv
//! manifest.json
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attribution::{attribution_ratios, AttributionSummary};
use crate::corpus::{continuation_instances, generate_corpus, Corpus, CorpusConfig};
use crate::decode::{build_trie, recommend, write_recommendations, BeamConfig, ItemTrie, Recommendation};
use crate::error::{GdrtError, Result};
use crate::eval::{evaluate, group_distribution_curve, group_shares_csv, top1_share, MetricsReport};
use crate::io;
use crate::model::{Checkpoint, ModelConfig, ModelParams};
use crate::relevance::{
    item_relevance, partition_items, partition_tokens, token_relevance, write_scores, GroupAssignment, GroupingMethod,
};
use crate::stats::kendall_tau_b;
use crate::trainer::{argmax_earliest, train, Method, TrainConfig, TrainLog, Validation};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    #[serde(default = "default_ff_mult")]
    pub ff_mult: usize,
}

fn default_ff_mult() -> usize {
    4
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            embed_dim: 32,
            num_layers: 1,
            num_heads: 2,
            ff_mult: 4,
        }
    }
}

/// Schedule of one training stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSpec {
    pub epochs: usize,
    pub lr: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub mask_history_prob: f64,
}

fn default_batch() -> usize {
    32
}

fn default_pretrain() -> StageSpec {
    StageSpec {
        epochs: 5,
        lr: 3e-3,
        batch_size: 32,
        mask_history_prob: 0.0,
    }
}

fn default_reference() -> StageSpec {
    StageSpec {
        epochs: 1,
        lr: 1e-4,
        batch_size: 32,
        mask_history_prob: 1.0,
    }
}

fn default_finetune() -> StageSpec {
    StageSpec {
        epochs: 5,
        lr: 1e-4,
        batch_size: 32,
        mask_history_prob: 0.0,
    }
}

/// Which trained model fine-tuning starts from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitModel {
    Base,
    /// The model that scored relevance, so the groups and the initial
    /// group losses describe the same model.
    Reference,
}

fn default_init() -> InitModel {
    InitModel::Reference
}

fn default_methods() -> Vec<Method> {
    vec![Method::Sft, Method::Gdrt]
}
fn default_group_grid() -> Vec<usize> {
    vec![2, 5, 10]
}
fn default_tau_grid() -> Vec<f64> {
    vec![0.1, 0.2, 0.3, 0.5, 1.0]
}
fn default_grouping() -> GroupingMethod {
    GroupingMethod::Kmeans
}
fn default_beta() -> f64 {
    0.1
}
fn default_item_groups() -> usize {
    5
}
fn default_ks() -> Vec<usize> {
    vec![5, 10]
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub name: String,
    pub seed: u64,
    /// Inline corpus config; its seed is replaced by `seed`.
    #[serde(default)]
    pub corpus: CorpusConfig,
    /// Corpus config file, relative paths resolved against the spec file.
    /// Takes precedence over `corpus`.
    #[serde(default)]
    pub corpus_config: Option<PathBuf>,
    #[serde(default)]
    pub model: ModelSpec,
    /// Next-item training on histories only; yields the base model.
    #[serde(default = "default_pretrain")]
    pub pretrain: StageSpec,
    /// Short pass over the fine-tuning data on top of the base model, by
    /// default with every history masked so it learns what the task alone
    /// predicts; yields the frozen model that scores relevance.
    #[serde(default = "default_reference")]
    pub reference: StageSpec,
    #[serde(default = "default_finetune")]
    pub finetune: StageSpec,
    #[serde(default = "default_init")]
    pub finetune_from: InitModel,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    #[serde(default = "default_group_grid")]
    pub group_grid: Vec<usize>,
    #[serde(default = "default_tau_grid")]
    pub tau_grid: Vec<f64>,
    #[serde(default = "default_grouping")]
    pub grouping: GroupingMethod,
    #[serde(default = "default_beta")]
    pub ema_beta: f64,
    #[serde(default)]
    pub exact_group_losses: bool,
    #[serde(default = "default_item_groups")]
    pub item_groups: usize,
    #[serde(default = "default_ks")]
    pub ks: Vec<usize>,
    #[serde(default)]
    pub beam: BeamConfig,
    pub out_dir: PathBuf,
    /// Keep every epoch's checkpoint on disk, not just the best one.
    #[serde(default = "default_true")]
    pub save_checkpoints: bool,
}

impl ExperimentSpec {
    pub fn new(name: &str, seed: u64, out_dir: impl Into<PathBuf>) -> Self {
        ExperimentSpec {
            name: name.to_string(),
            seed,
            corpus: CorpusConfig::default(),
            corpus_config: None,
            model: ModelSpec::default(),
            pretrain: default_pretrain(),
            reference: default_reference(),
            finetune: default_finetune(),
            finetune_from: default_init(),
            methods: default_methods(),
            group_grid: default_group_grid(),
            tau_grid: default_tau_grid(),
            grouping: default_grouping(),
            ema_beta: default_beta(),
            exact_group_losses: false,
            item_groups: default_item_groups(),
            ks: default_ks(),
            beam: BeamConfig::default(),
            out_dir: out_dir.into(),
            save_checkpoints: true,
        }
    }

    /// Reads a spec file; relative paths inside it are resolved against
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let mut spec: ExperimentSpec = io::read_json(path)?;
        let dir = path.parent().unwrap_or(Path::new("."));
        if let Some(c) = &spec.corpus_config {
            if c.is_relative() {
                spec.corpus_config = Some(dir.join(c));
            }
        }
        if spec.out_dir.is_relative() {
            spec.out_dir = dir.join(&spec.out_dir);
        }
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(GdrtError::InvalidConfig(m));
        if self.name.is_empty()
            || !self
                .name
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
            || self.name.starts_with('.')
        {
            return bad(format!("experiment name `{}` is not filesystem-safe", self.name));
        }
        if let Some(p) = &self.corpus_config {
            if !p.exists() {
                return bad(format!("corpus config {} does not exist", p.display()));
            }
        }
        if self.methods.is_empty() {
            return bad("no methods to run".into());
        }
        if self.methods.iter().any(|m| *m != Method::Sft) && (self.group_grid.is_empty()) {
            return bad("grouped methods need a non-empty group grid".into());
        }
        if self.methods.contains(&Method::Gdrt) && self.tau_grid.iter().any(|t| !(*t > 0.0)) {
            return bad("tau grid values must be positive".into());
        }
        if self.beam.top_k > self.beam.beam_size {
            return bad(format!(
                "top_k {} exceeds beam_size {}",
                self.beam.top_k, self.beam.beam_size
            ));
        }
        if self.ks.iter().any(|&k| k == 0 || k > self.beam.top_k) {
            return bad(format!(
                "metric cutoffs {:?} must lie in 1..={}",
                self.ks, self.beam.top_k
            ));
        }
        if self.beam.top_k < 5 {
            return bad("checkpoint selection needs top_k >= 5".into());
        }
        Ok(())
    }

    pub fn corpus_config(&self) -> Result<CorpusConfig> {
        let mut config = match &self.corpus_config {
            Some(p) => io::read_json(p)?,
            None => self.corpus.clone(),
        };
        config.seed = self.seed;
        Ok(config)
    }

    pub fn experiment_dir(&self) -> PathBuf {
        self.out_dir.join(&self.name)
    }
}

/// Seed for a named stage, derived from the experiment seed.
pub fn sub_seed(seed: u64, stage: &str) -> u64 {
    let digest = Sha256::digest(format!("{seed}/{stage}").as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// One training run of the experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub label: String,
    pub method: Method,
    pub groups: Option<usize>,
    pub tau: Option<f64>,
}

pub fn cells_for(spec: &ExperimentSpec) -> Vec<Cell> {
    let mut cells = Vec::new();
    for &method in &spec.methods {
        match method {
            Method::Sft => cells.push(Cell {
                label: "sft".into(),
                method,
                groups: None,
                tau: None,
            }),
            Method::Gdrt => {
                for &g in &spec.group_grid {
                    for &tau in &spec.tau_grid {
                        cells.push(Cell {
                            label: format!("gdrt-G{g}-tau{tau}"),
                            method,
                            groups: Some(g),
                            tau: Some(tau),
                        });
                    }
                }
            }
            Method::Balanced => {
                for &g in &spec.group_grid {
                    cells.push(Cell {
                        label: format!("balanced-G{g}"),
                        method,
                        groups: Some(g),
                        tau: None,
                    });
                }
            }
        }
    }
    cells
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub cell: Cell,
    pub best_epoch: usize,
    pub valid_ndcg5: Vec<f64>,
    /// Test metrics of the selected checkpoint.
    pub best: MetricsReport,
    pub attribution_best: AttributionSummary,
    /// Top-1 share of item group 1 after the last epoch, on the test split.
    pub final_top1_group1_share: f64,
    pub attribution_final: AttributionSummary,
    /// Step-averaged group weights.
    pub mean_weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridShape {
    InteriorPeak,
    Monotone,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridReport {
    pub shape: GridShape,
    /// Cells (label) that beat both ends of their row or column.
    pub interior_winners: Vec<String>,
    pub cells: usize,
    pub expected_cells: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub name: String,
    pub seed: u64,
    /// The pretrained model before any pass over the fine-tuning data.
    pub base_attribution: AttributionSummary,
    /// The model fine-tuning starts from (epoch 0 of every cell).
    pub initial_attribution: AttributionSummary,
    pub initial_top1_group1_share: f64,
    pub test_group1_share: f64,
    pub cells: Vec<CellSummary>,
    pub grid: Option<GridReport>,
    /// Best cell (by validation NDCG@5) of each method.
    pub best_by_method: BTreeMap<String, String>,
    /// Kendall tau-b of the SFT per-epoch group-1 share curve against the
    /// epoch index, epochs 1..=E.
    pub sft_curve_kendall: Option<f64>,
}

impl ExperimentSummary {
    pub fn cell(&self, label: &str) -> Option<&CellSummary> {
        self.cells.iter().find(|c| c.cell.label == label)
    }

    pub fn best_of(&self, method: Method) -> Option<&CellSummary> {
        self.cell(self.best_by_method.get(method.name())?)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub seed: u64,
    pub spec_sha256: String,
    pub seeds: BTreeMap<String, u64>,
    pub files: Vec<ManifestEntry>,
}

impl Manifest {
    /// Hash of all recorded file hashes, in path order.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for f in &self.files {
            h.update(f.path.as_bytes());
            h.update(b"\0");
            h.update(f.sha256.as_bytes());
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }

    /// Re-hashes every listed file under `dir`; returns the paths whose
    /// contents no longer match.
    pub fn verify(&self, dir: &Path) -> Result<Vec<String>> {
        let mut bad = Vec::new();
        for f in &self.files {
            let path = dir.join(&f.path);
            let bytes = fs::read(&path).map_err(|e| GdrtError::io(&path, e))?;
            if sha256_hex(&bytes) != f.sha256 {
                bad.push(f.path.clone());
            }
        }
        Ok(bad)
    }
}

fn list_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<_> = fs::read_dir(dir)
        .map_err(|e| GdrtError::io(dir, e))?
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| GdrtError::io(dir, e))?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let path = e.path();
        if path.is_dir() {
            list_files(root, &path, out)?;
        } else if path.strip_prefix(root).ok() != Some(Path::new("manifest.json")) {
            out.push(path);
        }
    }
    Ok(())
}

pub fn build_manifest(spec: &ExperimentSpec, seeds: BTreeMap<String, u64>) -> Result<Manifest> {
    let dir = spec.experiment_dir();
    let mut paths = Vec::new();
    list_files(&dir, &dir, &mut paths)?;
    let files = paths
        .iter()
        .map(|p| {
            let bytes = fs::read(p).map_err(|e| GdrtError::io(p, e))?;
            let rel = p.strip_prefix(&dir).expect("under experiment dir");
            Ok(ManifestEntry {
                path: rel.to_string_lossy().replace('\\', "/"),
                bytes: bytes.len() as u64,
                sha256: sha256_hex(&bytes),
            })
        })
        .collect::<Result<_>>()?;
    // The output directory is where the run lives, not what it computes.
    let mut canonical = spec.clone();
    canonical.out_dir = PathBuf::new();
    let spec_json = serde_json::to_vec(&canonical).map_err(|e| GdrtError::json("spec", e))?;
    Ok(Manifest {
        name: spec.name.clone(),
        seed: spec.seed,
        spec_sha256: sha256_hex(&spec_json),
        seeds,
        files,
    })
}

fn stage<T>(name: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| e.in_stage(name))
}

fn stage_config(method: Method, stage: &StageSpec, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: stage.epochs,
        batch_size: stage.batch_size,
        lr: stage.lr,
        mask_history_prob: stage.mask_history_prob,
        ..TrainConfig::new(method, seed)
    }
}

/// Trains the base model (history-only next-item pass) from a seeded
/// initialisation.
pub fn train_base(spec: &ExperimentSpec, corpus: &Corpus) -> Result<(ModelParams, TrainLog)> {
    let config = ModelConfig {
        vocab_size: corpus.config.vocab_size,
        embed_dim: spec.model.embed_dim,
        num_layers: spec.model.num_layers,
        num_heads: spec.model.num_heads,
        context_len: corpus.max_sequence_len(),
        seed: sub_seed(spec.seed, "init"),
        ff_mult: spec.model.ff_mult,
    };
    let init = ModelParams::init(&config)?;
    if spec.pretrain.epochs == 0 {
        return Ok((init, TrainLog::default()));
    }
    let data = continuation_instances(&corpus.train, &corpus.catalog);
    let out = train(
        &init,
        &data,
        None,
        None,
        &stage_config(Method::Sft, &spec.pretrain, sub_seed(spec.seed, "pretrain")),
    )?;
    let params = out.checkpoints.last().expect("at least one epoch").params()?;
    Ok((params, out.log))
}

pub fn train_reference(spec: &ExperimentSpec, corpus: &Corpus, base: &ModelParams) -> Result<(ModelParams, TrainLog)> {
    if spec.reference.epochs == 0 {
        return Ok((base.clone(), TrainLog::default()));
    }
    let out = train(
        base,
        &corpus.train,
        None,
        None,
        &stage_config(Method::Sft, &spec.reference, sub_seed(spec.seed, "reference")),
    )?;
    let params = out.checkpoints.last().expect("at least one epoch").params()?;
    Ok((params, out.log))
}

fn fmt_opt(x: Option<impl std::fmt::Display>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

/// Classifies a G × tau grid of validation NDCG@5 values. A cell is an
/// interior winner if, along its row or its column, it is strictly better
/// than both end points of that axis.
pub fn grid_shape(group_grid: &[usize], tau_grid: &[f64], score: impl Fn(usize, usize) -> Option<f64>) -> GridReport {
    let (ng, nt) = (group_grid.len(), tau_grid.len());
    let mut winners = Vec::new();
    let mut cells = 0;
    for gi in 0..ng {
        for ti in 0..nt {
            let Some(s) = score(gi, ti) else { continue };
            cells += 1;
            let beats = |a: Option<f64>, b: Option<f64>| matches!((a, b), (Some(a), Some(b)) if s > a && s > b);
            let row = ti > 0 && ti + 1 < nt && beats(score(gi, 0), score(gi, nt - 1));
            let col = gi > 0 && gi + 1 < ng && beats(score(0, ti), score(ng - 1, ti));
            if row || col {
                winners.push(format!("gdrt-G{}-tau{}", group_grid[gi], tau_grid[ti]));
            }
        }
    }
    GridReport {
        shape: if winners.is_empty() {
            GridShape::Monotone
        } else {
            GridShape::InteriorPeak
        },
        interior_winners: winners,
        cells,
        expected_cells: ng * nt,
    }
}

struct Shared<'a> {
    spec: &'a ExperimentSpec,
    corpus: &'a Corpus,
    trie: &'a ItemTrie,
    initial: &'a ModelParams,
    initial_test_recs: &'a [Recommendation],
    item_groups: &'a [usize],
    groups: &'a BTreeMap<usize, GroupAssignment>,
    shuffle_seed: u64,
}

fn run_cell(sh: &Shared<'_>, cell: &Cell, dir: &Path) -> Result<(CellSummary, Vec<f64>)> {
    let spec = sh.spec;
    let mut config = stage_config(cell.method, &spec.finetune, sh.shuffle_seed);
    config.ema_beta = spec.ema_beta;
    config.grouping = spec.grouping;
    config.exact_group_losses = spec.exact_group_losses;
    if let Some(g) = cell.groups {
        config.groups = g;
    }
    if let Some(t) = cell.tau {
        config.tau = t;
    }
    io::write_json(&dir.join("config.json"), &config)?;
    let groups = cell.groups.map(|g| &sh.groups[&g]);
    let validation = Validation {
        instances: &sh.corpus.valid,
        trie: sh.trie,
        beam: spec.beam,
    };
    let out = train(sh.initial, &sh.corpus.train, groups, Some(&validation), &config)?;
    out.log.save(&dir.join("trainlog.jsonl"))?;
    let valid: Vec<f64> = out.log.epochs.iter().map(|e| e.valid_ndcg5.unwrap_or(0.0)).collect();
    let best_idx = argmax_earliest(&valid).ok_or_else(|| GdrtError::EmptyInput("training epochs".into()))?;
    if spec.save_checkpoints {
        for c in &out.checkpoints {
            c.save(&dir.join(format!("ckpt-epoch{}.json", c.epoch)))?;
        }
    }
    let best_ckpt = &out.checkpoints[best_idx];
    best_ckpt.save(&dir.join("best.json"))?;

    let mut per_epoch = vec![sh.initial_test_recs.to_vec()];
    for c in &out.checkpoints {
        per_epoch.push(recommend(&c.params()?, &sh.corpus.test, sh.trie, &spec.beam)?);
    }
    let curve = group_distribution_curve(&per_epoch, sh.item_groups)?;
    let best_recs = &per_epoch[best_idx + 1];
    write_recommendations(&dir.join("recs.jsonl"), best_recs)?;
    let mut report = evaluate(best_recs, &sh.corpus.test, sh.item_groups, spec.item_groups, &spec.ks)?;
    report.top1_group1_share_curve = curve.clone();
    io::write_json(&dir.join("report.json"), &report)?;
    io::write_text(&dir.join("group_shares.csv"), &group_shares_csv(&report))?;
    let best_params = best_ckpt.params()?;
    let attribution_best = attribution_ratios(&best_params, &sh.corpus.test)?;
    io::write_json(&dir.join("attrib.json"), &attribution_best)?;
    let final_params = out.checkpoints.last().expect("non-empty").params()?;
    let attribution_final = attribution_ratios(&final_params, &sh.corpus.test)?;
    let final_top1 = top1_share(per_epoch.last().expect("non-empty"), sh.item_groups, 0)?;
    Ok((
        CellSummary {
            cell: cell.clone(),
            best_epoch: best_ckpt.epoch,
            valid_ndcg5: valid,
            best: report,
            attribution_best,
            final_top1_group1_share: final_top1,
            attribution_final,
            mean_weights: out.log.mean_weights(),
        },
        curve,
    ))
}

/// Runs every stage of `spec` and writes the experiment directory. On
/// failure the error names the stage and everything written so far stays
/// on disk.
pub fn run_pipeline(spec: &ExperimentSpec, quiet: bool) -> Result<ExperimentSummary> {
    spec.validate()?;
    let dir = spec.experiment_dir();
    if dir.exists() {
        fs::remove_dir_all(&dir).map_err(|e| GdrtError::io(&dir, e))?;
    }
    let say = |msg: &str| {
        if !quiet {
            eprintln!("[{}] {msg}", spec.name);
        }
    };
    let mut seeds = BTreeMap::new();
    for name in ["init", "pretrain", "reference", "shuffle", "kmeans"] {
        seeds.insert(name.to_string(), sub_seed(spec.seed, name));
    }
    seeds.insert("corpus".to_string(), spec.seed);
    io::write_json(&dir.join("spec.json"), spec)?;

    say("generating corpus");
    let corpus = stage("corpus", spec.corpus_config().and_then(|c| generate_corpus(&c)))?;
    stage("corpus", corpus.write_dir(&dir.join("corpus")))?;
    let trie = stage("corpus", build_trie(&corpus.catalog))?;

    say("training base model");
    let (base, base_log) = stage("base", train_base(spec, &corpus))?;
    stage(
        "base",
        Checkpoint::capture(&base, spec.pretrain.epochs, base_log.steps.len(), None, None)
            .save(&dir.join("base/ckpt.json")),
    )?;
    stage("base", base_log.save(&dir.join("base/trainlog.jsonl")))?;

    say("training reference model");
    let (reference, ref_log) = stage("reference", train_reference(spec, &corpus, &base))?;
    stage(
        "reference",
        Checkpoint::capture(&reference, spec.reference.epochs, ref_log.steps.len(), None, None)
            .save(&dir.join("reference/ckpt.json")),
    )?;
    stage("reference", ref_log.save(&dir.join("reference/trainlog.jsonl")))?;

    say("scoring relevance");
    let (item_groups, groups) = stage(
        "relevance",
        (|| {
            let scores = token_relevance(&reference, &corpus.train)?;
            write_scores(&dir.join("relevance/scores.jsonl"), &scores)?;
            let items = item_relevance(&reference, &corpus.catalog)?;
            io::write_jsonl(&dir.join("relevance/items.jsonl"), &items)?;
            let item_groups = partition_items(&items, spec.item_groups)?;
            io::write_json(&dir.join("relevance/item_groups.json"), &item_groups)?;
            let mut groups = BTreeMap::new();
            if spec.methods.iter().any(|m| *m != Method::Sft) {
                for &g in &spec.group_grid {
                    let a = partition_tokens(&scores, g, spec.grouping, sub_seed(spec.seed, "kmeans"))?;
                    a.save(&dir.join(format!("relevance/groups-G{g}.json")))?;
                    groups.insert(g, a);
                }
            }
            Ok((item_groups, groups))
        })(),
    )?;

    say("evaluating initial model");
    let base_attribution = stage("initial-eval", attribution_ratios(&base, &corpus.test))?;
    io::write_json(&dir.join("base/attrib.json"), &base_attribution)?;
    let initial = match spec.finetune_from {
        InitModel::Base => &base,
        InitModel::Reference => &reference,
    };
    let initial_test_recs = stage("initial-eval", recommend(initial, &corpus.test, &trie, &spec.beam))?;
    let initial_attribution = stage("initial-eval", attribution_ratios(initial, &corpus.test))?;
    let initial_top1 = stage("initial-eval", top1_share(&initial_test_recs, &item_groups, 0))?;
    let test_shares = stage(
        "initial-eval",
        crate::eval::target_shares(&corpus.test, &item_groups, spec.item_groups),
    )?;

    let shared = Shared {
        spec,
        corpus: &corpus,
        trie: &trie,
        initial,
        initial_test_recs: &initial_test_recs,
        item_groups: &item_groups,
        groups: &groups,
        shuffle_seed: sub_seed(spec.seed, "shuffle"),
    };
    let mut cells = Vec::new();
    let mut curves = Vec::new();
    for cell in cells_for(spec) {
        say(&format!("cell {}", cell.label));
        let cdir = dir.join("cells").join(&cell.label);
        let (summary, curve) = stage(&format!("cell {}", cell.label), run_cell(&shared, &cell, &cdir))?;
        curves.push((cell.label.clone(), curve));
        cells.push(summary);
    }

    say("writing summaries");
    let mut best_by_method = BTreeMap::new();
    for &m in &spec.methods {
        let of_method: Vec<&CellSummary> = cells.iter().filter(|c| c.cell.method == m).collect();
        let scores: Vec<f64> = of_method.iter().map(|c| c.valid_ndcg5[c.best_epoch - 1]).collect();
        if let Some(i) = argmax_earliest(&scores) {
            best_by_method.insert(m.name().to_string(), of_method[i].cell.label.clone());
        }
    }
    let grid = spec.methods.contains(&Method::Gdrt).then(|| {
        let lookup = |gi: usize, ti: usize| {
            let label = format!("gdrt-G{}-tau{}", spec.group_grid[gi], spec.tau_grid[ti]);
            cells
                .iter()
                .find(|c| c.cell.label == label)
                .map(|c| c.valid_ndcg5[c.best_epoch - 1])
        };
        grid_shape(&spec.group_grid, &spec.tau_grid, lookup)
    });
    let sft_curve_kendall = curves.iter().find(|(l, _)| l == "sft").map(|(_, c)| {
        let ys = &c[1..];
        let xs: Vec<f64> = (1..=ys.len()).map(|e| e as f64).collect();
        kendall_tau_b(&xs, ys)
    });

    let summary = ExperimentSummary {
        name: spec.name.clone(),
        seed: spec.seed,
        base_attribution,
        initial_attribution,
        initial_top1_group1_share: initial_top1,
        test_group1_share: test_shares[0],
        cells,
        grid,
        best_by_method,
        sft_curve_kendall,
    };
    stage("summary", write_summaries(spec, &summary, &curves))?;

    let manifest = stage("manifest", build_manifest(spec, seeds))?;
    stage("manifest", io::write_json(&dir.join("manifest.json"), &manifest))?;
    say(&format!("done, manifest digest {}", manifest.digest()));
    Ok(summary)
}

fn csv_num(x: f64) -> String {
    if x.is_infinite() {
        "inf".into()
    } else {
        format!("{x}")
    }
}

fn write_summaries(spec: &ExperimentSpec, s: &ExperimentSummary, curves: &[(String, Vec<f64>)]) -> Result<()> {
    let dir = spec.experiment_dir();
    io::write_json(&dir.join("summary.json"), s)?;

    let mut header = String::from("label,method,groups,tau,best_epoch,valid_ndcg5");
    for k in &spec.ks {
        let _ = write!(header, ",ndcg@{k},hit@{k},mgu@{k},dgu@{k}");
    }
    header.push_str(",top1_group1_share,task_history_ratio,prefix_history_ratio\n");
    let mut summary_csv = header;
    for c in &s.cells {
        let _ = write!(
            summary_csv,
            "{},{},{},{},{},{}",
            c.cell.label,
            c.cell.method.name(),
            fmt_opt(c.cell.groups),
            fmt_opt(c.cell.tau),
            c.best_epoch,
            c.valid_ndcg5[c.best_epoch - 1]
        );
        for k in &spec.ks {
            let _ = write!(
                summary_csv,
                ",{},{},{},{}",
                c.best.ndcg[k], c.best.hit[k], c.best.mgu[k], c.best.dgu[k]
            );
        }
        let _ = writeln!(
            summary_csv,
            ",{},{},{}",
            c.best.group_rec_share[0],
            csv_num(c.attribution_best.task_history_ratio),
            csv_num(c.attribution_best.prefix_history_ratio)
        );
    }
    io::write_text(&dir.join("summary.csv"), &summary_csv)?;

    if let Some(grid) = &s.grid {
        let mut grid_csv = String::from("groups,tau,valid_ndcg5,test_ndcg5,test_ndcg10,test_mgu5,test_dgu5\n");
        for &g in &spec.group_grid {
            for &tau in &spec.tau_grid {
                let label = format!("gdrt-G{g}-tau{tau}");
                if let Some(c) = s.cell(&label) {
                    let get = |m: &BTreeMap<usize, f64>, k: usize| m.get(&k).map(|v| v.to_string()).unwrap_or_default();
                    let _ = writeln!(
                        grid_csv,
                        "{g},{tau},{},{},{},{},{}",
                        c.valid_ndcg5[c.best_epoch - 1],
                        get(&c.best.ndcg, 5),
                        get(&c.best.ndcg, 10),
                        get(&c.best.mgu, 5),
                        get(&c.best.dgu, 5)
                    );
                }
            }
        }
        io::write_text(&dir.join("grid.csv"), &grid_csv)?;
        io::write_json(&dir.join("grid_shape.json"), grid)?;
    }

    let mut curve_csv = String::from("label,epoch,top1_group1_share\n");
    for (label, curve) in curves {
        for (e, v) in curve.iter().enumerate() {
            let _ = writeln!(curve_csv, "{label},{e},{v}");
        }
    }
    io::write_text(&dir.join("curve.csv"), &curve_csv)?;

    let mut attrib_csv =
        String::from("model,task_history_ratio,prefix_history_ratio,mean_abs_task,mean_abs_history,mean_abs_prefix\n");
    let mut row = |name: &str, a: &AttributionSummary| {
        let _ = writeln!(
            attrib_csv,
            "{name},{},{},{},{},{}",
            csv_num(a.task_history_ratio),
            csv_num(a.prefix_history_ratio),
            a.mean_abs_task,
            a.mean_abs_history,
            a.mean_abs_prefix
        );
    };
    row("base", &s.base_attribution);
    row("initial", &s.initial_attribution);
    for c in &s.cells {
        row(&format!("{}:best", c.cell.label), &c.attribution_best);
        row(&format!("{}:final", c.cell.label), &c.attribution_final);
    }
    io::write_text(&dir.join("attribution.csv"), &attrib_csv)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sub_seeds_differ_and_repeat() {
        assert_eq!(sub_seed(42, "init"), sub_seed(42, "init"));
        assert_ne!(sub_seed(42, "init"), sub_seed(42, "shuffle"));
        assert_ne!(sub_seed(42, "init"), sub_seed(43, "init"));
    }

    #[test]
    fn full_grid_has_fifteen_gdrt_cells() {
        let spec = ExperimentSpec::new("x", 1, "/tmp");
        let cells = cells_for(&spec);
        assert_eq!(cells.len(), 16);
        assert_eq!(cells.iter().filter(|c| c.method == Method::Gdrt).count(), 15);
        assert_eq!(cells[0].label, "sft");
    }

    #[test]
    fn rejects_unsafe_names() {
        for name in ["", "a/b", "..", "x y"] {
            let spec = ExperimentSpec::new(name, 1, "/tmp");
            assert!(spec.validate().is_err(), "{name}");
        }
        assert!(ExperimentSpec::new("ok-name_1", 1, "/tmp").validate().is_ok());
    }

    #[test]
    fn grid_shapes() {
        let g = [2, 5, 10];
        let t = [0.1, 0.5, 1.0];
        // peak in the middle of the tau axis
        let peak = grid_shape(&g, &t, |gi, ti| Some(if ti == 1 { 0.5 } else { 0.1 * gi as f64 }));
        assert_eq!(peak.shape, GridShape::InteriorPeak);
        assert_eq!(peak.cells, 9);
        let mono = grid_shape(&g, &t, |gi, ti| Some(gi as f64 + ti as f64));
        assert_eq!(mono.shape, GridShape::Monotone);
        assert!(mono.interior_winners.is_empty());
    }
}
