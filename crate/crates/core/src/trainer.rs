//! Training loops: plain token-level fine-tuning and group-reweighted
//! fine-tuning with EMA group losses.
//!
//! Both share one loop. Per step the batch is run forward once, per-token
//! NLLs are read off, the objective's token weights are derived from them,
//! and the same traces are reused for the backward pass.

use std::collections::HashMap;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{mask_history, PromptInstance, TokenId};
use crate::decode::{recommend, BeamConfig, ItemTrie};
use crate::dro::GroupWeightState;
use crate::error::{GdrtError, Result};
use crate::eval::{ndcg_hit, targets_of};
use crate::io;
use crate::model::{
    backward_trace, clip_global_norm, forward_trace, nll_per_token, AdamState, Checkpoint, ForwardTrace, ModelParams,
    RngState,
};
use crate::relevance::{GroupAssignment, GroupingMethod};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Sft,
    Gdrt,
    /// Every group weighted equally, whatever its loss.
    Balanced,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Sft => "sft",
            Method::Gdrt => "gdrt",
            Method::Balanced => "balanced",
        }
    }

    fn uses_groups(self) -> bool {
        self != Method::Sft
    }
}

impl FromStr for Method {
    type Err = GdrtError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sft" => Ok(Method::Sft),
            "gdrt" => Ok(Method::Gdrt),
            "balanced" => Ok(Method::Balanced),
            other => Err(GdrtError::InvalidConfig(format!("unknown method `{other}`"))),
        }
    }
}

fn default_epochs() -> usize {
    5
}
fn default_batch() -> usize {
    32
}
fn default_lr() -> f64 {
    1e-3
}
fn default_groups() -> usize {
    5
}
fn default_tau() -> f64 {
    0.5
}
fn default_beta() -> f64 {
    0.1
}
fn default_clip() -> f64 {
    1.0
}
fn default_grouping() -> GroupingMethod {
    GroupingMethod::Kmeans
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub method: Method,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_groups")]
    pub groups: usize,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "default_beta")]
    pub ema_beta: f64,
    pub seed: u64,
    #[serde(default = "default_grouping")]
    pub grouping: GroupingMethod,
    #[serde(default = "default_clip")]
    pub clip_norm: f64,
    /// Replace the EMA by exact full-split group losses at every epoch start.
    #[serde(default)]
    pub exact_group_losses: bool,
    /// Probability that an instance is shown with its history masked.
    #[serde(default)]
    pub mask_history_prob: f64,
}

impl TrainConfig {
    pub fn new(method: Method, seed: u64) -> Self {
        TrainConfig {
            method,
            epochs: default_epochs(),
            batch_size: default_batch(),
            lr: default_lr(),
            groups: default_groups(),
            tau: default_tau(),
            ema_beta: default_beta(),
            seed,
            grouping: default_grouping(),
            clip_norm: default_clip(),
            exact_group_losses: false,
            mask_history_prob: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(GdrtError::InvalidConfig(m));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be non-negative, got {}", self.lr));
        }
        if self.method.uses_groups() && self.groups == 0 {
            return bad("group count must be at least 1".into());
        }
        if self.method == Method::Gdrt && !(self.tau > 0.0) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if !(0.0..=1.0).contains(&self.mask_history_prob) {
            return bad(format!("mask_history_prob {} not in [0,1]", self.mask_history_prob));
        }
        if !(self.clip_norm > 0.0) {
            return bad(format!("clip_norm must be positive, got {}", self.clip_norm));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub grad_norm: f64,
    /// Mean NLL of each group's tokens in this batch, `None` if absent.
    #[serde(default)]
    pub group_batch_loss: Vec<Option<f64>>,
    #[serde(default)]
    pub ema: Vec<f64>,
    #[serde(default)]
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub valid_ndcg5: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum LogLine {
    Step(StepRecord),
    Epoch(EpochRecord),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    /// One JSON object per line, steps of an epoch before its summary.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut lines = Vec::with_capacity(self.steps.len() + self.epochs.len());
        let mut steps = self.steps.iter().peekable();
        for e in &self.epochs {
            while let Some(s) = steps.next_if(|s| s.epoch <= e.epoch) {
                lines.push(LogLine::Step(s.clone()));
            }
            lines.push(LogLine::Epoch(e.clone()));
        }
        lines.extend(steps.map(|s| LogLine::Step(s.clone())));
        io::write_jsonl(path, &lines)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut log = TrainLog::default();
        for line in io::read_jsonl::<LogLine>(path)? {
            match line {
                LogLine::Step(s) => log.steps.push(s),
                LogLine::Epoch(e) => log.epochs.push(e),
            }
        }
        Ok(log)
    }

    /// Step-averaged weight of each group.
    pub fn mean_weights(&self) -> Vec<f64> {
        let Some(first) = self.steps.first() else {
            return Vec::new();
        };
        let mut acc = vec![0.0; first.weights.len()];
        for s in &self.steps {
            for (a, q) in acc.iter_mut().zip(&s.weights) {
                *a += q;
            }
        }
        acc.iter().map(|a| a / self.steps.len() as f64).collect()
    }
}

/// Validation split and decoder used to score each epoch's checkpoint.
#[derive(Debug, Clone, Copy)]
pub struct Validation<'a> {
    pub instances: &'a [PromptInstance],
    pub trie: &'a ItemTrie,
    pub beam: BeamConfig,
}

impl Validation<'_> {
    pub fn ndcg5(&self, params: &ModelParams) -> Result<f64> {
        let recs = recommend(params, self.instances, self.trie, &self.beam)?;
        Ok(ndcg_hit(&recs, &targets_of(self.instances), 5)?.0)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// One checkpoint per finished epoch.
    pub checkpoints: Vec<Checkpoint>,
    pub log: TrainLog,
}

/// Mean NLL per group over `instances` (full prompts).
pub fn exact_group_losses(
    params: &ModelParams,
    instances: &[PromptInstance],
    groups: &GroupAssignment,
) -> Result<Vec<f64>> {
    crate::relevance::group_loss_profile(params, instances, groups)
}

struct BatchItem {
    tokens: Vec<TokenId>,
    predictions: Vec<(usize, TokenId)>,
    groups: Vec<usize>,
}

/// Trains from `initial`; `groups` is required for the grouped methods.
pub fn train(
    initial: &ModelParams,
    instances: &[PromptInstance],
    groups: Option<&GroupAssignment>,
    validation: Option<&Validation<'_>>,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if instances.is_empty() {
        return Err(GdrtError::EmptyInput("training split".into()));
    }
    let num_groups = if config.method.uses_groups() {
        let g = groups
            .ok_or_else(|| GdrtError::InvalidConfig(format!("{} needs a group assignment", config.method.name())))?;
        if g.num_groups != config.groups {
            return Err(GdrtError::InvalidConfig(format!(
                "config asks for {} groups, assignment has {}",
                config.groups, g.num_groups
            )));
        }
        for inst in instances {
            g.groups_for(inst)?;
        }
        g.num_groups
    } else {
        1
    };

    let mut params = initial.clone();
    let mut adam = AdamState::new(params.len());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut weight_state = match (config.method, groups) {
        (Method::Gdrt, Some(g)) => Some(GroupWeightState::new(
            exact_group_losses(&params, instances, g)?,
            config.tau,
            config.ema_beta,
        )?),
        _ => None,
    };
    let by_id: HashMap<usize, &[usize]> = match groups {
        Some(g) if config.method.uses_groups() => instances
            .iter()
            .map(|i| Ok((i.instance_id, g.groups_for(i)?)))
            .collect::<Result<_>>()?,
        _ => HashMap::new(),
    };

    let mut log = TrainLog::default();
    let mut checkpoints = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..instances.len()).collect();
    let mut step = 0;
    for epoch in 1..=config.epochs {
        if config.exact_group_losses {
            if let (Some(ws), Some(g)) = (weight_state.as_mut(), groups) {
                ws.reset(exact_group_losses(&params, instances, g)?)?;
            }
        }
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut epoch_steps = 0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<BatchItem> = chunk
                .iter()
                .map(|&i| {
                    let inst = &instances[i];
                    let masked = config.mask_history_prob > 0.0 && rng.random::<f64>() < config.mask_history_prob;
                    let shown = if masked { mask_history(inst) } else { inst.clone() };
                    BatchItem {
                        tokens: shown.full_sequence(),
                        predictions: shown.target_predictions(),
                        groups: by_id
                            .get(&inst.instance_id)
                            .map(|g| g.to_vec())
                            .unwrap_or_else(|| vec![0; inst.target_tokens.len()]),
                    }
                })
                .collect();
            step += 1;
            let record = train_step(
                &mut params,
                &mut adam,
                &batch,
                num_groups,
                config,
                weight_state.as_mut(),
            )
            .map_err(|e| match e {
                GdrtError::NonFinite { layer } => GdrtError::Diverged {
                    step,
                    reason: format!("non-finite value in {layer}"),
                },
                other => other,
            })?;
            if !record.loss.is_finite() {
                return Err(GdrtError::Diverged {
                    step,
                    reason: format!("loss {}", record.loss),
                });
            }
            epoch_loss += record.loss;
            epoch_steps += 1;
            log.steps.push(StepRecord { step, epoch, ..record });
        }
        let valid_ndcg5 = validation.map(|v| v.ndcg5(&params)).transpose()?;
        log.epochs.push(EpochRecord {
            epoch,
            mean_loss: epoch_loss / epoch_steps as f64,
            valid_ndcg5,
        });
        checkpoints.push(Checkpoint::capture(
            &params,
            epoch,
            step,
            Some(&adam),
            Some(RngState {
                seed: config.seed,
                word_pos: rng.get_word_pos(),
            }),
        ));
    }
    Ok(TrainOutcome { checkpoints, log })
}

fn train_step(
    params: &mut ModelParams,
    adam: &mut AdamState,
    batch: &[BatchItem],
    num_groups: usize,
    config: &TrainConfig,
    weight_state: Option<&mut GroupWeightState>,
) -> Result<StepRecord> {
    let traces: Vec<ForwardTrace> = batch
        .par_iter()
        .map(|b| {
            let positions: Vec<usize> = b.predictions.iter().map(|p| p.0).collect();
            forward_trace(params, &b.tokens, &positions)
        })
        .collect::<Result<_>>()?;
    let nlls: Vec<Vec<f64>> = batch
        .iter()
        .zip(&traces)
        .map(|(b, tr)| {
            b.predictions
                .iter()
                .enumerate()
                .map(|(k, &(_, tok))| -tr.log_prob(k, tok))
                .collect()
        })
        .collect();

    // Per-group weight of one token's NLL in the step objective, and its value.
    let (token_weight, loss, group_batch_loss, ema, weights): (Vec<f64>, f64, _, _, _) = match config.method {
        Method::Sft => {
            let n: usize = nlls.iter().map(Vec::len).sum();
            let total: f64 = nlls.iter().flatten().sum();
            let w = 1.0 / n as f64;
            (vec![w], total / n as f64, Vec::new(), Vec::new(), Vec::new())
        }
        Method::Gdrt | Method::Balanced => {
            let mut sum = vec![0.0; num_groups];
            let mut count = vec![0usize; num_groups];
            for (b, nll) in batch.iter().zip(&nlls) {
                for (&g, &l) in b.groups.iter().zip(nll) {
                    sum[g] += l;
                    count[g] += 1;
                }
            }
            let means: Vec<Option<f64>> = sum
                .iter()
                .zip(&count)
                .map(|(s, &c)| (c > 0).then(|| s / c as f64))
                .collect();
            let (q, ema) = match weight_state {
                Some(ws) => {
                    ws.observe(&means)?;
                    (ws.weights.clone(), ws.ema_losses.clone())
                }
                None => (vec![1.0 / num_groups as f64; num_groups], Vec::new()),
            };
            let loss: f64 = means.iter().zip(&q).filter_map(|(m, qg)| m.map(|m| qg * m)).sum();
            let per_group: Vec<f64> = q
                .iter()
                .zip(&count)
                .map(|(qg, &c)| if c > 0 { qg / c as f64 } else { 0.0 })
                .collect();
            (per_group, loss, means, ema, q)
        }
    };

    let grads: Vec<Vec<f64>> = batch
        .par_iter()
        .zip(&traces)
        .map(|(b, tr)| {
            let terms: Vec<(usize, TokenId, f64)> = b
                .predictions
                .iter()
                .enumerate()
                .map(|(k, &(_, tok))| (k, tok, token_weight[b.groups[k]]))
                .collect();
            let mut g = vec![0.0; params.len()];
            backward_trace(params, tr, &terms, &mut g)?;
            Ok(g)
        })
        .collect::<Result<_>>()?;
    let mut grad = vec![0.0; params.len()];
    for g in grads {
        for (a, b) in grad.iter_mut().zip(g) {
            *a += b;
        }
    }
    let grad_norm = clip_global_norm(&mut grad, config.clip_norm);
    adam.step(params, &grad, config.lr)?;
    Ok(StepRecord {
        step: 0,
        epoch: 0,
        loss,
        grad_norm,
        group_batch_loss,
        ema,
        weights,
    })
}

pub fn train_sft(
    initial: &ModelParams,
    instances: &[PromptInstance],
    validation: Option<&Validation<'_>>,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    if config.method != Method::Sft {
        return Err(GdrtError::InvalidConfig("train_sft needs method sft".into()));
    }
    train(initial, instances, None, validation, config)
}

pub fn train_gdrt(
    initial: &ModelParams,
    instances: &[PromptInstance],
    groups: &GroupAssignment,
    validation: Option<&Validation<'_>>,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    if config.method == Method::Sft {
        return Err(GdrtError::InvalidConfig("train_gdrt needs a grouped method".into()));
    }
    train(initial, instances, Some(groups), validation, config)
}

/// Index of the best score; the earliest wins a tie.
pub fn argmax_earliest(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, s) in scores.iter().enumerate() {
        if best.is_none_or(|b| *s > scores[b]) {
            best = Some(i);
        }
    }
    best
}

/// Scores every checkpoint on the validation split by NDCG@5 and returns
/// the index of the best one with its score.
pub fn select_checkpoint(checkpoints: &[Checkpoint], validation: &Validation<'_>) -> Result<(usize, f64)> {
    if checkpoints.is_empty() {
        return Err(GdrtError::EmptyInput("checkpoints".into()));
    }
    let scores: Vec<f64> = checkpoints
        .iter()
        .map(|c| validation.ndcg5(&c.params()?))
        .collect::<Result<_>>()?;
    let best = argmax_earliest(&scores).expect("non-empty");
    Ok((best, scores[best]))
}

/// Mean per-token NLL over a split.
pub fn mean_token_nll(params: &ModelParams, instances: &[PromptInstance]) -> Result<f64> {
    let per: Vec<Vec<f64>> = instances
        .par_iter()
        .map(|i| Ok(nll_per_token(params, i)?.into_iter().map(|n| n.nll).collect()))
        .collect::<Result<_>>()?;
    let n: usize = per.iter().map(Vec::len).sum();
    Ok(per.iter().flatten().sum::<f64>() / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, Corpus, CorpusConfig};
    use crate::model::ModelConfig;
    use crate::relevance::{partition_tokens, token_relevance, KMEANS_SEED};

    fn setup(users: usize) -> (Corpus, ModelParams) {
        let corpus = generate_corpus(&CorpusConfig {
            num_users: users,
            ..CorpusConfig::default()
        })
        .unwrap();
        let cfg = ModelConfig {
            embed_dim: 16,
            ..ModelConfig::new(64, corpus.max_sequence_len(), 1)
        };
        (corpus, ModelParams::init(&cfg).unwrap())
    }

    fn quick(method: Method) -> TrainConfig {
        TrainConfig {
            epochs: 1,
            batch_size: 8,
            groups: 3,
            ..TrainConfig::new(method, 5)
        }
    }

    #[test]
    fn zero_lr_keeps_params() {
        let (c, p) = setup(40);
        let cfg = TrainConfig {
            lr: 0.0,
            ..quick(Method::Sft)
        };
        let out = train_sft(&p, &c.train, None, &cfg).unwrap();
        assert_eq!(out.checkpoints.last().unwrap().params().unwrap(), p);
    }

    #[test]
    fn same_seed_same_log() {
        let (c, p) = setup(40);
        let a = train_sft(&p, &c.train, None, &quick(Method::Sft)).unwrap();
        let b = train_sft(&p, &c.train, None, &quick(Method::Sft)).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.checkpoints, b.checkpoints);
    }

    #[test]
    fn grouped_methods_need_groups() {
        let (c, p) = setup(20);
        assert!(train(&p, &c.train, None, None, &quick(Method::Gdrt)).is_err());
        assert!(train_sft(&p, &c.train, None, &quick(Method::Gdrt)).is_err());
    }

    #[test]
    fn weights_follow_ema() {
        let (c, p) = setup(40);
        let scores = token_relevance(&p, &c.train).unwrap();
        let groups = partition_tokens(&scores, 3, GroupingMethod::Kmeans, KMEANS_SEED).unwrap();
        let out = train_gdrt(&p, &c.train, &groups, None, &quick(Method::Gdrt)).unwrap();
        for s in &out.log.steps {
            let q = crate::dro::compute_group_weights(&s.ema, 0.5).unwrap();
            assert_eq!(q, s.weights);
            assert!((s.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!(out.log.steps.windows(2).all(|w| w[1].step == w[0].step + 1));
        let dir = tempfile::tempdir().unwrap();
        out.log.save(&dir.path().join("trainlog.jsonl")).unwrap();
        assert_eq!(TrainLog::load(&dir.path().join("trainlog.jsonl")).unwrap(), out.log);
    }

    #[test]
    fn balanced_weights_are_uniform() {
        let (c, p) = setup(30);
        let scores = token_relevance(&p, &c.train).unwrap();
        let groups = partition_tokens(&scores, 3, GroupingMethod::Kmeans, KMEANS_SEED).unwrap();
        let out = train_gdrt(&p, &c.train, &groups, None, &quick(Method::Balanced)).unwrap();
        assert!(out.log.steps.iter().all(|s| s.weights == vec![1.0 / 3.0; 3]));
    }

    #[test]
    fn tie_rule() {
        assert_eq!(argmax_earliest(&[0.3, 0.5, 0.5]), Some(1));
        assert_eq!(argmax_earliest(&[0.1, 0.2, 0.3]), Some(2));
        assert_eq!(argmax_earliest(&[0.4]), Some(0));
        assert_eq!(argmax_earliest(&[]), None);
    }
}
