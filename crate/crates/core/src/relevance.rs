//! Relevance of target tokens and items to the auxiliary tokens alone, and
//! the token groups derived from it.
//!
//! Relevance is the log-probability a frozen reference model assigns to a
//! target token when the history is replaced by a single MASK, so only the
//! task tokens and the gold prefix are visible.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{mask_history, ItemCatalog, PromptInstance, BOS, MASK};
use crate::error::{GdrtError, Result};
use crate::io;
use crate::model::{nll_per_token, score_tokens, ModelParams};
use crate::stats;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenRelevance {
    pub instance_id: usize,
    /// 1-based index inside the target span.
    pub t: usize,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ItemRelevance {
    pub item_id: usize,
    pub score: f64,
}

/// One score per target token (title tokens and EOS) of every instance,
/// using the masked-history prompt.
pub fn token_relevance(params: &ModelParams, instances: &[PromptInstance]) -> Result<Vec<TokenRelevance>> {
    let per_instance: Vec<Vec<TokenRelevance>> = instances
        .par_iter()
        .map(|inst| {
            let masked = mask_history(inst);
            Ok(nll_per_token(params, &masked)?
                .into_iter()
                .map(|n| TokenRelevance {
                    instance_id: inst.instance_id,
                    t: n.t,
                    score: -n.nll,
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(per_instance.into_iter().flatten().collect())
}

/// Mean log-probability of each item's title tokens after
/// `[BOS] task [MASK]`, with teacher-forced prefixes.
pub fn item_relevance(params: &ModelParams, catalog: &ItemCatalog) -> Result<Vec<ItemRelevance>> {
    let mut prompt = vec![BOS];
    prompt.extend(catalog.layout.task_tokens());
    prompt.push(MASK);
    catalog
        .items
        .par_iter()
        .map(|item| {
            let mut seq = prompt.clone();
            seq.extend_from_slice(&item.title);
            let preds: Vec<_> = item
                .title
                .iter()
                .enumerate()
                .map(|(t, &tok)| (prompt.len() + t - 1, tok))
                .collect();
            let lps = score_tokens(params, &seq, &preds)?;
            Ok(ItemRelevance {
                item_id: item.item_id,
                score: stats::mean(&lps),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupingMethod {
    Kmeans,
    Quantile,
}

impl FromStr for GroupingMethod {
    type Err = GdrtError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kmeans" => Ok(GroupingMethod::Kmeans),
            "quantile" => Ok(GroupingMethod::Quantile),
            other => Err(GdrtError::InvalidConfig(format!("unknown grouping method `{other}`"))),
        }
    }
}

/// Labels `0..G` for a list of scores; label 0 has the highest centroid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub labels: Vec<usize>,
    pub centroids: Vec<f64>,
}

impl Partition {
    /// Within-cluster sum of squares around each group's mean.
    pub fn wcss(&self, scores: &[f64]) -> f64 {
        within_cluster_ss(scores, &self.labels, self.centroids.len())
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.centroids.len()];
        for &l in &self.labels {
            sizes[l] += 1;
        }
        sizes
    }
}

pub fn within_cluster_ss(scores: &[f64], labels: &[usize], groups: usize) -> f64 {
    let mut sum = vec![0.0; groups];
    let mut count = vec![0usize; groups];
    for (&s, &l) in scores.iter().zip(labels) {
        sum[l] += s;
        count[l] += 1;
    }
    scores
        .iter()
        .zip(labels)
        .map(|(&s, &l)| {
            let m = sum[l] / count[l] as f64;
            (s - m) * (s - m)
        })
        .sum()
}

pub const KMEANS_SEED: u64 = 0x6b6d65616e73;
const KMEANS_MAX_ITERS: usize = 100;
const KMEANS_TOL: f64 = 1e-9;

/// Distinct values in descending order with multiplicities.
fn distinct_desc(scores: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut values: Vec<f64> = Vec::new();
    let mut weights: Vec<f64> = Vec::new();
    for s in sorted {
        if values.last() == Some(&s) {
            *weights.last_mut().unwrap() += 1.0;
        } else {
            values.push(s);
            weights.push(1.0);
        }
    }
    (values, weights)
}

/// Index of the nearest centroid; centroids are sorted descending so an
/// exact tie goes to the lower index.
fn nearest(centroids: &[f64], x: f64) -> usize {
    let mut best = 0;
    for (k, c) in centroids.iter().enumerate().skip(1) {
        if (x - c).abs() < (x - centroids[best]).abs() {
            best = k;
        }
    }
    best
}

/// Weighted Lloyd iterations over distinct values. Returns the centroids
/// sorted descending and the assignment of each distinct value.
fn lloyd(values: &[f64], weights: &[f64], mut centroids: Vec<f64>) -> (Vec<f64>, Vec<usize>) {
    let k = centroids.len();
    centroids.sort_by(|a, b| b.total_cmp(a));
    let mut assign: Vec<usize> = values.iter().map(|&x| nearest(&centroids, x)).collect();
    for _ in 0..KMEANS_MAX_ITERS {
        let mut sum = vec![0.0; k];
        let mut mass = vec![0.0; k];
        for ((&x, &w), &a) in values.iter().zip(weights).zip(&assign) {
            sum[a] += w * x;
            mass[a] += w;
        }
        let mut next: Vec<f64> = (0..k)
            .map(|c| if mass[c] > 0.0 { sum[c] / mass[c] } else { f64::NAN })
            .collect();
        // An emptied cluster takes over the value furthest from its centroid.
        for c in 0..k {
            if next[c].is_nan() {
                let far = (0..values.len())
                    .max_by(|&i, &j| {
                        let di = (values[i] - centroids[assign[i]]).abs();
                        let dj = (values[j] - centroids[assign[j]]).abs();
                        di.total_cmp(&dj).then(j.cmp(&i))
                    })
                    .expect("non-empty values");
                next[c] = values[far];
            }
        }
        next.sort_by(|a, b| b.total_cmp(a));
        let shift = next
            .iter()
            .zip(&centroids)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        centroids = next;
        assign = values.iter().map(|&x| nearest(&centroids, x)).collect();
        if shift < KMEANS_TOL {
            break;
        }
    }
    (centroids, assign)
}

fn kmeans_pp_seeds(values: &[f64], weights: &[f64], k: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pick = |w: &[f64], rng: &mut ChaCha8Rng| {
        let total: f64 = w.iter().sum();
        let mut u = rng.random::<f64>() * total;
        for (i, wi) in w.iter().enumerate() {
            if u < *wi {
                return i;
            }
            u -= wi;
        }
        w.iter().rposition(|x| *x > 0.0).unwrap_or(0)
    };
    let mut chosen = vec![pick(weights, &mut rng)];
    while chosen.len() < k {
        let d2: Vec<f64> = values
            .iter()
            .zip(weights)
            .map(|(&x, &w)| {
                let d = chosen
                    .iter()
                    .map(|&c| (x - values[c]).abs())
                    .fold(f64::INFINITY, f64::min);
                w * d * d
            })
            .collect();
        chosen.push(pick(&d2, &mut rng));
    }
    chosen.into_iter().map(|i| values[i]).collect()
}

fn finish(scores: &[f64], centroids: &[f64], labels: Vec<usize>) -> Partition {
    // Recompute centroids as exact group means, then order groups by them.
    let k = centroids.len();
    let mut sum = vec![0.0; k];
    let mut count = vec![0usize; k];
    for (&s, &l) in scores.iter().zip(&labels) {
        sum[l] += s;
        count[l] += 1;
    }
    let means: Vec<f64> = (0..k).map(|c| sum[c] / count[c] as f64).collect();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| means[b].total_cmp(&means[a]).then(a.cmp(&b)));
    let mut relabel = vec![0; k];
    for (new, &old) in order.iter().enumerate() {
        relabel[old] = new;
    }
    Partition {
        labels: labels.into_iter().map(|l| relabel[l]).collect(),
        centroids: order.iter().map(|&c| means[c]).collect(),
    }
}

fn quantile_labels(scores: &[f64], groups: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let sizes = equal_sizes(scores.len(), groups);
    let mut labels = vec![0; scores.len()];
    let mut cursor = 0;
    for (g, size) in sizes.into_iter().enumerate() {
        for &i in &order[cursor..cursor + size] {
            labels[i] = g;
        }
        cursor += size;
    }
    labels
}

/// `n` split into `groups` near-equal sizes, remainder to the first groups.
pub fn equal_sizes(n: usize, groups: usize) -> Vec<usize> {
    let (base, extra) = (n / groups, n % groups);
    (0..groups).map(|g| base + usize::from(g < extra)).collect()
}

/// Splits one-dimensional scores into `groups` clusters.
///
/// K-means runs Lloyd's algorithm from k-means++ seeds and, separately, from
/// the quantile bins; the run with the smaller within-cluster sum of squares
/// is kept, so the result never does worse than equal-count binning.
pub fn partition_scores(scores: &[f64], groups: usize, method: GroupingMethod, seed: u64) -> Result<Partition> {
    if groups == 0 {
        return Err(GdrtError::InvalidConfig("number of groups must be at least 1".into()));
    }
    if scores.is_empty() {
        return Err(GdrtError::EmptyInput("relevance scores".into()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(GdrtError::NonFinite {
            layer: "relevance scores".into(),
        });
    }
    let (values, weights) = distinct_desc(scores);
    if groups > values.len() {
        return Err(GdrtError::TooManyGroups {
            groups,
            distinct: values.len(),
        });
    }
    let quantile = quantile_labels(scores, groups);
    if method == GroupingMethod::Quantile {
        return Ok(finish(scores, &vec![0.0; groups], quantile));
    }

    let label_scores = |assign: &[usize]| -> Vec<usize> {
        scores
            .iter()
            .map(|s| {
                let idx = values
                    .binary_search_by(|v| s.total_cmp(v))
                    .expect("score is among the distinct values");
                assign[idx]
            })
            .collect()
    };
    let (c_pp, a_pp) = lloyd(&values, &weights, kmeans_pp_seeds(&values, &weights, groups, seed));
    let from_pp = label_scores(&a_pp);

    let quantile_means = finish(scores, &vec![0.0; groups], quantile).centroids;
    let (c_q, a_q) = lloyd(&values, &weights, quantile_means);
    let from_q = label_scores(&a_q);

    let non_empty = |labels: &[usize]| {
        let mut seen = vec![false; groups];
        for &l in labels {
            seen[l] = true;
        }
        seen.into_iter().all(|x| x)
    };
    let candidates = [(c_pp, from_pp), (c_q, from_q)];
    let best = candidates
        .into_iter()
        .filter(|(_, l)| non_empty(l))
        .map(|(c, l)| {
            let w = within_cluster_ss(scores, &l, groups);
            (w, c, l)
        })
        .min_by(|a, b| a.0.total_cmp(&b.0));
    match best {
        Some((_, c, l)) => Ok(finish(scores, &c, l)),
        None => Ok(finish(scores, &vec![0.0; groups], quantile_labels(scores, groups))),
    }
}

/// Group of every target token, keyed by instance and 1-based position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupAssignment {
    pub num_groups: usize,
    pub method: GroupingMethod,
    pub centroids: Vec<f64>,
    pub members: BTreeMap<usize, Vec<usize>>,
}

impl GroupAssignment {
    pub fn group_of(&self, instance_id: usize, t: usize) -> Option<usize> {
        self.members.get(&instance_id)?.get(t.checked_sub(1)?).copied()
    }

    /// Groups for the target tokens of one instance, in order.
    pub fn groups_for(&self, instance: &PromptInstance) -> Result<&[usize]> {
        match self.members.get(&instance.instance_id) {
            Some(g) if g.len() == instance.target_tokens.len() => Ok(g),
            _ => Err(GdrtError::MissingGroup(instance.instance_id)),
        }
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.num_groups];
        for gs in self.members.values() {
            for &g in gs {
                sizes[g] += 1;
            }
        }
        sizes
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        io::read_json(path)
    }
}

pub fn partition_tokens(
    scores: &[TokenRelevance],
    groups: usize,
    method: GroupingMethod,
    seed: u64,
) -> Result<GroupAssignment> {
    let values: Vec<f64> = scores.iter().map(|s| s.score).collect();
    let partition = partition_scores(&values, groups, method, seed)?;
    let mut members: BTreeMap<usize, Vec<(usize, usize)>> = BTreeMap::new();
    for (s, &g) in scores.iter().zip(&partition.labels) {
        members.entry(s.instance_id).or_default().push((s.t, g));
    }
    let members = members
        .into_iter()
        .map(|(id, mut tg)| {
            tg.sort();
            if tg.iter().enumerate().any(|(k, (t, _))| *t != k + 1) {
                return Err(GdrtError::InvalidConfig(format!(
                    "instance {id} has non-contiguous or duplicate token positions"
                )));
            }
            Ok((id, tg.into_iter().map(|(_, g)| g).collect()))
        })
        .collect::<Result<_>>()?;
    Ok(GroupAssignment {
        num_groups: groups,
        method,
        centroids: partition.centroids,
        members,
    })
}

/// Item → group (0 = most relevant) by equal-count bins over descending
/// score, ties broken by item id; remainder items go to the earlier groups.
pub fn partition_items(scores: &[ItemRelevance], groups: usize) -> Result<Vec<usize>> {
    if groups == 0 {
        return Err(GdrtError::InvalidConfig(
            "number of item groups must be at least 1".into(),
        ));
    }
    if scores.len() < groups {
        return Err(GdrtError::TooManyGroups {
            groups,
            distinct: scores.len(),
        });
    }
    let max_id = scores.iter().map(|s| s.item_id).max().unwrap_or(0);
    let mut order: Vec<&ItemRelevance> = scores.iter().collect();
    order.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.item_id.cmp(&b.item_id)));
    let mut out = vec![usize::MAX; max_id + 1];
    let mut cursor = 0;
    for (g, size) in equal_sizes(scores.len(), groups).into_iter().enumerate() {
        for s in &order[cursor..cursor + size] {
            out[s.item_id] = g;
        }
        cursor += size;
    }
    if out.contains(&usize::MAX) {
        return Err(GdrtError::InvalidConfig("item ids must be 0..n without gaps".into()));
    }
    Ok(out)
}

pub fn write_scores(path: &Path, scores: &[TokenRelevance]) -> Result<()> {
    io::write_jsonl(path, scores)
}

pub fn read_scores(path: &Path) -> Result<Vec<TokenRelevance>> {
    io::read_jsonl(path)
}

/// Mean teacher-forced NLL of the tokens in each group, on full prompts.
pub fn group_loss_profile(
    params: &ModelParams,
    instances: &[PromptInstance],
    assignment: &GroupAssignment,
) -> Result<Vec<f64>> {
    let per: Vec<Vec<(usize, f64)>> = instances
        .par_iter()
        .map(|inst| {
            let groups = assignment.groups_for(inst)?;
            Ok(nll_per_token(params, inst)?
                .into_iter()
                .zip(groups)
                .map(|(n, &g)| (g, n.nll))
                .collect())
        })
        .collect::<Result<_>>()?;
    let mut sum = vec![0.0; assignment.num_groups];
    let mut count = vec![0usize; assignment.num_groups];
    for (g, nll) in per.into_iter().flatten() {
        sum[g] += nll;
        count[g] += 1;
    }
    Ok(sum
        .iter()
        .zip(&count)
        .map(|(s, &c)| if c > 0 { s / c as f64 } else { f64::NAN })
        .collect())
}
