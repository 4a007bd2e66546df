//! Accuracy and group-exposure metrics over ranked recommendations.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::PromptInstance;
use crate::decode::Recommendation;
use crate::error::{GdrtError, Result};

/// Mean NDCG@K and HIT@K with a single relevant item per instance. An
/// instance without a recommendation list counts as a miss.
pub fn ndcg_hit(recs: &[Recommendation], targets: &HashMap<usize, usize>, k: usize) -> Result<(f64, f64)> {
    if targets.is_empty() {
        return Err(GdrtError::EmptyInput("evaluation targets".into()));
    }
    let by_id: HashMap<usize, &Recommendation> = recs.iter().map(|r| (r.instance_id, r)).collect();
    let (mut ndcg, mut hit) = (0.0, 0.0);
    let mut ids: Vec<&usize> = targets.keys().collect();
    ids.sort();
    for id in ids {
        let target = targets[id];
        let Some(rec) = by_id.get(id) else { continue };
        if let Some(rank) = rec.items.iter().take(k).position(|&i| i == target) {
            hit += 1.0;
            ndcg += 1.0 / ((rank + 2) as f64).log2();
        }
    }
    let n = targets.len() as f64;
    Ok((ndcg / n, hit / n))
}

pub fn targets_of(instances: &[PromptInstance]) -> HashMap<usize, usize> {
    instances.iter().map(|i| (i.instance_id, i.target_item)).collect()
}

fn group_of(item_groups: &[usize], item: usize) -> Result<usize> {
    item_groups
        .get(item)
        .copied()
        .ok_or_else(|| GdrtError::InvalidConfig(format!("item {item} has no group")))
}

/// Share of each item group among the evaluated users' history items.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryDistribution {
    pub shares: Vec<f64>,
}

impl HistoryDistribution {
    pub fn from_instances(instances: &[PromptInstance], item_groups: &[usize], groups: usize) -> Result<Self> {
        let mut counts = vec![0usize; groups];
        for inst in instances {
            for &item in &inst.history_items {
                counts[group_of(item_groups, item)?] += 1;
            }
        }
        Ok(HistoryDistribution {
            shares: normalize(&counts)?,
        })
    }
}

fn normalize(counts: &[usize]) -> Result<Vec<f64>> {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(GdrtError::EmptyInput("group counts".into()));
    }
    Ok(counts.iter().map(|&c| c as f64 / total as f64).collect())
}

/// Share of each group among all top-K slots, pooled across instances.
pub fn recommendation_shares(
    recs: &[Recommendation],
    item_groups: &[usize],
    groups: usize,
    k: usize,
) -> Result<Vec<f64>> {
    let mut counts = vec![0usize; groups];
    for r in recs {
        for &item in r.items.iter().take(k) {
            counts[group_of(item_groups, item)?] += 1;
        }
    }
    normalize(&counts)
}

/// Share of each group among the instances' target items.
pub fn target_shares(instances: &[PromptInstance], item_groups: &[usize], groups: usize) -> Result<Vec<f64>> {
    let mut counts = vec![0usize; groups];
    for inst in instances {
        counts[group_of(item_groups, inst.target_item)?] += 1;
    }
    normalize(&counts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fairness {
    pub mgu: f64,
    pub dgu: f64,
    pub rec_shares: Vec<f64>,
    /// `rec_shares - history shares`, per group.
    pub discrepancy: Vec<f64>,
}

/// MGU is the mean absolute discrepancy, DGU the spread (max - min) of the
/// signed discrepancies.
pub fn fairness_from_shares(rec_shares: &[f64], history: &HistoryDistribution) -> Result<Fairness> {
    if rec_shares.len() != history.shares.len() || rec_shares.is_empty() {
        return Err(GdrtError::ShapeMismatch(format!(
            "{} recommendation groups vs {} history groups",
            rec_shares.len(),
            history.shares.len()
        )));
    }
    let discrepancy: Vec<f64> = rec_shares.iter().zip(&history.shares).map(|(r, h)| r - h).collect();
    let mgu = discrepancy.iter().map(|d| d.abs()).sum::<f64>() / discrepancy.len() as f64;
    let max = discrepancy.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = discrepancy.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(Fairness {
        mgu,
        dgu: max - min,
        rec_shares: rec_shares.to_vec(),
        discrepancy,
    })
}

pub fn fairness(
    recs: &[Recommendation],
    item_groups: &[usize],
    history: &HistoryDistribution,
    k: usize,
) -> Result<Fairness> {
    let shares = recommendation_shares(recs, item_groups, history.shares.len(), k)?;
    fairness_from_shares(&shares, history)
}

/// Fraction of instances whose top-1 item is in `group`.
pub fn top1_share(recs: &[Recommendation], item_groups: &[usize], group: usize) -> Result<f64> {
    if recs.is_empty() {
        return Err(GdrtError::EmptyInput("recommendations".into()));
    }
    let mut hits = 0;
    for r in recs {
        if let Some(&top) = r.items.first() {
            if group_of(item_groups, top)? == group {
                hits += 1;
            }
        }
    }
    Ok(hits as f64 / recs.len() as f64)
}

/// Top-1 share of the most relevant item group for each epoch's
/// recommendations.
pub fn group_distribution_curve(per_epoch: &[Vec<Recommendation>], item_groups: &[usize]) -> Result<Vec<f64>> {
    per_epoch.iter().map(|recs| top1_share(recs, item_groups, 0)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub ndcg: BTreeMap<usize, f64>,
    pub hit: BTreeMap<usize, f64>,
    pub mgu: BTreeMap<usize, f64>,
    pub dgu: BTreeMap<usize, f64>,
    pub discrepancy: BTreeMap<usize, Vec<f64>>,
    /// Item-group shares of the top-1 recommendations.
    pub group_rec_share: Vec<f64>,
    /// Item-group shares of the gold targets.
    pub group_test_share: Vec<f64>,
    pub history_share: Vec<f64>,
    #[serde(default)]
    pub top1_group1_share_curve: Vec<f64>,
}

pub fn evaluate(
    recs: &[Recommendation],
    instances: &[PromptInstance],
    item_groups: &[usize],
    groups: usize,
    ks: &[usize],
) -> Result<MetricsReport> {
    let targets = targets_of(instances);
    let history = HistoryDistribution::from_instances(instances, item_groups, groups)?;
    let mut report = MetricsReport {
        ndcg: BTreeMap::new(),
        hit: BTreeMap::new(),
        mgu: BTreeMap::new(),
        dgu: BTreeMap::new(),
        discrepancy: BTreeMap::new(),
        group_rec_share: recommendation_shares(recs, item_groups, groups, 1)?,
        group_test_share: target_shares(instances, item_groups, groups)?,
        history_share: history.shares.clone(),
        top1_group1_share_curve: Vec::new(),
    };
    for &k in ks {
        let (n, h) = ndcg_hit(recs, &targets, k)?;
        let f = fairness(recs, item_groups, &history, k)?;
        report.ndcg.insert(k, n);
        report.hit.insert(k, h);
        report.mgu.insert(k, f.mgu);
        report.dgu.insert(k, f.dgu);
        report.discrepancy.insert(k, f.discrepancy);
    }
    Ok(report)
}

/// `group,rec_share,test_share,history_share` rows, group numbered from 1.
pub fn group_shares_csv(report: &MetricsReport) -> String {
    let mut out = String::from("group,rec_share,test_share,history_share\n");
    for g in 0..report.group_rec_share.len() {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            g + 1,
            report.group_rec_share[g],
            report.group_test_share[g],
            report.history_share[g]
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: usize, items: &[usize]) -> Recommendation {
        Recommendation {
            instance_id: id,
            items: items.to_vec(),
            scores: (0..items.len()).map(|i| -(i as f64)).collect(),
        }
    }

    #[test]
    fn ndcg_by_rank() {
        let targets: HashMap<usize, usize> = [(0, 7)].into_iter().collect();
        assert_eq!(ndcg_hit(&[rec(0, &[7, 1, 2])], &targets, 5).unwrap(), (1.0, 1.0));
        let (n, h) = ndcg_hit(&[rec(0, &[1, 2, 7])], &targets, 5).unwrap();
        assert!((n - 0.5).abs() < 1e-15 && h == 1.0);
        assert_eq!(
            ndcg_hit(&[rec(0, &[1, 2, 3, 4, 5, 7])], &targets, 5).unwrap(),
            (0.0, 0.0)
        );
        assert_eq!(ndcg_hit(&[rec(0, &[])], &targets, 5).unwrap(), (0.0, 0.0));
        assert_eq!(ndcg_hit(&[], &targets, 5).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn fairness_worked_example() {
        let hist = HistoryDistribution { shares: vec![0.2; 5] };
        let f = fairness_from_shares(&[0.8, 0.05, 0.05, 0.05, 0.05], &hist).unwrap();
        assert!((f.mgu - 0.24).abs() < 1e-12);
        assert!((f.dgu - 0.75).abs() < 1e-12);
        let aligned = fairness_from_shares(&[0.2; 5], &hist).unwrap();
        assert_eq!((aligned.mgu, aligned.dgu), (0.0, 0.0));
    }

    #[test]
    fn fairness_label_permutation() {
        let hist = HistoryDistribution {
            shares: vec![0.1, 0.3, 0.2, 0.25, 0.15],
        };
        let rec_s = [0.4, 0.1, 0.2, 0.2, 0.1];
        let a = fairness_from_shares(&rec_s, &hist).unwrap();
        let perm = [3, 0, 4, 1, 2];
        let hist_p = HistoryDistribution {
            shares: perm.iter().map(|&i| hist.shares[i]).collect(),
        };
        let rec_p: Vec<f64> = perm.iter().map(|&i| rec_s[i]).collect();
        let b = fairness_from_shares(&rec_p, &hist_p).unwrap();
        assert!((a.mgu - b.mgu).abs() < 1e-15 && (a.dgu - b.dgu).abs() < 1e-15);
    }

    #[test]
    fn slot_level_shares_and_curve() {
        let groups = vec![0, 0, 1, 1, 2];
        let recs = vec![rec(0, &[0, 2]), rec(1, &[4, 1])];
        assert_eq!(
            recommendation_shares(&recs, &groups, 3, 2).unwrap(),
            vec![0.5, 0.25, 0.25]
        );
        assert_eq!(top1_share(&recs, &groups, 0).unwrap(), 0.5);
        let all_g1 = vec![rec(0, &[1]), rec(1, &[0])];
        assert_eq!(
            group_distribution_curve(&[recs, all_g1], &groups).unwrap(),
            vec![0.5, 1.0]
        );
        assert!(recommendation_shares(&[rec(0, &[9])], &groups, 3, 1).is_err());
    }
}
