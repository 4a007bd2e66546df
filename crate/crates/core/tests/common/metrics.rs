//! Independent reimplementation of the ranking and exposure metrics and a
//! fixed set of cases to compare against.

use gdrt::corpus::PromptInstance;
use gdrt::decode::Recommendation;
use gdrt::eval::evaluate;

pub struct Case {
    pub item_groups: Vec<usize>,
    pub groups: usize,
    /// (history items, target, ranked recommendations)
    pub users: Vec<(Vec<usize>, usize, Vec<usize>)>,
}

pub fn instance(id: usize, history: &[usize], target: usize) -> PromptInstance {
    PromptInstance {
        instance_id: id,
        task_tokens: vec![4],
        history_tokens: vec![5; history.len()],
        history_items: history.to_vec(),
        target_item: target,
        target_tokens: vec![6],
        shortcut: false,
    }
}

pub struct Brute {
    pub ndcg: f64,
    pub hit: f64,
    pub mgu: f64,
    pub dgu: f64,
}

pub fn brute(case: &Case, k: usize) -> Brute {
    let n = case.users.len() as f64;
    let mut ndcg = 0.0;
    let mut hit = 0.0;
    for (_, target, recs) in &case.users {
        for (rank, item) in recs.iter().enumerate() {
            if rank < k && item == target {
                hit += 1.0;
                ndcg += (2.0f64).ln() / ((rank + 2) as f64).ln();
            }
        }
    }
    let mut rec_counts = vec![0.0; case.groups];
    let mut hist_counts = vec![0.0; case.groups];
    for (hist, _, recs) in &case.users {
        for item in recs.iter().take(k) {
            rec_counts[case.item_groups[*item]] += 1.0;
        }
        for item in hist {
            hist_counts[case.item_groups[*item]] += 1.0;
        }
    }
    let rt: f64 = rec_counts.iter().sum();
    let ht: f64 = hist_counts.iter().sum();
    let disc: Vec<f64> = (0..case.groups)
        .map(|g| rec_counts[g] / rt - hist_counts[g] / ht)
        .collect();
    let mut mgu = 0.0;
    for d in &disc {
        mgu += if *d < 0.0 { -d } else { *d };
    }
    mgu /= case.groups as f64;
    let mut sorted = disc.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Brute {
        ndcg: ndcg / n,
        hit: hit / n,
        mgu,
        dgu: sorted[sorted.len() - 1] - sorted[0],
    }
}

fn lcg(state: &mut u64) -> usize {
    *state = state
        .wrapping_mul(6364136223846793005)
        .wrapping_add(1442695040888963407);
    (*state >> 33) as usize
}

pub fn cases() -> Vec<Case> {
    let mut out = vec![
        // target at rank 1, rank 3, and missing
        Case {
            item_groups: vec![0, 0, 1, 1, 2, 2],
            groups: 3,
            users: vec![
                (vec![0, 2, 4], 1, vec![1, 3, 5]),
                (vec![1, 3], 4, vec![0, 2, 4]),
                (vec![5], 0, vec![2, 3, 4]),
            ],
        },
        // recommendations match the history mix exactly
        Case {
            item_groups: vec![0, 1],
            groups: 2,
            users: vec![(vec![0, 1], 0, vec![0, 1]), (vec![1, 0], 1, vec![1, 0])],
        },
        // a single group receives everything
        Case {
            item_groups: vec![0, 1, 1, 2],
            groups: 3,
            users: vec![(vec![1, 2, 3], 3, vec![0]), (vec![3], 0, vec![0])],
        },
    ];
    let mut s = 0x5eed_u64;
    while out.len() < 19 {
        let groups = 2 + lcg(&mut s) % 4;
        let items = groups + 3 + lcg(&mut s) % 10;
        let item_groups: Vec<usize> = (0..items)
            .map(|i| if i < groups { i } else { lcg(&mut s) % groups })
            .collect();
        let users = (0..1 + lcg(&mut s) % 6)
            .map(|_| {
                let hist: Vec<usize> = (0..1 + lcg(&mut s) % 5).map(|_| lcg(&mut s) % items).collect();
                let target = lcg(&mut s) % items;
                let mut pool: Vec<usize> = (0..items).collect();
                let mut recs = Vec::new();
                for _ in 0..(1 + lcg(&mut s) % 10).min(items) {
                    recs.push(pool.swap_remove(lcg(&mut s) % pool.len()));
                }
                (hist, target, recs)
            })
            .collect();
        out.push(Case {
            item_groups,
            groups,
            users,
        });
    }
    out
}

/// Largest disagreement between the library and the brute force over all
/// cases and cutoffs.
pub fn worst_metric_gap() -> f64 {
    let mut worst: f64 = 0.0;
    for case in &cases() {
        let instances: Vec<_> = case
            .users
            .iter()
            .enumerate()
            .map(|(i, (h, t, _))| instance(i, h, *t))
            .collect();
        let recs: Vec<_> = case
            .users
            .iter()
            .enumerate()
            .map(|(i, (_, _, r))| Recommendation {
                instance_id: i,
                items: r.clone(),
                scores: vec![0.0; r.len()],
            })
            .collect();
        let ks = [1, 3, 5, 10];
        let report = evaluate(&recs, &instances, &case.item_groups, case.groups, &ks).unwrap();
        for k in ks {
            let b = brute(case, k);
            for (a, e) in [
                (report.ndcg[&k], b.ndcg),
                (report.hit[&k], b.hit),
                (report.mgu[&k], b.mgu),
                (report.dgu[&k], b.dgu),
            ] {
                worst = worst.max((a - e).abs());
            }
        }
    }
    worst
}
