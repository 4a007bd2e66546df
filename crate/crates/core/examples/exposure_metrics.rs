//! Accuracy and group-exposure metrics on hand-made recommendation lists.
//!
//! cargo run --release --example exposure_metrics

use gdrt::corpus::PromptInstance;
use gdrt::decode::Recommendation;
use gdrt::eval::{evaluate, fairness_from_shares, group_shares_csv, HistoryDistribution};

fn main() -> gdrt::Result<()> {
    let f = fairness_from_shares(
        &[0.8, 0.05, 0.05, 0.05, 0.05],
        &HistoryDistribution { shares: vec![0.2; 5] },
    )?;
    println!(
        "one group takes 80% of exposure against a uniform history: MGU {:.2}, DGU {:.2}",
        f.mgu, f.dgu
    );

    // ten items, two per group; three users
    let item_groups: Vec<usize> = (0..10).map(|i| i / 2).collect();
    let user = |id: usize, history: &[usize], target: usize| PromptInstance {
        instance_id: id,
        task_tokens: vec![4],
        history_tokens: vec![5; history.len()],
        history_items: history.to_vec(),
        target_item: target,
        target_tokens: vec![6],
        shortcut: false,
    };
    let users = [user(0, &[2, 4, 6], 0), user(1, &[8, 9], 3), user(2, &[1, 5], 7)];
    let recs = [
        Recommendation {
            instance_id: 0,
            items: vec![0, 1, 2, 3, 4],
            scores: vec![0.0; 5],
        },
        Recommendation {
            instance_id: 1,
            items: vec![0, 1, 3, 2, 5],
            scores: vec![0.0; 5],
        },
        Recommendation {
            instance_id: 2,
            items: vec![1, 0, 2, 4, 6],
            scores: vec![0.0; 5],
        },
    ];
    let report = evaluate(&recs, &users, &item_groups, 5, &[1, 5])?;
    for k in [1, 5] {
        println!(
            "@{k}: NDCG {:.4} HIT {:.4} MGU {:.4} DGU {:.4}",
            report.ndcg[&k], report.hit[&k], report.mgu[&k], report.dgu[&k]
        );
    }
    print!("{}", group_shares_csv(&report));
    Ok(())
}
