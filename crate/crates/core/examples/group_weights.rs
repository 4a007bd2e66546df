//! Closed-form group weights against the numeric worst-case oracle.
//!
//! cargo run --release --example group_weights

use gdrt::dro::{
    compute_group_weights, kl_to_uniform, maximize_lagrangian, oracle_constrained_worst_case, verify_lemma,
    DroOracleProblem,
};

fn main() -> gdrt::Result<()> {
    let losses = [1.0, 2.0, 0.5, 3.0];
    for tau in [0.1, 0.5, 1.0, 10.0] {
        let q = compute_group_weights(&losses, tau)?;
        let oracle = maximize_lagrangian(&losses, tau)?;
        let gap = q
            .iter()
            .zip(&oracle.weights)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        println!(
            "tau {tau:>4}: Q = {:?}  KL(Q,U) = {:.4}  |Q - oracle| = {gap:.1e}",
            q.iter().map(|x| (x * 1e4).round() / 1e4).collect::<Vec<_>>(),
            kl_to_uniform(&q)?
        );
    }

    // the KL-ball form: the temperature that makes the ball constraint active
    let worst = oracle_constrained_worst_case(&DroOracleProblem {
        losses: losses.to_vec(),
        tau: 1.0,
        eta: 0.2,
    })?;
    println!(
        "KL <= 0.2 worst case: active tau {:?}, weights {:?}",
        worst.active_tau,
        worst
            .constrained
            .weights
            .iter()
            .map(|x| (x * 1e4).round() / 1e4)
            .collect::<Vec<_>>()
    );
    println!(
        "fixed-tau Lagrangian vs closed form: {:.1e}",
        worst.closed_form_residual
    );

    let report = verify_lemma(200, 1e-6, 42)?;
    println!(
        "{} random problems: max residual {:.2e}, {} violations",
        report.trials, report.max_residual, report.violations
    );
    Ok(())
}
