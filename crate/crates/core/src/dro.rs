//! Group weights for the KL-constrained worst case over token groups.
//!
//! The adversary picks `Q` on the simplex to maximise `sum_g Q(g) L(g)`
//! while staying within a KL ball of radius `eta` around uniform. With the
//! Lagrange multiplier `tau` exposed as the hyperparameter, the maximiser is
//! `Q(g) ∝ exp(L(g) / tau)`. The numeric oracles below solve the same
//! problems without using that formula, so the closed form can be checked.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GdrtError, Result};

fn check_losses(losses: &[f64]) -> Result<()> {
    if losses.is_empty() {
        return Err(GdrtError::EmptyInput("group losses".into()));
    }
    if losses.iter().any(|l| !l.is_finite()) {
        return Err(GdrtError::NonFinite {
            layer: "group losses".into(),
        });
    }
    Ok(())
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(GdrtError::InvalidConfig(format!("tau must be positive, got {tau}")))
    }
}

/// `Q(g) = exp(L(g)/tau) / sum_g' exp(L(g')/tau)`, shifted by the max.
pub fn compute_group_weights(losses: &[f64], tau: f64) -> Result<Vec<f64>> {
    check_losses(losses)?;
    check_tau(tau)?;
    let max = losses.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = losses.iter().map(|l| ((l - max) / tau).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

pub fn gdrt_loss(losses: &[f64], weights: &[f64]) -> Result<f64> {
    if losses.len() != weights.len() {
        return Err(GdrtError::ShapeMismatch(format!(
            "{} group losses vs {} weights",
            losses.len(),
            weights.len()
        )));
    }
    Ok(losses.iter().zip(weights).map(|(l, q)| l * q).sum())
}

/// `sum_g Q(g) ln(Q(g) * G)` with `0 ln 0 = 0`.
pub fn kl_to_uniform(weights: &[f64]) -> Result<f64> {
    if weights.is_empty() {
        return Err(GdrtError::EmptyInput("weights".into()));
    }
    if let Some(q) = weights.iter().find(|q| **q < 0.0 || !q.is_finite()) {
        return Err(GdrtError::InvalidConfig(format!("weight {q} is not a probability")));
    }
    let g = weights.len() as f64;
    Ok(weights.iter().filter(|&&q| q > 0.0).map(|&q| q * (q * g).ln()).sum())
}

/// KL radius at which the constrained worst case coincides with the
/// fixed-`tau` solution.
pub fn tau_eta_consistency(losses: &[f64], tau: f64) -> Result<f64> {
    kl_to_uniform(&compute_group_weights(losses, tau)?)
}

/// Per-group EMA losses and the weights derived from them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupWeightState {
    pub ema_losses: Vec<f64>,
    pub weights: Vec<f64>,
    pub tau: f64,
    pub ema_beta: f64,
}

impl GroupWeightState {
    pub fn new(initial_losses: Vec<f64>, tau: f64, ema_beta: f64) -> Result<Self> {
        if !(ema_beta > 0.0 && ema_beta <= 1.0) {
            return Err(GdrtError::InvalidConfig(format!("ema_beta {ema_beta} not in (0,1]")));
        }
        let weights = compute_group_weights(&initial_losses, tau)?;
        Ok(GroupWeightState {
            ema_losses: initial_losses,
            weights,
            tau,
            ema_beta,
        })
    }

    pub fn num_groups(&self) -> usize {
        self.ema_losses.len()
    }

    /// Folds this batch's per-group mean losses into the EMA; groups with no
    /// tokens in the batch keep their previous value.
    pub fn observe(&mut self, batch_means: &[Option<f64>]) -> Result<()> {
        if batch_means.len() != self.ema_losses.len() {
            return Err(GdrtError::ShapeMismatch(format!(
                "{} batch groups vs {} tracked",
                batch_means.len(),
                self.ema_losses.len()
            )));
        }
        let beta = self.ema_beta;
        for (ema, batch) in self.ema_losses.iter_mut().zip(batch_means) {
            if let Some(b) = batch {
                *ema = (1.0 - beta) * *ema + beta * b;
            }
        }
        self.weights = compute_group_weights(&self.ema_losses, self.tau)?;
        Ok(())
    }

    /// Overwrites the tracked losses with exact values.
    pub fn reset(&mut self, losses: Vec<f64>) -> Result<()> {
        self.weights = compute_group_weights(&losses, self.tau)?;
        self.ema_losses = losses;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DroOracleProblem {
    pub losses: Vec<f64>,
    pub tau: f64,
    /// KL radius, only used by the constrained oracle.
    pub eta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleSolution {
    pub weights: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
}

const ORACLE_MAX_ITERS: usize = 100_000;

/// Optimality residual of `sum Q L - tau KL(Q,U)` at `q`. Each coordinate's
/// partial derivative `g_k` is compared with the mass-weighted mean; the
/// residual `q_k |exp((g_k - mean)/tau) - 1|` is the size of the correction
/// that coordinate still needs. Returns the largest residual and the
/// coordinates that most need to gain and to lose mass.
fn lagrangian_residual(losses: &[f64], q: &[f64], tau: f64) -> (f64, usize, usize) {
    let g = q.len() as f64;
    let grads: Vec<f64> = losses
        .iter()
        .zip(q)
        .map(|(l, &qi)| l - tau * ((qi * g).ln() + 1.0))
        .collect();
    let mean: f64 = grads.iter().zip(q).map(|(gk, qk)| gk * qk).sum();
    let (mut worst, mut gain, mut lose) = (0.0, None::<(usize, f64)>, None::<(usize, f64)>);
    for k in 0..q.len() {
        let r = q[k] * (((grads[k] - mean) / tau).min(700.0).exp() - 1.0).abs();
        worst = f64::max(worst, r);
        let slot = if grads[k] > mean { &mut gain } else { &mut lose };
        if slot.is_none_or(|(_, best)| r > best) {
            *slot = Some((k, r));
        }
    }
    match (gain, lose) {
        (Some((hi, _)), Some((lo, _))) => (worst, hi, lo),
        _ => (0.0, 0, 0),
    }
}

/// Maximises `sum_g Q(g) L(g) - tau * KL(Q, U)` over the simplex by
/// pairwise mass transfer: repeatedly take the coordinates with the largest
/// and smallest partial derivative and move mass between them until the
/// one-dimensional derivative vanishes (found by bisection).
pub fn maximize_lagrangian(losses: &[f64], tau: f64) -> Result<OracleSolution> {
    check_losses(losses)?;
    check_tau(tau)?;
    let n = losses.len();
    let mut q = vec![1.0 / n as f64; n];
    if n == 1 {
        return Ok(OracleSolution {
            objective: losses[0],
            weights: q,
            iterations: 0,
        });
    }
    for iter in 0..ORACLE_MAX_ITERS {
        let (residual, hi, lo) = lagrangian_residual(losses, &q, tau);
        if residual <= 1e-13 || hi == lo {
            return Ok(OracleSolution {
                objective: gdrt_loss(losses, &q)? - tau * kl_to_uniform(&q)?,
                weights: q,
                iterations: iter,
            });
        }
        // Move delta from `lo` to `hi`; d/d(delta) of the objective is
        // (L_hi - L_lo) - tau * (ln(q_hi + delta) - ln(q_lo - delta)),
        // strictly decreasing on (-q_hi, q_lo) and positive at 0.
        let (qh, ql) = (q[hi], q[lo]);
        let deriv = |delta: f64| (losses[hi] - losses[lo]) - tau * ((qh + delta).ln() - (ql - delta).ln());
        let (mut a, mut b) = (0.0, ql);
        for _ in 0..200 {
            let mid = 0.5 * (a + b);
            if mid <= a || mid >= b {
                break;
            }
            if deriv(mid) > 0.0 {
                a = mid;
            } else {
                b = mid;
            }
        }
        let delta = 0.5 * (a + b);
        if qh + delta == qh && ql - delta == ql {
            // no representable transfer left
            return Ok(OracleSolution {
                objective: gdrt_loss(losses, &q)? - tau * kl_to_uniform(&q)?,
                weights: q,
                iterations: iter,
            });
        }
        q[hi] = qh + delta;
        q[lo] = ql - delta;
        if q[lo] <= 0.0 {
            q[lo] = f64::MIN_POSITIVE;
        }
    }
    let (residual, _, _) = lagrangian_residual(losses, &q, tau);
    Err(GdrtError::NoConvergence {
        iterations: ORACLE_MAX_ITERS,
        residual,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorstCase {
    /// Maximiser of `sum Q L` subject to `KL(Q,U) <= eta`.
    pub constrained: OracleSolution,
    /// Multiplier at which the constraint is active, if it is.
    pub active_tau: Option<f64>,
    /// Maximiser of the fixed-`tau` Lagrangian.
    pub lagrangian: OracleSolution,
    /// Infinity-norm distance between the Lagrangian maximiser and the
    /// closed-form weights.
    pub closed_form_residual: f64,
}

/// Numeric solution of both the KL-constrained worst case (bisection on the
/// multiplier, with the Lagrangian solved numerically at each candidate)
/// and the fixed-`tau` Lagrangian form.
pub fn oracle_constrained_worst_case(problem: &DroOracleProblem) -> Result<WorstCase> {
    let losses = &problem.losses;
    check_losses(losses)?;
    if losses.len() > 12 {
        return Err(GdrtError::InvalidConfig(format!(
            "oracle supports at most 12 groups, got {}",
            losses.len()
        )));
    }
    if !(problem.eta >= 0.0) {
        return Err(GdrtError::InvalidConfig(format!(
            "eta must be non-negative, got {}",
            problem.eta
        )));
    }
    let lagrangian = maximize_lagrangian(losses, problem.tau)?;
    let closed = compute_group_weights(losses, problem.tau)?;
    let closed_form_residual = closed
        .iter()
        .zip(&lagrangian.weights)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);

    let n = losses.len();
    let max = losses.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let argmax: Vec<usize> = (0..n).filter(|&k| losses[k] == max).collect();
    // Spreading mass evenly over all maximisers is the best vertex-face
    // point; its KL is ln(G / #maximisers).
    let face_kl = (n as f64 / argmax.len() as f64).ln();
    let (constrained, active_tau) = if problem.eta >= face_kl {
        let mut w = vec![0.0; n];
        for &k in &argmax {
            w[k] = 1.0 / argmax.len() as f64;
        }
        (
            OracleSolution {
                objective: max,
                weights: w,
                iterations: 0,
            },
            None,
        )
    } else if problem.eta == 0.0 {
        let w = vec![1.0 / n as f64; n];
        (
            OracleSolution {
                objective: losses.iter().sum::<f64>() / n as f64,
                weights: w,
                iterations: 0,
            },
            None,
        )
    } else {
        // KL of the Lagrangian maximiser decreases in tau; bisect ln(tau)
        // until the constraint is tight.
        let kl_at = |tau: f64| -> Result<(f64, OracleSolution)> {
            let sol = maximize_lagrangian(losses, tau)?;
            Ok((kl_to_uniform(&sol.weights)?, sol))
        };
        let spread = (max - losses.iter().cloned().fold(f64::INFINITY, f64::min)).max(1e-12);
        let (mut lo, mut hi) = (spread.ln(), (spread * 1e6).ln());
        let mut iterations = 0;
        while kl_at(lo.exp())?.0 < problem.eta && iterations < 60 {
            lo -= 1.0;
            iterations += 1;
        }
        let mut best = kl_at(hi.exp())?.1;
        for _ in 0..100 {
            iterations += 1;
            let mid = 0.5 * (lo + hi);
            let (kl, sol) = kl_at(mid.exp())?;
            if kl > problem.eta {
                lo = mid;
            } else {
                hi = mid;
                best = sol;
            }
            if hi - lo < 1e-12 {
                break;
            }
        }
        let objective = gdrt_loss(losses, &best.weights)?;
        (
            OracleSolution {
                objective,
                weights: best.weights,
                iterations,
            },
            Some(hi.exp()),
        )
    };

    Ok(WorstCase {
        constrained,
        active_tau,
        lagrangian,
        closed_form_residual,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LemmaTrial {
    pub groups: usize,
    pub tau: f64,
    pub losses: Vec<f64>,
    pub residual: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LemmaReport {
    pub trials: usize,
    pub tolerance: f64,
    pub max_residual: f64,
    pub violations: usize,
    pub results: Vec<LemmaTrial>,
}

impl LemmaReport {
    pub fn passed(&self) -> bool {
        self.violations == 0
    }
}

/// Random problems with `G ∈ {2..10}`, losses `~ U[0,5]` and
/// `tau ∈ {0.1, 0.3, 1, 3}`: closed-form weights against the numeric
/// Lagrangian maximiser.
pub fn verify_lemma(trials: usize, tolerance: f64, seed: u64) -> Result<LemmaReport> {
    const TAUS: [f64; 4] = [0.1, 0.3, 1.0, 3.0];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut results = Vec::with_capacity(trials);
    for _ in 0..trials {
        let groups = rng.random_range(2..=10);
        let tau = TAUS[rng.random_range(0..TAUS.len())];
        let losses: Vec<f64> = (0..groups).map(|_| rng.random_range(0.0..5.0)).collect();
        let numeric = maximize_lagrangian(&losses, tau)?;
        let closed = compute_group_weights(&losses, tau)?;
        let residual = closed
            .iter()
            .zip(&numeric.weights)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        results.push(LemmaTrial {
            groups,
            tau,
            losses,
            residual,
            iterations: numeric.iterations,
        });
    }
    let max_residual = results.iter().map(|r| r.residual).fold(0.0, f64::max);
    let violations = results.iter().filter(|r| !(r.residual <= tolerance)).count();
    Ok(LemmaReport {
        trials,
        tolerance,
        max_residual,
        violations,
        results,
    })
}
