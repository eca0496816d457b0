//! Exact maximum-entropy solver and the quantities it labels data with.
//!
//! The solver iterates the soft Bellman backup
//! `V(s) <- alpha * log sum_a exp((r(s,a) + gamma * E[V(s')]) / alpha)`
//! to a sup-norm fixed point, then derives `Q*`, `A* = Q* - V*`, and
//! `pi* = exp(A*/alpha)`. Because `V*` is recomputed from the final `Q*`
//! via one more log-sum-exp, `sum_a exp(A*(s,a)/alpha) = 1` holds to
//! machine precision at every state.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{check_policy, Segment, TabularMDP};
use crate::numerics::{logsumexp, KahanSum};
use crate::table::Table;

/// Default solver tolerance.
pub const DEFAULT_TOL: f64 = 1e-10;
/// Default solver iteration budget.
pub const DEFAULT_MAX_ITERS: usize = 1_000_000;

/// Solution bundle from soft value iteration.
#[derive(Debug, Clone)]
pub struct SoftSolution {
    pub q_star: Table,
    pub v_star: Vec<f64>,
    pub a_star: Table,
    pub pi_star: Table,
    pub alpha: f64,
    /// Final sup-norm change of the value iterate.
    pub residual: f64,
}

impl SoftSolution {
    /// Serializes the compact wire form (q_star, v_star, alpha, residual).
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&SolutionFile {
            q_star: self.q_star.clone(),
            v_star: self.v_star.clone(),
            alpha: self.alpha,
            residual: self.residual,
        })?)
    }

    /// Reloads the wire form, reconstructing `a_star`/`pi_star` and
    /// re-verifying the normalization condition.
    pub fn from_json(s: &str) -> Result<Self> {
        let file: SolutionFile = serde_json::from_str(s)?;
        if file.alpha <= 0.0 {
            return Err(Error::Parameter(format!("alpha {} must be positive", file.alpha)));
        }
        if file.q_star.rows() != file.v_star.len() {
            return Err(Error::Parameter("q_star/v_star shape mismatch".into()));
        }
        let a_star = Table::from_fn(file.q_star.rows(), file.q_star.cols(), |s, a| {
            file.q_star.get(s, a) - file.v_star[s]
        });
        let report = verify_consistency(&a_star, file.alpha, 1e-6);
        if !report.passed {
            return Err(Error::Consistency(format!(
                "loaded advantage table violates normalization (max error {:.3e})",
                report.max_error
            )));
        }
        let pi_star = policy_from_advantage(&a_star, file.alpha)?;
        Ok(SoftSolution {
            q_star: file.q_star,
            v_star: file.v_star,
            a_star,
            pi_star,
            alpha: file.alpha,
            residual: file.residual,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct SolutionFile {
    q_star: Table,
    v_star: Vec<f64>,
    alpha: f64,
    residual: f64,
}

/// Per-state normalization errors `|sum_a exp(A(s,a)/alpha) - 1|`.
#[derive(Debug, Clone)]
pub struct ConsistencyReport {
    pub per_state: Vec<f64>,
    pub max_error: f64,
    pub tol: f64,
    pub passed: bool,
}

/// Measures how far an advantage table is from being the optimal soft
/// advantage of *some* reward, i.e. from `sum_a exp(A/alpha) = 1`.
pub fn verify_consistency(advantage: &Table, alpha: f64, tol: f64) -> ConsistencyReport {
    let per_state: Vec<f64> = (0..advantage.rows())
        .map(|s| {
            let sum: f64 = advantage.row(s).iter().map(|&a| (a / alpha).exp()).sum();
            (sum - 1.0).abs()
        })
        .collect();
    let max_error = per_state.iter().fold(0.0_f64, |m, &e| m.max(e));
    ConsistencyReport { per_state, max_error, tol, passed: max_error <= tol }
}

/// Exponentiates `A/alpha` and renormalizes rows. Fails if any row's raw
/// exponential mass strays from 1 by more than 1e-4.
pub fn policy_from_advantage(a_star: &Table, alpha: f64) -> Result<Table> {
    let report = verify_consistency(a_star, alpha, 1e-4);
    if !report.passed {
        return Err(Error::Consistency(format!(
            "advantage table is not normalized: max per-state error {:.3e}",
            report.max_error
        )));
    }
    let mut pi = Table::zeros(a_star.rows(), a_star.cols());
    for s in 0..a_star.rows() {
        let mut mass = 0.0;
        for a in 0..a_star.cols() {
            let p = (a_star.get(s, a) / alpha).exp();
            pi.set(s, a, p);
            mass += p;
        }
        for a in 0..a_star.cols() {
            pi.set(s, a, pi.get(s, a) / mass);
        }
    }
    Ok(pi)
}

/// Runs soft value iteration to tolerance, also returning the residual
/// history (one sup-norm change per sweep).
pub fn soft_value_iteration_with_history(
    mdp: &TabularMDP,
    alpha: f64,
    tol: f64,
    max_iters: usize,
) -> Result<(SoftSolution, Vec<f64>)> {
    if alpha <= 0.0 {
        return Err(Error::Parameter(format!("alpha {alpha} must be positive")));
    }
    if !(0.0..1.0).contains(&mdp.discount) {
        return Err(Error::Parameter(format!(
            "oracle requires discount in [0, 1), got {}",
            mdp.discount
        )));
    }
    if tol <= 0.0 {
        return Err(Error::Parameter(format!("tolerance {tol} must be positive")));
    }

    let (ns, na) = (mdp.num_states, mdp.num_actions);
    let mut v = vec![0.0; ns];
    let mut history = Vec::new();
    let mut q = Table::zeros(ns, na);
    let mut residual = f64::INFINITY;

    let backup_q = |v: &[f64], q: &mut Table| {
        for s in 0..ns {
            for a in 0..na {
                let mut exp_v = KahanSum::new();
                for (s2, &p) in mdp.transition_row(s, a).iter().enumerate() {
                    if p > 0.0 {
                        exp_v.add(p * v[s2]);
                    }
                }
                q.set(s, a, mdp.reward.get(s, a) + mdp.discount * exp_v.value());
            }
        }
    };

    let mut converged = false;
    for _ in 0..max_iters {
        backup_q(&v, &mut q);
        let mut next_residual = 0.0_f64;
        for s in 0..ns {
            let scaled: Vec<f64> = q.row(s).iter().map(|&x| x / alpha).collect();
            let new_v = alpha * logsumexp(&scaled);
            next_residual = next_residual.max((new_v - v[s]).abs());
            v[s] = new_v;
        }
        residual = next_residual;
        history.push(residual);
        if residual <= tol {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Solver { residual, iters: max_iters });
    }

    // One extra backup from the converged V, then define V as the exact
    // log-sum-exp of that Q so A = Q - V normalizes to machine precision.
    backup_q(&v, &mut q);
    let mut v_star = vec![0.0; ns];
    for s in 0..ns {
        let scaled: Vec<f64> = q.row(s).iter().map(|&x| x / alpha).collect();
        v_star[s] = alpha * logsumexp(&scaled);
    }
    let a_star = Table::from_fn(ns, na, |s, a| q.get(s, a) - v_star[s]);
    let pi_star = policy_from_advantage(&a_star, alpha)?;
    Ok((SoftSolution { q_star: q, v_star, a_star, pi_star, alpha, residual }, history))
}

/// Soft value iteration to sup-norm tolerance.
pub fn soft_value_iteration(
    mdp: &TabularMDP,
    alpha: f64,
    tol: f64,
    max_iters: usize,
) -> Result<SoftSolution> {
    soft_value_iteration_with_history(mdp, alpha, tol, max_iters).map(|(sol, _)| sol)
}

/// Discounted sum of optimal advantages along a segment (the negated
/// regret), `sum_t gamma^t A*(s_t, a_t)`.
pub fn segment_advantage_exact(sol: &SoftSolution, seg: &Segment, gamma: f64) -> f64 {
    let mut total = 0.0;
    let mut disc = 1.0;
    for &(s, a) in &seg.pairs {
        total += disc * sol.a_star.get(s, a);
        disc *= gamma;
    }
    total
}

/// Telescoped advantage estimate
/// `gamma^k V*(s_k) - V*(s_0) + sum_t gamma^t r(s_t, a_t)`,
/// requiring the segment's final successor state. Identical to the exact
/// sum under deterministic dynamics.
pub fn segment_advantage_telescoped(
    sol: &SoftSolution,
    mdp: &TabularMDP,
    seg: &Segment,
    gamma: f64,
) -> Result<f64> {
    let successor = seg.successor.ok_or_else(|| {
        Error::Parameter("telescoped estimator needs the segment's final next-state".into())
    })?;
    let first_state = seg
        .pairs
        .first()
        .ok_or_else(|| Error::Parameter("segment must have at least one step".into()))?
        .0;
    let mut total = 0.0;
    let mut disc = 1.0;
    for &(s, a) in &seg.pairs {
        total += disc * mdp.reward.get(s, a);
        disc *= gamma;
    }
    Ok(total + disc * sol.v_star[successor] - sol.v_star[first_state])
}

/// Exact expected discounted return of `policy` from the initial
/// distribution, by direct linear solve of `(I - gamma P_pi) v = r_pi`.
pub fn policy_return(mdp: &TabularMDP, policy: &Table) -> Result<f64> {
    policy_return_impl(mdp, policy, None)
}

/// Expected discounted return plus the `alpha`-weighted entropy bonus,
/// i.e. the value of the entropy-regularized objective for `policy`.
pub fn policy_return_with_entropy(mdp: &TabularMDP, policy: &Table, alpha: f64) -> Result<f64> {
    policy_return_impl(mdp, policy, Some(alpha))
}

fn policy_return_impl(mdp: &TabularMDP, policy: &Table, entropy_alpha: Option<f64>) -> Result<f64> {
    check_policy(mdp, policy)?;
    if mdp.discount >= 1.0 {
        return Err(Error::Parameter("return is undefined at discount 1".into()));
    }
    let ns = mdp.num_states;
    let mut r_pi = vec![0.0; ns];
    let mut p_pi = vec![0.0; ns * ns];
    for s in 0..ns {
        for a in 0..mdp.num_actions {
            let pa = policy.get(s, a);
            if pa == 0.0 {
                continue;
            }
            r_pi[s] += pa * mdp.reward.get(s, a);
            if let Some(alpha) = entropy_alpha {
                r_pi[s] += alpha * pa * -pa.ln();
            }
            for (s2, &p) in mdp.transition_row(s, a).iter().enumerate() {
                p_pi[s * ns + s2] += pa * p;
            }
        }
    }
    let m = nalgebra::DMatrix::from_fn(ns, ns, |i, j| {
        (i == j) as u8 as f64 - mdp.discount * p_pi[i * ns + j]
    });
    let rhs = nalgebra::DVector::from_vec(r_pi);
    let v = m
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Parameter("singular return system".into()))?;
    Ok(mdp.initial_dist.iter().zip(v.iter()).map(|(&d, &vi)| d * vi).sum())
}
