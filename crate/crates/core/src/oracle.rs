//! Exact discounted occupancies, values and successor features on finite MDPs.
//!
//! Occupancy uses the next-state convention: `mu(.|s)` puts weight
//! `(1 - gamma) gamma^k` on the state reached after `k + 1` steps, so
//! `mu = (1 - gamma) (I - gamma P)^-1 P`. Successor features keep the
//! self-inclusive convention `Psi = (I - gamma P)^-1 phi`.

use std::io::Write;

use nalgebra::{DMatrix, DVector};

use crate::env::{MdpSpec, PolicyMatrix};
use crate::error::{Result, VocError};

#[derive(Clone, Debug, PartialEq)]
pub struct OccupancyDist {
    pub mu: Vec<Vec<f64>>,
    pub gamma: f64,
}

impl OccupancyDist {
    pub fn row(&self, s: usize) -> &[f64] {
        &self.mu[s]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuccessorFeatures {
    pub psi: Vec<Vec<f64>>,
    pub phi: Vec<Vec<f64>>,
    pub gamma: f64,
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(VocError::InvalidInput(format!(
            "gamma {gamma} must lie in [0, 1)"
        )));
    }
    Ok(())
}

fn to_matrix(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let n = rows.len();
    let m = rows.first().map_or(0, Vec::len);
    DMatrix::from_fn(n, m, |i, j| rows[i][j])
}

fn from_matrix(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

/// Solves `(I - gamma P) X = rhs` by LU with partial pivoting.
fn resolvent_solve(p: &[Vec<f64>], gamma: f64, rhs: DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = p.len();
    let a = DMatrix::identity(n, n) - to_matrix(p) * gamma;
    a.lu()
        .solve(&rhs)
        .ok_or_else(|| VocError::Internal("singular resolvent (I - gamma P)".into()))
}

pub fn exact_occupancy_from_chain(p: &[Vec<f64>], gamma: f64) -> Result<OccupancyDist> {
    check_gamma(gamma)?;
    let x = resolvent_solve(p, gamma, to_matrix(p))?;
    let mut mu = from_matrix(&(x * (1.0 - gamma)));
    // clamp solver round-off so rows stay valid distributions
    for row in &mut mu {
        for v in row.iter_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
    }
    Ok(OccupancyDist { mu, gamma })
}

pub fn exact_occupancy(mdp: &MdpSpec, policy: &PolicyMatrix, gamma: f64) -> Result<OccupancyDist> {
    exact_occupancy_from_chain(&mdp.policy_transition(policy)?, gamma)
}

/// `(1 - gamma) sum_{k < terms} gamma^k P^{k+1}`, by repeated multiplication.
pub fn occupancy_by_series(p: &[Vec<f64>], gamma: f64, terms: usize) -> Vec<Vec<f64>> {
    let n = p.len();
    let mut power = p.to_vec();
    let mut acc = vec![vec![0.0; n]; n];
    let mut w = 1.0 - gamma;
    for _ in 0..terms {
        for (a, row) in acc.iter_mut().zip(&power) {
            for (x, y) in a.iter_mut().zip(row) {
                *x += w * y;
            }
        }
        power = mat_mul(&power, p);
        w *= gamma;
    }
    acc
}

pub fn mat_mul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let m = b.first().map_or(0, Vec::len);
    a.iter()
        .map(|row| {
            let mut out = vec![0.0; m];
            for (k, &x) in row.iter().enumerate() {
                if x != 0.0 {
                    for (o, y) in out.iter_mut().zip(&b[k]) {
                        *o += x * y;
                    }
                }
            }
            out
        })
        .collect()
}

/// `V = (I - gamma P)^-1 P r`: discounted reward collected from the next state on.
pub fn exact_value_from_chain(p: &[Vec<f64>], reward: &[f64], gamma: f64) -> Result<Vec<f64>> {
    check_gamma(gamma)?;
    if reward.len() != p.len() {
        return Err(VocError::InvalidInput(
            "reward length differs from state count".into(),
        ));
    }
    let pr = to_matrix(p) * DVector::from_column_slice(reward);
    let x = resolvent_solve(
        p,
        gamma,
        DMatrix::from_column_slice(p.len(), 1, pr.as_slice()),
    )?;
    Ok(x.column(0).iter().copied().collect())
}

pub fn exact_value(mdp: &MdpSpec, policy: &PolicyMatrix, gamma: f64) -> Result<Vec<f64>> {
    exact_value_from_chain(&mdp.policy_transition(policy)?, &mdp.reward, gamma)
}

pub fn exact_sf(
    mdp: &MdpSpec,
    policy: &PolicyMatrix,
    gamma: f64,
    phi: &[Vec<f64>],
) -> Result<SuccessorFeatures> {
    check_gamma(gamma)?;
    if phi.len() != mdp.n_states {
        return Err(VocError::InvalidInput("phi needs one row per state".into()));
    }
    let p = mdp.policy_transition(policy)?;
    let psi = from_matrix(&resolvent_solve(&p, gamma, to_matrix(phi))?);
    Ok(SuccessorFeatures {
        psi,
        phi: phi.to_vec(),
        gamma,
    })
}

/// `0.5 * sum |p_i - q_i|`.
pub fn tv_distance(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(VocError::InvalidInput(format!(
            "distributions differ in support size: {} vs {}",
            p.len(),
            q.len()
        )));
    }
    Ok(0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>())
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmpiricalDist {
    pub probs: Vec<f64>,
    /// Samples that matched no support element.
    pub rejected: usize,
    pub total: usize,
}

/// Normalized counts of `samples` over `support`; unmatched samples go to a reject bucket.
pub fn empirical_dist<K: PartialEq>(samples: &[K], support: &[K]) -> Result<EmpiricalDist> {
    if samples.is_empty() {
        return Err(VocError::InvalidInput("no samples".into()));
    }
    let mut counts = vec![0usize; support.len()];
    let mut rejected = 0;
    for s in samples {
        match support.iter().position(|k| k == s) {
            Some(i) => counts[i] += 1,
            None => rejected += 1,
        }
    }
    let total = samples.len();
    Ok(EmpiricalDist {
        probs: counts.iter().map(|c| *c as f64 / total as f64).collect(),
        rejected,
        total,
    })
}

/// Stationary distribution of `P_pi` by power iteration from uniform.
pub fn stationary_distribution(p: &[Vec<f64>], max_iters: usize, tol: f64) -> Vec<f64> {
    let n = p.len();
    let mut d = vec![1.0 / n as f64; n];
    for _ in 0..max_iters {
        let mut next = vec![0.0; n];
        for (s, row) in p.iter().enumerate() {
            for (t, w) in row.iter().enumerate() {
                next[t] += d[s] * w;
            }
        }
        let delta: f64 = next.iter().zip(&d).map(|(a, b)| (a - b).abs()).sum();
        d = next;
        if delta < tol {
            break;
        }
    }
    d
}

/// One policy-improvement step: `argmax_a sum_s' P(s'|s,a) (r(s') + gamma V(s'))`,
/// ties to the lowest action index.
pub fn greedy_policy(mdp: &MdpSpec, values: &[f64], gamma: f64) -> Vec<usize> {
    (0..mdp.n_states)
        .map(|s| {
            let q = |a: usize| -> f64 {
                mdp.row(s, a)
                    .iter()
                    .enumerate()
                    .map(|(t, p)| p * (mdp.reward[t] + gamma * values[t]))
                    .sum()
            };
            let mut best = 0;
            let mut best_q = q(0);
            for a in 1..mdp.n_actions {
                let qa = q(a);
                if qa > best_q {
                    best = a;
                    best_q = qa;
                }
            }
            best
        })
        .collect()
}

/// CSV with header `state,<col0>,<col1>,...` and one row per state.
pub fn write_matrix_csv<W: Write>(mut w: W, rows: &[Vec<f64>], col_prefix: &str) -> Result<()> {
    let m = rows.first().map_or(0, Vec::len);
    let header: Vec<String> = (0..m).map(|j| format!("{col_prefix}{j}")).collect();
    writeln!(w, "state,{}", header.join(","))?;
    for (i, row) in rows.iter().enumerate() {
        let vals: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
        writeln!(w, "{i},{}", vals.join(","))?;
    }
    Ok(())
}
