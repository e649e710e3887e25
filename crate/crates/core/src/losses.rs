//! Cross-entropy, inverse cross-entropy and mutual-information losses with
//! analytic gradients with respect to probability vectors.

use crate::error::{Error, Result};

/// Floor applied to probabilities inside `ln` for cross-entropy.
pub const CE_EPS: f64 = 1e-12;
/// Floor applied to `1 - q` inside `ln` for the inverse cross-entropy.
pub const CE_INV_EPS: f64 = 1e-6;
/// Floor used by the mutual-information estimate.
pub const MI_EPS: f64 = 1e-12;

fn same_len(a: &[f64], b: &[f64], what: &str) -> Result<()> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::invalid(format!(
            "{what}: length mismatch ({} vs {})",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

/// `-sum_c t_c ln max(p_c, eps)`
pub fn cross_entropy(p: &[f64], t: &[f64]) -> Result<f64> {
    same_len(p, t, "cross_entropy")?;
    Ok(p
        .iter()
        .zip(t)
        .filter(|(_, &t)| t != 0.0)
        .fold(0.0, |acc, (&p, &t)| acc - t * p.max(CE_EPS).ln()))
}

/// Gradient of [`cross_entropy`] with respect to `p`.
pub fn cross_entropy_grad(p: &[f64], t: &[f64]) -> Vec<f64> {
    p.iter()
        .zip(t)
        .map(|(&p, &t)| if p > CE_EPS { -t / p } else { 0.0 })
        .collect()
}

/// `-sum_c p_c ln max(1 - q_c, eps)`; terms with `p_c = 0` are exactly zero.
pub fn ce_inverse(p: &[f64], q: &[f64]) -> Result<f64> {
    same_len(p, q, "ce_inverse")?;
    Ok(p
        .iter()
        .zip(q)
        .filter(|(&p, _)| p != 0.0)
        .fold(0.0, |acc, (&p, &q)| acc - p * (1.0 - q).max(CE_INV_EPS).ln()))
}

/// Gradients of [`ce_inverse`] with respect to `p` and `q`.
pub fn ce_inverse_grad(p: &[f64], q: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let dp = q.iter().map(|&q| -(1.0 - q).max(CE_INV_EPS).ln()).collect();
    let dq = p
        .iter()
        .zip(q)
        .map(|(&p, &q)| if 1.0 - q > CE_INV_EPS { p / (1.0 - q) } else { 0.0 })
        .collect();
    (dp, dq)
}

/// Symmetric overclustering loss on a triple of outputs: the two positives
/// are each pushed away from the negative.
pub fn ce_inverse_loss(o1: &[f64], o2: &[f64], o3: &[f64]) -> Result<f64> {
    Ok(0.5 * ce_inverse(o1, o3)? + 0.5 * ce_inverse(o2, o3)?)
}

/// Gradients of [`ce_inverse_loss`] with respect to `o1`, `o2`, `o3`.
pub fn ce_inverse_loss_grad(o1: &[f64], o2: &[f64], o3: &[f64]) -> [Vec<f64>; 3] {
    let (d1, d3a) = ce_inverse_grad(o1, o3);
    let (d2, d3b) = ce_inverse_grad(o2, o3);
    [
        d1.into_iter().map(|v| 0.5 * v).collect(),
        d2.into_iter().map(|v| 0.5 * v).collect(),
        d3a.iter().zip(&d3b).map(|(a, b)| 0.5 * (a + b)).collect(),
    ]
}

/// Row-major `k x k` joint distribution of paired outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Joint {
    pub k: usize,
    pub p: Vec<f64>,
}

impl Joint {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.p[i * self.k + j]
    }

    pub fn row_marginals(&self) -> Vec<f64> {
        (0..self.k)
            .map(|i| self.p[i * self.k..(i + 1) * self.k].iter().sum())
            .collect()
    }

    pub fn col_marginals(&self) -> Vec<f64> {
        (0..self.k)
            .map(|j| (0..self.k).map(|i| self.get(i, j)).sum())
            .collect()
    }
}

/// Symmetrized mean outer product `(Q + Q^T) / 2`, `Q = 1/n sum a_i b_i^T`.
pub fn joint_matrix(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<Joint> {
    if a.is_empty() || a.len() != b.len() {
        return Err(Error::invalid(format!(
            "joint_matrix: need equally many non-zero rows ({} vs {})",
            a.len(),
            b.len()
        )));
    }
    let k = a[0].len();
    let mut q = vec![0.0; k * k];
    for (ai, bi) in a.iter().zip(b) {
        if ai.len() != k || bi.len() != k {
            return Err(Error::invalid("joint_matrix: ragged rows"));
        }
        for (r, &x) in ai.iter().enumerate() {
            for (c, &y) in bi.iter().enumerate() {
                q[r * k + c] += x * y;
            }
        }
    }
    let n = a.len() as f64;
    let mut p = vec![0.0; k * k];
    for r in 0..k {
        for c in 0..k {
            p[r * k + c] = 0.5 * (q[r * k + c] + q[c * k + r]) / n;
        }
    }
    Ok(Joint { k, p })
}

/// `sum P_ij ln(P_ij / (P_i P'_j))`; zero entries contribute nothing.
pub fn mutual_information(joint: &Joint) -> f64 {
    let pi = joint.row_marginals();
    let pj = joint.col_marginals();
    let mut total = 0.0;
    for i in 0..joint.k {
        for j in 0..joint.k {
            let v = joint.get(i, j);
            if v > 0.0 {
                total += v
                    * (v.max(MI_EPS).ln() - pi[i].max(MI_EPS).ln() - pj[j].max(MI_EPS).ln());
            }
        }
    }
    total
}

/// Gradient of [`mutual_information`] with respect to the joint entries.
pub fn mutual_information_grad(joint: &Joint) -> Vec<f64> {
    let pi = joint.row_marginals();
    let pj = joint.col_marginals();
    let k = joint.k;
    let mut g = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..k {
            g[i * k + j] = joint.get(i, j).max(MI_EPS).ln()
                - pi[i].max(MI_EPS).ln()
                - pj[j].max(MI_EPS).ln()
                - 1.0;
        }
    }
    g
}

/// Gradient of `I(joint_matrix(a, b))` with respect to every `a_i` and `b_i`.
pub fn mutual_information_input_grad(
    a: &[Vec<f64>],
    b: &[Vec<f64>],
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let joint = joint_matrix(a, b)?;
    let k = joint.k;
    let g = mutual_information_grad(&joint);
    let n = a.len() as f64;
    let s: Vec<f64> = (0..k * k)
        .map(|idx| {
            let (r, c) = (idx / k, idx % k);
            0.5 * (g[r * k + c] + g[c * k + r]) / n
        })
        .collect();
    let mul = |v: &[f64]| -> Vec<f64> {
        (0..k)
            .map(|r| (0..k).map(|c| s[r * k + c] * v[c]).sum())
            .collect()
    };
    Ok((b.iter().map(|bi| mul(bi)).collect(), a.iter().map(|ai| mul(ai)).collect()))
}

/// Weighted sum of the supervised and unsupervised terms, with the
/// unsupervised term `-MI`.
pub fn total_loss(ls: f64, mi: f64, lambda_s: f64, lambda_u: f64) -> f64 {
    lambda_s * ls - lambda_u * mi
}

/// Chain rule through soft-max: `dz = p * (g - <g, p>)`.
pub fn softmax_backward(p: &[f64], g: &[f64]) -> Vec<f64> {
    let dot: f64 = p.iter().zip(g).map(|(p, g)| p * g).sum();
    p.iter().zip(g).map(|(p, g)| p * (g - dot)).collect()
}
