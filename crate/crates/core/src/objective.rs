//! Dense-batch contrastive objective.
//!
//! For two aligned embedding sets `a` and `b` (row `i` of each comes from the
//! same writer) the similarity matrix is `S[i][j] = <a_i, b_j> / tau`. The
//! loss is
//!
//! ```text
//! total = (row_ce + col_ce) / 2 + alpha * diag_bce
//! row_ce   = mean_i  -log softmax(S[i, :])[i]
//! col_ce   = mean_j  -log softmax(S[:, j])[j]
//! diag_bce = mean_i  -log sigmoid(S[i][i])
//! ```
//!
//! The target matrix is the identity and is never stored. All softmaxes
//! subtract the max and all log-sigmoids go through a stable softplus.

use crate::encoder::dot;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub temperature: f64,
    pub alpha: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            temperature: 0.07,
            alpha: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::arg(format!("temperature must be positive, got {}", self.temperature)));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::arg(format!("alpha must be non-negative, got {}", self.alpha)));
        }
        Ok(())
    }
}

/// Row-major `n x n` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    n: usize,
    entries: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn from_entries(n: usize, entries: Vec<f64>) -> Result<Self> {
        if n == 0 || entries.len() != n * n {
            return Err(Error::arg(format!("need {n}x{n} entries, got {}", entries.len())));
        }
        Ok(SimilarityMatrix { n, entries })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::arg("similarity matrix must be square"));
        }
        Self::from_entries(n, rows.concat())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.n + j]
    }

    pub fn transpose(&self) -> Self {
        let n = self.n;
        let mut t = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                t[j * n + i] = self.entries[i * n + j];
            }
        }
        SimilarityMatrix { n, entries: t }
    }

    fn check_finite(&self) -> Result<()> {
        if self.entries.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::arg("similarity matrix has non-finite entries"))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub row_ce: f64,
    pub col_ce: f64,
    pub diag_bce: f64,
    pub total: f64,
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Softmax of a slice with max subtraction.
pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let ex: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = ex.iter().sum();
    ex.into_iter().map(|e| e / z).collect()
}

pub fn similarity_matrix<A: AsRef<[f64]>, B: AsRef<[f64]>>(
    emb_a: &[A],
    emb_b: &[B],
    cfg: &LossConfig,
) -> Result<SimilarityMatrix> {
    cfg.validate()?;
    let n = emb_a.len();
    if n == 0 || emb_b.len() != n {
        return Err(Error::arg(format!("need two non-empty sets of equal size, got {} and {}", n, emb_b.len())));
    }
    let d = emb_a[0].as_ref().len();
    if emb_a.iter().map(AsRef::as_ref).chain(emb_b.iter().map(AsRef::as_ref)).any(|e| e.len() != d) {
        return Err(Error::arg("embeddings differ in dimension"));
    }
    let mut entries = Vec::with_capacity(n * n);
    for a in emb_a {
        for b in emb_b {
            entries.push(dot(a.as_ref(), b.as_ref()) / cfg.temperature);
        }
    }
    Ok(SimilarityMatrix { n, entries })
}

pub fn dual_loss(s: &SimilarityMatrix, cfg: &LossConfig) -> Result<LossBreakdown> {
    cfg.validate()?;
    s.check_finite()?;
    let n = s.n;
    let nf = n as f64;
    let mut row_ce = 0.0;
    let mut col_ce = 0.0;
    let mut diag_bce = 0.0;
    for i in 0..n {
        let diag = s.get(i, i);
        row_ce += log_sum_exp((0..n).map(|j| s.get(i, j))) - diag;
        col_ce += log_sum_exp((0..n).map(|j| s.get(j, i))) - diag;
        diag_bce += softplus(-diag);
    }
    let (row_ce, col_ce, diag_bce) = ((row_ce / nf).max(0.0), (col_ce / nf).max(0.0), diag_bce / nf);
    Ok(LossBreakdown {
        row_ce,
        col_ce,
        diag_bce,
        total: 0.5 * (row_ce + col_ce) + cfg.alpha * diag_bce,
    })
}

/// `d total / d S`, row-major `n x n`.
pub fn dual_loss_grad(s: &SimilarityMatrix, cfg: &LossConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    s.check_finite()?;
    let n = s.n;
    let nf = n as f64;
    let mut grad = vec![0.0; n * n];
    for i in 0..n {
        let row = softmax(&s.entries[i * n..(i + 1) * n]);
        for j in 0..n {
            grad[i * n + j] += row[j] / (2.0 * nf);
        }
    }
    for j in 0..n {
        let col: Vec<f64> = (0..n).map(|i| s.get(i, j)).collect();
        let p = softmax(&col);
        for i in 0..n {
            grad[i * n + j] += p[i] / (2.0 * nf);
        }
    }
    for i in 0..n {
        // both CE terms contribute -1/(2n) on the diagonal
        grad[i * n + i] += -1.0 / nf + cfg.alpha * (sigmoid(s.get(i, i)) - 1.0) / nf;
    }
    Ok(grad)
}

/// Chain rule through `S = A B^T / tau`: returns `(dL/dA, dL/dB)`.
pub fn chain_to_embeddings<A: AsRef<[f64]>, B: AsRef<[f64]>>(
    grad_s: &[f64],
    emb_a: &[A],
    emb_b: &[B],
    cfg: &LossConfig,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    cfg.validate()?;
    let n = emb_a.len();
    if n == 0 || emb_b.len() != n || grad_s.len() != n * n {
        return Err(Error::arg("gradient and embedding shapes disagree"));
    }
    let d = emb_a[0].as_ref().len();
    if emb_a.iter().map(AsRef::as_ref).chain(emb_b.iter().map(AsRef::as_ref)).any(|e| e.len() != d) {
        return Err(Error::arg("embeddings differ in dimension"));
    }
    let inv_t = 1.0 / cfg.temperature;
    let mut ga = vec![vec![0.0; d]; n];
    let mut gb = vec![vec![0.0; d]; n];
    for i in 0..n {
        for j in 0..n {
            let g = grad_s[i * n + j] * inv_t;
            if g == 0.0 {
                continue;
            }
            let (a, b) = (emb_a[i].as_ref(), emb_b[j].as_ref());
            for k in 0..d {
                ga[i][k] += g * b[k];
                gb[j][k] += g * a[k];
            }
        }
    }
    Ok((ga, gb))
}

/// Binary cross-entropy on a logit.
pub fn pairwise_bce_loss(score: f64, label: bool) -> f64 {
    if label {
        softplus(-score)
    } else {
        softplus(score)
    }
}

/// `d pairwise_bce_loss / d score`.
pub fn pairwise_bce_grad(score: f64, label: bool) -> f64 {
    sigmoid(score) - if label { 1.0 } else { 0.0 }
}
