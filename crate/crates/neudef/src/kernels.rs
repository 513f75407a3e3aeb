//! The kernel-pooling scorer: cosine similarities between query and document
//! term embeddings are summarized per query term into RBF soft-match counts,
//! log-pooled over the query, and combined with a learned kernel weight
//! vector. Analytic gradients are provided for the embeddings and weights.
//!
//! All functions are pure; they are safe to call concurrently on shared
//! read-only parameters.

use crate::{Error, Result};

/// Soft-match counts are clamped here before the log; the pooled value is
/// otherwise undefined for empty documents or very distant embeddings.
pub const PHI_FLOOR: f64 = 1e-10;

/// A bank of RBF kernels (mu, sigma).
#[derive(Debug, Clone, PartialEq)]
pub struct KernelBank {
    mus: Vec<f64>,
    sigmas: Vec<f64>,
}

impl KernelBank {
    pub fn new(pairs: &[(f64, f64)]) -> Result<KernelBank> {
        if pairs.is_empty() {
            return Err(Error::Config("kernel bank must not be empty".into()));
        }
        for &(mu, sigma) in pairs {
            if !(-1.0..=1.0).contains(&mu) {
                return Err(Error::Config(format!("kernel mu {mu} outside [-1, 1]")));
            }
            if sigma <= 0.0 {
                return Err(Error::Config(format!("kernel sigma {sigma} must be positive")));
            }
        }
        Ok(KernelBank {
            mus: pairs.iter().map(|p| p.0).collect(),
            sigmas: pairs.iter().map(|p| p.1).collect(),
        })
    }

    /// One exact-match kernel (mu=1, sigma=1e-3) plus ten kernels equally
    /// distributed in (-1, 1) with sigma=0.1.
    pub fn standard() -> KernelBank {
        let mut pairs = vec![(1.0, 1e-3)];
        let mut mu = 0.9;
        for _ in 0..10 {
            pairs.push((mu, 0.1));
            mu -= 0.2;
        }
        KernelBank::new(&pairs).expect("standard bank is valid")
    }

    pub fn len(&self) -> usize {
        self.mus.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mus.is_empty()
    }

    pub fn mu(&self, k: usize) -> f64 {
        self.mus[k]
    }

    pub fn sigma(&self, k: usize) -> f64 {
        self.sigmas[k]
    }

    pub fn pairs(&self) -> Vec<(f64, f64)> {
        self.mus.iter().cloned().zip(self.sigmas.iter().cloned()).collect()
    }

    /// Index of the first exact-match kernel (mu == 1), if any. Kernel
    /// weight vectors are seeded with 1.0 at this position.
    pub fn exact_index(&self) -> Option<usize> {
        self.mus.iter().position(|&m| m == 1.0)
    }
}

#[inline]
pub(crate) fn gaussian(c: f64, mu: f64, sigma: f64) -> f64 {
    let z = (c - mu) / sigma;
    (-0.5 * z * z).exp()
}

/// d gaussian / d c, given the already-computed kernel value.
#[inline]
pub(crate) fn gaussian_dc(c: f64, mu: f64, sigma: f64, value: f64) -> f64 {
    -(c - mu) / (sigma * sigma) * value
}

/// Cosine similarity; zero-norm vectors yield 0 so padding and freshly
/// zeroed embeddings never produce NaN.
pub fn cosine(u: &[f64], v: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut nu = 0.0;
    let mut nv = 0.0;
    for (a, b) in u.iter().zip(v) {
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    if nu == 0.0 || nv == 0.0 {
        return 0.0;
    }
    dot / (nu.sqrt() * nv.sqrt())
}

/// Accumulate cosine gradients into `du` and `dv`. Zero-norm inputs carry
/// zero gradient, matching the forward convention.
pub(crate) fn cosine_backward(u: &[f64], v: &[f64], dc: f64, du: &mut [f64], dv: &mut [f64]) {
    let mut dot = 0.0;
    let mut nu2 = 0.0;
    let mut nv2 = 0.0;
    for (a, b) in u.iter().zip(v) {
        dot += a * b;
        nu2 += a * a;
        nv2 += b * b;
    }
    if nu2 == 0.0 || nv2 == 0.0 {
        return;
    }
    let nu = nu2.sqrt();
    let nv = nv2.sqrt();
    let c = dot / (nu * nv);
    let inv = 1.0 / (nu * nv);
    for i in 0..u.len() {
        du[i] += dc * (v[i] * inv - c * u[i] / nu2);
        dv[i] += dc * (u[i] * inv - c * v[i] / nv2);
    }
}

/// Cosine similarity between every query row and every document row.
pub fn cosine_matrix(query: &[Vec<f64>], doc: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let dim = query
        .first()
        .or_else(|| doc.first())
        .map(|r| r.len())
        .unwrap_or(0);
    for row in query.iter().chain(doc.iter()) {
        if row.len() != dim {
            return Err(Error::Numeric(format!(
                "embedding dimension mismatch: {} vs {}",
                row.len(),
                dim
            )));
        }
    }
    Ok(query
        .iter()
        .map(|q| doc.iter().map(|d| cosine(q, d)).collect())
        .collect())
}

/// RBF soft-count of one cosine row against a single kernel.
pub fn soft_count(cos_row: &[f64], mu: f64, sigma: f64) -> f64 {
    cos_row.iter().map(|&c| gaussian(c, mu, sigma)).sum()
}

/// Forward cache for the kernel-pooling score.
#[derive(Debug, Clone)]
pub(crate) struct KnrmCache {
    pub q: Vec<Vec<f64>>,
    pub d: Vec<Vec<f64>>,
    pub cos: Vec<Vec<f64>>,
    /// Unclamped soft counts, [query term][kernel].
    pub phi: Vec<Vec<f64>>,
    /// Log-pooled (clamped) kernel features.
    pub pooled: Vec<f64>,
}

pub(crate) fn knrm_forward(
    q_rows: &[Vec<f64>],
    d_rows: &[Vec<f64>],
    bank: &KernelBank,
    w: &[f64],
) -> Result<(f64, KnrmCache)> {
    if q_rows.is_empty() {
        return Err(Error::data("empty query"));
    }
    if w.len() != bank.len() {
        return Err(Error::Numeric(format!(
            "kernel weight length {} does not match bank size {}",
            w.len(),
            bank.len()
        )));
    }
    let cos = cosine_matrix(q_rows, d_rows)?;
    let kn = bank.len();
    let mut phi = vec![vec![0.0; kn]; q_rows.len()];
    let mut pooled = vec![0.0; kn];
    for (j, row) in cos.iter().enumerate() {
        for k in 0..kn {
            let p = soft_count(row, bank.mu(k), bank.sigma(k));
            phi[j][k] = p;
            pooled[k] += p.max(PHI_FLOOR).ln();
        }
    }
    let score = w.iter().zip(&pooled).map(|(wk, pk)| wk * pk).sum();
    Ok((
        score,
        KnrmCache {
            q: q_rows.to_vec(),
            d: d_rows.to_vec(),
            cos,
            phi,
            pooled,
        },
    ))
}

/// The kernel-pooling score of a query against a document, both given as
/// embedding rows.
pub fn knrm_score(q_rows: &[Vec<f64>], d_rows: &[Vec<f64>], bank: &KernelBank, w: &[f64]) -> Result<f64> {
    knrm_forward(q_rows, d_rows, bank, w).map(|(s, _)| s)
}

/// Backward of [`knrm_forward`]. Gradients accumulate into `dw`, `dq`, `dd`.
/// Soft counts at or below the clamp floor carry zero gradient.
pub(crate) fn knrm_backward(
    cache: &KnrmCache,
    bank: &KernelBank,
    w: &[f64],
    d_score: f64,
    dw: &mut [f64],
    dq: &mut [Vec<f64>],
    dd: &mut [Vec<f64>],
) {
    let kn = bank.len();
    for k in 0..kn {
        dw[k] += d_score * cache.pooled[k];
    }
    for (j, cos_row) in cache.cos.iter().enumerate() {
        // d pooled_k / d phi_jk = 1/phi when above the floor, else 0.
        let mut dphi = vec![0.0; kn];
        let mut live = false;
        for k in 0..kn {
            let p = cache.phi[j][k];
            if p > PHI_FLOOR {
                dphi[k] = d_score * w[k] / p;
                if dphi[k] != 0.0 {
                    live = true;
                }
            }
        }
        if !live {
            continue;
        }
        for (i, &c) in cos_row.iter().enumerate() {
            let mut dc = 0.0;
            for k in 0..kn {
                if dphi[k] == 0.0 {
                    continue;
                }
                let g = gaussian(c, bank.mu(k), bank.sigma(k));
                dc += dphi[k] * gaussian_dc(c, bank.mu(k), bank.sigma(k), g);
            }
            if dc != 0.0 {
                cosine_backward(&cache.q[j], &cache.d[i], dc, &mut dq[j], &mut dd[i]);
            }
        }
    }
}
