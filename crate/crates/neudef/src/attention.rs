//! Expansion-term weighting: one multi-head self-attention encoder layer
//! contextualizes the concatenated clicked queries and the document field,
//! a kernel-pooling matcher scores each clicked query against the document,
//! and every candidate term receives the summed match scores of the clicked
//! queries it appears in. A softmax normalizes the raw weights per document
//! so the downstream expansion field always sees positive weights.
//!
//! Two ablations are built in: `no_trans` replaces the encoder with the
//! identity, and `tf` replaces every match score with 1 so weights reduce to
//! term frequency over the clicked queries (normalized by their sum rather
//! than a softmax).

use std::fmt;

use rand::Rng;

use crate::corpus::PAD_ID;
use crate::kernels::{knrm_backward, knrm_forward, KernelBank, KnrmCache};
use crate::numeric::{
    accumulate_embed_grads, embed_rows, linear_backward, linear_forward, softmax, softmax_backward, ParamTensor,
};
use crate::expansion::DocExpansion;
use crate::{Error, Result};

/// Epsilon inside the layer-norm variance square root.
pub const LN_EPS: f64 = 1e-6;

/// Expansion weighting mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Attention-contextualized match scoring.
    Full,
    /// Match scoring on raw embeddings (encoder replaced by the identity).
    NoTrans,
    /// Match scores fixed at 1: weights are clicked-query term frequencies.
    Tf,
    /// Expansion disabled; the ranker scores with the base model only.
    None,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Variant::Full => write!(f, "full"),
            Variant::NoTrans => write!(f, "no_trans"),
            Variant::Tf => write!(f, "tf"),
            Variant::None => write!(f, "none"),
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Variant> {
        match s {
            "full" => Ok(Variant::Full),
            "no_trans" => Ok(Variant::NoTrans),
            "tf" => Ok(Variant::Tf),
            "none" => Ok(Variant::None),
            other => Err(Error::Config(format!(
                "unknown expansion variant '{other}' (expected full|no_trans|tf|none)"
            ))),
        }
    }
}

/// Weights of one encoder layer. In test mode the projections and both
/// sublayers are disabled: the layer computes plain scaled dot-product
/// attention over the raw inputs plus the residual, which is the form the
/// hand-evaluated oracles check.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub heads: usize,
    pub dim: usize,
    pub hidden: usize,
    pub test_mode: bool,
    pub wq: ParamTensor,
    pub wk: ParamTensor,
    pub wv: ParamTensor,
    pub wo: ParamTensor,
    pub ff1_w: ParamTensor,
    pub ff1_b: ParamTensor,
    pub ff2_w: ParamTensor,
    pub ff2_b: ParamTensor,
    pub ln1_gain: ParamTensor,
    pub ln1_bias: ParamTensor,
    pub ln2_gain: ParamTensor,
    pub ln2_bias: ParamTensor,
}

fn scaled_uniform(name: &str, rows: usize, cols: usize, rng: &mut impl Rng) -> ParamTensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let values = (0..rows * cols).map(|_| rng.gen_range(-limit..limit)).collect();
    ParamTensor::new(name, vec![rows, cols], values)
}

fn identity_matrix(name: &str, dim: usize) -> ParamTensor {
    let mut values = vec![0.0; dim * dim];
    for i in 0..dim {
        values[i * dim + i] = 1.0;
    }
    ParamTensor::new(name, vec![dim, dim], values)
}

impl AttentionParams {
    pub fn new(dim: usize, heads: usize, rng: &mut impl Rng) -> Result<AttentionParams> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!(
                "model dim {dim} must be divisible by head count {heads}"
            )));
        }
        let hidden = 4 * dim;
        Ok(AttentionParams {
            heads,
            dim,
            hidden,
            test_mode: false,
            wq: scaled_uniform("attention.wq", dim, dim, rng),
            wk: scaled_uniform("attention.wk", dim, dim, rng),
            wv: scaled_uniform("attention.wv", dim, dim, rng),
            wo: scaled_uniform("attention.wo", dim, dim, rng),
            ff1_w: scaled_uniform("attention.ff1_w", dim, hidden, rng),
            ff1_b: ParamTensor::zeros("attention.ff1_b", vec![hidden]),
            ff2_w: scaled_uniform("attention.ff2_w", hidden, dim, rng),
            ff2_b: ParamTensor::zeros("attention.ff2_b", vec![dim]),
            ln1_gain: ParamTensor::new("attention.ln1_gain", vec![dim], vec![1.0; dim]),
            ln1_bias: ParamTensor::zeros("attention.ln1_bias", vec![dim]),
            ln2_gain: ParamTensor::new("attention.ln2_gain", vec![dim], vec![1.0; dim]),
            ln2_bias: ParamTensor::zeros("attention.ln2_bias", vec![dim]),
        })
    }

    /// Identity-test configuration: one head, projections pinned to the
    /// identity, feed-forward and layer norm disabled.
    pub fn identity_test(dim: usize) -> AttentionParams {
        let hidden = 4 * dim;
        AttentionParams {
            heads: 1,
            dim,
            hidden,
            test_mode: true,
            wq: identity_matrix("attention.wq", dim),
            wk: identity_matrix("attention.wk", dim),
            wv: identity_matrix("attention.wv", dim),
            wo: identity_matrix("attention.wo", dim),
            ff1_w: ParamTensor::zeros("attention.ff1_w", vec![dim, hidden]),
            ff1_b: ParamTensor::zeros("attention.ff1_b", vec![hidden]),
            ff2_w: ParamTensor::zeros("attention.ff2_w", vec![hidden, dim]),
            ff2_b: ParamTensor::zeros("attention.ff2_b", vec![dim]),
            ln1_gain: ParamTensor::new("attention.ln1_gain", vec![dim], vec![1.0; dim]),
            ln1_bias: ParamTensor::zeros("attention.ln1_bias", vec![dim]),
            ln2_gain: ParamTensor::new("attention.ln2_gain", vec![dim], vec![1.0; dim]),
            ln2_bias: ParamTensor::zeros("attention.ln2_bias", vec![dim]),
        }
    }

    pub(crate) fn tensor_list(&self) -> Vec<&ParamTensor> {
        vec![
            &self.wq,
            &self.wk,
            &self.wv,
            &self.wo,
            &self.ff1_w,
            &self.ff1_b,
            &self.ff2_w,
            &self.ff2_b,
            &self.ln1_gain,
            &self.ln1_bias,
            &self.ln2_gain,
            &self.ln2_bias,
        ]
    }

    pub(crate) fn tensor_list_mut(&mut self) -> Vec<&mut ParamTensor> {
        vec![
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.ff1_w,
            &mut self.ff1_b,
            &mut self.ff2_w,
            &mut self.ff2_b,
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
        ]
    }
}

struct LnCache {
    xhat: Vec<Vec<f64>>,
    invstd: Vec<f64>,
}

fn layer_norm_forward(x: &[Vec<f64>], gain: &ParamTensor, bias: &ParamTensor) -> (Vec<Vec<f64>>, LnCache) {
    let d = gain.numel();
    let mut out = Vec::with_capacity(x.len());
    let mut xhat = Vec::with_capacity(x.len());
    let mut invstd = Vec::with_capacity(x.len());
    for row in x {
        let mean: f64 = row.iter().sum::<f64>() / d as f64;
        let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let istd = 1.0 / (var + LN_EPS).sqrt();
        let xh: Vec<f64> = row.iter().map(|v| (v - mean) * istd).collect();
        let y: Vec<f64> = xh
            .iter()
            .enumerate()
            .map(|(j, &h)| gain.values[j] * h + bias.values[j])
            .collect();
        out.push(y);
        xhat.push(xh);
        invstd.push(istd);
    }
    (out, LnCache { xhat, invstd })
}

fn layer_norm_backward(
    cache: &LnCache,
    gain: &mut ParamTensor,
    bias: &mut ParamTensor,
    dy: &[Vec<f64>],
    dx: &mut [Vec<f64>],
) {
    let d = gain.numel();
    for ((dyr, xhr), (istd, dxr)) in dy
        .iter()
        .zip(&cache.xhat)
        .zip(cache.invstd.iter().zip(dx.iter_mut()))
    {
        let mut dxhat = vec![0.0; d];
        for j in 0..d {
            dxhat[j] = dyr[j] * gain.values[j];
            gain.add_grad(j, dyr[j] * xhr[j]);
            bias.add_grad(j, dyr[j]);
        }
        let m1: f64 = dxhat.iter().sum::<f64>() / d as f64;
        let m2: f64 = dxhat.iter().zip(xhr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        for j in 0..d {
            dxr[j] += istd * (dxhat[j] - m1 - xhr[j] * m2);
        }
    }
}

pub(crate) enum AttnCache {
    Standard(Box<StdCache>),
    Test(TestCache),
}

pub(crate) struct StdCache {
    x: Vec<Vec<f64>>,
    mask: Vec<bool>,
    q: Vec<Vec<f64>>,
    k: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    /// Attention probabilities per head, [head][row][col].
    att: Vec<Vec<Vec<f64>>>,
    heads_out: Vec<Vec<f64>>,
    r1: Vec<Vec<f64>>,
    ln1: LnCache,
    l1: Vec<Vec<f64>>,
    z1: Vec<Vec<f64>>,
    relu: Vec<Vec<f64>>,
    r2: Vec<Vec<f64>>,
    ln2: LnCache,
}

pub(crate) struct TestCache {
    x: Vec<Vec<f64>>,
    att: Vec<Vec<f64>>,
}

/// Contextualize a token sequence with the encoder layer. Masked positions
/// are excluded from attention columns; their own output rows are computed
/// but carry no meaning and must not be consumed.
pub fn self_att(params: &AttentionParams, x: &[Vec<f64>], mask: &[bool]) -> Result<Vec<Vec<f64>>> {
    self_att_forward(params, x, mask).map(|(out, _)| out)
}

pub(crate) fn self_att_forward(
    params: &AttentionParams,
    x: &[Vec<f64>],
    mask: &[bool],
) -> Result<(Vec<Vec<f64>>, AttnCache)> {
    let n = x.len();
    if n == 0 || mask.iter().all(|m| !m) {
        return Err(Error::data("empty attention input"));
    }
    assert_eq!(mask.len(), n, "mask length mismatch");
    for row in x {
        assert_eq!(row.len(), params.dim, "input dim mismatch");
    }

    if params.test_mode {
        let scale = 1.0 / (params.dim as f64).sqrt();
        let mut att = Vec::with_capacity(n);
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let scores: Vec<f64> = (0..n)
                .map(|j| {
                    if mask[j] {
                        x[i].iter().zip(&x[j]).map(|(a, b)| a * b).sum::<f64>() * scale
                    } else {
                        f64::NEG_INFINITY
                    }
                })
                .collect();
            let a = softmax(&scores);
            let mut row = x[i].clone();
            for (j, &aj) in a.iter().enumerate() {
                if aj == 0.0 {
                    continue;
                }
                for (c, v) in row.iter_mut().enumerate() {
                    *v += aj * x[j][c];
                }
            }
            out.push(row);
            att.push(a);
        }
        return Ok((out, AttnCache::Test(TestCache { x: x.to_vec(), att })));
    }

    let dim = params.dim;
    let heads = params.heads;
    let dh = dim / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let q = linear_forward(x, &params.wq);
    let k = linear_forward(x, &params.wk);
    let v = linear_forward(x, &params.wv);

    let mut att = vec![vec![vec![0.0; n]; n]; heads];
    let mut heads_out = vec![vec![0.0; dim]; n];
    for h in 0..heads {
        let lo = h * dh;
        for i in 0..n {
            let scores: Vec<f64> = (0..n)
                .map(|j| {
                    if mask[j] {
                        (0..dh).map(|c| q[i][lo + c] * k[j][lo + c]).sum::<f64>() * scale
                    } else {
                        f64::NEG_INFINITY
                    }
                })
                .collect();
            let a = softmax(&scores);
            for (j, &aj) in a.iter().enumerate() {
                if aj == 0.0 {
                    continue;
                }
                for c in 0..dh {
                    heads_out[i][lo + c] += aj * v[j][lo + c];
                }
            }
            att[h][i] = a;
        }
    }

    let attn_out = linear_forward(&heads_out, &params.wo);
    let r1: Vec<Vec<f64>> = x
        .iter()
        .zip(&attn_out)
        .map(|(a, b)| a.iter().zip(b).map(|(u, w)| u + w).collect())
        .collect();
    let (l1, ln1) = layer_norm_forward(&r1, &params.ln1_gain, &params.ln1_bias);

    let mut z1 = linear_forward(&l1, &params.ff1_w);
    for row in &mut z1 {
        for (j, v) in row.iter_mut().enumerate() {
            *v += params.ff1_b.values[j];
        }
    }
    let relu: Vec<Vec<f64>> = z1
        .iter()
        .map(|row| row.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect())
        .collect();
    let mut ff = linear_forward(&relu, &params.ff2_w);
    for row in &mut ff {
        for (j, v) in row.iter_mut().enumerate() {
            *v += params.ff2_b.values[j];
        }
    }
    let r2: Vec<Vec<f64>> = l1
        .iter()
        .zip(&ff)
        .map(|(a, b)| a.iter().zip(b).map(|(u, w)| u + w).collect())
        .collect();
    let (out, ln2) = layer_norm_forward(&r2, &params.ln2_gain, &params.ln2_bias);

    Ok((
        out,
        AttnCache::Standard(Box::new(StdCache {
            x: x.to_vec(),
            mask: mask.to_vec(),
            q,
            k,
            v,
            att,
            heads_out,
            r1,
            ln1,
            l1,
            z1,
            relu,
            r2,
            ln2,
        })),
    ))
}

/// Backward of [`self_att_forward`]; returns the input gradient and
/// accumulates parameter gradients.
pub(crate) fn self_att_backward(params: &mut AttentionParams, cache: &AttnCache, d_out: &[Vec<f64>]) -> Vec<Vec<f64>> {
    match cache {
        AttnCache::Test(tc) => {
            let n = tc.x.len();
            let dim = tc.x[0].len();
            let scale = 1.0 / (dim as f64).sqrt();
            let mut dx = vec![vec![0.0; dim]; n];
            for i in 0..n {
                for c in 0..dim {
                    dx[i][c] += d_out[i][c];
                }
                let da: Vec<f64> = (0..n)
                    .map(|j| d_out[i].iter().zip(&tc.x[j]).map(|(a, b)| a * b).sum())
                    .collect();
                for (j, &aj) in tc.att[i].iter().enumerate() {
                    if aj == 0.0 {
                        continue;
                    }
                    for c in 0..dim {
                        dx[j][c] += aj * d_out[i][c];
                    }
                }
                let ds = softmax_backward(&tc.att[i], &da);
                for (j, &dsj) in ds.iter().enumerate() {
                    if dsj == 0.0 {
                        continue;
                    }
                    for c in 0..dim {
                        dx[i][c] += dsj * tc.x[j][c] * scale;
                        dx[j][c] += dsj * tc.x[i][c] * scale;
                    }
                }
            }
            dx
        }
        AttnCache::Standard(sc) => {
            let n = sc.x.len();
            let dim = params.dim;
            let heads = params.heads;
            let dh = dim / heads;
            let scale = 1.0 / (dh as f64).sqrt();

            // out = LN(r2)
            let mut d_r2 = vec![vec![0.0; dim]; n];
            layer_norm_backward(&sc.ln2, &mut params.ln2_gain, &mut params.ln2_bias, d_out, &mut d_r2);

            // r2 = l1 + ff
            let mut d_l1 = d_r2.clone();
            let d_ff = d_r2;

            // ff = relu(z1) W2 + b2
            if params.ff2_b.trainable {
                for row in &d_ff {
                    for (j, &v) in row.iter().enumerate() {
                        params.ff2_b.grad[j] += v;
                    }
                }
            }
            let mut d_relu = vec![vec![0.0; params.hidden]; n];
            linear_backward(&sc.relu, &mut params.ff2_w, &d_ff, &mut d_relu);
            let d_z1: Vec<Vec<f64>> = d_relu
                .iter()
                .zip(&sc.z1)
                .map(|(dr, z)| dr.iter().zip(z).map(|(&d, &zv)| if zv > 0.0 { d } else { 0.0 }).collect())
                .collect();
            if params.ff1_b.trainable {
                for row in &d_z1 {
                    for (j, &v) in row.iter().enumerate() {
                        params.ff1_b.grad[j] += v;
                    }
                }
            }
            linear_backward(&sc.l1, &mut params.ff1_w, &d_z1, &mut d_l1);

            // l1 = LN(r1)
            let mut d_r1 = vec![vec![0.0; dim]; n];
            layer_norm_backward(&sc.ln1, &mut params.ln1_gain, &mut params.ln1_bias, &d_l1, &mut d_r1);

            // r1 = x + heads_out W_o
            let mut dx = d_r1.clone();
            let d_attn_out = d_r1;
            let mut d_heads = vec![vec![0.0; dim]; n];
            linear_backward(&sc.heads_out, &mut params.wo, &d_attn_out, &mut d_heads);

            let mut dq = vec![vec![0.0; dim]; n];
            let mut dk = vec![vec![0.0; dim]; n];
            let mut dv = vec![vec![0.0; dim]; n];
            for h in 0..heads {
                let lo = h * dh;
                for i in 0..n {
                    let a_row = &sc.att[h][i];
                    let mut da = vec![0.0; n];
                    for (j, &aj) in a_row.iter().enumerate() {
                        if aj != 0.0 {
                            for c in 0..dh {
                                dv[j][lo + c] += aj * d_heads[i][lo + c];
                            }
                        }
                        da[j] = (0..dh).map(|c| d_heads[i][lo + c] * sc.v[j][lo + c]).sum();
                    }
                    let ds = softmax_backward(a_row, &da);
                    for (j, &dsj) in ds.iter().enumerate() {
                        if dsj == 0.0 {
                            continue;
                        }
                        for c in 0..dh {
                            dq[i][lo + c] += dsj * sc.k[j][lo + c] * scale;
                            dk[j][lo + c] += dsj * sc.q[i][lo + c] * scale;
                        }
                    }
                }
            }
            linear_backward(&sc.x, &mut params.wq, &dq, &mut dx);
            linear_backward(&sc.x, &mut params.wk, &dk, &mut dx);
            linear_backward(&sc.x, &mut params.wv, &dv, &mut dx);
            dx
        }
    }
}

/// Attention weights for the candidate expansion terms of one document.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpansionWeights {
    pub doc_id: String,
    pub term_ids: Vec<u32>,
    /// Owning query indices per term, aligned with `term_ids`.
    pub owners: Vec<Vec<usize>>,
    pub raw: Vec<f64>,
    pub normalized: Vec<f64>,
    /// One match score per clicked query.
    pub match_scores: Vec<f64>,
}

pub(crate) struct MatchPart {
    pub concat_tokens: Vec<u32>,
    pub ranges: Vec<(usize, usize)>,
    pub doc_tokens: Vec<u32>,
    pub attn_queries: Option<AttnCache>,
    pub attn_doc: Option<AttnCache>,
    pub ctx_len: usize,
    pub doc_len: usize,
    pub knrm: Vec<KnrmCache>,
}

pub(crate) struct WeightsCache {
    pub variant: Variant,
    pub owners: Vec<Vec<usize>>,
    pub normalized: Vec<f64>,
    pub match_part: Option<MatchPart>,
}

/// Raw term weights from per-query match scores: each term sums the scores
/// of its owning queries. Forcing all match scores to 1 reproduces the `tf`
/// variant exactly.
pub fn raw_weights_from_match_scores(owners: &[Vec<usize>], match_scores: &[f64]) -> Vec<f64> {
    owners
        .iter()
        .map(|os| os.iter().map(|&i| match_scores[i]).sum())
        .collect()
}

/// Concatenate clicked-query token sequences with masked padding separators.
fn concat_clicked_queries(doc_exp: &DocExpansion) -> (Vec<u32>, Vec<bool>, Vec<(usize, usize)>) {
    let mut tokens = Vec::new();
    let mut mask = Vec::new();
    let mut ranges = Vec::new();
    for (qi, cq) in doc_exp.click_queries.queries.iter().enumerate() {
        if qi > 0 {
            tokens.push(PAD_ID);
            mask.push(false);
        }
        let start = tokens.len();
        tokens.extend_from_slice(&cq.terms);
        mask.extend(std::iter::repeat(true).take(cq.terms.len()));
        ranges.push((start, tokens.len()));
    }
    (tokens, mask, ranges)
}

/// Match score of each clicked query against the document field. All clicked
/// queries are contextualized in one concatenated pass, then split back per
/// query for scoring.
pub fn match_scores(
    embedding: &ParamTensor,
    attn: &AttentionParams,
    w_match: &[f64],
    bank: &KernelBank,
    doc_exp: &DocExpansion,
    doc_tokens: &[u32],
    variant: Variant,
) -> Result<Vec<f64>> {
    match_scores_forward(embedding, attn, w_match, bank, doc_exp, doc_tokens, variant).map(|(m, _)| m)
}

fn match_scores_forward(
    embedding: &ParamTensor,
    attn: &AttentionParams,
    w_match: &[f64],
    bank: &KernelBank,
    doc_exp: &DocExpansion,
    doc_tokens: &[u32],
    variant: Variant,
) -> Result<(Vec<f64>, MatchPart)> {
    let (concat_tokens, mask, ranges) = concat_clicked_queries(doc_exp);
    if concat_tokens.is_empty() {
        return Err(Error::data("empty attention input"));
    }
    let x_q = embed_rows(embedding, &concat_tokens);
    let x_d = embed_rows(embedding, doc_tokens);
    let ctx_len = x_q.len();
    let doc_mask = vec![true; doc_tokens.len()];

    let (ctx_q, attn_queries, ctx_d, attn_doc) = match variant {
        Variant::Full => {
            let (cq, cache_q) = self_att_forward(attn, &x_q, &mask)?;
            let (cd, cache_d) = self_att_forward(attn, &x_d, &doc_mask)?;
            (cq, Some(cache_q), cd, Some(cache_d))
        }
        Variant::NoTrans => (x_q, None, x_d, None),
        Variant::Tf | Variant::None => {
            return Err(Error::data("match scores are undefined for this variant"))
        }
    };

    let mut scores = Vec::with_capacity(ranges.len());
    let mut caches = Vec::with_capacity(ranges.len());
    for &(start, end) in &ranges {
        let (m, cache) = knrm_forward(&ctx_q[start..end], &ctx_d, bank, w_match)?;
        scores.push(m);
        caches.push(cache);
    }
    Ok((
        scores,
        MatchPart {
            concat_tokens,
            ranges,
            doc_tokens: doc_tokens.to_vec(),
            attn_queries,
            attn_doc,
            ctx_len,
            doc_len: doc_tokens.len(),
            knrm: caches,
        },
    ))
}

/// Expansion-term weights for one document.
pub fn expansion_weights(
    embedding: &ParamTensor,
    attn: &AttentionParams,
    w_match: &[f64],
    bank: &KernelBank,
    doc_exp: &DocExpansion,
    doc_tokens: &[u32],
    variant: Variant,
) -> Result<ExpansionWeights> {
    expansion_weights_forward(embedding, attn, w_match, bank, doc_exp, doc_tokens, variant).map(|(w, _)| w)
}

pub(crate) fn expansion_weights_forward(
    embedding: &ParamTensor,
    attn: &AttentionParams,
    w_match: &[f64],
    bank: &KernelBank,
    doc_exp: &DocExpansion,
    doc_tokens: &[u32],
    variant: Variant,
) -> Result<(ExpansionWeights, WeightsCache)> {
    if doc_exp.click_queries.queries.is_empty() || doc_exp.term_set.terms.is_empty() {
        return Err(Error::data("document not expanded"));
    }
    let term_ids: Vec<u32> = doc_exp.term_set.terms.iter().map(|(t, _)| *t).collect();
    let owners: Vec<Vec<usize>> = doc_exp.term_set.terms.iter().map(|(_, o)| o.clone()).collect();

    let (match_scores, raw, normalized, match_part) = match variant {
        Variant::Tf => {
            let m = vec![1.0; doc_exp.click_queries.queries.len()];
            let raw = raw_weights_from_match_scores(&owners, &m);
            let sum: f64 = raw.iter().sum();
            let normalized: Vec<f64> = raw.iter().map(|r| r / sum).collect();
            (m, raw, normalized, None)
        }
        Variant::Full | Variant::NoTrans => {
            let (m, part) = match_scores_forward(embedding, attn, w_match, bank, doc_exp, doc_tokens, variant)?;
            let raw = raw_weights_from_match_scores(&owners, &m);
            let normalized = softmax(&raw);
            (m, raw, normalized, Some(part))
        }
        Variant::None => return Err(Error::data("expansion disabled for variant 'none'")),
    };

    let weights = ExpansionWeights {
        doc_id: doc_exp.term_set.doc_id.clone(),
        term_ids,
        owners: owners.clone(),
        raw,
        normalized: normalized.clone(),
        match_scores,
    };
    let cache = WeightsCache {
        variant,
        owners,
        normalized,
        match_part,
    };
    Ok((weights, cache))
}

/// Backward through the weight computation given gradients on the normalized
/// weights. The `tf` variant has constant weights and contributes nothing.
pub(crate) fn expansion_weights_backward(
    embedding: &mut ParamTensor,
    attn: &mut AttentionParams,
    w_match: &mut ParamTensor,
    bank: &KernelBank,
    cache: &WeightsCache,
    d_normalized: &[f64],
) {
    if cache.variant == Variant::Tf {
        return;
    }
    let part = cache.match_part.as_ref().expect("non-tf cache has a match part");

    let d_raw = softmax_backward(&cache.normalized, d_normalized);
    let n_queries = part.ranges.len();
    let mut dm = vec![0.0; n_queries];
    for (os, dr) in cache.owners.iter().zip(&d_raw) {
        for &i in os {
            dm[i] += dr;
        }
    }

    let dim = embedding.shape[1];
    let mut d_ctx_q = vec![vec![0.0; dim]; part.ctx_len];
    let mut d_ctx_d = vec![vec![0.0; dim]; part.doc_len];
    let mut dw = vec![0.0; w_match.numel()];
    for (qi, &(start, end)) in part.ranges.iter().enumerate() {
        if dm[qi] == 0.0 {
            continue;
        }
        let mut dq = vec![vec![0.0; dim]; end - start];
        knrm_backward(
            &part.knrm[qi],
            bank,
            &w_match.values,
            dm[qi],
            &mut dw,
            &mut dq,
            &mut d_ctx_d,
        );
        for (offset, row) in dq.into_iter().enumerate() {
            for (c, v) in row.into_iter().enumerate() {
                d_ctx_q[start + offset][c] += v;
            }
        }
    }
    for (k, g) in dw.into_iter().enumerate() {
        w_match.add_grad(k, g);
    }

    match (&part.attn_queries, &part.attn_doc) {
        (Some(cq), Some(cd)) => {
            let dx_q = self_att_backward(attn, cq, &d_ctx_q);
            let dx_d = self_att_backward(attn, cd, &d_ctx_d);
            accumulate_embed_grads(embedding, &part.concat_tokens, &dx_q);
            accumulate_embed_grads(embedding, &part.doc_tokens, &dx_d);
        }
        _ => {
            accumulate_embed_grads(embedding, &part.concat_tokens, &d_ctx_q);
            accumulate_embed_grads(embedding, &part.doc_tokens, &d_ctx_d);
        }
    }
}
