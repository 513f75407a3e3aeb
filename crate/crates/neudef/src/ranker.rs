//! The joint scoring function: a kernel-pooling base score per document
//! field, an expansion-field score over attention-weighted candidate terms
//! with a learned embedding projection, and their linear combination with
//! learned scalars. Documents without expansion material score by the base
//! model alone, with the expansion branch never evaluated.
//!
//! Scoring is pure with respect to a read-only model snapshot; candidate
//! sets may be scored in parallel followed by a deterministic sort.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    expansion_weights_backward, expansion_weights_forward, AttentionParams, ExpansionWeights, Variant, WeightsCache,
};
use crate::corpus::{ClickLog, Corpus, Document, Field, Query, Split, Vocabulary};
use crate::expansion::{DocExpansion, ExpansionIndex};
use crate::kernels::{
    cosine, cosine_backward, gaussian, gaussian_dc, knrm_backward, knrm_forward, KernelBank, KnrmCache, PHI_FLOOR,
};
use crate::numeric::{accumulate_embed_grads, embed_rows, matvec, matvec_backward, ParamSet, ParamTensor};
use crate::{Error, Result};

/// Which field feeds the attention matcher as the document side.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionField {
    Title,
    TitleBody,
}

impl std::fmt::Display for AttentionField {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AttentionField::Title => write!(f, "title"),
            AttentionField::TitleBody => write!(f, "title_body"),
        }
    }
}

impl std::str::FromStr for AttentionField {
    type Err = Error;
    fn from_str(s: &str) -> Result<AttentionField> {
        match s {
            "title" => Ok(AttentionField::Title),
            "title_body" => Ok(AttentionField::TitleBody),
            other => Err(Error::Config(format!(
                "unknown attention doc field '{other}' (expected title|title_body)"
            ))),
        }
    }
}

/// Click-log meta features used by the count-based baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetaFeature {
    DocFreq,
    CqCount,
}

impl std::fmt::Display for MetaFeature {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            MetaFeature::DocFreq => write!(f, "doc_freq"),
            MetaFeature::CqCount => write!(f, "cq_count"),
        }
    }
}

/// Per-document counts from the training split of the click log.
#[derive(Debug, Clone, Default)]
pub struct MetaCounts {
    pub doc_freq: BTreeMap<String, u64>,
    pub cq_count: BTreeMap<String, u64>,
}

impl MetaCounts {
    pub fn from_log(log: &ClickLog, split: Split) -> MetaCounts {
        let mut counts = MetaCounts::default();
        for r in &log.records {
            if r.split != split {
                continue;
            }
            *counts.doc_freq.entry(r.doc_id.clone()).or_insert(0) += r.impressions as u64;
            if r.clicked {
                *counts.cq_count.entry(r.doc_id.clone()).or_insert(0) += 1;
            }
        }
        counts
    }

    pub fn count(&self, feature: MetaFeature, doc_id: &str) -> u64 {
        let map = match feature {
            MetaFeature::DocFreq => &self.doc_freq,
            MetaFeature::CqCount => &self.cq_count,
        };
        map.get(doc_id).copied().unwrap_or(0)
    }
}

/// Model architecture snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub dim: usize,
    pub heads: usize,
    pub fields: Vec<Field>,
    pub attention_doc_field: AttentionField,
    pub variant: Variant,
    pub meta_feature: Option<MetaFeature>,
    pub attention_test_mode: bool,
    pub bank: Vec<(f64, f64)>,
}

/// Every learnable tensor. The tensor order here is the contract for the
/// optimizer state and the checkpoint layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub embedding: ParamTensor,
    pub w_title: ParamTensor,
    pub w_body: ParamTensor,
    /// Kernel weights of the clicked-query matcher.
    pub w_match: ParamTensor,
    /// Kernel weights of the expansion-field scorer.
    pub w_expansion: ParamTensor,
    /// Square projection applied to expansion-term embeddings.
    pub projection: ParamTensor,
    pub attention: AttentionParams,
    pub alpha: ParamTensor,
    pub beta: ParamTensor,
    pub field_mix: ParamTensor,
}

impl ParamSet for ModelParams {
    fn tensors(&self) -> Vec<&ParamTensor> {
        let mut out = vec![
            &self.embedding,
            &self.w_title,
            &self.w_body,
            &self.w_match,
            &self.w_expansion,
            &self.projection,
        ];
        out.extend(self.attention.tensor_list());
        out.push(&self.alpha);
        out.push(&self.beta);
        out.push(&self.field_mix);
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut ParamTensor> {
        let mut out = vec![
            &mut self.embedding,
            &mut self.w_title,
            &mut self.w_body,
            &mut self.w_match,
            &mut self.w_expansion,
            &mut self.projection,
        ];
        out.extend(self.attention.tensor_list_mut());
        out.push(&mut self.alpha);
        out.push(&mut self.beta);
        out.push(&mut self.field_mix);
        out
    }
}

/// The complete model: parameters, kernel bank, architecture config and the
/// resolved configuration snapshot carried into checkpoints.
#[derive(Debug, Clone)]
pub struct NeuDefModel {
    pub params: ModelParams,
    pub bank: KernelBank,
    pub config: ModelConfig,
    pub vocab_hash: String,
    pub vocab_size: usize,
    /// Resolved configuration at construction time; recorded verbatim in
    /// checkpoint manifests.
    pub snapshot: BTreeMap<String, String>,
}

impl ParamSet for NeuDefModel {
    fn tensors(&self) -> Vec<&ParamTensor> {
        self.params.tensors()
    }
    fn tensors_mut(&mut self) -> Vec<&mut ParamTensor> {
        self.params.tensors_mut()
    }
}

fn kernel_weight_init(name: &str, bank: &KernelBank) -> ParamTensor {
    // Zeros except the exact-match kernel, so an untrained model scores by
    // lexical matching.
    let mut values = vec![0.0; bank.len()];
    if let Some(i) = bank.exact_index() {
        values[i] = 1.0;
    }
    ParamTensor::new(name, vec![bank.len()], values)
}

impl NeuDefModel {
    pub fn new(
        config: ModelConfig,
        vocab: &Vocabulary,
        seed: u64,
        snapshot: BTreeMap<String, String>,
    ) -> Result<NeuDefModel> {
        if config.fields.is_empty() {
            return Err(Error::Config("at least one scoring field is required".into()));
        }
        if config.meta_feature.is_some() && config.variant != Variant::None {
            return Err(Error::Config(
                "meta-feature scoring requires expansion variant 'none'".into(),
            ));
        }
        let bank = KernelBank::new(&config.bank)?;
        let dim = config.dim;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let emb_values: Vec<f64> = (0..vocab.size() * dim).map(|_| rng.gen_range(-0.05..0.05)).collect();
        let embedding = ParamTensor::new("embedding", vec![vocab.size(), dim], emb_values);
        let attention = if config.attention_test_mode {
            AttentionParams::identity_test(dim)
        } else {
            AttentionParams::new(dim, config.heads, &mut rng)?
        };
        let mut projection_values = vec![0.0; dim * dim];
        for i in 0..dim {
            projection_values[i * dim + i] = 1.0;
        }
        let n_fields = config.fields.len();
        let params = ModelParams {
            embedding,
            w_title: kernel_weight_init("w_title", &bank),
            w_body: kernel_weight_init("w_body", &bank),
            w_match: kernel_weight_init("w_match", &bank),
            w_expansion: kernel_weight_init("w_expansion", &bank),
            projection: ParamTensor::new("projection", vec![dim, dim], projection_values),
            attention,
            alpha: ParamTensor::new("alpha", vec![1], vec![1.0]),
            beta: ParamTensor::new("beta", vec![1], vec![0.1]),
            field_mix: ParamTensor::new("field_mix", vec![n_fields], vec![1.0 / n_fields as f64; n_fields]),
        };
        Ok(NeuDefModel {
            params,
            bank,
            config,
            vocab_hash: vocab.content_hash(),
            vocab_size: vocab.size(),
            snapshot,
        })
    }

    fn field_weights(&self, field: Field) -> &ParamTensor {
        match field {
            Field::Title => &self.params.w_title,
            Field::Body => &self.params.w_body,
        }
    }

    /// Tokens feeding the attention matcher for `doc`; falls back to the
    /// other field when the configured one is empty.
    pub(crate) fn attention_doc_tokens(&self, doc: &Document) -> Vec<u32> {
        match self.config.attention_doc_field {
            AttentionField::Title => {
                if doc.title.is_empty() {
                    doc.body.clone()
                } else {
                    doc.title.clone()
                }
            }
            AttentionField::TitleBody => {
                let mut t = doc.title.clone();
                t.extend_from_slice(&doc.body);
                t
            }
        }
    }
}

/// Per-field base score with an empty-field flag.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldScore {
    pub field: Field,
    pub score: f64,
    pub empty: bool,
}

/// A scored candidate with its full component breakdown.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredDocument {
    pub doc_id: String,
    pub total: f64,
    pub base_fields: Vec<FieldScore>,
    pub base_mixed: f64,
    pub expansion: f64,
    pub expanded: bool,
    /// log(1 + count) when a meta feature is active, else 0.
    pub meta: f64,
    pub alpha: f64,
    pub beta: f64,
    pub mix: Vec<f64>,
}

impl ScoredDocument {
    /// Recombine the breakdown; always within 1e-12 of `total`.
    pub fn recombine(&self) -> f64 {
        self.alpha * self.base_mixed + self.beta * (self.expansion + self.meta)
    }
}

struct FieldCache {
    tokens: Vec<u32>,
    knrm: Option<KnrmCache>,
}

struct WeightedKernelCache {
    term_rows: Vec<Vec<f64>>,
    proj_rows: Vec<Vec<f64>>,
    q_rows: Vec<Vec<f64>>,
    weights: Vec<f64>,
    cos: Vec<Vec<f64>>,
    phi: Vec<Vec<f64>>,
    pooled: Vec<f64>,
}

struct ExpCache {
    weights_cache: WeightsCache,
    term_ids: Vec<u32>,
    kernel: WeightedKernelCache,
    fprime: f64,
}

pub(crate) struct ScoreCache {
    q_terms: Vec<u32>,
    base: Vec<FieldCache>,
    base_scores: Vec<f64>,
    base_mixed: f64,
    expansion: Option<ExpCache>,
    meta_value: f64,
    has_extra: bool,
}

/// Expansion-field kernel: soft counts weighted per term and computed on
/// projected term embeddings.
fn weighted_kernel_forward(
    q_rows: &[Vec<f64>],
    proj_rows: &[Vec<f64>],
    weights: &[f64],
    bank: &KernelBank,
    w: &[f64],
) -> Result<(f64, Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<f64>)> {
    if q_rows.is_empty() {
        return Err(Error::data("empty query"));
    }
    let kn = bank.len();
    let mut cos = vec![vec![0.0; proj_rows.len()]; q_rows.len()];
    let mut phi = vec![vec![0.0; kn]; q_rows.len()];
    let mut pooled = vec![0.0; kn];
    for (qi, q) in q_rows.iter().enumerate() {
        for (tj, p) in proj_rows.iter().enumerate() {
            cos[qi][tj] = cosine(q, p);
        }
        for k in 0..kn {
            let mut v = 0.0;
            for (tj, &a) in weights.iter().enumerate() {
                v += a * gaussian(cos[qi][tj], bank.mu(k), bank.sigma(k));
            }
            phi[qi][k] = v;
            pooled[k] += v.max(PHI_FLOOR).ln();
        }
    }
    let score = w.iter().zip(&pooled).map(|(wk, pk)| wk * pk).sum();
    Ok((score, cos, phi, pooled))
}

#[allow(clippy::too_many_arguments)]
fn weighted_kernel_backward(
    cache: &WeightedKernelCache,
    bank: &KernelBank,
    w: &[f64],
    d_score: f64,
    dw: &mut [f64],
    dq: &mut [Vec<f64>],
    dproj: &mut [Vec<f64>],
    dweights: &mut [f64],
) {
    let kn = bank.len();
    for k in 0..kn {
        dw[k] += d_score * cache.pooled[k];
    }
    for (qi, cos_row) in cache.cos.iter().enumerate() {
        let mut dphi = vec![0.0; kn];
        let mut live = false;
        for k in 0..kn {
            let p = cache.phi[qi][k];
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
        for (tj, &c) in cos_row.iter().enumerate() {
            let a = cache.weights[tj];
            let mut dc = 0.0;
            for k in 0..kn {
                if dphi[k] == 0.0 {
                    continue;
                }
                let g = gaussian(c, bank.mu(k), bank.sigma(k));
                dweights[tj] += dphi[k] * g;
                dc += dphi[k] * a * gaussian_dc(c, bank.mu(k), bank.sigma(k), g);
            }
            if dc != 0.0 {
                cosine_backward(&cache.q_rows[qi], &cache.proj_rows[tj], dc, &mut dq[qi], &mut dproj[tj]);
            }
        }
    }
}

/// Base score of one field: the kernel-pooling score on raw embeddings with
/// that field's kernel weights. An empty field contributes 0 with a flag.
pub fn base_score(model: &NeuDefModel, q_terms: &[u32], doc: &Document, field: Field) -> Result<FieldScore> {
    if q_terms.is_empty() {
        return Err(Error::data("empty query"));
    }
    let tokens = doc.field(field);
    if tokens.is_empty() {
        return Ok(FieldScore {
            field,
            score: 0.0,
            empty: true,
        });
    }
    let q_rows = embed_rows(&model.params.embedding, q_terms);
    let d_rows = embed_rows(&model.params.embedding, tokens);
    let score = crate::kernels::knrm_score(&q_rows, &d_rows, &model.bank, &model.field_weights(field).values)?;
    Ok(FieldScore {
        field,
        score,
        empty: false,
    })
}

/// Expansion-field score for precomputed term weights.
pub fn expansion_score(model: &NeuDefModel, q_terms: &[u32], weights: &ExpansionWeights) -> Result<f64> {
    if q_terms.is_empty() {
        return Err(Error::data("empty query"));
    }
    if weights.normalized.iter().all(|&w| w == 0.0) {
        return Err(Error::data("degenerate expansion weights"));
    }
    let q_rows = embed_rows(&model.params.embedding, q_terms);
    let term_rows = embed_rows(&model.params.embedding, &weights.term_ids);
    let proj_rows: Vec<Vec<f64>> = term_rows.iter().map(|r| matvec(&model.params.projection, r)).collect();
    let (score, ..) = weighted_kernel_forward(
        &q_rows,
        &proj_rows,
        &weights.normalized,
        &model.bank,
        &model.params.w_expansion.values,
    )?;
    Ok(score)
}

pub(crate) fn neudef_forward(
    model: &NeuDefModel,
    q_terms: &[u32],
    doc: &Document,
    doc_exp: Option<&DocExpansion>,
    meta_count: Option<u64>,
) -> Result<(ScoredDocument, ScoreCache)> {
    if q_terms.is_empty() {
        return Err(Error::data("empty query"));
    }
    let p = &model.params;
    let q_rows = embed_rows(&p.embedding, q_terms);

    let mut base = Vec::with_capacity(model.config.fields.len());
    let mut base_scores = Vec::with_capacity(model.config.fields.len());
    let mut field_scores = Vec::with_capacity(model.config.fields.len());
    let mut base_mixed = 0.0;
    for (fi, &field) in model.config.fields.iter().enumerate() {
        let tokens = doc.field(field).to_vec();
        if tokens.is_empty() {
            base.push(FieldCache { tokens, knrm: None });
            base_scores.push(0.0);
            field_scores.push(FieldScore {
                field,
                score: 0.0,
                empty: true,
            });
            continue;
        }
        let d_rows = embed_rows(&p.embedding, &tokens);
        let (s, cache) = knrm_forward(&q_rows, &d_rows, &model.bank, &model.field_weights(field).values)?;
        base_mixed += p.field_mix.values[fi] * s;
        base.push(FieldCache {
            tokens,
            knrm: Some(cache),
        });
        base_scores.push(s);
        field_scores.push(FieldScore {
            field,
            score: s,
            empty: false,
        });
    }

    let alpha = p.alpha.values[0];
    let beta = p.beta.values[0];

    let mut expansion_cache = None;
    let mut fprime = 0.0;
    let mut expanded = false;
    if model.config.variant != Variant::None {
        if let Some(exp) = doc_exp {
            let doc_tokens = model.attention_doc_tokens(doc);
            let (weights, weights_cache) = expansion_weights_forward(
                &p.embedding,
                &p.attention,
                &p.w_match.values,
                &model.bank,
                exp,
                &doc_tokens,
                model.config.variant,
            )?;
            let term_rows = embed_rows(&p.embedding, &weights.term_ids);
            let proj_rows: Vec<Vec<f64>> = term_rows.iter().map(|r| matvec(&p.projection, r)).collect();
            let (s, cos, phi, pooled) = weighted_kernel_forward(
                &q_rows,
                &proj_rows,
                &weights.normalized,
                &model.bank,
                &p.w_expansion.values,
            )?;
            fprime = s;
            expanded = true;
            expansion_cache = Some(ExpCache {
                weights_cache,
                term_ids: weights.term_ids.clone(),
                kernel: WeightedKernelCache {
                    term_rows,
                    proj_rows,
                    q_rows: q_rows.clone(),
                    weights: weights.normalized.clone(),
                    cos,
                    phi,
                    pooled,
                },
                fprime: s,
            });
        }
    }

    let meta_value = meta_count.map(|c| (1.0 + c as f64).ln()).unwrap_or(0.0);
    let has_extra = expanded || meta_count.is_some();
    // Unexpanded documents (no meta feature) score by the base model alone;
    // the expansion branch is never touched.
    let total = if has_extra {
        alpha * base_mixed + beta * (fprime + meta_value)
    } else {
        alpha * base_mixed
    };

    let scored = ScoredDocument {
        doc_id: doc.doc_id.clone(),
        total,
        base_fields: field_scores,
        base_mixed,
        expansion: fprime,
        expanded,
        meta: meta_value,
        alpha,
        beta,
        mix: p.field_mix.values.clone(),
    };
    let cache = ScoreCache {
        q_terms: q_terms.to_vec(),
        base,
        base_scores,
        base_mixed,
        expansion: expansion_cache,
        meta_value,
        has_extra,
    };
    Ok((scored, cache))
}

/// Accumulate gradients of `d_total` through a cached forward pass.
pub(crate) fn neudef_backward(model: &mut NeuDefModel, cache: &ScoreCache, d_total: f64) {
    let bank = model.bank.clone();
    let fields = model.config.fields.clone();
    let p = &mut model.params;
    let alpha = p.alpha.values[0];
    let beta = p.beta.values[0];
    let dim = p.embedding.shape[1];

    p.alpha.add_grad(0, d_total * cache.base_mixed);
    let d_base_mixed = d_total * alpha;
    if cache.has_extra {
        let extra = cache.expansion.as_ref().map(|e| e.fprime).unwrap_or(0.0) + cache.meta_value;
        p.beta.add_grad(0, d_total * extra);
    }

    for (fi, field_cache) in cache.base.iter().enumerate() {
        p.field_mix.add_grad(fi, d_base_mixed * cache.base_scores[fi]);
        let Some(knrm_cache) = &field_cache.knrm else {
            continue;
        };
        let d_s = d_base_mixed * p.field_mix.values[fi];
        if d_s == 0.0 {
            continue;
        }
        let w_values = match fields[fi] {
            Field::Title => p.w_title.values.clone(),
            Field::Body => p.w_body.values.clone(),
        };
        let mut dw = vec![0.0; w_values.len()];
        let mut dq = vec![vec![0.0; dim]; cache.q_terms.len()];
        let mut dd = vec![vec![0.0; dim]; field_cache.tokens.len()];
        knrm_backward(knrm_cache, &bank, &w_values, d_s, &mut dw, &mut dq, &mut dd);
        let w_tensor = match fields[fi] {
            Field::Title => &mut p.w_title,
            Field::Body => &mut p.w_body,
        };
        for (k, g) in dw.into_iter().enumerate() {
            w_tensor.add_grad(k, g);
        }
        accumulate_embed_grads(&mut p.embedding, &cache.q_terms, &dq);
        accumulate_embed_grads(&mut p.embedding, &field_cache.tokens, &dd);
    }

    if let Some(exp) = &cache.expansion {
        let d_fprime = d_total * beta;
        let kn = bank.len();
        let mut dw = vec![0.0; kn];
        let mut dq = vec![vec![0.0; dim]; cache.q_terms.len()];
        let mut dproj = vec![vec![0.0; dim]; exp.kernel.proj_rows.len()];
        let mut dweights = vec![0.0; exp.kernel.weights.len()];
        weighted_kernel_backward(
            &exp.kernel,
            &bank,
            &p.w_expansion.values,
            d_fprime,
            &mut dw,
            &mut dq,
            &mut dproj,
            &mut dweights,
        );
        for (k, g) in dw.into_iter().enumerate() {
            p.w_expansion.add_grad(k, g);
        }
        accumulate_embed_grads(&mut p.embedding, &cache.q_terms, &dq);
        for ((term_row, dp), &term_id) in exp.kernel.term_rows.iter().zip(&dproj).zip(&exp.term_ids) {
            let de = matvec_backward(&mut p.projection, term_row, dp);
            if p.embedding.trainable {
                let base = term_id as usize * dim;
                for (c, v) in de.into_iter().enumerate() {
                    p.embedding.grad[base + c] += v;
                }
            }
        }
        expansion_weights_backward(
            &mut p.embedding,
            &mut p.attention,
            &mut p.w_match,
            &bank,
            &exp.weights_cache,
            &dweights,
        );
    }
}

/// The joint score of a query against a document.
pub fn neudef_score(
    model: &NeuDefModel,
    q_terms: &[u32],
    doc: &Document,
    doc_exp: Option<&DocExpansion>,
    meta_count: Option<u64>,
) -> Result<ScoredDocument> {
    neudef_forward(model, q_terms, doc, doc_exp, meta_count).map(|(s, _)| s)
}

/// Count-based baseline score: alpha * base + beta * log(1 + count).
pub fn meta_feature_score(
    model: &NeuDefModel,
    q_terms: &[u32],
    doc: &Document,
    feature: MetaFeature,
    counts: &MetaCounts,
) -> Result<ScoredDocument> {
    let count = counts.count(feature, &doc.doc_id);
    neudef_score(model, q_terms, doc, None, Some(count))
}

/// Everything needed to resolve a document's scoring inputs.
#[derive(Clone, Copy)]
pub struct ScoringContext<'a> {
    pub corpus: &'a Corpus,
    pub queries: &'a BTreeMap<String, Query>,
    pub expansion: Option<&'a ExpansionIndex>,
    pub meta: Option<&'a MetaCounts>,
}

impl ScoringContext<'_> {
    pub(crate) fn doc_inputs(&self, model: &NeuDefModel, doc_id: &str) -> (Option<&DocExpansion>, Option<u64>) {
        let doc_exp = if model.config.variant == Variant::None {
            None
        } else {
            self.expansion.and_then(|ix| ix.get(doc_id))
        };
        let meta_count = model
            .config
            .meta_feature
            .map(|f| self.meta.map(|m| m.count(f, doc_id)).unwrap_or(0));
        (doc_exp, meta_count)
    }

    pub fn score(&self, model: &NeuDefModel, q_terms: &[u32], doc: &Document) -> Result<ScoredDocument> {
        let (doc_exp, meta_count) = self.doc_inputs(model, &doc.doc_id);
        neudef_score(model, q_terms, doc, doc_exp, meta_count)
    }
}

/// Score candidates and order them by descending total score, ties broken by
/// ascending doc id.
pub fn rank(
    model: &NeuDefModel,
    q_terms: &[u32],
    candidates: &[&Document],
    ctx: &ScoringContext,
) -> Result<Vec<ScoredDocument>> {
    let mut scored = Vec::with_capacity(candidates.len());
    for doc in candidates {
        scored.push(ctx.score(model, q_terms, doc)?);
    }
    scored.sort_by(|a, b| b.total.total_cmp(&a.total).then_with(|| a.doc_id.cmp(&b.doc_id)));
    Ok(scored)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::build_vocabulary;
    use crate::expansion::{ClickQuery, ClickQuerySet, ExpansionTermSet};

    fn toy_model(variant: Variant, seed: u64) -> NeuDefModel {
        let vocab_text: Vec<String> = (0..20).map(|i| format!("w{i}")).collect();
        let vocab = build_vocabulary(vec![vocab_text.join(" ")], Vec::<String>::new(), 1).unwrap();
        let config = ModelConfig {
            dim: 4,
            heads: 2,
            fields: vec![Field::Title, Field::Body],
            attention_doc_field: AttentionField::Title,
            variant,
            meta_feature: None,
            attention_test_mode: false,
            bank: vec![(1.0, 1e-3), (0.5, 0.4), (0.0, 0.5)],
        };
        NeuDefModel::new(config, &vocab, seed, BTreeMap::new()).unwrap()
    }

    fn randomize(model: &mut NeuDefModel, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for t in model.params.tensors_mut() {
            for v in &mut t.values {
                *v += rng.gen_range(-0.3..0.3);
            }
        }
    }

    fn doc(id: &str, title: &[u32], body: &[u32]) -> Document {
        Document {
            doc_id: id.into(),
            title: title.to_vec(),
            body: body.to_vec(),
        }
    }

    fn doc_exp(queries: &[(&str, &[u32])]) -> DocExpansion {
        let clicked: Vec<ClickQuery> = queries
            .iter()
            .map(|(id, terms)| ClickQuery {
                query_id: id.to_string(),
                terms: terms.to_vec(),
                click_count: 1,
            })
            .collect();
        let mut term_order = Vec::new();
        let mut owners: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (qi, cq) in clicked.iter().enumerate() {
            for &t in &cq.terms {
                let e = owners.entry(t).or_insert_with(|| {
                    term_order.push(t);
                    Vec::new()
                });
                if e.last() != Some(&qi) {
                    e.push(qi);
                }
            }
        }
        DocExpansion {
            click_queries: ClickQuerySet {
                doc_id: "d1".into(),
                total_click_queries: clicked.len(),
                queries: clicked,
            },
            term_set: ExpansionTermSet {
                doc_id: "d1".into(),
                terms: term_order.into_iter().map(|t| (t, owners[&t].clone())).collect(),
            },
        }
    }

    #[test]
    fn base_score_delegates_to_kernel_score() {
        let mut model = toy_model(Variant::None, 1);
        randomize(&mut model, 2);
        let d = doc("d1", &[2, 3, 4], &[5, 6]);
        let got = base_score(&model, &[7, 8], &d, Field::Title).unwrap();
        let q_rows = embed_rows(&model.params.embedding, &[7, 8]);
        let d_rows = embed_rows(&model.params.embedding, &[2, 3, 4]);
        let oracle =
            crate::kernels::knrm_score(&q_rows, &d_rows, &model.bank, &model.params.w_title.values).unwrap();
        assert_eq!(got.score, oracle);
        assert!(!got.empty);
    }

    #[test]
    fn empty_body_contributes_zero_with_flag() {
        let model = toy_model(Variant::None, 1);
        let d = doc("d1", &[2, 3], &[]);
        let got = base_score(&model, &[4], &d, Field::Body).unwrap();
        assert_eq!(got.score, 0.0);
        assert!(got.empty);
        let scored = neudef_score(&model, &[4], &d, None, None).unwrap();
        assert!(scored.base_fields[1].empty);
    }

    #[test]
    fn unexpanded_document_withdraws_to_alpha_times_base() {
        let mut model = toy_model(Variant::Full, 3);
        randomize(&mut model, 4);
        let d = doc("d1", &[2, 3], &[5, 6, 7]);
        let scored = neudef_score(&model, &[8, 9], &d, None, None).unwrap();
        assert!(!scored.expanded);
        assert_eq!(scored.expansion, 0.0);
        // Bit-exact withdrawal.
        assert_eq!(scored.total, scored.alpha * scored.base_mixed);
    }

    #[test]
    fn score_decomposition_recombines() {
        let mut model = toy_model(Variant::Full, 5);
        randomize(&mut model, 6);
        let d = doc("d1", &[2, 3], &[5, 6, 7]);
        let exp = doc_exp(&[("q1", &[4, 10]), ("q2", &[10, 11])]);
        let scored = neudef_score(&model, &[8, 9], &d, Some(&exp), None).unwrap();
        assert!(scored.expanded);
        assert!((scored.total - scored.recombine()).abs() < 1e-12);
    }

    #[test]
    fn beta_zero_reduces_to_scaled_base() {
        let mut model = toy_model(Variant::Full, 7);
        randomize(&mut model, 8);
        model.params.beta.values[0] = 0.0;
        let d = doc("d1", &[2, 3], &[5]);
        let exp = doc_exp(&[("q1", &[4, 10])]);
        let scored = neudef_score(&model, &[8], &d, Some(&exp), None).unwrap();
        assert!((scored.total - scored.alpha * scored.base_mixed).abs() < 1e-12);
    }

    #[test]
    fn alpha_one_beta_one_sums_components() {
        let mut model = toy_model(Variant::Full, 9);
        randomize(&mut model, 10);
        model.params.alpha.values[0] = 1.0;
        model.params.beta.values[0] = 1.0;
        let d = doc("d1", &[2, 3], &[5]);
        let exp = doc_exp(&[("q1", &[4, 10])]);
        let scored = neudef_score(&model, &[8], &d, Some(&exp), None).unwrap();
        assert!((scored.total - (scored.base_mixed + scored.expansion)).abs() < 1e-12);
    }

    #[test]
    fn expansion_score_single_exact_term() {
        // One expansion term with weight 1 whose projected embedding equals
        // the query embedding: the exact kernel count is 1, log 1 = 0.
        let mut model = toy_model(Variant::Full, 11);
        model.params.w_expansion.values = vec![1.0, 0.0, 0.0];
        let weights = ExpansionWeights {
            doc_id: "d1".into(),
            term_ids: vec![5],
            owners: vec![vec![0]],
            raw: vec![1.0],
            normalized: vec![1.0],
            match_scores: vec![1.0],
        };
        // Query IS the same token, so cosine(q, P t) = 1 with P = identity.
        let bank_exact_only = vec![(1.0, 1e-3)];
        model.config.bank = bank_exact_only.clone();
        model.bank = KernelBank::new(&bank_exact_only).unwrap();
        model.params.w_expansion = ParamTensor::new("w_expansion", vec![1], vec![1.0]);
        let s = expansion_score(&model, &[5], &weights).unwrap();
        assert!(s.abs() < 1e-12);
    }

    #[test]
    fn equal_cosine_terms_behave_like_single_term() {
        let mut model = toy_model(Variant::Full, 12);
        randomize(&mut model, 13);
        // Two copies of the same term with weights 0.5 each.
        let two = ExpansionWeights {
            doc_id: "d1".into(),
            term_ids: vec![5, 5],
            owners: vec![vec![0], vec![1]],
            raw: vec![0.5, 0.5],
            normalized: vec![0.5, 0.5],
            match_scores: vec![1.0, 1.0],
        };
        let one = ExpansionWeights {
            doc_id: "d1".into(),
            term_ids: vec![5],
            owners: vec![vec![0]],
            raw: vec![1.0],
            normalized: vec![1.0],
            match_scores: vec![1.0],
        };
        let s2 = expansion_score(&model, &[8, 9], &two).unwrap();
        let s1 = expansion_score(&model, &[8, 9], &one).unwrap();
        assert!((s1 - s2).abs() < 1e-12);
    }

    #[test]
    fn degenerate_weights_are_rejected() {
        let model = toy_model(Variant::Full, 14);
        let weights = ExpansionWeights {
            doc_id: "d1".into(),
            term_ids: vec![5],
            owners: vec![vec![0]],
            raw: vec![0.0],
            normalized: vec![0.0],
            match_scores: vec![0.0],
        };
        let err = expansion_score(&model, &[8], &weights).unwrap_err();
        assert!(err.to_string().contains("degenerate expansion weights"));
    }

    #[test]
    fn projection_identity_preserves_raw_cosines() {
        let model = toy_model(Variant::Full, 15);
        let e5 = model.params.embedding.row(5).to_vec();
        let proj = matvec(&model.params.projection, &e5);
        assert_eq!(e5, proj);
        let q = model.params.embedding.row(8);
        assert_eq!(cosine(q, &e5), cosine(q, &proj));
    }

    #[test]
    fn tf_expansion_matches_brute_force_oracle() {
        // P = identity, tf weights on a two-query toy document: compare
        // against a scalar triple-loop evaluation of the weighted kernel.
        let mut model = toy_model(Variant::Tf, 16);
        randomize(&mut model, 17);
        // Restore the identity projection after randomization.
        let dim = model.config.dim;
        let mut ident = vec![0.0; dim * dim];
        for i in 0..dim {
            ident[i * dim + i] = 1.0;
        }
        model.params.projection.values = ident;

        let exp = doc_exp(&[("q1", &[4, 10]), ("q2", &[10, 11])]);
        let d = doc("d1", &[2, 3], &[5]);
        let q_terms = [8u32, 9];
        let scored = neudef_score(&model, &q_terms, &d, Some(&exp), None).unwrap();

        // Oracle: tf weights proportional to owning-query counts.
        let weights = [1.0 / 4.0, 2.0 / 4.0, 1.0 / 4.0];
        let term_ids = [4u32, 10, 11];
        let mut oracle = 0.0;
        for (k, (mu, sigma)) in model.bank.pairs().into_iter().enumerate() {
            let mut pooled = 0.0;
            for &q in &q_terms {
                let q_row = model.params.embedding.row(q as usize);
                let mut phi = 0.0;
                for (tj, &t) in term_ids.iter().enumerate() {
                    let t_row = model.params.embedding.row(t as usize);
                    phi += weights[tj] * gaussian(cosine(q_row, t_row), mu, sigma);
                }
                pooled += phi.max(PHI_FLOOR).ln();
            }
            oracle += model.params.w_expansion.values[k] * pooled;
        }
        assert!((scored.expansion - oracle).abs() < 1e-12);
    }

    #[test]
    fn rank_orders_by_score_with_doc_id_ties() {
        let mut model = toy_model(Variant::None, 18);
        randomize(&mut model, 19);
        let corpus = Corpus {
            docs: vec![
                ("a".to_string(), doc("a", &[2, 3], &[4])),
                ("b".to_string(), doc("b", &[2, 3], &[4])),
                ("c".to_string(), doc("c", &[9, 10], &[11])),
            ]
            .into_iter()
            .collect(),
        };
        let queries = BTreeMap::new();
        let ctx = ScoringContext {
            corpus: &corpus,
            queries: &queries,
            expansion: None,
            meta: None,
        };
        let candidates: Vec<&Document> = corpus.docs.values().collect();
        let ranked = rank(&model, &[2, 3], &candidates, &ctx).unwrap();
        assert_eq!(ranked.len(), 3);
        // Identical docs a and b tie: lexicographically smaller id first.
        let pos_a = ranked.iter().position(|s| s.doc_id == "a").unwrap();
        let pos_b = ranked.iter().position(|s| s.doc_id == "b").unwrap();
        assert_eq!(ranked[pos_a].total, ranked[pos_b].total);
        assert!(pos_a < pos_b);
        for w in ranked.windows(2) {
            assert!(w[0].total >= w[1].total);
        }
        let single = rank(&model, &[2, 3], &candidates[..1], &ctx).unwrap();
        assert_eq!(single.len(), 1);
    }

    #[test]
    fn meta_feature_examples() {
        let vocab_text: Vec<String> = (0..20).map(|i| format!("w{i}")).collect();
        let vocab = build_vocabulary(vec![vocab_text.join(" ")], Vec::<String>::new(), 1).unwrap();
        let config = ModelConfig {
            dim: 4,
            heads: 2,
            fields: vec![Field::Title],
            attention_doc_field: AttentionField::Title,
            variant: Variant::None,
            meta_feature: Some(MetaFeature::CqCount),
            attention_test_mode: false,
            bank: vec![(1.0, 1e-3), (0.0, 0.5)],
        };
        let mut model = NeuDefModel::new(config, &vocab, 1, BTreeMap::new()).unwrap();
        randomize(&mut model, 2);
        let d = doc("d1", &[2, 3], &[]);
        let mut counts = MetaCounts::default();

        // Count 0: the feature term is 0.
        let s0 = meta_feature_score(&model, &[4], &d, MetaFeature::CqCount, &counts).unwrap();
        assert_eq!(s0.meta, 0.0);

        // Count 9: log(10).
        counts.cq_count.insert("d1".into(), 9);
        let s9 = meta_feature_score(&model, &[4], &d, MetaFeature::CqCount, &counts).unwrap();
        assert!((s9.meta - 10.0f64.ln()).abs() < 1e-12);
        assert!((s9.meta - 2.3026).abs() < 1e-4);
        assert!((s9.total - (s9.alpha * s9.base_mixed + s9.beta * s9.meta)).abs() < 1e-12);

        // beta = 0 reduces to the base ranker.
        model.params.beta.values[0] = 0.0;
        let sb = meta_feature_score(&model, &[4], &d, MetaFeature::CqCount, &counts).unwrap();
        assert!((sb.total - sb.alpha * sb.base_mixed).abs() < 1e-12);
    }

    #[test]
    fn meta_feature_with_expansion_variant_is_rejected() {
        let vocab = build_vocabulary(vec!["a b".to_string()], Vec::<String>::new(), 1).unwrap();
        let config = ModelConfig {
            dim: 4,
            heads: 2,
            fields: vec![Field::Title],
            attention_doc_field: AttentionField::Title,
            variant: Variant::Full,
            meta_feature: Some(MetaFeature::DocFreq),
            attention_test_mode: false,
            bank: vec![(1.0, 1e-3)],
        };
        assert!(NeuDefModel::new(config, &vocab, 1, BTreeMap::new()).is_err());
    }
}
