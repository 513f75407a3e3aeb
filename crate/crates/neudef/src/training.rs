//! Pair generation, the pairwise hinge loss, the training loop with Adam and
//! early stopping, and checkpointing.
//!
//! Checkpoint layout: an 8-byte magic, a little-endian u64 manifest length,
//! a JSON manifest (format version, vocabulary hash, resolved configuration,
//! tensor names and shapes), then the raw little-endian `f64` arrays in
//! manifest order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{ClickRecord, Split, Vocabulary};
use crate::numeric::{adam_step, AdamState, ParamSet};
use crate::ranker::{neudef_backward, neudef_forward, NeuDefModel, ScoringContext};
use crate::{Error, Result};

/// Where pair labels come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelSource {
    Clicks,
    Grades,
}

impl std::fmt::Display for LabelSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LabelSource::Clicks => write!(f, "clicks"),
            LabelSource::Grades => write!(f, "grades"),
        }
    }
}

impl std::str::FromStr for LabelSource {
    type Err = Error;
    fn from_str(s: &str) -> Result<LabelSource> {
        match s {
            "clicks" => Ok(LabelSource::Clicks),
            "grades" => Ok(LabelSource::Grades),
            other => Err(Error::Config(format!(
                "unknown label source '{other}' (expected clicks|grades)"
            ))),
        }
    }
}

/// One preference pair: the positive document should outscore the negative.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingPair {
    pub query_id: String,
    pub pos: String,
    pub neg: String,
}

#[derive(Debug, Clone, Default)]
pub struct PairStats {
    /// Queries that produced no valid pair.
    pub skipped_queries: usize,
}

/// Enumerate training pairs from one split of the click log. Clicks source:
/// the cross product of clicked and unclicked documents per query. Grades
/// source: all document pairs whose grade difference exceeds `grade_margin`.
/// Output order is deterministic (sorted by query id, then doc ids).
pub fn generate_pairs(
    records: &[ClickRecord],
    split: Split,
    label_source: LabelSource,
    grade_margin: f64,
) -> (Vec<TrainingPair>, PairStats) {
    let mut per_query: BTreeMap<&str, Vec<&ClickRecord>> = BTreeMap::new();
    for r in records {
        if r.split == split {
            per_query.entry(&r.query_id).or_default().push(r);
        }
    }
    let mut pairs = Vec::new();
    let mut stats = PairStats::default();
    for (qid, mut recs) in per_query {
        recs.sort_by(|a, b| a.doc_id.cmp(&b.doc_id));
        let before = pairs.len();
        match label_source {
            LabelSource::Clicks => {
                let clicked: Vec<&&ClickRecord> = recs.iter().filter(|r| r.clicked).collect();
                let unclicked: Vec<&&ClickRecord> = recs.iter().filter(|r| !r.clicked).collect();
                for pos in &clicked {
                    for neg in &unclicked {
                        pairs.push(TrainingPair {
                            query_id: qid.to_string(),
                            pos: pos.doc_id.clone(),
                            neg: neg.doc_id.clone(),
                        });
                    }
                }
            }
            LabelSource::Grades => {
                let graded: Vec<(&str, f64)> = recs
                    .iter()
                    .filter_map(|r| r.grade.map(|g| (r.doc_id.as_str(), g)))
                    .collect();
                for (pos_id, pos_g) in &graded {
                    for (neg_id, neg_g) in &graded {
                        if pos_g - neg_g > grade_margin {
                            pairs.push(TrainingPair {
                                query_id: qid.to_string(),
                                pos: pos_id.to_string(),
                                neg: neg_id.to_string(),
                            });
                        }
                    }
                }
            }
        }
        if pairs.len() == before {
            stats.skipped_queries += 1;
        }
    }
    (pairs, stats)
}

/// Pairwise hinge loss with unit margin; the subgradient is zero when the
/// margin is satisfied.
pub fn hinge_loss(score_pos: f64, score_neg: f64) -> f64 {
    (1.0 - score_pos + score_neg).max(0.0)
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub adam_eps: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub validation_fraction: f64,
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub label_source: LabelSource,
    pub grade_margin: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.001,
            batch_size: 64,
            adam_eps: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            validation_fraction: 0.2,
            patience: 3,
            max_epochs: 30,
            seed: 42,
            label_source: LabelSource::Clicks,
            grade_margin: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: NeuDefModel,
    pub history: Vec<EpochStats>,
    /// Epoch whose parameters were returned (best validation loss).
    pub best_epoch: Option<usize>,
}

fn pair_loss(model: &NeuDefModel, pair: &TrainingPair, ctx: &ScoringContext) -> Result<f64> {
    let query = ctx
        .queries
        .get(&pair.query_id)
        .ok_or_else(|| Error::Data(format!("unknown query '{}' in training pair", pair.query_id)))?;
    let mut side = |doc_id: &str| -> Result<f64> {
        let doc = ctx
            .corpus
            .get(doc_id)
            .ok_or_else(|| Error::Data(format!("unknown doc '{doc_id}' in training pair")))?;
        let (doc_exp, meta) = ctx.doc_inputs(model, doc_id);
        Ok(neudef_forward(model, &query.terms, doc, doc_exp, meta)?.0.total)
    };
    Ok(hinge_loss(side(&pair.pos)?, side(&pair.neg)?))
}

/// Train with shuffled batches, Adam and validation-loss early stopping.
/// Returns the parameters of the best-validation epoch. Deterministic given
/// (seed, data, config).
pub fn train(
    mut model: NeuDefModel,
    pairs: &[TrainingPair],
    ctx: &ScoringContext,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    if pairs.is_empty() {
        return Err(Error::data("zero training pairs"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    if !(cfg.validation_fraction > 0.0 && cfg.validation_fraction < 1.0) {
        return Err(Error::Config("validation_fraction must be in (0, 1)".into()));
    }
    if cfg.max_epochs == 0 {
        return Ok(TrainOutcome {
            model,
            history: Vec::new(),
            best_epoch: None,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut indices: Vec<usize> = (0..pairs.len()).collect();
    indices.shuffle(&mut rng);
    let mut val_size = (pairs.len() as f64 * cfg.validation_fraction).round() as usize;
    if val_size >= pairs.len() {
        val_size = pairs.len() - 1;
    }
    let (val_idx, train_idx) = indices.split_at(val_size);
    let val_idx = val_idx.to_vec();
    let mut train_idx = train_idx.to_vec();
    if train_idx.is_empty() {
        return Err(Error::data("zero training pairs"));
    }

    let mut adam = AdamState::new(cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps, &model);
    let mut history = Vec::new();
    let mut best_val = f64::INFINITY;
    let mut best_epoch = None;
    let mut best_params = model.params.clone();
    let mut epochs_without_improvement = 0usize;

    for epoch in 1..=cfg.max_epochs {
        train_idx.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut loss_count = 0usize;
        for (bi, batch) in train_idx.chunks(cfg.batch_size).enumerate() {
            model.zero_grads();
            let upstream = 1.0 / batch.len() as f64;
            let mut batch_loss = 0.0;
            for &pi in batch {
                let pair = &pairs[pi];
                let query = ctx
                    .queries
                    .get(&pair.query_id)
                    .ok_or_else(|| Error::Data(format!("unknown query '{}' in training pair", pair.query_id)))?;
                let mut forward = |doc_id: &str| -> Result<_> {
                    let doc = ctx
                        .corpus
                        .get(doc_id)
                        .ok_or_else(|| Error::Data(format!("unknown doc '{doc_id}' in training pair")))?;
                    let (doc_exp, meta) = ctx.doc_inputs(&model, doc_id);
                    neudef_forward(&model, &query.terms, doc, doc_exp, meta)
                };
                let (pos_scored, pos_cache) = forward(&pair.pos)?;
                let (neg_scored, neg_cache) = forward(&pair.neg)?;
                let loss = hinge_loss(pos_scored.total, neg_scored.total);
                if !loss.is_finite() {
                    return Err(Error::Numeric(format!("non-finite loss in batch {bi}")));
                }
                batch_loss += loss;
                if loss > 0.0 {
                    neudef_backward(&mut model, &pos_cache, -upstream);
                    neudef_backward(&mut model, &neg_cache, upstream);
                }
            }
            loss_sum += batch_loss;
            loss_count += batch.len();
            adam_step(&mut model, &mut adam)?;
        }
        let train_loss = loss_sum / loss_count as f64;
        let val_loss = if val_idx.is_empty() {
            train_loss
        } else {
            let mut sum = 0.0;
            for &pi in &val_idx {
                sum += pair_loss(&model, &pairs[pi], ctx)?;
            }
            sum / val_idx.len() as f64
        };
        history.push(EpochStats {
            epoch,
            train_loss,
            val_loss,
        });
        if val_loss < best_val {
            best_val = val_loss;
            best_epoch = Some(epoch);
            best_params = model.params.clone();
            epochs_without_improvement = 0;
        } else {
            epochs_without_improvement += 1;
            if epochs_without_improvement >= cfg.patience {
                break;
            }
        }
    }

    model.params = best_params;
    model.zero_grads();
    Ok(TrainOutcome {
        model,
        history,
        best_epoch,
    })
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"NDEFCKP1";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorSpec {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    vocab_hash: String,
    vocab_size: usize,
    config: BTreeMap<String, String>,
    tensors: Vec<TensorSpec>,
}

/// Write the model to a single checkpoint file.
pub fn save_checkpoint(model: &NeuDefModel, path: &Path) -> Result<()> {
    let manifest = Manifest {
        format_version: CHECKPOINT_VERSION,
        vocab_hash: model.vocab_hash.clone(),
        vocab_size: model.vocab_size,
        config: model.snapshot.clone(),
        tensors: model
            .tensors()
            .iter()
            .map(|t| TensorSpec {
                name: t.name.clone(),
                shape: t.shape.clone(),
                trainable: t.trainable,
            })
            .collect(),
    };
    let manifest_bytes =
        serde_json::to_vec(&manifest).map_err(|e| Error::Data(format!("checkpoint manifest encoding: {e}")))?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(manifest_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest_bytes);
    for t in model.tensors() {
        for v in &t.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Load a checkpoint, verifying the format version, the vocabulary hash and
/// every tensor shape against the manifest.
pub fn load_checkpoint(path: &Path, vocab: &Vocabulary) -> Result<NeuDefModel> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::data("not a checkpoint file"));
    }
    let manifest_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if bytes.len() < 16 + manifest_len {
        return Err(Error::data("truncated checkpoint manifest"));
    }
    let manifest: Manifest = serde_json::from_slice(&bytes[16..16 + manifest_len])
        .map_err(|e| Error::Data(format!("checkpoint manifest decoding: {e}")))?;
    if manifest.format_version != CHECKPOINT_VERSION {
        return Err(Error::Data(format!(
            "checkpoint format version mismatch: file has {}, expected {CHECKPOINT_VERSION}",
            manifest.format_version
        )));
    }
    if manifest.vocab_hash != vocab.content_hash() || manifest.vocab_size != vocab.size() {
        return Err(Error::data("checkpoint/vocabulary mismatch"));
    }
    let config = crate::config::Config::from_map(&manifest.config)?;
    let model_config = config.model_config()?;
    let mut model = NeuDefModel::new(model_config, vocab, 0, manifest.config.clone())?;

    let mut offset = 16 + manifest_len;
    let tensors = model.tensors_mut();
    if tensors.len() != manifest.tensors.len() {
        return Err(Error::data("checkpoint manifest does not match model layout"));
    }
    for (tensor, spec) in tensors.into_iter().zip(&manifest.tensors) {
        if tensor.name != spec.name || tensor.shape != spec.shape {
            return Err(Error::Data(format!(
                "checkpoint manifest mismatch for tensor '{}': shape {:?} vs {:?}",
                spec.name, spec.shape, tensor.shape
            )));
        }
        let n = tensor.numel();
        let end = offset + 8 * n;
        if bytes.len() < end {
            return Err(Error::data("truncated checkpoint values"));
        }
        for (i, chunk) in bytes[offset..end].chunks_exact(8).enumerate() {
            tensor.values[i] = f64::from_le_bytes(chunk.try_into().unwrap());
        }
        tensor.trainable = spec.trainable;
        offset = end;
    }
    if offset != bytes.len() {
        return Err(Error::data("trailing bytes in checkpoint"));
    }
    Ok(model)
}

/// Serialize the per-epoch history as tab-separated text.
pub fn history_text(history: &[EpochStats]) -> String {
    let mut out = String::from("epoch\ttrain_loss\tval_loss\n");
    for h in history {
        out.push_str(&format!("{}\t{:.12}\t{:.12}\n", h.epoch, h.train_loss, h.val_loss));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(qid: &str, did: &str, clicked: bool, grade: Option<f64>) -> ClickRecord {
        ClickRecord {
            query_id: qid.into(),
            doc_id: did.into(),
            clicked,
            grade,
            split: Split::Train,
            click_count: clicked as u32,
            impressions: 1,
        }
    }

    #[test]
    fn clicks_source_builds_cross_pairs() {
        let records = vec![
            record("q1", "d1", true, None),
            record("q1", "d2", false, None),
            record("q1", "d3", false, None),
        ];
        let (pairs, stats) = generate_pairs(&records, Split::Train, LabelSource::Clicks, 0.1);
        assert_eq!(pairs.len(), 2);
        assert!(pairs.iter().all(|p| p.pos == "d1"));
        assert_eq!(stats.skipped_queries, 0);
    }

    #[test]
    fn all_clicked_query_is_skipped() {
        let records = vec![record("q1", "d1", true, None), record("q1", "d2", true, None)];
        let (pairs, stats) = generate_pairs(&records, Split::Train, LabelSource::Clicks, 0.1);
        assert!(pairs.is_empty());
        assert_eq!(stats.skipped_queries, 1);
    }

    #[test]
    fn grades_source_filters_by_margin() {
        // Grades {0.9, 0.85, 0.2} with margin 0.1: only the two pairs
        // against 0.2 survive -- enumerate-and-filter oracle.
        let records = vec![
            record("q1", "d1", true, Some(0.9)),
            record("q1", "d2", true, Some(0.85)),
            record("q1", "d3", false, Some(0.2)),
        ];
        let (pairs, _) = generate_pairs(&records, Split::Train, LabelSource::Grades, 0.1);
        let got: Vec<(String, String)> = pairs.iter().map(|p| (p.pos.clone(), p.neg.clone())).collect();
        let mut oracle = Vec::new();
        let graded = [("d1", 0.9), ("d2", 0.85), ("d3", 0.2)];
        for (a, ga) in graded {
            for (b, gb) in graded {
                if ga - gb > 0.1 {
                    oracle.push((a.to_string(), b.to_string()));
                }
            }
        }
        assert_eq!(got, oracle);
        assert_eq!(pairs.len(), 2);
    }

    #[test]
    fn hinge_loss_examples() {
        assert_eq!(hinge_loss(2.5, 0.5), 0.0);
        assert_eq!(hinge_loss(0.7, 0.7), 1.0);
        assert!((hinge_loss(0.2, 0.5) - 1.3).abs() < 1e-15);
    }

    proptest::proptest! {
        #[test]
        fn hinge_loss_is_non_negative(a in -100.0f64..100.0, b in -100.0f64..100.0) {
            proptest::prop_assert!(hinge_loss(a, b) >= 0.0);
        }
    }
}
