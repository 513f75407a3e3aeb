//! End-to-end commands shared by the CLI and the integration suites: data
//! generation, vocabulary and expansion-index building, training, ranking,
//! evaluation and the weight/feedback analyses. Every command logs the fully
//! resolved configuration into its output directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::attention::{expansion_weights, ExpansionWeights, Variant};
use crate::config::Config;
use crate::corpus::{
    self, load_clicks, load_corpus, load_queries, load_query_frequencies, ClickLog, Corpus, Query, Split,
};
use crate::eval::analysis::{doc_buckets_csv, group_shares_csv, per_document_performance, weight_group_analysis, DocSide};
use crate::eval::run::RankedRun;
use crate::eval::synth::{generate_synthetic_log, write_dataset, SynthStats};
use crate::eval::{add_significance, evaluate_run, EvalReport, Judgments};
use crate::expansion::{harvest, load_index, save_index, ExpansionIndex};
use crate::ranker::{rank, MetaCounts, NeuDefModel, ScoringContext};
use crate::training::{generate_pairs, history_text, load_checkpoint, save_checkpoint, train, TrainingPair};
use crate::{Error, Result};

fn ensure_out_dir(out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))
}

/// Write the resolved configuration (defaults + file + overrides) verbatim.
pub fn log_resolved_config(config: &Config, out_dir: &Path) -> Result<PathBuf> {
    ensure_out_dir(out_dir)?;
    let path = out_dir.join("config.resolved");
    fs::write(&path, config.resolved_text()).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Generate the synthetic dataset into `out_dir`.
pub fn cmd_synth(config: &Config, out_dir: &Path) -> Result<SynthStats> {
    log_resolved_config(config, out_dir)?;
    let ds = generate_synthetic_log(&config.synth_config()?)?;
    write_dataset(&ds, out_dir)?;
    Ok(ds.stats)
}

/// Build the vocabulary from corpus and query files.
pub fn cmd_build_vocab(config: &Config, corpus_path: &Path, queries_path: &Path, out_dir: &Path) -> Result<PathBuf> {
    log_resolved_config(config, out_dir)?;
    let corpus_text = fs::read_to_string(corpus_path).map_err(|e| Error::io(corpus_path, e))?;
    let queries_text = fs::read_to_string(queries_path).map_err(|e| Error::io(queries_path, e))?;
    let corpus_fields: Vec<String> = corpus_text
        .lines()
        .filter(|l| !l.is_empty())
        .map(|l| {
            let parts: Vec<&str> = l.split('\t').collect();
            if parts.len() == 3 {
                format!("{} {}", parts[1], parts[2])
            } else {
                String::new()
            }
        })
        .collect();
    let query_fields: Vec<String> = queries_text
        .lines()
        .filter(|l| !l.is_empty())
        .map(|l| l.split('\t').nth(1).unwrap_or("").to_string())
        .collect();
    let vocab = corpus::build_vocabulary(corpus_fields, query_fields, config.min_count()?)?;
    let path = out_dir.join("vocab.tsv");
    vocab.save(&path)?;
    Ok(path)
}

/// Loaded dataset shared by the training/ranking commands.
pub struct LoadedData {
    pub vocab: corpus::Vocabulary,
    pub corpus: Corpus,
    pub queries: BTreeMap<String, Query>,
    pub log: ClickLog,
}

pub fn load_data(
    config: &Config,
    corpus_path: &Path,
    queries_path: &Path,
    clicks_path: &Path,
    vocab_path: &Path,
) -> Result<LoadedData> {
    let vocab = corpus::Vocabulary::load(vocab_path)?;
    let limits = config.field_limits()?;
    Ok(LoadedData {
        corpus: load_corpus(corpus_path, &vocab, &limits)?,
        queries: load_queries(queries_path, &vocab, &limits)?,
        log: load_clicks(clicks_path)?,
        vocab,
    })
}

/// Harvest the expansion index from the training split and save it.
pub fn cmd_build_expansion(
    config: &Config,
    corpus_path: &Path,
    queries_path: &Path,
    clicks_path: &Path,
    vocab_path: &Path,
    out_dir: &Path,
) -> Result<PathBuf> {
    log_resolved_config(config, out_dir)?;
    let data = load_data(config, corpus_path, queries_path, clicks_path, vocab_path)?;
    let index = harvest(
        &data.log,
        &data.queries,
        &data.corpus,
        Split::Train,
        config.max_click_queries()?,
    );
    let path = out_dir.join("expansion.idx");
    save_index(&index, &path)?;
    Ok(path)
}

pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub history: PathBuf,
    pub best_epoch: Option<usize>,
    pub epochs_run: usize,
    pub pairs: usize,
}

/// Generate pairs from the training split and train the configured model.
#[allow(clippy::too_many_arguments)]
pub fn cmd_train(
    config: &Config,
    corpus_path: &Path,
    queries_path: &Path,
    clicks_path: &Path,
    vocab_path: &Path,
    expansion_path: Option<&Path>,
    out_dir: &Path,
) -> Result<TrainSummary> {
    log_resolved_config(config, out_dir)?;
    let data = load_data(config, corpus_path, queries_path, clicks_path, vocab_path)?;
    let train_cfg = config.train_config()?;
    let model_cfg = config.model_config()?;

    let index = match expansion_path {
        Some(p) => Some(load_index(p, Some(&data.log.source_hash))?),
        None => None,
    };
    if index.is_none() && model_cfg.variant != Variant::None {
        return Err(Error::Config(format!(
            "expansion variant '{}' requires an expansion index",
            model_cfg.variant
        )));
    }
    let meta = if model_cfg.meta_feature.is_some() {
        Some(MetaCounts::from_log(&data.log, Split::Train))
    } else {
        None
    };

    let (raw_pairs, _stats) = generate_pairs(
        &data.log.records,
        Split::Train,
        train_cfg.label_source,
        train_cfg.grade_margin,
    );
    let pairs: Vec<TrainingPair> = raw_pairs
        .into_iter()
        .filter(|p| {
            data.corpus.get(&p.pos).is_some()
                && data.corpus.get(&p.neg).is_some()
                && data.queries.contains_key(&p.query_id)
        })
        .collect();

    let model = NeuDefModel::new(model_cfg, &data.vocab, train_cfg.seed, config.resolved())?;
    let ctx = ScoringContext {
        corpus: &data.corpus,
        queries: &data.queries,
        expansion: index.as_ref(),
        meta: meta.as_ref(),
    };
    let n_pairs = pairs.len();
    let outcome = train(model, &pairs, &ctx, &train_cfg)?;

    let checkpoint = out_dir.join("model.ckpt");
    save_checkpoint(&outcome.model, &checkpoint)?;
    let history = out_dir.join("history.tsv");
    fs::write(&history, history_text(&outcome.history)).map_err(|e| Error::io(&history, e))?;
    Ok(TrainSummary {
        checkpoint,
        history,
        best_epoch: outcome.best_epoch,
        epochs_run: outcome.history.len(),
        pairs: n_pairs,
    })
}

/// Rank the candidates of every query in `split`, in parallel over queries
/// when `threads > 1`. Per-query scores are independent of the thread
/// count, so the output is identical for any value.
pub fn rank_split(
    model: &NeuDefModel,
    data: &LoadedData,
    index: Option<&ExpansionIndex>,
    meta: Option<&MetaCounts>,
    split: Split,
    tag: &str,
    threads: usize,
) -> Result<RankedRun> {
    let mut candidates: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for r in &data.log.records {
        if r.split == split && data.corpus.get(&r.doc_id).is_some() {
            let entry = candidates.entry(&r.query_id).or_default();
            if !entry.contains(&r.doc_id.as_str()) {
                entry.push(&r.doc_id);
            }
        }
    }
    let work: Vec<(&str, &Vec<&str>)> = candidates
        .iter()
        .filter(|(qid, _)| data.queries.contains_key(**qid))
        .map(|(qid, docs)| (*qid, docs))
        .collect();

    let ctx = ScoringContext {
        corpus: &data.corpus,
        queries: &data.queries,
        expansion: index,
        meta,
    };
    let threads = threads.max(1).min(work.len().max(1));
    let chunk_size = work.len().div_ceil(threads);
    let mut results: Vec<Result<Vec<(String, Vec<(String, f64)>)>>> = Vec::new();
    std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for chunk in work.chunks(chunk_size.max(1)) {
            let ctx = ctx;
            handles.push(scope.spawn(move || -> Result<Vec<(String, Vec<(String, f64)>)>> {
                let mut out = Vec::with_capacity(chunk.len());
                for (qid, doc_ids) in chunk {
                    let query = &ctx.queries[*qid];
                    let docs: Vec<&corpus::Document> =
                        doc_ids.iter().map(|d| ctx.corpus.get(d).expect("filtered")).collect();
                    let scored = rank(model, &query.terms, &docs, &ctx)?;
                    out.push((
                        qid.to_string(),
                        scored.into_iter().map(|s| (s.doc_id, s.total)).collect(),
                    ));
                }
                Ok(out)
            }));
        }
        for h in handles {
            results.push(h.join().expect("ranking thread panicked"));
        }
    });

    let mut run = RankedRun::new(tag);
    for r in results {
        for (qid, ranking) in r? {
            run.rankings.insert(qid, ranking);
        }
    }
    Ok(run)
}

/// Load a checkpoint and produce a run file for one split.
#[allow(clippy::too_many_arguments)]
pub fn cmd_rank(
    config: &Config,
    corpus_path: &Path,
    queries_path: &Path,
    clicks_path: &Path,
    vocab_path: &Path,
    checkpoint_path: &Path,
    expansion_path: Option<&Path>,
    split: Split,
    tag: &str,
    threads: usize,
    out_dir: &Path,
) -> Result<PathBuf> {
    log_resolved_config(config, out_dir)?;
    let data = load_data(config, corpus_path, queries_path, clicks_path, vocab_path)?;
    let model = load_checkpoint(checkpoint_path, &data.vocab)?;
    let index = match expansion_path {
        Some(p) => Some(load_index(p, Some(&data.log.source_hash))?),
        None => None,
    };
    if index.is_none() && model.config.variant != Variant::None {
        return Err(Error::Config(format!(
            "expansion variant '{}' requires an expansion index",
            model.config.variant
        )));
    }
    let meta = if model.config.meta_feature.is_some() {
        Some(MetaCounts::from_log(&data.log, Split::Train))
    } else {
        None
    };
    let run = rank_split(&model, &data, index.as_ref(), meta.as_ref(), split, tag, threads)?;
    let path = out_dir.join(format!("{tag}.run"));
    run.write(&path)?;
    Ok(path)
}

/// Evaluate a run file; with a baseline run, adds paired permutation-test
/// significance rows. Writes both the human table and machine records.
pub fn cmd_eval(
    config: &Config,
    run_path: &Path,
    qrels_path: &Path,
    queries_path: &Path,
    baseline_path: Option<&Path>,
    out_dir: &Path,
) -> Result<EvalReport> {
    log_resolved_config(config, out_dir)?;
    let run = RankedRun::read(run_path)?;
    let judgments = Judgments::load(qrels_path)?;
    let frequencies = load_query_frequencies(queries_path)?;
    let threshold = config.f64("eval.relevance_threshold")?;
    let mut report = evaluate_run(&run, &judgments, &frequencies, threshold);
    if let Some(base_path) = baseline_path {
        let base_run = RankedRun::read(base_path)?;
        let base_report = evaluate_run(&base_run, &judgments, &frequencies, threshold);
        add_significance(
            &mut report,
            &base_report,
            config.usize("eval.permutation_iterations")?,
            config.u64("train.seed")?,
        )?;
    }
    let table = out_dir.join("eval.txt");
    fs::write(&table, report.render_table()).map_err(|e| Error::io(&table, e))?;
    let machine = out_dir.join("eval.tsv");
    fs::write(&machine, report.machine_lines()).map_err(|e| Error::io(&machine, e))?;
    Ok(report)
}

/// Expansion weights for every expanded document under a trained model.
pub fn compute_all_weights(
    model: &NeuDefModel,
    corpus: &Corpus,
    index: &ExpansionIndex,
) -> Result<BTreeMap<String, ExpansionWeights>> {
    let mut out = BTreeMap::new();
    for (doc_id, exp) in &index.docs {
        let Some(doc) = corpus.get(doc_id) else {
            continue;
        };
        let doc_tokens = model.attention_doc_tokens(doc);
        let w = expansion_weights(
            &model.params.embedding,
            &model.params.attention,
            &model.params.w_match.values,
            &model.bank,
            exp,
            &doc_tokens,
            model.config.variant,
        )?;
        out.insert(doc_id.clone(), w);
    }
    Ok(out)
}

pub struct AnalyzeSummary {
    pub weight_groups_csv: PathBuf,
    pub doc_buckets_csv: PathBuf,
}

/// The two analyses: expansion-weight shares per overlap group (per document
/// side) and per-document rank deltas bucketed by clicked-query count.
#[allow(clippy::too_many_arguments)]
pub fn cmd_analyze(
    config: &Config,
    corpus_path: &Path,
    queries_path: &Path,
    clicks_path: &Path,
    vocab_path: &Path,
    checkpoint_path: &Path,
    expansion_path: &Path,
    qrels_path: &Path,
    run_new_path: &Path,
    run_base_path: &Path,
    out_dir: &Path,
) -> Result<AnalyzeSummary> {
    log_resolved_config(config, out_dir)?;
    let data = load_data(config, corpus_path, queries_path, clicks_path, vocab_path)?;
    let model = load_checkpoint(checkpoint_path, &data.vocab)?;
    if model.config.variant == Variant::None {
        return Err(Error::Config(
            "weight analysis requires an expansion-enabled checkpoint".into(),
        ));
    }
    let index = load_index(expansion_path, Some(&data.log.source_hash))?;
    let weights = compute_all_weights(&model, &data.corpus, &index)?;
    let mut shares = Vec::new();
    for side in DocSide::ALL {
        shares.push(weight_group_analysis(&index, &data.corpus, &weights, side)?);
    }
    let weight_groups_path = out_dir.join("weight_groups.csv");
    fs::write(&weight_groups_path, group_shares_csv(&shares)).map_err(|e| Error::io(&weight_groups_path, e))?;

    let run_new = RankedRun::read(run_new_path)?;
    let run_base = RankedRun::read(run_base_path)?;
    let judgments = Judgments::load(qrels_path)?;
    let buckets = per_document_performance(
        &run_base,
        &run_new,
        &judgments,
        &index,
        &config.doc_buckets()?,
        config.f64("eval.relevance_threshold")?,
    );
    let doc_buckets_path = out_dir.join("per_doc_delta_rr.csv");
    fs::write(&doc_buckets_path, doc_buckets_csv(&buckets)).map_err(|e| Error::io(&doc_buckets_path, e))?;
    Ok(AnalyzeSummary {
        weight_groups_csv: weight_groups_path,
        doc_buckets_csv: doc_buckets_path,
    })
}

/// Check the train/test discipline of a loaded dataset.
pub fn cmd_verify_split(
    config: &Config,
    corpus_path: &Path,
    queries_path: &Path,
    clicks_path: &Path,
    vocab_path: &Path,
) -> Result<corpus::SplitReport> {
    let data = load_data(config, corpus_path, queries_path, clicks_path, vocab_path)?;
    Ok(corpus::verify_split(&data.queries, &data.log))
}
