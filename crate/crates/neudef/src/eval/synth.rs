//! Synthetic desk-scale dataset generator. Documents own hidden topics;
//! queries mix topic core terms with topic synonyms that never appear in
//! document text. A configurable fraction of queries is synonym-only: when
//! clicked, those become the no-overlap expansion group. Query popularity is
//! Zipf-skewed so head, torso and tail buckets are all populated, and
//! relevant documents are popularity-skewed so clicked-query counts follow a
//! long tail. Train and test query strings are disjoint by construction.
//!
//! Click behavior is decided once per (query, document) pair: relevant
//! documents are clicked with high probability when the query overlaps their
//! text or is synonym-only ("expansion-like" retrieval); off-topic documents
//! are clicked with a small noise probability. Log events replay these
//! decisions, so popularity never saturates click labels.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub seed: u64,
    pub docs: usize,
    pub train_queries: usize,
    pub test_queries: usize,
    pub topics: usize,
    pub core_terms_per_topic: usize,
    pub synonyms_per_topic: usize,
    pub noise_terms: usize,
    /// Fraction of queries built from synonyms only (the no-overlap group).
    pub overlap_injection: f64,
    /// Per-token synonym probability in mixed queries.
    pub synonym_rate: f64,
    pub zipf_skew: f64,
    pub doc_popularity_skew: f64,
    pub train_events: usize,
    pub test_events: usize,
    pub relevant_per_query: usize,
    pub candidates_per_query: usize,
    pub click_relevant: f64,
    pub click_irrelevant: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 42,
            docs: 2000,
            train_queries: 500,
            test_queries: 200,
            topics: 40,
            core_terms_per_topic: 30,
            synonyms_per_topic: 3,
            noise_terms: 400,
            overlap_injection: 0.1,
            synonym_rate: 0.35,
            zipf_skew: 1.1,
            doc_popularity_skew: 0.9,
            train_events: 40_000,
            test_events: 15_000,
            relevant_per_query: 3,
            candidates_per_query: 9,
            click_relevant: 0.75,
            click_irrelevant: 0.03,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SynthStats {
    pub docs: usize,
    pub queries: usize,
    pub click_lines: usize,
    pub injected_queries: usize,
    /// Clicked (query, doc) pairs where the query is synonym-only.
    pub injected_clicked_pairs: usize,
    /// Clicked (query, doc) pairs on off-topic documents (noise clicks).
    pub offtopic_clicked_pairs: usize,
}

/// Generated dataset as file contents plus generation statistics.
#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub corpus: String,
    pub queries: String,
    pub clicks: String,
    pub qrels: String,
    pub stats: SynthStats,
}

struct SynthDoc {
    id: String,
    topic: usize,
    title: Vec<String>,
    body: Vec<String>,
    text: BTreeSet<String>,
}

struct SynthQuery {
    id: String,
    topic: usize,
    tokens: Vec<String>,
    injected: bool,
    train: bool,
}

struct PoolEntry {
    doc: usize,
    relevant: bool,
    clicked: bool,
    grade: f64,
}

fn cumulative_zipf(n: usize, skew: f64) -> Vec<f64> {
    let mut cum = Vec::with_capacity(n);
    let mut total = 0.0;
    for r in 0..n {
        total += 1.0 / ((r + 1) as f64).powf(skew);
        cum.push(total);
    }
    cum
}

fn sample_cumulative(cum: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let x = rng.gen_range(0.0..*cum.last().unwrap());
    cum.partition_point(|&c| c <= x).min(cum.len() - 1)
}

fn validate(cfg: &SynthConfig) -> Result<()> {
    let fail = |msg: &str| Err(Error::Data(format!("infeasible synthetic spec: {msg}")));
    if cfg.docs == 0 || cfg.train_queries == 0 || cfg.test_queries == 0 {
        return fail("all sizes must be at least 1");
    }
    if cfg.topics == 0 {
        return fail("at least one topic is required");
    }
    if cfg.topics > cfg.docs {
        return fail("more topics than documents");
    }
    if cfg.core_terms_per_topic < 2 || cfg.synonyms_per_topic == 0 {
        return fail("each topic needs at least 2 core terms and 1 synonym");
    }
    if cfg.relevant_per_query == 0 || cfg.candidates_per_query <= cfg.relevant_per_query {
        return fail("candidate pools must be larger than the relevant set");
    }
    for (name, v) in [
        ("overlap_injection", cfg.overlap_injection),
        ("synonym_rate", cfg.synonym_rate),
        ("click_relevant", cfg.click_relevant),
        ("click_irrelevant", cfg.click_irrelevant),
    ] {
        if !(0.0..=1.0).contains(&v) {
            return fail(&format!("{name} outside [0, 1]"));
        }
    }
    Ok(())
}

pub fn generate_synthetic_log(cfg: &SynthConfig) -> Result<SynthDataset> {
    validate(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let core: Vec<Vec<String>> = (0..cfg.topics)
        .map(|z| (0..cfg.core_terms_per_topic).map(|i| format!("t{z}c{i}")).collect())
        .collect();
    let synonyms: Vec<Vec<String>> = (0..cfg.topics)
        .map(|z| (0..cfg.synonyms_per_topic).map(|i| format!("t{z}s{i}")).collect())
        .collect();
    let noise: Vec<String> = (0..cfg.noise_terms.max(1)).map(|i| format!("n{i}")).collect();

    // Documents: titles sample a few core terms, bodies a broader subset
    // plus noise. Synonyms never appear in document text.
    let mut docs = Vec::with_capacity(cfg.docs);
    for i in 0..cfg.docs {
        let topic = i % cfg.topics;
        let title_len = rng.gen_range(6..=10).min(cfg.core_terms_per_topic);
        let title: Vec<String> = rand::seq::index::sample(&mut rng, cfg.core_terms_per_topic, title_len)
            .into_iter()
            .map(|t| core[topic][t].clone())
            .collect();
        let body_core = rng.gen_range(12..=20).min(cfg.core_terms_per_topic);
        let body_noise = rng.gen_range(3..=8).min(noise.len());
        let mut body: Vec<String> = rand::seq::index::sample(&mut rng, cfg.core_terms_per_topic, body_core)
            .into_iter()
            .map(|t| core[topic][t].clone())
            .collect();
        body.extend(
            rand::seq::index::sample(&mut rng, noise.len(), body_noise)
                .into_iter()
                .map(|t| noise[t].clone()),
        );
        body.shuffle(&mut rng);
        let text: BTreeSet<String> = title.iter().chain(body.iter()).cloned().collect();
        docs.push(SynthDoc {
            id: format!("d{i:05}"),
            topic,
            title,
            body,
            text,
        });
    }

    // Per-topic popularity order for relevant-document sampling.
    let mut topic_members: Vec<Vec<usize>> = vec![Vec::new(); cfg.topics];
    for (i, d) in docs.iter().enumerate() {
        topic_members[d.topic].push(i);
    }
    for members in &mut topic_members {
        members.shuffle(&mut rng);
    }
    let topic_cum: Vec<Vec<f64>> = topic_members
        .iter()
        .map(|m| cumulative_zipf(m.len(), cfg.doc_popularity_skew))
        .collect();

    // Queries with globally unique raw strings.
    let total_queries = cfg.train_queries + cfg.test_queries;
    let mut queries: Vec<SynthQuery> = Vec::with_capacity(total_queries);
    let mut seen = BTreeSet::new();
    let mut injected_queries = 0usize;
    for qi in 0..total_queries {
        let mut tokens = Vec::new();
        let mut topic = 0;
        let mut injected = false;
        let mut ok = false;
        for _attempt in 0..200 {
            topic = rng.gen_range(0..cfg.topics);
            injected = rng.gen::<f64>() < cfg.overlap_injection;
            tokens = if injected {
                let len = rng.gen_range(1..=3).min(cfg.synonyms_per_topic);
                rand::seq::index::sample(&mut rng, cfg.synonyms_per_topic, len)
                    .into_iter()
                    .map(|t| synonyms[topic][t].clone())
                    .collect()
            } else {
                let len: usize = rng.gen_range(2..=4);
                let mut syn_count = 0usize;
                for _ in 1..len {
                    if rng.gen::<f64>() < cfg.synonym_rate {
                        syn_count += 1;
                    }
                }
                let syn_count = syn_count.min(cfg.synonyms_per_topic);
                let core_count = (len - syn_count).min(cfg.core_terms_per_topic).max(1);
                let mut t: Vec<String> = rand::seq::index::sample(&mut rng, cfg.core_terms_per_topic, core_count)
                    .into_iter()
                    .map(|x| core[topic][x].clone())
                    .collect();
                t.extend(
                    rand::seq::index::sample(&mut rng, cfg.synonyms_per_topic, syn_count)
                        .into_iter()
                        .map(|x| synonyms[topic][x].clone()),
                );
                t.shuffle(&mut rng);
                t
            };
            if seen.insert(tokens.join(" ")) {
                ok = true;
                break;
            }
        }
        if !ok {
            // Exhausted retries: disambiguate with a query-unique token.
            tokens.push(format!("u{qi}"));
            seen.insert(tokens.join(" "));
        }
        if injected {
            injected_queries += 1;
        }
        queries.push(SynthQuery {
            id: format!("q{qi:05}"),
            topic,
            tokens,
            injected,
            train: qi < cfg.train_queries,
        });
    }

    // Candidate pools with one-shot click decisions per (query, doc).
    let mut stats = SynthStats {
        docs: cfg.docs,
        queries: total_queries,
        injected_queries,
        ..SynthStats::default()
    };
    let mut pools: Vec<Vec<PoolEntry>> = Vec::with_capacity(total_queries);
    for q in &queries {
        let members = &topic_members[q.topic];
        let cum = &topic_cum[q.topic];
        let rel_count = cfg.relevant_per_query.min(members.len());
        let mut rel: Vec<usize> = Vec::with_capacity(rel_count);
        let mut guard = 0;
        while rel.len() < rel_count && guard < 1000 {
            let pick = members[sample_cumulative(cum, &mut rng)];
            if !rel.contains(&pick) {
                rel.push(pick);
            }
            guard += 1;
        }
        for &m in members.iter() {
            if rel.len() >= rel_count {
                break;
            }
            if !rel.contains(&m) {
                rel.push(m);
            }
        }
        let irr_count = cfg.candidates_per_query - rel.len();
        let mut irr: Vec<usize> = Vec::with_capacity(irr_count);
        let mut guard = 0;
        while irr.len() < irr_count && guard < 10_000 {
            let pick = rng.gen_range(0..cfg.docs);
            if docs[pick].topic != q.topic && !irr.contains(&pick) {
                irr.push(pick);
            }
            guard += 1;
        }
        let mut pool = Vec::with_capacity(rel.len() + irr.len());
        for doc_idx in rel.into_iter().chain(irr) {
            let doc = &docs[doc_idx];
            let relevant = doc.topic == q.topic;
            let overlaps = q.tokens.iter().any(|t| doc.text.contains(t));
            let p_click = if relevant {
                if overlaps || q.injected {
                    cfg.click_relevant
                } else {
                    0.0
                }
            } else {
                cfg.click_irrelevant
            };
            let clicked = rng.gen::<f64>() < p_click;
            let grade = if relevant {
                rng.gen_range(0.55..1.0)
            } else {
                rng.gen_range(0.0..0.45)
            };
            if clicked && q.injected {
                stats.injected_clicked_pairs += 1;
            }
            if clicked && !relevant {
                stats.offtopic_clicked_pairs += 1;
            }
            pool.push(PoolEntry {
                doc: doc_idx,
                relevant,
                clicked,
                grade,
            });
        }
        pools.push(pool);
    }

    // Events: one panel pass covering every pool entry, then Zipf-skewed
    // popularity extras. Frequency is the per-query event-line count.
    let mut click_lines = String::new();
    let mut frequency = vec![0u64; total_queries];
    let mut line_count = 0usize;
    {
        let mut emit = |qi: usize, entry: &PoolEntry, rng_unused: &mut ChaCha8Rng| {
            let _ = rng_unused;
            let q = &queries[qi];
            click_lines.push_str(&format!(
                "{}\t{}\t{}\t{:.3}\t{}\n",
                q.id,
                docs[entry.doc].id,
                entry.clicked as u8,
                entry.grade,
                if q.train { "train" } else { "test" }
            ));
            frequency[qi] += 1;
            line_count += 1;
        };
        for (split_train, events_total) in [(true, cfg.train_events), (false, cfg.test_events)] {
            let slice: Vec<usize> = (0..total_queries).filter(|&i| queries[i].train == split_train).collect();
            let mut panel = 0usize;
            for &qi in &slice {
                for ei in 0..pools[qi].len() {
                    let entry = &pools[qi][ei];
                    emit(qi, entry, &mut rng);
                    panel += 1;
                }
            }
            let cum = cumulative_zipf(slice.len(), cfg.zipf_skew);
            for _ in 0..events_total.saturating_sub(panel) {
                let qi = slice[sample_cumulative(&cum, &mut rng)];
                let ei = rng.gen_range(0..pools[qi].len());
                let entry = &pools[qi][ei];
                emit(qi, entry, &mut rng);
            }
        }
    }
    stats.click_lines = line_count;

    let mut corpus = String::new();
    for d in &docs {
        corpus.push_str(&format!("{}\t{}\t{}\n", d.id, d.title.join(" "), d.body.join(" ")));
    }
    let mut query_file = String::new();
    for (qi, q) in queries.iter().enumerate() {
        query_file.push_str(&format!("{}\t{}\t{}\n", q.id, q.tokens.join(" "), frequency[qi]));
    }
    let mut qrels = String::new();
    for (qi, q) in queries.iter().enumerate() {
        for entry in &pools[qi] {
            qrels.push_str(&format!(
                "{}\t{}\t{:.1}\n",
                q.id,
                docs[entry.doc].id,
                if entry.relevant { 1.0 } else { 0.0 }
            ));
        }
    }

    Ok(SynthDataset {
        corpus,
        queries: query_file,
        clicks: click_lines,
        qrels,
        stats,
    })
}

/// Write the four dataset files into a directory.
pub fn write_dataset(ds: &SynthDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, contents) in [
        ("corpus.tsv", &ds.corpus),
        ("queries.tsv", &ds.queries),
        ("clicks.tsv", &ds.clicks),
        ("qrels.tsv", &ds.qrels),
    ] {
        let path = dir.join(name);
        fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}
