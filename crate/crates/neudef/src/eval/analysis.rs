//! The two model analyses: how learned expansion weight mass distributes
//! over clicked-query overlap groups, and per-document rank deltas grouped
//! by the amount of click feedback.

use std::collections::BTreeMap;

use crate::attention::ExpansionWeights;
use crate::corpus::Corpus;
use crate::eval::run::RankedRun;
use crate::eval::{delta_rr, Judgments};
use crate::expansion::{classify_overlap, ExpansionIndex, Overlap};
use crate::Result;

/// Which document text the overlap classification runs against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DocSide {
    Title,
    Body,
    TitleBody,
}

impl std::fmt::Display for DocSide {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DocSide::Title => write!(f, "title"),
            DocSide::Body => write!(f, "body"),
            DocSide::TitleBody => write!(f, "title_body"),
        }
    }
}

impl DocSide {
    pub const ALL: [DocSide; 3] = [DocSide::Title, DocSide::Body, DocSide::TitleBody];

    fn tokens(&self, doc: &crate::corpus::Document) -> Vec<u32> {
        match self {
            DocSide::Title => doc.title.clone(),
            DocSide::Body => doc.body.clone(),
            DocSide::TitleBody => {
                let mut t = doc.title.clone();
                t.extend_from_slice(&doc.body);
                t
            }
        }
    }
}

/// Per-group shares of expansion terms and of normalized weight mass,
/// averaged over documents. Each share vector sums to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupShares {
    pub side: DocSide,
    /// (group, term share, weight share), one row per overlap class.
    pub groups: Vec<(Overlap, f64, f64)>,
    pub docs: usize,
}

/// Classify each expansion term's owning queries against the chosen document
/// text and average, per document, the fraction of terms and of normalized
/// weight falling into each overlap group. Terms with several owners split
/// their unit count and weight equally across the owners' groups.
pub fn weight_group_analysis(
    index: &ExpansionIndex,
    corpus: &Corpus,
    weights: &BTreeMap<String, ExpansionWeights>,
    side: DocSide,
) -> Result<GroupShares> {
    let mut term_share = BTreeMap::from([
        (Overlap::NoOverlap, 0.0),
        (Overlap::PartialOverlap, 0.0),
        (Overlap::Contained, 0.0),
    ]);
    let mut weight_share = term_share.clone();
    let mut docs = 0usize;
    for (doc_id, exp) in &index.docs {
        let Some(w) = weights.get(doc_id) else {
            continue;
        };
        let Some(doc) = corpus.get(doc_id) else {
            continue;
        };
        let field_tokens = side.tokens(doc);
        // Pre-classify each clicked query once.
        let mut query_groups = Vec::with_capacity(exp.click_queries.queries.len());
        for cq in &exp.click_queries.queries {
            query_groups.push(classify_overlap(&cq.terms, &field_tokens)?);
        }
        let n_terms = w.term_ids.len() as f64;
        let weight_sum: f64 = w.normalized.iter().sum();
        if n_terms == 0.0 || weight_sum == 0.0 {
            continue;
        }
        docs += 1;
        for (owners, &norm) in w.owners.iter().zip(&w.normalized) {
            let share = 1.0 / owners.len() as f64;
            for &qi in owners {
                let group = query_groups[qi];
                *term_share.get_mut(&group).unwrap() += share / n_terms;
                *weight_share.get_mut(&group).unwrap() += norm * share / weight_sum;
            }
        }
    }
    let denom = if docs == 0 { 1.0 } else { docs as f64 };
    let groups = Overlap::ALL
        .iter()
        .map(|&g| (g, term_share[&g] / denom, weight_share[&g] / denom))
        .collect();
    Ok(GroupShares { side, groups, docs })
}

/// Plot-ready CSV: `field,group,term_share,weight_share`.
pub fn group_shares_csv(shares: &[GroupShares]) -> String {
    let mut out = String::from("field,group,term_share,weight_share\n");
    for s in shares {
        for (group, terms, weight) in &s.groups {
            out.push_str(&format!("{},{},{:.6},{:.6}\n", s.side, group, terms, weight));
        }
    }
    out
}

/// One histogram bucket of documents by clicked-query count.
#[derive(Debug, Clone, PartialEq)]
pub struct DocBucket {
    pub label: String,
    pub lower: usize,
    pub count: usize,
    pub mean_delta_rr: f64,
}

/// Group judged documents by their clicked-query count (0 for unexpanded
/// documents) and report doc counts plus the mean rank delta per bucket.
/// `edges` are ascending bucket lower bounds starting at 0.
pub fn per_document_performance(
    run_base: &RankedRun,
    run_new: &RankedRun,
    judgments: &Judgments,
    index: &ExpansionIndex,
    edges: &[usize],
    relevance_threshold: f64,
) -> Vec<DocBucket> {
    let edges = if edges.is_empty() { &[0][..] } else { edges };
    let mut buckets: Vec<DocBucket> = edges
        .iter()
        .enumerate()
        .map(|(i, &lower)| {
            let label = match edges.get(i + 1) {
                Some(&next) if next == lower + 1 => format!("{lower}"),
                Some(&next) => format!("{lower}-{}", next - 1),
                None => format!("{lower}+"),
            };
            DocBucket {
                label,
                lower,
                count: 0,
                mean_delta_rr: 0.0,
            }
        })
        .collect();

    let mut doc_ids: std::collections::BTreeSet<&str> = std::collections::BTreeSet::new();
    for docs in judgments.grades.values() {
        doc_ids.extend(docs.keys().map(String::as_str));
    }
    for doc_id in doc_ids {
        let (value, judged) = delta_rr(run_base, run_new, judgments, doc_id, relevance_threshold);
        if !judged {
            continue;
        }
        let n_clicked = index
            .get(doc_id)
            .map(|e| e.click_queries.total_click_queries)
            .unwrap_or(0);
        let bi = buckets
            .iter()
            .rposition(|b| n_clicked >= b.lower)
            .unwrap_or(0);
        buckets[bi].count += 1;
        buckets[bi].mean_delta_rr += value;
    }
    for b in &mut buckets {
        if b.count > 0 {
            b.mean_delta_rr /= b.count as f64;
        }
    }
    buckets
}

/// Plot-ready CSV: `bucket,count,mean_delta_rr`.
pub fn doc_buckets_csv(buckets: &[DocBucket]) -> String {
    let mut out = String::from("bucket,count,mean_delta_rr\n");
    for b in buckets {
        out.push_str(&format!("{},{},{:.6}\n", b.label, b.count, b.mean_delta_rr));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Document, Split};
    use crate::expansion::{ClickQuery, ClickQuerySet, DocExpansion, ExpansionTermSet, Provenance};

    fn toy_index(entries: &[(&str, &[(&str, &[u32])])]) -> ExpansionIndex {
        let mut docs = BTreeMap::new();
        for (doc_id, queries) in entries {
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
            docs.insert(
                doc_id.to_string(),
                DocExpansion {
                    click_queries: ClickQuerySet {
                        doc_id: doc_id.to_string(),
                        total_click_queries: clicked.len(),
                        queries: clicked,
                    },
                    term_set: ExpansionTermSet {
                        doc_id: doc_id.to_string(),
                        terms: term_order.into_iter().map(|t| (t, owners[&t].clone())).collect(),
                    },
                },
            );
        }
        ExpansionIndex {
            docs,
            provenance: Provenance {
                log_hash: "x".into(),
                split: Split::Train,
                cap: 20,
            },
            skipped_records: 0,
        }
    }

    fn corpus_of(entries: &[(&str, &[u32], &[u32])]) -> Corpus {
        Corpus {
            docs: entries
                .iter()
                .map(|(id, title, body)| {
                    (
                        id.to_string(),
                        Document {
                            doc_id: id.to_string(),
                            title: title.to_vec(),
                            body: body.to_vec(),
                        },
                    )
                })
                .collect(),
        }
    }

    fn uniform_weights(index: &ExpansionIndex) -> BTreeMap<String, ExpansionWeights> {
        index
            .docs
            .iter()
            .map(|(id, exp)| {
                let n = exp.term_set.terms.len();
                (
                    id.clone(),
                    ExpansionWeights {
                        doc_id: id.clone(),
                        term_ids: exp.term_set.terms.iter().map(|t| t.0).collect(),
                        owners: exp.term_set.terms.iter().map(|t| t.1.clone()).collect(),
                        raw: vec![1.0; n],
                        normalized: vec![1.0 / n as f64; n],
                        match_scores: vec![1.0; exp.click_queries.queries.len()],
                    },
                )
            })
            .collect()
    }

    #[test]
    fn fully_contained_queries_take_all_shares() {
        let index = toy_index(&[("d1", &[("q1", &[2, 3])])]);
        let corpus = corpus_of(&[("d1", &[2, 3, 4], &[5])]);
        let weights = uniform_weights(&index);
        let shares = weight_group_analysis(&index, &corpus, &weights, DocSide::Title).unwrap();
        let contained = shares.groups.iter().find(|g| g.0 == Overlap::Contained).unwrap();
        assert!((contained.1 - 1.0).abs() < 1e-12);
        assert!((contained.2 - 1.0).abs() < 1e-12);
        let term_total: f64 = shares.groups.iter().map(|g| g.1).sum();
        let weight_total: f64 = shares.groups.iter().map(|g| g.2).sum();
        assert!((term_total - 1.0).abs() < 1e-9);
        assert!((weight_total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn uniform_weights_over_equal_groups_split_evenly() {
        // One contained query and one no-overlap query, one term each.
        let index = toy_index(&[("d1", &[("q1", &[2]), ("q2", &[9])])]);
        let corpus = corpus_of(&[("d1", &[2, 3], &[4])]);
        let weights = uniform_weights(&index);
        let shares = weight_group_analysis(&index, &corpus, &weights, DocSide::TitleBody).unwrap();
        let by_group: BTreeMap<Overlap, (f64, f64)> =
            shares.groups.iter().map(|(g, t, w)| (*g, (*t, *w))).collect();
        assert!((by_group[&Overlap::Contained].0 - 0.5).abs() < 1e-12);
        assert!((by_group[&Overlap::NoOverlap].0 - 0.5).abs() < 1e-12);
        assert!((by_group[&Overlap::Contained].1 - 0.5).abs() < 1e-12);
        assert!((by_group[&Overlap::NoOverlap].1 - 0.5).abs() < 1e-12);
    }

    fn run_of(tag: &str, entries: &[(&str, &[&str])]) -> RankedRun {
        RankedRun {
            tag: tag.to_string(),
            rankings: entries
                .iter()
                .map(|(q, docs)| {
                    (
                        q.to_string(),
                        docs.iter()
                            .enumerate()
                            .map(|(i, d)| (d.to_string(), 1.0 - 0.1 * i as f64))
                            .collect(),
                    )
                })
                .collect(),
        }
    }

    #[test]
    fn identical_runs_have_zero_mean_delta_everywhere() {
        let run = run_of("r", &[("q1", &["d1", "d2"])]);
        let mut judgments = Judgments::default();
        judgments
            .grades
            .entry("q1".into())
            .or_default()
            .extend([("d1".to_string(), 1.0), ("d2".to_string(), 0.0)]);
        let index = toy_index(&[("d1", &[("q1", &[2])])]);
        let buckets = per_document_performance(&run, &run, &judgments, &index, &[0, 1, 2], 0.5);
        for b in &buckets {
            assert_eq!(b.mean_delta_rr, 0.0);
        }
        // d2 has no clicked queries: bucket 0. d1 has one: bucket 1.
        assert_eq!(buckets[0].count, 1);
        assert_eq!(buckets[1].count, 1);
    }

    #[test]
    fn hand_built_runs_match_hand_computed_bucket_means() {
        let base = run_of("base", &[("q1", &["x", "d1"]), ("q2", &["d1", "x"])]);
        let new = run_of("new", &[("q1", &["d1", "x"]), ("q2", &["x", "d1"])]);
        let mut judgments = Judgments::default();
        judgments.grades.entry("q1".into()).or_default().insert("d1".into(), 1.0);
        judgments.grades.entry("q2".into()).or_default().insert("d1".into(), 0.0);
        let index = toy_index(&[("d1", &[("q1", &[2]), ("q2", &[3])])]);
        let buckets = per_document_performance(&base, &new, &judgments, &index, &[0, 1], 0.5);
        // q1 (relevant): rr 0.5 -> 1.0 gives +0.5; q2 (irrelevant): rr 1.0
        // -> 0.5 gives -1 * (0.5 - 1.0) = +0.5. Total = 1.0 in bucket "1+".
        assert_eq!(buckets[1].count, 1);
        assert!((buckets[1].mean_delta_rr - 1.0).abs() < 1e-12);
        assert_eq!(buckets[0].count, 0);
    }
}
