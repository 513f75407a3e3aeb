//! Per-document expansion material harvested from the click log: the set of
//! clicked queries, the deduplicated candidate expansion terms with their
//! owning queries, and the overlap classification used by the weight
//! analyses. Harvesting always runs on a single split (the training split in
//! the pipeline) so no test-query information can leak into the index.
//!
//! Index file layout (stable across releases):
//!
//! ```text
//! neudef-expansion-index v1
//! provenance <click-log sha256> <split> <cap> <skipped>
//! docs <n>
//! doc <doc_id> <n_queries> <n_terms> <total_click_queries>
//! q <query_id> <click_count> <term ids...>
//! t <term_id> <owner query indices...>
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use crate::corpus::{ClickLog, Corpus, Query, Split, UNK_ID};
use crate::{Error, Result};

/// One clicked query attached to a document.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClickQuery {
    pub query_id: String,
    pub terms: Vec<u32>,
    /// Clicked events for this (query, doc) pair in the harvested split.
    pub click_count: u32,
}

/// The clicked queries of one document, ordered by descending click count
/// then ascending query id, capped at the configured maximum.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClickQuerySet {
    pub doc_id: String,
    pub queries: Vec<ClickQuery>,
    /// Clicked-query count before the cap; feeds the per-document analyses.
    pub total_click_queries: usize,
}

/// Deduplicated candidate expansion terms with their owning query indices
/// (into the companion [`ClickQuerySet`]).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExpansionTermSet {
    pub doc_id: String,
    pub terms: Vec<(u32, Vec<usize>)>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DocExpansion {
    pub click_queries: ClickQuerySet,
    pub term_set: ExpansionTermSet,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Provenance {
    pub log_hash: String,
    pub split: Split,
    pub cap: usize,
}

/// The per-document expansion index. Documents absent from the map are by
/// definition unexpanded.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpansionIndex {
    pub docs: BTreeMap<String, DocExpansion>,
    pub provenance: Provenance,
    /// Click records skipped because their doc or query was unknown.
    pub skipped_records: usize,
}

impl ExpansionIndex {
    pub fn get(&self, doc_id: &str) -> Option<&DocExpansion> {
        self.docs.get(doc_id)
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }
}

/// Build the expansion index from clicked records of one split. Documents
/// with no clicked query are omitted; unknown doc or query references are
/// skipped and counted. Unknown-token terms carry no embedding signal and
/// are excluded from the term sets.
pub fn harvest(
    log: &ClickLog,
    queries: &BTreeMap<String, Query>,
    corpus: &Corpus,
    split: Split,
    max_click_queries: usize,
) -> ExpansionIndex {
    let mut per_doc: BTreeMap<String, Vec<ClickQuery>> = BTreeMap::new();
    let mut skipped = 0usize;
    for record in &log.records {
        if record.split != split || !record.clicked {
            continue;
        }
        if corpus.get(&record.doc_id).is_none() {
            skipped += 1;
            continue;
        }
        let Some(query) = queries.get(&record.query_id) else {
            skipped += 1;
            continue;
        };
        per_doc.entry(record.doc_id.clone()).or_default().push(ClickQuery {
            query_id: record.query_id.clone(),
            terms: query.terms.clone(),
            click_count: record.click_count.max(1),
        });
    }

    let mut docs = BTreeMap::new();
    for (doc_id, mut clicked) in per_doc {
        clicked.sort_by(|a, b| b.click_count.cmp(&a.click_count).then_with(|| a.query_id.cmp(&b.query_id)));
        let total = clicked.len();
        clicked.truncate(max_click_queries);

        let mut term_order: Vec<u32> = Vec::new();
        let mut owners: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (qi, cq) in clicked.iter().enumerate() {
            for &t in &cq.terms {
                if t == UNK_ID {
                    continue;
                }
                let entry = owners.entry(t).or_insert_with(|| {
                    term_order.push(t);
                    Vec::new()
                });
                if entry.last() != Some(&qi) {
                    entry.push(qi);
                }
            }
        }
        if term_order.is_empty() {
            // Every candidate term mapped to the unknown id: nothing usable.
            continue;
        }
        let terms: Vec<(u32, Vec<usize>)> = term_order.into_iter().map(|t| (t, owners[&t].clone())).collect();
        docs.insert(
            doc_id.clone(),
            DocExpansion {
                click_queries: ClickQuerySet {
                    doc_id: doc_id.clone(),
                    queries: clicked,
                    total_click_queries: total,
                },
                term_set: ExpansionTermSet { doc_id, terms },
            },
        );
    }

    ExpansionIndex {
        docs,
        provenance: Provenance {
            log_hash: log.source_hash.clone(),
            split,
            cap: max_click_queries,
        },
        skipped_records: skipped,
    }
}

/// Overlap class of a query against a document field, on id sets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Overlap {
    NoOverlap,
    PartialOverlap,
    Contained,
}

impl Overlap {
    pub const ALL: [Overlap; 3] = [Overlap::NoOverlap, Overlap::PartialOverlap, Overlap::Contained];
}

impl fmt::Display for Overlap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Overlap::NoOverlap => write!(f, "no_overlap"),
            Overlap::PartialOverlap => write!(f, "partial_overlap"),
            Overlap::Contained => write!(f, "contained"),
        }
    }
}

/// Classify the set overlap between query terms and a document field.
pub fn classify_overlap(query_terms: &[u32], field_terms: &[u32]) -> Result<Overlap> {
    if query_terms.is_empty() {
        return Err(Error::data("empty query"));
    }
    let field: std::collections::BTreeSet<u32> = field_terms.iter().copied().collect();
    let total = query_terms
        .iter()
        .collect::<std::collections::BTreeSet<_>>()
        .len();
    let hits = query_terms
        .iter()
        .collect::<std::collections::BTreeSet<_>>()
        .iter()
        .filter(|t| field.contains(t))
        .count();
    Ok(if hits == 0 {
        Overlap::NoOverlap
    } else if hits == total {
        Overlap::Contained
    } else {
        Overlap::PartialOverlap
    })
}

const INDEX_HEADER: &str = "neudef-expansion-index v1";

/// Serialize the index to its stable text container.
pub fn save_index(index: &ExpansionIndex, path: &Path) -> Result<()> {
    let mut out = String::new();
    out.push_str(INDEX_HEADER);
    out.push('\n');
    out.push_str(&format!(
        "provenance {} {} {} {}\n",
        index.provenance.log_hash, index.provenance.split, index.provenance.cap, index.skipped_records
    ));
    out.push_str(&format!("docs {}\n", index.docs.len()));
    for (doc_id, exp) in &index.docs {
        out.push_str(&format!(
            "doc {} {} {} {}\n",
            doc_id,
            exp.click_queries.queries.len(),
            exp.term_set.terms.len(),
            exp.click_queries.total_click_queries
        ));
        for cq in &exp.click_queries.queries {
            out.push_str(&format!("q {} {}", cq.query_id, cq.click_count));
            for t in &cq.terms {
                out.push_str(&format!(" {t}"));
            }
            out.push('\n');
        }
        for (term, owners) in &exp.term_set.terms {
            out.push_str(&format!("t {term}"));
            for o in owners {
                out.push_str(&format!(" {o}"));
            }
            out.push('\n');
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Load an index; when `expected_hash` is given, a provenance mismatch is a
/// "stale expansion index" error.
pub fn load_index(path: &Path, expected_hash: Option<&str>) -> Result<ExpansionIndex> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate();
    let mut next = || lines.next().map(|(n, l)| (n + 1, l));

    let (n, header) = next().ok_or_else(|| Error::malformed(path, 1, "empty index file"))?;
    if header != INDEX_HEADER {
        return Err(Error::malformed(path, n, "bad index header"));
    }
    let (n, prov_line) = next().ok_or_else(|| Error::malformed(path, 2, "missing provenance"))?;
    let prov: Vec<&str> = prov_line.split(' ').collect();
    if prov.len() != 5 || prov[0] != "provenance" {
        return Err(Error::malformed(path, n, "bad provenance line"));
    }
    let provenance = Provenance {
        log_hash: prov[1].to_string(),
        split: prov[2].parse()?,
        cap: prov[3].parse().map_err(|_| Error::malformed(path, n, "bad cap"))?,
    };
    let skipped_records: usize = prov[4].parse().map_err(|_| Error::malformed(path, n, "bad skip count"))?;
    if let Some(expected) = expected_hash {
        if expected != provenance.log_hash {
            return Err(Error::data("stale expansion index"));
        }
    }
    let (n, docs_line) = next().ok_or_else(|| Error::malformed(path, 3, "missing doc count"))?;
    let n_docs: usize = docs_line
        .strip_prefix("docs ")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::malformed(path, n, "bad doc count"))?;

    let mut docs = BTreeMap::new();
    for _ in 0..n_docs {
        let (n, doc_line) = next().ok_or_else(|| Error::malformed(path, 0, "truncated index"))?;
        let parts: Vec<&str> = doc_line.split(' ').collect();
        if parts.len() != 5 || parts[0] != "doc" {
            return Err(Error::malformed(path, n, "bad doc line"));
        }
        let doc_id = parts[1].to_string();
        let nq: usize = parts[2].parse().map_err(|_| Error::malformed(path, n, "bad query count"))?;
        let nt: usize = parts[3].parse().map_err(|_| Error::malformed(path, n, "bad term count"))?;
        let total: usize = parts[4].parse().map_err(|_| Error::malformed(path, n, "bad total count"))?;

        let mut queries = Vec::with_capacity(nq);
        for _ in 0..nq {
            let (n, line) = next().ok_or_else(|| Error::malformed(path, 0, "truncated index"))?;
            let parts: Vec<&str> = line.split(' ').collect();
            if parts.len() < 4 || parts[0] != "q" {
                return Err(Error::malformed(path, n, "bad query line"));
            }
            let click_count: u32 = parts[2].parse().map_err(|_| Error::malformed(path, n, "bad click count"))?;
            let terms: Vec<u32> = parts[3..]
                .iter()
                .map(|t| t.parse().map_err(|_| Error::malformed(path, n, "bad term id")))
                .collect::<Result<_>>()?;
            queries.push(ClickQuery {
                query_id: parts[1].to_string(),
                terms,
                click_count,
            });
        }
        let mut terms = Vec::with_capacity(nt);
        for _ in 0..nt {
            let (n, line) = next().ok_or_else(|| Error::malformed(path, 0, "truncated index"))?;
            let parts: Vec<&str> = line.split(' ').collect();
            if parts.len() < 3 || parts[0] != "t" {
                return Err(Error::malformed(path, n, "bad term line"));
            }
            let term: u32 = parts[1].parse().map_err(|_| Error::malformed(path, n, "bad term id"))?;
            let owners: Vec<usize> = parts[2..]
                .iter()
                .map(|o| o.parse().map_err(|_| Error::malformed(path, n, "bad owner index")))
                .collect::<Result<_>>()?;
            for &o in &owners {
                if o >= queries.len() {
                    return Err(Error::malformed(path, n, "owner index out of range"));
                }
            }
            terms.push((term, owners));
        }
        docs.insert(
            doc_id.clone(),
            DocExpansion {
                click_queries: ClickQuerySet {
                    doc_id: doc_id.clone(),
                    queries,
                    total_click_queries: total,
                },
                term_set: ExpansionTermSet { doc_id, terms },
            },
        );
    }
    Ok(ExpansionIndex {
        docs,
        provenance,
        skipped_records,
    })
}
