//! Ranked-run container and the plain-text run format:
//! `query_id Q0 doc_id rank score tag`, scores printed with 6 decimals.
//! Ties are broken before printing, so format precision cannot reorder.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::ranker::ScoredDocument;
use crate::{Error, Result};

/// Ranked document lists with scores, keyed by query id.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedRun {
    pub tag: String,
    pub rankings: BTreeMap<String, Vec<(String, f64)>>,
}

impl RankedRun {
    pub fn new(tag: &str) -> RankedRun {
        RankedRun {
            tag: tag.to_string(),
            rankings: BTreeMap::new(),
        }
    }

    /// Insert one query's ranking from scored documents (already ordered).
    pub fn insert_scored(&mut self, query_id: &str, scored: &[ScoredDocument]) {
        self.rankings.insert(
            query_id.to_string(),
            scored.iter().map(|s| (s.doc_id.clone(), s.total)).collect(),
        );
    }

    pub fn serialize(&self) -> String {
        let mut out = String::new();
        for (query_id, docs) in &self.rankings {
            for (rank, (doc_id, score)) in docs.iter().enumerate() {
                out.push_str(&format!(
                    "{} Q0 {} {} {:.6} {}\n",
                    query_id,
                    doc_id,
                    rank + 1,
                    score,
                    self.tag
                ));
            }
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.serialize()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<RankedRun> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut tag = String::new();
        let mut rankings: BTreeMap<String, Vec<(String, f64)>> = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split(' ').collect();
            if parts.len() != 6 || parts[1] != "Q0" {
                return Err(Error::malformed(path, lineno + 1, "expected 'query Q0 doc rank score tag'"));
            }
            let rank: usize = parts[3]
                .parse()
                .map_err(|_| Error::malformed(path, lineno + 1, "bad rank"))?;
            let score: f64 = parts[4]
                .parse()
                .map_err(|_| Error::malformed(path, lineno + 1, "bad score"))?;
            let docs = rankings.entry(parts[0].to_string()).or_default();
            if rank != docs.len() + 1 {
                return Err(Error::malformed(path, lineno + 1, "ranks must be dense and ascending"));
            }
            if docs.iter().any(|(d, _)| d == parts[2]) {
                return Err(Error::malformed(path, lineno + 1, "duplicate doc in ranking"));
            }
            docs.push((parts[2].to_string(), score));
            tag = parts[5].to_string();
        }
        Ok(RankedRun { tag, rankings })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn run_roundtrips_to_printed_precision() {
        let mut run = RankedRun::new("demo");
        run.rankings.insert(
            "q1".into(),
            vec![("d2".into(), 0.9123456789), ("d1".into(), -0.25)],
        );
        let f = tempfile::NamedTempFile::new().unwrap();
        run.write(f.path()).unwrap();
        let loaded = RankedRun::read(f.path()).unwrap();
        assert_eq!(loaded.tag, "demo");
        let docs = &loaded.rankings["q1"];
        assert_eq!(docs[0].0, "d2");
        assert!((docs[0].1 - 0.912346).abs() < 1e-9);
        assert!((docs[1].1 + 0.25).abs() < 1e-9);
        // Round-trip of the re-serialized file is exact.
        let f2 = tempfile::NamedTempFile::new().unwrap();
        loaded.write(f2.path()).unwrap();
        assert_eq!(std::fs::read(f.path()).unwrap(), std::fs::read(f2.path()).unwrap());
    }

    #[test]
    fn read_rejects_sparse_ranks_and_duplicates() {
        let f = tempfile::NamedTempFile::new().unwrap();
        std::fs::write(f.path(), "q1 Q0 d1 2 0.5 t\n").unwrap();
        assert!(RankedRun::read(f.path()).is_err());
        std::fs::write(f.path(), "q1 Q0 d1 1 0.5 t\nq1 Q0 d1 2 0.4 t\n").unwrap();
        assert!(RankedRun::read(f.path()).is_err());
    }
}
