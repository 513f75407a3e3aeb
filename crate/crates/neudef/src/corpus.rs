//! Corpus ingestion: vocabulary, documents, queries, click logs and the
//! train/test split discipline.
//!
//! File formats (all UTF-8, tab-separated, one record per line):
//! - corpus:  `doc_id<TAB>title tokens<TAB>body tokens`
//! - queries: `query_id<TAB>tokens<TAB>frequency`
//! - clicks:  `query_id<TAB>doc_id<TAB>clicked{0|1}<TAB>grade(float or '-')<TAB>split{train|test}`
//!
//! Tokens are split on single ASCII spaces; inputs are assumed to be
//! pre-tokenized. Ingestion is single-threaded and deterministic; loaded
//! structures are immutable afterwards.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::{Error, Result};

/// Reserved id for padding / separators.
pub const PAD_ID: u32 = 0;
/// Reserved id for out-of-vocabulary tokens.
pub const UNK_ID: u32 = 1;

/// Token-string to dense-id mapping with two reserved ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>,
}

impl Vocabulary {
    fn with_reserved() -> Self {
        Vocabulary {
            token_to_id: HashMap::new(),
            id_to_token: vec!["<pad>".to_string(), "<unk>".to_string()],
        }
    }

    /// Number of entries including the two reserved ids.
    pub fn size(&self) -> usize {
        self.id_to_token.len()
    }

    /// Id for `token`; unseen tokens map to [`UNK_ID`], never fail.
    pub fn id(&self, token: &str) -> u32 {
        self.token_to_id.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    /// Map a space-separated token string to ids.
    pub fn map_text(&self, text: &str) -> Vec<u32> {
        tokenize(text).map(|t| self.id(t)).collect()
    }

    /// Canonical serialization: `id<TAB>token` per non-reserved entry, in id
    /// order. The two reserved entries are implicit.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        for (id, token) in self.id_to_token.iter().enumerate().skip(2) {
            out.push_str(&format!("{id}\t{token}\n"));
        }
        out
    }

    /// SHA-256 hex digest of the canonical serialization. Checkpoints store
    /// this to detect vocabulary mismatches at load time.
    pub fn content_hash(&self) -> String {
        hex_digest(self.serialize().as_bytes())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.serialize()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Vocabulary> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut vocab = Vocabulary::with_reserved();
        for (lineno, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (id_str, token) = line
                .split_once('\t')
                .ok_or_else(|| Error::malformed(path, lineno + 1, "expected id<TAB>token"))?;
            let id: usize = id_str
                .parse()
                .map_err(|_| Error::malformed(path, lineno + 1, "bad id"))?;
            if id != vocab.id_to_token.len() {
                return Err(Error::malformed(path, lineno + 1, "non-dense vocabulary id"));
            }
            vocab.token_to_id.insert(token.to_string(), id as u32);
            vocab.id_to_token.push(token.to_string());
        }
        Ok(vocab)
    }
}

/// Split pre-tokenized text on single ASCII spaces, dropping empties.
pub fn tokenize(text: &str) -> impl Iterator<Item = &str> {
    text.split(' ').filter(|t| !t.is_empty())
}

/// Build a vocabulary from document and query text streams. Tokens with
/// count >= `min_count` get ids in first-occurrence order, which makes the
/// mapping deterministic for identical input order.
pub fn build_vocabulary<I1, I2>(corpus_texts: I1, query_texts: I2, min_count: u64) -> Result<Vocabulary>
where
    I1: IntoIterator<Item = String>,
    I2: IntoIterator<Item = String>,
{
    let mut order: Vec<String> = Vec::new();
    let mut counts: HashMap<String, u64> = HashMap::new();
    let mut ingest = |text: &str| {
        for token in tokenize(text) {
            match counts.get_mut(token) {
                Some(c) => *c += 1,
                None => {
                    counts.insert(token.to_string(), 1);
                    order.push(token.to_string());
                }
            }
        }
    };
    for text in corpus_texts {
        ingest(&text);
    }
    for text in query_texts {
        ingest(&text);
    }
    if order.is_empty() {
        return Err(Error::data("empty corpus"));
    }
    let mut vocab = Vocabulary::with_reserved();
    for token in order {
        if counts[&token] >= min_count {
            let id = vocab.id_to_token.len() as u32;
            vocab.token_to_id.insert(token.clone(), id);
            vocab.id_to_token.push(token);
        }
    }
    Ok(vocab)
}

/// Per-field truncation limits (prefix kept).
#[derive(Debug, Clone, Copy)]
pub struct FieldLimits {
    pub max_query_len: usize,
    pub max_title_len: usize,
    pub max_body_len: usize,
}

impl Default for FieldLimits {
    fn default() -> Self {
        FieldLimits {
            max_query_len: 16,
            max_title_len: 24,
            max_body_len: 256,
        }
    }
}

/// A document field name.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Field {
    Title,
    Body,
}

impl fmt::Display for Field {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Field::Title => write!(f, "title"),
            Field::Body => write!(f, "body"),
        }
    }
}

impl std::str::FromStr for Field {
    type Err = Error;
    fn from_str(s: &str) -> Result<Field> {
        match s {
            "title" => Ok(Field::Title),
            "body" => Ok(Field::Body),
            other => Err(Error::Config(format!("unknown field '{other}' (expected title|body)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Document {
    pub doc_id: String,
    pub title: Vec<u32>,
    pub body: Vec<u32>,
}

impl Document {
    pub fn field(&self, field: Field) -> &[u32] {
        match field {
            Field::Title => &self.title,
            Field::Body => &self.body,
        }
    }
}

/// An immutable document collection keyed by doc id.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    pub docs: BTreeMap<String, Document>,
}

impl Corpus {
    pub fn get(&self, doc_id: &str) -> Option<&Document> {
        self.docs.get(doc_id)
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }
}

/// Load a corpus file, mapping tokens through `vocab` and truncating fields.
pub fn load_corpus(path: &Path, vocab: &Vocabulary, limits: &FieldLimits) -> Result<Corpus> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut docs = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split('\t').collect();
        if parts.len() != 3 {
            return Err(Error::malformed(
                path,
                lineno + 1,
                format!("expected 3 tab-separated fields, got {}", parts.len()),
            ));
        }
        let (doc_id, title_text, body_text) = (parts[0], parts[1], parts[2]);
        if doc_id.is_empty() {
            return Err(Error::malformed(path, lineno + 1, "empty doc_id"));
        }
        let mut title = vocab.map_text(title_text);
        let mut body = vocab.map_text(body_text);
        if title.is_empty() && body.is_empty() {
            return Err(Error::malformed(path, lineno + 1, "document has neither title nor body"));
        }
        title.truncate(limits.max_title_len);
        body.truncate(limits.max_body_len);
        let doc = Document {
            doc_id: doc_id.to_string(),
            title,
            body,
        };
        if docs.insert(doc_id.to_string(), doc).is_some() {
            return Err(Error::malformed(path, lineno + 1, format!("duplicate doc_id '{doc_id}'")));
        }
    }
    Ok(Corpus { docs })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Query {
    pub query_id: String,
    pub terms: Vec<u32>,
    /// The token string as it appeared in the query file (pre-truncation);
    /// used for split-leakage checks.
    pub raw_text: String,
    /// Number of appearances in the click log.
    pub frequency: u64,
}

/// Load a query file.
pub fn load_queries(path: &Path, vocab: &Vocabulary, limits: &FieldLimits) -> Result<BTreeMap<String, Query>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut queries = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split('\t').collect();
        if parts.len() != 3 {
            return Err(Error::malformed(
                path,
                lineno + 1,
                format!("expected 3 tab-separated fields, got {}", parts.len()),
            ));
        }
        let (query_id, tokens, freq_str) = (parts[0], parts[1], parts[2]);
        let mut terms = vocab.map_text(tokens);
        if terms.is_empty() {
            return Err(Error::malformed(path, lineno + 1, "query has no terms"));
        }
        terms.truncate(limits.max_query_len);
        let frequency: u64 = freq_str
            .parse()
            .map_err(|_| Error::malformed(path, lineno + 1, "bad frequency"))?;
        let q = Query {
            query_id: query_id.to_string(),
            terms,
            raw_text: tokens.to_string(),
            frequency,
        };
        if queries.insert(query_id.to_string(), q).is_some() {
            return Err(Error::malformed(path, lineno + 1, format!("duplicate query_id '{query_id}'")));
        }
    }
    Ok(queries)
}

/// Parse only ids and frequencies from a query file (no vocabulary needed).
pub fn load_query_frequencies(path: &Path) -> Result<BTreeMap<String, u64>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split('\t').collect();
        if parts.len() != 3 {
            return Err(Error::malformed(path, lineno + 1, "expected 3 tab-separated fields"));
        }
        let frequency: u64 = parts[2]
            .parse()
            .map_err(|_| Error::malformed(path, lineno + 1, "bad frequency"))?;
        out.insert(parts[0].to_string(), frequency);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Test => write!(f, "test"),
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split '{other}' (expected train|test)"))),
        }
    }
}

/// A deduplicated (query, doc, split) click record. Raw log lines for the
/// same triple are merged: `clicked` is the logical OR, `grade` the maximum.
/// `click_count` / `impressions` keep the pre-merge event counts, which feed
/// clicked-query ordering and the meta-feature baselines.
#[derive(Debug, Clone, PartialEq)]
pub struct ClickRecord {
    pub query_id: String,
    pub doc_id: String,
    pub clicked: bool,
    pub grade: Option<f64>,
    pub split: Split,
    pub click_count: u32,
    pub impressions: u32,
}

/// A loaded click log plus the hash of its source file.
#[derive(Debug, Clone)]
pub struct ClickLog {
    pub records: Vec<ClickRecord>,
    pub source_hash: String,
}

/// Load and deduplicate a click log.
pub fn load_clicks(path: &Path) -> Result<ClickLog> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let source_hash = hex_digest(&bytes);
    let text = String::from_utf8(bytes).map_err(|_| Error::malformed(path, 0, "not valid UTF-8"))?;
    let mut merged: BTreeMap<(String, String, Split), ClickRecord> = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split('\t').collect();
        if parts.len() != 5 {
            return Err(Error::malformed(
                path,
                lineno + 1,
                format!("expected 5 tab-separated fields, got {}", parts.len()),
            ));
        }
        let clicked = match parts[2] {
            "0" => false,
            "1" => true,
            _ => return Err(Error::malformed(path, lineno + 1, "clicked must be 0 or 1")),
        };
        let grade = match parts[3] {
            "-" => None,
            g => {
                let v: f64 = g
                    .parse()
                    .map_err(|_| Error::malformed(path, lineno + 1, "bad grade"))?;
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::malformed(path, lineno + 1, "grade outside [0, 1]"));
                }
                Some(v)
            }
        };
        let split: Split = parts[4]
            .parse()
            .map_err(|_| Error::malformed(path, lineno + 1, "split must be train or test"))?;
        let key = (parts[0].to_string(), parts[1].to_string(), split);
        let entry = merged.entry(key).or_insert_with(|| ClickRecord {
            query_id: parts[0].to_string(),
            doc_id: parts[1].to_string(),
            clicked: false,
            grade: None,
            split,
            click_count: 0,
            impressions: 0,
        });
        entry.clicked |= clicked;
        entry.grade = match (entry.grade, grade) {
            (Some(a), Some(b)) => Some(a.max(b)),
            (a, b) => a.or(b),
        };
        entry.click_count += clicked as u32;
        entry.impressions += 1;
    }
    Ok(ClickLog {
        records: merged.into_values().collect(),
        source_hash,
    })
}

/// Query-id sets per split, derived from the click log.
#[derive(Debug, Clone, Default)]
pub struct DatasetSplit {
    pub train: BTreeSet<String>,
    pub test: BTreeSet<String>,
}

impl DatasetSplit {
    pub fn from_log(log: &ClickLog) -> DatasetSplit {
        let mut split = DatasetSplit::default();
        for r in &log.records {
            match r.split {
                Split::Train => split.train.insert(r.query_id.clone()),
                Split::Test => split.test.insert(r.query_id.clone()),
            };
        }
        split
    }
}

/// Result of the split-leakage check.
#[derive(Debug, Clone)]
pub struct SplitReport {
    /// Raw query strings appearing in both splits, sorted.
    pub violations: Vec<String>,
    pub empty_test: bool,
    /// Records referencing query ids absent from the query set.
    pub unknown_queries: usize,
}

impl SplitReport {
    pub fn ok(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Check that no raw query string appears in both splits. Violations are
/// data, not errors: the offending strings are returned to the caller.
pub fn verify_split(queries: &BTreeMap<String, Query>, log: &ClickLog) -> SplitReport {
    let split = DatasetSplit::from_log(log);
    let mut unknown = 0usize;
    let mut strings = |ids: &BTreeSet<String>| -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        for id in ids {
            match queries.get(id) {
                Some(q) => {
                    out.insert(q.raw_text.clone());
                }
                None => unknown += 1,
            }
        }
        out
    };
    let train_strings = strings(&split.train);
    let test_strings = strings(&split.test);
    let violations: Vec<String> = train_strings.intersection(&test_strings).cloned().collect();
    SplitReport {
        violations,
        empty_test: split.test.is_empty(),
        unknown_queries: unknown,
    }
}

/// Query-frequency bucket.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum QueryBucket {
    Head,
    Torso,
    Tail,
}

impl fmt::Display for QueryBucket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            QueryBucket::Head => write!(f, "head"),
            QueryBucket::Torso => write!(f, "torso"),
            QueryBucket::Tail => write!(f, "tail"),
        }
    }
}

/// Tail below 50 appearances, torso 50-1000, head above 1000.
pub fn bucket_query(frequency: u64) -> QueryBucket {
    if frequency < 50 {
        QueryBucket::Tail
    } else if frequency <= 1000 {
        QueryBucket::Torso
    } else {
        QueryBucket::Head
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Write;

    fn tmp_file(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn vocabulary_threshold_boundary() {
        // a appears 5 times, b once; min_count 2 keeps only a.
        let corpus = vec!["a a a".to_string(), "a a b".to_string()];
        let vocab = build_vocabulary(corpus, Vec::<String>::new(), 2).unwrap();
        assert_eq!(vocab.size(), 3);
        assert_eq!(vocab.id("a"), 2);
        assert_eq!(vocab.id("b"), UNK_ID);
    }

    #[test]
    fn vocabulary_min_count_one_over_two_tokens() {
        let vocab = build_vocabulary(vec!["x y".to_string()], Vec::<String>::new(), 1).unwrap();
        assert_eq!(vocab.size(), 4);
    }

    #[test]
    fn vocabulary_is_deterministic_for_identical_input() {
        let stream = || vec!["c b a".to_string(), "b d".to_string()];
        let v1 = build_vocabulary(stream(), Vec::<String>::new(), 1).unwrap();
        let v2 = build_vocabulary(stream(), Vec::<String>::new(), 1).unwrap();
        for t in ["a", "b", "c", "d"] {
            assert_eq!(v1.id(t), v2.id(t));
        }
    }

    #[test]
    fn vocabulary_rejects_empty_input() {
        let err = build_vocabulary(Vec::<String>::new(), Vec::<String>::new(), 1).unwrap_err();
        assert!(err.to_string().contains("empty corpus"));
    }

    #[test]
    fn vocabulary_file_roundtrip() {
        let vocab = build_vocabulary(vec!["a b c".to_string()], Vec::<String>::new(), 1).unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        vocab.save(f.path()).unwrap();
        let loaded = Vocabulary::load(f.path()).unwrap();
        assert_eq!(vocab, loaded);
        assert_eq!(vocab.content_hash(), loaded.content_hash());
    }

    #[test]
    fn load_corpus_maps_tokens_and_truncates() {
        let vocab = build_vocabulary(vec!["cat dog".to_string()], Vec::<String>::new(), 1).unwrap();
        let body: Vec<&str> = std::iter::repeat("cat").take(10_000).collect();
        let f = tmp_file(&format!("d1\tcat dog\t{}\n", body.join(" ")));
        let limits = FieldLimits::default();
        let corpus = load_corpus(f.path(), &vocab, &limits).unwrap();
        let doc = corpus.get("d1").unwrap();
        assert_eq!(doc.title, vec![2, 3]);
        assert_eq!(doc.body.len(), limits.max_body_len);
    }

    #[test]
    fn load_corpus_unknown_token_becomes_unk() {
        let vocab = build_vocabulary(vec!["cat".to_string()], Vec::<String>::new(), 1).unwrap();
        let f = tmp_file("d1\tcat zebra\t\n");
        let corpus = load_corpus(f.path(), &vocab, &FieldLimits::default()).unwrap();
        assert_eq!(corpus.get("d1").unwrap().title, vec![2, UNK_ID]);
    }

    #[test]
    fn load_corpus_rejects_duplicates_and_malformed_lines() {
        let vocab = build_vocabulary(vec!["a".to_string()], Vec::<String>::new(), 1).unwrap();
        let dup = tmp_file("d1\ta\t\nd1\ta\t\n");
        let err = load_corpus(dup.path(), &vocab, &FieldLimits::default()).unwrap_err();
        assert!(err.to_string().contains(":2:"), "{err}");
        let bad = tmp_file("d1\tonly two fields\n");
        let err = load_corpus(bad.path(), &vocab, &FieldLimits::default()).unwrap_err();
        assert!(err.to_string().contains(":1:"), "{err}");
        let empty_both = tmp_file("d1\t\t\n");
        assert!(load_corpus(empty_both.path(), &vocab, &FieldLimits::default()).is_err());
    }

    #[test]
    fn click_log_merges_duplicate_triples() {
        let f = tmp_file(concat!(
            "q1\td1\t0\t0.2\ttrain\n",
            "q1\td1\t1\t0.8\ttrain\n",
            "q1\td1\t1\t-\ttrain\n",
            "q1\td1\t0\t0.5\ttest\n",
        ));
        let log = load_clicks(f.path()).unwrap();
        assert_eq!(log.records.len(), 2);
        let train = log.records.iter().find(|r| r.split == Split::Train).unwrap();
        assert!(train.clicked);
        assert_eq!(train.grade, Some(0.8));
        assert_eq!(train.click_count, 2);
        assert_eq!(train.impressions, 3);
    }

    #[test]
    fn bucket_boundaries_match_definition() {
        assert_eq!(bucket_query(49), QueryBucket::Tail);
        assert_eq!(bucket_query(50), QueryBucket::Torso);
        assert_eq!(bucket_query(1000), QueryBucket::Torso);
        assert_eq!(bucket_query(1001), QueryBucket::Head);
        assert_eq!(bucket_query(0), QueryBucket::Tail);
    }

    fn queries_fixture(entries: &[(&str, &str)]) -> BTreeMap<String, Query> {
        entries
            .iter()
            .map(|(id, text)| {
                (
                    id.to_string(),
                    Query {
                        query_id: id.to_string(),
                        terms: vec![2],
                        raw_text: text.to_string(),
                        frequency: 1,
                    },
                )
            })
            .collect()
    }

    #[test]
    fn verify_split_flags_shared_strings() {
        let queries = queries_fixture(&[("q1", "abc"), ("q2", "abc"), ("q3", "zzz")]);
        let f = tmp_file("q1\td1\t1\t-\ttrain\nq2\td1\t1\t-\ttest\nq3\td2\t0\t-\ttest\n");
        let log = load_clicks(f.path()).unwrap();
        let report = verify_split(&queries, &log);
        assert!(!report.ok());
        assert_eq!(report.violations, vec!["abc".to_string()]);
    }

    #[test]
    fn verify_split_disjoint_is_ok_and_empty_test_warns() {
        let queries = queries_fixture(&[("q1", "abc"), ("q2", "def")]);
        let f = tmp_file("q1\td1\t1\t-\ttrain\nq2\td1\t1\t-\ttrain\n");
        let log = load_clicks(f.path()).unwrap();
        let report = verify_split(&queries, &log);
        assert!(report.ok());
        assert!(report.empty_test);
    }

    proptest! {
        #[test]
        fn bucket_is_a_total_three_way_partition(freq in 0u64..5000) {
            let b = bucket_query(freq);
            let expected = if freq < 50 {
                QueryBucket::Tail
            } else if freq <= 1000 {
                QueryBucket::Torso
            } else {
                QueryBucket::Head
            };
            prop_assert_eq!(b, expected);
        }

        #[test]
        fn vocabulary_roundtrip_is_identity(tokens in proptest::collection::vec("[a-z]{1,6}", 1..40)) {
            let vocab = build_vocabulary(vec![tokens.join(" ")], Vec::<String>::new(), 1).unwrap();
            for id in 2..vocab.size() as u32 {
                let tok = vocab.token(id).unwrap();
                prop_assert_eq!(vocab.id(tok), id);
            }
        }
    }
}
