//! Ranking metrics (reciprocal rank, NDCG@k, per-document rank deltas), a
//! paired sign-flipping permutation test, and frequency-bucketed reports.

pub mod analysis;
pub mod run;
pub mod synth;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{bucket_query, QueryBucket};
use crate::{Error, Result};
use run::RankedRun;

/// Graded relevance judgments: query id -> doc id -> grade.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Judgments {
    pub grades: BTreeMap<String, BTreeMap<String, f64>>,
}

impl Judgments {
    /// Load `query_id<TAB>doc_id<TAB>grade` lines.
    pub fn load(path: &Path) -> Result<Judgments> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut grades: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split('\t').collect();
            if parts.len() != 3 {
                return Err(Error::malformed(path, lineno + 1, "expected query<TAB>doc<TAB>grade"));
            }
            let grade: f64 = parts[2]
                .parse()
                .map_err(|_| Error::malformed(path, lineno + 1, "bad grade"))?;
            grades
                .entry(parts[0].to_string())
                .or_default()
                .insert(parts[1].to_string(), grade);
        }
        Ok(Judgments { grades })
    }

    pub fn relevant_set(&self, query_id: &str, threshold: f64) -> BTreeSet<String> {
        self.grades
            .get(query_id)
            .map(|docs| {
                docs.iter()
                    .filter(|(_, &g)| g >= threshold)
                    .map(|(d, _)| d.clone())
                    .collect()
            })
            .unwrap_or_default()
    }
}

/// Reciprocal rank of the first relevant document; 0 when none is present.
pub fn reciprocal_rank(ranked: &[String], relevant: &BTreeSet<String>) -> f64 {
    for (i, doc) in ranked.iter().enumerate() {
        if relevant.contains(doc) {
            return 1.0 / (i + 1) as f64;
        }
    }
    0.0
}

/// NDCG@k with gain 2^g - 1 and log2 discount; 0 when all grades are zero.
pub fn ndcg_at_k(ranked: &[String], grades: &BTreeMap<String, f64>, k: usize) -> f64 {
    let gain = |g: f64| 2f64.powf(g) - 1.0;
    let dcg: f64 = ranked
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, doc)| gain(grades.get(doc).copied().unwrap_or(0.0)) / ((i + 2) as f64).log2())
        .sum();
    let mut ideal: Vec<f64> = grades.values().copied().collect();
    ideal.sort_by(|a, b| b.total_cmp(a));
    let idcg: f64 = ideal
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, &g)| gain(g) / ((i + 2) as f64).log2())
        .sum();
    if idcg == 0.0 {
        0.0
    } else {
        dcg / idcg
    }
}

/// Rank of `doc_id` under `query` in a run, as a reciprocal; 0 if unranked.
fn rr_of_doc(run: &RankedRun, query_id: &str, doc_id: &str) -> f64 {
    run.rankings
        .get(query_id)
        .and_then(|docs| docs.iter().position(|(d, _)| d == doc_id))
        .map(|pos| 1.0 / (pos + 1) as f64)
        .unwrap_or(0.0)
}

/// Label-signed change of a document's own reciprocal rank between two runs,
/// summed over the queries that judge it. Returns `(value, judged)`; an
/// unjudged document yields `(0, false)`.
pub fn delta_rr(
    run_base: &RankedRun,
    run_new: &RankedRun,
    judgments: &Judgments,
    doc_id: &str,
    relevance_threshold: f64,
) -> (f64, bool) {
    let mut total = 0.0;
    let mut judged = false;
    for (query_id, docs) in &judgments.grades {
        let Some(&grade) = docs.get(doc_id) else {
            continue;
        };
        if !run_base.rankings.contains_key(query_id) && !run_new.rankings.contains_key(query_id) {
            continue;
        }
        judged = true;
        let y = if grade >= relevance_threshold { 1.0 } else { -1.0 };
        total += y * (rr_of_doc(run_new, query_id, doc_id) - rr_of_doc(run_base, query_id, doc_id));
    }
    (total, judged)
}

/// Two-sided paired sign-flipping permutation test on per-query differences,
/// with add-one smoothing.
pub fn permutation_test(a: &[f64], b: &[f64], iterations: usize, seed: u64) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::data("permutation test requires equal-length paired vectors"));
    }
    if a.is_empty() {
        return Ok(1.0);
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = diffs.len() as f64;
    let observed = (diffs.iter().sum::<f64>() / n).abs();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut exceed = 0usize;
    for _ in 0..iterations {
        let sum: f64 = diffs.iter().map(|&d| if rng.gen::<bool>() { d } else { -d }).sum();
        if (sum / n).abs() >= observed {
            exceed += 1;
        }
    }
    Ok((exceed + 1) as f64 / (iterations + 1) as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerQueryMetrics {
    pub query_id: String,
    pub bucket: QueryBucket,
    pub rr: f64,
    pub ndcg1: f64,
    pub ndcg10: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BucketRow {
    pub label: String,
    pub count: usize,
    pub mrr: f64,
    pub ndcg1: f64,
    pub ndcg10: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SignificanceRow {
    pub metric: String,
    pub baseline: String,
    pub p_value: f64,
}

/// Per-bucket and per-query metrics for one run.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub tag: String,
    pub per_query: Vec<PerQueryMetrics>,
    pub buckets: Vec<BucketRow>,
    pub significance: Vec<SignificanceRow>,
    /// Ranked queries without judgments, excluded from aggregates.
    pub skipped_unjudged: usize,
}

impl EvalReport {
    pub fn bucket(&self, label: &str) -> Option<&BucketRow> {
        self.buckets.iter().find(|b| b.label == label)
    }

    /// MRR over all judged queries.
    pub fn mrr(&self) -> f64 {
        self.bucket("all").map(|b| b.mrr).unwrap_or(0.0)
    }

    pub fn ndcg10(&self) -> f64 {
        self.bucket("all").map(|b| b.ndcg10).unwrap_or(0.0)
    }

    /// Human-readable table.
    pub fn render_table(&self) -> String {
        let mut out = format!("run: {}\n", self.tag);
        out.push_str(&format!(
            "{:<8} {:>7} {:>8} {:>8} {:>8}\n",
            "bucket", "count", "mrr", "ndcg@1", "ndcg@10"
        ));
        for b in &self.buckets {
            out.push_str(&format!(
                "{:<8} {:>7} {:>8.4} {:>8.4} {:>8.4}\n",
                b.label, b.count, b.mrr, b.ndcg1, b.ndcg10
            ));
        }
        for s in &self.significance {
            out.push_str(&format!(
                "p-value vs {} ({}): {:.4}{}\n",
                s.baseline,
                s.metric,
                s.p_value,
                if s.p_value < 0.05 { "  (significant)" } else { "" }
            ));
        }
        if self.skipped_unjudged > 0 {
            out.push_str(&format!("skipped unjudged queries: {}\n", self.skipped_unjudged));
        }
        out
    }

    /// Line-delimited machine records.
    pub fn machine_lines(&self) -> String {
        let mut out = String::new();
        for b in &self.buckets {
            out.push_str(&format!(
                "bucket\t{}\t{}\t{}\t{:.6}\t{:.6}\t{:.6}\n",
                self.tag, b.label, b.count, b.mrr, b.ndcg1, b.ndcg10
            ));
        }
        for q in &self.per_query {
            out.push_str(&format!(
                "query\t{}\t{}\t{}\t{:.6}\t{:.6}\t{:.6}\n",
                self.tag, q.query_id, q.bucket, q.rr, q.ndcg1, q.ndcg10
            ));
        }
        for s in &self.significance {
            out.push_str(&format!(
                "significance\t{}\t{}\t{}\t{:.6}\n",
                self.tag, s.baseline, s.metric, s.p_value
            ));
        }
        out
    }
}

/// Evaluate a run against judgments, bucketing queries by their log
/// frequency. Queries without judgments are counted and skipped.
pub fn evaluate_run(
    run: &RankedRun,
    judgments: &Judgments,
    frequencies: &BTreeMap<String, u64>,
    relevance_threshold: f64,
) -> EvalReport {
    let mut per_query = Vec::new();
    let mut skipped = 0usize;
    for (query_id, ranking) in &run.rankings {
        let Some(grades) = judgments.grades.get(query_id) else {
            skipped += 1;
            continue;
        };
        let ranked: Vec<String> = ranking.iter().map(|(d, _)| d.clone()).collect();
        let relevant: BTreeSet<String> = grades
            .iter()
            .filter(|(_, &g)| g >= relevance_threshold)
            .map(|(d, _)| d.clone())
            .collect();
        let frequency = frequencies.get(query_id).copied().unwrap_or(0);
        per_query.push(PerQueryMetrics {
            query_id: query_id.clone(),
            bucket: bucket_query(frequency),
            rr: reciprocal_rank(&ranked, &relevant),
            ndcg1: ndcg_at_k(&ranked, grades, 1),
            ndcg10: ndcg_at_k(&ranked, grades, 10),
        });
    }

    let mut buckets = Vec::new();
    let mut push_bucket = |label: &str, rows: Vec<&PerQueryMetrics>| {
        let count = rows.len();
        let mean = |f: fn(&PerQueryMetrics) -> f64| {
            if count == 0 {
                0.0
            } else {
                rows.iter().map(|r| f(r)).sum::<f64>() / count as f64
            }
        };
        buckets.push(BucketRow {
            label: label.to_string(),
            count,
            mrr: mean(|r| r.rr),
            ndcg1: mean(|r| r.ndcg1),
            ndcg10: mean(|r| r.ndcg10),
        });
    };
    push_bucket("all", per_query.iter().collect());
    for bucket in [QueryBucket::Head, QueryBucket::Torso, QueryBucket::Tail] {
        push_bucket(
            &bucket.to_string(),
            per_query.iter().filter(|q| q.bucket == bucket).collect(),
        );
    }

    EvalReport {
        tag: run.tag.clone(),
        per_query,
        buckets,
        significance: Vec::new(),
        skipped_unjudged: skipped,
    }
}

/// Paired significance of `report` against a baseline report over their
/// shared judged queries, one permutation test per metric.
pub fn add_significance(
    report: &mut EvalReport,
    baseline: &EvalReport,
    iterations: usize,
    seed: u64,
) -> Result<()> {
    let base_by_id: BTreeMap<&str, &PerQueryMetrics> =
        baseline.per_query.iter().map(|q| (q.query_id.as_str(), q)).collect();
    let mut mrr_a = Vec::new();
    let mut mrr_b = Vec::new();
    let mut ndcg1_a = Vec::new();
    let mut ndcg1_b = Vec::new();
    let mut ndcg10_a = Vec::new();
    let mut ndcg10_b = Vec::new();
    for q in &report.per_query {
        if let Some(b) = base_by_id.get(q.query_id.as_str()) {
            mrr_a.push(q.rr);
            mrr_b.push(b.rr);
            ndcg1_a.push(q.ndcg1);
            ndcg1_b.push(b.ndcg1);
            ndcg10_a.push(q.ndcg10);
            ndcg10_b.push(b.ndcg10);
        }
    }
    for (metric, a, b, salt) in [
        ("mrr", &mrr_a, &mrr_b, 1u64),
        ("ndcg@1", &ndcg1_a, &ndcg1_b, 2),
        ("ndcg@10", &ndcg10_a, &ndcg10_b, 3),
    ] {
        report.significance.push(SignificanceRow {
            metric: metric.to_string(),
            baseline: baseline.tag.clone(),
            p_value: permutation_test(a, b, iterations, seed.wrapping_add(salt))?,
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(ids: &[&str]) -> BTreeSet<String> {
        ids.iter().map(|s| s.to_string()).collect()
    }

    fn ranked(ids: &[&str]) -> Vec<String> {
        ids.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn reciprocal_rank_conventions() {
        assert_eq!(reciprocal_rank(&ranked(&["a", "b"]), &set(&["a"])), 1.0);
        assert_eq!(reciprocal_rank(&ranked(&["a", "b", "c", "d"]), &set(&["d"])), 0.25);
        assert_eq!(reciprocal_rank(&ranked(&["a", "b"]), &set(&["z"])), 0.0);
    }

    #[test]
    fn ndcg_ideal_ordering_is_one() {
        let grades: BTreeMap<String, f64> = [("a".to_string(), 3.0), ("b".to_string(), 1.0)].into();
        assert!((ndcg_at_k(&ranked(&["a", "b"]), &grades, 10) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ndcg_hand_evaluated_case() {
        // Grades in ranked order [2, 3, 0] at k=3:
        // DCG = 3/log2(2) + 7/log2(3) + 0; IDCG = 7/log2(2) + 3/log2(3).
        let grades: BTreeMap<String, f64> =
            [("a".to_string(), 2.0), ("b".to_string(), 3.0), ("c".to_string(), 0.0)].into();
        let got = ndcg_at_k(&ranked(&["a", "b", "c"]), &grades, 3);
        let dcg = 3.0 / 2f64.log2() + 7.0 / 3f64.log2();
        let idcg = 7.0 / 2f64.log2() + 3.0 / 3f64.log2();
        assert!((got - dcg / idcg).abs() < 1e-12);
        assert!((got - 0.8340).abs() < 1e-4);
    }

    #[test]
    fn ndcg_all_zero_grades_is_zero() {
        let grades: BTreeMap<String, f64> = [("a".to_string(), 0.0)].into();
        assert_eq!(ndcg_at_k(&ranked(&["a"]), &grades, 5), 0.0);
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
                            .map(|(i, d)| (d.to_string(), 1.0 - i as f64 * 0.1))
                            .collect(),
                    )
                })
                .collect(),
        }
    }

    fn judgments_of(entries: &[(&str, &str, f64)]) -> Judgments {
        let mut j = Judgments::default();
        for (q, d, g) in entries {
            j.grades
                .entry(q.to_string())
                .or_default()
                .insert(d.to_string(), *g);
        }
        j
    }

    #[test]
    fn delta_rr_identical_runs_is_zero() {
        let run = run_of("a", &[("q1", &["d1", "d2"])]);
        let judgments = judgments_of(&[("q1", "d1", 1.0)]);
        let (v, judged) = delta_rr(&run, &run, &judgments, "d1", 0.5);
        assert_eq!(v, 0.0);
        assert!(judged);
    }

    #[test]
    fn delta_rr_positive_label_move_up() {
        // d moves rank 2 -> 1 with y = +1: 1 - 0.5 = +0.5.
        let base = run_of("base", &[("q1", &["x", "d"])]);
        let new = run_of("new", &[("q1", &["d", "x"])]);
        let judgments = judgments_of(&[("q1", "d", 1.0)]);
        let (v, _) = delta_rr(&base, &new, &judgments, "d", 0.5);
        assert!((v - 0.5).abs() < 1e-12);
    }

    #[test]
    fn delta_rr_negative_label_move_up() {
        // y = -1, d moves rank 4 -> 2: -(0.5 - 0.25) = -0.25.
        let base = run_of("base", &[("q1", &["a", "b", "c", "d"])]);
        let new = run_of("new", &[("q1", &["a", "d", "b", "c"])]);
        let judgments = judgments_of(&[("q1", "d", 0.0)]);
        let (v, _) = delta_rr(&base, &new, &judgments, "d", 0.5);
        assert!((v + 0.25).abs() < 1e-12);
    }

    #[test]
    fn delta_rr_antisymmetry() {
        let base = run_of("base", &[("q1", &["a", "d", "b"]), ("q2", &["d", "a", "b"])]);
        let new = run_of("new", &[("q1", &["d", "a", "b"]), ("q2", &["a", "b", "d"])]);
        let judgments = judgments_of(&[("q1", "d", 1.0), ("q2", "d", 0.2)]);
        let (fwd, _) = delta_rr(&base, &new, &judgments, "d", 0.5);
        let (bwd, _) = delta_rr(&new, &base, &judgments, "d", 0.5);
        assert!((fwd + bwd).abs() < 1e-12);
    }

    #[test]
    fn delta_rr_unjudged_doc_is_flagged() {
        let run = run_of("a", &[("q1", &["d1"])]);
        let judgments = judgments_of(&[("q1", "d1", 1.0)]);
        let (v, judged) = delta_rr(&run, &run, &judgments, "zz", 0.5);
        assert_eq!(v, 0.0);
        assert!(!judged);
    }

    #[test]
    fn permutation_test_identical_vectors() {
        let a = vec![0.3, 0.5, 0.7];
        let p = permutation_test(&a, &a, 1000, 1).unwrap();
        assert_eq!(p, 1.0);
    }

    #[test]
    fn permutation_test_single_query_is_uninformative() {
        let p = permutation_test(&[0.9], &[0.1], 1000, 1).unwrap();
        assert_eq!(p, 1.0);
    }

    #[test]
    fn permutation_test_rejects_length_mismatch() {
        assert!(permutation_test(&[1.0], &[1.0, 2.0], 10, 1).is_err());
    }

    /// Exhaustive sign-flip enumeration for small n.
    fn exact_sign_flip_p(diffs: &[f64]) -> f64 {
        let n = diffs.len();
        let observed = (diffs.iter().sum::<f64>() / n as f64).abs();
        let mut exceed = 0usize;
        for mask in 0u32..(1 << n) {
            let sum: f64 = diffs
                .iter()
                .enumerate()
                .map(|(i, &d)| if mask & (1 << i) != 0 { d } else { -d })
                .sum();
            if (sum / n as f64).abs() >= observed {
                exceed += 1;
            }
        }
        exceed as f64 / (1u64 << n) as f64
    }

    #[test]
    fn permutation_test_shifted_vectors_are_significant() {
        // a = b + 1 elementwise over 20 queries.
        let b: Vec<f64> = (0..20).map(|i| 0.01 * i as f64).collect();
        let a: Vec<f64> = b.iter().map(|v| v + 1.0).collect();
        let p = permutation_test(&a, &b, 10_000, 7).unwrap();
        assert!(p <= 0.001, "p = {p}");

        // Oracle on a 10-query prefix: exhaustive enumeration.
        let diffs = vec![1.0; 10];
        let exact = exact_sign_flip_p(&diffs);
        let sampled = permutation_test(&a[..10], &b[..10], 10_000, 7).unwrap();
        // Exact p = 2/1024; the sampled estimate (with add-one smoothing)
        // agrees within Monte-Carlo noise.
        assert!((exact - 2.0 / 1024.0).abs() < 1e-12);
        assert!((sampled - exact).abs() < 0.004, "sampled {sampled} exact {exact}");
    }

    #[test]
    fn evaluate_run_buckets_by_frequency() {
        let run = run_of("r", &[("q1", &["d1", "d2"]), ("q2", &["d2", "d1"])]);
        let judgments = judgments_of(&[("q1", "d1", 1.0), ("q2", "d1", 1.0)]);
        let frequencies: BTreeMap<String, u64> = [("q1".to_string(), 10), ("q2".to_string(), 2000)].into();
        let report = evaluate_run(&run, &judgments, &frequencies, 0.5);
        assert_eq!(report.bucket("all").unwrap().count, 2);
        assert_eq!(report.bucket("tail").unwrap().count, 1);
        assert_eq!(report.bucket("head").unwrap().count, 1);
        assert!((report.bucket("all").unwrap().mrr - 0.75).abs() < 1e-12);
        assert!(report.bucket("all").unwrap().mrr <= 1.0);
    }
}
