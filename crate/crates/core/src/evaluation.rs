//! Re-ranking, MRR@k / Recall@k, threshold sweeps, paired significance
//! tests and collection-frequency bucket analyses.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::ops::RangeInclusive;
use std::path::Path;

use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::corpus::{Candidate, CandidateList, FrequencyTable, Qrels, Query};
use crate::embeddings::Featurizer;
use crate::error::{Error, Result};
use crate::firststage::{bm25_score, Bm25Params, InvertedIndex, RankedList, ScoredDoc};
use crate::rankers::Ranker;

pub use crate::embeddings::memory_footprint;

pub const DEFAULT_CUTOFF: usize = 10;
pub const MAX_THRESHOLD: usize = 300;

/// Scores one candidate of a query. Implementations must be pure.
pub trait Scorer: Sync {
    fn score(&self, query: &Query, candidate: &Candidate) -> Result<f64>;
}

/// Replays the first-stage score stored with each candidate.
#[derive(Debug, Clone, Copy, Default)]
pub struct FirstStageScorer;

impl Scorer for FirstStageScorer {
    fn score(&self, _query: &Query, candidate: &Candidate) -> Result<f64> {
        Ok(candidate.first_stage_score)
    }
}

/// Recomputes BM25 from an index.
#[derive(Debug, Clone, Copy)]
pub struct Bm25Scorer<'a> {
    pub index: &'a InvertedIndex,
    pub params: Bm25Params,
}

impl Scorer for Bm25Scorer<'_> {
    fn score(&self, query: &Query, candidate: &Candidate) -> Result<f64> {
        bm25_score(query, &candidate.doc.id, self.index, self.params)
    }
}

/// A trained ranker applied to featurized token sequences.
#[derive(Debug, Clone, Copy)]
pub struct NeuralScorer<'a> {
    pub ranker: &'a Ranker<f32>,
    pub featurizer: &'a Featurizer,
}

impl Scorer for NeuralScorer<'_> {
    fn score(&self, query: &Query, candidate: &Candidate) -> Result<f64> {
        let input = self.ranker.config().input;
        let q = self.featurizer.encode(&query.tokens, input.max_query_length);
        let d = self.featurizer.encode(&candidate.doc.tokens, input.max_doc_length);
        self.ranker.score(&q, &d).map(f64::from)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RerankConfig {
    pub threshold: usize,
}

impl RerankConfig {
    pub fn new(threshold: usize) -> Result<Self> {
        if threshold == 0 {
            return Err(Error::InvalidArgument("re-ranking threshold must be >= 1".into()));
        }
        Ok(RerankConfig { threshold })
    }
}

/// Scores of the first `depth` candidates.
fn score_prefix(scorer: &dyn Scorer, list: &CandidateList, depth: usize) -> Result<Vec<f64>> {
    list.candidates[..depth.min(list.candidates.len())]
        .par_iter()
        .map(|c| {
            let s = scorer.score(&list.query, c)?;
            if s.is_finite() {
                Ok(s)
            } else {
                Err(Error::NonFinite(format!("score of {}/{}", list.query.id, c.doc.id)))
            }
        })
        .collect()
}

/// Positions of the re-ranked block: descending score, ties by first-stage rank.
fn block_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Builds the output list from block scores for the first `scores.len()`
/// candidates; the rest keep their first-stage order and scores.
pub fn arrange(list: &CandidateList, scores: &[f64]) -> RankedList {
    let mut entries: Vec<ScoredDoc> = block_order(scores)
        .into_iter()
        .map(|i| ScoredDoc {
            doc_id: list.candidates[i].doc.id.clone(),
            score: scores[i],
        })
        .collect();
    entries.extend(list.candidates[scores.len()..].iter().map(|c| ScoredDoc {
        doc_id: c.doc.id.clone(),
        score: c.first_stage_score,
    }));
    RankedList {
        query_id: list.query.id.clone(),
        entries,
    }
}

/// Re-scores the top `threshold` candidates and sorts them; the tail is
/// appended in first-stage order.
pub fn rerank(scorer: &dyn Scorer, list: &CandidateList, config: RerankConfig) -> Result<RankedList> {
    let scores = score_prefix(scorer, list, config.threshold)?;
    Ok(arrange(list, &scores))
}

pub fn rerank_all(scorer: &dyn Scorer, lists: &[CandidateList], config: RerankConfig) -> Result<Vec<RankedList>> {
    lists.iter().map(|l| rerank(scorer, l, config)).collect()
}

// ---------------------------------------------------------------------------
// Metrics

#[derive(Debug, Clone, PartialEq)]
pub struct QueryMetrics {
    pub query_id: String,
    pub reciprocal_rank: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub cutoff: usize,
    /// Evaluated queries in run order.
    pub per_query: Vec<QueryMetrics>,
    pub mrr: f64,
    pub recall: f64,
    /// Run queries without any relevant document in the qrels.
    pub excluded: usize,
}

impl EvalResult {
    pub fn reciprocal_ranks(&self) -> BTreeMap<String, f64> {
        self.per_query
            .iter()
            .map(|m| (m.query_id.clone(), m.reciprocal_rank))
            .collect()
    }
}

/// `1/r` for the first relevant document at rank `r <= k`, else 0.
pub fn reciprocal_rank<'a>(docs: impl IntoIterator<Item = &'a str>, relevant: &HashSet<String>, k: usize) -> f64 {
    docs.into_iter()
        .take(k)
        .position(|d| relevant.contains(d))
        .map_or(0.0, |p| 1.0 / (p + 1) as f64)
}

/// Fraction of `relevant` within the first `k` documents.
pub fn recall_at<'a>(docs: impl IntoIterator<Item = &'a str>, relevant: &HashSet<String>, k: usize) -> f64 {
    let found = docs.into_iter().take(k).filter(|d| relevant.contains(*d)).count();
    found as f64 / relevant.len() as f64
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

fn aggregate(cutoff: usize, per_query: Vec<QueryMetrics>, excluded: usize) -> EvalResult {
    EvalResult {
        cutoff,
        mrr: mean(per_query.iter().map(|m| m.reciprocal_rank)),
        recall: mean(per_query.iter().map(|m| m.recall)),
        per_query,
        excluded,
    }
}

/// MRR@k and Recall@k over the run's queries. Queries without relevant
/// documents are excluded and counted.
pub fn evaluate(run: &[RankedList], qrels: &Qrels, k: usize) -> Result<EvalResult> {
    if k == 0 {
        return Err(Error::InvalidArgument("cutoff k must be >= 1".into()));
    }
    let mut seen = HashSet::new();
    let mut per_query = Vec::with_capacity(run.len());
    let mut excluded = 0;
    for list in run {
        if !seen.insert(list.query_id.as_str()) {
            return Err(Error::DuplicateId(format!("query {} appears twice in the run", list.query_id)));
        }
        match qrels.relevant(&list.query_id).filter(|r| !r.is_empty()) {
            None => excluded += 1,
            Some(rel) => per_query.push(QueryMetrics {
                query_id: list.query_id.clone(),
                reciprocal_rank: reciprocal_rank(list.doc_ids(), rel, k),
                recall: recall_at(list.doc_ids(), rel, k),
            }),
        }
    }
    Ok(aggregate(k, per_query, excluded))
}

// ---------------------------------------------------------------------------
// Threshold sweep

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepPoint {
    pub threshold: usize,
    pub mrr: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sweep {
    pub curve: Vec<SweepPoint>,
    pub best_threshold: usize,
    pub best_mrr: f64,
}

fn best_of(curve: Vec<SweepPoint>) -> Sweep {
    let best = curve
        .iter()
        .fold(None::<SweepPoint>, |best, p| match best {
            Some(b) if b.mrr >= p.mrr => Some(b),
            _ => Some(*p),
        })
        .expect("non-empty curve");
    Sweep {
        best_threshold: best.threshold,
        best_mrr: best.mrr,
        curve,
    }
}

fn check_range(range: &RangeInclusive<usize>) -> Result<()> {
    if range.is_empty() || *range.start() == 0 {
        return Err(Error::InvalidArgument(format!(
            "threshold range {}..={} must be non-empty and start at >= 1",
            range.start(),
            range.end()
        )));
    }
    Ok(())
}

/// MRR@k / Recall@k for every threshold in `range`. Candidates are scored
/// once up to the largest threshold; each threshold then only re-sorts a
/// prefix. Best threshold = highest MRR, smallest on ties.
pub fn sweep_threshold(
    scorer: &dyn Scorer,
    lists: &[CandidateList],
    qrels: &Qrels,
    range: RangeInclusive<usize>,
    k: usize,
) -> Result<Sweep> {
    check_range(&range)?;
    if k == 0 {
        return Err(Error::InvalidArgument("cutoff k must be >= 1".into()));
    }
    let judged: Vec<(&CandidateList, &HashSet<String>)> = lists
        .iter()
        .filter_map(|l| qrels.relevant(&l.query.id).filter(|r| !r.is_empty()).map(|r| (l, r)))
        .collect();
    let scores: Vec<Vec<f64>> = judged
        .iter()
        .map(|(l, _)| score_prefix(scorer, l, *range.end()))
        .collect::<Result<_>>()?;
    // per query, per threshold: (rr, recall)
    let per_query: Vec<Vec<(f64, f64)>> = judged
        .par_iter()
        .zip(&scores)
        .map(|((list, rel), scores)| prefix_metrics(list, scores, rel, range.clone(), k))
        .collect();
    let curve = range
        .clone()
        .enumerate()
        .map(|(i, t)| SweepPoint {
            threshold: t,
            mrr: mean(per_query.iter().map(|q| q[i].0)),
            recall: mean(per_query.iter().map(|q| q[i].1)),
        })
        .collect();
    Ok(best_of(curve))
}

/// Metrics of one query at each threshold, growing a sorted block one
/// candidate at a time.
fn prefix_metrics(
    list: &CandidateList,
    scores: &[f64],
    relevant: &HashSet<String>,
    range: RangeInclusive<usize>,
    k: usize,
) -> Vec<(f64, f64)> {
    let n = list.candidates.len();
    let mut block: Vec<usize> = Vec::new();
    let mut out = Vec::new();
    let mut t_done = 0;
    for t in range {
        while t_done < t.min(n) {
            let i = t_done;
            // every j already in the block precedes i in first-stage order
            let at = block.partition_point(|&j| scores[j].total_cmp(&scores[i]).is_ge());
            block.insert(at, i);
            t_done += 1;
        }
        let top = block
            .iter()
            .copied()
            .chain(t_done..n)
            .take(k)
            .map(|i| list.candidates[i].doc.id.as_str());
        let top: Vec<&str> = top.collect();
        out.push((
            reciprocal_rank(top.iter().copied(), relevant, k),
            recall_at(top.iter().copied(), relevant, k),
        ));
    }
    out
}

/// Reference implementation: a full [`rerank`] and [`evaluate`] per threshold.
pub fn sweep_threshold_naive(
    scorer: &dyn Scorer,
    lists: &[CandidateList],
    qrels: &Qrels,
    range: RangeInclusive<usize>,
    k: usize,
) -> Result<Sweep> {
    check_range(&range)?;
    let mut curve = Vec::new();
    for t in range {
        let run = rerank_all(scorer, lists, RerankConfig::new(t)?)?;
        let r = evaluate(&run, qrels, k)?;
        curve.push(SweepPoint {
            threshold: t,
            mrr: r.mrr,
            recall: r.recall,
        });
    }
    Ok(best_of(curve))
}

// ---------------------------------------------------------------------------
// Significance

/// Two-sided paired t-test on per-query values aligned by query id.
/// Zero-variance differences give p = 1 when their mean is 0, else p = 0.
pub fn paired_ttest(a: &BTreeMap<String, f64>, b: &BTreeMap<String, f64>) -> Result<f64> {
    if a.len() != b.len() || a.keys().zip(b.keys()).any(|(x, y)| x != y) {
        return Err(Error::Invariant("paired t-test needs the same query set on both sides".into()));
    }
    let diffs: Vec<f64> = a.values().zip(b.values()).map(|(x, y)| x - y).collect();
    paired_ttest_differences(&diffs)
}

pub fn paired_ttest_differences(diffs: &[f64]) -> Result<f64> {
    let n = diffs.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!("paired t-test needs n >= 2, got {n}")));
    }
    if diffs.iter().any(|d| !d.is_finite()) {
        return Err(Error::NonFinite("paired t-test input".into()));
    }
    let nf = n as f64;
    let mean = diffs.iter().sum::<f64>() / nf;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (nf - 1.0);
    if var == 0.0 {
        return Ok(if mean == 0.0 { 1.0 } else { 0.0 });
    }
    let t = mean / (var / nf).sqrt();
    let dist = StudentsT::new(0.0, 1.0, nf - 1.0).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    Ok((2.0 * dist.cdf(-t.abs())).min(1.0))
}

// ---------------------------------------------------------------------------
// Frequency buckets

/// Smallest collection frequency among the query's terms; `u64::MAX` for
/// a query without terms.
pub fn min_collection_frequency(query: &Query, freqs: &FrequencyTable) -> u64 {
    query.tokens.iter().map(|t| freqs.get(t)).min().unwrap_or(u64::MAX)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BucketPoint {
    /// `u64::MAX` stands for an unbounded threshold.
    pub threshold: u64,
    /// `None` when no query qualifies.
    pub mrr: Option<f64>,
    pub count: usize,
}

/// Cumulative buckets: for each threshold `x`, the mean reciprocal rank of
/// queries whose rarest term has collection frequency `<= x`.
pub fn frequency_bucket_mrr(
    per_query: &[QueryMetrics],
    queries: &[Query],
    freqs: &FrequencyTable,
    thresholds: &[u64],
) -> Result<Vec<BucketPoint>> {
    let min_cf: HashMap<&str, u64> = queries
        .iter()
        .map(|q| (q.id.as_str(), min_collection_frequency(q, freqs)))
        .collect();
    let rows: Vec<(u64, f64)> = per_query
        .iter()
        .map(|m| {
            min_cf
                .get(m.query_id.as_str())
                .map(|&cf| (cf, m.reciprocal_rank))
                .ok_or_else(|| Error::Invariant(format!("no query text for {}", m.query_id)))
        })
        .collect::<Result<_>>()?;
    Ok(thresholds
        .iter()
        .map(|&x| {
            let (sum, count) = rows
                .iter()
                .filter(|(cf, _)| *cf <= x)
                .fold((0.0, 0usize), |(s, n), (_, rr)| (s + rr, n + 1));
            BucketPoint {
                threshold: x,
                mrr: (count > 0).then(|| sum / count as f64),
                count,
            }
        })
        .collect())
}

/// Pointwise `a - b` of two bucket curves over the same thresholds.
pub fn bucket_difference(a: &[BucketPoint], b: &[BucketPoint]) -> Result<Vec<BucketPoint>> {
    if a.len() != b.len() || a.iter().zip(b).any(|(x, y)| x.threshold != y.threshold) {
        return Err(Error::Invariant("bucket curves use different thresholds".into()));
    }
    Ok(a.iter()
        .zip(b)
        .map(|(x, y)| BucketPoint {
            threshold: x.threshold,
            mrr: x.mrr.zip(y.mrr).map(|(p, q)| p - q),
            count: x.count.min(y.count),
        })
        .collect())
}

// ---------------------------------------------------------------------------
// TSV outputs

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn finish(path: &Path, r: std::io::Result<()>) -> Result<()> {
    r.map_err(|e| Error::io(path, e))
}

pub fn format_threshold(x: u64) -> String {
    if x == u64::MAX {
        "inf".to_string()
    } else {
        x.to_string()
    }
}

pub fn parse_threshold(s: &str) -> Option<u64> {
    if s == "inf" {
        Some(u64::MAX)
    } else {
        s.parse().ok()
    }
}

/// `T<TAB>mrr<TAB>recall`.
pub fn write_threshold_curve(path: &Path, sweep: &Sweep) -> Result<()> {
    let mut out = create(path)?;
    let r = (|| {
        for p in &sweep.curve {
            writeln!(out, "{}\t{}\t{}", p.threshold, p.mrr, p.recall)?;
        }
        out.flush()
    })();
    finish(path, r)
}

/// `x<TAB>mrr<TAB>count`; an empty bucket has `nan` as its MRR.
pub fn write_bucket_curve(path: &Path, curve: &[BucketPoint]) -> Result<()> {
    let mut out = create(path)?;
    let r = (|| {
        for p in curve {
            let mrr = p.mrr.map_or_else(|| "nan".to_string(), |m| m.to_string());
            writeln!(out, "{}\t{mrr}\t{}", format_threshold(p.threshold), p.count)?;
        }
        out.flush()
    })();
    finish(path, r)
}

/// `query_id<TAB>rr<TAB>recall`.
pub fn write_per_query(path: &Path, result: &EvalResult) -> Result<()> {
    let mut out = create(path)?;
    let r = (|| {
        for m in &result.per_query {
            writeln!(out, "{}\t{}\t{}", m.query_id, m.reciprocal_rank, m.recall)?;
        }
        out.flush()
    })();
    finish(path, r)
}

pub fn read_per_query(path: &Path) -> Result<Vec<QueryMetrics>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let parsed = match fields[..] {
            [q, rr, rec] => rr.parse().ok().zip(rec.parse().ok()).map(|(rr, rec)| (q, rr, rec)),
            _ => None,
        };
        let Some((q, rr, rec)) = parsed else {
            return Err(Error::parse(path, idx + 1, "expected query_id<TAB>rr<TAB>recall"));
        };
        rows.push(QueryMetrics {
            query_id: q.to_string(),
            reciprocal_rank: rr,
            recall: rec,
        });
    }
    Ok(rows)
}

/// `runA<TAB>runB<TAB>p`.
pub fn write_significance(path: &Path, rows: &[(String, String, f64)]) -> Result<()> {
    let mut out = create(path)?;
    let r = (|| {
        for (a, b, p) in rows {
            writeln!(out, "{a}\t{b}\t{p}")?;
        }
        out.flush()
    })();
    finish(path, r)
}
