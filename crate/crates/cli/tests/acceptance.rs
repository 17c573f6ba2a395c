//! Acceptance checks, one line per criterion. Runs as a plain binary so the
//! report is always printed; exits non-zero if any criterion fails.

mod common;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rerank_lab::corpus::{build_vocabulary, oov_query_stats, Candidate, CandidateList, Document, FrequencyTable, Qrels, Query};
use rerank_lab::embeddings::{
    hash_ngram, memory_footprint, subword_ngrams, EmbeddingTable, EncodedText, Featurizer,
    SubwordEmbedder, SubwordLayout,
};
use rerank_lab::evaluation::{
    evaluate, frequency_bucket_mrr, paired_ttest, rerank, rerank_all, sweep_threshold, sweep_threshold_naive,
    Bm25Scorer, QueryMetrics, RerankConfig, Scorer,
};
use rerank_lab::firststage::{bm25_score, candidate_pool, retrieve, write_run, Bm25Params, InvertedIndex, RankedList, ScoredDoc};
use rerank_lab::nn::{gaussian_kernel_pool, GradCheckOptions, KernelBank, Tensor};
use rerank_lab::rankers::{check_pair_gradients, ModelConfig, ModelKind, Ranker};
use rerank_lab::synthetic::{random_ranker, random_text, separable, SeparableSpec};
use rerank_lab::training::{train, TrainConfig, TrainingTriple, Validation};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($msg)+));
        }
    };
}

fn main() {
    let criteria: [Criterion; 12] = [
        ("gradient correctness", gradient_correctness),
        ("bm25 oracle equivalence", bm25_oracle),
        ("kernel pooling analytics", kernel_analytics),
        ("metric oracle equivalence", metric_oracle),
        ("overfit sanity", overfit_sanity),
        ("re-rank identity", rerank_identity),
        ("vocabulary accounting", vocabulary_accounting),
        ("subword composition", subword_composition),
        ("end-to-end determinism", determinism),
        ("sweep optimization equivalence", sweep_equivalence),
        ("frequency-bucket analysis", frequency_buckets),
        ("paired t-test", ttest_reference),
    ];
    // panics become FAIL lines instead of backtraces
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {:>2} PASS  {name} ({secs:.1}s): {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name} ({secs:.1}s): {detail}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------------------
// 1

fn gradient_correctness() -> Outcome {
    const ROWS: usize = 30;
    const DIM: usize = 10;
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut summary = Vec::new();
    for kind in ModelKind::ALL {
        let ranker = random_ranker(ModelConfig::new(kind), ROWS, DIM, 102)
            .map_err(|e| e.to_string())?
            .cast::<f64>();
        let q = random_text(&mut rng, 8, ROWS);
        let d = random_text(&mut rng, 20, ROWS);
        let options = GradCheckOptions {
            step: 1e-4,
            // the convolutional models have too many entries to probe all
            max_entries: (kind != ModelKind::Knrm).then_some(48),
            seed: 103,
            refinements: 3,
        };
        let report = check_pair_gradients(&ranker, &q, &d, options).map_err(|e| e.to_string())?;
        for p in &report.params {
            let dense = p.name == "embedding" || p.name.starts_with("head.") || p.name.starts_with("hidden.");
            let bound = if dense { 1e-4 } else { 1e-3 };
            ensure!(p.checked > 0, "{kind} {}: no entry checked", p.name);
            ensure!(
                p.max_rel_error < bound,
                "{kind} {}: max relative error {:.3e} >= {bound:e}",
                p.name,
                p.max_rel_error
            );
        }
        summary.push(format!(
            "{kind} max rel err {:.1e} over {} tensors ({} kink skips)",
            report.max_rel_error(),
            report.params.len(),
            report.total_skipped()
        ));
    }
    Ok(summary.join("; "))
}

// ---------------------------------------------------------------------------
// 2

/// Scores by scanning the raw token lists: no index, no shared helpers.
/// `df` holds the document frequency of each query term, also counted by
/// scanning.
fn brute_force_bm25(query: &[String], doc: &[String], docs: &[Vec<String>], df: &HashMap<&str, usize>, k1: f64, b: f64) -> f64 {
    let n = docs.len() as f64;
    let avgdl = docs.iter().map(|d| d.len()).sum::<usize>() as f64 / n;
    let len = doc.len() as f64;
    let mut score = 0.0;
    for term in query {
        let tf = doc.iter().filter(|t| *t == term).count() as f64;
        if tf == 0.0 {
            continue;
        }
        let df = df[term.as_str()] as f64;
        let idf = (1.0 + (n - df + 0.5) / (df + 0.5)).ln();
        score += idf * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * len / avgdl));
    }
    score
}

fn random_corpus(rng: &mut ChaCha8Rng, docs: usize, vocab: usize, max_len: usize) -> Vec<Vec<String>> {
    (0..docs)
        .map(|_| {
            let len = rng.random_range(1..=max_len);
            (0..len).map(|_| format!("t{}", rng.random_range(0..vocab))).collect()
        })
        .collect()
}

fn to_documents(texts: &[Vec<String>]) -> Vec<Document> {
    texts
        .iter()
        .enumerate()
        .map(|(i, t)| Document::new(format!("d{i:04}"), &t.join(" ")))
        .collect()
}

fn bm25_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(201);
    let mut pairs = 0usize;
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let n_docs = rng.random_range(1..=1000);
        let vocab = rng.random_range(1..=50);
        let texts = random_corpus(&mut rng, n_docs, vocab, 30);
        let docs = to_documents(&texts);
        let index = InvertedIndex::build(docs.iter().cloned().map(Ok)).map_err(|e| e.to_string())?;
        let params = Bm25Params::new(rng.random_range(0.0..2.0), rng.random_range(0.0..=1.0)).unwrap();
        for qi in 0..3 {
            // may repeat terms and use terms outside the collection
            let len = rng.random_range(1..=5);
            let tokens: Vec<String> = (0..len).map(|_| format!("t{}", rng.random_range(0..vocab + 5))).collect();
            let query = Query::new(format!("q{qi}"), &tokens.join(" "));
            let df: HashMap<&str, usize> = tokens
                .iter()
                .map(|t| (t.as_str(), texts.iter().filter(|d| d.contains(t)).count()))
                .collect();
            for (i, doc) in docs.iter().enumerate() {
                let got = bm25_score(&query, &doc.id, &index, params).map_err(|e| e.to_string())?;
                let want = brute_force_bm25(&tokens, &texts[i], &texts, &df, params.k1, params.b);
                worst = worst.max((got - want).abs());
                ensure!(
                    (got - want).abs() <= 1e-9,
                    "{} vs {want} for {tokens:?} on {} ({n_docs} docs)",
                    got,
                    doc.id
                );
                pairs += 1;
            }
        }
    }
    Ok(format!("{pairs} (query, doc) pairs over 200 corpora, max abs diff {worst:.1e}"))
}

// ---------------------------------------------------------------------------
// 3

fn kernel_analytics() -> Outcome {
    // single entry, single kernel
    let m = Tensor::new(&[1, 1], vec![0.5f64]).unwrap();
    // a bank always carries the exact-match kernel; only the first is read
    let bank = KernelBank::new(vec![0.3, 1.0], vec![0.1, 0.1]).unwrap();
    let (_, cache) = gaussian_kernel_pool(&m, &bank, &[true], &[true]).unwrap();
    let k = cache.activations()[0];
    ensure!((k - 0.1353353).abs() < 1e-7, "K(0.5; 0.3, 0.1) = {k}");

    // every default kernel over a grid of single entries
    let bank = ModelConfig::default().kernel_bank().unwrap();
    for i in 0..=40 {
        let v = -1.0 + 0.05 * f64::from(i);
        let m = Tensor::new(&[1, 1], vec![v]).unwrap();
        let (_, cache) = gaussian_kernel_pool(&m, &bank, &[true], &[true]).unwrap();
        for (kk, (&mu, &sigma)) in bank.means().iter().zip(bank.widths()).enumerate() {
            let want = (-(v - mu).powi(2) / (2.0 * sigma * sigma)).exp();
            ensure!((cache.activations()[kk] - want).abs() < 1e-7, "M={v} mu={mu}");
        }
    }

    // duplicating the document adds ln 2 to each kernel feature of a
    // single-token query; kernels whose mass is below 1e-3 are dominated by
    // the log epsilon and are not compared
    let mut rng = ChaCha8Rng::seed_from_u64(301);
    let mut compared = 0;
    for trial in 0..20 {
        let ranker = random_ranker(ModelConfig::new(ModelKind::Knrm), 40, 8, 302 + trial)
            .unwrap()
            .cast::<f64>();
        let q = random_text(&mut rng, 1, 40);
        let ids: Vec<u32> = (0..rng.random_range(1..=90)).map(|_| rng.random_range(1..40u32)).collect();
        let doubled: Vec<u32> = ids.iter().chain(&ids).copied().collect();
        let phi = |d: &[u32]| -> Vec<f64> {
            let (_, c) = ranker.forward(&q, &EncodedText::from_ids(d)).unwrap();
            c.features().unwrap().to_vec()
        };
        let (a, b) = (phi(&ids), phi(&doubled));
        for (x, y) in a.iter().zip(&b) {
            if x.exp() > 1e-3 {
                ensure!((y - x - 2f64.ln()).abs() < 1e-6, "delta phi {} != ln 2", y - x);
                compared += 1;
            }
        }
    }
    ensure!(compared > 50, "only {compared} kernels compared");
    Ok(format!("K = {k:.9}; delta phi = ln 2 on {compared} kernels"))
}

// ---------------------------------------------------------------------------
// 4

fn metric_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(401);
    for r in 0..1000 {
        let n_queries = rng.random_range(1..=15);
        let mut run = Vec::new();
        let mut qrels = Qrels::new();
        let mut judgments: HashMap<String, HashSet<String>> = HashMap::new();
        for q in 0..n_queries {
            let qid = format!("q{q}");
            let mut pool: Vec<usize> = (0..40).collect();
            pool.shuffle(&mut rng);
            let len = rng.random_range(0..=25);
            run.push(RankedList {
                query_id: qid.clone(),
                entries: pool[..len]
                    .iter()
                    .enumerate()
                    .map(|(i, d)| ScoredDoc {
                        doc_id: format!("d{d}"),
                        score: -(i as f64),
                    })
                    .collect(),
            });
            for _ in 0..rng.random_range(0..=4) {
                let d = format!("d{}", rng.random_range(0..40));
                qrels.insert(qid.clone(), d.clone());
                judgments.entry(qid.clone()).or_default().insert(d);
            }
        }
        let got = evaluate(&run, &qrels, 10).map_err(|e| e.to_string())?;

        let (mut rr_sum, mut rec_sum, mut n, mut excluded) = (0.0, 0.0, 0usize, 0usize);
        for list in &run {
            let Some(rel) = judgments.get(&list.query_id) else {
                excluded += 1;
                continue;
            };
            let top: Vec<&str> = list.entries.iter().take(10).map(|e| e.doc_id.as_str()).collect();
            let mut rr = 0.0;
            for (i, d) in top.iter().enumerate() {
                if rel.contains(*d) {
                    rr = 1.0 / (i + 1) as f64;
                    break;
                }
            }
            let hits = top.iter().filter(|d| rel.contains(**d)).count();
            rr_sum += rr;
            rec_sum += hits as f64 / rel.len() as f64;
            n += 1;
        }
        let (mrr, recall) = if n == 0 { (0.0, 0.0) } else { (rr_sum / n as f64, rec_sum / n as f64) };
        ensure!(
            got.mrr == mrr && got.recall == recall && got.excluded == excluded,
            "run {r}: got ({}, {}, {}) want ({mrr}, {recall}, {excluded})",
            got.mrr,
            got.recall,
            got.excluded
        );
    }

    // first relevant at rank 4
    let list = RankedList {
        query_id: "q".into(),
        entries: ["a", "b", "c", "rel", "e"]
            .iter()
            .map(|d| ScoredDoc {
                doc_id: d.to_string(),
                score: 0.0,
            })
            .collect(),
    };
    let mut qrels = Qrels::new();
    qrels.insert("q", "rel");
    let rr = evaluate(&[list], &qrels, 10).unwrap().mrr;
    ensure!(rr == 0.25, "RR at rank 4 = {rr}");
    Ok("1000 random runs match exactly; RR(rank 4) = 0.25".into())
}

// ---------------------------------------------------------------------------
// 5

fn overfit_sanity() -> Outcome {
    let data = separable(&SeparableSpec::default()).map_err(|e| e.to_string())?;
    let vocab = build_vocabulary(data.documents.iter().cloned().map(Ok), 1).map_err(|e| e.to_string())?;
    let featurizer = Featurizer::Word(vocab.clone());
    let validation = Validation {
        candidates: &data.candidates,
        qrels: &data.qrels,
    };
    let mut summary = Vec::new();
    for kind in ModelKind::ALL {
        let config = ModelConfig::new(kind);
        let triples: Vec<TrainingTriple> = data
            .triples
            .iter()
            .filter_map(|[q, p, n]| TrainingTriple::from_texts(q, p, n, config.input))
            .collect();
        let new_ranker = || Ranker::new(config.clone(), EmbeddingTable::random(vocab.len(), 50, 1).unwrap().into_matrix());

        let tc = TrainConfig {
            batch_size: 16,
            learning_rate: 0.001,
            eval_every: 10,
            patience: 5,
            max_steps: Some(200),
            epochs: 10,
            ..TrainConfig::default()
        };
        let mut ranker = new_ranker().map_err(|e| e.to_string())?;
        let out = train(&mut ranker, &featurizer, &triples, validation, &tc, None).map_err(|e| e.to_string())?;
        ensure!(out.log[0].loss == 1.0, "{kind}: first batch loss {} != margin", out.log[0].loss);
        ensure!(
            out.best_mrr == 1.0 && out.best_step <= 200,
            "{kind}: best validation MRR {} at step {}",
            out.best_mrr,
            out.best_step
        );
        summary.push(format!(
            "{kind} MRR 1.0 at step {}{}",
            out.best_step,
            if out.stopped_early { " (halted by patience)" } else { "" }
        ));

        // frozen learning rate
        let frozen = TrainConfig {
            learning_rate: 0.0,
            max_steps: Some(3),
            eval_every: 3,
            ..tc
        };
        let mut ranker = new_ranker().map_err(|e| e.to_string())?;
        let before = ranker.params().clone();
        let out = train(&mut ranker, &featurizer, &triples, validation, &frozen, None).map_err(|e| e.to_string())?;
        ensure!(*ranker.params() == before, "{kind}: parameters moved with learning_rate = 0");
        ensure!(out.log.iter().all(|r| r.loss == 1.0), "{kind}: loss not constant at lr 0");
    }
    Ok(summary.join("; ") + "; lr=0 leaves parameters bit-identical")
}

// ---------------------------------------------------------------------------
// 6

struct TableScorer(HashMap<(String, String), f64>);

impl Scorer for TableScorer {
    fn score(&self, query: &Query, candidate: &Candidate) -> rerank_lab::Result<f64> {
        Ok(self.0[&(query.id.clone(), candidate.doc.id.clone())])
    }
}

fn run_bytes(lists: &[RankedList]) -> Vec<u8> {
    let mut out = Vec::new();
    write_run(&mut out, lists, "run").unwrap();
    out
}

fn rerank_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(601);
    let texts = random_corpus(&mut rng, 600, 50, 25);
    let docs = to_documents(&texts);
    let by_id: HashMap<String, Document> = docs.iter().map(|d| (d.id.clone(), d.clone())).collect();
    let index = InvertedIndex::build(docs.iter().cloned().map(Ok)).unwrap();
    let params = Bm25Params::default();
    let queries: Vec<Query> = (0..40)
        .map(|q| {
            let len = rng.random_range(1..=4);
            let t: Vec<String> = (0..len).map(|_| format!("t{}", rng.random_range(0..55))).collect();
            Query::new(format!("q{q}"), &t.join(" "))
        })
        .collect();
    let first: Vec<RankedList> = queries.iter().map(|q| retrieve(q, &index, params, 400).unwrap()).collect();
    let pools: Vec<CandidateList> = queries
        .iter()
        .zip(&first)
        .map(|(q, r)| candidate_pool(q, r, &by_id).unwrap())
        .collect();
    let longest = pools.iter().map(|p| p.candidates.len()).max().unwrap();
    ensure!(longest > 300, "pools too short ({longest}) to exercise T = 300");
    let oracle = Bm25Scorer { index: &index, params };
    let reference = run_bytes(&first);
    for t in [1, 10, 50, 300] {
        let run = rerank_all(&oracle, &pools, RerankConfig::new(t).unwrap()).unwrap();
        ensure!(run_bytes(&run) == reference, "T = {t}: run file differs from the first-stage run");
    }

    // any scorer, any T: output is a permutation of the input
    let mut checked = 0;
    for trial in 0..200 {
        let pool = &pools[trial % pools.len()];
        let table = TableScorer(
            pool.candidates
                .iter()
                .map(|c| ((pool.query.id.clone(), c.doc.id.clone()), f64::from(rng.random_range(0..5u8))))
                .collect(),
        );
        let t = rng.random_range(1..=pool.candidates.len().max(1) + 5);
        let out = rerank(&table, pool, RerankConfig::new(t).unwrap()).unwrap();
        let mut a: Vec<&str> = out.doc_ids().collect();
        let mut b: Vec<&str> = pool.candidates.iter().map(|c| c.doc.id.as_str()).collect();
        a.sort_unstable();
        b.sort_unstable();
        ensure!(a == b, "trial {trial}: output is not a permutation of the input");
        checked += 1;
    }
    Ok(format!(
        "BM25 oracle reproduces the first-stage run byte for byte at T = 1, 10, 50, 300; {checked} random re-rankings are permutations"
    ))
}

// ---------------------------------------------------------------------------
// 7

fn vocabulary_accounting() -> Outcome {
    // term t{i} occurs exactly i times, for i in 1..=100, spread over docs
    let mut tokens: Vec<String> = (1..=100usize).flat_map(|i| std::iter::repeat_n(format!("t{i}"), i)).collect();
    tokens.shuffle(&mut ChaCha8Rng::seed_from_u64(701));
    let docs: Vec<Document> = tokens
        .chunks(37)
        .enumerate()
        .map(|(i, c)| Document::new(format!("d{i}"), &c.join(" ")))
        .collect();
    // query j asks for t{j}; ten more queries contain a term never seen
    let mut queries: Vec<Query> = (1..=100).map(|j| Query::new(format!("q{j}"), &format!("t{j}"))).collect();
    queries.extend((0..10).map(|k| Query::new(format!("x{k}"), &format!("t100 unseen{k}"))));

    // (n, terms, coverage %, OOV queries), worked out by hand from the design
    let expected: [(u64, usize, f64, usize); 6] = [
        (1, 100, 100.0, 10),
        (5, 96, 96.0, 14),
        (10, 91, 91.0, 19),
        (25, 76, 76.0, 34),
        (50, 51, 51.0, 59),
        (100, 1, 1.0, 109),
    ];
    for (n, terms, coverage, oov) in expected {
        let vocab = build_vocabulary(docs.iter().cloned().map(Ok), n).unwrap();
        ensure!(vocab.term_count() == terms, "Voc-{n}: {} terms", vocab.term_count());
        ensure!(vocab.len() == terms + 2, "Voc-{n}: reserved rows missing");
        ensure!(vocab.coverage_percent() == coverage, "Voc-{n}: coverage {}", vocab.coverage_percent());
        let stats = oov_query_stats(&queries, &vocab).unwrap();
        ensure!(stats.count == oov && stats.total == 110, "Voc-{n}: {} OOV queries", stats.count);
        ensure!(stats.percent == oov as f64 / 110.0 * 100.0, "Voc-{n}: OOV % {}", stats.percent);
        let bytes = memory_footprint(terms as u64, 300);
        ensure!(bytes == terms as u64 * 1200, "Voc-{n}: footprint {bytes}");
    }
    ensure!(memory_footprint(91, 300) == 109_200, "footprint of 91 x 300");

    // the published table: term counts, dimension, and reported size
    let table: [(&str, u64, u64, f64); 7] = [
        ("Voc-Full", 3_525_473, 300, 4.23e9),
        ("Voc-5", 542_878, 300, 651e6),
        ("Voc-10", 314_607, 300, 378e6),
        ("Voc-25", 169_983, 300, 204e6),
        ("Voc-50", 111_815, 300, 134e6),
        ("Voc-100", 75_805, 300, 91e6),
        ("FastText", 2_950_302, 200, 2.36e9),
    ];
    let mut worst = 0.0f64;
    for (name, terms, dim, size) in table {
        let rel = (memory_footprint(terms, dim) as f64 - size).abs() / size;
        worst = worst.max(rel);
        ensure!(rel < 0.02, "{name}: {} bytes vs {size}", memory_footprint(terms, dim));
    }
    Ok(format!(
        "six Voc-n levels match hand counts; published sizes reproduced within {:.2}%",
        worst * 100.0
    ))
}

// ---------------------------------------------------------------------------
// 8

fn fnv1a32_reference(bytes: &[u8]) -> u32 {
    let mut h: u32 = 2_166_136_261;
    for &b in bytes {
        h ^= u32::from(b);
        h = h.wrapping_mul(16_777_619);
    }
    h
}

fn subword_composition() -> Outcome {
    let grams = subword_ngrams("where").unwrap();
    ensure!(grams == ["<wh", "whe", "her", "ere", "re>"], "{grams:?}");
    ensure!(subword_ngrams("a").unwrap() == ["<a>"], "single letter");
    ensure!(subword_ngrams("ab").unwrap() == ["<ab", "ab>"], "two letters");
    ensure!(subword_ngrams("").is_err(), "empty word accepted");
    ensure!(hash_ngram("whe", 1) == 0, "B = 1 must map to bucket 0");

    let buckets = 5_000;
    let layout = SubwordLayout::new(vec!["the".into(), "where".into()], buckets).unwrap();
    let embedder = SubwordEmbedder::random(layout, 12, 801).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(802);
    let mut composed = 0;
    for _ in 0..300 {
        let len = rng.random_range(1..=10);
        let word: String = (0..len).map(|_| char::from(b'a' + rng.random_range(0..26u8))).collect();
        if embedder.direct_vector(&word).is_some() {
            continue;
        }
        // independent enumeration and hashing
        let wrapped: Vec<char> = format!("<{word}>").chars().collect();
        let mut want = vec![0.0f32; 12];
        for g in wrapped.windows(3) {
            let g: String = g.iter().collect();
            let bucket = fnv1a32_reference(g.as_bytes()) as usize % buckets;
            for (w, v) in want.iter_mut().zip(embedder.bucket_vector(bucket)) {
                *w += v;
            }
        }
        let got = embedder.compose_word_vector(&word).unwrap();
        let diff = got.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        ensure!(diff < 1e-7, "{word}: composition differs by {diff}");
        composed += 1;
    }
    for w in ["the", "where"] {
        let direct = embedder.direct_vector(w).unwrap().to_vec();
        ensure!(embedder.compose_word_vector(w).unwrap() == direct, "{w} did not bypass composition");
    }
    Ok(format!("n-grams of \"where\" exact; {composed} words equal the independent bucket sum; frequent words bypass"))
}

// ---------------------------------------------------------------------------
// 9

fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                files.insert(path.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    files
}

fn determinism() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let spec = SeparableSpec {
        documents: 500,
        ..SeparableSpec::default()
    };
    let config = common::workspace(dir.path(), &spec, "");
    let overrides = [
        "--set",
        "model.kind=conv-knrm",
        "--set",
        "model.conv_channels=32",
        "--set",
        "train.max_steps=100",
        "--set",
        "train.eval_every=25",
        "--set",
        "train.patience=0",
        "--set",
        "embeddings.dim=32",
    ];
    let mut snapshots = Vec::new();
    for _ in 0..2 {
        let out = dir.path().join("out");
        if out.exists() {
            fs::remove_dir_all(&out).unwrap();
        }
        let mut stdout = String::new();
        for cmd in [&["build-vocab"][..], &["train"], &["sweep"]] {
            let args: Vec<&str> = overrides.iter().copied().chain(cmd.iter().copied()).collect();
            stdout.push_str(&common::run_ok(&config, &args));
        }
        let best = common::field(&stdout, "sweep", "best_threshold");
        let args: Vec<&str> = overrides.iter().copied().chain(["rerank", "--threshold", &best]).collect();
        common::run_ok(&config, &args);
        let steps = common::field(&stdout, "train", "steps");
        ensure!(steps == "100", "trained {steps} steps");
        snapshots.push(snapshot(&out));
    }
    let (a, b) = (&snapshots[0], &snapshots[1]);
    ensure!(a.keys().eq(b.keys()), "different file sets: {:?} vs {:?}", a.keys(), b.keys());
    for (name, bytes) in a {
        ensure!(b[name] == *bytes, "{} differs between runs", name.display());
    }
    let has = |suffix: &str| a.keys().any(|k| k.to_string_lossy().ends_with(suffix));
    ensure!(has(".ckpt") && has("threshold_curve.tsv") && has(".run"), "artifacts missing: {:?}", a.keys());
    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(300), "took {elapsed:?}");
    Ok(format!("{} files byte-identical across two runs in {:.1}s", a.len(), elapsed.as_secs_f64()))
}

// ---------------------------------------------------------------------------
// 10

fn sweep_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1001);
    let mut lists = Vec::new();
    let mut qrels = Qrels::new();
    let mut scores = HashMap::new();
    for q in 0..50 {
        let query = Query::new(format!("q{q}"), "x");
        let n = if q % 5 == 0 { rng.random_range(0..300) } else { 300 };
        let candidates: Vec<Candidate> = (0..n)
            .map(|i| Candidate {
                doc: Document::new(format!("q{q}d{i}"), "x"),
                first_stage_score: (n - i) as f64,
            })
            .collect();
        for c in &candidates {
            // coarse scores give plenty of ties
            scores.insert((query.id.clone(), c.doc.id.clone()), f64::from(rng.random_range(0..20u8)) / 4.0);
            if rng.random_range(0..40) == 0 {
                qrels.insert(query.id.clone(), c.doc.id.clone());
            }
        }
        if q % 7 == 0 && n > 0 {
            qrels.insert(query.id.clone(), format!("q{q}d{}", n - 1));
        }
        lists.push(CandidateList { query, candidates });
    }
    let scorer = TableScorer(scores);
    let fast = sweep_threshold(&scorer, &lists, &qrels, 1..=300, 10).unwrap();
    let naive = sweep_threshold_naive(&scorer, &lists, &qrels, 1..=300, 10).unwrap();
    ensure!(fast == naive, "table scorer: curves differ");

    // a randomly initialized neural ranker on a synthetic collection
    let data = separable(&SeparableSpec::default()).unwrap();
    let vocab = build_vocabulary(data.documents.iter().cloned().map(Ok), 1).unwrap();
    let ranker = random_ranker(ModelConfig::new(ModelKind::Knrm), vocab.len(), 8, 1002).unwrap();
    let featurizer = Featurizer::Word(vocab);
    let neural = rerank_lab::evaluation::NeuralScorer {
        ranker: &ranker,
        featurizer: &featurizer,
    };
    let a = sweep_threshold(&neural, &data.candidates, &data.qrels, 1..=30, 10).unwrap();
    let b = sweep_threshold_naive(&neural, &data.candidates, &data.qrels, 1..=30, 10).unwrap();
    ensure!(a == b, "neural scorer: curves differ");
    Ok(format!(
        "300-point curves identical on 50 queries (best T {}); neural scorer curve identical",
        fast.best_threshold
    ))
}

// ---------------------------------------------------------------------------
// 11

fn frequency_buckets() -> Outcome {
    // hand-built example
    // collection frequencies: a 1, b 3, c 10, d 7, e 20
    let docs = [
        ("d1", "a b b b c c c c c"),
        ("d2", "c c c c c d d d d d"),
        ("d3", "d d e e e e e e e e"),
        ("d4", "e e e e e e e e e e e e"),
    ];
    let mut freqs = FrequencyTable::new();
    for (id, text) in docs {
        freqs.add_document(&Document::new(id, text));
    }
    let queries = [
        Query::new("q1", "a"),
        Query::new("q2", "b c"),
        Query::new("q3", "d"),
        Query::new("q4", "e"),
        Query::new("q5", "zz"),
    ];
    let rr = [1.0, 0.5, 0.0, 0.25, 1.0 / 3.0];
    let per_query: Vec<QueryMetrics> = queries
        .iter()
        .zip(rr)
        .map(|(q, rr)| QueryMetrics {
            query_id: q.id.clone(),
            reciprocal_rank: rr,
            recall: 0.0,
        })
        .collect();
    let thresholds = [0, 1, 3, 5, 10, 20, u64::MAX];
    let curve = frequency_bucket_mrr(&per_query, &queries, &freqs, &thresholds).unwrap();
    // min cf per query: q1 1, q2 3, q3 7, q4 20, q5 0
    let expected: [(f64, usize); 7] = [
        (1.0 / 3.0, 1),
        (2.0 / 3.0, 2),
        (11.0 / 18.0, 3),
        (11.0 / 18.0, 3),
        (11.0 / 24.0, 4),
        (5.0 / 12.0, 5),
        (5.0 / 12.0, 5),
    ];
    for (p, (mrr, count)) in curve.iter().zip(expected) {
        let got = p.mrr.unwrap();
        ensure!(
            p.count == count && (got - mrr).abs() < 1e-12,
            "x={}: ({got}, {}) vs ({mrr}, {count})",
            p.threshold,
            p.count
        );
    }

    // random data: saturation and monotone counts
    let mut rng = ChaCha8Rng::seed_from_u64(1101);
    for trial in 0..50 {
        let texts = random_corpus(&mut rng, 200, 60, 20);
        let docs = to_documents(&texts);
        let mut freqs = FrequencyTable::new();
        docs.iter().for_each(|d| freqs.add_document(d));
        let queries: Vec<Query> = (0..60)
            .map(|q| {
                let t: Vec<String> = (0..rng.random_range(1..=4)).map(|_| format!("t{}", rng.random_range(0..70))).collect();
                Query::new(format!("q{q}"), &t.join(" "))
            })
            .collect();
        let mut qrels = Qrels::new();
        let run: Vec<RankedList> = queries
            .iter()
            .map(|q| {
                qrels.insert(q.id.clone(), format!("d{:04}", rng.random_range(0..200)));
                let mut entries: Vec<usize> = (0..200).collect();
                entries.shuffle(&mut rng);
                RankedList {
                    query_id: q.id.clone(),
                    entries: entries[..15]
                        .iter()
                        .map(|&d| ScoredDoc {
                            doc_id: format!("d{d:04}"),
                            score: 0.0,
                        })
                        .collect(),
                }
            })
            .collect();
        let result = evaluate(&run, &qrels, 10).unwrap();
        let xs: Vec<u64> = (0..=150).chain([u64::MAX]).collect();
        let curve = frequency_bucket_mrr(&result.per_query, &queries, &freqs, &xs).unwrap();
        let last = curve.last().unwrap();
        ensure!(last.mrr == Some(result.mrr), "trial {trial}: bucket at inf {:?} vs MRR {}", last.mrr, result.mrr);
        ensure!(last.count == result.per_query.len(), "trial {trial}: count at inf");
        ensure!(curve.windows(2).all(|w| w[0].count <= w[1].count), "trial {trial}: counts decrease");
    }

    // two queries, min cf 3 and 50: only the first is in the x = 10 bucket
    let mut f = FrequencyTable::new();
    f.add_document(&Document::new("a", &["rare"; 3].join(" ")));
    f.add_document(&Document::new("b", &["common"; 50].join(" ")));
    let qs = [Query::new("q1", "rare common"), Query::new("q2", "common")];
    let pq: Vec<QueryMetrics> = ["q1", "q2"]
        .iter()
        .map(|q| QueryMetrics {
            query_id: q.to_string(),
            reciprocal_rank: 1.0,
            recall: 1.0,
        })
        .collect();
    let c = frequency_bucket_mrr(&pq, &qs, &f, &[10]).unwrap();
    ensure!(c[0].count == 1, "x = 10 bucket holds {} queries", c[0].count);
    Ok("hand-built 5-query curve matches; x = inf equals global MRR on 50 random sets; counts monotone".into())
}

// ---------------------------------------------------------------------------
// 12

fn ttest_reference() -> Outcome {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/ttest_reference.tsv");
    let text = fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    let parse = |s: &str| -> Vec<f64> { s.split(',').map(|v| v.parse().unwrap()).collect() };
    let mut cases = 0;
    let mut worst = 0.0f64;
    for line in text.lines().filter(|l| !l.starts_with('#')) {
        let f: Vec<&str> = line.split('\t').collect();
        let want: f64 = f[1].parse().unwrap();
        let (a, b) = (parse(f[2]), parse(f[3]));
        let key = |i: usize| format!("q{i:04}");
        let a: BTreeMap<String, f64> = a.into_iter().enumerate().map(|(i, v)| (key(i), v)).collect();
        let b: BTreeMap<String, f64> = b.into_iter().enumerate().map(|(i, v)| (key(i), v)).collect();
        let got = paired_ttest(&a, &b).map_err(|e| e.to_string())?;
        worst = worst.max((got - want).abs());
        ensure!((got - want).abs() < 1e-6, "case {}: p {got} vs reference {want}", f[0]);
        cases += 1;
    }
    ensure!(cases == 20, "fixture has {cases} cases");
    let same: BTreeMap<String, f64> = (0..30).map(|i| (format!("q{i}"), f64::from(i) / 30.0)).collect();
    let p = paired_ttest(&same, &same).unwrap();
    ensure!(p == 1.0, "identical inputs give p = {p}");
    Ok(format!("{cases} reference cases within {worst:.1e}; identical inputs give p = 1"))
}
