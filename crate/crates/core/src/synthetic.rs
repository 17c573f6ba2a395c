//! Seeded generators for small corpora and randomly initialized models,
//! used by tests, benchmarks and the determinism checks.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{write_candidates, Candidate, CandidateList, Document, Qrels, Query, PAD_ID};
use crate::embeddings::EncodedText;
use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::rankers::{ModelConfig, Ranker};

/// Embedding rows with entries uniform in `[-1, 1]`; row 0 is zero.
pub fn unit_embeddings(rows: usize, dim: usize, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = Tensor::from_fn(&[rows, dim], |_| rng.random_range(-1.0f32..=1.0));
    m.row_mut(PAD_ID as usize).fill(0.0);
    m
}

/// A model whose score head is random instead of zero, so that every
/// parameter receives a non-trivial gradient.
pub fn random_ranker(config: ModelConfig, rows: usize, dim: usize, seed: u64) -> Result<Ranker<f32>> {
    let mut ranker = Ranker::new(config, unit_embeddings(rows, dim, seed))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let (w, b) = ranker.head_ids();
    let params = ranker.params_mut();
    params.get_mut(w).data_mut().iter_mut().for_each(|v| *v = rng.random_range(-1.0..=1.0));
    params.get_mut(b).data_mut()[0] = rng.random_range(-1.0..=1.0);
    Ok(ranker)
}

/// `len` random non-PAD token rows below `rows`.
pub fn random_text(rng: &mut impl rand::Rng, len: usize, rows: usize) -> EncodedText {
    let ids: Vec<u32> = (0..len).map(|_| rng.random_range(1..rows as u32)).collect();
    EncodedText::from_ids(&ids)
}

/// Shape of a separable collection: every query owns a rare token that
/// appears in exactly one document, its only relevant one. Other query
/// words never occur in documents.
#[derive(Debug, Clone, PartialEq)]
pub struct SeparableSpec {
    pub queries: usize,
    pub documents: usize,
    pub doc_length: usize,
    pub query_length: usize,
    pub common_terms: usize,
    pub candidates: usize,
    pub seed: u64,
}

impl Default for SeparableSpec {
    fn default() -> Self {
        SeparableSpec {
            queries: 50,
            documents: 200,
            doc_length: 20,
            query_length: 3,
            common_terms: 40,
            candidates: 20,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub documents: Vec<Document>,
    pub doc_texts: Vec<String>,
    pub queries: Vec<Query>,
    pub query_texts: Vec<String>,
    pub qrels: Qrels,
    /// First-stage pools with the relevant document at a random rank.
    pub candidates: Vec<CandidateList>,
    /// `(query, positive, negative)` texts, one per pool negative.
    pub triples: Vec<[String; 3]>,
}

fn common_term(i: usize) -> String {
    const SYLLABLES: [&str; 8] = ["ka", "lo", "mi", "ne", "ru", "sa", "ti", "vo"];
    let mut s = String::new();
    let mut x = i + 8;
    while x > 0 {
        s.push_str(SYLLABLES[x % 8]);
        x /= 8;
    }
    s
}

pub fn separable(spec: &SeparableSpec) -> Result<SyntheticData> {
    if spec.queries == 0 || spec.documents < spec.queries || spec.candidates < 2 || spec.candidates > spec.documents {
        return Err(Error::InvalidArgument(format!("unusable synthetic spec {spec:?}")));
    }
    if spec.doc_length == 0 || spec.query_length == 0 || spec.common_terms == 0 {
        return Err(Error::InvalidArgument("synthetic texts need at least one token".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let common: Vec<String> = (0..spec.common_terms).map(common_term).collect();
    let filler = |rng: &mut ChaCha8Rng, n: usize| -> Vec<String> {
        (0..n).map(|_| common[rng.random_range(0..common.len())].clone()).collect()
    };

    // documents 0..queries are the relevant ones, in query order
    let mut doc_texts = Vec::with_capacity(spec.documents);
    for d in 0..spec.documents {
        let mut tokens = filler(&mut rng, spec.doc_length);
        if d < spec.queries {
            let at = rng.random_range(0..tokens.len());
            tokens[at] = format!("rare{d}");
        }
        doc_texts.push(tokens.join(" "));
    }
    let documents: Vec<Document> = doc_texts
        .iter()
        .enumerate()
        .map(|(d, t)| Document::new(format!("D{d}"), t))
        .collect();

    let mut query_texts = Vec::with_capacity(spec.queries);
    let mut qrels = Qrels::new();
    // query filler never occurs in documents, so the rare token is the only
    // lexical match between a query and any document
    let query_words: Vec<String> = (0..spec.common_terms).map(|i| format!("q{}", common_term(i))).collect();
    for q in 0..spec.queries {
        let mut tokens: Vec<String> = (0..spec.query_length - 1)
            .map(|_| query_words[rng.random_range(0..query_words.len())].clone())
            .collect();
        tokens.insert(rng.random_range(0..spec.query_length), format!("rare{q}"));
        query_texts.push(tokens.join(" "));
        qrels.insert(format!("Q{q}"), format!("D{q}"));
    }
    let queries: Vec<Query> = query_texts
        .iter()
        .enumerate()
        .map(|(q, t)| Query::new(format!("Q{q}"), t))
        .collect();

    let mut candidates = Vec::with_capacity(spec.queries);
    for (q, query) in queries.iter().enumerate() {
        let mut others: Vec<usize> = (0..spec.documents).filter(|&d| d != q).collect();
        others.shuffle(&mut rng);
        let mut pool: Vec<usize> = others[..spec.candidates - 1].to_vec();
        pool.insert(rng.random_range(0..spec.candidates), q);
        let n = pool.len();
        candidates.push(CandidateList {
            query: query.clone(),
            candidates: pool
                .into_iter()
                .enumerate()
                .map(|(rank, d)| Candidate {
                    doc: documents[d].clone(),
                    first_stage_score: (n - rank) as f64,
                })
                .collect(),
        });
    }

    // one triple per pool negative, interleaved across queries
    let negatives: Vec<Vec<usize>> = candidates
        .iter()
        .enumerate()
        .map(|(q, list)| {
            let mut n: Vec<usize> = list
                .candidates
                .iter()
                .map(|c| c.doc.id[1..].parse::<usize>().expect("synthetic doc id"))
                .filter(|&d| d != q)
                .collect();
            n.shuffle(&mut rng);
            n
        })
        .collect();
    let mut triples = Vec::with_capacity(spec.queries * (spec.candidates - 1));
    for round in 0..spec.candidates - 1 {
        for (q, negs) in negatives.iter().enumerate() {
            triples.push([query_texts[q].clone(), doc_texts[q].clone(), doc_texts[negs[round]].clone()]);
        }
    }

    Ok(SyntheticData {
        documents,
        doc_texts,
        queries,
        query_texts,
        qrels,
        candidates,
        triples,
    })
}

impl SyntheticData {
    /// Writes `collection.tsv`, `queries.tsv`, `qrels.txt`, `candidates.tsv`
    /// and `triples.tsv` into `dir`.
    pub fn write_files(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let write = |name: &str, body: String| {
            let path = dir.join(name);
            fs::write(&path, body).map_err(|e| Error::io(&path, e))
        };
        let mut s = String::new();
        for (d, t) in self.documents.iter().zip(&self.doc_texts) {
            let _ = writeln!(s, "{}\t{t}", d.id);
        }
        write("collection.tsv", s)?;
        let mut s = String::new();
        for (q, t) in self.queries.iter().zip(&self.query_texts) {
            let _ = writeln!(s, "{}\t{t}", q.id);
        }
        write("queries.tsv", s)?;
        let mut s = String::new();
        for q in &self.queries {
            let mut rel: Vec<&String> = self.qrels.relevant(&q.id).into_iter().flatten().collect();
            rel.sort();
            for d in rel {
                let _ = writeln!(s, "{} 0 {d} 1", q.id);
            }
        }
        write("qrels.txt", s)?;
        let mut s = String::new();
        for [q, p, n] in &self.triples {
            let _ = writeln!(s, "{q}\t{p}\t{n}");
        }
        write("triples.tsv", s)?;
        write_candidates(&dir.join("candidates.tsv"), &self.candidates)
    }
}
