//! Inverted index and BM25 first-stage retrieval.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{Candidate, CandidateList, Document, Query};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Bm25Params { k1: 0.6, b: 0.8 }
    }
}

impl Bm25Params {
    pub fn new(k1: f64, b: f64) -> Result<Self> {
        if !(k1 >= 0.0 && k1.is_finite()) || !(0.0..=1.0).contains(&b) {
            return Err(Error::InvalidArgument(format!(
                "BM25 needs k1 >= 0 and b in [0,1], got k1={k1} b={b}"
            )));
        }
        Ok(Bm25Params { k1, b })
    }
}

/// `ln(1 + (N - df + 0.5) / (df + 0.5))`, positive for every df in [1, N].
pub fn idf(doc_count: usize, df: usize) -> f64 {
    let (n, df) = (doc_count as f64, df as f64);
    (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
}

/// Contribution of one query-term occurrence to a document's score.
pub fn term_score(tf: u32, df: usize, doc_len: u32, avg_doc_len: f64, doc_count: usize, params: Bm25Params) -> f64 {
    let tf = f64::from(tf);
    let norm = params.k1 * (1.0 - params.b + params.b * f64::from(doc_len) / avg_doc_len);
    idf(doc_count, df) * tf * (params.k1 + 1.0) / (tf + norm)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Posting {
    pub doc: u32,
    pub tf: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvertedIndex {
    doc_ids: Vec<String>,
    doc_lookup: HashMap<String, u32>,
    doc_lengths: Vec<u32>,
    terms: HashMap<String, u32>,
    postings: Vec<Vec<Posting>>,
    total_length: u64,
}

impl InvertedIndex {
    pub fn build<I>(docs: I) -> Result<Self>
    where
        I: IntoIterator<Item = Result<Document>>,
    {
        let mut index = InvertedIndex {
            doc_ids: Vec::new(),
            doc_lookup: HashMap::new(),
            doc_lengths: Vec::new(),
            terms: HashMap::new(),
            postings: Vec::new(),
            total_length: 0,
        };
        for doc in docs {
            let doc = doc?;
            let number = u32::try_from(index.doc_ids.len())
                .map_err(|_| Error::InvalidArgument("too many documents".into()))?;
            if index.doc_lookup.insert(doc.id.clone(), number).is_some() {
                return Err(Error::DuplicateId(doc.id));
            }
            let mut counts: HashMap<&str, u32> = HashMap::new();
            for token in &doc.tokens {
                *counts.entry(token.as_str()).or_insert(0) += 1;
            }
            // Sorted so that new term ids are assigned deterministically.
            let mut entries: Vec<_> = counts.iter().map(|(&t, &c)| (t, c)).collect();
            entries.sort_unstable();
            for (term, tf) in entries {
                let next = index.postings.len() as u32;
                let term_id = *index.terms.entry(term.to_string()).or_insert(next);
                if term_id == next {
                    index.postings.push(Vec::new());
                }
                index.postings[term_id as usize].push(Posting { doc: number, tf });
            }
            let len = u32::try_from(doc.tokens.len())
                .map_err(|_| Error::InvalidArgument("document too long".into()))?;
            index.doc_lengths.push(len);
            index.total_length += u64::from(len);
            index.doc_ids.push(doc.id);
        }
        if index.doc_ids.is_empty() {
            return Err(Error::Empty("collection"));
        }
        Ok(index)
    }

    pub fn doc_count(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn avg_doc_length(&self) -> f64 {
        self.total_length as f64 / self.doc_count() as f64
    }

    pub fn doc_length(&self, doc_id: &str) -> Option<u32> {
        self.doc_lookup
            .get(doc_id)
            .map(|&d| self.doc_lengths[d as usize])
    }

    pub fn doc_id(&self, number: u32) -> &str {
        &self.doc_ids[number as usize]
    }

    pub fn doc_frequency(&self, term: &str) -> usize {
        self.postings(term).map_or(0, <[Posting]>::len)
    }

    /// Postings of `term`, sorted by internal document number.
    pub fn postings(&self, term: &str) -> Option<&[Posting]> {
        self.terms
            .get(term)
            .map(|&t| self.postings[t as usize].as_slice())
    }

    pub fn term_count(&self) -> usize {
        self.terms.len()
    }

    fn term_frequency(&self, term: &str, doc: u32) -> Option<(u32, usize)> {
        let postings = self.postings(term)?;
        let pos = postings.binary_search_by_key(&doc, |p| p.doc).ok()?;
        Some((postings[pos].tf, postings.len()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        bincode::serialize_into(&mut out, self)
            .map_err(|e| Error::Invariant(format!("serializing index: {e}")))?;
        out.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        bincode::deserialize_from(BufReader::new(file))
            .map_err(|e| Error::Invariant(format!("{}: corrupt index: {e}", path.display())))
    }
}

/// Okapi BM25 of `query` against an indexed document. Repeated query terms
/// contribute once per occurrence.
pub fn bm25_score(query: &Query, doc_id: &str, index: &InvertedIndex, params: Bm25Params) -> Result<f64> {
    let &doc = index
        .doc_lookup
        .get(doc_id)
        .ok_or_else(|| Error::UnknownDocument(doc_id.to_string()))?;
    let doc_len = index.doc_lengths[doc as usize];
    let avgdl = index.avg_doc_length();
    let mut score = 0.0;
    for term in &query.tokens {
        if let Some((tf, df)) = index.term_frequency(term, doc) {
            score += term_score(tf, df, doc_len, avgdl, index.doc_count(), params);
        }
    }
    Ok(score)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredDoc {
    pub doc_id: String,
    pub score: f64,
}

/// A query's documents in rank order.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedList {
    pub query_id: String,
    pub entries: Vec<ScoredDoc>,
}

impl RankedList {
    pub fn doc_ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.doc_id.as_str())
    }
}

/// Top-`k` documents by BM25, ties broken by ascending doc id. Only
/// documents sharing at least one term with the query are returned.
pub fn retrieve(query: &Query, index: &InvertedIndex, params: Bm25Params, k: usize) -> Result<RankedList> {
    if k == 0 {
        return Err(Error::InvalidArgument("retrieval depth K must be >= 1".into()));
    }
    let avgdl = index.avg_doc_length();
    let n = index.doc_count();
    let mut acc: HashMap<u32, f64> = HashMap::new();
    let mut touched: Vec<u32> = Vec::new();
    // Term-at-a-time in query order: each document sees its additions in the
    // same order as `bm25_score`, so the two agree bit for bit.
    for term in &query.tokens {
        let Some(postings) = index.postings(term) else {
            continue;
        };
        let df = postings.len();
        for p in postings {
            let contribution = term_score(p.tf, df, index.doc_lengths[p.doc as usize], avgdl, n, params);
            let slot = acc.entry(p.doc).or_insert_with(|| {
                touched.push(p.doc);
                0.0
            });
            *slot += contribution;
        }
    }
    let mut scored: Vec<(u32, f64)> = touched
        .into_iter()
        .map(|d| (d, acc[&d]))
        .filter(|&(_, s)| s > 0.0)
        .collect();
    let order = |a: &(u32, f64), b: &(u32, f64)| {
        b.1.total_cmp(&a.1)
            .then_with(|| index.doc_id(a.0).cmp(index.doc_id(b.0)))
    };
    if scored.len() > k {
        scored.select_nth_unstable_by(k - 1, order);
        scored.truncate(k);
    }
    scored.sort_unstable_by(order);
    Ok(RankedList {
        query_id: query.id.clone(),
        entries: scored
            .into_iter()
            .map(|(d, score)| ScoredDoc {
                doc_id: index.doc_id(d).to_string(),
                score,
            })
            .collect(),
    })
}

/// Materializes a BM25 ranking into a candidate pool using the documents'
/// token sequences.
pub fn candidate_pool(query: &Query, ranking: &RankedList, docs: &HashMap<String, Document>) -> Result<CandidateList> {
    let candidates = ranking
        .entries
        .iter()
        .map(|e| {
            docs.get(&e.doc_id)
                .map(|doc| Candidate {
                    doc: doc.clone(),
                    first_stage_score: e.score,
                })
                .ok_or_else(|| Error::UnknownDocument(e.doc_id.clone()))
        })
        .collect::<Result<_>>()?;
    Ok(CandidateList {
        query: query.clone(),
        candidates,
    })
}

impl CandidateList {
    /// The first-stage ordering of this pool as a ranked list.
    pub fn first_stage_ranking(&self) -> RankedList {
        RankedList {
            query_id: self.query.id.clone(),
            entries: self
                .candidates
                .iter()
                .map(|c| ScoredDoc {
                    doc_id: c.doc.id.clone(),
                    score: c.first_stage_score,
                })
                .collect(),
        }
    }
}

// ---------------------------------------------------------------------------
// TREC run files

/// Writes `query_id Q0 doc_id rank score run_tag` lines, rank from 1.
pub fn write_run<W: Write>(out: &mut W, lists: &[RankedList], run_tag: &str) -> std::io::Result<()> {
    for list in lists {
        for (rank, e) in list.entries.iter().enumerate() {
            writeln!(out, "{} Q0 {} {} {} {}", list.query_id, e.doc_id, rank + 1, e.score, run_tag)?;
        }
    }
    Ok(())
}

pub fn save_run(path: &Path, lists: &[RankedList], run_tag: &str) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    write_run(&mut out, lists, run_tag).map_err(|e| Error::io(path, e))?;
    out.flush().map_err(|e| Error::io(path, e))
}

/// Reads a TREC run. Entries are ordered by the rank column; queries keep
/// their order of first appearance.
pub fn parse_run<R: BufRead>(reader: R, path: &Path) -> Result<Vec<RankedList>> {
    let mut lists: Vec<(RankedList, Vec<u64>)> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        let [query_id, _, doc_id, rank, score, _tag] = fields[..] else {
            return Err(Error::parse(path, idx + 1, "expected 6 TREC run columns"));
        };
        let rank: u64 = rank
            .parse()
            .map_err(|_| Error::parse(path, idx + 1, "bad rank"))?;
        let score: f64 = score
            .parse()
            .map_err(|_| Error::parse(path, idx + 1, "bad score"))?;
        let slot = *index.entry(query_id.to_string()).or_insert_with(|| {
            lists.push((
                RankedList {
                    query_id: query_id.to_string(),
                    entries: Vec::new(),
                },
                Vec::new(),
            ));
            lists.len() - 1
        });
        let (list, ranks) = &mut lists[slot];
        if list.entries.iter().any(|e| e.doc_id == doc_id) {
            return Err(Error::DuplicateId(format!("{query_id}/{doc_id}")));
        }
        list.entries.push(ScoredDoc {
            doc_id: doc_id.to_string(),
            score,
        });
        ranks.push(rank);
    }
    Ok(lists
        .into_iter()
        .map(|(mut list, ranks)| {
            let mut order: Vec<usize> = (0..ranks.len()).collect();
            order.sort_by_key(|&i| ranks[i]);
            list.entries = order.into_iter().map(|i| list.entries[i].clone()).collect();
            list
        })
        .collect())
}

pub fn load_run(path: &Path) -> Result<Vec<RankedList>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_run(BufReader::new(file), path)
}
