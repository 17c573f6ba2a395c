//! Collection ingestion: tokenization, TSV/qrels/candidate readers and
//! frequency-thresholded vocabularies.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Reserved id of the padding token. Its embedding row is always zero.
pub const PAD_ID: u32 = 0;
/// Reserved id shared by every out-of-vocabulary term.
pub const OOV_ID: u32 = 1;

const PAD_TERM: &str = "<pad>";
const OOV_TERM: &str = "<oov>";

/// Splits `text` into maximal runs of Unicode letters and digits, lowercased.
///
/// Every other character is a separator, so the output never contains
/// whitespace or punctuation.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    for lower in text.chars().flat_map(char::to_lowercase) {
        if lower.is_alphanumeric() {
            current.push(lower);
        } else if !current.is_empty() {
            tokens.push(std::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Document {
    pub id: String,
    pub tokens: Vec<String>,
}

impl Document {
    pub fn new(id: impl Into<String>, text: &str) -> Self {
        Document {
            id: id.into(),
            tokens: tokenize(text),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Query {
    pub id: String,
    pub tokens: Vec<String>,
}

impl Query {
    pub fn new(id: impl Into<String>, text: &str) -> Self {
        Query {
            id: id.into(),
            tokens: tokenize(text),
        }
    }

    /// A query with no tokens left after normalization.
    pub fn is_degenerate(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Binary relevance judgments: query id to the set of relevant doc ids.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Qrels {
    relevant: HashMap<String, HashSet<String>>,
}

impl Qrels {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, query_id: impl Into<String>, doc_id: impl Into<String>) {
        self.relevant
            .entry(query_id.into())
            .or_default()
            .insert(doc_id.into());
    }

    pub fn relevant(&self, query_id: &str) -> Option<&HashSet<String>> {
        self.relevant.get(query_id)
    }

    pub fn is_relevant(&self, query_id: &str, doc_id: &str) -> bool {
        self.relevant
            .get(query_id)
            .is_some_and(|docs| docs.contains(doc_id))
    }

    pub fn num_queries(&self) -> usize {
        self.relevant.len()
    }

    pub fn query_ids(&self) -> impl Iterator<Item = &str> {
        self.relevant.keys().map(String::as_str)
    }
}

/// One first-stage candidate of a query, in first-stage rank order.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub doc: Document,
    pub first_stage_score: f64,
}

/// The candidate pool of a single query, ordered by first-stage rank.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateList {
    pub query: Query,
    pub candidates: Vec<Candidate>,
}

// ---------------------------------------------------------------------------
// Frequency counting and vocabularies

/// Collection frequencies: total occurrences of each term over all documents.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FrequencyTable {
    counts: HashMap<String, u64>,
    total_tokens: u64,
}

impl FrequencyTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_document(&mut self, doc: &Document) {
        for token in &doc.tokens {
            *self.counts.entry(token.clone()).or_insert(0) += 1;
        }
        self.total_tokens += doc.tokens.len() as u64;
    }

    /// Counts a slice of documents on the rayon pool. Shards are merged by
    /// addition, so the result does not depend on how the work was split.
    pub fn from_documents_par(docs: &[Document]) -> Self {
        docs.par_iter()
            .fold(FrequencyTable::new, |mut table, doc| {
                table.add_document(doc);
                table
            })
            .reduce(FrequencyTable::new, FrequencyTable::merged)
    }

    pub fn merge(&mut self, other: FrequencyTable) {
        for (term, count) in other.counts {
            *self.counts.entry(term).or_insert(0) += count;
        }
        self.total_tokens += other.total_tokens;
    }

    fn merged(mut self, other: FrequencyTable) -> Self {
        self.merge(other);
        self
    }

    pub fn get(&self, term: &str) -> u64 {
        self.counts.get(term).copied().unwrap_or(0)
    }

    pub fn distinct_terms(&self) -> usize {
        self.counts.len()
    }

    pub fn total_tokens(&self) -> u64 {
        self.total_tokens
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, u64)> {
        self.counts.iter().map(|(t, &c)| (t.as_str(), c))
    }

    /// Terms sorted by descending frequency, ties by ascending term.
    pub fn ranked(&self) -> Vec<(&str, u64)> {
        let mut ranked: Vec<_> = self.iter().collect();
        ranked.sort_unstable_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        ranked
    }
}

/// Frequency-thresholded term/id map (Voc-n).
///
/// Ids are dense: 0 is PAD, 1 is OOV, then retained terms ordered by
/// descending collection frequency with ties broken by term. The full
/// frequency table is kept, including pruned terms.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    terms: Vec<String>,
    ids: HashMap<String, u32>,
    frequencies: FrequencyTable,
    min_frequency: u64,
}

impl Vocabulary {
    pub fn from_frequencies(frequencies: FrequencyTable, min_frequency: u64) -> Result<Self> {
        if min_frequency == 0 {
            return Err(Error::InvalidArgument("min_frequency must be >= 1".into()));
        }
        if frequencies.distinct_terms() == 0 {
            return Err(Error::Empty("collection has no tokens"));
        }
        let mut terms = vec![PAD_TERM.to_string(), OOV_TERM.to_string()];
        terms.extend(
            frequencies
                .ranked()
                .into_iter()
                .take_while(|&(_, cf)| cf >= min_frequency)
                .map(|(t, _)| t.to_string()),
        );
        let ids = terms
            .iter()
            .enumerate()
            .skip(2)
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Ok(Vocabulary {
            terms,
            ids,
            frequencies,
            min_frequency,
        })
    }

    pub fn min_frequency(&self) -> u64 {
        self.min_frequency
    }

    /// Rows of an embedding table for this vocabulary, reserved ids included.
    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.term_count() == 0
    }

    /// Number of retained collection terms (PAD and OOV excluded).
    pub fn term_count(&self) -> usize {
        self.terms.len() - 2
    }

    /// Percentage of the collection's distinct terms retained.
    pub fn coverage_percent(&self) -> f64 {
        self.term_count() as f64 / self.frequencies.distinct_terms() as f64 * 100.0
    }

    pub fn id(&self, term: &str) -> Option<u32> {
        self.ids.get(term).copied()
    }

    pub fn id_or_oov(&self, term: &str) -> u32 {
        self.id(term).unwrap_or(OOV_ID)
    }

    pub fn contains(&self, term: &str) -> bool {
        self.ids.contains_key(term)
    }

    pub fn term(&self, id: u32) -> Option<&str> {
        self.terms.get(id as usize).map(String::as_str)
    }

    /// Retained terms in id order, reserved entries skipped.
    pub fn terms(&self) -> impl Iterator<Item = (u32, &str)> {
        self.terms
            .iter()
            .enumerate()
            .skip(2)
            .map(|(i, t)| (i as u32, t.as_str()))
    }

    /// Collection frequency of any term, pruned or not; 0 if never seen.
    pub fn collection_frequency(&self, term: &str) -> u64 {
        self.frequencies.get(term)
    }

    pub fn frequencies(&self) -> &FrequencyTable {
        &self.frequencies
    }

    /// Writes `term<TAB>id<TAB>cf` rows sorted by id, followed by the pruned
    /// terms with `-` in place of an id.
    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        self.write_to(&mut out).map_err(|e| Error::io(path, e))?;
        out.flush().map_err(|e| Error::io(path, e))
    }

    fn write_to(&self, out: &mut impl Write) -> std::io::Result<()> {
        writeln!(out, "# min_frequency={}", self.min_frequency)?;
        for (id, term) in self.terms.iter().enumerate() {
            writeln!(out, "{term}\t{id}\t{}", self.frequencies.get(term))?;
        }
        for (term, cf) in self.frequencies.ranked() {
            if !self.ids.contains_key(term) {
                writeln!(out, "{term}\t-\t{cf}")?;
            }
        }
        Ok(())
    }

    pub fn read_tsv(path: &Path) -> Result<Self> {
        let reader = open(path)?;
        let mut min_frequency = None;
        let mut frequencies = FrequencyTable::new();
        let mut in_vocab = Vec::new();
        for (idx, line) in reader.lines().enumerate() {
            let line_no = idx + 1;
            let line = line.map_err(|e| Error::io(path, e))?;
            if let Some(comment) = line.strip_prefix('#') {
                if let Some(v) = comment.trim().strip_prefix("min_frequency=") {
                    min_frequency = Some(v.parse::<u64>().map_err(|_| {
                        Error::parse(path, line_no, "bad min_frequency header")
                    })?);
                }
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let [term, id, cf] = fields[..] else {
                return Err(Error::parse(path, line_no, "expected term<TAB>id<TAB>cf"));
            };
            let cf: u64 = cf
                .parse()
                .map_err(|_| Error::parse(path, line_no, "bad collection frequency"))?;
            if id != "-" {
                let id: usize = id
                    .parse()
                    .map_err(|_| Error::parse(path, line_no, "bad id"))?;
                if id != in_vocab.len() {
                    return Err(Error::parse(path, line_no, "ids must be dense and sorted"));
                }
                in_vocab.push(term.to_string());
            }
            if (id == "-" || in_vocab.len() > 2) && cf > 0 {
                frequencies.counts.insert(term.to_string(), cf);
                frequencies.total_tokens += cf;
            }
        }
        let min_frequency = min_frequency
            .ok_or_else(|| Error::parse(path, 1, "missing min_frequency header"))?;
        if in_vocab.len() < 2 || in_vocab[0] != PAD_TERM || in_vocab[1] != OOV_TERM {
            return Err(Error::parse(path, 1, "missing reserved PAD/OOV rows"));
        }
        let vocab = Vocabulary::from_frequencies(frequencies, min_frequency)?;
        if vocab.terms != in_vocab {
            return Err(Error::Invariant(format!(
                "{}: stored ids disagree with the frequency table",
                path.display()
            )));
        }
        Ok(vocab)
    }
}

/// Builds Voc-n from a document stream.
pub fn build_vocabulary<I>(docs: I, min_frequency: u64) -> Result<Vocabulary>
where
    I: IntoIterator<Item = Result<Document>>,
{
    let mut table = FrequencyTable::new();
    let mut any = false;
    for doc in docs {
        table.add_document(&doc?);
        any = true;
    }
    if !any {
        return Err(Error::Empty("collection"));
    }
    Vocabulary::from_frequencies(table, min_frequency)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OovStats {
    pub percent: f64,
    pub count: usize,
    pub total: usize,
}

/// Share of queries with at least one token missing from `vocab`.
pub fn oov_query_stats(queries: &[Query], vocab: &Vocabulary) -> Result<OovStats> {
    if queries.is_empty() {
        return Err(Error::Empty("query set"));
    }
    let count = queries
        .iter()
        .filter(|q| q.tokens.iter().any(|t| !vocab.contains(t)))
        .count();
    Ok(OovStats {
        percent: count as f64 / queries.len() as f64 * 100.0,
        count,
        total: queries.len(),
    })
}

// ---------------------------------------------------------------------------
// Readers

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::io(path, e))
}

fn split_id_text<'a>(line: &'a str, path: &Path, line_no: usize) -> Result<(&'a str, &'a str)> {
    let (id, text) = line
        .split_once('\t')
        .ok_or_else(|| Error::parse(path, line_no, "expected id<TAB>text"))?;
    if id.is_empty() {
        return Err(Error::parse(path, line_no, "empty id"));
    }
    Ok((id, text))
}

/// Streams `id<TAB>text` records, rejecting duplicate ids.
pub struct TsvRecords<R> {
    lines: std::io::Lines<R>,
    path: PathBuf,
    line_no: usize,
    seen: HashSet<String>,
}

impl<R: BufRead> TsvRecords<R> {
    pub fn new(reader: R, path: impl Into<PathBuf>) -> Self {
        TsvRecords {
            lines: reader.lines(),
            path: path.into(),
            line_no: 0,
            seen: HashSet::new(),
        }
    }

    fn next_record(&mut self) -> Option<Result<(String, String)>> {
        loop {
            let line = match self.lines.next()? {
                Ok(line) => line,
                Err(e) => return Some(Err(Error::io(&self.path, e))),
            };
            self.line_no += 1;
            if line.trim().is_empty() {
                continue;
            }
            let (id, text) = match split_id_text(&line, &self.path, self.line_no) {
                Ok(parts) => parts,
                Err(e) => return Some(Err(e)),
            };
            if !self.seen.insert(id.to_string()) {
                return Some(Err(Error::DuplicateId(id.to_string())));
            }
            return Some(Ok((id.to_string(), text.to_string())));
        }
    }
}

/// Iterator over a `doc_id<TAB>text` collection file.
pub struct CollectionReader<R>(TsvRecords<R>);

impl<R: BufRead> CollectionReader<R> {
    pub fn new(reader: R, path: impl Into<PathBuf>) -> Self {
        CollectionReader(TsvRecords::new(reader, path))
    }
}

impl<R: BufRead> Iterator for CollectionReader<R> {
    type Item = Result<Document>;

    fn next(&mut self) -> Option<Self::Item> {
        Some(self.0.next_record()?.map(|(id, text)| Document::new(id, &text)))
    }
}

pub fn load_collection(path: &Path) -> Result<CollectionReader<BufReader<File>>> {
    Ok(CollectionReader::new(open(path)?, path))
}

pub fn load_queries(path: &Path) -> Result<Vec<Query>> {
    TsvRecords::new(open(path)?, path)
        .map_iter(|(id, text)| Query::new(id, &text))
        .collect()
}

impl<R: BufRead> TsvRecords<R> {
    fn map_iter<T>(mut self, f: impl Fn((String, String)) -> T) -> impl Iterator<Item = Result<T>> {
        std::iter::from_fn(move || self.next_record().map(|r| r.map(&f)))
    }
}

/// Parses TREC qrels (`query_id 0 doc_id grade`); grades below 1 are dropped.
pub fn parse_qrels<R: BufRead>(reader: R, path: &Path) -> Result<Qrels> {
    let mut qrels = Qrels::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        let [query_id, _, doc_id, grade] = fields[..] else {
            return Err(Error::parse(path, idx + 1, "expected `query_id 0 doc_id grade`"));
        };
        let grade: i64 = grade
            .parse()
            .map_err(|_| Error::parse(path, idx + 1, "relevance grade is not an integer"))?;
        if grade >= 1 {
            qrels.insert(query_id, doc_id);
        }
    }
    Ok(qrels)
}

pub fn load_qrels(path: &Path) -> Result<Qrels> {
    parse_qrels(open(path)?, path)
}

/// Streams per-query candidate pools from a
/// `query_id<TAB>doc_id<TAB>query_text<TAB>doc_text` file grouped by query.
///
/// Lists keep file order. Files carry no first-stage scores, so candidates
/// get `-(rank)` as a stand-in score.
pub struct CandidateGroups<R> {
    lines: std::io::Lines<R>,
    path: PathBuf,
    line_no: usize,
    pending: Option<CandidateList>,
    finished: HashSet<String>,
    seen_docs: HashSet<String>,
}

impl<R: BufRead> CandidateGroups<R> {
    pub fn new(reader: R, path: impl Into<PathBuf>) -> Self {
        CandidateGroups {
            lines: reader.lines(),
            path: path.into(),
            line_no: 0,
            pending: None,
            finished: HashSet::new(),
            seen_docs: HashSet::new(),
        }
    }

    fn push_line(&mut self, line: &str) -> Result<Option<CandidateList>> {
        let fields: Vec<&str> = line.splitn(4, '\t').collect();
        let [query_id, doc_id, query_text, doc_text] = fields[..] else {
            return Err(Error::parse(
                &self.path,
                self.line_no,
                "expected query_id<TAB>doc_id<TAB>query_text<TAB>doc_text",
            ));
        };
        if query_id.is_empty() || doc_id.is_empty() {
            return Err(Error::parse(&self.path, self.line_no, "empty id"));
        }
        let mut completed = None;
        if self.pending.as_ref().is_some_and(|p| p.query.id != query_id) {
            let done = self.pending.take().expect("checked above");
            self.finished.insert(done.query.id.clone());
            self.seen_docs.clear();
            completed = Some(done);
        }
        if self.finished.contains(query_id) {
            return Err(Error::parse(
                &self.path,
                self.line_no,
                format!("query `{query_id}` is not contiguous"),
            ));
        }
        let list = self.pending.get_or_insert_with(|| CandidateList {
            query: Query::new(query_id, query_text),
            candidates: Vec::new(),
        });
        if !self.seen_docs.insert(doc_id.to_string()) {
            return Err(Error::DuplicateId(format!("{query_id}/{doc_id}")));
        }
        let rank = list.candidates.len() + 1;
        list.candidates.push(Candidate {
            doc: Document::new(doc_id, doc_text),
            first_stage_score: -(rank as f64),
        });
        Ok(completed)
    }
}

impl<R: BufRead> Iterator for CandidateGroups<R> {
    type Item = Result<CandidateList>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            match self.lines.next() {
                None => return self.pending.take().map(Ok),
                Some(Err(e)) => return Some(Err(Error::io(&self.path, e))),
                Some(Ok(line)) => {
                    self.line_no += 1;
                    if line.trim().is_empty() {
                        continue;
                    }
                    match self.push_line(&line) {
                        Ok(Some(done)) => return Some(Ok(done)),
                        Ok(None) => {}
                        Err(e) => return Some(Err(e)),
                    }
                }
            }
        }
    }
}

pub fn load_candidates(path: &Path) -> Result<Vec<CandidateList>> {
    CandidateGroups::new(open(path)?, path).collect()
}

/// Writes candidate pools in the four-column candidates format. Token
/// sequences are joined by single spaces, which re-tokenize to themselves.
pub fn write_candidates(path: &Path, lists: &[CandidateList]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for list in lists {
        let query_text = list.query.tokens.join(" ");
        for c in &list.candidates {
            writeln!(
                out,
                "{}\t{}\t{}\t{}",
                list.query.id,
                c.doc.id,
                query_text,
                c.doc.tokens.join(" ")
            )
            .map_err(|e| Error::io(path, e))?;
        }
    }
    out.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Cursor;

    fn docs(specs: &[(&str, &str)]) -> Vec<Result<Document>> {
        specs.iter().map(|(id, t)| Ok(Document::new(*id, t))).collect()
    }

    #[test]
    fn tokenize_examples() {
        assert_eq!(tokenize("The cat, sat!"), ["the", "cat", "sat"]);
        assert!(tokenize("").is_empty());
        assert_eq!(tokenize("Wi-Fi 802.11n"), ["wi", "fi", "802", "11n"]);
        assert_eq!(tokenize("  Ünïcode—ÆON\t\n x"), ["ünïcode", "æon", "x"]);
    }

    #[test]
    fn vocabulary_hand_count() {
        let vocab = build_vocabulary(docs(&[("d1", "a a b"), ("d2", "a c")]), 2).unwrap();
        assert_eq!(vocab.term_count(), 1);
        assert_eq!(vocab.id("a"), Some(2));
        assert_eq!(vocab.id_or_oov("b"), OOV_ID);
        assert_eq!(vocab.collection_frequency("a"), 3);
        assert_eq!(vocab.collection_frequency("b"), 1);
        assert_eq!(vocab.collection_frequency("c"), 1);
        assert_eq!(vocab.collection_frequency("zzz"), 0);
        assert_eq!(vocab.len(), 3);
    }

    #[test]
    fn vocabulary_full_keeps_everything() {
        let vocab = build_vocabulary(docs(&[("d1", "a a b"), ("d2", "a c")]), 1).unwrap();
        assert_eq!(vocab.term_count(), 3);
        assert_eq!(vocab.coverage_percent(), 100.0);
        // frequency-descending ids, ties by term
        assert_eq!(vocab.term(2), Some("a"));
        assert_eq!(vocab.term(3), Some("b"));
        assert_eq!(vocab.term(4), Some("c"));
    }

    #[test]
    fn vocabulary_errors() {
        assert!(matches!(
            build_vocabulary(Vec::new(), 1),
            Err(Error::Empty(_))
        ));
        assert!(build_vocabulary(docs(&[("d1", "a")]), 0).is_err());
    }

    #[test]
    fn vocabulary_tsv_round_trip() {
        let vocab =
            build_vocabulary(docs(&[("d1", "a a b x"), ("d2", "a c b"), ("d3", "q")]), 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.tsv");
        vocab.write_tsv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("# min_frequency=2\n<pad>\t0\t0\n<oov>\t1\t0\na\t2\t3\nb\t3\t2\n"));
        assert!(text.contains("c\t-\t1\n"));
        let back = Vocabulary::read_tsv(&path).unwrap();
        assert_eq!(back, vocab);
    }

    #[test]
    fn oov_stats_small() {
        let vocab = build_vocabulary(docs(&[("d", "a b")]), 1).unwrap();
        let queries = vec![Query::new("q1", "a b"), Query::new("q2", "c")];
        let stats = oov_query_stats(&queries, &vocab).unwrap();
        assert_eq!((stats.percent, stats.count), (50.0, 1));
        assert!(oov_query_stats(&[], &vocab).is_err());
    }

    #[test]
    fn collection_reader_maps_fields() {
        let data = "123\tHello world\n\n7\tx\n";
        let docs: Vec<_> = CollectionReader::new(Cursor::new(data), "c.tsv")
            .collect::<Result<_>>()
            .unwrap();
        assert_eq!(docs[0], Document { id: "123".into(), tokens: vec!["hello".into(), "world".into()] });
        assert_eq!(docs.len(), 2);
    }

    #[test]
    fn collection_reader_errors() {
        let dup: Vec<_> = CollectionReader::new(Cursor::new("1\ta\n1\tb\n"), "c.tsv").collect();
        assert!(matches!(dup[1], Err(Error::DuplicateId(_))));

        let bad: Vec<_> = CollectionReader::new(Cursor::new("1\ta\nno tab here\n"), "c.tsv").collect();
        match &bad[1] {
            Err(Error::Parse { line, .. }) => assert_eq!(*line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn qrels_lines() {
        let qrels = parse_qrels(Cursor::new("q1 0 d7 1\nq1 0 d8 0\nq2\t0\td1\t2\n"), Path::new("q")).unwrap();
        assert!(qrels.is_relevant("q1", "d7"));
        assert!(!qrels.is_relevant("q1", "d8"));
        assert!(qrels.is_relevant("q2", "d1"));
        let err = parse_qrels(Cursor::new("q1 0 d7\n"), Path::new("q")).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }

    #[test]
    fn candidate_groups_keep_order() {
        let data = "q1\td7\twhat is x\tsome passage text\nq1\td2\twhat is x\tother\nq2\td7\tY\tsome passage text\n";
        let lists: Vec<_> = CandidateGroups::new(Cursor::new(data), "c")
            .collect::<Result<_>>()
            .unwrap();
        assert_eq!(lists.len(), 2);
        assert_eq!(lists[0].query.tokens, ["what", "is", "x"]);
        let ids: Vec<_> = lists[0].candidates.iter().map(|c| c.doc.id.as_str()).collect();
        assert_eq!(ids, ["d7", "d2"]);
        assert_eq!(lists[1].candidates[0].doc.tokens, ["some", "passage", "text"]);
    }

    #[test]
    fn candidate_groups_reject_split_queries() {
        let data = "q1\td1\tx\ty\nq2\td1\tx\ty\nq1\td2\tx\ty\n";
        let res: Result<Vec<_>> = CandidateGroups::new(Cursor::new(data), "c").collect();
        assert!(matches!(res, Err(Error::Parse { line: 3, .. })));
    }

    #[test]
    fn candidate_file_round_trip() {
        let data = "q1\td7\twhat is x\tsome passage text\nq1\td2\twhat is x\tother\n";
        let lists: Vec<_> = CandidateGroups::new(Cursor::new(data), "c")
            .collect::<Result<_>>()
            .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cand.tsv");
        write_candidates(&path, &lists).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), data);
        assert_eq!(load_candidates(&path).unwrap(), lists);
    }

    fn corpus_strategy() -> impl Strategy<Value = Vec<Vec<u8>>> {
        prop::collection::vec(prop::collection::vec(0u8..12, 0..15), 1..20)
    }

    fn to_docs(raw: &[Vec<u8>]) -> Vec<Document> {
        raw.iter()
            .enumerate()
            .map(|(i, toks)| Document {
                id: format!("d{i}"),
                tokens: toks.iter().map(|t| format!("t{t}")).collect(),
            })
            .collect()
    }

    proptest! {
        #[test]
        fn tokenize_is_idempotent(text in "\\PC{0,60}") {
            let once = tokenize(&text);
            let twice = tokenize(&once.join(" "));
            prop_assert_eq!(&once, &twice);
            for t in &once {
                prop_assert!(!t.chars().any(char::is_whitespace));
            }
        }

        #[test]
        fn pruning_is_monotone(raw in corpus_strategy(), n1 in 1u64..5, extra in 0u64..5) {
            let docs = to_docs(&raw);
            prop_assume!(docs.iter().any(|d| !d.tokens.is_empty()));
            let n2 = n1 + extra;
            let v1 = build_vocabulary(docs.iter().cloned().map(Ok), n1).unwrap();
            let v2 = build_vocabulary(docs.iter().cloned().map(Ok), n2).unwrap();
            prop_assert!(v2.term_count() <= v1.term_count());
            for (_, t) in v2.terms() {
                prop_assert!(v1.contains(t));
                prop_assert!(v2.collection_frequency(t) >= n2);
            }
            let total: u64 = v1.frequencies().iter().map(|(_, c)| c).sum();
            prop_assert_eq!(total, docs.iter().map(|d| d.tokens.len() as u64).sum::<u64>());

            let queries: Vec<Query> = docs.iter().map(|d| Query { id: d.id.clone(), tokens: d.tokens.clone() }).collect();
            let s1 = oov_query_stats(&queries, &v1).unwrap();
            let s2 = oov_query_stats(&queries, &v2).unwrap();
            prop_assert!(s1.count <= s2.count);
        }

        #[test]
        fn sharded_counting_matches_sequential(raw in corpus_strategy()) {
            let docs = to_docs(&raw);
            let mut seq = FrequencyTable::new();
            docs.iter().for_each(|d| seq.add_document(d));
            prop_assert_eq!(FrequencyTable::from_documents_par(&docs), seq);
        }
    }
}
