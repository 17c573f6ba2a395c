use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rerank_lab::corpus::{
    build_vocabulary, load_candidates, load_collection, load_qrels, load_queries, oov_query_stats, CandidateList,
    Document, Vocabulary,
};
use rerank_lab::embeddings::{memory_footprint, EmbeddingTable, Featurizer, SubwordEmbedder, SubwordLayout};
use rerank_lab::evaluation::{
    bucket_difference, evaluate, frequency_bucket_mrr, read_per_query, rerank_all, sweep_threshold,
    write_bucket_curve, write_per_query, write_significance, write_threshold_curve, NeuralScorer, RerankConfig,
};
use rerank_lab::firststage::{candidate_pool, load_run, retrieve, save_run, InvertedIndex};
use rerank_lab::nn::{Checkpoint, Tensor};
use rerank_lab::rankers::Ranker;
use rerank_lab::training::{load_triples, train, Validation};
use rerank_lab::{corpus, evaluation};

use crate::config::{EmbeddingKind, RunConfig};
use crate::error::CliError;

pub type CmdResult = Result<(), CliError>;

pub const INDEX_FILE: &str = "index.bin";
pub const VOCAB_FILE: &str = "vocab.tsv";
pub const TRAIN_DIR: &str = "train";

/// The effective configuration of one command invocation.
pub struct Context {
    pub config: RunConfig,
    pub command: &'static str,
    pub hash: u64,
}

impl Context {
    pub fn new(config: RunConfig, command: &'static str) -> Self {
        let hash = config.hash();
        Context { config, command, hash }
    }

    pub fn print_header(&self) {
        println!("# command={} seed={} config_hash={:016x}", self.command, self.config.seed, self.hash);
        for line in self.config.to_toml().lines() {
            println!("# {line}");
        }
    }

    fn out_dir(&self) -> Result<&Path, CliError> {
        let dir = &self.config.paths.output_dir;
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        Ok(dir)
    }

    fn out(&self, name: &str) -> Result<PathBuf, CliError> {
        Ok(self.out_dir()?.join(name))
    }

    /// An input produced by an earlier command in the output directory.
    fn produced(&self, name: &str) -> Result<PathBuf, CliError> {
        existing(&self.config.paths.output_dir.join(name))
    }

    /// Writes `<path>.meta` recording the config hash and seed.
    fn meta(&self, path: &Path) -> CmdResult {
        let mut name = path.as_os_str().to_owned();
        name.push(".meta");
        let body = format!(
            "config_hash={:016x}\nseed={}\ncommand={}\n",
            self.hash, self.config.seed, self.command
        );
        fs::write(&name, body).map_err(|e| CliError::io(Path::new(&name), e))
    }

    fn candidates_path(&self) -> Result<PathBuf, CliError> {
        match &self.config.paths.candidates {
            Some(p) => existing(p),
            None => self.produced("candidates.tsv"),
        }
    }

    fn featurizer(&self) -> Result<Featurizer, CliError> {
        let vocab = Vocabulary::read_tsv(&self.produced(VOCAB_FILE)?)?;
        let e = &self.config.embeddings;
        Ok(match e.kind {
            EmbeddingKind::Word => Featurizer::Word(vocab),
            EmbeddingKind::Subword => {
                Featurizer::Subword(SubwordLayout::from_vocabulary(&vocab, e.frequent_words, e.buckets)?)
            }
        })
    }

    /// A ranker holding the parameters stored in `checkpoint`.
    fn load_ranker(&self, featurizer: &Featurizer, checkpoint: Option<&Path>) -> Result<Ranker<f32>, CliError> {
        let path = match checkpoint {
            Some(p) => existing(p)?,
            None => self.produced(&format!("{TRAIN_DIR}/best.ckpt"))?,
        };
        let shape = [featurizer.rows(), self.config.embeddings.dim];
        let mut ranker = Ranker::new(self.config.model.clone(), Tensor::zeros(&shape))?;
        Checkpoint::load(&path)?.restore_params(ranker.params_mut())?;
        Ok(ranker)
    }
}

fn require<'a>(slot: &'a Option<PathBuf>, key: &str) -> Result<&'a Path, CliError> {
    let path = slot
        .as_deref()
        .ok_or_else(|| CliError::Config(format!("paths.{key} is not set")))?;
    if !path.exists() {
        return Err(CliError::MissingFile(path.to_path_buf()));
    }
    Ok(path)
}

fn existing(path: &Path) -> Result<PathBuf, CliError> {
    if path.exists() {
        Ok(path.to_path_buf())
    } else {
        Err(CliError::MissingFile(path.to_path_buf()))
    }
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "input".into())
}

/// `bm25.per_query.tsv` names the run `bm25`.
fn run_name(path: &Path) -> String {
    let s = stem(path);
    s.strip_suffix(".per_query").map(str::to_string).unwrap_or(s)
}

pub fn build_index(ctx: &Context) -> CmdResult {
    let collection = require(&ctx.config.paths.collection, "collection")?;
    let index = InvertedIndex::build(load_collection(collection)?)?;
    let path = ctx.out(INDEX_FILE)?;
    index.save(&path)?;
    ctx.meta(&path)?;
    println!(
        "index\tdocs={}\tterms={}\tavg_doc_length={}\tpath={}",
        index.doc_count(),
        index.term_count(),
        index.avg_doc_length(),
        path.display()
    );
    Ok(())
}

fn vocabulary_name(min_frequency: u64) -> String {
    if min_frequency == 1 {
        "Voc-Full".into()
    } else {
        format!("Voc-{min_frequency}")
    }
}

pub fn build_vocab(ctx: &Context) -> CmdResult {
    let paths = &ctx.config.paths;
    let collection = require(&paths.collection, "collection")?;
    let queries = match &paths.queries {
        Some(_) => Some(load_queries(require(&paths.queries, "queries")?)?),
        None => None,
    };
    let vocab = build_vocabulary(load_collection(collection)?, ctx.config.vocabulary.min_frequency)?;
    let path = ctx.out(VOCAB_FILE)?;
    vocab.write_tsv(&path)?;
    ctx.meta(&path)?;

    let terms = vocab.term_count() as u64;
    let bytes = memory_footprint(terms, ctx.config.embeddings.dim as u64);
    let oov = queries.as_deref().map(|q| oov_query_stats(q, &vocab)).transpose()?;
    let (oov_pct, oov_count) = match oov {
        Some(s) => (s.percent.to_string(), s.count.to_string()),
        None => ("-".into(), "-".into()),
    };
    let name = vocabulary_name(vocab.min_frequency());
    let mut report = String::from("name\tterms\tcovered_pct\tsize_bytes\toov_query_pct\toov_query_count\n");
    let _ = writeln!(
        report,
        "{name}\t{terms}\t{}\t{bytes}\t{oov_pct}\t{oov_count}",
        vocab.coverage_percent()
    );
    let report_path = ctx.out("vocab_report.tsv")?;
    fs::write(&report_path, &report).map_err(|e| CliError::io(&report_path, e))?;
    ctx.meta(&report_path)?;
    print!("{report}");
    Ok(())
}

pub fn retrieve_cmd(ctx: &Context, depth: Option<usize>) -> CmdResult {
    let paths = &ctx.config.paths;
    let queries = load_queries(require(&paths.queries, "queries")?)?;
    let collection = require(&paths.collection, "collection")?;
    let index = InvertedIndex::load(&ctx.produced(INDEX_FILE)?)?;
    let params = ctx.config.retrieval.params()?;
    let depth = depth.unwrap_or(ctx.config.retrieval.depth);
    let rankings = queries
        .iter()
        .map(|q| retrieve(q, &index, params, depth))
        .collect::<Result<Vec<_>, _>>()?;

    // keep only the documents some query retrieved
    let wanted: HashSet<&str> = rankings.iter().flat_map(|r| r.doc_ids()).collect();
    let mut docs: HashMap<String, Document> = HashMap::new();
    for doc in load_collection(collection)? {
        let doc = doc?;
        if wanted.contains(doc.id.as_str()) {
            docs.insert(doc.id.clone(), doc);
        }
    }
    let pools = queries
        .iter()
        .zip(&rankings)
        .map(|(q, r)| candidate_pool(q, r, &docs))
        .collect::<Result<Vec<_>, _>>()?;

    let run_path = ctx.out("bm25.run")?;
    save_run(&run_path, &rankings, "bm25")?;
    ctx.meta(&run_path)?;
    let cand_path = ctx.out("candidates.tsv")?;
    corpus::write_candidates(&cand_path, &pools)?;
    ctx.meta(&cand_path)?;
    let empty = rankings.iter().filter(|r| r.entries.is_empty()).count();
    println!(
        "retrieve\tqueries={}\tdepth={depth}\tempty={empty}\trun={}\tcandidates={}",
        queries.len(),
        run_path.display(),
        cand_path.display()
    );
    Ok(())
}

fn initial_embeddings(ctx: &Context, featurizer: &Featurizer) -> Result<Tensor<f32>, CliError> {
    let c = &ctx.config;
    let dim = c.embeddings.dim;
    let pretrained = c.paths.embeddings.as_ref().map(|_| require(&c.paths.embeddings, "embeddings")).transpose()?;
    Ok(match featurizer {
        Featurizer::Word(vocab) => match pretrained {
            Some(path) => {
                let (table, report) = EmbeddingTable::load_pretrained(path, vocab, dim, c.seed)?;
                println!(
                    "embeddings\tfound={}\tmissing={}\tduplicates={}",
                    report.found, report.missing, report.duplicates
                );
                table.into_matrix()
            }
            None => EmbeddingTable::random(vocab.len(), dim, c.seed)?.into_matrix(),
        },
        Featurizer::Subword(layout) => {
            let mut embedder = SubwordEmbedder::random(layout.clone(), dim, c.seed)?;
            if let Some(path) = pretrained {
                let report = embedder.load_frequent_vectors(path)?;
                println!("embeddings\tfound={}\tmissing={}", report.found, report.missing);
            }
            embedder.into_matrix()
        }
    })
}

pub fn train_cmd(ctx: &Context) -> CmdResult {
    let c = &ctx.config;
    let triples_path = require(&c.paths.triples, "triples")?;
    let val_candidates = match &c.paths.validation_candidates {
        Some(p) => existing(p)?,
        None => ctx.candidates_path()?,
    };
    let val_qrels = match &c.paths.validation_qrels {
        Some(p) => existing(p)?,
        None => require(&c.paths.qrels, "qrels")?.to_path_buf(),
    };
    let featurizer = ctx.featurizer()?;
    let candidates = load_candidates(&val_candidates)?;
    let qrels = load_qrels(&val_qrels)?;
    let loaded = load_triples(triples_path, c.model.input)?;
    let mut ranker = Ranker::new(c.model.clone(), initial_embeddings(ctx, &featurizer)?)?;

    let dir = ctx.out(TRAIN_DIR)?;
    let outcome = train(
        &mut ranker,
        &featurizer,
        &loaded.triples,
        Validation {
            candidates: &candidates,
            qrels: &qrels,
        },
        &c.train,
        Some(&dir),
    )?;
    for row in outcome.log.iter().filter(|r| r.val_mrr.is_some()) {
        ctx.meta(&dir.join(format!("step_{}.ckpt", row.batch)))?;
    }
    ctx.meta(&dir.join("best.ckpt"))?;
    ctx.meta(&dir.join("train_log.tsv"))?;
    println!(
        "train\tmodel={}\ttriples={}\tskipped={}\tsteps={}\tbest_step={}\tbest_val_mrr={}\tstopped_early={}",
        c.model.kind,
        loaded.triples.len(),
        loaded.skipped,
        outcome.steps,
        outcome.best_step,
        outcome.best_mrr,
        outcome.stopped_early
    );
    Ok(())
}

pub fn rerank_cmd(ctx: &Context, checkpoint: Option<&Path>, threshold: Option<usize>) -> CmdResult {
    let lists = load_candidates(&ctx.candidates_path()?)?;
    let featurizer = ctx.featurizer()?;
    let ranker = ctx.load_ranker(&featurizer, checkpoint)?;
    let t = threshold.unwrap_or(ctx.config.eval.threshold);
    let scorer = NeuralScorer {
        ranker: &ranker,
        featurizer: &featurizer,
    };
    let run = rerank_all(&scorer, &lists, RerankConfig::new(t)?)?;
    let path = ctx.out(&format!("rerank_T{t}.run"))?;
    save_run(&path, &run, &format!("{}-T{t}", ranker.kind()))?;
    ctx.meta(&path)?;
    println!("rerank\tmodel={}\tthreshold={t}\tqueries={}\trun={}", ranker.kind(), run.len(), path.display());
    Ok(())
}

pub fn evaluate_cmd(ctx: &Context, run: &Path) -> CmdResult {
    let run_path = existing(run)?;
    let qrels = load_qrels(require(&ctx.config.paths.qrels, "qrels")?)?;
    let lists = load_run(&run_path)?;
    let k = ctx.config.eval.cutoff;
    let result = evaluate(&lists, &qrels, k)?;
    let name = stem(&run_path);
    let per_query = ctx.out(&format!("{name}.per_query.tsv"))?;
    write_per_query(&per_query, &result)?;
    ctx.meta(&per_query)?;
    let report = format!(
        "metric\tvalue\nmrr@{k}\t{}\nrecall@{k}\t{}\nqueries\t{}\nexcluded\t{}\n",
        result.mrr,
        result.recall,
        result.per_query.len(),
        result.excluded
    );
    let metrics = ctx.out(&format!("{name}.metrics.tsv"))?;
    fs::write(&metrics, &report).map_err(|e| CliError::io(&metrics, e))?;
    ctx.meta(&metrics)?;
    print!("{report}");
    Ok(())
}

pub fn sweep_cmd(ctx: &Context, checkpoint: Option<&Path>) -> CmdResult {
    let e = &ctx.config.eval;
    let lists: Vec<CandidateList> = load_candidates(&ctx.candidates_path()?)?;
    let qrels = load_qrels(require(&ctx.config.paths.qrels, "qrels")?)?;
    let featurizer = ctx.featurizer()?;
    let ranker = ctx.load_ranker(&featurizer, checkpoint)?;
    let scorer = NeuralScorer {
        ranker: &ranker,
        featurizer: &featurizer,
    };
    let sweep = sweep_threshold(&scorer, &lists, &qrels, e.threshold_min..=e.threshold_max, e.cutoff)?;
    let path = ctx.out("threshold_curve.tsv")?;
    write_threshold_curve(&path, &sweep)?;
    ctx.meta(&path)?;
    println!(
        "sweep\tmodel={}\tbest_threshold={}\tbest_mrr={}\tcurve={}",
        ranker.kind(),
        sweep.best_threshold,
        sweep.best_mrr,
        path.display()
    );
    Ok(())
}

/// Bucket curves per input, plus differences of each later input against
/// the first.
pub fn analyze_frequency(ctx: &Context, inputs: &[PathBuf]) -> CmdResult {
    if inputs.is_empty() {
        return Err(CliError::Usage("analyze-frequency needs at least one per-query TSV".into()));
    }
    let inputs = inputs.iter().map(|p| existing(p)).collect::<Result<Vec<_>, _>>()?;
    let queries = load_queries(require(&ctx.config.paths.queries, "queries")?)?;
    // the vocabulary file keeps the frequencies of pruned terms too
    let vocab = Vocabulary::read_tsv(&ctx.produced(VOCAB_FILE)?)?;
    let thresholds = ctx.config.eval.frequency_thresholds();
    let mut curves = Vec::new();
    for input in &inputs {
        let per_query = read_per_query(input)?;
        let curve = frequency_bucket_mrr(&per_query, &queries, vocab.frequencies(), &thresholds)?;
        let path = ctx.out(&format!("{}.buckets.tsv", run_name(input)))?;
        write_bucket_curve(&path, &curve)?;
        ctx.meta(&path)?;
        let all = curve.last().expect("thresholds end at infinity");
        println!(
            "buckets\tinput={}\tqueries={}\tmrr_all={}\tcurve={}",
            input.display(),
            all.count,
            all.mrr.map_or_else(|| "nan".into(), |m| m.to_string()),
            path.display()
        );
        curves.push(curve);
    }
    for (input, curve) in inputs.iter().zip(&curves).skip(1) {
        let diff = bucket_difference(curve, &curves[0])?;
        let path = ctx.out(&format!("{}_minus_{}.buckets.tsv", run_name(input), run_name(&inputs[0])))?;
        write_bucket_curve(&path, &diff)?;
        ctx.meta(&path)?;
        println!("difference\tcurve={}", path.display());
    }
    Ok(())
}

pub fn compare(ctx: &Context, a: &Path, b: &Path) -> CmdResult {
    let read = |p: &Path| -> Result<BTreeMap<String, f64>, CliError> {
        let rows = read_per_query(&existing(p)?)?;
        let n = rows.len();
        let map: BTreeMap<String, f64> = rows.into_iter().map(|m| (m.query_id, m.reciprocal_rank)).collect();
        if map.len() != n {
            return Err(rerank_lab::Error::DuplicateId(format!("query in {}", p.display())).into());
        }
        Ok(map)
    };
    let (ra, rb) = (read(a)?, read(b)?);
    let p = evaluation::paired_ttest(&ra, &rb)?;
    let rows = vec![(run_name(a), run_name(b), p)];
    let path = ctx.out("significance.tsv")?;
    write_significance(&path, &rows)?;
    ctx.meta(&path)?;
    println!("compare\trunA={}\trunB={}\tp={p}", run_name(a), run_name(b));
    Ok(())
}
