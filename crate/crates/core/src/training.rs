//! Pairwise margin-loss training with Adam and validation-driven early
//! stopping.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{tokenize, CandidateList, Qrels};
use crate::embeddings::{EncodedText, Featurizer};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, rerank_all, NeuralScorer, RerankConfig, DEFAULT_CUTOFF};
use crate::nn::{margin_ranking_loss, Adam, Checkpoint, Gradients, OptimizerConfig};
use crate::rankers::{ModelInputConfig, Ranker};

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TrainingTriple {
    pub query: Vec<String>,
    pub positive: Vec<String>,
    pub negative: Vec<String>,
}

impl TrainingTriple {
    /// Tokenizes and truncates; `None` when a field is empty or the two
    /// documents are identical.
    pub fn from_texts(query: &str, positive: &str, negative: &str, input: ModelInputConfig) -> Option<Self> {
        let cut = |text: &str, n: usize| {
            let mut t = tokenize(text);
            t.truncate(n);
            t
        };
        let triple = TrainingTriple {
            query: cut(query, input.max_query_length),
            positive: cut(positive, input.max_doc_length),
            negative: cut(negative, input.max_doc_length),
        };
        let usable = !triple.query.is_empty()
            && !triple.positive.is_empty()
            && !triple.negative.is_empty()
            && triple.positive != triple.negative;
        usable.then_some(triple)
    }
}

/// Streams triples from `query<TAB>positive<TAB>negative` lines, skipping
/// and counting malformed ones.
pub struct TripleReader<R> {
    lines: std::io::Lines<R>,
    path: PathBuf,
    input: ModelInputConfig,
    skipped: usize,
}

impl<R: BufRead> TripleReader<R> {
    pub fn new(reader: R, path: impl Into<PathBuf>, input: ModelInputConfig) -> Self {
        TripleReader {
            lines: reader.lines(),
            path: path.into(),
            input,
            skipped: 0,
        }
    }

    pub fn skipped(&self) -> usize {
        self.skipped
    }
}

impl<R: BufRead> Iterator for TripleReader<R> {
    type Item = Result<TrainingTriple>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let line = match self.lines.next()? {
                Ok(l) => l,
                Err(e) => return Some(Err(Error::io(&self.path, e))),
            };
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let triple = match fields[..] {
                [q, p, n] => TrainingTriple::from_texts(q, p, n, self.input),
                _ => None,
            };
            match triple {
                Some(t) => return Some(Ok(t)),
                None => self.skipped += 1,
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LoadedTriples {
    pub triples: Vec<TrainingTriple>,
    pub skipped: usize,
}

pub fn load_triples(path: &Path, input: ModelInputConfig) -> Result<LoadedTriples> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = TripleReader::new(BufReader::new(file), path, input);
    let triples = reader.by_ref().collect::<Result<Vec<_>>>()?;
    if reader.skipped() > 0 {
        tracing::warn!(skipped = reader.skipped(), path = %path.display(), "malformed training triples skipped");
    }
    Ok(LoadedTriples {
        triples,
        skipped: reader.skipped(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub margin: f64,
    pub eval_every: u64,
    pub patience: usize,
    /// Candidates re-ranked when computing validation MRR.
    pub validation_threshold: usize,
    /// Stop after this many optimizer steps.
    pub max_steps: Option<u64>,
    /// Shuffle triples each epoch (seeded); off by default.
    pub shuffle: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            epochs: 1,
            learning_rate: 0.001,
            margin: 1.0,
            eval_every: 5000,
            patience: 2,
            validation_threshold: 300,
            max_steps: None,
            shuffle: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.eval_every == 0 || self.epochs == 0 || self.validation_threshold == 0 {
            return Err(Error::InvalidArgument(
                "batch_size, epochs, eval_every and validation_threshold must be >= 1".into(),
            ));
        }
        if !(self.margin.is_finite() && self.margin > 0.0) {
            return Err(Error::InvalidArgument("margin must be positive".into()));
        }
        self.optimizer().validate()
    }

    pub fn optimizer(&self) -> OptimizerConfig {
        OptimizerConfig::with_learning_rate(self.learning_rate)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub batch: u64,
    pub loss: f64,
    pub val_mrr: Option<f64>,
}

/// Validation queries with judgments and first-stage pools.
#[derive(Debug, Clone, Copy)]
pub struct Validation<'a> {
    pub candidates: &'a [CandidateList],
    pub qrels: &'a Qrels,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub log: Vec<LogRow>,
    pub steps: u64,
    pub best_step: u64,
    pub best_mrr: f64,
    pub best: Checkpoint,
    pub stopped_early: bool,
}

/// Validation MRR@10 of `ranker` at `threshold`.
pub fn validation_mrr(ranker: &Ranker<f32>, featurizer: &Featurizer, val: Validation<'_>, threshold: usize) -> Result<f64> {
    let scorer = NeuralScorer { ranker, featurizer };
    let run = rerank_all(&scorer, val.candidates, RerankConfig::new(threshold)?)?;
    Ok(evaluate(&run, val.qrels, DEFAULT_CUTOFF)?.mrr)
}

struct Encoded {
    query: EncodedText,
    positive: EncodedText,
    negative: EncodedText,
}

/// Mean margin loss of a batch and its gradient. Per-example gradients are
/// computed in parallel and summed in a canonical order (sorted by triple
/// content), so the result does not depend on scheduling or on the order
/// of triples inside the batch.
pub fn batch_gradients(
    ranker: &Ranker<f32>,
    featurizer: &Featurizer,
    batch: &[&TrainingTriple],
    margin: f32,
) -> Result<(f64, Gradients<f32>)> {
    let input = ranker.config().input;
    let mut order: Vec<usize> = (0..batch.len()).collect();
    order.sort_by(|&a, &b| batch[a].cmp(batch[b]));
    let examples: Vec<Encoded> = order
        .iter()
        .map(|&i| {
            let t = batch[i];
            Encoded {
                query: featurizer.encode(&t.query, input.max_query_length),
                positive: featurizer.encode(&t.positive, input.max_doc_length),
                negative: featurizer.encode(&t.negative, input.max_doc_length),
            }
        })
        .collect();
    let parts: Vec<(f32, Option<Gradients<f32>>)> = examples
        .par_iter()
        .map(|e| {
            let (s_pos, c_pos) = ranker.forward(&e.query, &e.positive)?;
            let (s_neg, c_neg) = ranker.forward(&e.query, &e.negative)?;
            let l = margin_ranking_loss(s_pos, s_neg, margin);
            if l.grad_pos == 0.0 && l.grad_neg == 0.0 {
                return Ok((l.loss, None));
            }
            let mut g = Gradients::zeros_like(ranker.params());
            ranker.backward(&c_pos, l.grad_pos, &mut g);
            ranker.backward(&c_neg, l.grad_neg, &mut g);
            Ok((l.loss, Some(g)))
        })
        .collect::<Result<_>>()?;
    let mut total = Gradients::zeros_like(ranker.params());
    let mut loss = 0.0f64;
    for (l, g) in &parts {
        loss += f64::from(*l);
        if let Some(g) = g {
            total.accumulate(g);
        }
    }
    let n = batch.len() as f64;
    total.scale((1.0 / n) as f32);
    Ok((loss / n, total))
}

/// Trains `ranker` in place and leaves it holding the best validation
/// checkpoint. Checkpoints go to `out_dir/step_N.ckpt` at each evaluation
/// and `out_dir/best.ckpt`; the log to `out_dir/train_log.tsv`.
pub fn train(
    ranker: &mut Ranker<f32>,
    featurizer: &Featurizer,
    triples: &[TrainingTriple],
    validation: Validation<'_>,
    config: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if triples.is_empty() {
        return Err(Error::Empty("training triple stream"));
    }
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut adam = Adam::new(config.optimizer(), ranker.params())?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut log = Vec::new();
    let mut best = Checkpoint::capture(ranker.params(), Some(&adam));
    let mut best_mrr = f64::NEG_INFINITY;
    let mut best_step = 0;
    let mut misses = 0;
    let mut step = 0u64;
    let mut stopped_early = false;
    let margin = config.margin as f32;
    let mut order: Vec<usize> = (0..triples.len()).collect();

    let mut evaluate_now = |ranker: &Ranker<f32>, adam: &Adam<f32>, step: u64| -> Result<(f64, bool)> {
        let mrr = validation_mrr(ranker, featurizer, validation, config.validation_threshold)?;
        let ckpt = Checkpoint::capture(ranker.params(), Some(adam));
        if let Some(dir) = out_dir {
            ckpt.save(&dir.join(format!("step_{step}.ckpt")))?;
        }
        tracing::info!(step, mrr, "validation");
        let improved = mrr > best_mrr;
        if improved {
            best_mrr = mrr;
            best_step = step;
            best = ckpt;
            misses = 0;
        } else {
            misses += 1;
        }
        Ok((mrr, misses >= config.patience && config.patience > 0))
    };

    'epochs: for _ in 0..config.epochs {
        if config.shuffle {
            order.shuffle(&mut rng);
        }
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&TrainingTriple> = chunk.iter().map(|&i| &triples[i]).collect();
            let (loss, grads) = batch_gradients(ranker, featurizer, &batch, margin)?;
            if !loss.is_finite() || !grads.is_finite() {
                return Err(Error::NonFinite(format!("training loss at batch {}", step + 1)));
            }
            adam.step(ranker.params_mut(), &grads)?;
            step += 1;
            let mut row = LogRow {
                batch: step,
                loss,
                val_mrr: None,
            };
            let last = config.max_steps.is_some_and(|m| step >= m);
            if step.is_multiple_of(config.eval_every) || last {
                let (mrr, stop) = evaluate_now(ranker, &adam, step)?;
                row.val_mrr = Some(mrr);
                log.push(row);
                if stop || last {
                    stopped_early = stop;
                    break 'epochs;
                }
            } else {
                log.push(row);
            }
        }
    }
    // final evaluation unless the last batch was just evaluated
    if log.last().is_some_and(|r| r.val_mrr.is_none()) {
        let (mrr, _) = evaluate_now(ranker, &adam, step)?;
        log.last_mut().expect("non-empty log").val_mrr = Some(mrr);
    }

    best.restore_params(ranker.params_mut())?;
    if let Some(dir) = out_dir {
        best.save(&dir.join("best.ckpt"))?;
        write_log(&dir.join("train_log.tsv"), &log)?;
    }
    Ok(TrainOutcome {
        log,
        steps: step,
        best_step,
        best_mrr,
        best,
        stopped_early,
    })
}

/// `batch<TAB>loss<TAB>val_mrr`, with `-` where no evaluation ran.
pub fn write_log(path: &Path, log: &[LogRow]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let r = (|| {
        writeln!(out, "batch\tloss\tval_mrr")?;
        for row in log {
            let mrr = row.val_mrr.map_or_else(|| "-".to_string(), |m| m.to_string());
            writeln!(out, "{}\t{}\t{mrr}", row.batch, row.loss)?;
        }
        out.flush()
    })();
    r.map_err(|e| Error::io(path, e))
}
