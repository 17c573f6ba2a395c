//! Run configuration: a TOML file plus `--set key=value` overrides.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use rerank_lab::embeddings::{DEFAULT_BUCKETS, DEFAULT_FREQUENT_WORDS};
use rerank_lab::evaluation::{DEFAULT_CUTOFF, MAX_THRESHOLD};
use rerank_lab::firststage::Bm25Params;
use rerank_lab::rankers::ModelConfig;
use rerank_lab::training::TrainConfig;

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds every generator; copied into the model and train sections.
    pub seed: u64,
    pub paths: Paths,
    pub vocabulary: VocabularyConfig,
    pub embeddings: EmbeddingConfig,
    pub retrieval: RetrievalConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            paths: Paths::default(),
            vocabulary: VocabularyConfig::default(),
            embeddings: EmbeddingConfig::default(),
            retrieval: RetrievalConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// Input files. Relative paths are resolved against the config file's
/// directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub collection: Option<PathBuf>,
    pub queries: Option<PathBuf>,
    pub qrels: Option<PathBuf>,
    pub candidates: Option<PathBuf>,
    pub triples: Option<PathBuf>,
    /// Pretrained vectors in `term v1 .. vdim` text format.
    pub embeddings: Option<PathBuf>,
    /// Validation pools and judgments for training; default to
    /// `candidates` and `qrels`.
    pub validation_candidates: Option<PathBuf>,
    pub validation_qrels: Option<PathBuf>,
    /// Where every command writes its outputs.
    pub output_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VocabularyConfig {
    pub min_frequency: u64,
}

impl Default for VocabularyConfig {
    fn default() -> Self {
        VocabularyConfig { min_frequency: 1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmbeddingKind {
    Word,
    Subword,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingConfig {
    pub kind: EmbeddingKind,
    pub dim: usize,
    /// Subword only.
    pub buckets: usize,
    /// Subword only: terms with a direct vector.
    pub frequent_words: usize,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        EmbeddingConfig {
            kind: EmbeddingKind::Word,
            dim: 300,
            buckets: DEFAULT_BUCKETS,
            frequent_words: DEFAULT_FREQUENT_WORDS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalConfig {
    /// Candidates kept per query.
    pub depth: usize,
    pub k1: f64,
    pub b: f64,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        let p = Bm25Params::default();
        RetrievalConfig {
            depth: 1000,
            k1: p.k1,
            b: p.b,
        }
    }
}

impl RetrievalConfig {
    pub fn params(&self) -> Result<Bm25Params, CliError> {
        Ok(Bm25Params::new(self.k1, self.b)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub cutoff: usize,
    /// Threshold used by `rerank` unless given on the command line.
    pub threshold: usize,
    pub threshold_min: usize,
    pub threshold_max: usize,
    /// Frequency buckets are evaluated at 1..=frequency_max and at infinity.
    pub frequency_max: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            cutoff: DEFAULT_CUTOFF,
            threshold: MAX_THRESHOLD,
            threshold_min: 1,
            threshold_max: MAX_THRESHOLD,
            frequency_max: 200,
        }
    }
}

impl EvalConfig {
    pub fn frequency_thresholds(&self) -> Vec<u64> {
        (1..=self.frequency_max).chain([u64::MAX]).collect()
    }
}

impl RunConfig {
    /// Reads `path` (or starts from defaults), applies overrides, resolves
    /// relative paths and propagates the seed.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let (mut table, base) = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
                let table: toml::Table = text
                    .parse()
                    .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
                (table, p.parent().map(Path::to_path_buf).unwrap_or_default())
            }
            None => (toml::Table::new(), PathBuf::new()),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let mut config: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e| CliError::Config(e.to_string()))?;
        config.resolve_paths(&base);
        config.model.seed = config.seed;
        config.train.seed = config.seed;
        config.model.validate()?;
        config.train.validate()?;
        Ok(config)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        let p = &mut self.paths;
        for path in [
            &mut p.collection,
            &mut p.queries,
            &mut p.qrels,
            &mut p.candidates,
            &mut p.triples,
            &mut p.embeddings,
            &mut p.validation_candidates,
            &mut p.validation_qrels,
        ]
        .into_iter()
        .flatten()
        {
            join(path);
        }
        if p.output_dir.as_os_str().is_empty() {
            p.output_dir = PathBuf::from("run");
        }
        join(&mut p.output_dir);
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// FNV-1a 64 over the canonical TOML rendering.
    pub fn hash(&self) -> u64 {
        fnv1a64(self.to_toml().as_bytes())
    }
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// `a.b.c=value`; the value is parsed as a TOML literal and falls back to
/// a plain string.
fn apply_override(table: &mut toml::Table, spec: &str) -> Result<(), CliError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("override `{spec}` is not key=value")))?;
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Usage(format!("bad override key `{key}`")));
    }
    let mut node = table;
    for part in &parts[..parts.len() - 1] {
        let entry = node
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Usage(format!("override `{key}`: `{part}` is not a section")))?;
    }
    node.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
