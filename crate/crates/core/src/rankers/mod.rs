//! The three neural scoring functions over (query, document) token rows:
//! KNRM, CONV-KNRM and MatchPyramid.
//!
//! A [`Ranker`] owns its parameters in a [`ParamSet`]; `forward` returns the
//! score with a cache, `backward` turns dL/dscore into parameter gradients.

mod conv_knrm;
mod knrm;
mod match_pyramid;

use std::fmt;
use std::str::FromStr;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::PAD_ID;
use crate::embeddings::EncodedText;
use crate::error::{Error, Result};
use crate::nn::{
    gradient_check, GradCheckOptions, GradCheckReport, Gradients, KernelBank, ParamId, ParamSet, Probe, Real,
    RegimeHasher, Tensor,
};

pub use conv_knrm::ConvKnrmCache;
pub use knrm::KnrmCache;
pub use match_pyramid::PyramidCache;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelInputConfig {
    pub max_query_length: usize,
    pub max_doc_length: usize,
}

impl Default for ModelInputConfig {
    fn default() -> Self {
        ModelInputConfig {
            max_query_length: 30,
            max_doc_length: 180,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Knrm,
    ConvKnrm,
    MatchPyramid,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [ModelKind::Knrm, ModelKind::ConvKnrm, ModelKind::MatchPyramid];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Knrm => "knrm",
            ModelKind::ConvKnrm => "conv-knrm",
            ModelKind::MatchPyramid => "match-pyramid",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown model type `{s}`")))
    }
}

/// Architecture and initialization settings of a ranker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub input: ModelInputConfig,
    pub kernel_sigma: f64,
    pub exact_sigma: f64,
    pub conv_channels: usize,
    pub ngram_sizes: Vec<usize>,
    pub pyramid_channels: usize,
    pub pyramid_kernel: usize,
    /// Pooled grid after each pyramid layer, as (document, query) cells.
    pub pool_schedule: Vec<[usize; 2]>,
    pub hidden_units: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            kind: ModelKind::Knrm,
            input: ModelInputConfig::default(),
            kernel_sigma: 0.1,
            exact_sigma: 0.1,
            conv_channels: 128,
            ngram_sizes: vec![1, 2, 3],
            pyramid_channels: 16,
            pyramid_kernel: 3,
            pool_schedule: vec![[90, 30], [45, 15], [22, 8], [11, 4], [5, 2]],
            hidden_units: 32,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn new(kind: ModelKind) -> Self {
        ModelConfig {
            kind,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.input.max_query_length == 0 || self.input.max_doc_length == 0 {
            return bad("maximum input lengths must be >= 1".into());
        }
        if !(self.kernel_sigma > 0.0 && self.exact_sigma > 0.0) {
            return bad("kernel widths must be positive".into());
        }
        match self.kind {
            ModelKind::Knrm => {}
            ModelKind::ConvKnrm => {
                if self.conv_channels == 0 || self.ngram_sizes.is_empty() || self.ngram_sizes.contains(&0) {
                    return bad("conv-knrm needs channels >= 1 and n-gram sizes >= 1".into());
                }
                let mut sizes = self.ngram_sizes.clone();
                sizes.sort_unstable();
                sizes.dedup();
                if sizes.len() != self.ngram_sizes.len() {
                    return bad("duplicate n-gram size".into());
                }
            }
            ModelKind::MatchPyramid => {
                if self.pyramid_channels == 0 || self.hidden_units == 0 {
                    return bad("match-pyramid needs channels and hidden units >= 1".into());
                }
                if self.pyramid_kernel.is_multiple_of(2) {
                    return bad("pyramid kernel size must be odd".into());
                }
                if self.pool_schedule.is_empty() || self.pool_schedule.iter().any(|g| g[0] == 0 || g[1] == 0) {
                    return bad("pooling schedule needs at least one non-empty grid".into());
                }
                for w in self.pool_schedule.windows(2) {
                    let (a, b) = (w[0], w[1]);
                    if b[0] > a[0] || b[1] > a[1] || b == a {
                        return bad(format!("pooling grids must shrink: {a:?} then {b:?}"));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn kernel_bank(&self) -> Result<KernelBank> {
        KernelBank::knrm(self.kernel_sigma, self.exact_sigma)
    }
}

/// Parameter handles per architecture.
#[derive(Debug, Clone, PartialEq)]
enum Layers {
    Knrm {
        head_w: ParamId,
        head_b: ParamId,
    },
    ConvKnrm {
        convs: Vec<(usize, ParamId, ParamId)>,
        head_w: ParamId,
        head_b: ParamId,
    },
    MatchPyramid {
        convs: Vec<(ParamId, ParamId)>,
        hidden_w: ParamId,
        hidden_b: ParamId,
        head_w: ParamId,
        head_b: ParamId,
    },
}

/// A neural re-ranker with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Ranker<T = f32> {
    config: ModelConfig,
    bank: KernelBank,
    params: ParamSet<T>,
    embedding: ParamId,
    layers: Layers,
}

/// Embedded tokens of one side of the pair.
#[derive(Debug, Clone)]
pub(crate) struct Embedded<T> {
    pub text: EncodedText,
    pub values: Tensor<T>,
    pub mask: Vec<bool>,
}

/// Everything `backward` needs from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    query: Embedded<T>,
    doc: Embedded<T>,
    inner: Inner<T>,
}

#[derive(Debug, Clone)]
enum Inner<T> {
    Knrm(KnrmCache<T>),
    ConvKnrm(ConvKnrmCache<T>),
    MatchPyramid(PyramidCache<T>),
}

impl<T: Real> ForwardCache<T> {
    /// Kernel features fed to the score layer (KNRM and CONV-KNRM).
    pub fn features(&self) -> Option<&[T]> {
        match &self.inner {
            Inner::Knrm(c) => Some(&c.features),
            Inner::ConvKnrm(c) => Some(&c.features),
            Inner::MatchPyramid(_) => None,
        }
    }

    /// Output of the last pooling layer (MatchPyramid).
    pub fn pooled(&self) -> Option<&Tensor<T>> {
        match &self.inner {
            Inner::MatchPyramid(c) => Some(c.pooled()),
            _ => None,
        }
    }

    /// Fingerprint of the piecewise-linear branches taken.
    pub fn regime(&self) -> u64 {
        let mut h = RegimeHasher::default();
        match &self.inner {
            Inner::Knrm(_) => {}
            Inner::ConvKnrm(c) => c.regime(&mut h),
            Inner::MatchPyramid(c) => c.regime(&mut h),
        }
        h.finish()
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor<f32> {
    let bound = (1.0 / fan_in as f64).sqrt() as f32;
    Tensor::from_fn(shape, |_| rng.random_range(-bound..=bound))
}

impl Ranker<f32> {
    /// Builds a model around an embedding matrix (row 0 = PAD, frozen).
    /// Convolution and projection weights are seeded uniform in
    /// `±sqrt(1/fan_in)`; biases and the score head start at zero.
    pub fn new(config: ModelConfig, embeddings: Tensor<f32>) -> Result<Self> {
        config.validate()?;
        let (rows, dim) = embeddings.dims2()?;
        if rows < 2 || dim == 0 {
            return Err(Error::Shape(format!("embedding matrix {rows}x{dim} is too small")));
        }
        if embeddings.row(PAD_ID as usize).iter().any(|&v| v != 0.0) {
            return Err(Error::Invariant("PAD embedding row must be zero".into()));
        }
        let bank = config.kernel_bank()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamSet::new();
        let embedding = params.add_embedding("embedding", embeddings, vec![PAD_ID as usize]);
        let layers = match config.kind {
            ModelKind::Knrm => Layers::Knrm {
                head_w: params.add("head.weight", Tensor::zeros(&[bank.len(), 1])),
                head_b: params.add("head.bias", Tensor::zeros(&[1])),
            },
            ModelKind::ConvKnrm => {
                let c = config.conv_channels;
                let convs = config
                    .ngram_sizes
                    .iter()
                    .map(|&n| {
                        let w = params.add(format!("conv{n}.weight"), uniform(&mut rng, &[n, dim, c], n * dim));
                        let b = params.add(format!("conv{n}.bias"), Tensor::zeros(&[c]));
                        (n, w, b)
                    })
                    .collect::<Vec<_>>();
                let features = convs.len() * convs.len() * bank.len();
                Layers::ConvKnrm {
                    convs,
                    head_w: params.add("head.weight", Tensor::zeros(&[features, 1])),
                    head_b: params.add("head.bias", Tensor::zeros(&[1])),
                }
            }
            ModelKind::MatchPyramid => {
                let (k, c) = (config.pyramid_kernel, config.pyramid_channels);
                let mut cin = 1;
                let mut convs = Vec::new();
                for l in 0..config.pool_schedule.len() {
                    let w = params.add(format!("pyramid{l}.weight"), uniform(&mut rng, &[k, k, cin, c], k * k * cin));
                    let b = params.add(format!("pyramid{l}.bias"), Tensor::zeros(&[c]));
                    convs.push((w, b));
                    cin = c;
                }
                let last = config.pool_schedule[config.pool_schedule.len() - 1];
                let flat = last[0] * last[1] * c;
                let h = config.hidden_units;
                Layers::MatchPyramid {
                    convs,
                    hidden_w: params.add("hidden.weight", uniform(&mut rng, &[flat, h], flat)),
                    hidden_b: params.add("hidden.bias", Tensor::zeros(&[h])),
                    head_w: params.add("head.weight", Tensor::zeros(&[h, 1])),
                    head_b: params.add("head.bias", Tensor::zeros(&[1])),
                }
            }
        };
        Ok(Ranker {
            config,
            bank,
            params,
            embedding,
            layers,
        })
    }
}

impl<T: Real> Ranker<T> {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn kind(&self) -> ModelKind {
        self.config.kind
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn embedding_id(&self) -> ParamId {
        self.embedding
    }

    pub fn embedding_dim(&self) -> usize {
        self.params.get(self.embedding).shape()[1]
    }

    /// The same model in another scalar type.
    pub fn cast<U: Real>(&self) -> Ranker<U> {
        Ranker {
            config: self.config.clone(),
            bank: self.bank.clone(),
            params: self.params.cast(),
            embedding: self.embedding,
            layers: self.layers.clone(),
        }
    }

    /// Score-head weights, for tests and diagnostics.
    pub fn head_ids(&self) -> (ParamId, ParamId) {
        match &self.layers {
            Layers::Knrm { head_w, head_b }
            | Layers::ConvKnrm { head_w, head_b, .. }
            | Layers::MatchPyramid { head_w, head_b, .. } => (*head_w, *head_b),
        }
    }

    pub fn score(&self, query: &EncodedText, doc: &EncodedText) -> Result<T> {
        self.forward(query, doc).map(|(s, _)| s)
    }

    pub fn forward(&self, query: &EncodedText, doc: &EncodedText) -> Result<(T, ForwardCache<T>)> {
        self.forward_with(&self.params, query, doc)
    }

    /// Forward pass with substitute parameter values (same layout).
    pub fn forward_with(
        &self,
        params: &ParamSet<T>,
        query: &EncodedText,
        doc: &EncodedText,
    ) -> Result<(T, ForwardCache<T>)> {
        let input = self.config.input;
        let mut q = query.truncated(input.max_query_length);
        let mut d = doc.truncated(input.max_doc_length);
        if q.real_tokens() == 0 {
            return Err(Error::InvalidArgument("query has no tokens after truncation".into()));
        }
        if d.real_tokens() == 0 {
            return Err(Error::InvalidArgument("document has no tokens after truncation".into()));
        }
        if self.config.kind == ModelKind::MatchPyramid {
            q = q.without_padding();
            d = d.without_padding();
        }
        let table = params.get(self.embedding);
        let q = embed(table, q)?;
        let d = embed(table, d)?;
        let (score, inner) = match &self.layers {
            Layers::Knrm { head_w, head_b } => {
                let c = knrm::forward(&self.bank, &q, &d)?;
                let s = head_score(params, *head_w, *head_b, &c.features);
                (s, Inner::Knrm(c))
            }
            Layers::ConvKnrm { convs, head_w, head_b } => {
                let c = conv_knrm::forward(params, &self.bank, convs, &q, &d)?;
                let s = head_score(params, *head_w, *head_b, &c.features);
                (s, Inner::ConvKnrm(c))
            }
            Layers::MatchPyramid {
                convs,
                hidden_w,
                hidden_b,
                head_w,
                head_b,
            } => {
                let c = match_pyramid::forward(
                    params,
                    &self.config.pool_schedule,
                    convs,
                    [*hidden_w, *hidden_b, *head_w, *head_b],
                    &q,
                    &d,
                )?;
                (c.score, Inner::MatchPyramid(c))
            }
        };
        if !score.is_finite() {
            return Err(Error::NonFinite("model score".into()));
        }
        Ok((score, ForwardCache { query: q, doc: d, inner }))
    }

    /// Accumulates `dscore · ∂score/∂θ` into `grads`.
    pub fn backward(&self, cache: &ForwardCache<T>, dscore: T, grads: &mut Gradients<T>) {
        self.backward_with(&self.params, cache, dscore, grads)
    }

    pub fn backward_with(&self, params: &ParamSet<T>, cache: &ForwardCache<T>, dscore: T, grads: &mut Gradients<T>) {
        let (q, d) = (&cache.query, &cache.doc);
        let mut gq = vec![T::zero(); q.values.len()];
        let mut gd = vec![T::zero(); d.values.len()];
        match (&self.layers, &cache.inner) {
            (Layers::Knrm { head_w, head_b }, Inner::Knrm(c)) => {
                let gf = head_backward(params, *head_w, *head_b, &c.features, dscore, grads);
                knrm::backward(&self.bank, c, &gf, &mut gq, &mut gd);
            }
            (Layers::ConvKnrm { convs, head_w, head_b }, Inner::ConvKnrm(c)) => {
                let gf = head_backward(params, *head_w, *head_b, &c.features, dscore, grads);
                conv_knrm::backward(params, &self.bank, convs, c, q, d, &gf, grads, &mut gq, &mut gd);
            }
            (
                Layers::MatchPyramid {
                    convs,
                    hidden_w,
                    hidden_b,
                    head_w,
                    head_b,
                },
                Inner::MatchPyramid(c),
            ) => {
                match_pyramid::backward(
                    params,
                    convs,
                    [*hidden_w, *hidden_b, *head_w, *head_b],
                    c,
                    dscore,
                    grads,
                    &mut gq,
                    &mut gd,
                );
            }
            _ => panic!("forward cache belongs to a different architecture"),
        }
        embed_backward(self.embedding, q, &gq, grads);
        embed_backward(self.embedding, d, &gd, grads);
    }
}

/// Compares `backward` against central differences of the score on one
/// (query, document) pair, over every parameter tensor.
pub fn check_pair_gradients(
    ranker: &Ranker<f64>,
    query: &EncodedText,
    doc: &EncodedText,
    options: GradCheckOptions,
) -> Result<GradCheckReport> {
    let (_, cache) = ranker.forward(query, doc)?;
    let mut grads = Gradients::zeros_like(ranker.params());
    ranker.backward(&cache, 1.0, &mut grads);
    gradient_check(
        ranker.params(),
        &grads,
        |p| {
            let (value, c) = ranker.forward_with(p, query, doc)?;
            Ok(Probe {
                value,
                regime: c.regime(),
            })
        },
        options,
    )
}

/// Sum of each token's embedding rows; PAD positions stay zero.
pub(crate) fn embed<T: Real>(table: &Tensor<T>, text: EncodedText) -> Result<Embedded<T>> {
    let (rows, dim) = table.dims2()?;
    if let Some(max) = text.max_row() {
        if max as usize >= rows {
            return Err(Error::Shape(format!("token row {max} outside embedding matrix of {rows} rows")));
        }
    }
    let mut values = vec![T::zero(); text.len() * dim];
    for i in 0..text.len() {
        let out = &mut values[i * dim..(i + 1) * dim];
        for &r in text.token_rows(i) {
            for (o, &v) in out.iter_mut().zip(table.row(r as usize)) {
                *o += v;
            }
        }
    }
    Ok(Embedded {
        values: Tensor::new(&[text.len(), dim], values)?,
        mask: text.mask(),
        text,
    })
}

fn embed_backward<T: Real>(id: ParamId, side: &Embedded<T>, grad: &[T], grads: &mut Gradients<T>) {
    let dim = side.values.shape()[1];
    for i in 0..side.text.len() {
        if !side.mask[i] {
            continue;
        }
        let g = &grad[i * dim..(i + 1) * dim];
        if g.iter().all(|&v| v == T::zero()) {
            continue;
        }
        for &r in side.text.token_rows(i) {
            grads.row_mut(id, r).iter_mut().zip(g).for_each(|(a, &b)| *a += b);
        }
    }
}

fn head_score<T: Real>(params: &ParamSet<T>, w: ParamId, b: ParamId, features: &[T]) -> T {
    let weights = params.get(w).data();
    params.get(b).data()[0] + features.iter().zip(weights).map(|(&f, &w)| f * w).sum::<T>()
}

/// Head gradients; returns dL/dfeatures.
fn head_backward<T: Real>(
    params: &ParamSet<T>,
    w: ParamId,
    b: ParamId,
    features: &[T],
    dscore: T,
    grads: &mut Gradients<T>,
) -> Vec<T> {
    let (gw, gb) = grads.dense_pair_mut(w, b);
    gb[0] += dscore;
    for (g, &f) in gw.iter_mut().zip(features) {
        *g += f * dscore;
    }
    params.get(w).data().iter().map(|&w| w * dscore).collect()
}
