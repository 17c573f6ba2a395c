use crate::error::Result;
use crate::nn::{
    conv1d, conv1d_backward, cosine_match_matrix, gaussian_kernel_pool, relu, relu_backward, CosineCache, Gradients,
    KernelBank, KernelPoolCache, ParamId, ParamSet, Real, RegimeHasher, Tensor,
};

use super::Embedded;

#[derive(Debug, Clone)]
struct NgramMap<T> {
    act: Tensor<T>,
    mask: Vec<bool>,
}

#[derive(Debug, Clone)]
struct PairCache<T> {
    matrix: Tensor<T>,
    cosine: CosineCache<T>,
    pool: KernelPoolCache<T>,
}

#[derive(Debug, Clone)]
pub struct ConvKnrmCache<T> {
    pub features: Vec<T>,
    q_maps: Vec<NgramMap<T>>,
    d_maps: Vec<NgramMap<T>>,
    /// Row-major over (query n-gram size, document n-gram size); `None`
    /// when one side has no complete n-gram.
    pairs: Vec<Option<PairCache<T>>>,
}

impl<T: Real> ConvKnrmCache<T> {
    pub(super) fn regime(&self, h: &mut RegimeHasher) {
        for m in self.q_maps.iter().chain(&self.d_maps) {
            h.write_signs(m.act.data());
        }
    }
}

/// Position `p` holds a valid n-gram iff tokens `p..p+n` exist and are real.
pub(crate) fn ngram_mask(mask: &[bool], n: usize) -> Vec<bool> {
    (0..mask.len())
        .map(|p| p + n <= mask.len() && mask[p..p + n].iter().all(|&m| m))
        .collect()
}

fn ngram_map<T: Real>(params: &ParamSet<T>, side: &Embedded<T>, n: usize, w: ParamId, b: ParamId) -> Result<NgramMap<T>> {
    let pre = conv1d(&side.values, params.get(w), params.get(b))?;
    Ok(NgramMap {
        act: relu(&pre),
        mask: ngram_mask(&side.mask, n),
    })
}

pub(super) fn forward<T: Real>(
    params: &ParamSet<T>,
    bank: &KernelBank,
    convs: &[(usize, ParamId, ParamId)],
    q: &Embedded<T>,
    d: &Embedded<T>,
) -> Result<ConvKnrmCache<T>> {
    let q_maps = convs
        .iter()
        .map(|&(n, w, b)| ngram_map(params, q, n, w, b))
        .collect::<Result<Vec<_>>>()?;
    let d_maps = convs
        .iter()
        .map(|&(n, w, b)| ngram_map(params, d, n, w, b))
        .collect::<Result<Vec<_>>>()?;
    let k = bank.len();
    let mut features = vec![T::zero(); convs.len() * convs.len() * k];
    let mut pairs = Vec::with_capacity(convs.len() * convs.len());
    for (a, qm) in q_maps.iter().enumerate() {
        for (b, dm) in d_maps.iter().enumerate() {
            if !qm.mask.contains(&true) || !dm.mask.contains(&true) {
                pairs.push(None);
                continue;
            }
            let (matrix, cosine) = cosine_match_matrix(&qm.act, &dm.act, &qm.mask, &dm.mask)?;
            let (phi, pool) = gaussian_kernel_pool(&matrix, bank, &qm.mask, &dm.mask)?;
            let at = (a * convs.len() + b) * k;
            features[at..at + k].copy_from_slice(&phi);
            pairs.push(Some(PairCache { matrix, cosine, pool }));
        }
    }
    Ok(ConvKnrmCache {
        features,
        q_maps,
        d_maps,
        pairs,
    })
}

#[allow(clippy::too_many_arguments)]
pub(super) fn backward<T: Real>(
    params: &ParamSet<T>,
    bank: &KernelBank,
    convs: &[(usize, ParamId, ParamId)],
    c: &ConvKnrmCache<T>,
    q: &Embedded<T>,
    d: &Embedded<T>,
    grad_features: &[T],
    grads: &mut Gradients<T>,
    gq: &mut [T],
    gd: &mut [T],
) {
    let s = convs.len();
    let k = bank.len();
    let mut gq_maps: Vec<Vec<T>> = c.q_maps.iter().map(|m| vec![T::zero(); m.act.len()]).collect();
    let mut gd_maps: Vec<Vec<T>> = c.d_maps.iter().map(|m| vec![T::zero(); m.act.len()]).collect();
    for (a, gq_map) in gq_maps.iter_mut().enumerate() {
        for (b, gd_map) in gd_maps.iter_mut().enumerate() {
            let Some(pc) = &c.pairs[a * s + b] else { continue };
            let at = (a * s + b) * k;
            let mut gm = Tensor::zeros(pc.matrix.shape());
            pc.pool.backward(&pc.matrix, bank, &grad_features[at..at + k], gm.data_mut());
            pc.cosine.backward(&pc.matrix, &gm, gq_map, gd_map);
        }
    }
    for (i, &(_, w, b)) in convs.iter().enumerate() {
        for (side, map, g_map, g_emb) in [
            (q, &c.q_maps[i], &gq_maps[i], &mut *gq),
            (d, &c.d_maps[i], &gd_maps[i], &mut *gd),
        ] {
            if g_map.iter().all(|&v| v == T::zero()) {
                continue;
            }
            let mut g_pre = Tensor::zeros(map.act.shape());
            relu_backward(&map.act, g_map, g_pre.data_mut());
            let (gw, gb) = grads.dense_pair_mut(w, b);
            conv1d_backward(&side.values, params.get(w), &g_pre, Some(g_emb), gw, gb);
        }
    }
}
