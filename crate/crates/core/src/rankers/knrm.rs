use crate::error::Result;
use crate::nn::{cosine_match_matrix, gaussian_kernel_pool, CosineCache, KernelBank, KernelPoolCache, Real, Tensor};

use super::Embedded;

#[derive(Debug, Clone)]
pub struct KnrmCache<T> {
    pub features: Vec<T>,
    matrix: Tensor<T>,
    cosine: CosineCache<T>,
    pool: KernelPoolCache<T>,
}

pub(super) fn forward<T: Real>(bank: &KernelBank, q: &Embedded<T>, d: &Embedded<T>) -> Result<KnrmCache<T>> {
    let (matrix, cosine) = cosine_match_matrix(&q.values, &d.values, &q.mask, &d.mask)?;
    let (features, pool) = gaussian_kernel_pool(&matrix, bank, &q.mask, &d.mask)?;
    Ok(KnrmCache {
        features,
        matrix,
        cosine,
        pool,
    })
}

pub(super) fn backward<T: Real>(bank: &KernelBank, c: &KnrmCache<T>, grad_features: &[T], gq: &mut [T], gd: &mut [T]) {
    let mut gm = Tensor::zeros(c.matrix.shape());
    c.pool.backward(&c.matrix, bank, grad_features, gm.data_mut());
    c.cosine.backward(&c.matrix, &gm, gq, gd);
}
