use crate::error::Result;
use crate::nn::{
    conv2d, conv2d_backward, cosine_match_matrix, dynamic_max_pool, linear, linear_backward, relu, relu_backward,
    CosineCache, Gradients, MaxPoolCache, ParamId, ParamSet, Real, RegimeHasher, Tensor,
};

use super::Embedded;

#[derive(Debug, Clone)]
struct Layer<T> {
    input: Tensor<T>,
    act: Tensor<T>,
    pool: MaxPoolCache,
}

#[derive(Debug, Clone)]
pub struct PyramidCache<T> {
    pub score: T,
    /// Document × query cosine matrix over real tokens only.
    matrix: Tensor<T>,
    cosine: CosineCache<T>,
    layers: Vec<Layer<T>>,
    pooled: Tensor<T>,
    flat: Tensor<T>,
    hidden: Tensor<T>,
}

impl<T: Real> PyramidCache<T> {
    pub fn pooled(&self) -> &Tensor<T> {
        &self.pooled
    }

    pub(super) fn regime(&self, h: &mut RegimeHasher) {
        for l in &self.layers {
            h.write_signs(l.act.data());
            h.write_indices(l.pool.argmax());
        }
        h.write_signs(self.hidden.data());
    }
}

/// `[hidden weight, hidden bias, head weight, head bias]`.
pub(super) type Perceptron = [ParamId; 4];

pub(super) fn forward<T: Real>(
    params: &ParamSet<T>,
    schedule: &[[usize; 2]],
    convs: &[(ParamId, ParamId)],
    mlp: Perceptron,
    q: &Embedded<T>,
    d: &Embedded<T>,
) -> Result<PyramidCache<T>> {
    let (matrix, cosine) = cosine_match_matrix(&d.values, &q.values, &d.mask, &q.mask)?;
    let (m, n) = matrix.dims2()?;
    let mut x = Tensor::new(&[m, n, 1], matrix.data().to_vec())?;
    let mut layers = Vec::with_capacity(convs.len());
    for (&(w, b), grid) in convs.iter().zip(schedule) {
        let act = relu(&conv2d(&x, params.get(w), params.get(b))?);
        let (pooled, pool) = dynamic_max_pool(&act, grid[0], grid[1])?;
        layers.push(Layer { input: x, act, pool });
        x = pooled;
    }
    let flat = Tensor::new(&[1, x.len()], x.data().to_vec())?;
    let [hw, hb, ow, ob] = mlp;
    let hidden = relu(&linear(&flat, params.get(hw), params.get(hb))?);
    let out = linear(&hidden, params.get(ow), params.get(ob))?;
    Ok(PyramidCache {
        score: out.data()[0],
        matrix,
        cosine,
        layers,
        pooled: x,
        flat,
        hidden,
    })
}

#[allow(clippy::too_many_arguments)]
pub(super) fn backward<T: Real>(
    params: &ParamSet<T>,
    convs: &[(ParamId, ParamId)],
    mlp: Perceptron,
    c: &PyramidCache<T>,
    dscore: T,
    grads: &mut Gradients<T>,
    gq: &mut [T],
    gd: &mut [T],
) {
    let [hw, hb, ow, ob] = mlp;
    let g_out = Tensor::new(&[1, 1], vec![dscore]).expect("scalar");
    let mut g_hidden = vec![T::zero(); c.hidden.len()];
    {
        let (gw, gb) = grads.dense_pair_mut(ow, ob);
        linear_backward(&c.hidden, params.get(ow), &g_out, Some(&mut g_hidden), gw, gb);
    }
    let mut g_pre = Tensor::zeros(c.hidden.shape());
    relu_backward(&c.hidden, &g_hidden, g_pre.data_mut());
    let mut g_x = vec![T::zero(); c.flat.len()];
    {
        let (gw, gb) = grads.dense_pair_mut(hw, hb);
        linear_backward(&c.flat, params.get(hw), &g_pre, Some(&mut g_x), gw, gb);
    }
    for (layer, &(w, b)) in c.layers.iter().zip(convs).rev() {
        let mut g_act = vec![T::zero(); layer.act.len()];
        layer.pool.backward(&g_x, &mut g_act);
        let mut g_conv = Tensor::zeros(layer.act.shape());
        relu_backward(&layer.act, &g_act, g_conv.data_mut());
        let mut g_in = vec![T::zero(); layer.input.len()];
        let (gw, gb) = grads.dense_pair_mut(w, b);
        conv2d_backward(&layer.input, params.get(w), &g_conv, Some(&mut g_in), gw, gb);
        g_x = g_in;
    }
    let g_matrix = Tensor::new(c.matrix.shape(), g_x).expect("matrix-shaped gradient");
    c.cosine.backward(&c.matrix, &g_matrix, gd, gq);
}
