use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{GradBuf, Gradients, ParamSet, Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        OptimizerConfig {
            learning_rate,
            ..Default::default()
        }
    }

    /// A zero learning rate is accepted and freezes every parameter.
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate >= 0.0
            && self.learning_rate.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("bad optimizer config {self:?}")))
        }
    }
}

/// Adam with bias correction. Moments are kept densely for every parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    config: OptimizerConfig,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
    step: u64,
}

impl<T: Real> Adam<T> {
    pub fn new(config: OptimizerConfig, params: &ParamSet<T>) -> Result<Self> {
        config.validate()?;
        let zeros = |p: &crate::nn::Param<T>| Tensor::zeros(p.value.shape());
        Ok(Adam {
            config,
            first: params.iter().map(zeros).collect(),
            second: params.iter().map(zeros).collect(),
            step: 0,
        })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Tensor<T>], &[Tensor<T>]) {
        (&self.first, &self.second)
    }

    pub(crate) fn restore(&mut self, first: Vec<Tensor<T>>, second: Vec<Tensor<T>>, step: u64) -> Result<()> {
        let same = |a: &[Tensor<T>], b: &[Tensor<T>]| {
            a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.shape() == y.shape())
        };
        if !same(&first, &self.first) || !same(&second, &self.second) {
            return Err(Error::Shape("optimizer state does not match the model".into()));
        }
        self.first = first;
        self.second = second;
        self.step = step;
        Ok(())
    }

    /// One update. Fails without touching anything if a gradient is not finite.
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &Gradients<T>) -> Result<()> {
        if !grads.is_finite() {
            return Err(Error::NonFinite("gradient".into()));
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let lr = T::lit(c.learning_rate);
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let eps = T::lit(c.epsilon);
        let corr1 = T::one() - b1.powi(t);
        let corr2 = T::one() - b2.powi(t);
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let i = id.index();
            let frozen = params.param(id).frozen_rows.clone();
            let value = params.get_mut(id);
            let width = value.len() / value.shape()[0];
            let total_rows = value.shape()[0];
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            let p = value.data_mut();
            let mut update = |flat: usize, g: T| {
                m[flat] = b1 * m[flat] + (T::one() - b1) * g;
                v[flat] = b2 * v[flat] + (T::one() - b2) * g * g;
                let m_hat = m[flat] / corr1;
                let v_hat = v[flat] / corr2;
                p[flat] -= lr * m_hat / (v_hat.sqrt() + eps);
            };
            let frozen_dense = FrozenRows { width, rows: &frozen };
            match grads.buf(id) {
                GradBuf::Dense(g) => {
                    for (flat, &gv) in g.iter().enumerate() {
                        if frozen_dense.is_frozen(flat) {
                            continue;
                        }
                        update(flat, gv);
                    }
                }
                GradBuf::Rows { rows: touched, .. } => {
                    for r in 0..total_rows {
                        if frozen.contains(&r) {
                            continue;
                        }
                        let g = touched.get(&(r as u32));
                        for c in 0..width {
                            update(r * width + c, g.map_or(T::zero(), |g| g[c]));
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

struct FrozenRows<'a> {
    width: usize,
    rows: &'a [usize],
}

impl FrozenRows<'_> {
    fn is_frozen(&self, flat: usize) -> bool {
        !self.rows.is_empty() && self.rows.contains(&(flat / self.width))
    }
}
