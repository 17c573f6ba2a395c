//! Minimal differentiable-computation substrate.
//!
//! Every operation has an explicit forward and a hand-written backward rule;
//! there is no general graph. Models call the forward functions, keep the
//! returned caches, and walk them in reverse. All code is generic over
//! [`Real`] so the same rules can be verified in `f64` against finite
//! differences while models train in `f32`.

mod adam;
mod checkpoint;
mod gradcheck;
mod ops;
mod params;
mod tensor;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, SubAssign};

use num_traits::{Float, FromPrimitive};

pub use adam::{Adam, OptimizerConfig};
pub use checkpoint::Checkpoint;
pub use gradcheck::{gradient_check, relative_error, GradCheckOptions, GradCheckReport, ParamCheck, Probe};
pub use ops::{
    conv1d, conv1d_backward, conv2d, conv2d_backward, cosine_match_matrix, dynamic_max_pool, gaussian_kernel_pool,
    linear, linear_backward, margin_ranking_loss, pool_bounds, relu, relu_backward, tanh, tanh_backward, CosineCache,
    KernelBank, KernelPoolCache, MarginLoss, MaxPoolCache, KERNEL_LOG_EPSILON,
};
pub use params::{GradBuf, Gradients, Param, ParamId, ParamSet};
pub use tensor::Tensor;

/// Floating-point scalar the tensor code is generic over (`f32` or `f64`).
pub trait Real:
    Float + FromPrimitive + Sum + AddAssign + SubAssign + Debug + Display + Default + Send + Sync + 'static
{
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("every f64 converts to a float type")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// FNV-1a accumulator used to fingerprint piecewise regimes.
#[derive(Debug, Clone, Copy)]
pub struct RegimeHasher(u64);

impl Default for RegimeHasher {
    fn default() -> Self {
        RegimeHasher(0xcbf2_9ce4_8422_2325)
    }
}

impl RegimeHasher {
    pub fn write_u64(&mut self, v: u64) {
        for b in v.to_le_bytes() {
            self.0 ^= u64::from(b);
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }

    pub fn write_signs<T: Real>(&mut self, values: &[T]) {
        for chunk in values.chunks(64) {
            let bits = chunk
                .iter()
                .enumerate()
                .fold(0u64, |acc, (i, &v)| acc | (u64::from(v > T::zero()) << i));
            self.write_u64(bits);
        }
    }

    pub fn write_indices(&mut self, idx: &[usize]) {
        idx.iter().for_each(|&i| self.write_u64(i as u64));
    }

    pub fn finish(self) -> u64 {
        self.0
    }
}
