//! Seeded parameter initialisation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::ops::ConvParams;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Deterministic generator for weights and synthetic inputs.
#[derive(Debug, Clone)]
pub struct ParamRng(ChaCha8Rng);

impl ParamRng {
    pub fn new(seed: u64) -> Self {
        ParamRng(ChaCha8Rng::seed_from_u64(seed))
    }

    /// Child generator for an independent sub-stream, keyed by `stream`.
    pub fn fork(&mut self, stream: u64) -> Self {
        let base: u64 = self.0.gen();
        ParamRng(ChaCha8Rng::seed_from_u64(base ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15)))
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        self.0.gen_range(lo..hi)
    }

    pub fn index(&mut self, n: usize) -> usize {
        self.0.gen_range(0..n)
    }

    pub fn range(&mut self, lo: usize, hi_inclusive: usize) -> usize {
        self.0.gen_range(lo..=hi_inclusive)
    }

    pub fn coin(&mut self, p: f64) -> bool {
        self.0.gen_bool(p)
    }

    pub fn tensor<T: Scalar>(&mut self, shape: [usize; 4], lo: f64, hi: f64) -> Tensor<T> {
        Tensor::from_fn(shape, |_, _, _, _| T::from_f64(self.uniform(lo, hi)))
    }

    pub fn vector<T: Scalar>(&mut self, len: usize, lo: f64, hi: f64) -> Vec<T> {
        (0..len).map(|_| T::from_f64(self.uniform(lo, hi))).collect()
    }

    /// Square-kernel layer with weights and bias uniform in `[-b, b]`,
    /// `b = 1 / sqrt(in_ch * k * k)`.
    pub fn conv<T: Scalar>(
        &mut self,
        out_ch: usize,
        in_ch: usize,
        k: usize,
        stride: usize,
        padding: usize,
    ) -> ConvParams<T> {
        let bound = 1.0 / ((in_ch * k * k) as f64).sqrt();
        ConvParams {
            weight: self.tensor([out_ch, in_ch, k, k], -bound, bound),
            bias: self.vector(out_ch, -bound, bound),
            stride: stride.max(1),
            padding,
        }
    }

    /// `k x k` layer with padding `(k - 1) / 2`.
    pub fn conv_same<T: Scalar>(&mut self, out_ch: usize, in_ch: usize, k: usize, stride: usize) -> ConvParams<T> {
        self.conv(out_ch, in_ch, k, stride, (k - 1) / 2)
    }
}
