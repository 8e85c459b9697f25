//! Central finite-difference check of [`pb_backward`].

use serde::Serialize;

use crate::error::Result;
use crate::init::ParamRng;
use crate::pixel_relation::{pb_backward, pixel_relation_block, PbParams};
use crate::tensor::Tensor;

/// Magnitudes below this are compared absolutely rather than relatively.
///
/// A central difference with step 1e-5 carries ~1e-10 of rounding noise, so
/// a gradient that is exactly zero (the bias one always is: softmax ignores a
/// uniform shift of the logits) would otherwise report a relative error of
/// order 1e-4 from noise alone.
pub const REL_ERR_FLOOR: f64 = 1e-5;

/// `|a - b| / max(|a|, |b|, REL_ERR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
}

fn objective(x: &Tensor<f64>, p: &PbParams<f64>, upstream: &Tensor<f64>) -> Result<f64> {
    let z = pixel_relation_block(x, p)?;
    Ok(z.data().iter().zip(upstream.data()).map(|(a, b)| a * b).sum())
}

/// Compares every analytic gradient entry (input, weights, bias) against
/// `(L(θ+ε) − L(θ−ε)) / 2ε`.
pub fn check_pb(x: &Tensor<f64>, p: &PbParams<f64>, upstream: &Tensor<f64>, eps: f64) -> Result<GradCheckReport> {
    let grads = pb_backward(x, p, upstream)?;
    let mut worst = 0.0f64;
    let mut checked = 0;

    let mut xp = x.clone();
    for i in 0..x.data().len() {
        let orig = xp.data()[i];
        xp.data_mut()[i] = orig + eps;
        let up = objective(&xp, p, upstream)?;
        xp.data_mut()[i] = orig - eps;
        let down = objective(&xp, p, upstream)?;
        xp.data_mut()[i] = orig;
        worst = worst.max(relative_error(grads.grad_x.data()[i], (up - down) / (2.0 * eps)));
        checked += 1;
    }

    let mut pp = p.clone();
    for i in 0..p.channels() {
        let orig = pp.w.weight.data()[i];
        pp.w.weight.data_mut()[i] = orig + eps;
        let up = objective(x, &pp, upstream)?;
        pp.w.weight.data_mut()[i] = orig - eps;
        let down = objective(x, &pp, upstream)?;
        pp.w.weight.data_mut()[i] = orig;
        worst = worst.max(relative_error(grads.grad_w[i], (up - down) / (2.0 * eps)));
        checked += 1;
    }

    let b = pp.w.bias[0];
    pp.w.bias[0] = b + eps;
    let up = objective(x, &pp, upstream)?;
    pp.w.bias[0] = b - eps;
    let down = objective(x, &pp, upstream)?;
    worst = worst.max(relative_error(grads.grad_b, (up - down) / (2.0 * eps)));
    checked += 1;

    Ok(GradCheckReport {
        max_rel_error: worst,
        checked,
    })
}

/// Runs [`check_pb`] on `cases` random inputs derived from `seed`.
pub fn run(seed: u64, cases: usize, eps: f64) -> Result<GradCheckReport> {
    let mut rng = ParamRng::new(seed);
    let mut total = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
    };
    for _ in 0..cases {
        let c = rng.range(1, 6);
        let h = rng.range(1, 5);
        let w = rng.range(1, 5);
        let x = rng.tensor([1, c, h, w], -1.5, 1.5);
        let pb = PbParams::new(rng.vector(c, -1.0, 1.0), rng.uniform(-0.5, 0.5))?;
        let upstream = rng.tensor([1, c, h, w], -1.0, 1.0);
        let r = check_pb(&x, &pb, &upstream, eps)?;
        total.max_rel_error = total.max_rel_error.max(r.max_rel_error);
        total.checked += r.checked;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(2.0, 1.0), 0.5);
        assert!(relative_error(1e-12, 0.0) <= 1e-6);
        assert!(relative_error(0.0, 2e-10) < 1e-4);
    }

    #[test]
    fn random_cases_pass() {
        let r = run(1, 5, 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
        assert!(r.checked > 5);
    }
}
