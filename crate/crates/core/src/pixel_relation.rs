//! Global context attention.
//!
//! Four operators of decreasing generality compute the same thing when their
//! parameters are specialised:
//!
//! 1. [`nonlocal_reference`]: `z_i = W_z Σ_j f(x_i, x_j)/C(x) · W_v x_j + W_r x_i`
//!    with explicit pairwise attention (O(N²) in the pixel count).
//! 2. [`simplified_qi`]: the same with a query-independent `f(x_j)`, so the
//!    pooled context is computed once.
//! 3. [`simplified_dist`]: `W_z` dropped and `W_v` pulled out of the sum.
//! 4. [`pixel_relation_block`]: `W_v` and `W_r` are identities and
//!    `f(x_j) = exp(w · x_j + b)`, i.e. `z_i = Σ_j softmax(w·x + b)_j x_j + x_i`.
//!
//! [`equivalence_chain`] evaluates all four on one input and reports the
//! pairwise differences.

use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::init::ParamRng;
use crate::ops::{self, conv2d, softmax_vec, ConvParams};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// The pairwise function `f` of the non-local operator.
#[derive(Debug, Clone, PartialEq)]
pub enum AttentionKernel<T = f64> {
    /// `f(x_i, x_j) = exp(θ(x_i) · φ(x_j))`.
    EmbeddedGaussianPairwise {
        theta: ConvParams<T>,
        phi: ConvParams<T>,
    },
    /// `f(x_i, x_j) = exp(w · x_j + b)` with a 1x1, C→1 layer.
    QueryIndependent { w: ConvParams<T> },
    /// `f ≡ 1`: uniform averaging.
    ConstantOne,
}

impl<T: Scalar> AttentionKernel<T> {
    pub fn is_query_independent(&self) -> bool {
        !matches!(self, AttentionKernel::EmbeddedGaussianPairwise { .. })
    }

    fn validate(&self, c: usize) -> Result<()> {
        match self {
            AttentionKernel::EmbeddedGaussianPairwise { theta, phi } => {
                check_pointwise(theta, c, None, "theta")?;
                check_pointwise(phi, c, None, "phi")?;
                if theta.out_channels() != phi.out_channels() {
                    return Err(Error::shape(format!(
                        "theta embeds to {} channels but phi to {}",
                        theta.out_channels(),
                        phi.out_channels()
                    )));
                }
                Ok(())
            }
            AttentionKernel::QueryIndependent { w } => check_pointwise(w, c, Some(1), "attention"),
            AttentionKernel::ConstantOne => Ok(()),
        }
    }

    /// Query-independent log-weights `log f(x_j)` for every pixel of sample `n`.
    fn query_independent_logits(&self, x: &Tensor<T>, n: usize) -> Result<Vec<T>> {
        let logits = match self {
            AttentionKernel::QueryIndependent { w } => pointwise_logits(x, n, w),
            AttentionKernel::ConstantOne => vec![T::zero(); x.pixels()],
            AttentionKernel::EmbeddedGaussianPairwise { .. } => {
                return Err(Error::invalid(
                    "pairwise attention kernel is not query-independent",
                ))
            }
        };
        check_logits(&logits)?;
        Ok(logits)
    }
}

/// Transforms of the general non-local operator.
#[derive(Debug, Clone, PartialEq)]
pub struct NonLocalParams<T = f64> {
    pub w_v: ConvParams<T>,
    pub w_z: ConvParams<T>,
    /// `None` is the identity shortcut.
    pub w_r: Option<ConvParams<T>>,
    pub kernel: AttentionKernel<T>,
}

impl<T: Scalar> NonLocalParams<T> {
    pub fn identity(c: usize, kernel: AttentionKernel<T>) -> Self {
        NonLocalParams {
            w_v: ConvParams::identity(c),
            w_z: ConvParams::identity(c),
            w_r: None,
            kernel,
        }
    }

    fn validate(&self, c: usize) -> Result<()> {
        check_pointwise(&self.w_v, c, Some(c), "w_v")?;
        check_pointwise(&self.w_z, c, Some(c), "w_z")?;
        if let Some(w_r) = &self.w_r {
            check_pointwise(w_r, c, Some(c), "w_r")?;
        }
        self.kernel.validate(c)
    }
}

/// The single C→1 transform of the pixel-relation block.
#[derive(Debug, Clone, PartialEq)]
pub struct PbParams<T = f64> {
    pub w: ConvParams<T>,
}

impl<T: Scalar> PbParams<T> {
    pub fn new(weights: Vec<T>, bias: T) -> Result<Self> {
        let c = weights.len();
        let w = ConvParams::new(Tensor::from_vec([1, c, 1, 1], weights)?, vec![bias], 1, 0)?;
        Ok(PbParams { w })
    }

    pub fn zeros(c: usize) -> Self {
        PbParams {
            w: ConvParams::zeros(1, c, 1, 1, 0),
        }
    }

    pub fn random(rng: &mut ParamRng, c: usize) -> Self {
        PbParams {
            w: rng.conv(1, c, 1, 1, 0),
        }
    }

    pub fn channels(&self) -> usize {
        self.w.in_channels()
    }

    pub fn weights(&self) -> &[T] {
        self.w.weight.data()
    }

    pub fn bias(&self) -> T {
        self.w.bias[0]
    }

    pub fn num_params(&self) -> usize {
        self.w.num_params()
    }

    fn validate(&self, c: usize) -> Result<()> {
        check_pointwise(&self.w, c, Some(1), "pixel-relation w")
    }
}

/// Attention work done by one forward call.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct OpCount {
    /// Number of `weight × vector` accumulations into a context vector.
    pub weighted_terms: u64,
    /// Number of attention logits evaluated.
    pub logits: u64,
}

fn check_pointwise<T: Scalar>(p: &ConvParams<T>, c: usize, out: Option<usize>, name: &str) -> Result<()> {
    if p.kernel() != (1, 1) {
        let (kh, kw) = p.kernel();
        return Err(Error::shape(format!("{name} must be 1x1, got {kh}x{kw}")));
    }
    if p.in_channels() != c {
        return Err(Error::shape(format!(
            "{name} expects {} input channels, feature map has {c}",
            p.in_channels()
        )));
    }
    if let Some(o) = out {
        if p.out_channels() != o {
            return Err(Error::shape(format!(
                "{name} must produce {o} channels, got {}",
                p.out_channels()
            )));
        }
    }
    Ok(())
}

fn check_input<T: Scalar>(x: &Tensor<T>) -> Result<()> {
    let [n, c, h, w] = x.shape();
    if n == 0 || c == 0 || h == 0 || w == 0 {
        return Err(Error::shape(format!("attention input {:?} has an empty extent", x.shape())));
    }
    Ok(())
}

fn check_logits<T: Scalar>(logits: &[T]) -> Result<()> {
    if let Some(bad) = logits.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("attention logit {bad}")));
    }
    Ok(())
}

/// `w · x_j + b` for every pixel `j` of sample `n`.
fn pointwise_logits<T: Scalar>(x: &Tensor<T>, n: usize, w: &ConvParams<T>) -> Vec<T> {
    let weights = w.weight.data();
    let mut logits = vec![w.bias[0]; x.pixels()];
    for (c, &wc) in weights.iter().enumerate() {
        for (l, &v) in logits.iter_mut().zip(x.plane(n, c)) {
            *l = *l + wc * v;
        }
    }
    logits
}

/// `Σ_j weights[j] · features[:, j]` over the planes of sample `n`.
fn pool<T: Scalar>(features: &Tensor<T>, n: usize, weights: &[T]) -> Vec<T> {
    (0..features.channels())
        .map(|c| {
            ops::sum_unordered(features.plane(n, c).iter().zip(weights).map(|(&v, &a)| a * v).collect())
        })
        .collect()
}

/// Adds the per-channel `context` to every pixel of `base` (sample `n`).
fn broadcast_add<T: Scalar>(base: &mut Tensor<T>, n: usize, context: &[T]) {
    for (c, &v) in context.iter().enumerate() {
        base.plane_mut(n, c).iter_mut().for_each(|z| *z = *z + v);
    }
}

fn shortcut<T: Scalar>(x: &Tensor<T>, w_r: Option<&ConvParams<T>>) -> Result<Tensor<T>> {
    match w_r {
        Some(w) => conv2d(x, w),
        None => Ok(x.clone()),
    }
}

/// General non-local block with a residual shortcut, by explicit pairwise
/// evaluation.
pub fn nonlocal_reference<T: Scalar>(x: &Tensor<T>, p: &NonLocalParams<T>) -> Result<Tensor<T>> {
    nonlocal_reference_counted(x, p).map(|(z, _)| z)
}

pub fn nonlocal_reference_counted<T: Scalar>(
    x: &Tensor<T>,
    p: &NonLocalParams<T>,
) -> Result<(Tensor<T>, OpCount)> {
    check_input(x)?;
    p.validate(x.channels())?;
    let [n, c, _, _] = x.shape();
    let np = x.pixels();
    let values = conv2d(x, &p.w_v)?;
    let embeddings = match &p.kernel {
        AttentionKernel::EmbeddedGaussianPairwise { theta, phi } => {
            Some((conv2d(x, theta)?, conv2d(x, phi)?))
        }
        _ => None,
    };
    let mut count = OpCount::default();
    let mut y = Tensor::zeros(x.shape());

    for b in 0..n {
        let qi_logits = match &embeddings {
            None => Some(p.kernel.query_independent_logits(x, b)?),
            Some(_) => None,
        };
        for i in 0..np {
            let logits: Vec<T> = match (&embeddings, &qi_logits) {
                (Some((th, ph)), _) => {
                    let q = th.pixel_vector(b, i);
                    (0..np)
                        .map(|j| {
                            q.iter()
                                .enumerate()
                                .fold(T::zero(), |acc, (k, &qk)| acc + qk * ph.plane(b, k)[j])
                        })
                        .collect()
                }
                // f ignores the query here; the weighted sum below still runs per query
                (None, Some(l)) => l.clone(),
                (None, None) => unreachable!(),
            };
            check_logits(&logits)?;
            count.logits += np as u64;
            let weights = softmax_vec(&logits)?;
            for ch in 0..c {
                let v = values.plane(b, ch);
                let mut acc = T::zero();
                for j in 0..np {
                    acc = acc + weights[j] * v[j];
                }
                y.plane_mut(b, ch)[i] = acc;
            }
            count.weighted_terms += np as u64;
        }
    }
    let mut z = conv2d(&y, &p.w_z)?;
    let r = shortcut(x, p.w_r.as_ref())?;
    z = ops::add(&z, &r)?;
    Ok((z, count))
}

/// Non-local block with a query-independent kernel: the attention-pooled
/// value vector is computed once per sample and broadcast.
pub fn simplified_qi<T: Scalar>(x: &Tensor<T>, p: &NonLocalParams<T>) -> Result<Tensor<T>> {
    simplified_qi_counted(x, p).map(|(z, _)| z)
}

pub fn simplified_qi_counted<T: Scalar>(
    x: &Tensor<T>,
    p: &NonLocalParams<T>,
) -> Result<(Tensor<T>, OpCount)> {
    check_input(x)?;
    if !p.kernel.is_query_independent() {
        return Err(Error::invalid(
            "simplified_qi needs a query-independent kernel, got a pairwise one",
        ));
    }
    p.validate(x.channels())?;
    let values = conv2d(x, &p.w_v)?;
    let mut z = shortcut(x, p.w_r.as_ref())?;
    let mut count = OpCount::default();
    for b in 0..x.batch() {
        let logits = p.kernel.query_independent_logits(x, b)?;
        count.logits += logits.len() as u64;
        let weights = softmax_vec(&logits)?;
        let pooled = pool(&values, b, &weights);
        count.weighted_terms += weights.len() as u64;
        let context = p.w_z.apply_vector(&pooled)?;
        broadcast_add(&mut z, b, &context);
    }
    Ok((z, count))
}

/// `z_i = W_v Σ_j f(x_j)/C(x) · x_j + W_r x_i`: pool the raw features, then
/// transform the single pooled vector.
pub fn simplified_dist<T: Scalar>(
    x: &Tensor<T>,
    w_v: &ConvParams<T>,
    w_r: Option<&ConvParams<T>>,
    kernel: &AttentionKernel<T>,
) -> Result<Tensor<T>> {
    check_input(x)?;
    if !kernel.is_query_independent() {
        return Err(Error::invalid(
            "simplified_dist needs a query-independent kernel, got a pairwise one",
        ));
    }
    let c = x.channels();
    kernel.validate(c)?;
    check_pointwise(w_v, c, Some(c), "w_v")?;
    if let Some(w) = w_r {
        check_pointwise(w, c, Some(c), "w_r")?;
    }
    let mut z = shortcut(x, w_r)?;
    for b in 0..x.batch() {
        let weights = softmax_vec(&kernel.query_independent_logits(x, b)?)?;
        let pooled = pool(x, b, &weights);
        let context = w_v.apply_vector(&pooled)?;
        broadcast_add(&mut z, b, &context);
    }
    Ok(z)
}

/// Softmax attention over the pixels of sample `n`.
pub fn attention_weights<T: Scalar>(x: &Tensor<T>, n: usize, p: &PbParams<T>) -> Result<Vec<T>> {
    p.validate(x.channels())?;
    let logits = pointwise_logits(x, n, &p.w);
    check_logits(&logits)?;
    softmax_vec(&logits)
}

/// `z_i = Σ_j softmax_j(w · x + b) x_j + x_i`, independently per sample.
pub fn pixel_relation_block<T: Scalar>(x: &Tensor<T>, p: &PbParams<T>) -> Result<Tensor<T>> {
    check_input(x)?;
    p.validate(x.channels())?;
    let mut z = x.clone();
    for b in 0..x.batch() {
        let weights = attention_weights(x, b, p)?;
        let context = pool(x, b, &weights);
        broadcast_add(&mut z, b, &context);
    }
    Ok(z)
}

/// Gradients of `⟨upstream, pixel_relation_block(x)⟩`.
#[derive(Debug, Clone, PartialEq)]
pub struct PbGrads<T = f64> {
    pub grad_x: Tensor<T>,
    pub grad_w: Vec<T>,
    pub grad_b: T,
}

pub fn pb_backward<T: Scalar>(x: &Tensor<T>, p: &PbParams<T>, upstream: &Tensor<T>) -> Result<PbGrads<T>> {
    check_input(x)?;
    p.validate(x.channels())?;
    if upstream.shape() != x.shape() {
        return Err(Error::shape(format!(
            "upstream {:?} does not match output {:?}",
            upstream.shape(),
            x.shape()
        )));
    }
    let [n, c, _, _] = x.shape();
    let np = x.pixels();
    let w = p.weights();
    let mut grad_x = upstream.clone();
    let mut grad_w = vec![T::zero(); c];
    let mut grad_b = T::zero();

    for b in 0..n {
        let alpha = attention_weights(x, b, p)?;
        let context = pool(x, b, &alpha);
        // dL/dcontext: the context is broadcast to every pixel
        let g: Vec<T> = (0..c).map(|ch| upstream.plane(b, ch).iter().copied().sum()).collect();
        let g_dot_ctx = g.iter().zip(&context).fold(T::zero(), |acc, (&a, &v)| acc + a * v);
        // dL/dlogit_j = α_j (g · x_j − g · context)
        let mut g_dot_x = vec![T::zero(); np];
        for (ch, &gc) in g.iter().enumerate() {
            for (acc, &v) in g_dot_x.iter_mut().zip(x.plane(b, ch)) {
                *acc = *acc + gc * v;
            }
        }
        let d_logit: Vec<T> = alpha
            .iter()
            .zip(&g_dot_x)
            .map(|(&a, &gx)| a * (gx - g_dot_ctx))
            .collect();

        for ch in 0..c {
            let xs = x.plane(b, ch);
            let gx = grad_x.plane_mut(b, ch);
            for j in 0..np {
                gx[j] = gx[j] + alpha[j] * g[ch] + d_logit[j] * w[ch];
            }
            grad_w[ch] = grad_w[ch]
                + xs.iter()
                    .zip(&d_logit)
                    .fold(T::zero(), |acc, (&v, &d)| acc + v * d);
        }
        grad_b = grad_b + d_logit.iter().copied().sum();
    }
    Ok(PbGrads {
        grad_x,
        grad_w,
        grad_b,
    })
}

/// Pairwise max-abs differences between successive simplifications.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ChainReport {
    pub reference_vs_query_independent: f64,
    pub query_independent_vs_distributed: f64,
    pub distributed_vs_pixel_relation: f64,
    pub reference_vs_pixel_relation: f64,
}

impl ChainReport {
    pub fn max(&self) -> f64 {
        self.reference_vs_query_independent
            .max(self.query_independent_vs_distributed)
            .max(self.distributed_vs_pixel_relation)
            .max(self.reference_vs_pixel_relation)
    }

    pub fn entries(&self) -> [(&'static str, f64); 4] {
        [
            ("reference vs query-independent", self.reference_vs_query_independent),
            ("query-independent vs distributed", self.query_independent_vs_distributed),
            ("distributed vs pixel-relation", self.distributed_vs_pixel_relation),
            ("reference vs pixel-relation", self.reference_vs_pixel_relation),
        ]
    }
}

/// Runs the four operators on `x` with parameters drawn from `rng`.
///
/// Each link specialises only what the next operator drops: random
/// `W_v, W_z, W_r` for reference vs query-independent; `W_z = I` with random
/// `W_v` for the distributive step; `W_v = W_r = I` for the final block.
pub fn equivalence_chain(x: &Tensor<f64>, rng: &mut ParamRng) -> Result<ChainReport> {
    let c = x.channels();
    let pb = PbParams::random(rng, c);
    let kernel = AttentionKernel::QueryIndependent { w: pb.w.clone() };

    let general = NonLocalParams {
        w_v: rng.conv(c, c, 1, 1, 0),
        w_z: rng.conv(c, c, 1, 1, 0),
        w_r: Some(rng.conv(c, c, 1, 1, 0)),
        kernel: kernel.clone(),
    };
    let a = nonlocal_reference(x, &general)?.max_abs_diff(&simplified_qi(x, &general)?)?;

    let w_v = rng.conv(c, c, 1, 1, 0);
    let no_wz = NonLocalParams {
        w_v: w_v.clone(),
        w_z: ConvParams::identity(c),
        w_r: None,
        kernel: kernel.clone(),
    };
    let b = simplified_qi(x, &no_wz)?.max_abs_diff(&simplified_dist(x, &w_v, None, &kernel)?)?;

    let block = pixel_relation_block(x, &pb)?;
    let d = simplified_dist(x, &ConvParams::identity(c), None, &kernel)?.max_abs_diff(&block)?;

    let reduced = NonLocalParams::identity(c, kernel);
    let e = nonlocal_reference(x, &reduced)?.max_abs_diff(&block)?;

    Ok(ChainReport {
        reference_vs_query_independent: a,
        query_independent_vs_distributed: b,
        distributed_vs_pixel_relation: d,
        reference_vs_pixel_relation: e,
    })
}

/// Backbone stage names.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum Stage {
    Res2,
    Res3,
    Res4,
    Res5,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::Res2, Stage::Res3, Stage::Res4, Stage::Res5];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Res2 => "res2",
            Stage::Res3 => "res3",
            Stage::Res4 => "res4",
            Stage::Res5 => "res5",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "res2" => Ok(Stage::Res2),
            "res3" => Ok(Stage::Res3),
            "res4" => Ok(Stage::Res4),
            "res5" => Ok(Stage::Res5),
            other => Err(Error::invalid(format!(
                "unknown stage `{other}` (expected res2, res3, res4 or res5)"
            ))),
        }
    }
}

/// Parses a comma-separated stage list such as `res3,res4`. Empty input gives
/// an empty list.
pub fn parse_stages(s: &str) -> Result<Vec<Stage>> {
    let mut stages: Vec<Stage> = s
        .split(',')
        .filter(|p| !p.trim().is_empty())
        .map(Stage::from_str)
        .collect::<Result<_>>()?;
    stages.sort();
    stages.dedup();
    Ok(stages)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct StageGeometry {
    pub stage: Stage,
    pub channels: usize,
    pub units: usize,
}

/// Which backbone stages carry a pixel-relation block after every residual unit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PbPlacement {
    stages: Vec<StageGeometry>,
    enabled: Vec<Stage>,
}

impl PbPlacement {
    pub fn new(stages: Vec<StageGeometry>, enabled: &[Stage]) -> Result<Self> {
        let mut enabled = enabled.to_vec();
        enabled.sort();
        enabled.dedup();
        for s in &enabled {
            if *s == Stage::Res2 {
                return Err(Error::config(
                    "pb_stages",
                    "pixel-relation blocks can only be placed on res3, res4 or res5",
                ));
            }
            if !stages.iter().any(|g| g.stage == *s) {
                return Err(Error::config("pb_stages", format!("stage {s} is not declared")));
            }
        }
        Ok(PbPlacement { stages, enabled })
    }

    /// ResNet-50 stage geometry: 256/512/1024/2048 channels, 3/4/6/3 units.
    pub fn resnet50(enabled: &[Stage]) -> Result<Self> {
        Self::new(resnet_geometry([3, 4, 6, 3]), enabled)
    }

    /// ResNet-101 stage geometry: 3/4/23/3 units.
    pub fn resnet101(enabled: &[Stage]) -> Result<Self> {
        Self::new(resnet_geometry([3, 4, 23, 3]), enabled)
    }

    pub fn stages(&self) -> &[StageGeometry] {
        &self.stages
    }

    pub fn enabled(&self) -> &[Stage] {
        &self.enabled
    }

    pub fn is_enabled(&self, s: Stage) -> bool {
        self.enabled.contains(&s)
    }
}

fn resnet_geometry(units: [usize; 4]) -> Vec<StageGeometry> {
    Stage::ALL
        .iter()
        .zip([256, 512, 1024, 2048])
        .zip(units)
        .map(|((&stage, channels), units)| StageGeometry {
            stage,
            channels,
            units,
        })
        .collect()
}

/// Parameters added per enabled stage: `units × (channels + 1)`.
pub fn pb_param_ledger(placement: &PbPlacement) -> Vec<(Stage, u64)> {
    placement
        .stages
        .iter()
        .filter(|g| placement.is_enabled(g.stage))
        .map(|g| (g.stage, (g.units * (g.channels + 1)) as u64))
        .collect()
}

pub fn pb_param_count(placement: &PbPlacement) -> u64 {
    pb_param_ledger(placement).iter().map(|(_, n)| n).sum()
}

/// `x + relu(conv3x3(x))`, channel-preserving.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualUnit<T = f32> {
    pub conv: ConvParams<T>,
}

impl<T: Scalar> ResidualUnit<T> {
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = conv2d(x, &self.conv)?;
        if y.shape() != x.shape() {
            return Err(Error::shape(format!(
                "residual unit maps {:?} to {:?}; it must preserve shape",
                x.shape(),
                y.shape()
            )));
        }
        let data = x.data().iter().zip(y.data()).map(|(&a, &b)| a + ops::relu(b)).collect();
        Tensor::from_vec(x.shape(), data)
    }
}

/// One residual unit optionally followed by a pixel-relation block.
#[derive(Debug, Clone, PartialEq)]
pub struct PbUnit<T = f32> {
    pub residual: ResidualUnit<T>,
    pub pb: Option<PbParams<T>>,
}

pub fn pb_resnet_stage<T: Scalar>(x: &Tensor<T>, units: &[PbUnit<T>]) -> Result<Tensor<T>> {
    let mut h = x.clone();
    for u in units {
        h = u.residual.forward(&h)?;
        if let Some(pb) = &u.pb {
            h = pixel_relation_block(&h, pb)?;
        }
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_x(seed: u64, shape: [usize; 4]) -> Tensor<f64> {
        ParamRng::new(seed).tensor(shape, -2.0, 2.0)
    }

    fn spatial_mean(x: &Tensor<f64>, n: usize, c: usize) -> f64 {
        x.plane(n, c).iter().sum::<f64>() / x.pixels() as f64
    }

    #[test]
    fn constant_kernel_reference_is_mean_plus_input() {
        let x = rand_x(1, [1, 3, 4, 5]);
        let p = NonLocalParams::identity(3, AttentionKernel::ConstantOne);
        let z = nonlocal_reference(&x, &p).unwrap();
        for c in 0..3 {
            let m = spatial_mean(&x, 0, c);
            for j in 0..20 {
                assert!((z.plane(0, c)[j] - (m + x.plane(0, c)[j])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_pixel_reference_degenerates() {
        let mut rng = ParamRng::new(2);
        let x = rand_x(3, [1, 4, 1, 1]);
        let p = NonLocalParams {
            w_v: rng.conv(4, 4, 1, 1, 0),
            w_z: rng.conv(4, 4, 1, 1, 0),
            w_r: Some(rng.conv(4, 4, 1, 1, 0)),
            kernel: AttentionKernel::EmbeddedGaussianPairwise {
                theta: rng.conv(2, 4, 1, 1, 0),
                phi: rng.conv(2, 4, 1, 1, 0),
            },
        };
        let z = nonlocal_reference(&x, &p).unwrap();
        let v = p.w_v.apply_vector(&x.pixel_vector(0, 0)).unwrap();
        let zv = p.w_z.apply_vector(&v).unwrap();
        let r = p.w_r.as_ref().unwrap().apply_vector(&x.pixel_vector(0, 0)).unwrap();
        for c in 0..4 {
            assert!((z.data()[c] - (zv[c] + r[c])).abs() < 1e-12);
        }
    }

    #[test]
    fn pairwise_kernel_rejected_by_simplified_forms() {
        let mut rng = ParamRng::new(4);
        let kernel = AttentionKernel::EmbeddedGaussianPairwise {
            theta: rng.conv(2, 3, 1, 1, 0),
            phi: rng.conv(2, 3, 1, 1, 0),
        };
        let x = rand_x(5, [1, 3, 3, 3]);
        let p = NonLocalParams::identity(3, kernel.clone());
        assert!(simplified_qi(&x, &p).is_err());
        assert!(simplified_dist(&x, &ConvParams::identity(3), None, &kernel).is_err());
        assert!(nonlocal_reference(&x, &p).is_ok());
    }

    #[test]
    fn non_finite_logits_rejected() {
        let mut x = rand_x(6, [1, 2, 2, 2]);
        x.data_mut()[0] = f64::INFINITY;
        let pb = PbParams::new(vec![1.0, 1.0], 0.0).unwrap();
        let p = NonLocalParams::identity(2, AttentionKernel::QueryIndependent { w: pb.w.clone() });
        assert!(matches!(nonlocal_reference(&x, &p), Err(Error::NonFinite(_))));
        assert!(pixel_relation_block(&x, &pb).is_err());
    }

    #[test]
    fn qi_constant_input() {
        let mut rng = ParamRng::new(7);
        let x = Tensor::<f64>::full([1, 3, 4, 4], 0.7);
        let p = NonLocalParams {
            w_v: rng.conv(3, 3, 1, 1, 0),
            w_z: rng.conv(3, 3, 1, 1, 0),
            w_r: Some(rng.conv(3, 3, 1, 1, 0)),
            kernel: AttentionKernel::QueryIndependent { w: rng.conv(1, 3, 1, 1, 0) },
        };
        let z = simplified_qi(&x, &p).unwrap();
        let cvec = x.pixel_vector(0, 0);
        let expect: Vec<f64> = {
            let zv = p.w_z.apply_vector(&p.w_v.apply_vector(&cvec).unwrap()).unwrap();
            let r = p.w_r.as_ref().unwrap().apply_vector(&cvec).unwrap();
            zv.iter().zip(&r).map(|(a, b)| a + b).collect()
        };
        for c in 0..3 {
            assert!(z.plane(0, c).iter().all(|v| (v - expect[c]).abs() < 1e-12));
        }
    }

    #[test]
    fn qi_work_is_linear_reference_quadratic() {
        let kernel = AttentionKernel::QueryIndependent { w: ParamRng::new(8).conv(1, 2, 1, 1, 0) };
        let p = NonLocalParams::identity(2, kernel);
        let small = rand_x(9, [1, 2, 4, 4]);
        let large = rand_x(9, [1, 2, 4, 8]);
        let (_, qs) = simplified_qi_counted(&small, &p).unwrap();
        let (_, ql) = simplified_qi_counted(&large, &p).unwrap();
        assert_eq!(ql.weighted_terms, 2 * qs.weighted_terms);
        let (_, rs) = nonlocal_reference_counted(&small, &p).unwrap();
        let (_, rl) = nonlocal_reference_counted(&large, &p).unwrap();
        assert_eq!(rl.weighted_terms, 4 * rs.weighted_terms);
    }

    #[test]
    fn zero_logits_give_mean_plus_input() {
        let x = rand_x(10, [2, 3, 3, 4]);
        let z = pixel_relation_block(&x, &PbParams::zeros(3)).unwrap();
        for n in 0..2 {
            for c in 0..3 {
                let m = spatial_mean(&x, n, c);
                for (zv, xv) in z.plane(n, c).iter().zip(x.plane(n, c)) {
                    assert!((zv - (m + xv)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn single_pixel_block_doubles() {
        let x = rand_x(11, [1, 5, 1, 1]);
        let pb = PbParams::random(&mut ParamRng::new(12), 5);
        let z = pixel_relation_block(&x, &pb).unwrap();
        assert_eq!(z, x.scale(2.0));
    }

    #[test]
    fn batch_samples_do_not_mix() {
        let a = rand_x(13, [1, 3, 4, 4]);
        let b = rand_x(14, [1, 3, 4, 4]);
        let pb = PbParams::random(&mut ParamRng::new(15), 3);
        let joint = pixel_relation_block(&Tensor::stack(&[a.clone(), b.clone()]).unwrap(), &pb).unwrap();
        assert_eq!(joint.select_sample(0), pixel_relation_block(&a, &pb).unwrap());
        assert_eq!(joint.select_sample(1), pixel_relation_block(&b, &pb).unwrap());
    }

    #[test]
    fn zero_upstream_zero_gradients() {
        let x = rand_x(16, [1, 3, 3, 3]);
        let pb = PbParams::random(&mut ParamRng::new(17), 3);
        let g = pb_backward(&x, &pb, &Tensor::zeros(x.shape())).unwrap();
        assert!(g.grad_x.data().iter().all(|&v| v == 0.0));
        assert!(g.grad_w.iter().all(|&v| v == 0.0));
        assert_eq!(g.grad_b, 0.0);
    }

    #[test]
    fn backward_rejects_wrong_upstream() {
        let x = rand_x(18, [1, 3, 3, 3]);
        assert!(pb_backward(&x, &PbParams::zeros(3), &Tensor::zeros([1, 3, 3, 2])).is_err());
    }

    #[test]
    fn chain_is_tight() {
        let x = rand_x(19, [1, 4, 5, 5]);
        let r = equivalence_chain(&x, &mut ParamRng::new(20)).unwrap();
        assert!(r.max() < 1e-10, "{r:?}");
    }

    #[test]
    fn table_one_increments() {
        let count = |s: &[Stage]| pb_param_count(&PbPlacement::resnet50(s).unwrap());
        assert_eq!(count(&[]), 0);
        assert_eq!(count(&[Stage::Res3]), 2_052);
        assert_eq!(count(&[Stage::Res3, Stage::Res4]), 8_202);
        assert_eq!(count(&[Stage::Res3, Stage::Res4, Stage::Res5]), 14_349);
        let ledger = pb_param_ledger(&PbPlacement::resnet50(&[Stage::Res4, Stage::Res5]).unwrap());
        assert_eq!(ledger, vec![(Stage::Res4, 6_150), (Stage::Res5, 6_147)]);
    }

    #[test]
    fn stage_parsing() {
        assert_eq!(parse_stages("res4, res3,res4").unwrap(), vec![Stage::Res3, Stage::Res4]);
        assert!(parse_stages("").unwrap().is_empty());
        assert!(parse_stages("res3,res6").is_err());
        assert!(PbPlacement::resnet50(&[Stage::Res2]).is_err());
        let partial = vec![StageGeometry { stage: Stage::Res3, channels: 8, units: 1 }];
        assert!(PbPlacement::new(partial, &[Stage::Res4]).is_err());
    }

    #[test]
    fn zero_weight_stage_adds_mean_per_unit() {
        let x = rand_x(21, [1, 2, 4, 4]);
        let unit = PbUnit {
            residual: ResidualUnit { conv: ConvParams::zeros(2, 2, 3, 1, 1) },
            pb: Some(PbParams::zeros(2)),
        };
        let once = pb_resnet_stage(&x, std::slice::from_ref(&unit)).unwrap();
        let mut expect = x.clone();
        for c in 0..2 {
            let m = spatial_mean(&x, 0, c);
            expect.plane_mut(0, c).iter_mut().for_each(|v| *v += m);
        }
        assert!(once.max_abs_diff(&expect).unwrap() < 1e-12);
        let thrice = pb_resnet_stage(&x, &[unit.clone(), unit.clone(), unit]).unwrap();
        assert_eq!(thrice.shape(), x.shape());
    }

    #[test]
    fn stage_without_pb_is_plain_residual() {
        let mut rng = ParamRng::new(22);
        let x = rand_x(23, [1, 3, 4, 4]);
        let residual = ResidualUnit { conv: rng.conv(3, 3, 3, 1, 1) };
        let out = pb_resnet_stage(&x, &[PbUnit { residual: residual.clone(), pb: None }]).unwrap();
        assert_eq!(out, residual.forward(&x).unwrap());
    }

    #[test]
    fn stage_rejects_shape_changing_unit() {
        let x = rand_x(24, [1, 3, 4, 4]);
        let unit = PbUnit::<f64> {
            residual: ResidualUnit { conv: ConvParams::zeros(4, 3, 3, 1, 1) },
            pb: None,
        };
        assert!(pb_resnet_stage(&x, &[unit]).is_err());
    }
}
