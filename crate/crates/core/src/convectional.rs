//! Two-pathway feature pyramid.
//!
//! Backbone features (strides 4–32) are projected to a common width by 1x1
//! laterals. A coarse-to-fine semantic pathway and a fine-to-coarse
//! resolution pathway both start from the laterals, and a feature fusion
//! module merges the two per level. The stride-64 level is a max-pool of the
//! fused stride-32 level.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::init::ParamRng;
use crate::ops::{self, conv2d, global_avg_pool, resize, Combine, ConvParams, Resize};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const BACKBONE_STRIDES: [usize; 4] = [4, 8, 16, 32];
pub const OUTPUT_STRIDES: [usize; 5] = [4, 8, 16, 32, 64];

#[derive(Debug, Clone, PartialEq)]
pub struct Level<T = f32> {
    pub stride: usize,
    pub features: Tensor<T>,
}

impl<T: Scalar> Level<T> {
    /// `P2` for stride 4, `P3` for stride 8, ...
    pub fn name(&self) -> String {
        level_name(self.stride)
    }
}

pub fn level_name(stride: usize) -> String {
    format!("P{}", stride.trailing_zeros())
}

/// Multi-scale features ordered fine to coarse.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid<T = f32> {
    levels: Vec<Level<T>>,
}

impl<T: Scalar> FeaturePyramid<T> {
    pub fn new(levels: Vec<Level<T>>) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::shape("feature pyramid needs at least one level"));
        }
        let batch = levels[0].features.batch();
        for (k, l) in levels.iter().enumerate() {
            if !OUTPUT_STRIDES.contains(&l.stride) {
                return Err(Error::shape(format!(
                    "stride {} is not one of {OUTPUT_STRIDES:?}",
                    l.stride
                )));
            }
            if l.features.batch() != batch {
                return Err(Error::shape(format!(
                    "level {} has batch {}, expected {batch}",
                    l.name(),
                    l.features.batch()
                )));
            }
            if k > 0 {
                let prev = &levels[k - 1];
                if l.stride != prev.stride * 2 {
                    return Err(Error::shape(format!(
                        "strides must double level to level, got {} after {}",
                        l.stride, prev.stride
                    )));
                }
                let (ph, pw) = (prev.features.height(), prev.features.width());
                if (l.features.height(), l.features.width()) != (ph / 2, pw / 2) || ph % 2 != 0 || pw % 2 != 0 {
                    return Err(Error::shape(format!(
                        "level {} is {}x{}, expected half of {}x{}",
                        l.name(),
                        l.features.height(),
                        l.features.width(),
                        ph,
                        pw
                    )));
                }
            }
        }
        Ok(FeaturePyramid { levels })
    }

    pub fn levels(&self) -> &[Level<T>] {
        &self.levels
    }

    pub fn into_levels(self) -> Vec<Level<T>> {
        self.levels
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn strides(&self) -> Vec<usize> {
        self.levels.iter().map(|l| l.stride).collect()
    }

    pub fn get(&self, stride: usize) -> Option<&Tensor<T>> {
        self.levels.iter().find(|l| l.stride == stride).map(|l| &l.features)
    }

    /// Common channel count, if all levels agree.
    pub fn uniform_width(&self) -> Option<usize> {
        let c = self.levels[0].features.channels();
        self.levels.iter().all(|l| l.features.channels() == c).then_some(c)
    }

    fn require_strides(&self, expected: &[usize]) -> Result<()> {
        for s in expected {
            if self.get(*s).is_none() {
                return Err(Error::shape(format!("missing pyramid level {}", level_name(*s))));
            }
        }
        if self.strides() != expected {
            return Err(Error::shape(format!(
                "expected strides {expected:?}, got {:?}",
                self.strides()
            )));
        }
        Ok(())
    }

    fn require_uniform(&self) -> Result<usize> {
        self.uniform_width()
            .ok_or_else(|| Error::shape("pyramid levels must share one channel width"))
    }

    fn map_levels(&self, f: impl Fn(usize, &Level<T>) -> Result<Tensor<T>>) -> Result<Self> {
        let levels = self
            .levels
            .iter()
            .enumerate()
            .map(|(k, l)| {
                Ok(Level {
                    stride: l.stride,
                    features: f(k, l)?,
                })
            })
            .collect::<Result<_>>()?;
        FeaturePyramid::new(levels)
    }
}

/// Projects every level through its 1x1 lateral.
pub fn apply_laterals<T: Scalar>(backbone: &FeaturePyramid<T>, laterals: &[ConvParams<T>]) -> Result<FeaturePyramid<T>> {
    if laterals.len() != backbone.len() {
        return Err(Error::shape(format!(
            "{} laterals for {} levels",
            laterals.len(),
            backbone.len()
        )));
    }
    backbone.map_levels(|k, l| conv2d(&l.features, &laterals[k]))
}

/// Classic top-down FPN: `m_k = lateral_k + up2(m_{k+1})`, `P_k = smooth_k(m_k)`,
/// and `P6 = maxpool(P5)`.
pub fn fpn_baseline<T: Scalar>(
    backbone: &FeaturePyramid<T>,
    laterals: &[ConvParams<T>],
    smooth: &[ConvParams<T>],
) -> Result<FeaturePyramid<T>> {
    backbone.require_strides(&BACKBONE_STRIDES)?;
    if smooth.len() != BACKBONE_STRIDES.len() {
        return Err(Error::shape(format!("{} smoothing convs for 4 levels", smooth.len())));
    }
    let merged = semantic_pathway(&apply_laterals(backbone, laterals)?)?;
    let smoothed = merged.map_levels(|k, l| conv2d(&l.features, &smooth[k]))?;
    append_p6(smoothed)
}

fn append_p6<T: Scalar>(p: FeaturePyramid<T>) -> Result<FeaturePyramid<T>> {
    let mut levels = p.into_levels();
    let top = levels.last().expect("non-empty pyramid");
    let p6 = Level {
        stride: top.stride * 2,
        features: resize(&top.features, Resize::MaxPoolDown2)?,
    };
    levels.push(p6);
    FeaturePyramid::new(levels)
}

/// Coarse-to-fine accumulation: `out_k = lateral_k + up2(out_{k+1})`.
pub fn semantic_pathway<T: Scalar>(laterals: &FeaturePyramid<T>) -> Result<FeaturePyramid<T>> {
    laterals.require_uniform()?;
    let n = laterals.len();
    let mut out: Vec<Tensor<T>> = Vec::with_capacity(n);
    for k in (0..n).rev() {
        let lat = &laterals.levels[k].features;
        let acc = match out.last() {
            None => lat.clone(),
            Some(coarser) => ops::add(lat, &resize(coarser, Resize::BilinearUp2)?)?,
        };
        out.push(acc);
    }
    out.reverse();
    laterals.map_levels(|k, _| Ok(out[k].clone()))
}

/// Fine-to-coarse accumulation: `out_k = lateral_k + down_{k-1}(out_{k-1})`
/// with stride-2 3x3 convolutions.
pub fn resolution_pathway<T: Scalar>(
    laterals: &FeaturePyramid<T>,
    down_convs: &[ConvParams<T>],
) -> Result<FeaturePyramid<T>> {
    laterals.require_uniform()?;
    let n = laterals.len();
    if down_convs.len() + 1 != n {
        return Err(Error::shape(format!(
            "{} down convs for {n} levels (need {})",
            down_convs.len(),
            n.saturating_sub(1)
        )));
    }
    let mut out: Vec<Tensor<T>> = Vec::with_capacity(n);
    for k in 0..n {
        let lat = &laterals.levels[k].features;
        let acc = match out.last() {
            None => lat.clone(),
            Some(finer) => {
                if finer.height() % 2 != 0 || finer.width() % 2 != 0 {
                    return Err(Error::shape(format!(
                        "resolution pathway needs even extents, level {} is {}x{}",
                        laterals.levels[k - 1].name(),
                        finer.height(),
                        finer.width()
                    )));
                }
                ops::add(lat, &conv2d(finer, &down_convs[k - 1])?)?
            }
        };
        out.push(acc);
    }
    laterals.map_levels(|k, _| Ok(out[k].clone()))
}

/// How the two pathway outputs enter the fusion convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fusion {
    Add,
    Concat,
}

/// Squeeze-and-excitation gate: `sigmoid(fc2(relu(fc1(avgpool(t)))))`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelAttention<T = f32> {
    pub fc1: ConvParams<T>,
    pub fc2: ConvParams<T>,
    pub reduction: usize,
}

impl<T: Scalar> ChannelAttention<T> {
    pub fn new(fc1: ConvParams<T>, fc2: ConvParams<T>, reduction: usize) -> Result<Self> {
        let c = fc1.in_channels();
        check_reduction(c, reduction)?;
        let hidden = c / reduction;
        if fc1.out_channels() != hidden || fc2.in_channels() != hidden || fc2.out_channels() != c {
            return Err(Error::shape(format!(
                "channel attention layers must map {c} -> {hidden} -> {c}"
            )));
        }
        if fc1.kernel() != (1, 1) || fc2.kernel() != (1, 1) {
            return Err(Error::shape("channel attention layers must be 1x1"));
        }
        Ok(ChannelAttention { fc1, fc2, reduction })
    }

    pub fn random(rng: &mut ParamRng, c: usize, reduction: usize) -> Result<Self> {
        check_reduction(c, reduction)?;
        let hidden = c / reduction;
        Self::new(rng.conv(hidden, c, 1, 1, 0), rng.conv(c, hidden, 1, 1, 0), reduction)
    }

    pub fn zeros(c: usize, reduction: usize) -> Result<Self> {
        check_reduction(c, reduction)?;
        let hidden = c / reduction;
        Self::new(ConvParams::zeros(hidden, c, 1, 1, 0), ConvParams::zeros(c, hidden, 1, 1, 0), reduction)
    }

    /// Per-sample, per-channel gate values in (0, 1), shape `(n, c, 1, 1)`.
    pub fn gate(&self, t: &Tensor<T>) -> Result<Tensor<T>> {
        let pooled = global_avg_pool(t)?;
        let hidden = ops::activation(&conv2d(&pooled, &self.fc1)?, ops::Activation::Relu);
        Ok(ops::activation(&conv2d(&hidden, &self.fc2)?, ops::Activation::Sigmoid))
    }

    pub fn num_params(&self) -> usize {
        self.fc1.num_params() + self.fc2.num_params()
    }
}

fn check_reduction(c: usize, r: usize) -> Result<()> {
    if r == 0 || c % r != 0 || c / r == 0 {
        return Err(Error::config(
            "ffm_reduction",
            format!("reduction {r} must be positive and divide width {c}"),
        ));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct FfmParams<T = f32> {
    pub conv3x3: ConvParams<T>,
    pub attention: Option<ChannelAttention<T>>,
    pub fusion: Fusion,
}

/// Feature fusion: `s = a + b`, `t = conv3x3(s)` (or of `concat(a, b)`),
/// `out = t ⊙ gate(t) + s`.
pub fn ffm<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, p: &FfmParams<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "ffm inputs differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let s = ops::add(a, b)?;
    let t = match p.fusion {
        Fusion::Add => conv2d(&s, &p.conv3x3)?,
        Fusion::Concat => conv2d(&ops::combine(a, b, Combine::ConcatChannels)?, &p.conv3x3)?,
    };
    if t.shape() != s.shape() {
        return Err(Error::shape(format!(
            "ffm convolution maps to {:?}, shortcut is {:?}",
            t.shape(),
            s.shape()
        )));
    }
    let mut out = t;
    if let Some(att) = &p.attention {
        let g = att.gate(&out)?;
        for n in 0..out.batch() {
            for c in 0..out.channels() {
                let gv = g.get(n, c, 0, 0);
                out.plane_mut(n, c).iter_mut().for_each(|v| *v = *v * gv);
            }
        }
    }
    ops::add(&out, &s)
}

/// All learned weights of the pyramid.
#[derive(Debug, Clone, PartialEq)]
pub struct CnParams<T = f32> {
    pub laterals: Vec<ConvParams<T>>,
    pub down_convs: Vec<ConvParams<T>>,
    pub ffm: Vec<FfmParams<T>>,
    /// All levels use one channel-attention parameter set.
    pub shared_attention: bool,
}

impl<T: Scalar> CnParams<T> {
    pub fn random(rng: &mut ParamRng, cfg: &CnConfig) -> Result<Self> {
        cfg.validate()?;
        let w = cfg.width;
        let laterals = cfg.in_channels.iter().map(|&c| rng.conv(w, c, 1, 1, 0)).collect();
        let down_convs = (1..cfg.in_channels.len()).map(|_| rng.conv(w, w, 3, 2, 1)).collect();
        let conv_in = match cfg.fusion {
            Fusion::Add => w,
            Fusion::Concat => 2 * w,
        };
        let shared = if cfg.attention && cfg.shared_attention {
            Some(ChannelAttention::random(rng, w, cfg.reduction)?)
        } else {
            None
        };
        let mut ffm = Vec::with_capacity(cfg.in_channels.len());
        for _ in &cfg.in_channels {
            let conv3x3 = rng.conv(w, conv_in, 3, 1, 1);
            let attention = match (&shared, cfg.attention) {
                (Some(s), _) => Some(s.clone()),
                (None, true) => Some(ChannelAttention::random(rng, w, cfg.reduction)?),
                (None, false) => None,
            };
            ffm.push(FfmParams {
                conv3x3,
                attention,
                fusion: cfg.fusion,
            });
        }
        Ok(CnParams {
            laterals,
            down_convs,
            ffm,
            shared_attention: cfg.shared_attention,
        })
    }

    /// Every weight and bias set to zero.
    pub fn zeros(cfg: &CnConfig) -> Result<Self> {
        cfg.validate()?;
        let w = cfg.width;
        let conv_in = match cfg.fusion {
            Fusion::Add => w,
            Fusion::Concat => 2 * w,
        };
        let mut ffm = Vec::new();
        for _ in &cfg.in_channels {
            ffm.push(FfmParams {
                conv3x3: ConvParams::zeros(w, conv_in, 3, 1, 1),
                attention: if cfg.attention {
                    Some(ChannelAttention::zeros(w, cfg.reduction)?)
                } else {
                    None
                },
                fusion: cfg.fusion,
            });
        }
        Ok(CnParams {
            laterals: cfg.in_channels.iter().map(|&c| ConvParams::zeros(w, c, 1, 1, 0)).collect(),
            down_convs: (1..cfg.in_channels.len()).map(|_| ConvParams::zeros(w, w, 3, 2, 1)).collect(),
            ffm,
            shared_attention: cfg.shared_attention,
        })
    }
}

/// Laterals → both pathways → per-level fusion → CN_P2..CN_P5, then
/// CN_P6 = maxpool(CN_P5).
pub fn convectional_forward<T: Scalar>(backbone: &FeaturePyramid<T>, p: &CnParams<T>) -> Result<FeaturePyramid<T>> {
    backbone.require_strides(&BACKBONE_STRIDES)?;
    if p.ffm.len() != backbone.len() {
        return Err(Error::shape(format!("{} fusion modules for {} levels", p.ffm.len(), backbone.len())));
    }
    let lat = apply_laterals(backbone, &p.laterals)?;
    let semantic = semantic_pathway(&lat)?;
    let resolution = resolution_pathway(&lat, &p.down_convs)?;
    let fused = semantic.map_levels(|k, l| ffm(&l.features, &resolution.levels[k].features, &p.ffm[k]))?;
    append_p6(fused)
}

/// Declared shape of the pyramid, used for analytic parameter counts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CnConfig {
    /// Backbone channel count per input level, fine to coarse.
    pub in_channels: Vec<usize>,
    pub width: usize,
    pub fusion: Fusion,
    pub attention: bool,
    pub reduction: usize,
    pub shared_attention: bool,
}

impl CnConfig {
    /// ResNet-50 inputs (256/512/1024/2048), width 256, add fusion, shared
    /// attention with reduction 16.
    pub fn resnet50() -> Self {
        CnConfig {
            in_channels: vec![256, 512, 1024, 2048],
            width: 256,
            fusion: Fusion::Add,
            attention: true,
            reduction: 16,
            shared_attention: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 {
            return Err(Error::config("pyramid_width", "must be positive"));
        }
        if self.attention {
            check_reduction(self.width, self.reduction)?;
        }
        Ok(())
    }
}

/// Parameter counts per component.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct CnLedger {
    pub laterals: u64,
    pub semantic_pathway: u64,
    pub resolution_pathway: u64,
    pub ffm_convs: u64,
    pub attention: u64,
    pub total: u64,
}

pub fn cn_param_count(cfg: &CnConfig) -> CnLedger {
    let w = cfg.width as u64;
    let levels = cfg.in_channels.len() as u64;
    let laterals: u64 = cfg.in_channels.iter().map(|&c| c as u64 * w + w).sum();
    let resolution_pathway = levels.saturating_sub(1) * (w * w * 9 + w);
    let conv_in = match cfg.fusion {
        Fusion::Add => w,
        Fusion::Concat => 2 * w,
    };
    let ffm_convs = levels * (conv_in * w * 9 + w);
    let attention = if cfg.attention && levels > 0 && cfg.reduction > 0 {
        let hidden = w / cfg.reduction as u64;
        let one = 2 * w * hidden + hidden + w;
        if cfg.shared_attention {
            one
        } else {
            levels * one
        }
    } else {
        0
    };
    CnLedger {
        laterals,
        semantic_pathway: 0,
        resolution_pathway,
        ffm_convs,
        attention,
        total: laterals + resolution_pathway + ffm_convs + attention,
    }
}

/// Parameters added by switching channel attention on, everything else equal.
pub fn attention_increment(cfg: &CnConfig) -> i64 {
    let with = cn_param_count(&CnConfig {
        attention: true,
        ..cfg.clone()
    });
    let without = cn_param_count(&CnConfig {
        attention: false,
        ..cfg.clone()
    });
    with.total as i64 - without.total as i64
}
