//! Semantic head, panoptic fusion, decoding and losses.

use serde::{Deserialize, Serialize};

use crate::convectional::FeaturePyramid;
use crate::error::{Error, Result};
use crate::init::ParamRng;
use crate::ops::{self, bilinear_resize, conv2d, Combine, ConvParams};
use crate::panoptic::{CategoryTable, PanopticMap, MAX_ID};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Logit assigned to instance channels outside the instance's box.
pub const OUTSIDE_BOX_LOGIT: f64 = -1.0e4;

/// Target value excluded from [`cross_entropy`].
pub const IGNORE_INDEX: u32 = u32::MAX;

const HEAD_STRIDES: [usize; 4] = [4, 8, 16, 32];

/// Two 3x3 convs per level, then a 1x1 classifier over the concatenation.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticHeadParams<T = f32> {
    pub branches: Vec<[ConvParams<T>; 2]>,
    pub classifier: ConvParams<T>,
}

impl<T: Scalar> SemanticHeadParams<T> {
    pub fn random(rng: &mut ParamRng, width: usize, num_classes: usize) -> Self {
        let branches = HEAD_STRIDES
            .iter()
            .map(|_| [rng.conv(width, width, 3, 1, 1), rng.conv(width, width, 3, 1, 1)])
            .collect();
        SemanticHeadParams {
            branches,
            classifier: rng.conv(num_classes, HEAD_STRIDES.len() * width, 1, 1, 0),
        }
    }

    /// Zero weights everywhere and `bias` on the classifier.
    pub fn zeros_with_bias(width: usize, bias: Vec<T>) -> Self {
        let k = bias.len();
        let mut classifier = ConvParams::zeros(k, HEAD_STRIDES.len() * width, 1, 1, 0);
        classifier.bias = bias;
        SemanticHeadParams {
            branches: HEAD_STRIDES
                .iter()
                .map(|_| [ConvParams::zeros(width, width, 3, 1, 1), ConvParams::zeros(width, width, 3, 1, 1)])
                .collect(),
            classifier,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.classifier.out_channels()
    }

    pub fn num_params(&self) -> usize {
        self.branches
            .iter()
            .flat_map(|b| b.iter())
            .map(|c| c.num_params())
            .sum::<usize>()
            + self.classifier.num_params()
    }
}

/// Semantic logits over all classes at the stride-4 resolution.
pub fn semantic_head<T: Scalar>(cn: &FeaturePyramid<T>, p: &SemanticHeadParams<T>) -> Result<Tensor<T>> {
    if p.branches.len() != HEAD_STRIDES.len() {
        return Err(Error::shape(format!("{} head branches, need 4", p.branches.len())));
    }
    let finest = cn
        .get(4)
        .ok_or_else(|| Error::shape("semantic head: missing pyramid level P2"))?;
    let (h, w) = (finest.height(), finest.width());
    let mut merged: Option<Tensor<T>> = None;
    for (k, stride) in HEAD_STRIDES.iter().enumerate() {
        let level = cn
            .get(*stride)
            .ok_or_else(|| Error::shape(format!("semantic head: missing pyramid level P{}", k + 2)))?;
        let [c1, c2] = &p.branches[k];
        let y = ops::activation(&conv2d(level, c1)?, ops::Activation::Relu);
        let y = ops::activation(&conv2d(&y, c2)?, ops::Activation::Relu);
        let y = bilinear_resize(&y, h, w)?;
        merged = Some(match merged {
            None => y,
            Some(m) => ops::combine(&m, &y, Combine::ConcatChannels)?,
        });
    }
    conv2d(&merged.expect("four levels"), &p.classifier)
}

/// One detected object, as produced by an instance branch.
#[derive(Debug, Clone, PartialEq)]
pub struct InstancePrediction<T = f32> {
    /// `(1, 1, h, w)` logits in box-local coordinates.
    pub mask_logits: Tensor<T>,
    /// `[x0, y0, x1, y1)` in image pixels, half-open.
    pub bbox: [usize; 4],
    /// Category id; must be a thing category.
    pub class_id: u32,
    pub score: f64,
}

impl<T: Scalar> InstancePrediction<T> {
    pub fn box_height(&self) -> usize {
        self.bbox[3].saturating_sub(self.bbox[1])
    }

    pub fn box_width(&self) -> usize {
        self.bbox[2].saturating_sub(self.bbox[0])
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        let [x0, y0, x1, y1] = self.bbox;
        x >= x0 && x < x1 && y >= y0 && y < y1
    }

    pub fn validate(&self, height: usize, width: usize, categories: &CategoryTable) -> Result<()> {
        let [x0, y0, x1, y1] = self.bbox;
        if x1 <= x0 || y1 <= y0 {
            return Err(Error::invalid(format!("instance box {:?} has no area", self.bbox)));
        }
        if x1 > width || y1 > height {
            return Err(Error::invalid(format!(
                "instance box {:?} exceeds the {height}x{width} image",
                self.bbox
            )));
        }
        if !categories.is_thing_id(self.class_id) {
            return Err(Error::invalid(format!(
                "instance class {} is not a thing category",
                self.class_id
            )));
        }
        let [n, c, h, w] = self.mask_logits.shape();
        if n != 1 || c != 1 || h == 0 || w == 0 {
            return Err(Error::shape(format!(
                "mask logits must be (1, 1, h, w), got {:?}",
                self.mask_logits.shape()
            )));
        }
        if !(0.0..=1.0).contains(&self.score) {
            return Err(Error::invalid(format!("instance score {} outside [0, 1]", self.score)));
        }
        Ok(())
    }

    /// Mask logits resized to the box extent.
    pub fn box_logits(&self) -> Result<Tensor<T>> {
        bilinear_resize(&self.mask_logits, self.box_height(), self.box_width())
    }
}

/// Channels `[instances…, stuff…, unlabel]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PanopticLogits<T = f32> {
    pub tensor: Tensor<T>,
    /// Category id of each instance channel.
    pub instance_classes: Vec<u32>,
    /// Position in the caller's instance list of each instance channel.
    pub instance_order: Vec<usize>,
    /// Category id of each stuff channel.
    pub stuff_classes: Vec<u32>,
}

impl<T: Scalar> PanopticLogits<T> {
    pub fn num_instances(&self) -> usize {
        self.instance_classes.len()
    }

    pub fn unlabel_channel(&self) -> usize {
        self.instance_classes.len() + self.stuff_classes.len()
    }
}

/// Sorts by descending score; equal scores keep input order.
fn score_order<T: Scalar>(instances: &[InstancePrediction<T>]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..instances.len()).collect();
    order.sort_by(|&a, &b| instances[b].score.total_cmp(&instances[a].score));
    order
}

/// Builds panoptic logits from full-resolution semantic logits and instances.
///
/// * stuff channel k: the semantic logit of stuff class k, copied.
/// * instance channel i: resized mask logit + semantic logit of the
///   instance's class inside its box, [`OUTSIDE_BOX_LOGIT`] elsewhere.
/// * unlabel: max thing-class semantic logit minus the strongest instance
///   evidence at the pixel, where no evidence counts as 0.
pub fn panoptic_fuse<T: Scalar>(
    semantic: &Tensor<T>,
    instances: &[InstancePrediction<T>],
    categories: &CategoryTable,
) -> Result<PanopticLogits<T>> {
    let [n, k, h, w] = semantic.shape();
    if n != 1 {
        return Err(Error::shape(format!("panoptic fusion takes one image, got batch {n}")));
    }
    if k != categories.len() {
        return Err(Error::shape(format!(
            "semantic logits have {k} channels for {} categories",
            categories.len()
        )));
    }
    for inst in instances {
        inst.validate(h, w, categories)?;
    }
    if instances.len() > MAX_ID as usize {
        return Err(Error::invalid(format!("{} instances exceed the id range", instances.len())));
    }
    let order = score_order(instances);
    let stuff = categories.stuff_indices();
    let things = categories.thing_indices();
    let n_inst = order.len();
    let channels = n_inst + stuff.len() + 1;
    let mut out = Tensor::zeros([1, channels, h, w]);
    let np = h * w;
    let outside = T::from_f64(OUTSIDE_BOX_LOGIT);
    let mut evidence = vec![T::zero(); np];

    let mut instance_classes = Vec::with_capacity(n_inst);
    for (ch, &idx) in order.iter().enumerate() {
        let inst = &instances[idx];
        let class_idx = categories.index_of(inst.class_id).expect("validated");
        instance_classes.push(inst.class_id);
        let local = inst.box_logits()?;
        let sem = semantic.plane(0, class_idx);
        let [x0, y0, x1, y1] = inst.bbox;
        let bw = x1 - x0;
        let plane = out.plane_mut(0, ch);
        plane.iter_mut().for_each(|v| *v = outside);
        for y in y0..y1 {
            for x in x0..x1 {
                let i = y * w + x;
                let v = local.data()[(y - y0) * bw + (x - x0)] + sem[i];
                plane[i] = v;
                evidence[i] = evidence[i].max(v);
            }
        }
    }

    for (s, &ci) in stuff.iter().enumerate() {
        out.plane_mut(0, n_inst + s).copy_from_slice(semantic.plane(0, ci));
    }

    let unlabel = out.plane_mut(0, channels - 1);
    for i in 0..np {
        let thing_max = things
            .iter()
            .map(|&c| semantic.plane(0, c)[i])
            .fold(None, |m: Option<T>, v| Some(m.map_or(v, |m| m.max(v))))
            .unwrap_or(outside);
        unlabel[i] = thing_max - evidence[i];
    }

    Ok(PanopticLogits {
        tensor: out,
        instance_classes,
        instance_order: order,
        stuff_classes: stuff.iter().map(|&i| categories.categories[i].id).collect(),
    })
}

/// Per-pixel argmax (lowest channel wins ties). Instance channel i decodes to
/// instance id i + 1, stuff channels to instance 0, unlabel to void.
pub fn decode_panoptic<T: Scalar>(logits: &PanopticLogits<T>, categories: &CategoryTable) -> Result<PanopticMap> {
    let [n, c, h, w] = logits.tensor.shape();
    if n != 1 {
        return Err(Error::shape(format!("decode takes one image, got batch {n}")));
    }
    if c != logits.unlabel_channel() + 1 {
        return Err(Error::shape(format!(
            "{c} channels do not match {} instances + {} stuff + 1",
            logits.num_instances(),
            logits.stuff_classes.len()
        )));
    }
    let n_inst = logits.num_instances();
    let mut map = PanopticMap::new(h, w, categories.clone());
    let data = logits.tensor.data();
    let np = h * w;
    for i in 0..np {
        let mut best = 0;
        let mut best_v = data[i];
        for ch in 1..c {
            let v = data[ch * np + i];
            if v > best_v {
                best = ch;
                best_v = v;
            }
        }
        if best < n_inst {
            map.set_index(i, logits.instance_classes[best], best as u32 + 1);
        } else if best < c - 1 {
            map.set_index(i, logits.stuff_classes[best - n_inst], 0);
        } else {
            map.set_index(i, categories.void_id, 0);
        }
    }
    Ok(map)
}

/// Mean over non-ignored pixels of `-log softmax(logits)[target]`.
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, target: &[u32], ignore: u32) -> Result<f64> {
    let [n, k, h, w] = logits.shape();
    let np = h * w;
    if target.len() != n * np {
        return Err(Error::shape(format!(
            "{} targets for {n}x{h}x{w} logits",
            target.len()
        )));
    }
    let mut total = 0.0f64;
    let mut count = 0usize;
    for b in 0..n {
        let sample = logits.sample(b);
        for i in 0..np {
            let t = target[b * np + i];
            if t == ignore {
                continue;
            }
            if t as usize >= k {
                return Err(Error::invalid(format!("target {t} at pixel {i} with {k} classes")));
            }
            let max = (0..k).map(|c| sample[c * np + i].as_f64()).fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = (0..k).map(|c| (sample[c * np + i].as_f64() - max).exp()).sum();
            total += max + sum.ln() - sample[t as usize * np + i].as_f64();
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::invalid("cross entropy over zero labelled pixels"));
    }
    Ok(total / count as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_s: f64,
    pub lambda_i: f64,
    pub lambda_p: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_s: 1.5,
            lambda_i: 1.0,
            lambda_p: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("loss_weights.lambda_s", self.lambda_s),
            ("loss_weights.lambda_i", self.lambda_i),
            ("loss_weights.lambda_p", self.lambda_p),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::config(name, format!("{v} must be finite and non-negative")));
            }
        }
        Ok(())
    }
}

/// `λ_s L_semantic + λ_i L_instance + λ_p L_panoptic`.
pub fn total_loss(semantic: f64, instance: f64, panoptic: f64, w: &LossWeights) -> f64 {
    w.lambda_s * semantic + w.lambda_i * instance + w.lambda_p * panoptic
}

/// Channel-index targets from a map; void becomes [`IGNORE_INDEX`].
pub fn semantic_target(map: &PanopticMap) -> Vec<u32> {
    let cats = map.categories();
    map.semantic()
        .into_iter()
        .map(|s| cats.index_of(s).map_or(IGNORE_INDEX, |i| i as u32))
        .collect()
}

/// One-hot semantic logits (`value` at the labelled class, 0 elsewhere; void
/// pixels all 0).
pub fn one_hot_logits<T: Scalar>(map: &PanopticMap, value: T) -> Tensor<T> {
    let k = map.categories().len();
    let (h, w) = (map.height(), map.width());
    let target = semantic_target(map);
    let mut t = Tensor::zeros([1, k, h, w]);
    for (i, &c) in target.iter().enumerate() {
        if c != IGNORE_INDEX {
            t.plane_mut(0, c as usize)[i] = value;
        }
    }
    t
}

/// Panoptic-channel targets for a ground-truth map.
///
/// Each ground-truth thing segment is assigned to the same-class instance
/// channel whose positive-logit mask overlaps it with IoU > 0.5; unmatched
/// thing pixels target the unlabel channel. Void pixels are ignored.
pub fn panoptic_target<T: Scalar>(
    gt: &PanopticMap,
    logits: &PanopticLogits<T>,
    instances: &[InstancePrediction<T>],
) -> Result<Vec<u32>> {
    let (h, w) = (gt.height(), gt.width());
    let np = h * w;
    let n_inst = logits.num_instances();
    let cats = gt.categories();
    let masks: Vec<Vec<bool>> = logits
        .instance_order
        .iter()
        .map(|&idx| {
            let inst = &instances[idx];
            let local = inst.box_logits()?;
            let mut m = vec![false; np];
            let [x0, y0, x1, y1] = inst.bbox;
            for y in y0..y1 {
                for x in x0..x1 {
                    m[y * w + x] = local.data()[(y - y0) * (x1 - x0) + (x - x0)] > T::zero();
                }
            }
            Ok(m)
        })
        .collect::<Result<_>>()?;

    let mut segments: std::collections::BTreeMap<(u32, u32), Vec<usize>> = Default::default();
    for i in 0..np {
        let (s, inst) = crate::panoptic::unpack(gt.ids()[i]);
        if s != cats.void_id && cats.is_thing_id(s) {
            segments.entry((s, inst)).or_default().push(i);
        }
    }
    let mut assignment = std::collections::HashMap::new();
    for (&(s, inst), pixels) in &segments {
        let mut best: Option<(usize, f64)> = None;
        for ch in 0..n_inst {
            if logits.instance_classes[ch] != s {
                continue;
            }
            let inter = pixels.iter().filter(|&&i| masks[ch][i]).count();
            let area = masks[ch].iter().filter(|&&b| b).count();
            let union = pixels.len() + area - inter;
            let iou = if union == 0 { 0.0 } else { inter as f64 / union as f64 };
            if iou > 0.5 && best.is_none_or(|(_, b)| iou > b) {
                best = Some((ch, iou));
            }
        }
        assignment.insert((s, inst), best.map(|(ch, _)| ch));
    }

    let unlabel = logits.unlabel_channel() as u32;
    Ok((0..np)
        .map(|i| {
            let (s, inst) = crate::panoptic::unpack(gt.ids()[i]);
            if s == cats.void_id {
                IGNORE_INDEX
            } else if cats.is_thing_id(s) {
                assignment
                    .get(&(s, inst))
                    .copied()
                    .flatten()
                    .map_or(unlabel, |ch| ch as u32)
            } else {
                logits
                    .stuff_classes
                    .iter()
                    .position(|&c| c == s)
                    .map_or(IGNORE_INDEX, |p| (n_inst + p) as u32)
            }
        })
        .collect())
}
