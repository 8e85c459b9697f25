//! End-to-end assembly: image → toy backbone with pixel-relation blocks →
//! convectional network → semantic head → panoptic fusion → decoding, with
//! losses and quality metrics when ground truth is available.

use serde::{Deserialize, Serialize};

use crate::accounting::format_millions_delta;
use crate::convectional::{
    cn_param_count, convectional_forward, CnConfig, CnLedger, CnParams, FeaturePyramid, Fusion, Level,
    BACKBONE_STRIDES,
};
use crate::error::{Error, Result};
use crate::heads::{
    cross_entropy, decode_panoptic, one_hot_logits, panoptic_fuse, panoptic_target, semantic_head, semantic_target,
    total_loss, InstancePrediction, LossWeights, SemanticHeadParams, IGNORE_INDEX,
};
use crate::init::ParamRng;
use crate::metrics::{evaluate_maps, miou, panoptic_quality, PqReport};
use crate::ops::{activation, bilinear_resize, conv2d, Activation, ConvParams};
use crate::panoptic::{CategoryTable, PanopticMap};
use crate::pixel_relation::{
    parse_stages, pb_param_count, pb_param_ledger, pb_resnet_stage, PbParams, PbPlacement, PbUnit, ResidualUnit,
    Stage,
};
use crate::scalar::Scalar;
use crate::scene::{EXTENT_QUANTUM, ORACLE_MASK_LOGIT};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl std::str::FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(Error::config("precision", format!("`{other}` is not f32 or f64"))),
        }
    }
}

/// Runtime configuration. Backbone widths are a 4x reduction of ResNet-50's
/// so that a forward pass takes well under a second; parameter ledgers are
/// always reported at full ResNet-50 widths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub stem_width: usize,
    pub stage_widths: [usize; 4],
    pub stage_units: [usize; 4],
    /// Comma-separated stages carrying pixel-relation blocks, e.g. `res3,res4`.
    pub pb_stages: String,
    pub pyramid_width: usize,
    pub fusion: Fusion,
    pub ffm_reduction: usize,
    pub shared_attention: bool,
    pub loss_weights: LossWeights,
    pub seed: u64,
    pub precision: Precision,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            stem_width: 32,
            stage_widths: [64, 128, 256, 512],
            stage_units: [3, 4, 6, 3],
            pb_stages: "res3,res4".into(),
            pyramid_width: 64,
            fusion: Fusion::Add,
            ffm_reduction: 16,
            shared_attention: true,
            loss_weights: LossWeights::default(),
            seed: 0,
            precision: Precision::F32,
        }
    }
}

impl PipelineConfig {
    pub fn stages(&self) -> Result<Vec<Stage>> {
        parse_stages(&self.pb_stages).map_err(|e| Error::config("pb_stages", e.to_string()))
    }

    fn cn_config(&self) -> CnConfig {
        CnConfig {
            in_channels: self.stage_widths.to_vec(),
            width: self.pyramid_width,
            fusion: self.fusion,
            attention: true,
            reduction: self.ffm_reduction,
            shared_attention: self.shared_attention,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stem_width == 0 {
            return Err(Error::config("stem_width", "must be positive"));
        }
        if let Some(k) = self.stage_widths.iter().position(|&w| w == 0) {
            return Err(Error::config("stage_widths", format!("entry {k} is zero")));
        }
        if let Some(k) = self.stage_units.iter().position(|&u| u == 0) {
            return Err(Error::config("stage_units", format!("entry {k} is zero")));
        }
        PbPlacement::resnet50(&self.stages()?)?;
        self.cn_config().validate()?;
        self.loss_weights.validate()
    }
}

/// Randomly initialised toy network.
#[derive(Debug, Clone)]
pub struct Network<T = f32> {
    pub stem: [ConvParams<T>; 2],
    /// Stride-2 transition into each stage after the first.
    pub transitions: Vec<ConvParams<T>>,
    pub stages: Vec<Vec<PbUnit<T>>>,
    pub cn: CnParams<T>,
    pub head: SemanticHeadParams<T>,
}

impl<T: Scalar> Network<T> {
    pub fn random(cfg: &PipelineConfig, num_classes: usize) -> Result<Self> {
        cfg.validate()?;
        let enabled = cfg.stages()?;
        let mut rng = ParamRng::new(cfg.seed);
        let w = cfg.stage_widths;
        let stem = [rng.conv_same(cfg.stem_width, 3, 3, 2), rng.conv_same(w[0], cfg.stem_width, 3, 2)];
        let transitions = (1..4).map(|s| rng.conv_same(w[s], w[s - 1], 3, 2)).collect();
        let stages = Stage::ALL
            .iter()
            .map(|&stage| {
                let c = w[stage.index()];
                (0..cfg.stage_units[stage.index()])
                    .map(|_| PbUnit {
                        residual: ResidualUnit {
                            conv: rng.conv_same(c, c, 3, 1),
                        },
                        pb: enabled.contains(&stage).then(|| PbParams::random(&mut rng, c)),
                    })
                    .collect()
            })
            .collect();
        let cn = CnParams::random(&mut rng, &cfg.cn_config())?;
        let head = SemanticHeadParams::random(&mut rng, cfg.pyramid_width, num_classes);
        Ok(Network {
            stem,
            transitions,
            stages,
            cn,
            head,
        })
    }

    pub fn num_params(&self) -> usize {
        let convs = self.stem.iter().chain(&self.transitions).map(|c| c.num_params()).sum::<usize>();
        let units: usize = self
            .stages
            .iter()
            .flatten()
            .map(|u| u.residual.conv.num_params() + u.pb.as_ref().map_or(0, |p| p.num_params()))
            .sum();
        convs + units
    }

    /// Backbone outputs at strides 4, 8, 16, 32.
    pub fn backbone(&self, image: &Tensor<T>) -> Result<FeaturePyramid<T>> {
        let mut h = activation(&conv2d(image, &self.stem[0])?, Activation::Relu);
        h = activation(&conv2d(&h, &self.stem[1])?, Activation::Relu);
        let mut levels = Vec::with_capacity(4);
        for (s, units) in self.stages.iter().enumerate() {
            if s > 0 {
                h = activation(&conv2d(&h, &self.transitions[s - 1])?, Activation::Relu);
            }
            h = pb_resnet_stage(&h, units)?;
            levels.push(Level {
                stride: BACKBONE_STRIDES[s],
                features: h.clone(),
            });
        }
        FeaturePyramid::new(levels)
    }
}

/// Instance source for [`run_pipeline`].
#[derive(Debug, Clone, Copy)]
pub enum Mode<'a, T> {
    /// Network semantic logits with the given instances.
    Predicted(&'a [InstancePrediction<T>]),
    /// Semantic logits are one-hot ground truth; instances are the scene's
    /// exact ones. Requires ground truth.
    Oracle(&'a [InstancePrediction<T>]),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ShapeEntry {
    pub name: String,
    pub shape: [usize; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageCount {
    pub stage: String,
    pub params: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParamLedger {
    /// Pixel-relation parameters at ResNet-50 geometry, per enabled stage.
    pub pb_resnet50: Vec<StageCount>,
    pub pb_total: u64,
    pub pb_millions: String,
    /// Convectional network at ResNet-50 input widths and pyramid width 256.
    pub cn_resnet50: CnLedger,
    /// Parameters actually instantiated in the toy network.
    pub toy_backbone: usize,
    pub toy_head: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Losses {
    pub semantic: f64,
    pub instance: f64,
    pub panoptic: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Quality {
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
    pub miou: f64,
    pub detail: PqReport,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PipelineReport {
    pub mode: &'static str,
    pub precision: Precision,
    pub shapes: Vec<ShapeEntry>,
    pub panoptic_channels: usize,
    pub ledger: ParamLedger,
    pub losses: Option<Losses>,
    pub quality: Option<Quality>,
}

pub fn param_ledger(cfg: &PipelineConfig) -> Result<ParamLedger> {
    let placement = PbPlacement::resnet50(&cfg.stages()?)?;
    let pb_resnet50: Vec<StageCount> = pb_param_ledger(&placement)
        .into_iter()
        .map(|(s, n)| StageCount {
            stage: s.name().into(),
            params: n,
        })
        .collect();
    let pb_total = pb_param_count(&placement);
    let cn_resnet50 = cn_param_count(&CnConfig {
        fusion: cfg.fusion,
        reduction: cfg.ffm_reduction,
        shared_attention: cfg.shared_attention,
        ..CnConfig::resnet50()
    });
    Ok(ParamLedger {
        pb_resnet50,
        pb_total,
        pb_millions: format_millions_delta(pb_total as i64),
        cn_resnet50,
        toy_backbone: 0,
        toy_head: 0,
    })
}

/// Runs one image through the network and fusion.
///
/// With ground truth, the report also carries the weighted loss and
/// PQ/SQ/RQ/mIoU of the decoded map.
pub fn run_pipeline<T: Scalar>(
    cfg: &PipelineConfig,
    categories: &CategoryTable,
    image: &Tensor<T>,
    mode: Mode<'_, T>,
    gt: Option<&PanopticMap>,
) -> Result<(PanopticMap, PipelineReport)> {
    cfg.validate()?;
    let [n, c, h, w] = image.shape();
    if n != 1 || c != 3 {
        return Err(Error::shape(format!("expected a (1, 3, H, W) image, got {:?}", image.shape())));
    }
    if h == 0 || w == 0 || h % EXTENT_QUANTUM != 0 || w % EXTENT_QUANTUM != 0 {
        return Err(Error::shape(format!(
            "image extents {h}x{w} must be positive multiples of {EXTENT_QUANTUM}"
        )));
    }
    if let Some(gt) = gt {
        if (gt.height(), gt.width()) != (h, w) {
            return Err(Error::shape("ground truth extents differ from the image"));
        }
        if gt.categories() != categories {
            return Err(Error::invalid("ground truth uses a different category table"));
        }
    }

    let net = Network::<T>::random(cfg, categories.len())?;
    let mut shapes = vec![ShapeEntry {
        name: "image".into(),
        shape: image.shape(),
    }];
    let backbone = net.backbone(image)?;
    for (l, stage) in backbone.levels().iter().zip(Stage::ALL) {
        shapes.push(ShapeEntry {
            name: stage.name().into(),
            shape: l.features.shape(),
        });
    }
    let pyramid = convectional_forward(&backbone, &net.cn)?;
    for l in pyramid.levels() {
        shapes.push(ShapeEntry {
            name: l.name(),
            shape: l.features.shape(),
        });
    }
    let coarse = semantic_head(&pyramid, &net.head)?;
    let network_logits = bilinear_resize(&coarse, h, w)?;
    shapes.push(ShapeEntry {
        name: "semantic_logits".into(),
        shape: network_logits.shape(),
    });

    let (mode_name, semantic, instances) = match mode {
        Mode::Predicted(inst) => ("predicted", network_logits, inst),
        Mode::Oracle(inst) => {
            let gt = gt.ok_or_else(|| Error::invalid("oracle mode needs ground truth"))?;
            ("oracle", one_hot_logits(gt, T::from_f64(ORACLE_MASK_LOGIT)), inst)
        }
    };
    let logits = panoptic_fuse(&semantic, instances, categories)?;
    let map = decode_panoptic(&logits, categories)?;
    shapes.push(ShapeEntry {
        name: "panoptic_logits".into(),
        shape: logits.tensor.shape(),
    });

    let mut ledger = param_ledger(cfg)?;
    ledger.toy_backbone = net.num_params();
    ledger.toy_head = net.head.num_params();

    let (losses, quality) = match gt {
        None => (None, None),
        Some(gt) => {
            let sem_t = semantic_target(gt);
            let semantic_loss = cross_entropy(&semantic, &sem_t, IGNORE_INDEX)?;
            let pan_t = panoptic_target(gt, &logits, instances)?;
            let panoptic_loss = cross_entropy(&logits.tensor, &pan_t, IGNORE_INDEX)?;
            let instance_loss = 0.0;
            let losses = Losses {
                semantic: semantic_loss,
                instance: instance_loss,
                panoptic: panoptic_loss,
                total: total_loss(semantic_loss, instance_loss, panoptic_loss, &cfg.loss_weights),
            };
            let detail = panoptic_quality(&evaluate_maps(&map, gt)?);
            let miou = miou(&map.semantic(), &gt.semantic(), categories.void_id)?;
            let quality = Quality {
                pq: detail.all.pq,
                sq: detail.all.sq,
                rq: detail.all.rq,
                miou,
                detail,
            };
            (Some(losses), Some(quality))
        }
    };

    let report = PipelineReport {
        mode: mode_name,
        precision: if T::NAME == "f64" { Precision::F64 } else { Precision::F32 },
        shapes,
        panoptic_channels: logits.tensor.channels(),
        ledger,
        losses,
        quality,
    };
    Ok((map, report))
}
