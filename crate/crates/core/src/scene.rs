//! Synthetic panoptic scenes: horizontal stuff bands with thing shapes
//! painted on top, plus the instance predictions that describe those things
//! exactly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::InstancePrediction;
use crate::init::ParamRng;
use crate::panoptic::{CategoryTable, PanopticMap, MAX_ID};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Image extents must be multiples of this so every pyramid level exists.
pub const EXTENT_QUANTUM: usize = 64;
/// Magnitude of oracle mask logits: `+M` inside the shape, `-M` outside.
pub const ORACLE_MASK_LOGIT: f64 = 20.0;

const MIN_SHAPE: usize = 8;
const PLACEMENT_ATTEMPTS: usize = 500;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Rectangle,
    Circle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub n_things: usize,
    pub stuff_bands: usize,
    pub shapes: Vec<Shape>,
    pub categories: CategoryTable,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            height: 128,
            width: 128,
            n_things: 3,
            stuff_bands: 2,
            shapes: vec![Shape::Rectangle, Shape::Circle],
            categories: CategoryTable::cityscapes(),
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [("height", self.height), ("width", self.width)] {
            if v == 0 || v % EXTENT_QUANTUM != 0 {
                return Err(Error::config(
                    field,
                    format!("{v} is not a positive multiple of {EXTENT_QUANTUM}"),
                ));
            }
        }
        self.categories.validate()?;
        let n_stuff = self.categories.stuff_indices().len();
        if self.stuff_bands == 0 || self.stuff_bands > n_stuff || self.stuff_bands > self.height {
            return Err(Error::config(
                "stuff_bands",
                format!(
                    "{} bands requested; need 1..={} (distinct stuff classes)",
                    self.stuff_bands,
                    n_stuff.min(self.height)
                ),
            ));
        }
        if self.n_things > 0 && self.categories.thing_indices().is_empty() {
            return Err(Error::config("n_things", "no thing categories to draw from"));
        }
        if self.n_things > MAX_ID as usize {
            return Err(Error::config("n_things", format!("exceeds {MAX_ID}")));
        }
        if self.n_things > 0 && self.shapes.is_empty() {
            return Err(Error::config("shapes", "palette is empty"));
        }
        Ok(())
    }
}

/// A generated scene. Ground-truth thing `i` (instance id `i + 1`) is
/// described exactly by `instances[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene<T = f32> {
    pub image: Tensor<T>,
    pub gt: PanopticMap,
    pub instances: Vec<InstancePrediction<T>>,
}

fn inside(shape: Shape, bh: usize, bw: usize, y: usize, x: usize) -> bool {
    match shape {
        Shape::Rectangle => true,
        Shape::Circle => {
            let dy = (y as f64 + 0.5) / bh as f64 * 2.0 - 1.0;
            let dx = (x as f64 + 0.5) / bw as f64 * 2.0 - 1.0;
            dx * dx + dy * dy <= 1.0
        }
    }
}

fn overlaps(a: [usize; 4], b: [usize; 4]) -> bool {
    a[0] < b[2] && b[0] < a[2] && a[1] < b[3] && b[1] < a[3]
}

fn color(rng: &mut ParamRng) -> [f64; 3] {
    [rng.uniform(0.0, 1.0), rng.uniform(0.0, 1.0), rng.uniform(0.0, 1.0)]
}

pub fn synth_scene<T: Scalar>(cfg: &SceneConfig) -> Result<Scene<T>> {
    cfg.validate()?;
    let (h, w) = (cfg.height, cfg.width);
    let cats = &cfg.categories;
    let mut rng = ParamRng::new(cfg.seed);
    let mut gt = PanopticMap::new(h, w, cats.clone());
    let mut image = Tensor::<T>::zeros([1, 3, h, w]);
    let paint = |image: &mut Tensor<T>, y: usize, x: usize, c: [f64; 3]| {
        for (ch, v) in c.iter().enumerate() {
            image.set(0, ch, y, x, T::from_f64(*v));
        }
    };

    // distinct stuff classes, band boundaries at distinct random rows
    let mut stuff = cats.stuff_indices();
    for i in (1..stuff.len()).rev() {
        stuff.swap(i, rng.index(i + 1));
    }
    let mut cuts: Vec<usize> = Vec::new();
    while cuts.len() + 1 < cfg.stuff_bands {
        let c = rng.range(1, h - 1);
        if !cuts.contains(&c) {
            cuts.push(c);
        }
    }
    cuts.sort_unstable();
    cuts.insert(0, 0);
    cuts.push(h);
    for b in 0..cfg.stuff_bands {
        let id = cats.categories[stuff[b]].id;
        let c = color(&mut rng);
        for y in cuts[b]..cuts[b + 1] {
            for x in 0..w {
                gt.set(y, x, id, 0);
                paint(&mut image, y, x, c);
            }
        }
    }

    let things = cats.thing_indices();
    let max_side = (h.min(w) / 2).clamp(MIN_SHAPE, 64);
    let mut boxes: Vec<[usize; 4]> = Vec::new();
    let mut instances = Vec::with_capacity(cfg.n_things);
    for t in 0..cfg.n_things {
        let placed = (0..PLACEMENT_ATTEMPTS).find_map(|_| {
            let bh = rng.range(MIN_SHAPE, max_side);
            let bw = rng.range(MIN_SHAPE, max_side);
            let y0 = rng.range(0, h - bh);
            let x0 = rng.range(0, w - bw);
            let b = [x0, y0, x0 + bw, y0 + bh];
            (!boxes.iter().any(|&o| overlaps(o, b))).then_some(b)
        });
        let Some(b) = placed else {
            return Err(Error::invalid(format!(
                "could not place thing {} of {} without overlap in a {h}x{w} image",
                t + 1,
                cfg.n_things
            )));
        };
        boxes.push(b);
        let shape = cfg.shapes[rng.index(cfg.shapes.len())];
        let class_id = cats.categories[things[rng.index(things.len())]].id;
        let c = color(&mut rng);
        let [x0, y0, x1, y1] = b;
        let (bh, bw) = (y1 - y0, x1 - x0);
        let m = ORACLE_MASK_LOGIT;
        let mut mask = Tensor::<T>::full([1, 1, bh, bw], T::from_f64(-m));
        for y in 0..bh {
            for x in 0..bw {
                if inside(shape, bh, bw, y, x) {
                    mask.set(0, 0, y, x, T::from_f64(m));
                    gt.set(y0 + y, x0 + x, class_id, t as u32 + 1);
                    paint(&mut image, y0 + y, x0 + x, c);
                }
            }
        }
        instances.push(InstancePrediction {
            mask_logits: mask,
            bbox: b,
            class_id,
            score: 1.0,
        });
    }
    Ok(Scene {
        image,
        gt,
        instances,
    })
}

/// A ground-truth / prediction pair of small maps with at most
/// `max_segments` non-void segments each, for fuzzing the PQ matcher.
/// The prediction is usually a perturbation of the ground truth so that
/// both matches and near-misses occur.
pub fn random_map_pair(
    rng: &mut ParamRng,
    height: usize,
    width: usize,
    max_segments: usize,
    categories: &CategoryTable,
) -> (PanopticMap, PanopticMap) {
    let void = categories.void_id;
    let stuff = categories.stuff_indices();
    let things = categories.thing_indices();
    let ids: Vec<u32> = categories.categories.iter().map(|c| c.id).collect();
    let max_segments = max_segments.max(1);

    // (x0, y0, x1, y1, semantic, instance); the first entry covers the image
    let rect = |rng: &mut ParamRng| {
        let x0 = rng.index(width);
        let y0 = rng.index(height);
        let x1 = rng.range(x0 + 1, width.min(x0 + 1 + width / 2));
        let y1 = rng.range(y0 + 1, height.min(y0 + 1 + height / 2));
        (x0, y0, x1, y1)
    };
    let pick = |rng: &mut ParamRng, next_inst: &mut u32| -> (u32, u32) {
        let thing = !things.is_empty() && (stuff.is_empty() || rng.coin(0.6));
        if thing {
            *next_inst += 1;
            (ids[things[rng.index(things.len())]], *next_inst)
        } else if !stuff.is_empty() {
            (ids[stuff[rng.index(stuff.len())]], 0)
        } else {
            (void, 0)
        }
    };

    let mut next_inst = 0;
    let background = if rng.coin(0.2) { (void, 0) } else { pick(rng, &mut next_inst) };
    let n_rects = rng.index(max_segments);
    let mut rects = Vec::with_capacity(n_rects + 1);
    for _ in 0..n_rects {
        let (x0, y0, x1, y1) = rect(rng);
        let label = if rng.coin(0.1) { (void, 0) } else { pick(rng, &mut next_inst) };
        rects.push((x0, y0, x1, y1, label.0, label.1));
    }

    let render = |bg: (u32, u32), rects: &[(usize, usize, usize, usize, u32, u32)]| {
        let mut m = PanopticMap::new(height, width, categories.clone());
        for i in 0..height * width {
            m.set_index(i, bg.0, bg.1);
        }
        for &(x0, y0, x1, y1, s, inst) in rects {
            for y in y0..y1 {
                for x in x0..x1 {
                    m.set(y, x, s, inst);
                }
            }
        }
        m
    };
    let gt = render(background, &rects);

    let mut pred_next = next_inst;
    let pred_bg = if rng.coin(0.8) { background } else { pick(rng, &mut pred_next) };
    let pred_rects: Vec<_> = if rng.coin(0.15) {
        (0..rng.index(max_segments))
            .map(|_| {
                let (x0, y0, x1, y1) = rect(rng);
                let l = pick(rng, &mut pred_next);
                (x0, y0, x1, y1, l.0, l.1)
            })
            .collect()
    } else {
        rects
            .iter()
            .map(|&(x0, y0, x1, y1, s, inst)| {
                let jitter = |rng: &mut ParamRng, v: usize, lo: usize, hi: usize| {
                    let d = rng.range(0, 4) as isize - 2;
                    (v as isize + d).clamp(lo as isize, hi as isize) as usize
                };
                let nx0 = jitter(rng, x0, 0, width - 1);
                let ny0 = jitter(rng, y0, 0, height - 1);
                let nx1 = jitter(rng, x1, nx0 + 1, width);
                let ny1 = jitter(rng, y1, ny0 + 1, height);
                let (s, inst) = if rng.coin(0.15) { pick(rng, &mut pred_next) } else { (s, inst) };
                (nx0, ny0, nx1, ny1, s, inst)
            })
            .collect()
    };
    let pred = render(pred_bg, &pred_rects);
    (pred, gt)
}
