use proptest::prelude::*;
use sunetkit::convectional::{
    convectional_forward, ffm, resolution_pathway, semantic_pathway, ChannelAttention, CnConfig, CnParams,
    FeaturePyramid, FfmParams, Fusion, Level,
};
use sunetkit::heads::{cross_entropy, decode_panoptic, panoptic_fuse, InstancePrediction};
use sunetkit::init::ParamRng;
use sunetkit::io::{decode_map, decode_tensor, encode_map, encode_tensor};
use sunetkit::ops::{conv2d, softmax_vec, ConvParams};
use sunetkit::panoptic::{CategoryTable, PanopticMap};
use sunetkit::pixel_relation::{pixel_relation_block, PbParams};
use sunetkit::Tensor;

fn tensor(seed: u64, shape: [usize; 4]) -> Tensor<f64> {
    ParamRng::new(seed).tensor(shape, -2.0, 2.0)
}

fn small_pyramid(seed: u64, width: usize, base: usize) -> FeaturePyramid<f64> {
    let mut rng = ParamRng::new(seed);
    FeaturePyramid::new(
        [4, 8, 16, 32]
            .iter()
            .enumerate()
            .map(|(k, &stride)| Level {
                stride,
                features: rng.tensor([1, width, base >> k, base >> k], -1.0, 1.0),
            })
            .collect(),
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn softmax_sums_to_one_and_ignores_shift(v in prop::collection::vec(-30.0f64..30.0, 1..20), c in -100.0f64..100.0) {
        let p = softmax_vec(&v).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
        let q = softmax_vec(&shifted).unwrap();
        for (a, b) in p.iter().zip(&q) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn pb_residual_is_spatially_uniform(seed in any::<u64>(), c in 1usize..6, h in 1usize..7, w in 1usize..7) {
        let x = tensor(seed, [1, c, h, w]);
        let p = PbParams::random(&mut ParamRng::new(seed ^ 7), c);
        let z = pixel_relation_block(&x, &p).unwrap();
        for ch in 0..c {
            let d: Vec<f64> = z.plane(0, ch).iter().zip(x.plane(0, ch)).map(|(a, b)| a - b).collect();
            let mean = d.iter().sum::<f64>() / d.len() as f64;
            let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d.len() as f64;
            prop_assert!(var < 1e-9);
        }
    }

    #[test]
    fn pb_is_permutation_equivariant(seed in any::<u64>(), c in 1usize..5, h in 1usize..6, w in 1usize..6) {
        let x = tensor(seed, [1, c, h, w]);
        let p = PbParams::random(&mut ParamRng::new(seed ^ 3), c);
        let n = h * w;
        let mut perm: Vec<usize> = (0..n).collect();
        let mut rng = ParamRng::new(seed ^ 11);
        for i in (1..n).rev() {
            perm.swap(i, rng.index(i + 1));
        }
        let permute = |t: &Tensor<f64>| {
            Tensor::from_fn(t.shape(), |_, ch, y, xx| {
                let j = perm[y * w + xx];
                t.get(0, ch, j / w, j % w)
            })
        };
        let lhs = pixel_relation_block(&permute(&x), &p).unwrap();
        let rhs = permute(&pixel_relation_block(&x, &p).unwrap());
        prop_assert!(lhs.data().iter().zip(rhs.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn ffm_with_zero_conv_is_the_shortcut(seed in any::<u64>(), c in 1usize..5, h in 1usize..6, concat in any::<bool>()) {
        let a = tensor(seed, [1, c, h, h]);
        let b = tensor(seed ^ 1, [1, c, h, h]);
        let fusion = if concat { Fusion::Concat } else { Fusion::Add };
        let conv_in = if concat { 2 * c } else { c };
        let p = FfmParams {
            conv3x3: ConvParams::zeros(c, conv_in, 3, 1, 1),
            attention: Some(ChannelAttention::random(&mut ParamRng::new(seed), c, 1).unwrap()),
            fusion,
        };
        let out = ffm(&a, &b, &p).unwrap();
        let sum = Tensor::from_vec(a.shape(), a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect()).unwrap();
        prop_assert_eq!(out, sum);
    }

    #[test]
    fn channel_count_law(seed in any::<u64>(), n_inst in 0usize..7) {
        let cats = CategoryTable::cityscapes();
        let (h, w) = (12, 10);
        let mut rng = ParamRng::new(seed);
        let semantic: Tensor<f64> = rng.tensor([1, cats.len(), h, w], -3.0, 3.0);
        let things = cats.thing_indices();
        let instances: Vec<InstancePrediction<f64>> = (0..n_inst)
            .map(|_| {
                let x0 = rng.index(w);
                let y0 = rng.index(h);
                let x1 = rng.range(x0 + 1, w);
                let y1 = rng.range(y0 + 1, h);
                let (mh, mw) = (rng.range(1, 6), rng.range(1, 6));
                InstancePrediction {
                    mask_logits: rng.tensor([1, 1, mh, mw], -5.0, 5.0),
                    bbox: [x0, y0, x1, y1],
                    class_id: cats.categories[things[rng.index(things.len())]].id,
                    score: rng.uniform(0.0, 1.0),
                }
            })
            .collect();
        let logits = panoptic_fuse(&semantic, &instances, &cats).unwrap();
        prop_assert_eq!(logits.tensor.channels(), n_inst + 11 + 1);

        // stuff channels are copied bit for bit
        for (s, &ci) in cats.stuff_indices().iter().enumerate() {
            prop_assert_eq!(logits.tensor.plane(0, n_inst + s), semantic.plane(0, ci));
        }

        // no pixel outside an instance's box decodes to that instance
        let map = decode_panoptic(&logits, &cats).unwrap();
        for (ch, &idx) in logits.instance_order.iter().enumerate() {
            let inst = &instances[idx];
            for y in 0..h {
                for x in 0..w {
                    if !inst.contains(y, x) {
                        prop_assert_ne!(map.label(y, x), (inst.class_id, ch as u32 + 1));
                    }
                }
            }
        }
    }

    #[test]
    fn cross_entropy_is_non_negative(seed in any::<u64>(), k in 1usize..8) {
        let mut rng = ParamRng::new(seed);
        let logits: Tensor<f64> = rng.tensor([1, k, 3, 4], -10.0, 10.0);
        let target: Vec<u32> = (0..12).map(|_| rng.index(k) as u32).collect();
        prop_assert!(cross_entropy(&logits, &target, u32::MAX).unwrap() >= 0.0);
        let flat = Tensor::<f64>::full([1, k, 3, 4], rng.uniform(-5.0, 5.0));
        let ce = cross_entropy(&flat, &target, u32::MAX).unwrap();
        prop_assert!((ce - (k as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn tensor_files_round_trip(seed in any::<u64>(), dims in prop::array::uniform4(1usize..5)) {
        let t: Tensor<f32> = ParamRng::new(seed).tensor(dims, -1e3, 1e3);
        let back = decode_tensor(&encode_tensor(&t).unwrap()).unwrap();
        prop_assert_eq!(back.shape(), t.shape());
        prop_assert!(back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn map_files_round_trip(seed in any::<u64>(), h in 1usize..9, w in 1usize..9) {
        let cats = CategoryTable::cityscapes();
        let mut rng = ParamRng::new(seed);
        let mut m = PanopticMap::new(h, w, cats.clone());
        for i in 0..h * w {
            let c = rng.index(cats.len() + 1);
            if c < cats.len() {
                let inst = if cats.categories[c].isthing { rng.range(1, 65535) as u32 } else { 0 };
                m.set_index(i, cats.categories[c].id, inst);
            }
        }
        prop_assert_eq!(decode_map(&encode_map(&m).unwrap(), cats).unwrap(), m);
    }

    #[test]
    fn conv_is_deterministic(seed in any::<u64>()) {
        let mut rng = ParamRng::new(seed);
        let x: Tensor<f32> = rng.tensor([1, 3, 9, 7], -1.0, 1.0);
        let p: ConvParams<f32> = rng.conv(4, 3, 3, 2, 1);
        let a = conv2d(&x, &p).unwrap();
        let b = sunetkit::par::with_threads(3, || conv2d(&x, &p).unwrap());
        prop_assert!(a.data().iter().zip(b.data()).all(|(u, v)| u.to_bits() == v.to_bits()));
    }
}

#[test]
fn forward_always_emits_five_levels() {
    for (seed, base) in [(1, 16), (2, 32), (3, 64)] {
        let cfg = CnConfig {
            in_channels: vec![3, 5, 6, 7],
            width: 8,
            fusion: if seed % 2 == 0 { Fusion::Concat } else { Fusion::Add },
            attention: true,
            reduction: 4,
            shared_attention: seed == 3,
        };
        let mut rng = ParamRng::new(seed);
        let backbone = FeaturePyramid::new(
            [4, 8, 16, 32]
                .iter()
                .zip(&cfg.in_channels)
                .enumerate()
                .map(|(k, (&stride, &c))| Level {
                    stride,
                    features: rng.tensor([1, c, base >> k, base >> k], -1.0, 1.0),
                })
                .collect(),
        )
        .unwrap();
        let p: CnParams<f64> = CnParams::random(&mut rng, &cfg).unwrap();
        let out = convectional_forward(&backbone, &p).unwrap();
        assert_eq!(out.strides(), vec![4, 8, 16, 32, 64]);
        assert_eq!(out.uniform_width(), Some(8));
        assert_eq!(out.levels()[4].features.height(), (base >> 3) / 2);
    }
}

#[test]
fn pathway_locality() {
    let zero_except = |p: &FeaturePyramid<f64>, keep: usize| {
        FeaturePyramid::new(
            p.levels()
                .iter()
                .enumerate()
                .map(|(k, l)| Level {
                    stride: l.stride,
                    features: if k == keep { l.features.clone() } else { Tensor::zeros(l.features.shape()) },
                })
                .collect(),
        )
        .unwrap()
    };
    let lat = small_pyramid(9, 4, 16);
    let mut rng = ParamRng::new(10);
    let mut down: Vec<ConvParams<f64>> = (0..3).map(|_| rng.conv(4, 4, 3, 2, 1)).collect();
    for d in &mut down {
        d.bias.iter_mut().for_each(|b| *b = 0.0);
    }
    let is_zero = |t: &Tensor<f64>| t.data().iter().all(|&v| v == 0.0);
    let is_nonzero = |t: &Tensor<f64>| t.data().iter().any(|&v| v != 0.0);

    // only the coarsest level set: fine levels are reached top-down only
    let coarse = zero_except(&lat, 3);
    let sem = semantic_pathway(&coarse).unwrap();
    let res = resolution_pathway(&coarse, &down).unwrap();
    for k in 0..3 {
        assert!(is_nonzero(&sem.levels()[k].features));
        assert!(is_zero(&res.levels()[k].features));
    }

    // only the finest level set: coarse levels are reached bottom-up only
    let fine = zero_except(&lat, 0);
    let sem = semantic_pathway(&fine).unwrap();
    let res = resolution_pathway(&fine, &down).unwrap();
    for k in 1..4 {
        assert!(is_zero(&sem.levels()[k].features));
        assert!(is_nonzero(&res.levels()[k].features));
    }
}
