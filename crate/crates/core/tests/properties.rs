mod common;

use std::path::PathBuf;

use common::{max_abs_diff, random_batch};
use edgeq::data::{augment, preprocess, stratified_split, AugmentConfig, DatasetIndex, LabeledImages, SplitRounding};
use edgeq::graph_opt::{optimize, optimize_graph};
use edgeq::model::builders::{random_classifier, randomize_statistics};
use edgeq::model::{tmf, Checkpoint, DenseNetConfig, MobileNetV2Config, TmfModel};
use edgeq::quant::affine::{activation_params, dequantize_with, quantize_with, representable_range};
use edgeq::quant::{calibrate, quantize_f16};
use edgeq::runtime::kernels::softmax_t;
use edgeq::runtime::{Activation, Session};
use edgeq::train::{cross_entropy, kd_loss, KdConfig};
use image::{DynamicImage, RgbImage};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn tmf_round_trip(seed in any::<u64>()) {
        let g = random_classifier(seed);
        let graph = TmfModel::Graph(g.clone());
        prop_assert_eq!(tmf::parse(&tmf::serialize(&graph).unwrap()).unwrap(), graph);
        let ckpt = TmfModel::Checkpoint(Checkpoint::with_adam_slots(g, seed));
        prop_assert_eq!(tmf::parse(&tmf::serialize(&ckpt).unwrap()).unwrap(), ckpt);
    }

    #[test]
    fn param_count_is_sum_over_nodes(seed in any::<u64>()) {
        let g = random_classifier(seed);
        let per_node: usize = g
            .nodes
            .iter()
            .flat_map(|n| n.op.weight_refs())
            .map(|(t, _)| g.tensors[t].numel())
            .sum();
        let pc = g.param_count();
        prop_assert_eq!(pc.total, per_node);
        prop_assert_eq!(pc.total, pc.trainable + pc.non_trainable);
    }

    #[test]
    fn dense_block_channel_law(blocks in prop::collection::vec(1usize..4, 1..4), growth in 1usize..6) {
        let cfg = DenseNetConfig { input_size: 8, blocks: blocks.clone(), growth, compression: 0.5 };
        let g = cfg.build(3, 0).unwrap();
        let shapes = g.infer_shapes().unwrap();
        for (b, layers) in blocks.iter().enumerate() {
            let out = g.nodes.iter().position(|n| n.name == format!("block{b}/out")).unwrap();
            let first = g.nodes.iter().position(|n| n.name == format!("block{b}/layer0/bn")).unwrap();
            let c_in = *shapes[g.nodes[first].inputs[0]].last().unwrap();
            prop_assert_eq!(*shapes[out].last().unwrap(), c_in + growth * layers);
        }
    }

    #[test]
    fn optimize_preserves_logits_and_never_grows(seed in any::<u64>()) {
        let mut g = random_classifier(seed);
        randomize_statistics(&mut g, &mut ChaCha8Rng::seed_from_u64(seed));
        let opt = optimize(&Checkpoint::new(g.clone(), seed));
        prop_assert!(opt.nodes.len() <= g.nodes.len());
        prop_assert_eq!(optimize_graph(&opt), opt.clone());
        let batch = random_batch(g.input_shape, 16, seed);
        let run = |g| Session::auto(g).unwrap().run(&batch).unwrap().logits.data;
        prop_assert!(max_abs_diff(&run(&g), &run(&opt)) <= 1e-4);
    }

    #[test]
    fn int8_round_trip_within_half_step(lo in -50.0f32..1.0, width in 1e-3f32..100.0, t in 0.0f32..=1.0) {
        let qp = activation_params(lo, lo + width);
        let (s, z) = (qp.scale(), qp.zero_point());
        let (a, b) = representable_range(&qp);
        let r = a + (b - a) * t;
        let err = (dequantize_with(quantize_with(r, s, z), s, z) as f64 - r as f64).abs();
        prop_assert!(err <= s as f64 / 2.0, "{} > {}", err, s / 2.0);
    }

    #[test]
    fn stratified_split_partitions(counts in prop::collection::vec(2usize..40, 2..5), fraction in 0.05f64..0.95, seed in any::<u64>()) {
        let entries: Vec<(PathBuf, usize)> = counts
            .iter()
            .enumerate()
            .flat_map(|(c, &n)| (0..n).map(move |i| (PathBuf::from(format!("{c}/{i}.png")), c)))
            .collect();
        let index = DatasetIndex { class_names: (0..counts.len()).map(|c| c.to_string()).collect(), entries };
        let (train, val) = stratified_split(&index, fraction, seed, SplitRounding::Floor).unwrap();
        let mut all: Vec<_> = train.entries.iter().chain(&val.entries).cloned().collect();
        all.sort();
        let mut want = index.entries.clone();
        want.sort();
        prop_assert_eq!(all, want);
        for (c, (&n, &v)) in counts.iter().zip(&val.counts()).enumerate() {
            prop_assert!((v as f64 - n as f64 * fraction).abs() <= 1.0, "class {}: {} of {}", c, v, n);
        }
    }

    #[test]
    fn preprocess_and_augment_stay_in_unit_range(w in 1u32..40, h in 1u32..40, size in 1usize..24, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = RgbImage::from_fn(w, h, |_, _| image::Rgb([rng.gen(), rng.gen(), rng.gen()]));
        let x = preprocess(&DynamicImage::ImageRgb8(img), size);
        prop_assert_eq!(x.len(), size * size * 3);
        prop_assert!(x.iter().all(|v| (0.0..=1.0).contains(v)));
        let y = augment(&x, [size, size, 3], &AugmentConfig::default(), &mut rng);
        prop_assert!(y.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn softmax_rows_sum_to_one(v in prop::collection::vec(-30.0f32..30.0, 12), t in 0.1f32..10.0) {
        let p = softmax_t(&Activation::new(vec![3, 4], v), t).unwrap();
        for row in p.data.chunks(4) {
            prop_assert!((row.iter().sum::<f32>() - 1.0).abs() <= 1e-5);
        }
    }

    #[test]
    fn kd_loss_is_nonnegative_and_zero_only_at_match(
        zs in prop::collection::vec(-4.0f64..4.0, 8),
        zt in prop::collection::vec(-4.0f64..4.0, 8),
        t in 0.5f64..8.0,
    ) {
        let (s, te) = (Activation::new(vec![2, 4], zs), Activation::new(vec![2, 4], zt));
        let soft_only = KdConfig { temperature: t, alpha: 0.0 };
        let (l, _) = kd_loss(&s, &te, &[0, 1], &soft_only).unwrap();
        prop_assert!(l >= 0.0);
        prop_assert_eq!(kd_loss(&s, &s, &[0, 1], &soft_only).unwrap().0, 0.0);
        let (ce, _) = cross_entropy(&s, &[0, 1]).unwrap();
        let mixed = kd_loss(&s, &te, &[0, 1], &KdConfig { temperature: t, alpha: 0.5 }).unwrap().0;
        prop_assert!(mixed >= 0.5 * ce - 1e-12);
    }

    #[test]
    fn calibration_is_deterministic(seed in any::<u64>()) {
        let g = optimize_graph(&random_classifier(seed));
        let batches = || (0..3).map(|i| random_batch(g.input_shape, 4, seed ^ i)).collect::<Vec<_>>();
        prop_assert_eq!(calibrate(&g, batches(), 10).unwrap(), calibrate(&g, batches(), 10).unwrap());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn adam_checkpoint_to_f16_more_than_halves(width in 0.25f32..1.5, seed in any::<u64>()) {
        let g = MobileNetV2Config { width, ..MobileNetV2Config::desk(32) }.build(4, seed).unwrap();
        let ckpt = Checkpoint::with_adam_slots(g, seed);
        let before = tmf::serialize_checkpoint(&ckpt).unwrap().len();
        let after = tmf::serialize_graph(&quantize_f16(&ckpt).unwrap()).unwrap().len();
        prop_assert!(before as f64 / after as f64 > 2.0, "{} / {}", before, after);
    }
}

#[test]
fn evaluation_batches_are_pure_preprocess_output() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let images: Vec<Vec<f32>> = (0..5).map(|_| (0..48).map(|_| rng.gen()).collect()).collect();
    let set = LabeledImages { shape: [4, 4, 3], images: images.clone(), labels: vec![0, 1, 0, 1, 1], class_names: vec!["a".into(), "b".into()] };
    let seen: Vec<f32> = set.eval_batches(2).flat_map(|(x, _)| x.data).collect();
    assert_eq!(seen, images.concat());
}
