mod common;

use std::sync::Arc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use upfusion::autodiff::ChannelIndex;
use upfusion::gam::Gam;
use upfusion::io::{decode_nfi, decode_pnm, encode_nfi, encode_pnm, to_u8};
use upfusion::metrics::MetricValues;
use upfusion::nn::Init;
use upfusion::providers::EmbeddingTable;
use upfusion::selection::{keep_count, top_k};
use upfusion::training::{cosine_lr, grad_loss, l1_loss, Adam, AdamConfig};
use upfusion::{FuseContext, FusionConfig, FusionModel, ParamStore, Providers, RunConfig, Shape, Tape, Tensor};

fn random_tensor(shape: Shape, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..shape.numel()).map(|_| rng.gen_range(-2.0..2.0)).collect();
    Tensor::new(shape, data).unwrap()
}

fn bits(t: &Tensor<f32>) -> Vec<u32> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn split_after_concat_is_exact(c1 in 1usize..6, c2 in 1usize..6, n in 1usize..3, side in 1usize..5, seed: u64) {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(random_tensor(Shape::new(n, c1, side, side), seed));
        let b = tape.constant(random_tensor(Shape::new(n, c2, side, side), seed ^ 1));
        let cat = tape.concat(&[a, b]).unwrap();
        let (x, y) = tape.split(cat, c1).unwrap();
        prop_assert_eq!(bits(tape.value(x)), bits(tape.value(a)));
        prop_assert_eq!(bits(tape.value(y)), bits(tape.value(b)));
        let identity = Arc::new(ChannelIndex::shared((0..c1).collect()));
        let g = tape.gather(a, identity).unwrap();
        prop_assert_eq!(bits(tape.value(g)), bits(tape.value(a)));
    }

    #[test]
    fn gather_backward_conserves_gradient_mass(c in 1usize..8, picks in prop::collection::vec(0usize..8, 1..12), seed: u64) {
        let list: Vec<usize> = picks.into_iter().map(|p| p % c).collect();
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(random_tensor(Shape::new(1, c, 2, 3), seed).cast(), true);
        let g = tape.gather(x, Arc::new(ChannelIndex::shared(list.clone()))).unwrap();
        let seed_grad = random_tensor(tape.shape(g), seed ^ 7).cast::<f64>();
        let grads = tape.backward_from(g, seed_grad.clone()).unwrap();
        let dx = grads.get(x).unwrap();
        prop_assert!((dx.sum() - seed_grad.sum()).abs() < 1e-9);
        for ch in 0..c {
            let want: f64 = list
                .iter()
                .enumerate()
                .filter(|(_, &src)| src == ch)
                .map(|(slot, _)| seed_grad.plane(0, slot).iter().sum::<f64>())
                .sum();
            prop_assert!((dx.plane(0, ch).iter().sum::<f64>() - want).abs() < 1e-9);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..6, cols in 1usize..20, seed: u64) {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(random_tensor(Shape::new(1, 1, rows, cols), seed).map(|v| v * 20.0));
        let s = tape.softmax(x).unwrap();
        for row in tape.value(s).data().chunks(cols) {
            prop_assert!((row.iter().sum::<f32>() - 1.0).abs() <= 1e-5);
            prop_assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn top_k_is_invariant_to_positive_scaling(w in prop::collection::vec(-8i32..8, 4..64), ratio in 0.05f64..1.0, exp in -10i32..10) {
        let w: Vec<f32> = w.into_iter().map(|v| v as f32 * 0.25).collect();
        let k = keep_count(w.len(), ratio).unwrap();
        let scaled: Vec<f32> = w.iter().map(|v| v * 2f32.powi(exp)).collect();
        prop_assert_eq!(top_k(&w, k), top_k(&scaled, k));
        prop_assert_eq!(k, ((ratio * w.len() as f64 - 1e-9).ceil() as usize).clamp(1, w.len()));
    }

    #[test]
    fn affine_modulation_ignores_spatial_order_of_the_source(seed: u64, shift in 1usize..15) {
        let mut store = ParamStore::new();
        let gam = Gam::new(&mut Init::new(&mut store, seed), "gam", 4).unwrap();
        // Give the zero-initialised head some weight so γ and β are non-trivial.
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            for (i, v) in store.value_mut(id).iter_mut().enumerate() {
                *v += ((i * 37 % 11) as f32 - 5.0) * 0.05;
            }
        }
        let fuse = random_tensor(Shape::new(1, 4, 4, 4), seed ^ 3);
        let src = random_tensor(Shape::new(1, 4, 4, 4), seed ^ 5);
        let rolled = Tensor::from_fn(src.shape(), |n, c, y, x| {
            let i = (y * 4 + x + shift) % 16;
            src.at(n, c, i / 4, i % 4)
        });
        let run = |s: &Tensor<f32>| {
            let mut tape = Tape::with_params(&store);
            let f = tape.constant(fuse.clone());
            let s = tape.constant(s.clone());
            let out = gam.forward(&mut tape, f, s).unwrap();
            tape.value(out).clone()
        };
        prop_assert!(run(&src).max_abs_diff(&run(&rolled)).unwrap() < 1e-5);
    }

    #[test]
    fn losses_are_non_negative_and_swap_invariant(seed: u64) {
        let shape = Shape::new(1, 1, 8, 8);
        let unit = |s| random_tensor(shape, s).map(|v| (v + 2.0) / 4.0).cast::<f64>();
        let (f, a, b) = (unit(seed), unit(seed ^ 1), unit(seed ^ 2));
        let eval = |a: &Tensor<f64>, b: &Tensor<f64>| {
            let mut tape = Tape::<f64>::new();
            let (fv, av, bv) = (tape.constant(f.clone()), tape.constant(a.clone()), tape.constant(b.clone()));
            let g = grad_loss(&mut tape, fv, av, bv).unwrap();
            let l = l1_loss(&mut tape, fv, av, bv).unwrap();
            (tape.value(g).item().unwrap(), tape.value(l).item().unwrap())
        };
        let (g, l) = eval(&a, &b);
        prop_assert!(g >= 0.0 && l >= 0.0);
        prop_assert_eq!((g, l), eval(&b, &a));
    }

    #[test]
    fn cosine_schedule_is_monotone(total in 1usize..500, lr0 in 1e-6f64..1e-2, frac in 0.0f64..1.0) {
        let lr_end = lr0 * frac;
        let mut prev = f64::INFINITY;
        for t in 0..=total {
            let lr = cosine_lr(t, total, lr0, lr_end).unwrap();
            prop_assert!(lr <= prev && lr >= lr_end && lr <= lr0);
            prev = lr;
        }
        prop_assert_eq!(cosine_lr(0, total, lr0, lr_end).unwrap(), lr0);
        prop_assert_eq!(cosine_lr(total, total, lr0, lr_end).unwrap(), lr_end);
    }

    #[test]
    fn adam_with_zero_gradients_is_a_fixed_point(seed: u64, steps in 1usize..5, lr in 1e-5f64..1e-1) {
        let mut store = ParamStore::new();
        store.add("w", random_tensor(Shape::new(1, 3, 2, 2), seed)).unwrap();
        store.add("b", random_tensor(Shape::new(1, 3, 1, 1), seed ^ 1)).unwrap();
        let before: Vec<_> = store.iter().map(|(_, p)| bits(p.value())).collect();
        let mut adam = Adam::new(&store, AdamConfig::default());
        for _ in 0..steps {
            adam.step(&mut store, lr).unwrap();
        }
        let after: Vec<_> = store.iter().map(|(_, p)| bits(p.value())).collect();
        prop_assert_eq!(before, after);
    }

    #[test]
    fn embedding_files_round_trip(entries in prop::collection::btree_map("[a-z0-9_]{1,12}", prop::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), 3), 0..6)) {
        let mut table = EmbeddingTable::new(3);
        for (k, v) in &entries {
            table.insert(k.clone(), v).unwrap();
        }
        let back = EmbeddingTable::from_bytes(&table.to_bytes()).unwrap();
        prop_assert_eq!(back.keys(), table.keys());
        for (k, v) in &entries {
            let got: Vec<u32> = back.lookup(k).unwrap().iter().map(|x| x.to_bits()).collect();
            prop_assert_eq!(got, v.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
        }
    }

    #[test]
    fn image_codecs_round_trip(h in 1usize..9, w in 1usize..9, c in prop::sample::select(vec![1usize, 3]), seed: u64) {
        let img = random_tensor(Shape::new(1, c, h, w), seed);
        prop_assert_eq!(bits(&decode_nfi(&encode_nfi(&img).unwrap()).unwrap()), bits(&img));
        let levels = img.map(|v| to_u8((v + 2.0) / 4.0) as f32 / 255.0);
        let back = decode_pnm(&encode_pnm(&levels).unwrap()).unwrap();
        prop_assert_eq!(bits(&back), bits(&levels));
    }

    #[test]
    fn unknown_config_keys_are_rejected(key in "[a-z]{3,10}") {
        prop_assume!(RunConfig::default().to_text().lines().all(|l| !l.starts_with(&format!("{key} "))));
        prop_assume!(RunConfig::default().to_text().lines().all(|l| !l.starts_with(&format!("{key}="))));
        prop_assert!(RunConfig::default().set(&key, "1").is_err());
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn metrics_are_symmetric_and_bounded(seed: u64, h in 32usize..48, w in 32usize..48) {
        let (a, b, f) = (common::textured(h, w, seed), common::noise(h, w, seed ^ 1), common::textured(h, w, seed ^ 2));
        let x = MetricValues::compute(&a, &b, &f).unwrap();
        let y = MetricValues::compute(&b, &a, &f).unwrap();
        for (p, q) in x.as_array().iter().zip(y.as_array()) {
            prop_assert!((p - q).abs() <= 1e-12);
            prop_assert!(p.is_finite());
        }
        let eps = 1e-9;
        prop_assert!((-eps..=1.0 + eps).contains(&x.q_ncie));
        for v in [x.ssim, x.qabf, x.q_p] {
            prop_assert!(v <= 1.0 + eps, "{x:?}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 6, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn fusion_keeps_shape_and_range(hm in 1usize..4, wm in 1usize..4, seed in 0u64..1000) {
        let cfg = FusionConfig { seed, ..FusionConfig::desk() };
        let model = FusionModel::build(&cfg).unwrap();
        let providers = Providers::stub(seed);
        let ctx = FuseContext::new(&providers, &cfg.prompt, None).unwrap();
        let shape = Shape::new(1, 1, 8 * hm, 8 * wm);
        let a = random_tensor(shape, seed).map(|v| (v + 2.0) / 4.0);
        let b = random_tensor(shape, seed ^ 9).map(|v| (v + 2.0) / 4.0);
        let f = model.fuse(&a, &b, &ctx).unwrap();
        prop_assert_eq!(f.shape(), shape);
        prop_assert!(f.data().iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert_eq!(bits(&f), bits(&model.fuse(&a, &b, &ctx).unwrap()));
    }
}
