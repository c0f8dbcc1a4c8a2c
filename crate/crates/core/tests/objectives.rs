mod common;

use std::collections::BTreeMap;

use common::{rand_tensor, unit_tensor};
use image::{GrayImage, RgbImage};
use mmf_numerics::gradcheck::{check, GradCheckOptions};
use mmf_numerics::{Graph, Mode, NumericsError, ParamStore, Tensor};
use mmfusion::config::TrainConfig;
use mmfusion::training::augment::{self, AugmentParams};
use mmfusion::training::losses::{self, ClassWeights};
use mmfusion::training::sampler;
use mmfusion::training::schedule::poly_lr;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const LN2: f64 = std::f64::consts::LN_2;

fn lift<T>(r: mmfusion::Result<T>) -> mmf_numerics::Result<T> {
    r.map_err(|e| NumericsError::Config(e.to_string()))
}

fn balanced_mask() -> Tensor<f32> {
    Tensor::from_fn(&[2, 1, 4, 4], |i| (i % 2) as f32)
}

#[test]
fn localization_loss_closed_forms() {
    let mask = balanced_mask();
    let w = ClassWeights::from_masks([&mask]);
    assert_eq!((w.authentic, w.manipulated), (1.0, 1.0));
    let store = ParamStore::<f32>::new();
    let mut g = Graph::new(&store, Mode::Train);
    let uniform = g.input(Tensor::zeros(&[2, 2, 4, 4]));
    let l = losses::localization(&mut g, uniform, &mask, w).unwrap();
    assert!((f64::from(g.value(l).data()[0]) - LN2).abs() < 1e-6);
    // saturated correct logits
    let sat = Tensor::from_fn(&[2, 2, 4, 4], |i| {
        let (n, k, p) = (i / 32, (i / 16) % 2, i % 16);
        let y = mask.data()[n * 16 + p] as usize;
        if k == y { 40.0 } else { -40.0 }
    });
    let s = g.input(sat);
    let l = losses::localization(&mut g, s, &mask, w).unwrap();
    assert!(g.value(l).data()[0].abs() < 1e-12);
}

#[test]
fn class_weights_balance_rare_pixels() {
    let mask = Tensor::from_fn(&[1, 1, 4, 4], |i| if i == 0 { 1.0 } else { 0.0 });
    let w = ClassWeights::from_masks([&mask]);
    assert_eq!(w.manipulated, 8.0);
    assert!((w.authentic - 8.0 / 15.0).abs() < 1e-15);
    assert!((w.total - 16.0).abs() < 1e-12);
    // uniform logits still give ln 2 after normalization by the total weight
    let store = ParamStore::<f32>::new();
    let mut g = Graph::new(&store, Mode::Train);
    let z = g.input(Tensor::zeros(&[1, 2, 4, 4]));
    let l = losses::localization(&mut g, z, &mask, w).unwrap();
    assert!((f64::from(g.value(l).data()[0]) - LN2).abs() < 1e-6);
}

#[test]
fn confidence_and_detection_closed_forms() {
    let store = ParamStore::<f64>::new();
    let mut g = Graph::new(&store, Mode::Train);
    let prob = unit_tensor::<f64>(&[1, 1, 4, 4], 1);
    let mask = Tensor::from_fn(&[1, 1, 4, 4], |i| (i % 3 == 0) as u8 as f64);
    let tcp = losses::true_class_probability(&prob, &mask).unwrap();
    let c = g.input(tcp.clone());
    let l = losses::confidence(&mut g, c, &tcp, 16).unwrap();
    assert_eq!(g.value(l).data()[0], 0.0);
    let z = g.input(Tensor::zeros(&[1, 1, 4, 4]));
    let l = losses::confidence(&mut g, z, &Tensor::full(&[1, 1, 4, 4], 1.0), 16).unwrap();
    assert_eq!(g.value(l).data()[0], 1.0);

    let zero = g.input(Tensor::zeros(&[2, 1]));
    let l = losses::detection(&mut g, zero, &[0.0, 1.0], 2).unwrap();
    assert!((g.value(l).data()[0] - LN2).abs() < 1e-12);
    let sure = g.input(Tensor::new(&[2, 1], vec![-50.0, 50.0]).unwrap());
    let l = losses::detection(&mut g, sure, &[0.0, 1.0], 2).unwrap();
    assert!(g.value(l).data()[0] < 1e-20);
    let bad = g.input(Tensor::zeros(&[1, 1]));
    assert!(losses::detection(&mut g, bad, &[0.5], 1).is_err());
}

#[test]
fn loss_gradients_match_finite_differences() {
    let opts = GradCheckOptions { step: 1e-6, ..GradCheckOptions::default() };
    let mut store = ParamStore::<f64>::new();
    let mask32 = Tensor::from_fn(&[2, 1, 3, 3], |i| (i % 4 == 0) as u8 as f32);
    let mask = mask32.cast::<f64>();
    let w = ClassWeights::from_masks([&mask32]);
    let r = check(&mut store, &[rand_tensor(&[2, 2, 3, 3], 3)], None, opts, |g, v| lift(losses::localization(g, v[0], &mask, w))).unwrap();
    assert!(r.passes(1e-5), "localization {:e}", r.max_rel_err());
    let target = unit_tensor::<f64>(&[2, 1, 3, 3], 4);
    let r = check(&mut store, &[unit_tensor(&[2, 1, 3, 3], 5)], None, opts, |g, v| lift(losses::confidence(g, v[0], &target, 18))).unwrap();
    assert!(r.passes(1e-5), "confidence {:e}", r.max_rel_err());
    let r = check(&mut store, &[rand_tensor(&[3, 1], 6)], None, opts, |g, v| lift(losses::detection(g, v[0], &[1.0, 0.0, 1.0], 3))).unwrap();
    assert!(r.passes(1e-5), "detection {:e}", r.max_rel_err());
}

#[test]
fn poly_schedule_examples() {
    assert_eq!(poly_lr(0, 100, 0.005, 0.9), 0.005);
    assert_eq!(poly_lr(100, 100, 0.005, 0.9), 0.0);
    assert!((poly_lr(50, 100, 0.005, 0.9) - 0.005 * 0.5f64.powf(0.9)).abs() < 1e-18);
    assert_eq!(TrainConfig::full().lr0, 0.005);
}

fn sources(sizes: &[usize]) -> BTreeMap<String, Vec<usize>> {
    let mut next = 0;
    sizes
        .iter()
        .enumerate()
        .map(|(i, &n)| {
            let ids = (next..next + n).collect();
            next += n;
            (format!("set{i}"), ids)
        })
        .collect()
}

fn source_of(s: &BTreeMap<String, Vec<usize>>, id: usize) -> &str {
    s.iter().find(|(_, v)| v.contains(&id)).map(|(k, _)| k.as_str()).unwrap()
}

#[test]
fn sampler_counts_are_exact_over_100_epochs() {
    let s = sources(&[12, 40, 25]);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..100 {
        let e = sampler::epoch(&s, Some(10), false, &mut rng).unwrap();
        assert_eq!(e.len(), 30);
        for tag in s.keys() {
            assert_eq!(e.iter().filter(|&&id| source_of(&s, id) == tag).count(), 10);
        }
        let mut u = e.clone();
        u.sort_unstable();
        u.dedup();
        assert_eq!(u.len(), 30, "no repeats without replacement");
    }
    // default quota is the smallest source
    let e = sampler::epoch(&s, None, false, &mut rng).unwrap();
    assert_eq!(e.len(), 36);
    assert!(sampler::epoch(&s, Some(13), false, &mut rng).is_err());
    let e = sampler::epoch(&s, Some(13), true, &mut rng).unwrap();
    assert_eq!(e.len(), 39);
}

fn sample_pair(seed: u64) -> (RgbImage, GrayImage) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    use rand::Rng;
    let img = RgbImage::from_fn(80, 72, |_, _| image::Rgb([rng.random(), rng.random(), rng.random()]));
    let mask = GrayImage::from_fn(80, 72, |x, y| image::Luma([u8::from((20..50).contains(&x) && (10..40).contains(&y))]));
    (img, mask)
}

#[test]
fn identity_augmentation_keeps_mask() {
    let (img, mask) = sample_pair(1);
    let p = AugmentParams { scale: 1.0, offset: None, quality: 100 };
    let (ai, am) = augment::apply(&img, &mask, 64, &p).unwrap();
    let (ci, cm) = augment::crop_only(&img, &mask, 64, None);
    assert_eq!(am, cm);
    assert_eq!(ai.dimensions(), ci.dimensions());
    let diff: f64 = ai.as_raw().iter().zip(ci.as_raw()).map(|(&a, &b)| (f64::from(a) - f64::from(b)).abs()).sum::<f64>() / ai.as_raw().len() as f64;
    assert!(diff < 3.0, "mean abs difference {diff} at quality 100");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn augmentation_is_deterministic_and_masks_stay_binary(seed in 0u64..10_000) {
        let (img, mask) = sample_pair(seed);
        let cfg = TrainConfig::full();
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = AugmentParams::sample(&TrainConfig { crop: 64, ..cfg.clone() }, img.dimensions(), &mut rng);
            augment::apply(&img, &mask, 64, &p).unwrap()
        };
        let (a1, m1) = run();
        let (a2, m2) = run();
        prop_assert_eq!(a1.as_raw(), a2.as_raw());
        prop_assert_eq!(m1.as_raw(), m2.as_raw());
        prop_assert_eq!(m1.dimensions(), (64, 64));
        prop_assert!(m1.as_raw().iter().all(|&v| v <= 1));
    }
}
