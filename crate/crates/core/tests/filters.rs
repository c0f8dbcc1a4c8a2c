mod common;

use common::unit_tensor;
use mmf_numerics::Tensor;
use mmfusion::config::NoiseprintProvider;
use mmfusion::filters::bayar::{self, check, project};
use mmfusion::filters::noiseprint::{residual_path, write_residual, PROXY_KERNEL};
use mmfusion::filters::srm::PIXEL_SCALE;
use mmfusion::filters::{truncate, NoiseprintSource, SrmBank};
use mmfusion::Error;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn bank() -> SrmBank {
    SrmBank::standard(2.0).unwrap()
}

/// Reference cross-correlation with zero padding, "same" output size.
fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>) -> Tensor<f64> {
    let (n, ci, h, wd) = x.dims4().unwrap();
    let (co, _, k, _) = w.dims4().unwrap();
    let c = (k / 2) as isize;
    Tensor::from_fn(&[n, co, h, wd], |i| {
        let (b, o, y, xx) = (i / (co * h * wd), (i / (h * wd)) % co, (i / wd) % h, i % wd);
        let mut s = 0.0;
        for ic in 0..ci {
            for u in 0..k {
                for v in 0..k {
                    let (yy, xv) = (y as isize + u as isize - c, xx as isize + v as isize - c);
                    if yy >= 0 && xv >= 0 && (yy as usize) < h && (xv as usize) < wd {
                        s += w.data()[((o * ci + ic) * k + u) * k + v] * x.data()[((b * ci + ic) * h + yy as usize) * wd + xv as usize];
                    }
                }
            }
        }
        s
    })
}

#[test]
fn srm_constant_and_zero_images_give_zero() {
    let b = bank();
    let flat = b.residual(&Tensor::<f64>::full(&[1, 3, 16, 16], 0.37)).unwrap();
    // interior only: zero padding creates edges at the border
    let s = b.support() / 2;
    for c in 0..3 {
        for y in s..16 - s {
            for x in s..16 - s {
                assert!(flat.data()[(c * 16 + y) * 16 + x].abs() < 1e-9);
            }
        }
    }
    assert!(b.residual(&Tensor::<f64>::zeros(&[1, 3, 16, 16])).unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn srm_impulse_reproduces_clamped_kernel_taps() {
    let b = bank();
    let k = b.support();
    let c = k / 2;
    // one gray level in the first color channel
    let mut img = Tensor::<f64>::zeros(&[1, 3, 11, 11]);
    img.data_mut()[5 * 11 + 5] = 1.0 / PIXEL_SCALE;
    let r = b.residual(&img).unwrap();
    let w = b.weights::<f64>();
    for o in 0..3 {
        for dy in -(c as isize)..=c as isize {
            for dx in -(c as isize)..=c as isize {
                let tap = w.data()[((o * 3) * k + (c as isize - dy) as usize) * k + (c as isize - dx) as usize];
                let got = r.data()[(o * 11 + (5 + dy) as usize) * 11 + (5 + dx) as usize];
                assert!((got - tap.clamp(-2.0, 2.0)).abs() < 1e-9, "kernel {o} at ({dy},{dx}): {got} vs {tap}");
            }
        }
    }
}

#[test]
fn truncation_examples() {
    let x = Tensor::<f64>::new(&[4], vec![-1.0, 0.5, 20.0, -30.0]).unwrap();
    let t = truncate(&x, 2.0).unwrap();
    assert_eq!(t.data(), &[-1.0, 0.5, 2.0, -2.0]);
    assert!(truncate(&x, 0.0).is_err());
}

proptest! {
    #[test]
    fn truncation_is_idempotent(seed in 0u64..1000, t in 0.01f64..5.0) {
        let x = common::rand_tensor::<f64>(&[2, 3, 5, 5], seed).map(|v| v * 10.0);
        let once = truncate(&x, t).unwrap();
        prop_assert_eq!(truncate(&once, t).unwrap(), once);
    }

    #[test]
    fn projection_satisfies_constraint_and_is_a_fixed_point(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w = common::rand_tensor::<f64>(&[3, 3, 5, 5], seed);
        project(&mut w, &mut rng);
        for s in 0..9 {
            let slice = &w.data()[s * 25..(s + 1) * 25];
            prop_assert_eq!(slice[12], -1.0);
            let sum: f64 = slice.iter().enumerate().filter(|(i, _)| *i != 12).map(|(_, v)| v).sum();
            prop_assert!((sum - 1.0).abs() < 1e-6);
        }
        let mut again = w.clone();
        project(&mut again, &mut rng);
        // re-dividing by a sum that is 1 up to rounding moves taps by that rounding, which
        // grows with the largest tap of a nearly cancelling slice
        for (a, b) in again.data().chunks(25).zip(w.data().chunks(25)) {
            let big = b.iter().fold(1.0f64, |m, v| m.max(v.abs()));
            for (x, y) in a.iter().zip(b) {
                prop_assert!((x - y).abs() <= 64.0 * f64::EPSILON * big * y.abs().max(1.0));
            }
        }
    }

    #[test]
    fn residuals_are_translation_equivariant(seed in 0u64..200, dy in 0usize..4, dx in 0usize..4) {
        let base = unit_tensor::<f64>(&[1, 3, 24, 24], seed);
        // the shifted image carries the same content moved by (dy, dx)
        let shifted = Tensor::from_fn(&[1, 3, 24, 24], |i| {
            let (c, y, x) = (i / 576, (i / 24) % 24, i % 24);
            if y >= dy && x >= dx { base.data()[(c * 24 + y - dy) * 24 + x - dx] } else { 0.5 }
        });
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w = common::rand_tensor::<f64>(&[3, 3, 5, 5], seed + 1);
        project(&mut w, &mut rng);
        let srm = bank();
        let outputs = [
            (srm.residual(&base).unwrap(), srm.residual(&shifted).unwrap()),
            (bayar::apply(&w, &base).unwrap(), bayar::apply(&w, &shifted).unwrap()),
        ];
        for (a, b) in outputs {
            for c in 0..3 {
                for y in 8..20 {
                    for x in 8..20 {
                        let va = a.data()[(c * 24 + y - dy) * 24 + x - dx];
                        let vb = b.data()[(c * 24 + y) * 24 + x];
                        prop_assert!((va - vb).abs() < 1e-9);
                    }
                }
            }
        }
    }
}

#[test]
fn bayar_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut w = common::rand_tensor::<f64>(&[3, 3, 5, 5], 3);
    project(&mut w, &mut rng);
    check(&w).unwrap();
    let flat = bayar::apply(&w, &Tensor::full(&[1, 3, 12, 12], 0.6)).unwrap();
    for c in 0..3 {
        for y in 2..10 {
            for x in 2..10 {
                assert!(flat.data()[(c * 12 + y) * 12 + x].abs() < 1e-12);
            }
        }
    }
    assert!(bayar::apply(&w, &Tensor::zeros(&[1, 3, 8, 8])).unwrap().data().iter().all(|&v| v == 0.0));
    let img = unit_tensor::<f64>(&[2, 3, 9, 7], 4);
    let got = bayar::apply(&w, &img).unwrap();
    let want = naive_conv(&img, &w);
    for (a, b) in got.data().iter().zip(want.data()) {
        assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0));
    }
    let mut bad = w.clone();
    bad.data_mut()[12] = -0.9;
    assert!(matches!(bayar::apply(&bad, &img), Err(Error::BayarConstraint { .. })));
}

#[test]
fn noise_residual_sources() {
    let proxy = NoiseprintSource::new(NoiseprintProvider::Proxy);
    assert!(proxy.is_proxy());
    let r = proxy.residual(&Tensor::full(&[1, 3, 8, 8], 0.4), None).unwrap();
    for c in 0..3 {
        for y in 1..7 {
            for x in 1..7 {
                assert!(r.data()[(c * 8 + y) * 8 + x].abs() < 1e-6);
            }
        }
    }
    assert_eq!(PROXY_KERNEL.iter().sum::<f32>(), 0.0);

    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("images");
    let store = dir.path().join("residuals");
    let image = root.join("a/b.png");
    let map = unit_tensor::<f32>(&[1, 3, 8, 8], 5);
    write_residual(&residual_path(&store, &root, &image), &map).unwrap();
    let src = NoiseprintSource::new(NoiseprintProvider::Precomputed { dir: store.clone(), root: root.clone() });
    assert_eq!(src.residual(&Tensor::zeros(&[1, 3, 8, 8]), Some(&image)).unwrap(), map);
    // single-channel maps are replicated
    let one = unit_tensor::<f32>(&[1, 1, 8, 8], 6);
    let other = root.join("c.png");
    write_residual(&residual_path(&store, &root, &other), &one).unwrap();
    let got = src.residual(&Tensor::zeros(&[1, 3, 8, 8]), Some(&other)).unwrap();
    for c in 0..3 {
        assert_eq!(&got.data()[c * 64..(c + 1) * 64], one.data());
    }
    assert!(src.residual(&Tensor::zeros(&[1, 3, 16, 8]), Some(&image)).is_err());
    let missing = root.join("missing.png");
    match src.residual(&Tensor::zeros(&[1, 3, 8, 8]), Some(&missing)) {
        Err(e @ Error::MissingResidual(_)) => assert!(e.to_string().contains("missing.png")),
        other => panic!("expected a missing-residual error, got {other:?}"),
    }
    let off = NoiseprintSource::new(NoiseprintProvider::Disabled);
    assert!(off.residual(&Tensor::zeros(&[1, 3, 8, 8]), None).is_err());
}
