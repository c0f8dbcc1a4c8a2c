mod common;

use common::toy::corpus;
use image::RgbImage;
use mmfusion::config::{Profile, ResidualConfig};
use mmfusion::data::manifest::Manifest;
use mmfusion::data::synthetic::CorpusKind;
use mmfusion::evaluation::degrade::{blur_sigma, gaussian_taps, Degradation, DegradationKind, DegradationSpec};
use mmfusion::evaluation::explain::mask_modality;
use mmfusion::evaluation::robustness::f1_under;
use mmfusion::evaluation::{evaluate, explain, sweep, MaskMode, MaskSpec, MetricsReport, RunInfo};
use mmfusion::predict::Predictor;
use mmfusion::{Model, Modality, RunConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn predictor(seed: u64) -> Predictor {
    let cfg = RunConfig::for_profile(Profile::Toy);
    Predictor::new(Model::new(&cfg.model, seed).unwrap(), &ResidualConfig::default(), "untrained").unwrap()
}

fn info() -> RunInfo {
    RunInfo::new("cfg", "untrained", 0, "proxy")
}

fn small_corpus(dir: &std::path::Path) -> Manifest {
    corpus(dir, CorpusKind::Splice, 6, 64, 2)
}

fn without_timestamp(mut v: serde_json::Value) -> serde_json::Value {
    v["info"]["generated_at"] = serde_json::Value::Null;
    v
}

#[test]
fn prediction_keeps_original_dimensions() {
    let p = predictor(1);
    let img = RgbImage::from_fn(70, 45, |x, y| image::Rgb([(x * 3) as u8, (y * 5) as u8, ((x + y) % 256) as u8]));
    let a = p.predict_image(&img, None).unwrap();
    assert_eq!(a.localization.shape(), &[1, 1, 45, 70]);
    assert_eq!(a.confidence.shape(), &[1, 1, 45, 70]);
    assert!((0.0..=1.0).contains(&a.score));
    assert!(a.localization.data().iter().chain(a.confidence.data()).all(|v| (0.0..=1.0).contains(v)));
    let b = p.predict_image(&img, None).unwrap();
    assert_eq!(a.localization, b.localization);
    assert_eq!(a.score.to_bits(), b.score.to_bits());
    let s = a.summary();
    assert_eq!((s.height, s.width), (45, 70));
}

#[test]
fn degradation_examples() {
    assert!((blur_sigma(3) - 0.8).abs() < 1e-12);
    assert!((blur_sigma(13) - 2.3).abs() < 1e-12);
    for k in [3, 5, 7, 9, 11, 13] {
        let t = gaussian_taps(k).unwrap();
        assert_eq!(t.len(), k as usize);
        assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    assert!(Degradation::new(DegradationKind::GaussianBlur, 4).is_err());
    assert!(Degradation::new(DegradationKind::Jpeg, 0).is_err());
    let flat = RgbImage::from_pixel(20, 20, image::Rgb([90, 120, 200]));
    assert_eq!(Degradation::Identity.apply(&flat).unwrap(), flat);
    assert_eq!(Degradation::GaussianBlur(7).apply(&flat).unwrap(), flat);
}

#[test]
fn metrics_report_round_trips_and_repeats() {
    let dir = tempfile::tempdir().unwrap();
    let m = small_corpus(&dir.path().join("data"));
    let p = predictor(3);
    let r = evaluate(&p, &m, Degradation::Identity, info()).unwrap();
    assert_eq!(r.rows.len(), 6);
    assert_eq!(r.threshold, 0.5);
    assert!(r.rows.iter().all(|row| row.pixel_f1.is_some() == row.manipulated));
    let json = serde_json::to_string(&r).unwrap();
    assert_eq!(serde_json::from_str::<MetricsReport>(&json).unwrap(), r);
    let again = evaluate(&p, &m, Degradation::Identity, info()).unwrap();
    assert_eq!(
        without_timestamp(serde_json::to_value(&r).unwrap()),
        without_timestamp(serde_json::to_value(&again).unwrap())
    );
    let files = r.emit(&dir.path().join("out")).unwrap();
    assert_eq!(files.len(), 3);
    assert!(files.iter().all(|f| f.exists()));
    assert!(r.datasets_csv().lines().last().unwrap().starts_with("AVG"));
}

#[test]
fn robustness_sweep_shape() {
    let dir = tempfile::tempdir().unwrap();
    let m = small_corpus(&dir.path().join("data"));
    let p = predictor(4);
    let r = sweep(&p, &m, &DegradationSpec::defaults(), info()).unwrap();
    assert_eq!(r.point_count(), 12);
    assert_eq!(r.series.len(), 2);
    assert_eq!(f1_under(&p, &m, Degradation::Identity).unwrap().to_bits(), r.baseline_pixel_f1.to_bits());
    let files = r.emit(&dir.path().join("out")).unwrap();
    let plots = files.iter().filter(|f| f.extension().is_some_and(|e| e == "dat")).count();
    assert_eq!(plots, 2);
    let bad = [DegradationSpec { kind: DegradationKind::Jpeg, levels: vec![101] }];
    assert!(sweep(&p, &m, &bad, info()).is_err());
}

#[test]
fn self_masking_changes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let m = small_corpus(&dir.path().join("data"));
    let p = predictor(5);
    for target in [Modality::Noiseprint, Modality::Srm, Modality::Bayar] {
        let spec = MaskSpec::new(target, MaskMode::SelfMask, None).unwrap();
        let r = explain(&p, &m, &spec, 0, false, info()).unwrap();
        assert_eq!(r.delta_f1, Some(0.0), "{target:?}");
        assert_eq!(r.pq, 1.0, "{target:?}");
    }
}

#[test]
fn zero_and_random_masks() {
    let dir = tempfile::tempdir().unwrap();
    let m = small_corpus(&dir.path().join("data"));
    let p = predictor(6);
    let rec = m.records.iter().find(|r| r.label.is_manipulated()).unwrap();
    let img = image::open(&rec.image).unwrap().to_rgb8();
    let prepared = p.prepare(&img, Some(&rec.image)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let zeros = MaskSpec::new(Modality::Srm, MaskMode::Zeros, None).unwrap();
    let z = mask_modality(&p, &prepared, &zeros, &mut rng).unwrap();
    assert_eq!(z.shape(), p.residual(&prepared, Modality::Srm).unwrap().shape());
    assert!(z.data().iter().all(|&v| v == 0.0));

    let empty = Manifest::new(Vec::new(), dir.path());
    assert!(MaskSpec::new(Modality::Srm, MaskMode::RandomImage, Some(&empty)).and_then(|s| s.validate()).is_err());
    let spec = MaskSpec::new(Modality::Bayar, MaskMode::RandomImage, Some(&m)).unwrap();
    assert!(!spec.pool.is_empty());
    let a = explain(&p, &m, &spec, 9, false, info()).unwrap();
    let b = explain(&p, &m, &spec, 9, false, info()).unwrap();
    assert_eq!(a.rows, b.rows);
    let blind = explain(&p, &m, &spec, 9, true, info()).unwrap();
    assert_eq!(blind.rows.len(), m.len());
    assert!(blind.rows.iter().all(|r| r.f1_masked.is_none()));
}
