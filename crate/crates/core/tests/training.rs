mod common;

use common::toy::{corpus, small_config};
use mmf_numerics::ParamKind;
use mmfusion::config::NoiseprintProvider;
use mmfusion::data::synthetic::CorpusKind;
use mmfusion::filters::bayar::check;
use mmfusion::model::groups;
use mmfusion::training::checkpoint::{param_hash, Checkpoint, Phase};
use mmfusion::training::trainer::Trainer;
use mmfusion::{Error, FusionMode, Model, Modality, RunConfig};

fn trainer(cfg: &RunConfig, phase: Phase, dir: &std::path::Path) -> Trainer {
    let manifest = corpus(dir, CorpusKind::Splice, 8, 32, 5);
    let model = Model::new(&cfg.model, cfg.seed).unwrap();
    Trainer::new(cfg, phase, model, manifest).unwrap()
}

fn values(t: &Trainer) -> Vec<Vec<f32>> {
    t.model.store.iter().map(|(_, p)| p.value.data().to_vec()).collect()
}

#[test]
fn identical_seeds_give_identical_loss_curves() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(FusionMode::Early, 3);
    let a = trainer(&cfg, Phase::Phase1, dir.path()).run(|_, _| Ok(())).unwrap();
    let b = trainer(&cfg, Phase::Phase1, dir.path()).run(|_, _| Ok(())).unwrap();
    assert_eq!(a.len(), 3);
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.loss.to_bits(), y.loss.to_bits());
        assert_eq!(x.lr, y.lr);
    }
    let mut other = cfg.clone();
    other.seed += 1;
    let c = trainer(&other, Phase::Phase1, dir.path()).run(|_, _| Ok(())).unwrap();
    assert!(a.iter().zip(&c).any(|(x, y)| x.loss != y.loss));
}

#[test]
fn checkpoint_round_trip_and_bit_identical_resume() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(FusionMode::Early, 4);
    let mut straight = trainer(&cfg, Phase::Phase1, dir.path());
    let full = straight.run(|_, _| Ok(())).unwrap();

    let mut first = trainer(&cfg, Phase::Phase1, dir.path());
    for _ in 0..2 {
        first.step().unwrap();
    }
    let path = dir.path().join("mid.mmfc");
    let id = first.checkpoint().save(&path).unwrap();
    let (ckpt, loaded_id) = Checkpoint::load(&path).unwrap();
    assert_eq!(id, loaded_id);
    assert_eq!(ckpt.to_bytes().unwrap(), first.checkpoint().to_bytes().unwrap());
    assert_eq!(ckpt.header.phase, Phase::Phase1);
    assert_eq!(ckpt.header.progress.step, 2);
    let restored = ckpt.model().unwrap();
    assert_eq!(param_hash(&restored, &[""]), param_hash(&first.model, &[""]));

    let mut resumed = Trainer::resume(&ckpt, first.manifest().clone()).unwrap();
    let tail = resumed.run(|_, _| Ok(())).unwrap();
    assert_eq!(tail.len(), 2);
    for (x, y) in full[2..].iter().zip(&tail) {
        assert_eq!(x.loss.to_bits(), y.loss.to_bits(), "step {}", x.step);
    }
    assert_eq!(param_hash(&resumed.model, &[""]), param_hash(&straight.model, &[""]));
    assert_eq!(resumed.checkpoint().to_bytes().unwrap(), straight.checkpoint().to_bytes().unwrap());

    let bytes = std::fs::read(&path).unwrap();
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() / 2]).is_err());
    assert!(Checkpoint::from_bytes(b"not a checkpoint").is_err());
}

/// Batch-norm running statistics are frozen so that chunked and whole-batch passes
/// normalize with the same statistics.
#[test]
fn accumulation_matches_a_single_large_batch() {
    let dir = tempfile::tempdir().unwrap();
    let mut big = small_config(FusionMode::Early, 3);
    big.train.effective_batch = 24;
    big.train.physical_batch = 24;
    let mut chunked = big.clone();
    chunked.train.physical_batch = 4;
    assert_eq!(chunked.train.accumulation(), 6);
    let mut runs = Vec::new();
    for cfg in [&big, &chunked] {
        let manifest = corpus(dir.path(), CorpusKind::Splice, 24, 32, 5);
        let model = Model::new(&cfg.model, cfg.seed).unwrap();
        let mut t = Trainer::new(cfg, Phase::Phase1, model, manifest).unwrap();
        let buffers: Vec<_> = t.model.store.iter().filter(|(_, p)| p.kind == ParamKind::Buffer).map(|(id, _)| id).collect();
        for id in buffers {
            t.model.store.get_mut(id).frozen = true;
        }
        let mut trajectory = Vec::new();
        for _ in 0..3 {
            t.step().unwrap();
            trajectory.push(values(&t));
        }
        runs.push(trajectory);
    }
    // relative distance between the two full parameter vectors after each step
    for (step, (a, b)) in runs[0].iter().zip(&runs[1]).enumerate() {
        let (mut diff, mut norm) = (0.0f64, 0.0f64);
        for (x, y) in a.iter().flatten().zip(b.iter().flatten()) {
            diff += f64::from(x - y).powi(2);
            norm += f64::from(*x).powi(2);
        }
        let rel = (diff / norm).sqrt();
        assert!(rel <= 1e-5, "step {step}: relative difference {rel:e}");
    }
}

#[test]
fn phase_two_leaves_encoder_and_anomaly_decoder_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(FusionMode::Early, 3);
    let mut p1 = trainer(&cfg, Phase::Phase1, dir.path());
    let frozen_heads = param_hash(&p1.model, &[groups::CONFIDENCE, groups::DETECTOR]);
    p1.run(|_, _| Ok(())).unwrap();
    assert_eq!(param_hash(&p1.model, &[groups::CONFIDENCE, groups::DETECTOR]), frozen_heads);

    let trunk = [groups::ENCODER, groups::ANOMALY];
    let before = param_hash(&p1.model, &trunk);
    let heads_before = param_hash(&p1.model, &[groups::CONFIDENCE, groups::DETECTOR]);
    let mut p2 = Trainer::new(&cfg, Phase::Phase2, p1.model.clone(), p1.manifest().clone()).unwrap();
    p2.run(|_, m| {
        assert_eq!(param_hash(m, &trunk), before);
        Ok(())
    })
    .unwrap();
    assert_eq!(param_hash(&p2.model, &trunk), before);
    assert_ne!(param_hash(&p2.model, &[groups::CONFIDENCE, groups::DETECTOR]), heads_before);
}

#[test]
fn constrained_filter_stays_projected_while_training() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(FusionMode::Single, 5);
    cfg.model.encoder.single_aux = Modality::Bayar;
    cfg.train.check_bayar = true;
    cfg.train.lr0 = 0.5;
    let mut t = trainer(&cfg, Phase::BayarPretrain, dir.path());
    let id = t.model.arch.bayar.as_ref().unwrap().weight;
    let start = t.model.store.value(id).clone();
    t.run(|_, m| check(m.store.value(id))).unwrap();
    assert_ne!(t.model.store.value(id), &start);

    let early = small_config(FusionMode::Early, 1);
    let model = Model::new(&early.model, 0).unwrap();
    let manifest = t.manifest().clone();
    assert!(Trainer::new(&early, Phase::BayarPretrain, model, manifest).is_err());
}

fn backbone_hashes(m: &Model<f32>) -> Vec<String> {
    let enc = &m.arch.encoder;
    (0..enc.pairs.len()).map(|j| param_hash(m, &[&format!("{}rgb{}.", groups::ENCODER, enc.rgb_index(j))])).collect()
}

#[test]
fn late_fusion_backbones_stay_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(FusionMode::Late, 3);
    let mut t = trainer(&cfg, Phase::Phase1, dir.path());
    let start = backbone_hashes(&t.model);
    assert_eq!(start.len(), 3);
    t.run(|_, m| {
        let h = backbone_hashes(m);
        assert!(h.iter().all(|x| *x == h[0]));
        Ok(())
    })
    .unwrap();
    assert_ne!(backbone_hashes(&t.model)[0], start[0]);

    let mut unshared = cfg.clone();
    unshared.model.encoder.share_rgb = false;
    let m = Model::<f32>::new(&unshared.model, 0).unwrap();
    let h = backbone_hashes(&m);
    assert!(h[0] != h[1] && h[1] != h[2]);
}

#[test]
fn non_finite_loss_aborts_with_context() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(FusionMode::Early, 2);
    let mut t = trainer(&cfg, Phase::Phase1, dir.path());
    let id = t.model.store.ids_with_prefix(groups::ANOMALY)[0];
    t.model.store.get_mut(id).value.data_mut()[0] = f32::NAN;
    match t.step() {
        Err(Error::NonFiniteLoss { step, batch, .. }) => {
            assert_eq!(step, 0);
            assert!(batch.contains("records"));
        }
        other => panic!("expected a non-finite loss error, got {:?}", other.map(|r| r.loss)),
    }
}

#[test]
fn invalid_runs_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = corpus(dir.path(), CorpusKind::Splice, 4, 32, 5);
    let cfg = small_config(FusionMode::Early, 1);
    let model = || Model::new(&cfg.model, 0).unwrap();
    assert!(Trainer::new(&cfg, Phase::Init, model(), manifest.clone()).is_err());
    let mut pre = cfg.clone();
    pre.train.augment = true;
    pre.residuals.noiseprint = NoiseprintProvider::Precomputed { dir: dir.path().into(), root: dir.path().into() };
    assert!(Trainer::new(&pre, Phase::Phase1, model(), manifest.clone()).is_err());
    let mut uneven = cfg.clone();
    uneven.train.effective_batch = 6;
    assert!(Trainer::new(&uneven, Phase::Phase1, model(), manifest).is_err());
}
