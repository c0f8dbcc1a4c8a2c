use mmfusion::config::Profile;
use mmfusion::model::groups;
use mmfusion::{FusionMode, Model, RunConfig};

const REPORTED_TOTAL: f64 = 68.9e6;

fn full(fusion: FusionMode, reweight: bool) -> Model<f32> {
    let mut cfg = RunConfig::for_profile(Profile::Full);
    cfg.model.encoder.fusion = fusion;
    cfg.model.decoder.reweight = reweight;
    Model::new(&cfg.model, 0).unwrap()
}

#[test]
fn full_scale_early_fusion_size() {
    let plain = full(FusionMode::Early, false);
    let n = plain.param_count() as f64;
    assert!((n - REPORTED_TOTAL).abs() <= 0.02 * REPORTED_TOTAL, "{n} parameters");
    let with_frd = full(FusionMode::Early, true);
    let extra = with_frd.param_count() - plain.param_count();
    // the re-weighting front-end sits on both pixel decoders
    assert!(extra > 0);
    assert_eq!(with_frd.count_prefix(groups::ENCODER), plain.count_prefix(groups::ENCODER));
    let parts: usize = [groups::ENCODER, groups::ANOMALY, groups::CONFIDENCE, groups::DETECTOR, groups::BAYAR]
        .iter()
        .map(|p| with_frd.count_prefix(p))
        .sum();
    assert_eq!(parts, with_frd.param_count());
}
