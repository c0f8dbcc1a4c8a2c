//! Encoder output shapes against the stride law `H / 2^(i+1)` for stage outputs.

use mmf_numerics::{Graph, Mode, Var};
use mmfusion::config::{FusionMode, ModelConfig, Profile};
use mmfusion::Model;

use super::unit_tensor;

pub const SIZES: [usize; 15] = [64, 96, 128, 160, 192, 224, 256, 288, 320, 352, 384, 416, 448, 480, 512];

pub fn toy_model(fusion: FusionMode) -> Model<f32> {
    let mut cfg = ModelConfig::for_profile(Profile::Toy);
    cfg.encoder.fusion = fusion;
    Model::new(&cfg, 3).expect("toy model builds")
}

/// Returns a description of every violation for one input size.
pub fn violations(model: &Model<f32>, h: usize, w: usize) -> Vec<String> {
    let enc = &model.arch.encoder;
    let cfg = &enc.config;
    let mut g = Graph::new(&model.store, Mode::Eval);
    let image = g.input(unit_tensor(&[1, 3, h, w], 1));
    let residuals: Vec<Var> =
        (0..cfg.modalities().len()).map(|i| g.input(unit_tensor(&[1, 3, h, w], 10 + i as u64))).collect();
    let out = match enc.forward(&mut g, image, &residuals) {
        Ok(o) => o,
        Err(e) => return vec![format!("{h}x{w}: {e}")],
    };
    let mut bad = Vec::new();
    let want_out = cfg.out_dims();
    for i in 0..4 {
        let s = 1 << (i + 2);
        let expect = [1, want_out[i], h / s, w / s];
        if g.shape(out.features[i]) != expect {
            bad.push(format!("{:?} {h}x{w} scale {i}: {:?} != {expect:?}", cfg.fusion, g.shape(out.features[i])));
        }
        for (j, t) in out.traces.iter().enumerate() {
            let e = [1, cfg.dims[i], h / s, w / s];
            if g.shape(t.fused[i]) != e {
                bad.push(format!("{:?} {h}x{w} branch {j} scale {i}: {:?} != {e:?}", cfg.fusion, g.shape(t.fused[i])));
            }
        }
    }
    bad
}

/// All square sizes plus a few rectangular ones for one fusion mode.
pub fn sweep(fusion: FusionMode) -> (usize, Vec<String>) {
    let model = toy_model(fusion);
    let mut shapes: Vec<(usize, usize)> = SIZES.iter().map(|&s| (s, s)).collect();
    shapes.extend([(64, 512), (512, 96), (224, 160)]);
    let bad = shapes.iter().flat_map(|&(h, w)| violations(&model, h, w)).collect();
    (shapes.len(), bad)
}
