//! Finite-difference checks of every trainable component in 64-bit precision.

use mmf_numerics::gradcheck::{check, GradCheckOptions};
use mmf_numerics::{Graph, NumericsError, ParamStore, Tensor, Var};
use mmfusion::config::EncoderConfig;
use mmfusion::decoders::{Detector, PixelDecoder, Reweight};
use mmfusion::encoder::efm::EarlyFusion;
use mmfusion::encoder::ffm::Fuse;
use mmfusion::encoder::frm::Rectify;
use mmfusion::encoder::mit::MixTransformer;
use mmfusion::filters::BayarLayer;

use super::{build, probe, rand_tensor, unit_tensor};

pub const TOL: f64 = 1e-5;

fn lift<T>(r: mmfusion::Result<T>) -> mmf_numerics::Result<T> {
    r.map_err(|e| NumericsError::Config(e.to_string()))
}

fn opts() -> GradCheckOptions {
    // A small step stays clear of ReLU kinks and of the sharp curvature of batch norms over
    // tiny maps. Biases feeding a batch norm have an exactly zero gradient, which differencing
    // only sees as round-off.
    GradCheckOptions { step: 1e-6, max_entries: 16, zero_floor: 1e-7, ..GradCheckOptions::default() }
}

fn run(
    store: &mut ParamStore<f64>,
    inputs: &[Tensor<f64>],
    f: impl Fn(&mut Graph<'_, f64>, &[Var]) -> mmf_numerics::Result<Var>,
) -> (f64, String) {
    run_with(opts(), store, inputs, f)
}

fn run_with(
    o: GradCheckOptions,
    store: &mut ParamStore<f64>,
    inputs: &[Tensor<f64>],
    f: impl Fn(&mut Graph<'_, f64>, &[Var]) -> mmf_numerics::Result<Var>,
) -> (f64, String) {
    let report = check(store, inputs, None, o, f).expect("gradient check runs");
    let worst = report.worst().map(|t| t.name.clone()).unwrap_or_default();
    (report.max_rel_err(), worst)
}

/// Small backbone configuration whose attention reductions fit 32×32 inputs.
pub fn tiny_encoder() -> EncoderConfig {
    EncoderConfig {
        dims: [8, 16, 24, 32],
        depths: [1, 1, 1, 1],
        heads: [1, 2, 2, 4],
        sr_ratios: [2, 2, 1, 1],
        mlp_ratio: 2,
        fusion_heads: [1, 2, 2, 4],
        efm_widths: vec![4, 4, 4, 4],
        ..EncoderConfig::toy()
    }
}

pub fn reweight() -> (f64, String) {
    let (mut store, m) = build::<f64, _>(1, |pb| Reweight::new(pb, 8).unwrap());
    run(&mut store, &[rand_tensor(&[2, 8, 4, 4], 11)], |g, v| {
        let y = lift(m.forward(g, v[0]))?;
        probe(g, y)
    })
}

pub fn rectify() -> (f64, String) {
    let (mut store, m) = build::<f64, _>(2, |pb| Rectify::new(pb, 8, 0.5, 0.5).unwrap());
    run(&mut store, &[rand_tensor(&[2, 8, 4, 4], 21), rand_tensor(&[2, 8, 4, 4], 22)], |g, v| {
        let (a, b) = lift(m.forward(g, v[0], v[1]))?;
        let c = g.concat(&[a, b], 1)?;
        probe(g, c)
    })
}

pub fn fuse() -> (f64, String) {
    let (mut store, m) = build::<f64, _>(3, |pb| Fuse::new(pb, 8, 2, true).unwrap());
    // At the default init the projections are tiny, the context softmax is nearly uniform and
    // the key/value gradient drowns in round-off.
    for (k, id) in store.ids_with_prefix("").into_iter().enumerate() {
        let name = &store.get(id).name;
        if name.ends_with("kv.weight") || name.ends_with(".proj.weight") {
            let shape = store.value(id).shape().to_vec();
            store.get_mut(id).value = rand_tensor(&shape, 300 + k as u64);
        }
    }
    run(&mut store, &[rand_tensor(&[2, 8, 4, 4], 31), rand_tensor(&[2, 8, 4, 4], 32)], |g, v| {
        let y = lift(m.forward(g, v[0], v[1]))?;
        probe(g, y)
    })
}

pub fn early_fusion() -> (f64, String) {
    let (mut store, m) = build::<f64, _>(4, |pb| EarlyFusion::new(pb, &[4, 4, 4, 4]).unwrap());
    let inputs: Vec<Tensor<f64>> = (0..3).map(|i| rand_tensor(&[2, 3, 6, 6], 41 + i)).collect();
    run(&mut store, &inputs, |g, v| {
        let y = lift(m.forward(g, v))?;
        probe(g, y)
    })
}

pub fn bayar() -> (f64, String) {
    let (mut store, m) = build::<f64, _>(5, |pb| BayarLayer::new(pb, 5));
    // Input gradients through the validated path.
    let (e_in, w_in) = {
        let report = check(&mut store, &[unit_tensor(&[2, 3, 8, 8], 51)], Some(&[]), opts(), |g, v| {
            let y = lift(m.forward(g, v[0]))?;
            probe(g, y)
        })
        .expect("gradient check runs");
        (report.max_rel_err(), report.worst().map(|t| t.name.clone()).unwrap_or_default())
    };
    // Weight gradients perturb off the constraint set, so they go through the bare convolution.
    let (e_w, w_w) = run(&mut store, &[unit_tensor(&[2, 3, 8, 8], 52)], |g, v| {
        let y = lift(m.forward_unchecked(g, v[0]))?;
        probe(g, y)
    });
    if e_in >= e_w {
        (e_in, w_in)
    } else {
        (e_w, w_w)
    }
}

pub fn attention_backbone() -> (f64, String) {
    let cfg = tiny_encoder();
    let (mut store, m) = build::<f64, _>(6, |pb| MixTransformer::new(pb, &cfg).unwrap());
    // smooth everywhere, and small attention gradients at init need less round-off
    let o = GradCheckOptions { step: 1e-4, ..opts() };
    run_with(o, &mut store, &[rand_tensor(&[1, 3, 32, 32], 61)], |g, v| {
        let mut x = v[0];
        let mut outs = Vec::new();
        for s in &m.stages {
            x = lift(s.forward(g, x))?;
            outs.push(x);
        }
        let mut total = probe(g, outs[0])?;
        for &o in &outs[1..] {
            let p = probe(g, o)?;
            total = g.add(total, p)?;
        }
        Ok(total)
    })
}

fn pyramid(seed: u64) -> Vec<Tensor<f64>> {
    [(4, 8), (8, 4), (12, 2), (16, 1)].iter().enumerate().map(|(i, &(c, s))| rand_tensor(&[2, c, s, s], seed + i as u64)).collect()
}

pub fn anomaly_decoder() -> (f64, String) {
    let (mut store, m) = build::<f64, _>(7, |pb| PixelDecoder::new(pb, &[4, 8, 12, 16], 8, 2, true).unwrap());
    run(&mut store, &pyramid(71), |g, v| {
        let y = lift(m.forward(g, v, 16, 16))?;
        let y = g.log_softmax(y, 1)?;
        probe(g, y)
    })
}

pub fn confidence_decoder() -> (f64, String) {
    let (mut store, m) = build::<f64, _>(8, |pb| PixelDecoder::new(pb, &[4, 8, 12, 16], 8, 1, false).unwrap());
    run(&mut store, &pyramid(81), |g, v| {
        let y = lift(m.forward(g, v, 16, 16))?;
        let y = g.sigmoid(y);
        probe(g, y)
    })
}

pub fn detector() -> (f64, String) {
    let (mut store, m) = build::<f64, _>(9, |pb| Detector::new(pb, 8));
    run(&mut store, &[unit_tensor(&[3, 1, 6, 6], 91), unit_tensor(&[3, 1, 6, 6], 92)], |g, v| {
        let pooled = lift(Detector::pool(g, v[0], v[1]))?;
        let y = lift(m.forward(g, pooled))?;
        probe(g, y)
    })
}

/// Every component check as `(name, max relative error, worst tensor)`.
pub fn all() -> Vec<(&'static str, f64, String)> {
    let checks: [(&'static str, fn() -> (f64, String)); 9] = [
        ("feature re-weighting", reweight),
        ("rectification", rectify),
        ("feature fusion", fuse),
        ("early fusion", early_fusion),
        ("constrained filter", bayar),
        ("attention backbone", attention_backbone),
        ("anomaly decoder", anomaly_decoder),
        ("confidence decoder", confidence_decoder),
        ("detector", detector),
    ];
    checks.iter().map(|(n, f)| {
        let (e, w) = f();
        (*n, e, w)
    }).collect()
}
