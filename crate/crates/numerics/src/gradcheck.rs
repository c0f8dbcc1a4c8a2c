//! Central finite-difference comparison against [`Graph::backward`].

use crate::error::Result;
use crate::graph::{Graph, Mode, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    /// `‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂)` over the checked entries.
    pub rel_err: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.tensors.iter().map(|t| t.rel_err).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&TensorCheck> {
        self.tensors.iter().max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }

    pub fn passes(&self, tol: f64) -> bool {
        !self.tensors.is_empty() && self.max_rel_err() <= tol
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// At most this many entries per tensor are perturbed (evenly strided).
    pub max_entries: usize,
    pub mode: Mode,
    /// Norms below this are treated as an exact zero gradient.
    pub zero_floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { step: 1e-4, max_entries: 24, mode: Mode::Train, zero_floor: 1e-10 }
    }
}

fn picked(n: usize, max: usize) -> Vec<usize> {
    if n <= max {
        (0..n).collect()
    } else {
        (0..max).map(|i| i * n / max + (n / max) / 2).collect()
    }
}

fn rel(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let den = na.max(nb);
    if den < floor {
        diff
    } else {
        diff / den
    }
}

/// Checks gradients with respect to every input tensor and every trainable parameter
/// (or only `only_params` when given). `build` must return a single-element loss.
pub fn check<F>(
    store: &mut ParamStore<f64>,
    inputs: &[Tensor<f64>],
    only_params: Option<&[ParamId]>,
    opts: GradCheckOptions,
    build: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>,
{
    let eval = |store: &ParamStore<f64>, inputs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new(store, opts.mode);
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let loss = build(&mut g, &vars)?;
        Ok(g.value(loss).data()[0])
    };

    let (input_grads, param_grads) = {
        let mut g = Graph::new(&*store, opts.mode);
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let loss = build(&mut g, &vars)?;
        let grads = g.backward(loss)?;
        let ig: Vec<Tensor<f64>> = vars
            .iter()
            .zip(inputs)
            .map(|(v, t)| grads.wrt(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        (ig, grads.params)
    };

    let mut report = GradCheckReport::default();
    let mut inputs_mut = inputs.to_vec();
    for (i, analytic) in input_grads.iter().enumerate() {
        let idx = picked(inputs[i].numel(), opts.max_entries);
        let mut num = Vec::with_capacity(idx.len());
        for &j in &idx {
            let orig = inputs_mut[i].data()[j];
            inputs_mut[i].data_mut()[j] = orig + opts.step;
            let up = eval(store, &inputs_mut)?;
            inputs_mut[i].data_mut()[j] = orig - opts.step;
            let down = eval(store, &inputs_mut)?;
            inputs_mut[i].data_mut()[j] = orig;
            num.push((up - down) / (2.0 * opts.step));
        }
        let ana: Vec<f64> = idx.iter().map(|&j| analytic.data()[j]).collect();
        report.tensors.push(TensorCheck { name: format!("input{i}"), checked: idx.len(), rel_err: rel(&ana, &num, opts.zero_floor) });
    }

    let ids: Vec<ParamId> = match only_params {
        Some(ids) => ids.to_vec(),
        None => store.iter().filter(|(_, p)| p.trainable()).map(|(id, _)| id).collect(),
    };
    for id in ids {
        let n = store.value(id).numel();
        let idx = picked(n, opts.max_entries);
        let mut num = Vec::with_capacity(idx.len());
        for &j in &idx {
            let orig = store.value(id).data()[j];
            store.get_mut(id).value.data_mut()[j] = orig + opts.step;
            let up = eval(store, inputs)?;
            store.get_mut(id).value.data_mut()[j] = orig - opts.step;
            let down = eval(store, inputs)?;
            store.get_mut(id).value.data_mut()[j] = orig;
            num.push((up - down) / (2.0 * opts.step));
        }
        let ana: Vec<f64> = match param_grads.get(id) {
            Some(g) => idx.iter().map(|&j| g.data()[j]).collect(),
            None => vec![0.0; idx.len()],
        };
        report.tensors.push(TensorCheck { name: store.get(id).name.clone(), checked: idx.len(), rel_err: rel(&ana, &num, opts.zero_floor) });
    }
    Ok(report)
}
