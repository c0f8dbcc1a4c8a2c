//! Named parameter storage, initialization and gradient accumulation.

use rand::{Rng, RngCore};
use rand_distr::{Distribution, Normal};

use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Receives gradients and optimizer updates.
    Weight,
    /// Running statistics and other state updated outside the optimizer.
    Buffer,
}

#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub kind: ParamKind,
    /// Frozen parameters never change, neither through the optimizer nor through buffer updates.
    pub frozen: bool,
    /// Whether the optimizer applies weight decay to this parameter.
    pub decay: bool,
}

impl<T> Parameter<T> {
    pub fn trainable(&self) -> bool {
        self.kind == ParamKind::Weight && !self.frozen
    }
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn push(&mut self, name: String, value: Tensor<T>, kind: ParamKind) -> ParamId {
        debug_assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter name {name}"
        );
        self.params.push(Parameter { name, value, kind, frozen: false, decay: kind == ParamKind::Weight });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn ids_with_prefix(&self, prefix: &str) -> Vec<ParamId> {
        self.iter().filter(|(_, p)| p.name.starts_with(prefix)).map(|(id, _)| id).collect()
    }

    /// Freezes (or unfreezes) every parameter and buffer whose name starts with `prefix`.
    /// Returns how many entries were touched.
    pub fn set_frozen(&mut self, prefix: &str, frozen: bool) -> usize {
        let mut n = 0;
        for p in self.params.iter_mut().filter(|p| p.name.starts_with(prefix)) {
            p.frozen = frozen;
            n += 1;
        }
        n
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.params[id.0].frozen
    }

    /// Number of scalar weights (buffers excluded).
    pub fn weight_count(&self) -> usize {
        self.params.iter().filter(|p| p.kind == ParamKind::Weight).map(|p| p.value.numel()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    kind: p.kind,
                    frozen: p.frozen,
                    decay: p.decay,
                })
                .collect(),
        }
    }

    /// Overwrites buffers with values computed during a forward pass. Frozen buffers are skipped.
    pub fn apply_buffer_updates(&mut self, updates: Vec<(ParamId, Tensor<T>)>) {
        for (id, value) in updates {
            let p = &mut self.params[id.0];
            if !p.frozen {
                assert_eq!(p.value.shape(), value.shape(), "buffer update shape for {}", p.name);
                p.value = value;
            }
        }
    }
}

/// Per-parameter gradient accumulator, indexed like the owning [`ParamStore`].
#[derive(Clone, Debug)]
pub struct GradStore<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> GradStore<T> {
    pub fn new(n: usize) -> Self {
        Self { grads: vec![None; n] }
    }

    pub fn for_store(store: &ParamStore<T>) -> Self {
        Self::new(store.len())
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn accumulate(&mut self, id: ParamId, grad: &Tensor<T>) {
        if self.grads.len() <= id.0 {
            self.grads.resize(id.0 + 1, None);
        }
        match &mut self.grads[id.0] {
            Some(g) => g.add_assign(grad),
            slot @ None => *slot = Some(grad.clone()),
        }
    }

    pub fn scale(&mut self, s: T) {
        for g in self.grads.iter_mut().flatten() {
            g.scale(s);
        }
    }

    pub fn clear(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.grads.iter().enumerate().filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().flatten().all(|g| g.all_finite())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Const(f64),
    Normal { std: f64 },
    /// Normal truncated to ±2 standard deviations.
    TruncNormal { std: f64 },
    Uniform { lo: f64, hi: f64 },
}

impl Init {
    pub fn sample<T: Real>(&self, shape: &[usize], rng: &mut dyn RngCore) -> Tensor<T> {
        match *self {
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::ones(shape),
            Init::Const(v) => Tensor::full(shape, T::lit(v)),
            Init::Normal { std } => {
                let d = Normal::new(0.0, std).expect("positive std");
                Tensor::from_fn(shape, |_| T::lit(d.sample(rng)))
            }
            Init::TruncNormal { std } => {
                let d = Normal::new(0.0, std).expect("positive std");
                Tensor::from_fn(shape, |_| loop {
                    let v: f64 = d.sample(rng);
                    if v.abs() <= 2.0 * std {
                        break T::lit(v);
                    }
                })
            }
            Init::Uniform { lo, hi } => Tensor::from_fn(shape, |_| T::lit(rng.random_range(lo..hi))),
        }
    }
}

/// Registers parameters under a dotted name prefix, in the spirit of a variable builder.
pub struct ParamBuilder<'a, T> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut dyn RngCore,
    prefix: String,
    /// When set, every weight initializer is replaced by zeros (fast construction for counting).
    zero_init: bool,
}

impl<'a, T: Real> ParamBuilder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut dyn RngCore) -> Self {
        Self { store, rng, prefix: String::new(), zero_init: false }
    }

    pub fn zero_init(mut self, on: bool) -> Self {
        self.zero_init = on;
        self
    }

    /// Child builder with `name` appended to the prefix.
    pub fn pp(&mut self, name: impl AsRef<str>) -> ParamBuilder<'_, T> {
        let prefix = if self.prefix.is_empty() {
            name.as_ref().to_string()
        } else {
            format!("{}.{}", self.prefix, name.as_ref())
        };
        ParamBuilder { store: self.store, rng: &mut *self.rng, prefix, zero_init: self.zero_init }
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn weight(&mut self, name: &str, shape: &[usize], init: Init) -> ParamId {
        let init = match init {
            Init::Normal { .. } | Init::TruncNormal { .. } | Init::Uniform { .. } if self.zero_init => Init::Zeros,
            other => other,
        };
        let value = init.sample(shape, self.rng);
        let full = self.full_name(name);
        self.store.push(full, value, ParamKind::Weight)
    }

    pub fn buffer(&mut self, name: &str, value: Tensor<T>) -> ParamId {
        let full = self.full_name(name);
        self.store.push(full, value, ParamKind::Buffer)
    }

    pub fn rng(&mut self) -> &mut dyn RngCore {
        self.rng
    }

    pub fn store(&mut self) -> &mut ParamStore<T> {
        self.store
    }
}
