//! Parameter storage, layer wrappers, and the Adam optimizer.
//!
//! Parameters live in a [`ParamStore`] outside any graph; each training step
//! binds them into a fresh [`Graph`] as leaves. Binding with
//! [`Binder::frozen`] turns a parameter into a plain constant for that pass,
//! which is how the variational-approximation weights are held fixed during
//! the main model update (and vice versa).

use crate::autodiff::{Arr, Grads, Graph, Var};
use ndarray::Array2;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone)]
pub struct ParamEntry {
    pub name: String,
    pub group: String,
    pub value: Arr,
}

/// Flat, ordered collection of named parameters.
#[derive(Clone, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, group: &str, name: &str, value: Arr) -> ParamId {
        self.entries.push(ParamEntry {
            name: format!("{group}.{name}"),
            group: group.to_string(),
            value,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Arr {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Arr {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Ids of every parameter in the given group.
    pub fn group_ids(&self, group: &str) -> Vec<ParamId> {
        self.iter().filter(|(_, e)| e.group == group).map(|(id, _)| id).collect()
    }
}

/// Tracks which graph node each bound parameter became, so gradients can be
/// read back by [`ParamId`] after the sweep.
pub struct Binder {
    bound: Vec<(ParamId, Var)>,
}

impl Default for Binder {
    fn default() -> Self {
        Self::new()
    }
}

impl Binder {
    pub fn new() -> Self {
        Binder { bound: Vec::new() }
    }

    /// Bind as a differentiable leaf.
    pub fn bind(&mut self, g: &mut Graph, store: &ParamStore, id: ParamId) -> Var {
        let v = g.leaf(store.value(id).clone());
        self.bound.push((id, v));
        v
    }

    /// Bind as a constant: the value participates in the forward pass but is
    /// excluded from gradient readback (its node gradient may still exist on
    /// the tape; it is simply never applied).
    pub fn frozen(&mut self, g: &mut Graph, store: &ParamStore, id: ParamId) -> Var {
        g.leaf(store.value(id).clone())
    }

    pub fn grad<'a>(&self, grads: &'a Grads, id: ParamId) -> Option<&'a Arr> {
        self.bound.iter().find(|(pid, _)| *pid == id).and_then(|(_, v)| grads.of(*v))
    }

    pub fn bound(&self) -> &[(ParamId, Var)] {
        &self.bound
    }
}

/// Kaiming-style normal init, seeded.
pub fn init_normal(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Arr {
    let dist = Normal::new(0.0, std).expect("valid normal");
    Array2::from_shape_fn((rows, cols), |_| dist.sample(rng))
}

pub fn init_linear(rng: &mut ChaCha8Rng, fan_in: usize, rows: usize, cols: usize) -> Arr {
    init_normal(rng, rows, cols, (1.0 / fan_in as f64).sqrt())
}

/// Affine layer parameters: `y = x W + b` with `W: [in, out]`, `b: [1, out]`.
#[derive(Clone, Copy, Debug)]
pub struct LinearP {
    pub w: ParamId,
    pub b: ParamId,
}

impl LinearP {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        group: &str,
        name: &str,
        d_in: usize,
        d_out: usize,
    ) -> Self {
        let w = store.add(group, &format!("{name}.w"), init_linear(rng, d_in, d_in, d_out));
        let b = store.add(group, &format!("{name}.b"), Arr::zeros((1, d_out)));
        LinearP { w, b }
    }

    pub fn forward(&self, g: &mut Graph, binder: &mut Binder, store: &ParamStore, x: Var, trainable: bool) -> Var {
        let w = if trainable { binder.bind(g, store, self.w) } else { binder.frozen(g, store, self.w) };
        let b = if trainable { binder.bind(g, store, self.b) } else { binder.frozen(g, store, self.b) };
        let y = g.matmul(x, w);
        g.add_bias_row(y, b)
    }
}

/// Two affine layers with GeLU between them.
#[derive(Clone, Copy, Debug)]
pub struct Mlp2 {
    pub l1: LinearP,
    pub l2: LinearP,
}

impl Mlp2 {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        group: &str,
        name: &str,
        d_in: usize,
        d_hidden: usize,
        d_out: usize,
    ) -> Self {
        Mlp2 {
            l1: LinearP::new(store, rng, group, &format!("{name}.fc1"), d_in, d_hidden),
            l2: LinearP::new(store, rng, group, &format!("{name}.fc2"), d_hidden, d_out),
        }
    }

    pub fn forward(&self, g: &mut Graph, binder: &mut Binder, store: &ParamStore, x: Var, trainable: bool) -> Var {
        let h = self.l1.forward(g, binder, store, x, trainable);
        let h = g.gelu(h);
        self.l2.forward(g, binder, store, h, trainable)
    }
}

/// Same-padded 1-D convolution over `[C, T]` sequences, with bias.
#[derive(Clone, Copy, Debug)]
pub struct Conv1dP {
    pub w: ParamId,
    pub b: ParamId,
    pub k: usize,
}

impl Conv1dP {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        group: &str,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
    ) -> Self {
        let w = store.add(group, &format!("{name}.w"), init_linear(rng, c_in * k, c_out, c_in * k));
        let b = store.add(group, &format!("{name}.b"), Arr::zeros((c_out, 1)));
        Conv1dP { w, b, k }
    }

    /// Zero-initialized variant; with zero weights the layer outputs zero,
    /// which is how coupling nets start as the identity map.
    pub fn new_zeroed(
        store: &mut ParamStore,
        group: &str,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
    ) -> Self {
        let w = store.add(group, &format!("{name}.w"), Arr::zeros((c_out, c_in * k)));
        let b = store.add(group, &format!("{name}.b"), Arr::zeros((c_out, 1)));
        Conv1dP { w, b, k }
    }

    pub fn forward(&self, g: &mut Graph, binder: &mut Binder, store: &ParamStore, x: Var, trainable: bool) -> Var {
        let w = if trainable { binder.bind(g, store, self.w) } else { binder.frozen(g, store, self.w) };
        let b = if trainable { binder.bind(g, store, self.b) } else { binder.frozen(g, store, self.b) };
        let y = g.conv1d_same(x, w, self.k);
        g.add_bias_col(y, b)
    }
}

/// Adam with optional exponential learning-rate decay.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lr_decay: f64,
    m: Vec<Option<Arr>>,
    v: Vec<Option<Arr>>,
    t: u64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, lr_decay: 1.0, m: Vec::new(), v: Vec::new(), t: 0 }
    }

    pub fn with_decay(mut self, per_step: f64) -> Self {
        self.lr_decay = per_step;
        self
    }

    fn ensure(&mut self, n: usize) {
        if self.m.len() < n {
            self.m.resize_with(n, || None);
            self.v.resize_with(n, || None);
        }
    }

    /// Apply one update to every parameter that has a gradient in `binder`.
    pub fn step(&mut self, store: &mut ParamStore, binder: &Binder, grads: &Grads) {
        self.ensure(store.len());
        self.t += 1;
        let lr_t = self.lr * self.lr_decay.powi(self.t as i32 - 1);
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (pid, var) in binder.bound() {
            let Some(grad) = grads.of(*var) else { continue };
            let i = pid.0;
            let m = self.m[i].get_or_insert_with(|| Arr::zeros(grad.dim()));
            let v = self.v[i].get_or_insert_with(|| Arr::zeros(grad.dim()));
            *m *= self.beta1;
            *m += &(grad * (1.0 - self.beta1));
            *v *= self.beta2;
            *v += &(grad.mapv(|x| x * x) * (1.0 - self.beta2));
            let update = m.mapv(|x| x / bc1)
                / &(v.mapv(|x| (x / bc2).sqrt() + self.eps));
            *store.value_mut(*pid) -= &(update * lr_t);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn adam_minimizes_quadratic() {
        let mut store = ParamStore::new();
        let x = store.add("test", "x", array![[5.0, -3.0]]);
        let mut opt = Adam::new(0.1);
        for _ in 0..500 {
            let mut g = Graph::new();
            let mut binder = Binder::new();
            let xv = binder.bind(&mut g, &store, x);
            let sq = g.square(xv);
            let loss = g.sum(sq);
            let grads = g.backward(loss);
            opt.step(&mut store, &binder, &grads);
        }
        let v = store.value(x);
        assert!(v[[0, 0]].abs() < 1e-3 && v[[0, 1]].abs() < 1e-3, "got {v:?}");
    }

    #[test]
    fn frozen_binding_gets_no_update() {
        let mut store = ParamStore::new();
        let x = store.add("test", "x", array![[2.0]]);
        let before = store.value(x).clone();
        let mut opt = Adam::new(0.1);
        let mut g = Graph::new();
        let mut binder = Binder::new();
        let xv = binder.frozen(&mut g, &store, x);
        let sq = g.square(xv);
        let loss = g.sum(sq);
        let grads = g.backward(loss);
        opt.step(&mut store, &binder, &grads);
        assert_eq!(store.value(x), &before);
    }

    #[test]
    fn linear_forward_shape_and_determinism() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let lin = LinearP::new(&mut store, &mut rng, "t", "l", 4, 3);
        let x = array![[1.0, 2.0, 3.0, 4.0], [0.0, 0.0, 0.0, 0.0]];
        let run = || {
            let mut g = Graph::new();
            let mut b = Binder::new();
            let xv = g.leaf(x.clone());
            let y = lin.forward(&mut g, &mut b, &store, xv, true);
            g.value(y).clone()
        };
        let y1 = run();
        assert_eq!(y1.dim(), (2, 3));
        assert_eq!(y1, run());
        // zero bias at init: zero input row maps to zero
        assert!(y1.row(1).iter().all(|v| *v == 0.0));
    }
}
