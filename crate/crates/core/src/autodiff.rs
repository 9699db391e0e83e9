//! Tape-based reverse-mode automatic differentiation over 2-D f64 arrays.
//!
//! A [`Graph`] is built fresh for every forward pass. Nodes are created in
//! topological order, so the backward sweep is a single reverse walk over
//! the tape. All values are `Array2<f64>`; scalars are 1x1 arrays. Batches
//! are rows for classifier-style work and channels x time for sequences.
//!
//! Two properties the rest of the crate leans on:
//! - every op is deterministic, so whole training runs are bit-reproducible;
//! - [`Graph::grl`] is an explicit node whose backward multiplies the
//!   incoming gradient by `-scale`, which makes the gradient-reversal
//!   contract directly testable against the same graph without the node.

use ndarray::{s, Array2, Axis};

pub type Arr = Array2<f64>;

/// Handle to a node on the tape.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(pub(crate) usize);

type BackFn = Box<dyn Fn(&Arr, &[Arr], &mut [Option<Arr>])>;

pub struct Graph {
    values: Vec<Arr>,
    backs: Vec<Option<BackFn>>,
}

/// Gradients of one backward sweep, indexed by the node ids of the graph
/// that produced them.
pub struct Grads {
    by_node: Vec<Option<Arr>>,
}

impl Grads {
    pub fn of(&self, v: Var) -> Option<&Arr> {
        self.by_node.get(v.0).and_then(|g| g.as_ref())
    }
}

fn accum(grads: &mut [Option<Arr>], id: usize, g: Arr) {
    match &mut grads[id] {
        Some(acc) => *acc += &g,
        slot => *slot = Some(g),
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { values: Vec::new(), backs: Vec::new() }
    }

    fn push(&mut self, value: Arr, back: Option<BackFn>) -> Var {
        self.values.push(value);
        self.backs.push(back);
        Var(self.values.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Arr {
        &self.values[v.0]
    }

    /// Scalar convenience accessor; panics on non-1x1 nodes.
    pub fn scalar(&self, v: Var) -> f64 {
        let a = self.value(v);
        assert_eq!(a.dim(), (1, 1), "node is not a scalar");
        a[[0, 0]]
    }

    /// Leaf node. Gradients are accumulated for leaves too, so inputs can be
    /// differentiated against without being parameters.
    pub fn leaf(&mut self, value: Arr) -> Var {
        self.push(value, None)
    }

    pub fn leaf_scalar(&mut self, value: f64) -> Var {
        self.leaf(Arr::from_elem((1, 1), value))
    }

    /// Matrix product `a • b`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.values[a.0].dot(&self.values[b.0]);
        let (ai, bi) = (a.0, b.0);
        self.push(
            value,
            Some(Box::new(move |g, vals, grads| {
                accum(grads, ai, g.dot(&vals[bi].t()));
                accum(grads, bi, vals[ai].t().dot(g));
            })),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = &self.values[a.0] + &self.values[b.0];
        let (ai, bi) = (a.0, b.0);
        self.push(
            value,
            Some(Box::new(move |g, _, grads| {
                accum(grads, ai, g.clone());
                accum(grads, bi, g.clone());
            })),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = &self.values[a.0] - &self.values[b.0];
        let (ai, bi) = (a.0, b.0);
        self.push(
            value,
            Some(Box::new(move |g, _, grads| {
                accum(grads, ai, g.clone());
                accum(grads, bi, -g);
            })),
        )
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = &self.values[a.0] * &self.values[b.0];
        let (ai, bi) = (a.0, b.0);
        self.push(
            value,
            Some(Box::new(move |g, vals, grads| {
                accum(grads, ai, g * &vals[bi]);
                accum(grads, bi, g * &vals[ai]);
            })),
        )
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = &self.values[a.0] * c;
        let ai = a.0;
        self.push(value, Some(Box::new(move |g, _, grads| accum(grads, ai, g * c))))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = &self.values[a.0] + c;
        let ai = a.0;
        self.push(value, Some(Box::new(move |g, _, grads| accum(grads, ai, g.clone()))))
    }

    /// Broadcast add of a `[1, D]` row bias onto an `[N, D]` matrix.
    pub fn add_bias_row(&mut self, a: Var, bias: Var) -> Var {
        let value = &self.values[a.0] + &self.values[bias.0];
        let (ai, bi) = (a.0, bias.0);
        self.push(
            value,
            Some(Box::new(move |g, _, grads| {
                accum(grads, ai, g.clone());
                accum(grads, bi, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            })),
        )
    }

    /// Broadcast add of a `[C, 1]` column bias onto a `[C, T]` matrix.
    pub fn add_bias_col(&mut self, a: Var, bias: Var) -> Var {
        let value = &self.values[a.0] + &self.values[bias.0];
        let (ai, bi) = (a.0, bias.0);
        self.push(
            value,
            Some(Box::new(move |g, _, grads| {
                accum(grads, ai, g.clone());
                accum(grads, bi, g.sum_axis(Axis(1)).insert_axis(Axis(1)));
            })),
        )
    }

    /// GeLU, tanh form.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.values[a.0].mapv(gelu_scalar);
        let ai = a.0;
        self.push(
            value,
            Some(Box::new(move |g, vals, grads| {
                accum(grads, ai, g * &vals[ai].mapv(gelu_grad_scalar));
            })),
        )
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.values[a.0].mapv(f64::tanh);
        let ai = a.0;
        self.push(
            value,
            Some(Box::new(move |g, vals, grads| {
                accum(grads, ai, g * &vals[ai].mapv(|x| 1.0 - x.tanh().powi(2)));
            })),
        )
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.values[a.0].mapv(f64::exp);
        let ai = a.0;
        let cached = value.clone();
        self.push(
            value,
            Some(Box::new(move |g, _, grads| {
                accum(grads, ai, g * &cached);
            })),
        )
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.values[a.0].mapv(|x| x * x);
        let ai = a.0;
        self.push(
            value,
            Some(Box::new(move |g, vals, grads| {
                accum(grads, ai, g * &(&vals[ai] * 2.0));
            })),
        )
    }

    /// Elementwise clamp. Gradient passes through strictly inside the bounds
    /// and is zero where the value was clipped.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let value = self.values[a.0].mapv(|x| x.clamp(lo, hi));
        let ai = a.0;
        self.push(
            value,
            Some(Box::new(move |g, vals, grads| {
                let mask = vals[ai].mapv(|x| if x > lo && x < hi { 1.0 } else { 0.0 });
                accum(grads, ai, g * &mask);
            })),
        )
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Arr::from_elem((1, 1), self.values[a.0].sum());
        let ai = a.0;
        self.push(
            value,
            Some(Box::new(move |g, vals, grads| {
                accum(grads, ai, Arr::from_elem(vals[ai].dim(), g[[0, 0]]));
            })),
        )
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.values[a.0].len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Row sums: `[N, D]` -> `[N, 1]`.
    pub fn sum_axis1(&mut self, a: Var) -> Var {
        let value = self.values[a.0].sum_axis(Axis(1)).insert_axis(Axis(1));
        let ai = a.0;
        self.push(
            value,
            Some(Box::new(move |g, vals, grads| {
                let d = vals[ai].ncols();
                let mut out = Arr::zeros(vals[ai].dim());
                for (mut row, gv) in out.rows_mut().into_iter().zip(g.column(0)) {
                    row.fill(*gv);
                    let _ = d;
                }
                accum(grads, ai, out);
            })),
        )
    }

    /// Column sums: `[N, D]` -> `[1, D]`.
    pub fn sum_axis0(&mut self, a: Var) -> Var {
        let value = self.values[a.0].sum_axis(Axis(0)).insert_axis(Axis(0));
        let ai = a.0;
        self.push(
            value,
            Some(Box::new(move |g, vals, grads| {
                let mut out = Arr::zeros(vals[ai].dim());
                for mut row in out.rows_mut() {
                    row += &g.row(0);
                }
                accum(grads, ai, out);
            })),
        )
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.values[a.0].t().to_owned();
        let ai = a.0;
        self.push(
            value,
            Some(Box::new(move |g, _, grads| {
                accum(grads, ai, g.t().to_owned());
            })),
        )
    }

    /// Gradient reversal: identity forward, backward multiplies by `-scale`.
    pub fn grl(&mut self, a: Var, scale: f64) -> Var {
        let value = self.values[a.0].clone();
        let ai = a.0;
        self.push(
            value,
            Some(Box::new(move |g, _, grads| {
                accum(grads, ai, g * (-scale));
            })),
        )
    }

    /// Identity forward, no gradient flows upstream.
    pub fn detach(&mut self, a: Var) -> Var {
        let value = self.values[a.0].clone();
        self.push(value, None)
    }

    /// Mean softmax cross-entropy of row logits against class indices.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let x = &self.values[logits.0];
        let n = x.nrows();
        assert_eq!(n, labels.len(), "one label per logit row");
        let mut probs = x.clone();
        let mut loss = 0.0;
        for (mut row, &lab) in probs.rows_mut().into_iter().zip(labels) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|v| (v - max).exp());
            let z = row.sum();
            row.mapv_inplace(|v| v / z);
            loss -= row[lab].ln();
        }
        loss /= n as f64;
        let li = logits.0;
        let labels = labels.to_vec();
        self.push(
            Arr::from_elem((1, 1), loss),
            Some(Box::new(move |g, _, grads| {
                let mut gl = probs.clone();
                for (mut row, &lab) in gl.rows_mut().into_iter().zip(&labels) {
                    row[lab] -= 1.0;
                }
                gl *= g[[0, 0]] / labels.len() as f64;
                accum(grads, li, gl);
            })),
        )
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let sq = self.square(d);
        self.mean(sq)
    }

    /// Mean absolute error over all elements.
    pub fn l1(&mut self, a: Var, b: Var) -> Var {
        let diff = &self.values[a.0] - &self.values[b.0];
        let n = diff.len() as f64;
        let value = Arr::from_elem((1, 1), diff.mapv(f64::abs).sum() / n);
        let (ai, bi) = (a.0, b.0);
        self.push(
            value,
            Some(Box::new(move |g, vals, grads| {
                let sign = (&vals[ai] - &vals[bi]).mapv(f64::signum);
                let scaled = &sign * (g[[0, 0]] / sign.len() as f64);
                accum(grads, ai, scaled.clone());
                accum(grads, bi, -scaled);
            })),
        )
    }

    /// Rows `[start, start+len)` of `a`.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.values[a.0].slice(s![start..start + len, ..]).to_owned();
        let ai = a.0;
        self.push(
            value,
            Some(Box::new(move |g, vals, grads| {
                let mut out = Arr::zeros(vals[ai].dim());
                out.slice_mut(s![start..start + len, ..]).assign(g);
                accum(grads, ai, out);
            })),
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|v| self.values[v.0].view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("row concat");
        let ids: Vec<usize> = parts.iter().map(|v| v.0).collect();
        self.push(
            value,
            Some(Box::new(move |g, vals, grads| {
                let mut r = 0;
                for &id in &ids {
                    let n = vals[id].nrows();
                    accum(grads, id, g.slice(s![r..r + n, ..]).to_owned());
                    r += n;
                }
            })),
        )
    }

    /// Embedding lookup: rows of `table` selected by `ids`, shape `[len, D]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = &self.values[table.0];
        let mut value = Arr::zeros((ids.len(), t.ncols()));
        for (mut row, &id) in value.rows_mut().into_iter().zip(ids) {
            row.assign(&t.row(id));
        }
        let ti = table.0;
        let ids = ids.to_vec();
        self.push(
            value,
            Some(Box::new(move |g, vals, grads| {
                let mut out = Arr::zeros(vals[ti].dim());
                for (grow, &id) in g.rows().into_iter().zip(&ids) {
                    let mut trow = out.row_mut(id);
                    trow += &grow;
                }
                accum(grads, ti, out);
            })),
        )
    }

    /// Same-padded 1-D convolution over time. `x` is `[C_in, T]`, `w` is
    /// `[C_out, C_in*K]` laid out channel-major then tap, odd `k`.
    pub fn conv1d_same(&mut self, x: Var, w: Var, k: usize) -> Var {
        assert!(k % 2 == 1, "kernel must be odd for same padding");
        let cols = im2col(&self.values[x.0], k);
        let value = self.values[w.0].dot(&cols);
        let (xi, wi) = (x.0, w.0);
        self.push(
            value,
            Some(Box::new(move |g, vals, grads| {
                let cols = im2col(&vals[xi], k);
                accum(grads, wi, g.dot(&cols.t()));
                let gcols = vals[wi].t().dot(g);
                accum(grads, xi, col2im(&gcols, vals[xi].dim(), k));
            })),
        )
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Grads {
        assert_eq!(self.values[root.0].dim(), (1, 1), "backward root must be scalar");
        let mut by_node: Vec<Option<Arr>> = vec![None; self.values.len()];
        by_node[root.0] = Some(Arr::from_elem((1, 1), 1.0));
        for id in (0..=root.0).rev() {
            if by_node[id].is_none() {
                continue;
            }
            if let Some(back) = &self.backs[id] {
                let g = by_node[id].clone().unwrap();
                back(&g, &self.values, &mut by_node);
            }
        }
        Grads { by_node }
    }
}

pub fn gelu_scalar(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let u = c * (x + 0.044715 * x.powi(3));
    let t = u.tanh();
    let du = c * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Unfold `[C, T]` into `[C*K, T]` with zero padding, tap-major per channel.
fn im2col(x: &Arr, k: usize) -> Arr {
    let (c, t) = x.dim();
    let half = (k / 2) as isize;
    let mut out = Arr::zeros((c * k, t));
    for ci in 0..c {
        for ki in 0..k {
            let shift = ki as isize - half;
            for ti in 0..t {
                let src = ti as isize + shift;
                if src >= 0 && (src as usize) < t {
                    out[[ci * k + ki, ti]] = x[[ci, src as usize]];
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`].
fn col2im(cols: &Arr, dim: (usize, usize), k: usize) -> Arr {
    let (c, t) = dim;
    let half = (k / 2) as isize;
    let mut out = Arr::zeros((c, t));
    for ci in 0..c {
        for ki in 0..k {
            let shift = ki as isize - half;
            for ti in 0..t {
                let src = ti as isize + shift;
                if src >= 0 && (src as usize) < t {
                    out[[ci, src as usize]] += cols[[ci * k + ki, ti]];
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn rand_arr(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Arr {
        Arr::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    /// Central finite differences on every entry of every input.
    fn check_grads(build: impl Fn(&mut Graph, &[Var]) -> Var, inputs: &[Arr], tol: f64) {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|a| g.leaf(a.clone())).collect();
        let root = build(&mut g, &vars);
        let grads = g.backward(root);

        let h = 1e-6;
        for (vi, base) in inputs.iter().enumerate() {
            let analytic = grads.of(vars[vi]).cloned().unwrap_or_else(|| Arr::zeros(base.dim()));
            for idx in 0..base.len() {
                let (r, c) = (idx / base.ncols(), idx % base.ncols());
                let eval = |delta: f64| {
                    let mut g2 = Graph::new();
                    let vs: Vec<Var> = inputs
                        .iter()
                        .enumerate()
                        .map(|(i, a)| {
                            let mut a = a.clone();
                            if i == vi {
                                a[[r, c]] += delta;
                            }
                            g2.leaf(a)
                        })
                        .collect();
                    let root = build(&mut g2, &vs);
                    g2.scalar(root)
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let an = analytic[[r, c]];
                let denom = fd.abs().max(an.abs()).max(1.0);
                assert!(
                    (fd - an).abs() / denom < tol,
                    "input {vi} entry ({r},{c}): fd={fd} analytic={an}"
                );
            }
        }
    }

    #[test]
    fn matmul_add_bias_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_arr(&mut rng, 3, 4);
        let w = rand_arr(&mut rng, 4, 2);
        let b = rand_arr(&mut rng, 1, 2);
        check_grads(
            |g, v| {
                let y = g.matmul(v[0], v[1]);
                let y = g.add_bias_row(y, v[2]);
                let sq = g.square(y);
                g.sum(sq)
            },
            &[x, w, b],
            1e-6,
        );
    }

    #[test]
    fn elementwise_chain_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = rand_arr(&mut rng, 2, 3);
        let b = rand_arr(&mut rng, 2, 3);
        check_grads(
            |g, v| {
                let m = g.mul(v[0], v[1]);
                let e = g.exp(m);
                let t = g.tanh(e);
                let ge = g.gelu(t);
                g.mean(ge)
            },
            &[a, b],
            1e-5,
        );
    }

    #[test]
    fn reduction_and_slice_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = rand_arr(&mut rng, 4, 3);
        check_grads(
            |g, v| {
                let top = g.slice_rows(v[0], 0, 2);
                let bot = g.slice_rows(v[0], 2, 2);
                let joined = g.concat_rows(&[bot, top]);
                let rows = g.sum_axis1(joined);
                let cols = g.sum_axis0(rows);
                let sq = g.square(cols);
                g.sum(sq)
            },
            &[a],
            1e-6,
        );
    }

    #[test]
    fn softmax_ce_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let logits = rand_arr(&mut rng, 5, 4);
        let labels = vec![0, 3, 1, 2, 2];
        check_grads(|g, v| g.softmax_cross_entropy(v[0], &labels), &[logits], 1e-6);
    }

    #[test]
    fn conv1d_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_arr(&mut rng, 3, 7);
        let w = rand_arr(&mut rng, 2, 9);
        check_grads(
            |g, v| {
                let y = g.conv1d_same(v[0], v[1], 3);
                let sq = g.square(y);
                g.sum(sq)
            },
            &[x, w],
            1e-6,
        );
    }

    #[test]
    fn gather_and_transpose_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let table = rand_arr(&mut rng, 5, 3);
        let ids = vec![4, 0, 0, 2];
        check_grads(
            |g, v| {
                let rows = g.gather_rows(v[0], &ids);
                let t = g.transpose(rows);
                let sq = g.square(t);
                g.sum(sq)
            },
            &[table],
            1e-6,
        );
    }

    #[test]
    fn l1_and_clamp_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = rand_arr(&mut rng, 3, 3);
        let b = rand_arr(&mut rng, 3, 3);
        // keep values away from clamp knees and the |.| kink so FD is clean
        let a = a.mapv(|x| x * 0.4);
        check_grads(
            |g, v| {
                let c = g.clamp(v[0], -0.45, 0.45);
                g.l1(c, v[1])
            },
            &[a, b],
            1e-5,
        );
    }

    #[test]
    fn grl_reverses_exactly() {
        let x = array![[1.0, -2.0], [0.5, 3.0]];
        let w = array![[0.3], [-0.7]];

        let run = |with_grl: bool| {
            let mut g = Graph::new();
            let xv = g.leaf(x.clone());
            let wv = g.leaf(w.clone());
            let h = if with_grl { g.grl(xv, 1.0) } else { xv };
            let y = g.matmul(h, wv);
            let sq = g.square(y);
            let loss = g.sum(sq);
            let grads = g.backward(loss);
            (grads.of(xv).cloned().unwrap(), grads.of(wv).cloned().unwrap())
        };

        let (gx_plain, gw_plain) = run(false);
        let (gx_grl, gw_grl) = run(true);
        // upstream of the GRL: exact negation; downstream params untouched
        assert_eq!(gx_grl, -gx_plain);
        assert_eq!(gw_grl, gw_plain);
    }

    #[test]
    fn grl_scale_zero_blocks_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(array![[1.0, 2.0]]);
        let r = g.grl(x, 0.0);
        let sq = g.square(r);
        let loss = g.sum(sq);
        let grads = g.backward(loss);
        assert_eq!(grads.of(x).unwrap(), &array![[0.0, 0.0]]);
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(array![[1.0, 2.0]]);
        let d = g.detach(x);
        let sq = g.square(d);
        let loss = g.sum(sq);
        let grads = g.backward(loss);
        assert!(grads.of(x).is_none());
    }

    #[test]
    fn fan_out_accumulates() {
        // y = x*x + x  => dy/dx = 2x + 1
        let mut g = Graph::new();
        let x = g.leaf(array![[3.0]]);
        let sq = g.square(x);
        let y = g.add(sq, x);
        let loss = g.sum(y);
        let grads = g.backward(loss);
        assert_eq!(grads.of(x).unwrap()[[0, 0]], 7.0);
    }
}
