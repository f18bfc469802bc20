//! Reverse-mode gradient tape over [`Tensor`] values.
//!
//! Each operation records its output value plus a backward closure; the
//! backward pass walks nodes in reverse creation order (reverse
//! topological by construction) exactly once, accumulating gradients into
//! a side store. Shapes are validated eagerly and every op asserts a
//! finite output when debug assertions are on.
//!
//! Ops with a `canonical` flag perform reductions with fixed-point
//! accumulation ([`tensor::canonical_sum`]), making the forward value
//! independent of the summation order. Inter-proposal attention uses this
//! so that permuting proposals permutes outputs bit-identically.

use super::tensor::{
    mm_nn, mm_nt_acc, mm_tn_acc, strides_of, CanonicalAccumulator, Tensor,
};

/// Handle to a tape node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub usize);

type BackFn = Box<dyn Fn(&[Tensor], &Tensor, &mut GradStore)>;

/// Per-node gradients produced by [`Tape::backward`].
pub struct GradStore {
    grads: Vec<Option<Tensor>>,
}

impl GradStore {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of `v`, or zeros if the root never reached it.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(shape))
    }

    fn accumulate(&mut self, idx: usize, delta: Tensor) {
        match &mut self.grads[idx] {
            Some(g) => {
                debug_assert_eq!(g.shape, delta.shape);
                for (gi, di) in g.data.iter_mut().zip(delta.data) {
                    *gi += di;
                }
            }
            None => self.grads[idx] = Some(delta),
        }
    }
}

#[derive(Default)]
pub struct Tape {
    values: Vec<Tensor>,
    backs: Vec<Option<BackFn>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    fn push(&mut self, op: &'static str, value: Tensor, back: Option<BackFn>) -> Var {
        debug_assert!(
            value.all_finite(),
            "non-finite value out of op '{op}' with shape {:?}",
            value.shape
        );
        let idx = self.values.len();
        self.values.push(value);
        self.backs.push(back);
        Var(idx)
    }

    /// Leaf node (parameter, input, or constant target).
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push("input", t, None)
    }

    /// Reverse sweep from a scalar root. Nodes the root does not reach
    /// keep a `None` gradient.
    pub fn backward(&self, root: Var) -> GradStore {
        assert_eq!(
            self.values[root.0].numel(),
            1,
            "backward root must be a scalar"
        );
        let mut store = GradStore {
            grads: vec![None; self.values.len()],
        };
        store.grads[root.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=root.0).rev() {
            if store.grads[idx].is_none() {
                continue;
            }
            if let Some(back) = &self.backs[idx] {
                let g = store.grads[idx].take().unwrap();
                back(&self.values, &g, &mut store);
                store.grads[idx] = Some(g);
            }
        }
        store
    }

    // ───── elementwise ─────

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
        assert_eq!(ta.shape, tb.shape, "add: shape mismatch");
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x + y).collect();
        let value = Tensor::from_vec(&ta.shape, data);
        self.push(
            "add",
            value,
            Some(Box::new(move |_vals, g, store| {
                store.accumulate(a.0, g.clone());
                store.accumulate(b.0, g.clone());
            })),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
        assert_eq!(ta.shape, tb.shape, "sub: shape mismatch");
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x - y).collect();
        let value = Tensor::from_vec(&ta.shape, data);
        self.push(
            "sub",
            value,
            Some(Box::new(move |_vals, g, store| {
                store.accumulate(a.0, g.clone());
                let neg = Tensor::from_vec(&g.shape, g.data.iter().map(|x| -x).collect());
                store.accumulate(b.0, neg);
            })),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
        assert_eq!(ta.shape, tb.shape, "mul: shape mismatch");
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x * y).collect();
        let value = Tensor::from_vec(&ta.shape, data);
        self.push(
            "mul",
            value,
            Some(Box::new(move |vals, g, store| {
                let da = Tensor::from_vec(
                    &g.shape,
                    g.data
                        .iter()
                        .zip(&vals[b.0].data)
                        .map(|(gi, bi)| gi * bi)
                        .collect(),
                );
                let db = Tensor::from_vec(
                    &g.shape,
                    g.data
                        .iter()
                        .zip(&vals[a.0].data)
                        .map(|(gi, ai)| gi * ai)
                        .collect(),
                );
                store.accumulate(a.0, da);
                store.accumulate(b.0, db);
            })),
        )
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let ta = &self.values[a.0];
        let value = Tensor::from_vec(&ta.shape, ta.data.iter().map(|x| x * c).collect());
        self.push(
            "scale",
            value,
            Some(Box::new(move |_vals, g, store| {
                let da = Tensor::from_vec(&g.shape, g.data.iter().map(|x| x * c).collect());
                store.accumulate(a.0, da);
            })),
        )
    }

    fn unary(
        &mut self,
        op: &'static str,
        a: Var,
        f: impl Fn(f64) -> f64,
        dfdx: impl Fn(f64) -> f64 + 'static,
    ) -> Var {
        let ta = &self.values[a.0];
        let value = Tensor::from_vec(&ta.shape, ta.data.iter().map(|&x| f(x)).collect());
        self.push(
            op,
            value,
            Some(Box::new(move |vals, g, store| {
                let da = Tensor::from_vec(
                    &g.shape,
                    g.data
                        .iter()
                        .zip(&vals[a.0].data)
                        .map(|(gi, &xi)| gi * dfdx(xi))
                        .collect(),
                );
                store.accumulate(a.0, da);
            })),
        )
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary("relu", a, |x| x.max(0.0), |x| if x > 0.0 { 1.0 } else { 0.0 })
    }

    /// GELU in its tanh form.
    pub fn gelu(&mut self, a: Var) -> Var {
        const C: f64 = 0.7978845608028654; // sqrt(2/pi)
        const K: f64 = 0.044715;
        self.unary(
            "gelu",
            a,
            |x| {
                let u = C * (x + K * x * x * x);
                0.5 * x * (1.0 + u.tanh())
            },
            |x| {
                let u = C * (x + K * x * x * x);
                let t = u.tanh();
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * K * x * x)
            },
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(
            "sigmoid",
            a,
            sigmoid_scalar,
            |x| {
                let s = sigmoid_scalar(x);
                s * (1.0 - s)
            },
        )
    }

    /// Numerically stable ln(1 + e^x); derivative is the sigmoid.
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(
            "softplus",
            a,
            |x| x.max(0.0) + (-x.abs()).exp().ln_1p(),
            sigmoid_scalar,
        )
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary("abs", a, |x| x.abs(), |x| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    /// Elementwise x^p for constant p >= 0.
    pub fn powf_const(&mut self, a: Var, p: f64) -> Var {
        assert!(p >= 0.0, "powf_const requires a non-negative exponent");
        self.unary(
            "powf",
            a,
            move |x| x.powf(p),
            move |x| {
                if p == 0.0 {
                    0.0
                } else {
                    p * x.powf(p - 1.0)
                }
            },
        )
    }

    // ───── shape ─────

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let ta = &self.values[a.0];
        assert_eq!(
            ta.numel(),
            shape.iter().product::<usize>(),
            "reshape: element count mismatch"
        );
        let old_shape = ta.shape.clone();
        let value = Tensor::from_vec(shape, ta.data.clone());
        self.push(
            "reshape",
            value,
            Some(Box::new(move |_vals, g, store| {
                store.accumulate(a.0, Tensor::from_vec(&old_shape, g.data.clone()));
            })),
        )
    }

    /// Axis permutation; `axes` maps output axis -> input axis.
    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Var {
        let ta = &self.values[a.0];
        assert_eq!(axes.len(), ta.shape.len(), "permute: rank mismatch");
        let out_shape: Vec<usize> = axes.iter().map(|&ax| ta.shape[ax]).collect();
        let value = permute_data(ta, axes);
        let axes_owned = axes.to_vec();
        self.push(
            "permute",
            Tensor::from_vec(&out_shape, value),
            Some(Box::new(move |_vals, g, store| {
                // inverse permutation
                let mut inv = vec![0usize; axes_owned.len()];
                for (o, &i) in axes_owned.iter().enumerate() {
                    inv[i] = o;
                }
                let gshape: Vec<usize> = inv.iter().map(|&ax| g.shape[ax]).collect();
                let data = permute_data(g, &inv);
                store.accumulate(a.0, Tensor::from_vec(&gshape, data));
            })),
        )
    }

    /// Select rows of a 2D tensor; duplicates allowed. Gradients scatter-add.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let ta = &self.values[a.0];
        assert_eq!(ta.shape.len(), 2, "gather_rows expects a 2D tensor");
        let (rows, cols) = (ta.shape[0], ta.shape[1]);
        for &i in idx {
            assert!(i < rows, "gather_rows: row {i} out of {rows}");
        }
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            data.extend_from_slice(&ta.data[i * cols..(i + 1) * cols]);
        }
        let idx_owned = idx.to_vec();
        self.push(
            "gather_rows",
            Tensor::from_vec(&[idx.len(), cols], data),
            Some(Box::new(move |vals, g, store| {
                let rows = vals[a.0].shape[0];
                let mut da = Tensor::zeros(&[rows, cols]);
                for (m, &i) in idx_owned.iter().enumerate() {
                    for c in 0..cols {
                        da.data[i * cols + c] += g.data[m * cols + c];
                    }
                }
                store.accumulate(a.0, da);
            })),
        )
    }

    // ───── linear algebra ─────

    /// 2D matmul: [m,k] . [k,n] -> [m,n].
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
        assert_eq!(ta.shape.len(), 2, "matmul lhs must be 2D");
        assert_eq!(tb.shape.len(), 2, "matmul rhs must be 2D");
        let (m, k) = (ta.shape[0], ta.shape[1]);
        let (k2, n) = (tb.shape[0], tb.shape[1]);
        assert_eq!(k, k2, "matmul: inner dims {k} vs {k2}");
        let mut out = vec![0.0; m * n];
        mm_nn(&ta.data, &tb.data, m, k, n, &mut out);
        self.push(
            "matmul",
            Tensor::from_vec(&[m, n], out),
            Some(Box::new(move |vals, g, store| {
                let (ta, tb) = (&vals[a.0], &vals[b.0]);
                let mut da = Tensor::zeros(&[m, k]);
                mm_nt_acc(&g.data, &tb.data, m, n, k, &mut da.data);
                let mut db = Tensor::zeros(&[k, n]);
                mm_tn_acc(&ta.data, &g.data, m, k, n, &mut db.data);
                store.accumulate(a.0, da);
                store.accumulate(b.0, db);
            })),
        )
    }

    /// Batched matmul: [B,m,k] . [B,k,n] -> [B,m,n]. With `canonical` the
    /// contraction uses order-invariant fixed-point accumulation.
    pub fn bmm(&mut self, a: Var, b: Var, canonical: bool) -> Var {
        let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
        assert_eq!(ta.shape.len(), 3, "bmm lhs must be 3D");
        assert_eq!(tb.shape.len(), 3, "bmm rhs must be 3D");
        let (bs, m, k) = (ta.shape[0], ta.shape[1], ta.shape[2]);
        let (bs2, k2, n) = (tb.shape[0], tb.shape[1], tb.shape[2]);
        assert_eq!(bs, bs2, "bmm: batch {bs} vs {bs2}");
        assert_eq!(k, k2, "bmm: inner dims {k} vs {k2}");
        let mut out = vec![0.0; bs * m * n];
        for bi in 0..bs {
            let asl = &ta.data[bi * m * k..(bi + 1) * m * k];
            let bsl = &tb.data[bi * k * n..(bi + 1) * k * n];
            let osl = &mut out[bi * m * n..(bi + 1) * m * n];
            if canonical {
                for i in 0..m {
                    for j in 0..n {
                        let mut acc = CanonicalAccumulator::default();
                        for l in 0..k {
                            acc.add(asl[i * k + l] * bsl[l * n + j]);
                        }
                        osl[i * n + j] = acc.value();
                    }
                }
            } else {
                mm_nn(asl, bsl, m, k, n, osl);
            }
        }
        self.push(
            "bmm",
            Tensor::from_vec(&[bs, m, n], out),
            Some(Box::new(move |vals, g, store| {
                let (ta, tb) = (&vals[a.0], &vals[b.0]);
                let mut da = Tensor::zeros(&[bs, m, k]);
                let mut db = Tensor::zeros(&[bs, k, n]);
                for bi in 0..bs {
                    let gs = &g.data[bi * m * n..(bi + 1) * m * n];
                    let asl = &ta.data[bi * m * k..(bi + 1) * m * k];
                    let bsl = &tb.data[bi * k * n..(bi + 1) * k * n];
                    mm_nt_acc(gs, bsl, m, n, k, &mut da.data[bi * m * k..(bi + 1) * m * k]);
                    mm_tn_acc(asl, gs, m, k, n, &mut db.data[bi * k * n..(bi + 1) * k * n]);
                }
                store.accumulate(a.0, da);
                store.accumulate(b.0, db);
            })),
        )
    }

    /// Broadcast-add a bias over the last axis.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Var {
        let (ta, tb) = (&self.values[a.0], &self.values[bias.0]);
        assert_eq!(tb.shape.len(), 1, "bias must be 1D");
        let c = tb.shape[0];
        assert_eq!(
            ta.shape.last().copied().unwrap_or(0),
            c,
            "add_bias: feature dims differ"
        );
        let mut data = ta.data.clone();
        for chunk in data.chunks_mut(c) {
            for (x, b) in chunk.iter_mut().zip(&tb.data) {
                *x += b;
            }
        }
        let shape = ta.shape.clone();
        self.push(
            "add_bias",
            Tensor::from_vec(&shape, data),
            Some(Box::new(move |_vals, g, store| {
                store.accumulate(a.0, g.clone());
                let mut db = Tensor::zeros(&[c]);
                for chunk in g.data.chunks(c) {
                    for (d, &gi) in db.data.iter_mut().zip(chunk) {
                        *d += gi;
                    }
                }
                store.accumulate(bias.0, db);
            })),
        )
    }

    /// Softmax over the last axis, max-subtracted. With `canonical` the
    /// denominator uses order-invariant accumulation.
    pub fn softmax_last(&mut self, a: Var, canonical: bool) -> Var {
        let ta = &self.values[a.0];
        let c = *ta.shape.last().expect("softmax on a 0-rank tensor");
        assert!(c > 0);
        let mut data = ta.data.clone();
        for row in data.chunks_mut(c) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            for x in row.iter_mut() {
                *x = (*x - m).exp();
            }
            let denom = if canonical {
                let mut acc = CanonicalAccumulator::default();
                for &x in row.iter() {
                    acc.add(x);
                }
                acc.value()
            } else {
                row.iter().sum()
            };
            for x in row.iter_mut() {
                *x /= denom;
            }
        }
        let shape = ta.shape.clone();
        let idx_self = self.values.len();
        self.push(
            "softmax",
            Tensor::from_vec(&shape, data),
            Some(Box::new(move |vals, g, store| {
                let y = &vals[idx_self];
                let mut da = Tensor::zeros(&g.shape);
                for ((yrow, grow), orow) in y
                    .data
                    .chunks(c)
                    .zip(g.data.chunks(c))
                    .zip(da.data.chunks_mut(c))
                {
                    let dot: f64 = yrow.iter().zip(grow).map(|(yi, gi)| yi * gi).sum();
                    for ((o, &yi), &gi) in orow.iter_mut().zip(yrow).zip(grow) {
                        *o = yi * (gi - dot);
                    }
                }
                store.accumulate(a.0, da);
            })),
        )
    }

    /// Layer normalization over the last axis with affine parameters.
    pub fn layer_norm(&mut self, a: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let (ta, tg, tb) = (
            &self.values[a.0],
            &self.values[gamma.0],
            &self.values[beta.0],
        );
        let c = *ta.shape.last().expect("layer_norm on a 0-rank tensor");
        assert_eq!(tg.shape, vec![c], "layer_norm: gamma must be [{c}]");
        assert_eq!(tb.shape, vec![c], "layer_norm: beta must be [{c}]");
        let mut data = vec![0.0; ta.numel()];
        let mut xhat = vec![0.0; ta.numel()];
        let mut inv_sigma = vec![0.0; ta.numel() / c];
        for (r, row) in ta.data.chunks(c).enumerate() {
            let mu = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_sigma[r] = inv;
            for (j, &x) in row.iter().enumerate() {
                let xh = (x - mu) * inv;
                xhat[r * c + j] = xh;
                data[r * c + j] = tg.data[j] * xh + tb.data[j];
            }
        }
        let shape = ta.shape.clone();
        self.push(
            "layer_norm",
            Tensor::from_vec(&shape, data),
            Some(Box::new(move |vals, g, store| {
                let gval = &vals[gamma.0].data;
                let rows = g.numel() / c;
                let mut da = Tensor::zeros(&g.shape);
                let mut dgamma = Tensor::zeros(&[c]);
                let mut dbeta = Tensor::zeros(&[c]);
                for r in 0..rows {
                    let grow = &g.data[r * c..(r + 1) * c];
                    let xrow = &xhat[r * c..(r + 1) * c];
                    let mut mean_dxhat = 0.0;
                    let mut mean_dxhat_xhat = 0.0;
                    for j in 0..c {
                        let dxh = grow[j] * gval[j];
                        mean_dxhat += dxh;
                        mean_dxhat_xhat += dxh * xrow[j];
                        dgamma.data[j] += grow[j] * xrow[j];
                        dbeta.data[j] += grow[j];
                    }
                    mean_dxhat /= c as f64;
                    mean_dxhat_xhat /= c as f64;
                    for j in 0..c {
                        let dxh = grow[j] * gval[j];
                        da.data[r * c + j] =
                            inv_sigma[r] * (dxh - mean_dxhat - xrow[j] * mean_dxhat_xhat);
                    }
                }
                store.accumulate(a.0, da);
                store.accumulate(gamma.0, dgamma);
                store.accumulate(beta.0, dbeta);
            })),
        )
    }

    /// Sum of all elements, a scalar.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let ta = &self.values[a.0];
        let s: f64 = ta.data.iter().sum();
        let shape = ta.shape.clone();
        self.push(
            "sum_all",
            Tensor::scalar(s),
            Some(Box::new(move |_vals, g, store| {
                let gi = g.item();
                store.accumulate(a.0, Tensor::from_vec(&shape, vec![gi; shape.iter().product()]));
            })),
        )
    }
}

#[inline]
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn permute_data(t: &Tensor, axes: &[usize]) -> Vec<f64> {
    let in_strides = strides_of(&t.shape);
    let out_shape: Vec<usize> = axes.iter().map(|&ax| t.shape[ax]).collect();
    let out_strides = strides_of(&out_shape);
    let n = t.numel();
    let mut out = vec![0.0; n];
    let rank = axes.len();
    for (o, slot) in out.iter_mut().enumerate() {
        let mut rem = o;
        let mut src = 0usize;
        for d in 0..rank {
            let coord = rem / out_strides[d];
            rem %= out_strides[d];
            src += coord * in_strides[axes[d]];
        }
        *slot = t.data[src];
    }
    out
}
