//! Reverse-mode automatic differentiation on dynamically shaped arrays.
//!
//! A [`Tape`] records one forward computation; [`Tape::backward`] walks the
//! recorded nodes in reverse and accumulates gradients for every leaf.
//! Parameters are registered through [`Tape::param`] so their gradients can
//! be collected by id after the backward pass.
//!
//! Ops keep `ArcArray` handles to whatever values their backward closure
//! needs; cloning a handle is a refcount bump, not a copy.

use std::collections::HashMap;

use ndarray::{ArcArray, Array1, Array2, ArrayD, ArrayViewD, Axis, Ix1, Ix2, Ix4, IxDyn};

use crate::nn::Param;
use crate::scalar::Scalar;

type Shared<F> = ArcArray<F, IxDyn>;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

type BackFn<F> = Box<dyn Fn(&ArrayD<F>, &mut GradSink<F>)>;

struct Node<F: Scalar> {
    value: Shared<F>,
    param_id: Option<u64>,
    back: Option<BackFn<F>>,
}

/// Gradient accumulator used while walking the tape backwards.
pub struct GradSink<F: Scalar> {
    grads: Vec<Option<ArrayD<F>>>,
}

impl<F: Scalar> GradSink<F> {
    fn add(&mut self, var: Var, delta: ArrayD<F>) {
        match &mut self.grads[var.0] {
            Some(g) => *g += &delta,
            slot @ None => *slot = Some(delta),
        }
    }
}

/// Gradients produced by one backward pass.
pub struct GradStore<F: Scalar> {
    by_var: HashMap<usize, ArrayD<F>>,
    by_param: HashMap<u64, ArrayD<F>>,
}

impl<F: Scalar> GradStore<F> {
    pub fn for_var(&self, v: Var) -> Option<&ArrayD<F>> {
        self.by_var.get(&v.0)
    }

    pub fn for_param(&self, p: &Param<F>) -> Option<&ArrayD<F>> {
        self.by_param.get(&p.id())
    }

    pub fn for_param_id(&self, id: u64) -> Option<&ArrayD<F>> {
        self.by_param.get(&id)
    }
}

pub struct Tape<F: Scalar> {
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, value: ArrayD<F>, back: Option<BackFn<F>>) -> Var {
        self.nodes.push(Node {
            value: value.into_shared(),
            param_id: None,
            back,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives no parameter bookkeeping.
    pub fn constant(&mut self, value: ArrayD<F>) -> Var {
        self.push(value, None)
    }

    /// Leaf tied to a parameter; its gradient is retrievable by param id.
    pub fn param(&mut self, p: &Param<F>) -> Var {
        let v = self.push(p.value.clone(), None);
        self.nodes[v.0].param_id = Some(p.id());
        v
    }

    pub fn value(&self, v: Var) -> ArrayViewD<'_, F> {
        self.nodes[v.0].value.view()
    }

    pub fn scalar(&self, v: Var) -> F {
        let val = self.value(v);
        debug_assert_eq!(val.len(), 1, "scalar() on non-scalar node");
        *val.iter().next().expect("empty node")
    }

    fn shared(&self, v: Var) -> Shared<F> {
        self.nodes[v.0].value.clone()
    }

    fn dims(&self, v: Var) -> Vec<usize> {
        self.nodes[v.0].value.shape().to_vec()
    }

    /// Backpropagate from a scalar root. Returns gradients for every leaf
    /// reached by the sweep.
    pub fn backward(&self, root: Var) -> GradStore<F> {
        let root_val = &self.nodes[root.0].value;
        assert_eq!(root_val.len(), 1, "backward root must be scalar");

        let mut sink = GradSink {
            grads: vec![None; self.nodes.len()],
        };
        sink.grads[root.0] = Some(ArrayD::from_elem(root_val.raw_dim(), F::one()));

        let mut store = GradStore {
            by_var: HashMap::new(),
            by_param: HashMap::new(),
        };

        for i in (0..=root.0).rev() {
            let Some(g) = sink.grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            match &node.back {
                Some(back) => back(&g, &mut sink),
                None => {
                    if let Some(pid) = node.param_id {
                        store.by_param.insert(pid, g.clone());
                    }
                    store.by_var.insert(i, g);
                }
            }
        }
        store
    }
}

fn as2<F: Scalar>(a: &Shared<F>) -> Array2<F> {
    a.view()
        .into_dimensionality::<Ix2>()
        .expect("2-d value")
        .to_owned()
}

fn as1<F: Scalar>(a: &Shared<F>) -> Array1<F> {
    a.view()
        .into_dimensionality::<Ix1>()
        .expect("1-d value")
        .to_owned()
}

fn g2<F: Scalar>(g: &ArrayD<F>) -> ndarray::ArrayView2<'_, F> {
    g.view().into_dimensionality::<Ix2>().expect("2-d grad")
}

// ---------------------------------------------------------------------------
// elementwise and structural ops
// ---------------------------------------------------------------------------

impl<F: Scalar> Tape<F> {
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.dims(a), self.dims(b), "add shape");
        let value = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(
            value.to_owned(),
            Some(Box::new(move |g, sink| {
                sink.add(a, g.clone());
                sink.add(b, g.clone());
            })),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.dims(a), self.dims(b), "sub shape");
        let value = &self.nodes[a.0].value - &self.nodes[b.0].value;
        self.push(
            value.to_owned(),
            Some(Box::new(move |g, sink| {
                sink.add(a, g.clone());
                sink.add(b, g.mapv(|x| -x));
            })),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.dims(a), self.dims(b), "mul shape");
        let av = self.shared(a);
        let bv = self.shared(b);
        let value = (&av * &bv).to_owned();
        self.push(
            value,
            Some(Box::new(move |g, sink| {
                sink.add(a, (g * &bv).to_owned());
                sink.add(b, (g * &av).to_owned());
            })),
        )
    }

    pub fn scale(&mut self, a: Var, c: F) -> Var {
        let value = self.nodes[a.0].value.mapv(|x| x * c);
        self.push(
            value,
            Some(Box::new(move |g, sink| sink.add(a, g.mapv(|x| x * c)))),
        )
    }

    /// Matrix (n×m) plus a broadcast row vector (m).
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let am = as2(&self.shared(a));
        let rv = as1(&self.shared(row));
        assert_eq!(am.ncols(), rv.len(), "add_row width");
        let value = (&am + &rv).into_dyn();
        self.push(
            value,
            Some(Box::new(move |g, sink| {
                let gm = g2(g);
                sink.add(a, g.clone());
                sink.add(row, gm.sum_axis(Axis(0)).into_dyn());
            })),
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let am = as2(&self.shared(a));
        let bm = as2(&self.shared(b));
        assert_eq!(am.ncols(), bm.nrows(), "matmul inner dim");
        let value = am.dot(&bm).into_dyn();
        self.push(
            value,
            Some(Box::new(move |g, sink| {
                let gm = g2(g);
                sink.add(a, gm.dot(&bm.t()).into_dyn());
                sink.add(b, am.t().dot(&gm).into_dyn());
            })),
        )
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let am = as2(&self.shared(a));
        let value = am.t().to_owned().into_dyn();
        self.push(
            value,
            Some(Box::new(move |g, sink| {
                sink.add(a, g2(g).t().to_owned().into_dyn());
            })),
        )
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let views: Vec<_> = parts.iter().map(|v| self.nodes[v.0].value.view()).collect();
        let value = ndarray::concatenate(Axis(axis), &views).expect("concat shapes");
        let parts: Vec<Var> = parts.to_vec();
        let sizes: Vec<usize> = parts.iter().map(|v| self.dims(*v)[axis]).collect();
        self.push(
            value,
            Some(Box::new(move |g, sink| {
                let mut off = 0;
                for (v, s) in parts.iter().zip(&sizes) {
                    let piece = g
                        .slice_axis(Axis(axis), ndarray::Slice::from(off..off + s))
                        .to_owned();
                    sink.add(*v, piece);
                    off += s;
                }
            })),
        )
    }

    fn slice_axis_op(&mut self, a: Var, axis: usize, lo: usize, hi: usize) -> Var {
        let shape = self.dims(a);
        assert!(hi <= shape[axis] && lo < hi, "slice bounds");
        let value = self.nodes[a.0]
            .value
            .slice_axis(Axis(axis), ndarray::Slice::from(lo..hi))
            .to_owned();
        self.push(
            value,
            Some(Box::new(move |g, sink| {
                let mut full = ArrayD::zeros(IxDyn(&shape));
                full.slice_axis_mut(Axis(axis), ndarray::Slice::from(lo..hi))
                    .assign(g);
                sink.add(a, full);
            })),
        )
    }

    pub fn slice_rows(&mut self, a: Var, lo: usize, hi: usize) -> Var {
        self.slice_axis_op(a, 0, lo, hi)
    }

    pub fn slice_cols(&mut self, a: Var, lo: usize, hi: usize) -> Var {
        self.slice_axis_op(a, 1, lo, hi)
    }

    /// Row-wise dot product of two equally shaped matrices → vector (n).
    pub fn row_dot(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.dims(a), self.dims(b), "row_dot shape");
        let av = self.shared(a);
        let bv = self.shared(b);
        let am = as2(&av);
        let bm = as2(&bv);
        let value = (&am * &bm).sum_axis(Axis(1)).into_dyn();
        self.push(
            value,
            Some(Box::new(move |g, sink| {
                let gv = g.view().into_dimensionality::<Ix1>().expect("1-d grad");
                let am = as2(&av);
                let bm = as2(&bv);
                let gcol = gv.view().insert_axis(Axis(1));
                sink.add(a, (&bm * &gcol).into_dyn());
                sink.add(b, (&am * &gcol).into_dyn());
            })),
        )
    }

    /// View the same elements under a new shape (row-major order).
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let old_shape = self.dims(a);
        let value = self.nodes[a.0]
            .value
            .to_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape element count");
        let old = old_shape.clone();
        self.push(
            value,
            Some(Box::new(move |g, sink| {
                let back = g
                    .to_owned()
                    .into_shape_with_order(IxDyn(&old))
                    .expect("reshape grad");
                sink.add(a, back);
            })),
        )
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.len();
        let inv = F::from_f64(1.0 / n as f64);
        let total: F = self.nodes[a.0].value.iter().copied().sum();
        let shape = self.dims(a);
        let value = ArrayD::from_elem(IxDyn(&[]), total * inv);
        self.push(
            value,
            Some(Box::new(move |g, sink| {
                let gs = *g.iter().next().expect("scalar grad");
                sink.add(a, ArrayD::from_elem(IxDyn(&shape), gs * inv));
            })),
        )
    }

    /// Mean of scalar nodes (used to average per-example losses).
    pub fn mean_of(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "mean of nothing");
        let n = parts.len();
        let inv = F::from_f64(1.0 / n as f64);
        let total: F = parts.iter().map(|v| self.scalar(*v)).sum();
        let parts: Vec<Var> = parts.to_vec();
        self.push(
            ArrayD::from_elem(IxDyn(&[]), total * inv),
            Some(Box::new(move |g, sink| {
                let gs = *g.iter().next().expect("scalar grad");
                for v in &parts {
                    sink.add(*v, ArrayD::from_elem(IxDyn(&[]), gs * inv));
                }
            })),
        )
    }
}

// ---------------------------------------------------------------------------
// nonlinearities, normalizations, losses
// ---------------------------------------------------------------------------

impl<F: Scalar> Tape<F> {
    pub fn relu(&mut self, a: Var) -> Var {
        let av = self.shared(a);
        let value = av.mapv(|x| if x > F::zero() { x } else { F::zero() });
        self.push(
            value,
            Some(Box::new(move |g, sink| {
                let mut d = g.clone();
                d.zip_mut_with(&av, |gi, &xi| {
                    if xi <= F::zero() {
                        *gi = F::zero();
                    }
                });
                sink.add(a, d);
            })),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let one = F::one();
        let value = self.nodes[a.0].value.mapv(|x| one / (one + (-x).exp()));
        let y = value.clone().into_shared();
        self.push(
            value,
            Some(Box::new(move |g, sink| {
                let mut d = g.clone();
                d.zip_mut_with(&y, |gi, &yi| *gi = *gi * yi * (F::one() - yi));
                sink.add(a, d);
            })),
        )
    }

    pub fn tanh_op(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(|x| x.tanh());
        let y = value.clone().into_shared();
        self.push(
            value,
            Some(Box::new(move |g, sink| {
                let mut d = g.clone();
                d.zip_mut_with(&y, |gi, &yi| *gi = *gi * (F::one() - yi * yi));
                sink.add(a, d);
            })),
        )
    }

    /// Row softmax over a (n×m) matrix. Columns where `key_mask` is false
    /// receive zero probability and pass no gradient.
    pub fn softmax_rows(&mut self, a: Var, key_mask: Option<&[bool]>) -> Var {
        let am = as2(&self.shared(a));
        let mask: Option<Vec<bool>> = key_mask.map(|m| {
            assert_eq!(m.len(), am.ncols(), "mask width");
            m.to_vec()
        });
        let mut value = Array2::<F>::zeros(am.raw_dim());
        for (i, row) in am.rows().into_iter().enumerate() {
            let active = |j: usize| mask.as_ref().map_or(true, |m| m[j]);
            let mut mx = F::neg_infinity();
            for (j, &x) in row.iter().enumerate() {
                if active(j) && x > mx {
                    mx = x;
                }
            }
            if mx == F::neg_infinity() {
                continue; // fully masked row: all-zero weights
            }
            let mut denom = F::zero();
            for (j, &x) in row.iter().enumerate() {
                if active(j) {
                    let e = (x - mx).exp();
                    value[[i, j]] = e;
                    denom += e;
                }
            }
            for j in 0..row.len() {
                value[[i, j]] = value[[i, j]] / denom;
            }
        }
        let y = value.clone().into_shared();
        self.push(
            value.into_dyn(),
            Some(Box::new(move |g, sink| {
                let gm = g2(g);
                let ym = y.view().into_dimensionality::<Ix2>().expect("2-d");
                let mut d = Array2::<F>::zeros(ym.raw_dim());
                for i in 0..ym.nrows() {
                    let mut dot = F::zero();
                    for j in 0..ym.ncols() {
                        dot += gm[[i, j]] * ym[[i, j]];
                    }
                    for j in 0..ym.ncols() {
                        d[[i, j]] = ym[[i, j]] * (gm[[i, j]] - dot);
                    }
                }
                sink.add(a, d.into_dyn());
            })),
        )
    }

    /// L2-normalize each row of a (n×d) matrix.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let am = as2(&self.shared(a));
        let floor = F::from_f64(1e-12);
        let mut norms = Array1::<F>::zeros(am.nrows());
        let mut value = am.clone();
        for (i, mut row) in value.rows_mut().into_iter().enumerate() {
            let n = row.iter().fold(F::zero(), |s, &x| s + x * x).sqrt();
            let n = if n < floor { floor } else { n };
            norms[i] = n;
            row.mapv_inplace(|x| x / n);
        }
        let y = value.clone().into_shared();
        self.push(
            value.into_dyn(),
            Some(Box::new(move |g, sink| {
                let gm = g2(g);
                let ym = y.view().into_dimensionality::<Ix2>().expect("2-d");
                let mut d = Array2::<F>::zeros(ym.raw_dim());
                for i in 0..ym.nrows() {
                    let mut dot = F::zero();
                    for j in 0..ym.ncols() {
                        dot += gm[[i, j]] * ym[[i, j]];
                    }
                    for j in 0..ym.ncols() {
                        d[[i, j]] = (gm[[i, j]] - ym[[i, j]] * dot) / norms[i];
                    }
                }
                sink.add(a, d.into_dyn());
            })),
        )
    }

    /// Mean cross-entropy of row logits against class indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let zm = as2(&self.shared(logits));
        let n = zm.nrows();
        assert_eq!(targets.len(), n, "target count");
        let mut probs = Array2::<F>::zeros(zm.raw_dim());
        let mut loss = F::zero();
        for (i, row) in zm.rows().into_iter().enumerate() {
            assert!(targets[i] < row.len(), "target class in range");
            let mx = row.iter().fold(F::neg_infinity(), |m, &x| m.max(x));
            let mut denom = F::zero();
            for (j, &x) in row.iter().enumerate() {
                let e = (x - mx).exp();
                probs[[i, j]] = e;
                denom += e;
            }
            for j in 0..row.len() {
                probs[[i, j]] = probs[[i, j]] / denom;
            }
            loss += denom.ln() + mx - row[targets[i]];
        }
        let inv = F::from_f64(1.0 / n as f64);
        let targets = targets.to_vec();
        let probs = probs.into_shared();
        self.push(
            ArrayD::from_elem(IxDyn(&[]), loss * inv),
            Some(Box::new(move |g, sink| {
                let gs = *g.iter().next().expect("scalar grad");
                let mut d = probs.to_owned();
                for (i, &t) in targets.iter().enumerate() {
                    d[[i, t]] -= F::one();
                }
                d.mapv_inplace(|x| x * gs * inv);
                sink.add(logits, d.into_dyn());
            })),
        )
    }

    /// Mean binary cross-entropy between `sigmoid(logits)` and targets,
    /// averaged over every element.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &ArrayD<F>) -> Var {
        let zv = self.shared(logits);
        assert_eq!(zv.shape(), targets.shape(), "bce shapes");
        let n = zv.len();
        let inv = F::from_f64(1.0 / n as f64);
        let mut loss = F::zero();
        for (&z, &y) in zv.iter().zip(targets.iter()) {
            // max(z,0) - z*y + ln(1 + exp(-|z|))
            let zpos = if z > F::zero() { z } else { F::zero() };
            loss += zpos - z * y + (F::one() + (-z.abs()).exp()).ln();
        }
        let y = targets.clone().into_shared();
        self.push(
            ArrayD::from_elem(IxDyn(&[]), loss * inv),
            Some(Box::new(move |g, sink| {
                let gs = *g.iter().next().expect("scalar grad");
                let one = F::one();
                let mut d = zv.to_owned();
                d.zip_mut_with(&y, |zi, &yi| {
                    let s = one / (one + (-*zi).exp());
                    *zi = (s - yi) * gs * inv;
                });
                sink.add(logits, d);
            })),
        )
    }

    /// Row-wise layer normalization with learned gain and bias.
    pub fn layer_norm(&mut self, a: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let am = as2(&self.shared(a));
        let gv = as1(&self.shared(gamma));
        let bv = as1(&self.shared(beta));
        let d = am.ncols();
        assert_eq!(gv.len(), d, "gamma width");
        assert_eq!(bv.len(), d, "beta width");
        let epsf = F::from_f64(eps);
        let invd = F::from_f64(1.0 / d as f64);

        let mut xhat = Array2::<F>::zeros(am.raw_dim());
        let mut inv_std = Array1::<F>::zeros(am.nrows());
        for (i, row) in am.rows().into_iter().enumerate() {
            let mean = row.iter().fold(F::zero(), |s, &x| s + x) * invd;
            let var = row.iter().fold(F::zero(), |s, &x| {
                let c = x - mean;
                s + c * c
            }) * invd;
            let istd = F::one() / (var + epsf).sqrt();
            inv_std[i] = istd;
            for j in 0..d {
                xhat[[i, j]] = (row[j] - mean) * istd;
            }
        }
        let mut value = xhat.clone();
        for mut row in value.rows_mut() {
            for j in 0..d {
                row[j] = row[j] * gv[j] + bv[j];
            }
        }
        let xhat = xhat.into_shared();
        self.push(
            value.into_dyn(),
            Some(Box::new(move |g, sink| {
                let gm = g2(g);
                let xh = xhat.view().into_dimensionality::<Ix2>().expect("2-d");
                let mut dgamma = Array1::<F>::zeros(d);
                let mut dbeta = Array1::<F>::zeros(d);
                let mut dx = Array2::<F>::zeros(xh.raw_dim());
                for i in 0..xh.nrows() {
                    let mut mean_gh = F::zero();
                    let mut mean_ghx = F::zero();
                    for j in 0..d {
                        let gh = gm[[i, j]] * gv[j];
                        mean_gh += gh;
                        mean_ghx += gh * xh[[i, j]];
                        dgamma[j] += gm[[i, j]] * xh[[i, j]];
                        dbeta[j] += gm[[i, j]];
                    }
                    mean_gh *= invd;
                    mean_ghx *= invd;
                    for j in 0..d {
                        let gh = gm[[i, j]] * gv[j];
                        dx[[i, j]] = (gh - mean_gh - xh[[i, j]] * mean_ghx) * inv_std[i];
                    }
                }
                sink.add(a, dx.into_dyn());
                sink.add(gamma, dgamma.into_dyn());
                sink.add(beta, dbeta.into_dyn());
            })),
        )
    }

    /// Select rows of an embedding table by index (with repetition).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Var {
        let tm = as2(&self.shared(table));
        let (v, e) = (tm.nrows(), tm.ncols());
        let mut value = Array2::<F>::zeros((ids.len(), e));
        for (i, &id) in ids.iter().enumerate() {
            assert!(id < v, "row id in range");
            value.row_mut(i).assign(&tm.row(id));
        }
        let ids = ids.to_vec();
        self.push(
            value.into_dyn(),
            Some(Box::new(move |g, sink| {
                let gm = g2(g);
                let mut d = Array2::<F>::zeros((v, e));
                for (i, &id) in ids.iter().enumerate() {
                    let mut row = d.row_mut(id);
                    row += &gm.row(i);
                }
                sink.add(table, d.into_dyn());
            })),
        )
    }
}

// ---------------------------------------------------------------------------
// convolution and pooling
// ---------------------------------------------------------------------------

fn im2col<F: Scalar>(
    x: &ndarray::ArrayView4<'_, F>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array2<F> {
    let (b, c, h, w) = x.dim();
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    let mut col = Array2::<F>::zeros((b * ho * wo, c * kh * kw));
    for bi in 0..b {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = (bi * ho + oy) * wo + ox;
                for ci in 0..c {
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            col[[row, (ci * kh + ky) * kw + kx]] =
                                x[[bi, ci, iy as usize, ix as usize]];
                        }
                    }
                }
            }
        }
    }
    col
}

impl<F: Scalar> Tape<F> {
    /// 2-D convolution: input (B,C,H,W), weight (O,C,kh,kw), bias (O).
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let xv = self.shared(x);
        let wv = self.shared(w);
        let bv = as1(&self.shared(b));
        let x4 = xv.view().into_dimensionality::<Ix4>().expect("input 4-d");
        let w4 = wv.view().into_dimensionality::<Ix4>().expect("weight 4-d");
        let (bs, c, h, iw) = x4.dim();
        let (o, ci, kh, kw) = w4.dim();
        assert_eq!(c, ci, "channel mismatch");
        assert_eq!(bv.len(), o, "bias width");
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (iw + 2 * pad - kw) / stride + 1;

        let col = im2col(&x4, kh, kw, stride, pad);
        let w2 = w4
            .to_owned()
            .into_shape_with_order((o, c * kh * kw))
            .expect("weight reshape");
        let out2 = col.dot(&w2.t()); // (b*ho*wo, o)

        let mut value = ndarray::Array4::<F>::zeros((bs, o, ho, wo));
        for bi in 0..bs {
            for oy in 0..ho {
                for ox in 0..wo {
                    let row = (bi * ho + oy) * wo + ox;
                    for oc in 0..o {
                        value[[bi, oc, oy, ox]] = out2[[row, oc]] + bv[oc];
                    }
                }
            }
        }

        let col = col.into_shared();
        let w2 = w2.into_shared();
        self.push(
            value.into_dyn(),
            Some(Box::new(move |g, sink| {
                let g4 = g.view().into_dimensionality::<Ix4>().expect("grad 4-d");
                let mut gm = Array2::<F>::zeros((bs * ho * wo, o));
                for bi in 0..bs {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let row = (bi * ho + oy) * wo + ox;
                            for oc in 0..o {
                                gm[[row, oc]] = g4[[bi, oc, oy, ox]];
                            }
                        }
                    }
                }
                let db = gm.sum_axis(Axis(0));
                let dw2 = gm.t().dot(&col.view().into_dimensionality::<Ix2>().unwrap());
                let dw = dw2
                    .into_shape_with_order((o, c, kh, kw))
                    .expect("dw reshape");
                let dcol = gm.dot(&w2.view().into_dimensionality::<Ix2>().unwrap());

                let mut dx = ndarray::Array4::<F>::zeros((bs, c, h, iw));
                for bi in 0..bs {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let row = (bi * ho + oy) * wo + ox;
                            for ci2 in 0..c {
                                for ky in 0..kh {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for kx in 0..kw {
                                        let ix = (ox * stride + kx) as isize - pad as isize;
                                        if ix < 0 || ix >= iw as isize {
                                            continue;
                                        }
                                        dx[[bi, ci2, iy as usize, ix as usize]] +=
                                            dcol[[row, (ci2 * kh + ky) * kw + kx]];
                                    }
                                }
                            }
                        }
                    }
                }
                sink.add(x, dx.into_dyn());
                sink.add(w, dw.into_dyn());
                sink.add(b, db.into_dyn());
            })),
        )
    }

    /// Mean over the spatial dimensions: (B,C,H,W) → (B,C).
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let xv = self.shared(x);
        let x4 = xv.view().into_dimensionality::<Ix4>().expect("input 4-d");
        let (b, c, h, w) = x4.dim();
        let inv = F::from_f64(1.0 / (h * w) as f64);
        let mut value = Array2::<F>::zeros((b, c));
        for bi in 0..b {
            for ci in 0..c {
                let mut s = F::zero();
                for y in 0..h {
                    for xx in 0..w {
                        s += x4[[bi, ci, y, xx]];
                    }
                }
                value[[bi, ci]] = s * inv;
            }
        }
        self.push(
            value.into_dyn(),
            Some(Box::new(move |g, sink| {
                let gm = g2(g);
                let mut dx = ndarray::Array4::<F>::zeros((b, c, h, w));
                for bi in 0..b {
                    for ci in 0..c {
                        let gi = gm[[bi, ci]] * inv;
                        for y in 0..h {
                            for xx in 0..w {
                                dx[[bi, ci, y, xx]] = gi;
                            }
                        }
                    }
                }
                sink.add(x, dx.into_dyn());
            })),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;
    use rand::Rng;

    /// Central-difference check of d(loss)/d(input) for a scalar-valued graph.
    fn fd_check<B>(input: ArrayD<f64>, build: B, tol: f64)
    where
        B: Fn(&mut Tape<f64>, Var) -> Var,
    {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(input.clone());
        let loss = build(&mut tape, x);
        let grads = tape.backward(loss);
        let analytic = grads.for_var(x).expect("input grad").clone();

        let h = 1e-5;
        for idx in 0..input.len() {
            let mut plus = input.clone();
            let mut minus = input.clone();
            plus.as_slice_mut().unwrap()[idx] += h;
            minus.as_slice_mut().unwrap()[idx] -= h;
            let eval = |arr: ArrayD<f64>| {
                let mut t = Tape::<f64>::new();
                let v = t.constant(arr);
                let l = build(&mut t, v);
                t.scalar(l)
            };
            let fd = (eval(plus) - eval(minus)) / (2.0 * h);
            let a = analytic.as_slice().unwrap()[idx];
            let denom = a.abs().max(fd.abs()).max(1e-6);
            assert!(
                ((a - fd) / denom).abs() < tol,
                "idx {idx}: analytic {a} vs fd {fd}"
            );
        }
    }

    fn random_arr(shape: &[usize], seed: u64) -> ArrayD<f64> {
        let mut rng = crate::seeding::rng_from(seed);
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn grad_elementwise_and_matmul() {
        let w = random_arr(&[4, 3], 1);
        fd_check(
            random_arr(&[2, 4], 0),
            move |t, x| {
                let wv = t.constant(w.clone());
                let y = t.matmul(x, wv);
                let y = t.relu(y);
                t.mean_all(y)
            },
            1e-5,
        );
    }

    #[test]
    fn grad_softmax_masked() {
        fd_check(
            random_arr(&[3, 5], 2),
            |t, x| {
                let mask = [true, true, false, true, true];
                let p = t.softmax_rows(x, Some(&mask));
                let sq = t.mul(p, p);
                t.mean_all(sq)
            },
            1e-5,
        );
        // masked column never receives probability
        let mut t = Tape::<f64>::new();
        let x = t.constant(random_arr(&[3, 5], 3));
        let mask = [true, true, false, true, true];
        let p = t.softmax_rows(x, Some(&mask));
        for row in t.value(p).rows() {
            assert_eq!(row[2], 0.0);
            let s: f64 = row.sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn grad_normalize_layernorm_sigmoid_tanh() {
        fd_check(
            random_arr(&[3, 4], 4),
            |t, x| {
                let n = t.l2_normalize_rows(x);
                let s = t.sigmoid(n);
                let h = t.tanh_op(s);
                t.mean_all(h)
            },
            1e-5,
        );
        let gamma = random_arr(&[6], 5);
        let beta = random_arr(&[6], 6);
        fd_check(
            random_arr(&[2, 6], 7),
            move |t, x| {
                let g = t.constant(gamma.clone());
                let b = t.constant(beta.clone());
                let y = t.layer_norm(x, g, b, 1e-5);
                let y2 = t.mul(y, y);
                t.mean_all(y2)
            },
            1e-4,
        );
    }

    #[test]
    fn grad_layernorm_params() {
        let x = random_arr(&[3, 5], 8);
        let xc = x.clone();
        fd_check(
            random_arr(&[5], 9),
            move |t, gamma| {
                let xv = t.constant(xc.clone());
                let beta = t.constant(ArrayD::zeros(IxDyn(&[5])));
                let y = t.layer_norm(xv, gamma, beta, 1e-5);
                let y2 = t.mul(y, y);
                t.mean_all(y2)
            },
            1e-5,
        );
    }

    #[test]
    fn grad_losses() {
        fd_check(
            random_arr(&[4, 6], 10),
            |t, x| t.cross_entropy(x, &[1, 0, 5, 2]),
            1e-5,
        );
        let mut targets = ArrayD::zeros(IxDyn(&[8]));
        targets[[3]] = 1.0;
        fd_check(
            random_arr(&[8], 11),
            move |t, x| t.bce_with_logits(x, &targets),
            1e-5,
        );
    }

    #[test]
    fn grad_structural() {
        fd_check(
            random_arr(&[4, 6], 12),
            |t, x| {
                let a = t.slice_cols(x, 0, 3);
                let b = t.slice_cols(x, 3, 6);
                let c = t.concat(&[a, b], 1);
                let r = t.slice_rows(c, 1, 3);
                let tr = t.transpose(r);
                let d = t.row_dot(tr, tr);
                // treat the (6)-vector as a 1x6 matrix path via mean
                let m = t.constant(ArrayD::zeros(IxDyn(&[6])));
                let s = t.add(d, m);
                t.mean_all(s)
            },
            1e-5,
        );
    }

    #[test]
    fn grad_gather() {
        fd_check(
            random_arr(&[5, 3], 13),
            |t, table| {
                let g = t.gather_rows(table, &[0, 2, 2, 4]);
                let sq = t.mul(g, g);
                t.mean_all(sq)
            },
            1e-5,
        );
    }

    #[test]
    fn grad_conv_and_pool() {
        let w = random_arr(&[2, 3, 3, 3], 14);
        let b = random_arr(&[2], 15);
        fd_check(
            random_arr(&[2, 3, 6, 6], 16),
            move |t, x| {
                let wv = t.constant(w.clone());
                let bv = t.constant(b.clone());
                let y = t.conv2d(x, wv, bv, 2, 1);
                let y = t.relu(y);
                let p = t.global_avg_pool(y);
                t.mean_all(p)
            },
            1e-4,
        );
        // weight gradient
        let x = random_arr(&[1, 2, 5, 5], 17);
        fd_check(
            random_arr(&[3, 2, 3, 3], 18),
            move |t, w| {
                let xv = t.constant(x.clone());
                let bv = t.constant(ArrayD::zeros(IxDyn(&[3])));
                let y = t.conv2d(xv, w, bv, 1, 0);
                let p = t.global_avg_pool(y);
                let sq = t.mul(p, p);
                t.mean_all(sq)
            },
            1e-4,
        );
    }

    #[test]
    fn conv_shape_matches_formula() {
        let mut t = Tape::<f32>::new();
        let x = t.constant(ArrayD::zeros(IxDyn(&[2, 3, 32, 32])));
        let w = t.constant(ArrayD::zeros(IxDyn(&[8, 3, 3, 3])));
        let b = t.constant(ArrayD::zeros(IxDyn(&[8])));
        let y = t.conv2d(x, w, b, 2, 1);
        assert_eq!(t.value(y).shape(), &[2, 8, 16, 16]);
    }

    #[test]
    fn shared_input_accumulates() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(arr2(&[[2.0_f64]]).into_dyn());
        let y = t.add(x, x);
        let loss = t.mean_all(y);
        let g = t.backward(loss);
        assert_eq!(g.for_var(x).unwrap()[[0, 0]], 2.0);
    }
}
