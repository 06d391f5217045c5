//! Layers, parameters, and the optimizer.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array2, ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::scalar::Scalar;
use crate::tape::{GradStore, Tape, Var};

static NEXT_PARAM_ID: AtomicU64 = AtomicU64::new(1);

/// A named, trainable array. The id links tape nodes back to the parameter;
/// the name is the stable key used by checkpoints and optimizer state.
#[derive(Debug, Clone)]
pub struct Param<F: Scalar> {
    name: String,
    pub value: ArrayD<F>,
    id: u64,
}

impl<F: Scalar> Param<F> {
    pub fn new(name: impl Into<String>, value: ArrayD<F>) -> Self {
        Param {
            name: name.into(),
            value,
            id: NEXT_PARAM_ID.fetch_add(1, Ordering::Relaxed),
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.len() == 0
    }
}

/// Anything that owns parameters.
pub trait Module<F: Scalar> {
    fn params(&self) -> Vec<&Param<F>>;
    fn params_mut(&mut self) -> Vec<&mut Param<F>>;

    fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }
}

/// SHA-256 over all parameter bytes, for freeze checks and config hashes.
pub fn param_checksum<F: Scalar>(params: &[&Param<F>]) -> [u8; 32] {
    let mut hasher = Sha256::new();
    for p in params {
        hasher.update(p.name.as_bytes());
        for &x in p.value.iter() {
            hasher.update(x.to_f64_lossy().to_le_bytes());
        }
    }
    hasher.finalize().into()
}

// ---------------------------------------------------------------------------
// initialization
// ---------------------------------------------------------------------------

pub mod init {
    use super::*;
    use rand::Rng;

    /// Standard normal draw via Box-Muller (keeps rand_distr out of the tree).
    pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
        let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.random_range(0.0..1.0);
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn matrix<F: Scalar>(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> ArrayD<F> {
        Array2::from_shape_fn((rows, cols), |_| F::from_f64(normal(rng) * std)).into_dyn()
    }

    /// Xavier-style init for a (in, out) weight.
    pub fn xavier<F: Scalar>(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> ArrayD<F> {
        matrix(rng, rows, cols, (2.0 / (rows + cols) as f64).sqrt())
    }

    pub fn conv<F: Scalar>(
        rng: &mut ChaCha8Rng,
        out_ch: usize,
        in_ch: usize,
        k: usize,
    ) -> ArrayD<F> {
        let std = (2.0 / (in_ch * k * k) as f64).sqrt();
        ArrayD::from_shape_fn(IxDyn(&[out_ch, in_ch, k, k]), |_| {
            F::from_f64(normal(rng) * std)
        })
    }

    pub fn zeros<F: Scalar>(shape: &[usize]) -> ArrayD<F> {
        ArrayD::zeros(IxDyn(shape))
    }

    pub fn ones<F: Scalar>(shape: &[usize]) -> ArrayD<F> {
        ArrayD::from_elem(IxDyn(shape), F::one())
    }
}

// ---------------------------------------------------------------------------
// layers
// ---------------------------------------------------------------------------

/// Affine map x (n,in) → x·W + b with W stored as (in, out).
#[derive(Debug, Clone)]
pub struct Linear<F: Scalar> {
    pub w: Param<F>,
    pub b: Param<F>,
}

impl<F: Scalar> Linear<F> {
    pub fn new(name: &str, input: usize, output: usize, rng: &mut ChaCha8Rng) -> Self {
        Linear {
            w: Param::new(format!("{name}.w"), init::xavier(rng, input, output)),
            b: Param::new(format!("{name}.b"), init::zeros(&[output])),
        }
    }

    pub fn forward(&self, tape: &mut Tape<F>, x: Var) -> Var {
        let w = tape.param(&self.w);
        let b = tape.param(&self.b);
        let y = tape.matmul(x, w);
        tape.add_row(y, b)
    }

    /// Forward with the weights treated as constants (frozen path).
    pub fn forward_frozen(&self, tape: &mut Tape<F>, x: Var) -> Var {
        let w = tape.constant(self.w.value.clone());
        let b = tape.constant(self.b.value.clone());
        let y = tape.matmul(x, w);
        tape.add_row(y, b)
    }

    pub fn input_dim(&self) -> usize {
        self.w.value.shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.w.value.shape()[1]
    }
}

impl<F: Scalar> Module<F> for Linear<F> {
    fn params(&self) -> Vec<&Param<F>> {
        vec![&self.w, &self.b]
    }
    fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        vec![&mut self.w, &mut self.b]
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm<F: Scalar> {
    pub gamma: Param<F>,
    pub beta: Param<F>,
    pub eps: f64,
}

impl<F: Scalar> LayerNorm<F> {
    pub fn new(name: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: Param::new(format!("{name}.gamma"), init::ones(&[dim])),
            beta: Param::new(format!("{name}.beta"), init::zeros(&[dim])),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, tape: &mut Tape<F>, x: Var) -> Var {
        let g = tape.param(&self.gamma);
        let b = tape.param(&self.beta);
        tape.layer_norm(x, g, b, self.eps)
    }
}

impl<F: Scalar> Module<F> for LayerNorm<F> {
    fn params(&self) -> Vec<&Param<F>> {
        vec![&self.gamma, &self.beta]
    }
    fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        vec![&mut self.gamma, &mut self.beta]
    }
}

/// Multi-head attention over one token sequence (no batch axis); query and
/// key/value sequences may differ. Masked key positions receive zero weight.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention<F: Scalar> {
    pub dim: usize,
    pub heads: usize,
    pub q: Linear<F>,
    pub k: Linear<F>,
    pub v: Linear<F>,
    pub o: Linear<F>,
}

impl<F: Scalar> MultiHeadAttention<F> {
    pub fn new(name: &str, dim: usize, heads: usize, rng: &mut ChaCha8Rng) -> Self {
        assert!(dim % heads == 0, "dim must divide into heads");
        MultiHeadAttention {
            dim,
            heads,
            q: Linear::new(&format!("{name}.q"), dim, dim, rng),
            k: Linear::new(&format!("{name}.k"), dim, dim, rng),
            v: Linear::new(&format!("{name}.v"), dim, dim, rng),
            o: Linear::new(&format!("{name}.o"), dim, dim, rng),
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape<F>,
        query: Var,
        keys: Var,
        key_mask: Option<&[bool]>,
    ) -> Var {
        self.forward_inner(tape, query, keys, key_mask, false)
    }

    pub fn forward_frozen(
        &self,
        tape: &mut Tape<F>,
        query: Var,
        keys: Var,
        key_mask: Option<&[bool]>,
    ) -> Var {
        self.forward_inner(tape, query, keys, key_mask, true)
    }

    fn forward_inner(
        &self,
        tape: &mut Tape<F>,
        query: Var,
        keys: Var,
        key_mask: Option<&[bool]>,
        frozen: bool,
    ) -> Var {
        let proj = |layer: &Linear<F>, tape: &mut Tape<F>, x: Var| {
            if frozen {
                layer.forward_frozen(tape, x)
            } else {
                layer.forward(tape, x)
            }
        };
        let q = proj(&self.q, tape, query);
        let k = proj(&self.k, tape, keys);
        let v = proj(&self.v, tape, keys);

        let dh = self.dim / self.heads;
        let scale = F::from_f64(1.0 / (dh as f64).sqrt());
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let qh = tape.slice_cols(q, lo, hi);
            let kh = tape.slice_cols(k, lo, hi);
            let vh = tape.slice_cols(v, lo, hi);
            let kt = tape.transpose(kh);
            let scores = tape.matmul(qh, kt);
            let scores = tape.scale(scores, scale);
            let attn = tape.softmax_rows(scores, key_mask);
            heads.push(tape.matmul(attn, vh));
        }
        let cat = tape.concat(&heads, 1);
        proj(&self.o, tape, cat)
    }

    /// Attention weights of every head, rows = queries (inspection only).
    pub fn attention_maps(
        &self,
        query: &Array2<F>,
        keys: &Array2<F>,
        key_mask: Option<&[bool]>,
    ) -> Vec<Array2<F>> {
        let mut tape = Tape::<F>::new();
        let qv = tape.constant(query.clone().into_dyn());
        let kv = tape.constant(keys.clone().into_dyn());
        let q = self.q.forward_frozen(&mut tape, qv);
        let k = self.k.forward_frozen(&mut tape, kv);
        let dh = self.dim / self.heads;
        let scale = F::from_f64(1.0 / (dh as f64).sqrt());
        let mut maps = Vec::new();
        for h in 0..self.heads {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let qh = tape.slice_cols(q, lo, hi);
            let kh = tape.slice_cols(k, lo, hi);
            let kt = tape.transpose(kh);
            let scores = tape.matmul(qh, kt);
            let scores = tape.scale(scores, scale);
            let attn = tape.softmax_rows(scores, key_mask);
            maps.push(
                tape.value(attn)
                    .to_owned()
                    .into_dimensionality::<ndarray::Ix2>()
                    .expect("2-d attention"),
            );
        }
        maps
    }
}

impl<F: Scalar> Module<F> for MultiHeadAttention<F> {
    fn params(&self) -> Vec<&Param<F>> {
        [&self.q, &self.k, &self.v, &self.o]
            .iter()
            .flat_map(|l| l.params())
            .collect()
    }
    fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        let mut v = self.q.params_mut();
        v.extend(self.k.params_mut());
        v.extend(self.v.params_mut());
        v.extend(self.o.params_mut());
        v
    }
}

/// Single-layer LSTM; gate layout along the width is (input, forget, cell, output).
#[derive(Debug, Clone)]
pub struct Lstm<F: Scalar> {
    pub w_ih: Param<F>,
    pub w_hh: Param<F>,
    pub b: Param<F>,
    pub hidden: usize,
}

impl<F: Scalar> Lstm<F> {
    pub fn new(name: &str, input: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut b = init::zeros::<F>(&[4 * hidden]);
        // forget-gate bias starts at one
        for j in hidden..2 * hidden {
            b[[j]] = F::one();
        }
        Lstm {
            w_ih: Param::new(format!("{name}.w_ih"), init::xavier(rng, input, 4 * hidden)),
            w_hh: Param::new(format!("{name}.w_hh"), init::xavier(rng, hidden, 4 * hidden)),
            b: Param::new(format!("{name}.b"), b),
            hidden,
        }
    }

    /// x (T,in) → hidden states (T,hidden).
    pub fn forward(&self, tape: &mut Tape<F>, x: Var) -> Var {
        let t_len = tape.value(x).shape()[0];
        let hid = self.hidden;
        let w_ih = tape.param(&self.w_ih);
        let w_hh = tape.param(&self.w_hh);
        let b = tape.param(&self.b);
        let mut h = tape.constant(init::zeros(&[1, hid]));
        let mut c = tape.constant(init::zeros(&[1, hid]));
        let mut outputs = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let xt = tape.slice_rows(x, t, t + 1);
            let gi = tape.matmul(xt, w_ih);
            let gh = tape.matmul(h, w_hh);
            let gsum = tape.add(gi, gh);
            let gates = tape.add_row(gsum, b);
            let i_g = tape.slice_cols(gates, 0, hid);
            let f_g = tape.slice_cols(gates, hid, 2 * hid);
            let c_g = tape.slice_cols(gates, 2 * hid, 3 * hid);
            let o_g = tape.slice_cols(gates, 3 * hid, 4 * hid);
            let i_s = tape.sigmoid(i_g);
            let f_s = tape.sigmoid(f_g);
            let c_t = tape.tanh_op(c_g);
            let o_s = tape.sigmoid(o_g);
            let fc = tape.mul(f_s, c);
            let ic = tape.mul(i_s, c_t);
            c = tape.add(fc, ic);
            let ct = tape.tanh_op(c);
            h = tape.mul(o_s, ct);
            outputs.push(h);
        }
        tape.concat(&outputs, 0)
    }
}

impl<F: Scalar> Module<F> for Lstm<F> {
    fn params(&self) -> Vec<&Param<F>> {
        vec![&self.w_ih, &self.w_hh, &self.b]
    }
    fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        vec![&mut self.w_ih, &mut self.w_hh, &mut self.b]
    }
}

/// Strided 3×3 convolution blocks with ReLU, closed by global average
/// pooling; the embedding width equals the last block's channel count.
#[derive(Debug, Clone)]
pub struct ConvEncoder<F: Scalar> {
    weights: Vec<Param<F>>,
    biases: Vec<Param<F>>,
    pub embed_dim: usize,
    pub trainable: bool,
}

impl<F: Scalar> ConvEncoder<F> {
    pub fn new(name: &str, in_channels: usize, channels: &[usize], rng: &mut ChaCha8Rng) -> Self {
        assert!(!channels.is_empty(), "encoder needs at least one block");
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        let mut prev = in_channels;
        for (i, &ch) in channels.iter().enumerate() {
            weights.push(Param::new(
                format!("{name}.block{i}.w"),
                init::conv(rng, ch, prev, 3),
            ));
            biases.push(Param::new(format!("{name}.block{i}.b"), init::zeros(&[ch])));
            prev = ch;
        }
        ConvEncoder {
            weights,
            biases,
            embed_dim: prev,
            trainable: true,
        }
    }

    /// images (B,3,H,W) → embeddings (B, embed_dim).
    pub fn forward(&self, tape: &mut Tape<F>, images: Var) -> Var {
        let mut x = images;
        for (w, b) in self.weights.iter().zip(&self.biases) {
            let (wv, bv) = if self.trainable {
                (tape.param(w), tape.param(b))
            } else {
                (
                    tape.constant(w.value.clone()),
                    tape.constant(b.value.clone()),
                )
            };
            x = tape.conv2d(x, wv, bv, 2, 1);
            x = tape.relu(x);
        }
        tape.global_avg_pool(x)
    }

    pub fn num_blocks(&self) -> usize {
        self.weights.len()
    }
}

impl<F: Scalar> Module<F> for ConvEncoder<F> {
    fn params(&self) -> Vec<&Param<F>> {
        self.weights.iter().chain(self.biases.iter()).collect()
    }
    fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        self.weights
            .iter_mut()
            .chain(self.biases.iter_mut())
            .collect()
    }
}

// ---------------------------------------------------------------------------
// optimizer
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct AdamSlot<F: Scalar> {
    pub m: ArrayD<F>,
    pub v: ArrayD<F>,
}

/// Adam with bias correction; state is keyed by parameter name so it can be
/// checkpointed and restored across processes.
#[derive(Debug)]
pub struct Adam<F: Scalar> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    slots: HashMap<String, AdamSlot<F>>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            slots: HashMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: Vec<&mut Param<F>>, grads: &GradStore<F>) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let b1 = F::from_f64(self.beta1);
        let b2 = F::from_f64(self.beta2);
        let one_m_b1 = F::from_f64(1.0 - self.beta1);
        let one_m_b2 = F::from_f64(1.0 - self.beta2);
        let lr = F::from_f64(self.lr / bc1);
        let corr2 = F::from_f64(1.0 / bc2);
        let eps = F::from_f64(self.eps);

        for p in params {
            let Some(g) = grads.for_param(p) else {
                continue;
            };
            let slot = self.slots.entry(p.name().to_string()).or_insert(AdamSlot {
                m: ArrayD::zeros(p.value.raw_dim()),
                v: ArrayD::zeros(p.value.raw_dim()),
            });
            ndarray::Zip::from(&mut slot.m).and(g).for_each(|m, &gi| {
                *m = *m * b1 + gi * one_m_b1;
            });
            ndarray::Zip::from(&mut slot.v).and(g).for_each(|v, &gi| {
                *v = *v * b2 + gi * gi * one_m_b2;
            });
            ndarray::Zip::from(&mut p.value)
                .and(&slot.m)
                .and(&slot.v)
                .for_each(|x, &m, &v| {
                    *x = *x - lr * m / ((v * corr2).sqrt() + eps);
                });
        }
    }

    pub fn slots(&self) -> impl Iterator<Item = (&String, &AdamSlot<F>)> {
        self.slots.iter()
    }

    pub fn restore(&mut self, step: u64, slots: HashMap<String, AdamSlot<F>>) {
        self.step = step;
        self.slots = slots;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding::rng_from;

    #[test]
    fn linear_shapes_and_count() {
        let mut rng = rng_from(0);
        let lin = Linear::<f32>::new("l", 8, 3, &mut rng);
        assert_eq!(lin.param_count(), 8 * 3 + 3);
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(ArrayD::zeros(IxDyn(&[5, 8])));
        let y = lin.forward(&mut tape, x);
        assert_eq!(tape.value(y).shape(), &[5, 3]);
    }

    #[test]
    fn adam_descends_quadratic() {
        // minimize |x - 3|^2 elementwise
        let mut p = Param::<f64>::new("x", ArrayD::zeros(IxDyn(&[4])));
        let mut opt = Adam::new(0.1);
        for _ in 0..300 {
            let mut tape = Tape::<f64>::new();
            let x = tape.param(&p);
            let target = tape.constant(ArrayD::from_elem(IxDyn(&[4]), 3.0));
            let d = tape.sub(x, target);
            let sq = tape.mul(d, d);
            let loss = tape.mean_all(sq);
            let grads = tape.backward(loss);
            opt.step(vec![&mut p], &grads);
        }
        for &x in p.value.iter() {
            assert!((x - 3.0).abs() < 1e-3, "converged to {x}");
        }
    }

    #[test]
    fn mhsa_single_token_is_value_path() {
        let mut rng = rng_from(1);
        let attn = MultiHeadAttention::<f64>::new("a", 8, 2, &mut rng);
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(init::matrix::<f64>(&mut rng, 1, 8, 1.0));
        let y = attn.forward(&mut tape, x, x, None);
        assert_eq!(tape.value(y).shape(), &[1, 8]);
        // softmax over one key is the identity, so output = o(v(x))
        let mut tape2 = Tape::<f64>::new();
        let x2 = tape2.constant(tape.value(x).to_owned());
        let v = attn.v.forward(&mut tape2, x2);
        let o = attn.o.forward(&mut tape2, v);
        let diff = (&tape.value(y).to_owned() - &tape2.value(o).to_owned())
            .iter()
            .fold(0.0_f64, |m, &d| m.max(d.abs()));
        assert!(diff < 1e-12);
    }

    #[test]
    fn lstm_shapes() {
        let mut rng = rng_from(2);
        let lstm = Lstm::<f32>::new("l", 6, 10, &mut rng);
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(init::matrix::<f32>(&mut rng, 7, 6, 1.0));
        let y = lstm.forward(&mut tape, x);
        assert_eq!(tape.value(y).shape(), &[7, 10]);
    }

    #[test]
    fn lstm_gradients_match_finite_differences() {
        let mut rng = rng_from(3);
        let lstm = Lstm::<f64>::new("l", 3, 4, &mut rng);
        let x = init::matrix::<f64>(&mut rng, 5, 3, 1.0);

        let eval = |l: &Lstm<f64>| {
            let mut tape = Tape::<f64>::new();
            let xv = tape.constant(x.clone());
            let h = l.forward(&mut tape, xv);
            let sq = tape.mul(h, h);
            let loss = tape.mean_all(sq);
            (tape.scalar(loss), tape, loss)
        };
        let (_, tape, loss) = eval(&lstm);
        let grads = tape.backward(loss);

        let h = 1e-5;
        for (pi, flat) in [(0usize, 2usize), (1, 5), (2, 7)] {
            let mut plus = lstm.clone();
            let mut minus = lstm.clone();
            plus.params_mut()[pi].value.as_slice_mut().unwrap()[flat] += h;
            minus.params_mut()[pi].value.as_slice_mut().unwrap()[flat] -= h;
            let fd = (eval(&plus).0 - eval(&minus).0) / (2.0 * h);
            let a = grads.for_param(lstm.params()[pi]).unwrap().as_slice().unwrap()[flat];
            let denom = a.abs().max(fd.abs()).max(1e-8);
            assert!(((a - fd) / denom).abs() < 1e-4, "param {pi}: {a} vs {fd}");
        }
    }

    #[test]
    fn frozen_encoder_receives_no_gradients() {
        let mut rng = rng_from(4);
        let mut enc = ConvEncoder::<f64>::new("t", 3, &[4, 8], &mut rng);
        enc.trainable = false;
        let mut tape = Tape::<f64>::new();
        let imgs = tape.constant(ArrayD::from_elem(IxDyn(&[2, 3, 8, 8]), 0.5));
        let e = enc.forward(&mut tape, imgs);
        let loss = tape.mean_all(e);
        let grads = tape.backward(loss);
        for p in enc.params() {
            assert!(grads.for_param(p).is_none());
        }
    }
}
