//! Attention-contrastive distillation from a frozen teacher encoder.
//!
//! Both encoders embed the same stitched batch; a multi-head self-attention
//! pass (one token per batch row) recalibrates each embedding set, which is
//! then unit-normalized. The student's recalibrated embeddings are pulled
//! toward their teacher positives and pushed from a FIFO queue of past
//! teacher embeddings by the contrastive loss; a classification head on the
//! raw student embedding supplies the supervised term. Only the student
//! side trains — the teacher encoder and its attention never change.

use ndarray::{Array2, Array4, Axis};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::heads::{ClassifierHead, Target};
use crate::nn::{Adam, ConvEncoder, Module, MultiHeadAttention, Param};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Teacher,
    Student,
}

#[derive(Debug, Clone)]
pub struct EmbeddingBatch<F: Scalar> {
    pub data: Array2<F>,
    pub provenance: Provenance,
    pub normalized: bool,
}

impl<F: Scalar> EmbeddingBatch<F> {
    pub fn new(data: Array2<F>, provenance: Provenance) -> Self {
        EmbeddingBatch {
            data,
            provenance,
            normalized: false,
        }
    }

    pub fn batch_size(&self) -> usize {
        self.data.nrows()
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    /// Max deviation of any row norm from one; meaningful when normalized.
    pub fn max_norm_error(&self) -> f64 {
        self.data
            .rows()
            .into_iter()
            .map(|r| {
                let n = r.iter().fold(F::zero(), |s, &x| s + x * x).sqrt();
                (n.to_f64_lossy() - 1.0).abs()
            })
            .fold(0.0, f64::max)
    }
}

// ---------------------------------------------------------------------------
// negative queue
// ---------------------------------------------------------------------------

/// Fixed-capacity FIFO of teacher embedding rows.
#[derive(Debug, Clone)]
pub struct NegativeQueue<F: Scalar> {
    buf: Array2<F>,
    head: usize,
    fill: usize,
}

impl<F: Scalar> NegativeQueue<F> {
    pub fn new(capacity: usize, dim: usize) -> Self {
        assert!(capacity > 0, "queue capacity must be positive");
        NegativeQueue {
            buf: Array2::zeros((capacity, dim)),
            head: 0,
            fill: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.buf.nrows()
    }

    pub fn dim(&self) -> usize {
        self.buf.ncols()
    }

    pub fn len(&self) -> usize {
        self.fill
    }

    pub fn is_empty(&self) -> bool {
        self.fill == 0
    }

    /// Append rows; once full, each new row evicts the oldest one.
    pub fn enqueue(&mut self, batch: &EmbeddingBatch<F>) -> Result<()> {
        if batch.dim() != self.dim() {
            return Err(Error::Shape(format!(
                "queue width {} vs embedding width {}",
                self.dim(),
                batch.dim()
            )));
        }
        let cap = self.capacity();
        for row in batch.data.rows() {
            self.buf.row_mut(self.head).assign(&row);
            self.head = (self.head + 1) % cap;
            self.fill = (self.fill + 1).min(cap);
        }
        Ok(())
    }

    /// Current contents, oldest first.
    pub fn rows(&self) -> Array2<F> {
        let cap = self.capacity();
        let start = if self.fill < cap { 0 } else { self.head };
        let mut out = Array2::zeros((self.fill, self.dim()));
        for i in 0..self.fill {
            out.row_mut(i).assign(&self.buf.row((start + i) % cap));
        }
        out
    }

    pub fn assign_rows(&mut self, rows: &Array2<F>) -> Result<()> {
        if rows.ncols() != self.dim() || rows.nrows() > self.capacity() {
            return Err(Error::Shape("queue restore shape mismatch".into()));
        }
        self.buf.fill(F::zero());
        for (i, row) in rows.rows().into_iter().enumerate() {
            self.buf.row_mut(i).assign(&row);
        }
        self.fill = rows.nrows();
        self.head = rows.nrows() % self.capacity();
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// embedding recalibration
// ---------------------------------------------------------------------------

/// Residual multi-head self-attention over a batch of embeddings (each row
/// is one token), followed by unit normalization.
#[derive(Debug, Clone)]
pub struct MomaAttention<F: Scalar> {
    pub attn: MultiHeadAttention<F>,
    pub trainable: bool,
}

impl<F: Scalar> MomaAttention<F> {
    pub fn new(name: &str, dim: usize, heads: usize, rng: &mut ChaCha8Rng) -> Self {
        MomaAttention {
            attn: MultiHeadAttention::new(name, dim, heads, rng),
            trainable: true,
        }
    }

    pub fn forward(&self, tape: &mut Tape<F>, x: Var) -> Var {
        let a = if self.trainable {
            self.attn.forward(tape, x, x, None)
        } else {
            self.attn.forward_frozen(tape, x, x, None)
        };
        let r = tape.add(x, a);
        tape.l2_normalize_rows(r)
    }

    /// Plain-value recalibration of one embedding set.
    pub fn recalibrate(&self, batch: &EmbeddingBatch<F>) -> EmbeddingBatch<F> {
        let mut tape = Tape::<F>::new();
        let x = tape.constant(batch.data.clone().into_dyn());
        let a = self.attn.forward_frozen(&mut tape, x, x, None);
        let r = tape.add(x, a);
        let y = tape.l2_normalize_rows(r);
        EmbeddingBatch {
            data: tape
                .value(y)
                .to_owned()
                .into_dimensionality::<ndarray::Ix2>()
                .expect("2-d embeddings"),
            provenance: batch.provenance,
            normalized: true,
        }
    }
}

impl<F: Scalar> Module<F> for MomaAttention<F> {
    fn params(&self) -> Vec<&Param<F>> {
        self.attn.params()
    }
    fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        self.attn.params_mut()
    }
}

// ---------------------------------------------------------------------------
// contrastive loss
// ---------------------------------------------------------------------------

/// Mean over batch rows of
/// `-log( exp(s_pos/τ) / (exp(s_pos/τ) + Σ_j exp(s_j/τ)) )`,
/// where row i of `student` pairs with row i of `teacher_pos` and the
/// negatives `s_j` range over the queue. The positive term is part of the
/// denominator. Inputs must be unit-normalized.
pub fn infonce_loss<F: Scalar>(
    student: &EmbeddingBatch<F>,
    teacher_pos: &EmbeddingBatch<F>,
    queue: &NegativeQueue<F>,
    tau: f64,
) -> Result<F> {
    if student.data.dim() != teacher_pos.data.dim() {
        return Err(Error::Shape(format!(
            "student {:?} vs teacher {:?}",
            student.data.dim(),
            teacher_pos.data.dim()
        )));
    }
    if queue.is_empty() {
        return Err(Error::Loss("contrastive loss needs a non-empty queue".into()));
    }
    if !student.normalized || !teacher_pos.normalized {
        return Err(Error::Loss("embeddings must be unit-normalized".into()));
    }
    if queue.dim() != student.dim() {
        return Err(Error::Shape(format!(
            "queue width {} vs embedding width {}",
            queue.dim(),
            student.dim()
        )));
    }
    let inv_tau = F::from_f64(1.0 / tau);
    let negatives = queue.rows();
    let bs = student.batch_size();
    let mut total = F::zero();
    for i in 0..bs {
        let s = student.data.row(i);
        let t = teacher_pos.data.row(i);
        let s_pos = s.dot(&t) * inv_tau;
        let mut mx = s_pos;
        let mut sims = Vec::with_capacity(negatives.nrows());
        for neg in negatives.rows() {
            let sim = s.dot(&neg) * inv_tau;
            if sim > mx {
                mx = sim;
            }
            sims.push(sim);
        }
        let mut denom = (s_pos - mx).exp();
        for sim in sims {
            denom += (sim - mx).exp();
        }
        total += denom.ln() + mx - s_pos;
    }
    Ok(total / F::from_f64(bs as f64))
}

// ---------------------------------------------------------------------------
// training step
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DistillConfig {
    /// Contrastive temperature.
    pub tau: f64,
    /// Supervised loss weight.
    pub alpha: f64,
    /// Contrastive loss weight.
    pub beta: f64,
    pub queue_capacity: usize,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            tau: 0.07,
            alpha: 1.0,
            beta: 1.0,
            queue_capacity: 512,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DistillLossReport<F: Scalar> {
    pub ce_loss: F,
    pub infonce_loss: F,
    pub total_loss: F,
    pub alpha: F,
    pub beta: F,
}

#[derive(Clone)]
pub struct Distiller<F: Scalar> {
    pub student: ConvEncoder<F>,
    pub teacher: ConvEncoder<F>,
    pub student_attn: MomaAttention<F>,
    pub teacher_attn: MomaAttention<F>,
    pub head: ClassifierHead<F>,
    pub queue: NegativeQueue<F>,
    pub cfg: DistillConfig,
}

impl<F: Scalar> Distiller<F> {
    /// Teacher-side modules are frozen on construction.
    pub fn new(
        student: ConvEncoder<F>,
        mut teacher: ConvEncoder<F>,
        head: ClassifierHead<F>,
        cfg: DistillConfig,
        attn_heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert_eq!(student.embed_dim, teacher.embed_dim, "encoder widths differ");
        teacher.trainable = false;
        let dim = student.embed_dim;
        let student_attn = MomaAttention::new("student_attn", dim, attn_heads, rng);
        let mut teacher_attn = MomaAttention::new("teacher_attn", dim, attn_heads, rng);
        teacher_attn.trainable = false;
        let queue = NegativeQueue::new(cfg.queue_capacity, dim);
        Distiller {
            student,
            teacher,
            student_attn,
            teacher_attn,
            head,
            queue,
            cfg,
        }
    }

    /// Everything the optimizer may touch.
    pub fn trainable_params_mut(&mut self) -> Vec<&mut Param<F>> {
        let mut v = self.student.params_mut();
        v.extend(self.student_attn.params_mut());
        v.extend(self.head.params_mut());
        v
    }

    /// Checksum of the frozen teacher side (encoder + attention).
    pub fn teacher_checksum(&self) -> [u8; 32] {
        let mut params = self.teacher.params();
        params.extend(self.teacher_attn.params());
        crate::nn::param_checksum(&params)
    }

    /// Teacher embeddings for a batch: frozen encoder, frozen attention,
    /// unit-normalized.
    pub fn teacher_embed(&self, images: &Array4<F>) -> EmbeddingBatch<F> {
        let mut tape = Tape::<F>::new();
        let imgs = tape.constant(images.clone().into_dyn());
        let emb = self.teacher.forward(&mut tape, imgs);
        let raw = EmbeddingBatch {
            data: tape
                .value(emb)
                .to_owned()
                .into_dimensionality::<ndarray::Ix2>()
                .expect("2-d embeddings"),
            provenance: Provenance::Teacher,
            normalized: false,
        };
        self.teacher_attn.recalibrate(&raw)
    }

    /// Raw (pre-attention) student embeddings; inference path for the head.
    pub fn student_embed(&self, images: &Array4<F>) -> Array2<F> {
        let mut tape = Tape::<F>::new();
        let imgs = tape.constant(images.clone().into_dyn());
        let emb = if self.student.trainable {
            // constants only; build a frozen copy path
            let mut frozen = self.student.clone();
            frozen.trainable = false;
            frozen.forward(&mut tape, imgs)
        } else {
            self.student.forward(&mut tape, imgs)
        };
        tape.value(emb)
            .to_owned()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("2-d embeddings")
    }

    /// Head logits for a batch (inference path, no recalibration).
    pub fn infer_logits(&self, images: &Array4<F>) -> Result<Array2<F>> {
        let emb = self.student_embed(images);
        let mut tape = Tape::<F>::new();
        let e = tape.constant(emb.into_dyn());
        let logits = self.head.forward(&mut tape, e)?;
        Ok(tape
            .value(logits)
            .to_owned()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("2-d logits"))
    }

    /// Record the joint objective on a tape: α·CE on the head of the raw
    /// student embedding plus β·InfoNCE between the recalibrated student
    /// embeddings, their teacher positives, and the queue negatives.
    fn loss_graph(
        &self,
        tape: &mut Tape<F>,
        images: &Array4<F>,
        targets: &[Target],
        teacher_emb: &EmbeddingBatch<F>,
    ) -> Result<(Var, Var, Var)> {
        let imgs = tape.constant(images.clone().into_dyn());
        let raw_student = self.student.forward(tape, imgs);
        let student_norm = self.student_attn.forward(tape, raw_student);

        // contrastive term: logits over [positive | queue negatives]
        let tpos = tape.constant(teacher_emb.data.clone().into_dyn());
        let negs = tape.constant(self.queue.rows().into_dyn());
        let s_pos = tape.row_dot(student_norm, tpos);
        let bs = targets.len();
        let s_pos = tape.reshape(s_pos, &[bs, 1]);
        let negs_t = tape.transpose(negs);
        let s_neg = tape.matmul(student_norm, negs_t);
        let logits_c = tape.concat(&[s_pos, s_neg], 1);
        let logits_c = tape.scale(logits_c, F::from_f64(1.0 / self.cfg.tau));
        let infonce = tape.cross_entropy(logits_c, &vec![0; bs]);

        // supervised term on the raw embedding
        let logits = self.head.forward(tape, raw_student)?;
        let ce = self.head.supervised_loss(tape, logits, targets)?;

        let ce_w = tape.scale(ce, F::from_f64(self.cfg.alpha));
        let inf_w = tape.scale(infonce, F::from_f64(self.cfg.beta));
        let total = tape.add(ce_w, inf_w);
        Ok((total, ce, infonce))
    }

    /// The joint objective as a pure function of the current parameters
    /// and queue (which must be non-empty). Used by the gradient oracles.
    pub fn objective(&self, images: &Array4<F>, targets: &[Target]) -> Result<F> {
        if self.queue.is_empty() {
            return Err(Error::Loss("objective needs a non-empty queue".into()));
        }
        let teacher_emb = self.teacher_embed(images);
        let mut tape = Tape::<F>::new();
        let (total, _, _) = self.loss_graph(&mut tape, images, targets, &teacher_emb)?;
        Ok(tape.scalar(total))
    }

    /// Objective value plus analytic parameter gradients, without touching
    /// any state.
    pub fn objective_grads(
        &self,
        images: &Array4<F>,
        targets: &[Target],
    ) -> Result<(F, crate::tape::GradStore<F>)> {
        if self.queue.is_empty() {
            return Err(Error::Loss("objective needs a non-empty queue".into()));
        }
        let teacher_emb = self.teacher_embed(images);
        let mut tape = Tape::<F>::new();
        let (total, _, _) = self.loss_graph(&mut tape, images, targets, &teacher_emb)?;
        let grads = tape.backward(total);
        Ok((tape.scalar(total), grads))
    }

    /// One optimizer step on `α·CE + β·InfoNCE`. The queue is seeded from
    /// the current teacher batch when empty, and the batch's teacher
    /// embeddings are enqueued again after the loss is computed.
    pub fn train_step(
        &mut self,
        opt: &mut Adam<F>,
        images: &Array4<F>,
        targets: &[Target],
    ) -> Result<DistillLossReport<F>> {
        if images.len_of(Axis(0)) != targets.len() {
            return Err(Error::Shape(format!(
                "batch of {} images vs {} targets",
                images.len_of(Axis(0)),
                targets.len()
            )));
        }
        let teacher_emb = self.teacher_embed(images);
        if self.queue.is_empty() {
            self.queue.enqueue(&teacher_emb)?; // warm-up
        }

        let mut tape = Tape::<F>::new();
        let (total, ce, infonce) = self.loss_graph(&mut tape, images, targets, &teacher_emb)?;
        let grads = tape.backward(total);
        opt.step(self.trainable_params_mut(), &grads);

        self.queue.enqueue(&teacher_emb)?;

        let alpha = F::from_f64(self.cfg.alpha);
        let beta = F::from_f64(self.cfg.beta);
        let ce_loss = tape.scalar(ce);
        let infonce_val = tape.scalar(infonce);
        Ok(DistillLossReport {
            ce_loss,
            infonce_loss: infonce_val,
            total_loss: alpha * ce_loss + beta * infonce_val,
            alpha,
            beta,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heads::{HeadConfig, HeadMode};
    use crate::nn::init;
    use crate::seeding::rng_from;
    use ndarray::Array1;
    use proptest::prelude::*;

    fn unit_rows(rows: usize, dim: usize, seed: u64) -> Array2<f64> {
        let mut rng = rng_from(seed);
        let mut m = Array2::from_shape_fn((rows, dim), |_| init::normal(&mut rng));
        for mut r in m.rows_mut() {
            let n = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            r.mapv_inplace(|x| x / n);
        }
        m
    }

    fn batch(data: Array2<f64>, p: Provenance) -> EmbeddingBatch<f64> {
        EmbeddingBatch {
            data,
            provenance: p,
            normalized: true,
        }
    }

    #[test]
    fn recalibration_preserves_shape_and_normalizes() {
        let mut rng = rng_from(0);
        let attn = MomaAttention::<f64>::new("a", 16, 4, &mut rng);
        let raw = EmbeddingBatch::new(
            Array2::from_shape_fn((8, 16), |_| init::normal(&mut rng)),
            Provenance::Student,
        );
        let out = attn.recalibrate(&raw);
        assert_eq!(out.data.dim(), (8, 16));
        assert!(out.normalized);
        assert!(out.max_norm_error() < 1e-5);

        let one = attn.recalibrate(&batch(unit_rows(1, 16, 1), Provenance::Student));
        assert_eq!(one.data.dim(), (1, 16));
    }

    #[test]
    fn zero_output_projection_is_normalized_identity() {
        let mut rng = rng_from(2);
        let mut attn = MomaAttention::<f64>::new("a", 8, 2, &mut rng);
        attn.attn.o.w.value.fill(0.0);
        attn.attn.o.b.value.fill(0.0);
        let data = Array2::from_shape_fn((4, 8), |_| init::normal(&mut rng));
        let out = attn.recalibrate(&EmbeddingBatch::new(data.clone(), Provenance::Teacher));
        for (orow, irow) in out.data.rows().into_iter().zip(data.rows()) {
            let n = irow.iter().map(|x| x * x).sum::<f64>().sqrt();
            for (o, i) in orow.iter().zip(irow.iter()) {
                assert!((o - i / n).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn queue_fifo_contract() {
        let mut q = NegativeQueue::<f64>::new(4, 2);
        let mk = |vals: &[f64]| {
            let rows = vals.len();
            let mut m = Array2::zeros((rows, 2));
            for (i, &v) in vals.iter().enumerate() {
                m[[i, 0]] = v;
            }
            batch(m, Provenance::Teacher)
        };
        q.enqueue(&mk(&[1.0, 2.0, 3.0])).unwrap();
        assert_eq!(q.len(), 3);
        q.enqueue(&mk(&[4.0, 5.0, 6.0])).unwrap();
        assert_eq!(q.len(), 4);
        let rows = q.rows();
        let got: Vec<f64> = rows.column(0).to_vec();
        assert_eq!(got, vec![3.0, 4.0, 5.0, 6.0]);

        // more rows than capacity keeps the newest
        q.enqueue(&mk(&[7.0, 8.0, 9.0, 10.0, 11.0])).unwrap();
        let got: Vec<f64> = q.rows().column(0).to_vec();
        assert_eq!(got, vec![8.0, 9.0, 10.0, 11.0]);
    }

    #[test]
    fn queue_rejects_width_mismatch() {
        let mut q = NegativeQueue::<f64>::new(4, 3);
        let b = batch(Array2::zeros((1, 2)), Provenance::Teacher);
        assert!(q.enqueue(&b).is_err());
    }

    proptest! {
        #[test]
        fn queue_matches_list_model(ops in prop::collection::vec(1usize..5, 1..20), cap in 1usize..8) {
            let mut q = NegativeQueue::<f64>::new(cap, 1);
            let mut model: Vec<f64> = Vec::new();
            let mut counter = 0.0;
            for m in ops {
                let mut data = Array2::zeros((m, 1));
                for i in 0..m {
                    counter += 1.0;
                    data[[i, 0]] = counter;
                    model.push(counter);
                }
                q.enqueue(&batch(data, Provenance::Teacher)).unwrap();
                while model.len() > cap {
                    model.remove(0);
                }
                let got: Vec<f64> = q.rows().column(0).to_vec();
                prop_assert_eq!(&got, &model);
            }
        }
    }

    #[test]
    fn infonce_symmetric_case_is_ln_two() {
        // positive similarity 1, one negative with similarity 1
        let e = unit_rows(1, 8, 3);
        let student = batch(e.clone(), Provenance::Student);
        let teacher = batch(e.clone(), Provenance::Teacher);
        let mut q = NegativeQueue::<f64>::new(4, 8);
        q.enqueue(&teacher).unwrap();
        let loss = infonce_loss(&student, &teacher, &q, 0.07).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12, "{loss}");
    }

    #[test]
    fn infonce_orthogonal_negatives_case() {
        // s_pos = 1, five negatives of similarity 0, tau = 0.07
        let dim = 8;
        let mut e = Array2::<f64>::zeros((1, dim));
        e[[0, 0]] = 1.0;
        let student = batch(e.clone(), Provenance::Student);
        let teacher = batch(e, Provenance::Teacher);
        let mut negs = Array2::<f64>::zeros((5, dim));
        for i in 0..5 {
            negs[[i, 1 + i]] = 1.0;
        }
        let mut q = NegativeQueue::<f64>::new(8, dim);
        q.enqueue(&batch(negs, Provenance::Teacher)).unwrap();
        let loss = infonce_loss(&student, &teacher, &q, 0.07).unwrap();
        // brute force over the explicit sum
        let t: f64 = 1.0 / 0.07;
        let expect = -((t.exp() / (t.exp() + 5.0 * (0.0_f64).exp())).ln());
        assert!((loss - expect).abs() < 1e-6, "{loss} vs {expect}");
    }

    #[test]
    fn infonce_matches_rearranged_form() {
        let student = batch(unit_rows(6, 12, 4), Provenance::Student);
        let teacher = batch(unit_rows(6, 12, 5), Provenance::Teacher);
        let mut q = NegativeQueue::<f64>::new(16, 12);
        q.enqueue(&batch(unit_rows(10, 12, 6), Provenance::Teacher))
            .unwrap();
        let tau = 0.07;
        let loss = infonce_loss(&student, &teacher, &q, tau).unwrap();
        // ln(1 + sum exp((s_j - s_pos)/tau)) per row
        let negs = q.rows();
        let mut expect = 0.0;
        for i in 0..6 {
            let s = student.data.row(i);
            let spos: f64 = s.dot(&teacher.data.row(i));
            let sum: f64 = negs
                .rows()
                .into_iter()
                .map(|n| ((s.dot(&n) - spos) / tau).exp())
                .sum();
            expect += (1.0 + sum).ln();
        }
        expect /= 6.0;
        assert!((loss - expect).abs() < 1e-9);
    }

    #[test]
    fn infonce_monotone_in_negatives() {
        let student = batch(unit_rows(3, 10, 7), Provenance::Student);
        let teacher = batch(unit_rows(3, 10, 8), Provenance::Teacher);
        let mut q = NegativeQueue::<f64>::new(32, 10);
        q.enqueue(&batch(unit_rows(4, 10, 9), Provenance::Teacher))
            .unwrap();
        let before = infonce_loss(&student, &teacher, &q, 0.07).unwrap();
        q.enqueue(&batch(unit_rows(1, 10, 10), Provenance::Teacher))
            .unwrap();
        let after = infonce_loss(&student, &teacher, &q, 0.07).unwrap();
        assert!(after >= before);
    }

    #[test]
    fn infonce_error_paths() {
        let student = batch(unit_rows(2, 8, 11), Provenance::Student);
        let teacher = batch(unit_rows(2, 8, 12), Provenance::Teacher);
        let empty = NegativeQueue::<f64>::new(4, 8);
        assert!(infonce_loss(&student, &teacher, &empty, 0.07).is_err());

        let mut q = NegativeQueue::<f64>::new(4, 8);
        q.enqueue(&teacher).unwrap();
        let mut raw = student.clone();
        raw.normalized = false;
        assert!(infonce_loss(&raw, &teacher, &q, 0.07).is_err());
    }

    fn tiny_distiller(seed: u64) -> (Distiller<f64>, Adam<f64>) {
        let mut rng = rng_from(seed);
        let student = ConvEncoder::<f64>::new("student", 3, &[4, 8], &mut rng);
        let teacher = ConvEncoder::<f64>::new("teacher", 3, &[4, 8], &mut rng);
        let head = ClassifierHead::new(
            "head",
            HeadConfig {
                mode: HeadMode::Adg,
                input_dim: 8,
                num_verbs: 2,
                num_nouns: 2,
                num_actions: 3,
            },
            &mut rng,
        );
        let cfg = DistillConfig {
            queue_capacity: 8,
            ..DistillConfig::default()
        };
        let d = Distiller::new(student, teacher, head, cfg, 2, &mut rng);
        (d, Adam::new(1e-3))
    }

    fn tiny_batch(seed: u64) -> (Array4<f64>, Vec<Target>) {
        let mut rng = rng_from(seed);
        let images = Array4::from_shape_fn((3, 3, 8, 8), |_| {
            use rand::Rng;
            rng.random_range(0.0..1.0)
        });
        let targets = vec![
            Target { verb: 0, noun: 0, action: Some(0) },
            Target { verb: 1, noun: 0, action: Some(1) },
            Target { verb: 0, noun: 1, action: Some(2) },
        ];
        (images, targets)
    }

    #[test]
    fn train_step_report_decomposes_exactly() {
        let (mut d, mut opt) = tiny_distiller(13);
        let (images, targets) = tiny_batch(14);
        let r = d.train_step(&mut opt, &images, &targets).unwrap();
        assert_eq!(r.total_loss, r.alpha * r.ce_loss + r.beta * r.infonce_loss);
        assert!(r.infonce_loss >= 0.0);
        assert!(r.ce_loss >= 0.0);
    }

    #[test]
    fn beta_zero_reduces_to_supervised_path() {
        let (mut d, mut opt) = tiny_distiller(15);
        d.cfg.beta = 0.0;
        let (images, targets) = tiny_batch(16);
        let r = d.train_step(&mut opt, &images, &targets).unwrap();
        assert_eq!(r.total_loss, r.ce_loss);
    }

    #[test]
    fn teacher_is_frozen_across_steps() {
        let (mut d, mut opt) = tiny_distiller(17);
        let before = d.teacher_checksum();
        let (images, targets) = tiny_batch(18);
        for _ in 0..5 {
            d.train_step(&mut opt, &images, &targets).unwrap();
        }
        assert_eq!(before, d.teacher_checksum());
    }

    #[test]
    fn training_reduces_supervised_loss() {
        let (mut d, mut opt) = tiny_distiller(19);
        opt.lr = 1e-2;
        let (images, targets) = tiny_batch(20);
        let first = d.train_step(&mut opt, &images, &targets).unwrap();
        let mut last = first;
        for _ in 0..60 {
            last = d.train_step(&mut opt, &images, &targets).unwrap();
        }
        assert!(
            last.ce_loss < first.ce_loss,
            "{} -> {}",
            first.ce_loss,
            last.ce_loss
        );
    }

    #[test]
    fn queue_warmup_then_post_step_enqueue() {
        let (mut d, mut opt) = tiny_distiller(21);
        assert!(d.queue.is_empty());
        let (images, targets) = tiny_batch(22);
        d.train_step(&mut opt, &images, &targets).unwrap();
        // warm-up + post-loss enqueue of a 3-row batch
        assert_eq!(d.queue.len(), 6);
    }

    #[test]
    fn tape_infonce_matches_plain_function() {
        let (mut d, mut opt) = tiny_distiller(23);
        let (images, targets) = tiny_batch(24);
        // prime the queue so both paths see identical negatives
        let temb = d.teacher_embed(&images);
        d.queue.enqueue(&temb).unwrap();

        // plain value, computed before the step mutates the student
        let raw = d.student_embed(&images);
        let student_batch = d.student_attn.recalibrate(&EmbeddingBatch::new(
            raw,
            Provenance::Student,
        ));
        let plain = infonce_loss(&student_batch, &temb, &d.queue, d.cfg.tau).unwrap();

        let r = d.train_step(&mut opt, &images, &targets).unwrap();
        assert!(
            (r.infonce_loss - plain).abs() < 1e-9,
            "{} vs {plain}",
            r.infonce_loss
        );
    }

    #[test]
    fn unit_rows_helper_is_normalized() {
        let m = unit_rows(3, 5, 99);
        for r in m.rows() {
            let n: f64 = Array1::from_iter(r.iter().map(|x| x * x)).sum();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }
}
