//! Co-attention answer classifier over per-frame object features.
//!
//! Question tokens are embedded (300-wide table, random-initialized) and
//! encoded by an LSTM to the hidden width. Two attention flows follow: the
//! question flow stacks L residual self-attention layers; the object flow
//! stacks L layers of self-attention, each followed by guided attention
//! with the object states as queries and the finished question states as
//! keys and values. Each flow is pooled to a single vector by a softmaxed
//! per-token score. Optionally, each pooled vector then cross-attends over
//! the other flow's token sequence (one query token against the sequence
//! plus itself) with a layer-normalized residual fusion. The two vectors
//! are summed and a sigmoid classifier scores every answer; training uses
//! binary cross-entropy against the one-hot answer.
//!
//! Frame handling matches the per-frame annotation scheme: one frame in
//! every 15 is kept for training (the block's last frame), and at
//! inference that same frame answers for the whole block.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;

use ndarray::{Array2, ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear, Lstm, Module, MultiHeadAttention, Param};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::text::tokenize;

pub const OBJECT_FEATURE_WIDTH: usize = 2048;

// ---------------------------------------------------------------------------
// vocabularies
// ---------------------------------------------------------------------------

/// Question-token vocabulary; id 0 is the reserved unknown token.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: BTreeMap<String, usize>,
}

pub const UNK_ID: usize = 0;

impl Vocab {
    pub fn build<'a>(corpus: impl IntoIterator<Item = &'a str>) -> Self {
        let mut uniq: BTreeMap<String, ()> = BTreeMap::new();
        for text in corpus {
            for tok in tokenize(text) {
                uniq.insert(tok, ());
            }
        }
        let mut tokens = vec!["<unk>".to_string()];
        tokens.extend(uniq.into_keys());
        let mut v = Vocab {
            tokens,
            index: BTreeMap::new(),
        };
        v.rebuild_index();
        v
    }

    pub fn rebuild_index(&mut self) {
        self.index = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Token ids for a question; unknown tokens map to the UNK id.
    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        let toks = tokenize(text);
        if toks.is_empty() {
            return Err(Error::Data(format!("question {text:?} has no tokens")));
        }
        Ok(toks
            .iter()
            .map(|t| self.index.get(t).copied().unwrap_or(UNK_ID))
            .collect())
    }
}

/// Dense answer id ↔ answer text bijection.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnswerVocab {
    answers: Vec<String>,
    #[serde(skip)]
    index: BTreeMap<String, usize>,
}

impl AnswerVocab {
    pub fn build<'a>(answers: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let uniq: BTreeMap<String, ()> = answers
            .into_iter()
            .map(|a| (a.trim().to_lowercase(), ()))
            .collect();
        let answers: Vec<String> = uniq.into_keys().filter(|a| !a.is_empty()).collect();
        if answers.len() < 2 {
            return Err(Error::Data(format!(
                "answer vocabulary needs at least 2 answers, got {}",
                answers.len()
            )));
        }
        let mut v = AnswerVocab {
            answers,
            index: BTreeMap::new(),
        };
        v.rebuild_index();
        Ok(v)
    }

    pub fn rebuild_index(&mut self) {
        self.index = self
            .answers
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
    }

    pub fn len(&self) -> usize {
        self.answers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.answers.is_empty()
    }

    pub fn id_of(&self, answer: &str) -> Option<usize> {
        self.index.get(&answer.trim().to_lowercase()).copied()
    }

    pub fn text_of(&self, id: usize) -> Option<&str> {
        self.answers.get(id).map(String::as_str)
    }
}

// ---------------------------------------------------------------------------
// per-frame object features
// ---------------------------------------------------------------------------

/// Fixed-width object feature matrix with a validity mask; rows past the
/// real object count are zero and masked out of every attention.
#[derive(Debug, Clone)]
pub struct ObjectFeatureSet<F: Scalar> {
    pub features: Array2<F>,
    pub mask: Vec<bool>,
}

impl<F: Scalar> ObjectFeatureSet<F> {
    /// Pad or truncate `raw` (n_obj × width) to `n_obj_max` rows.
    pub fn from_raw(raw: &Array2<F>, n_obj_max: usize) -> Result<Self> {
        if raw.nrows() == 0 {
            return Err(Error::Data("feature set with zero objects".into()));
        }
        let keep = raw.nrows().min(n_obj_max);
        let mut features = Array2::zeros((n_obj_max, raw.ncols()));
        for i in 0..keep {
            features.row_mut(i).assign(&raw.row(i));
        }
        let mut mask = vec![false; n_obj_max];
        mask[..keep].fill(true);
        Ok(ObjectFeatureSet { features, mask })
    }

    pub fn num_real(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

// ---------------------------------------------------------------------------
// frame subsampling and inference partitioning
// ---------------------------------------------------------------------------

/// Blocks of `block` frames; each is represented by its last frame (also
/// for a shorter trailing block).
pub fn partition_blocks(n: usize, block: usize) -> Vec<(usize, Range<usize>)> {
    assert!(n >= 1 && block >= 1);
    let mut out = Vec::new();
    let mut start = 0;
    while start < n {
        let end = (start + block).min(n);
        out.push((end - 1, start..end));
        start = end;
    }
    out
}

/// Frame indices kept for training: the representative of every block.
pub fn representative_frames(n: usize, block: usize) -> Vec<usize> {
    partition_blocks(n, block).into_iter().map(|(r, _)| r).collect()
}

// ---------------------------------------------------------------------------
// annotations and feature files
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct QaRecord {
    pub video_id: String,
    pub frame_idx: usize,
    pub question: String,
    pub answer: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PredictionRecord {
    pub video_id: String,
    pub frame_idx: usize,
    pub question_id: usize,
    pub answer_text: String,
}

pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Data(format!("{}: {e}", path.display()))))
        .collect()
}

pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, items: &[T]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item).map_err(|e| Error::Data(e.to_string()))?);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Binary object-feature file: `u32 frame_count`, `u32 n_obj`, then
/// `frame_count · n_obj` rows of 2048 little-endian f32 values.
pub fn write_features(path: impl AsRef<Path>, frames: &[Array2<f32>]) -> Result<()> {
    let path = path.as_ref();
    if frames.is_empty() {
        return Err(Error::Data("no frames to write".into()));
    }
    let n_obj = frames[0].nrows();
    for (i, f) in frames.iter().enumerate() {
        if f.nrows() != n_obj || f.ncols() != OBJECT_FEATURE_WIDTH {
            return Err(Error::Data(format!(
                "frame {i} is {:?}, expected ({n_obj}, {OBJECT_FEATURE_WIDTH})",
                f.dim()
            )));
        }
    }
    let mut file = std::io::BufWriter::new(
        std::fs::File::create(path).map_err(|e| Error::io(path, e))?,
    );
    let put = |w: &mut dyn Write, v: u32| w.write_all(&v.to_le_bytes());
    put(&mut file, frames.len() as u32).map_err(|e| Error::io(path, e))?;
    put(&mut file, n_obj as u32).map_err(|e| Error::io(path, e))?;
    for f in frames {
        for &x in f.iter() {
            file.write_all(&x.to_le_bytes()).map_err(|e| Error::io(path, e))?;
        }
    }
    Ok(())
}

pub fn read_features(path: impl AsRef<Path>) -> Result<Vec<Array2<f32>>> {
    let path = path.as_ref();
    let mut file = std::io::BufReader::new(
        std::fs::File::open(path).map_err(|e| Error::io(path, e))?,
    );
    let mut u32buf = [0u8; 4];
    let mut get = |f: &mut dyn Read| -> Result<u32> {
        f.read_exact(&mut u32buf).map_err(|e| Error::io(path, e))?;
        Ok(u32::from_le_bytes(u32buf))
    };
    let frame_count = get(&mut file)? as usize;
    let n_obj = get(&mut file)? as usize;
    if frame_count == 0 || n_obj == 0 {
        return Err(Error::Data(format!("{}: empty feature file", path.display())));
    }
    let mut frames = Vec::with_capacity(frame_count);
    let mut row = vec![0u8; OBJECT_FEATURE_WIDTH * 4];
    for _ in 0..frame_count {
        let mut m = Array2::<f32>::zeros((n_obj, OBJECT_FEATURE_WIDTH));
        for o in 0..n_obj {
            file.read_exact(&mut row).map_err(|e| Error::io(path, e))?;
            for (j, chunk) in row.chunks_exact(4).enumerate() {
                m[[o, j]] = f32::from_le_bytes(chunk.try_into().unwrap());
            }
        }
        frames.push(m);
    }
    Ok(frames)
}

// ---------------------------------------------------------------------------
// model
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MCANConfig {
    pub hidden_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub num_answers: usize,
    pub fqca: bool,
    pub n_obj_max: usize,
    pub feat_dim: usize,
    pub glove_dim: usize,
}

impl MCANConfig {
    pub fn small(num_answers: usize) -> Self {
        MCANConfig {
            hidden_dim: 512,
            layers: 6,
            heads: 8,
            num_answers,
            fqca: false,
            n_obj_max: 36,
            feat_dim: OBJECT_FEATURE_WIDTH,
            glove_dim: 300,
        }
    }

    pub fn large(num_answers: usize) -> Self {
        MCANConfig {
            hidden_dim: 1024,
            ..Self::small(num_answers)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.hidden_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden_dim {} must be a positive multiple of heads {}",
                self.hidden_dim, self.heads
            )));
        }
        if self.num_answers < 2 {
            return Err(Error::Config("at least two answers required".into()));
        }
        if self.layers == 0 || self.n_obj_max == 0 {
            return Err(Error::Config("layers and n_obj_max must be positive".into()));
        }
        Ok(())
    }
}

/// One pooled query token cross-attending over a raw token sequence.
#[derive(Debug, Clone)]
pub struct FqcaBlock<F: Scalar> {
    pub skip: Linear<F>,
    pub attn: MultiHeadAttention<F>,
    pub ln: LayerNorm<F>,
    pub fc0: Linear<F>,
    pub fc1: Linear<F>,
}

impl<F: Scalar> FqcaBlock<F> {
    pub fn new(name: &str, dim: usize, raw_dim: usize, heads: usize, rng: &mut ChaCha8Rng) -> Self {
        FqcaBlock {
            skip: Linear::new(&format!("{name}.skip"), raw_dim, dim, rng),
            attn: MultiHeadAttention::new(&format!("{name}.attn"), dim, heads, rng),
            ln: LayerNorm::new(&format!("{name}.ln"), dim),
            fc0: Linear::new(&format!("{name}.fc0"), dim, dim, rng),
            fc1: Linear::new(&format!("{name}.fc1"), dim, dim, rng),
        }
    }

    /// tilde (1, dim), raw (T, raw_dim) → (1, dim). The query attends over
    /// [tilde; projected raw]; masked raw rows receive no weight.
    pub fn forward(
        &self,
        tape: &mut Tape<F>,
        tilde: Var,
        raw: Var,
        raw_mask: Option<&[bool]>,
    ) -> Var {
        let raw_proj = self.skip.forward(tape, raw);
        let cat = tape.concat(&[tilde, raw_proj], 0);
        let mask: Vec<bool> = match raw_mask {
            Some(m) => std::iter::once(true).chain(m.iter().copied()).collect(),
            None => vec![true; tape.value(cat).shape()[0]],
        };
        let attended = self.attn.forward(tape, tilde, cat, Some(&mask));
        let normed = self.ln.forward(tape, attended);
        let pre = self.fc0.forward(tape, tilde);
        let z = tape.add(pre, normed);
        let delta = self.fc1.forward(tape, z);
        tape.add(tilde, delta)
    }
}

impl<F: Scalar> Module<F> for FqcaBlock<F> {
    fn params(&self) -> Vec<&Param<F>> {
        let mut v = self.skip.params();
        v.extend(self.attn.params());
        v.extend(self.ln.params());
        v.extend(self.fc0.params());
        v.extend(self.fc1.params());
        v
    }
    fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        let mut v = self.skip.params_mut();
        v.extend(self.attn.params_mut());
        v.extend(self.ln.params_mut());
        v.extend(self.fc0.params_mut());
        v.extend(self.fc1.params_mut());
        v
    }
}

#[derive(Debug, Clone)]
pub struct McanModel<F: Scalar> {
    pub cfg: MCANConfig,
    pub question_vocab: Vocab,
    pub answer_vocab: AnswerVocab,
    embedding: Param<F>,
    lstm: Lstm<F>,
    obj_proj: Linear<F>,
    q_self: Vec<MultiHeadAttention<F>>,
    q_norm: Vec<LayerNorm<F>>,
    f_self: Vec<MultiHeadAttention<F>>,
    f_self_norm: Vec<LayerNorm<F>>,
    f_guided: Vec<MultiHeadAttention<F>>,
    f_guided_norm: Vec<LayerNorm<F>>,
    q_pool: Linear<F>,
    f_pool: Linear<F>,
    q_fqca: FqcaBlock<F>,
    f_fqca: FqcaBlock<F>,
    classifier: Linear<F>,
}

/// Tape handles for one forward pass.
pub struct VqaForward {
    pub logits: Var,
    pub q_pooled: Var,
    pub f_pooled: Var,
    pub f_tokens: Var,
    pub q_tokens: Var,
}

impl<F: Scalar> McanModel<F> {
    pub fn new(
        cfg: MCANConfig,
        question_vocab: Vocab,
        answer_vocab: AnswerVocab,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        if answer_vocab.len() != cfg.num_answers {
            return Err(Error::Config(format!(
                "config expects {} answers, vocabulary has {}",
                cfg.num_answers,
                answer_vocab.len()
            )));
        }
        let dim = cfg.hidden_dim;
        let embedding = Param::new(
            "mcan.embedding",
            crate::nn::init::matrix::<F>(rng, question_vocab.len(), cfg.glove_dim, 0.1),
        );
        let lstm = Lstm::new("mcan.lstm", cfg.glove_dim, dim, rng);
        let obj_proj = Linear::new("mcan.obj_proj", cfg.feat_dim, dim, rng);
        let mut q_self = Vec::new();
        let mut q_norm = Vec::new();
        let mut f_self = Vec::new();
        let mut f_self_norm = Vec::new();
        let mut f_guided = Vec::new();
        let mut f_guided_norm = Vec::new();
        for l in 0..cfg.layers {
            q_self.push(MultiHeadAttention::new(&format!("mcan.q_self{l}"), dim, cfg.heads, rng));
            q_norm.push(LayerNorm::new(&format!("mcan.q_norm{l}"), dim));
            f_self.push(MultiHeadAttention::new(&format!("mcan.f_self{l}"), dim, cfg.heads, rng));
            f_self_norm.push(LayerNorm::new(&format!("mcan.f_self_norm{l}"), dim));
            f_guided.push(MultiHeadAttention::new(&format!("mcan.f_guided{l}"), dim, cfg.heads, rng));
            f_guided_norm.push(LayerNorm::new(&format!("mcan.f_guided_norm{l}"), dim));
        }
        Ok(McanModel {
            q_pool: Linear::new("mcan.q_pool", dim, 1, rng),
            f_pool: Linear::new("mcan.f_pool", dim, 1, rng),
            q_fqca: FqcaBlock::new("mcan.q_fqca", dim, dim, cfg.heads, rng),
            f_fqca: FqcaBlock::new("mcan.f_fqca", dim, dim, cfg.heads, rng),
            classifier: Linear::new("mcan.classifier", dim, cfg.num_answers, rng),
            cfg,
            question_vocab,
            answer_vocab,
            embedding,
            lstm,
            obj_proj,
            q_self,
            q_norm,
            f_self,
            f_self_norm,
            f_guided,
            f_guided_norm,
        })
    }

    /// Token ids → encoded question states (N^s, hidden_dim).
    pub fn encode_question(&self, tape: &mut Tape<F>, token_ids: &[usize]) -> Result<Var> {
        if token_ids.is_empty() {
            return Err(Error::Data("empty token list".into()));
        }
        let table = tape.param(&self.embedding);
        let embedded = tape.gather_rows(table, token_ids);
        Ok(self.lstm.forward(tape, embedded))
    }

    /// The two attention flows. Returns (F_L, Q_L).
    pub fn flows(
        &self,
        tape: &mut Tape<F>,
        features: Var,
        obj_mask: &[bool],
        q_encoded: Var,
        q_mask: &[bool],
    ) -> Result<(Var, Var)> {
        let t_obj = tape.value(features).shape()[0];
        let t_q = tape.value(q_encoded).shape()[0];
        if obj_mask.len() != t_obj || q_mask.len() != t_q {
            return Err(Error::Shape(format!(
                "mask lengths ({}, {}) vs sequences ({t_obj}, {t_q})",
                obj_mask.len(),
                q_mask.len()
            )));
        }
        let mut q = q_encoded;
        for (layer, norm) in self.q_self.iter().zip(&self.q_norm) {
            let a = layer.forward(tape, q, q, Some(q_mask));
            let r = tape.add(q, a);
            q = norm.forward(tape, r);
        }
        let mut f = self.obj_proj.forward(tape, features);
        for l in 0..self.cfg.layers {
            let a = self.f_self[l].forward(tape, f, f, Some(obj_mask));
            let r = tape.add(f, a);
            f = self.f_self_norm[l].forward(tape, r);
            let g = self.f_guided[l].forward(tape, f, q, Some(q_mask));
            let r = tape.add(f, g);
            f = self.f_guided_norm[l].forward(tape, r);
        }
        Ok((f, q))
    }

    pub fn q_pool_layer(&self) -> &Linear<F> {
        &self.q_pool
    }

    pub fn f_pool_layer(&self) -> &Linear<F> {
        &self.f_pool
    }

    /// Softmaxed per-token scores collapse (T, dim) to (1, dim).
    pub fn reduce_dim(
        &self,
        tape: &mut Tape<F>,
        tokens: Var,
        pool: &Linear<F>,
        mask: &[bool],
    ) -> Var {
        let scores = pool.forward(tape, tokens); // (T, 1)
        let row = tape.transpose(scores); // (1, T)
        let alpha = tape.softmax_rows(row, Some(mask));
        tape.matmul(alpha, tokens) // (1, dim)
    }

    /// Z = Q̃ + F̃ → answer logits (1, N).
    pub fn fuse_and_classify(&self, tape: &mut Tape<F>, q_vec: Var, f_vec: Var) -> Var {
        let z = tape.add(q_vec, f_vec);
        self.classifier.forward(tape, z)
    }

    /// Full forward pass for one (frame, question) instance.
    pub fn forward(
        &self,
        tape: &mut Tape<F>,
        features: &ObjectFeatureSet<F>,
        token_ids: &[usize],
    ) -> Result<VqaForward> {
        if features.features.ncols() != self.cfg.feat_dim {
            return Err(Error::Shape(format!(
                "feature width {} vs configured {}",
                features.features.ncols(),
                self.cfg.feat_dim
            )));
        }
        let feats = tape.constant(features.features.clone().into_dyn());
        let q_encoded = self.encode_question(tape, token_ids)?;
        let q_mask = vec![true; token_ids.len()];
        let (f_l, q_l) = self.flows(tape, feats, &features.mask, q_encoded, &q_mask)?;
        let q_tilde = self.reduce_dim(tape, q_l, &self.q_pool, &q_mask);
        let f_tilde = self.reduce_dim(tape, f_l, &self.f_pool, &features.mask);
        let (q_out, f_out) = if self.cfg.fqca {
            (
                self.q_fqca.forward(tape, q_tilde, f_l, Some(&features.mask)),
                self.f_fqca.forward(tape, f_tilde, q_l, Some(&q_mask)),
            )
        } else {
            (q_tilde, f_tilde)
        };
        let logits = self.fuse_and_classify(tape, q_out, f_out);
        Ok(VqaForward {
            logits,
            q_pooled: q_out,
            f_pooled: f_out,
            f_tokens: f_l,
            q_tokens: q_l,
        })
    }

    /// BCE training loss against the one-hot answer for one instance.
    pub fn loss(
        &self,
        tape: &mut Tape<F>,
        features: &ObjectFeatureSet<F>,
        token_ids: &[usize],
        answer_id: usize,
    ) -> Result<Var> {
        if answer_id >= self.cfg.num_answers {
            return Err(Error::Loss(format!(
                "answer id {answer_id} outside 0..{}",
                self.cfg.num_answers
            )));
        }
        let fwd = self.forward(tape, features, token_ids)?;
        let mut onehot = ArrayD::zeros(IxDyn(&[1, self.cfg.num_answers]));
        onehot[[0, answer_id]] = F::one();
        Ok(tape.bce_with_logits(fwd.logits, &onehot))
    }

    /// Sigmoid answer scores for one instance (inference path).
    pub fn answer_scores(
        &self,
        features: &ObjectFeatureSet<F>,
        question: &str,
    ) -> Result<Vec<f64>> {
        let token_ids = self.question_vocab.encode(question)?;
        let mut tape = Tape::<F>::new();
        let fwd = self.forward(&mut tape, features, &token_ids)?;
        let scores = tape.sigmoid(fwd.logits);
        Ok(tape
            .value(scores)
            .iter()
            .map(|x| x.to_f64_lossy())
            .collect())
    }
}

impl<F: Scalar> Module<F> for McanModel<F> {
    fn params(&self) -> Vec<&Param<F>> {
        let mut v: Vec<&Param<F>> = vec![&self.embedding];
        v.extend(self.lstm.params());
        v.extend(self.obj_proj.params());
        for l in self.q_self.iter().chain(&self.f_self).chain(&self.f_guided) {
            v.extend(l.params());
        }
        for n in self
            .q_norm
            .iter()
            .chain(&self.f_self_norm)
            .chain(&self.f_guided_norm)
        {
            v.extend(n.params());
        }
        v.extend(self.q_pool.params());
        v.extend(self.f_pool.params());
        if self.cfg.fqca {
            v.extend(self.q_fqca.params());
            v.extend(self.f_fqca.params());
        }
        v.extend(self.classifier.params());
        v
    }
    fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        let fqca = self.cfg.fqca;
        let mut v: Vec<&mut Param<F>> = vec![&mut self.embedding];
        v.extend(self.lstm.params_mut());
        v.extend(self.obj_proj.params_mut());
        for l in self
            .q_self
            .iter_mut()
            .chain(self.f_self.iter_mut())
            .chain(self.f_guided.iter_mut())
        {
            v.extend(l.params_mut());
        }
        for n in self
            .q_norm
            .iter_mut()
            .chain(self.f_self_norm.iter_mut())
            .chain(self.f_guided_norm.iter_mut())
        {
            v.extend(n.params_mut());
        }
        v.extend(self.q_pool.params_mut());
        v.extend(self.f_pool.params_mut());
        if fqca {
            v.extend(self.q_fqca.params_mut());
            v.extend(self.f_fqca.params_mut());
        }
        v.extend(self.classifier.params_mut());
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::init;
    use crate::seeding::rng_from;
    use rand::Rng;

    fn vocabs() -> (Vocab, AnswerVocab) {
        let q = Vocab::build(["what tool is here", "is the site clear", "which hand moves"]);
        let a = AnswerVocab::build([
            "yes", "no", "scalpel", "syringe", "gauze", "left", "right", "none",
        ])
        .unwrap();
        (q, a)
    }

    fn desk_cfg(fqca: bool) -> MCANConfig {
        MCANConfig {
            hidden_dim: 32,
            layers: 2,
            heads: 4,
            num_answers: 8,
            fqca,
            n_obj_max: 6,
            feat_dim: 64,
            glove_dim: 16,
        }
    }

    fn features(real: usize, n_max: usize, width: usize, seed: u64) -> ObjectFeatureSet<f64> {
        let mut rng = rng_from(seed);
        let raw = Array2::from_shape_fn((real, width), |_| rng.random_range(-1.0..1.0));
        ObjectFeatureSet::from_raw(&raw, n_max).unwrap()
    }

    #[test]
    fn vocab_encodes_with_unk() {
        let (q, _) = vocabs();
        let ids = q.encode("what gizmo is here").unwrap();
        assert_eq!(ids.len(), 4);
        assert_eq!(ids[1], UNK_ID);
        assert!(q.encode("...").is_err());
    }

    #[test]
    fn answer_vocab_is_dense_and_unique() {
        let (_, a) = vocabs();
        assert_eq!(a.len(), 8);
        for i in 0..a.len() {
            let t = a.text_of(i).unwrap();
            assert_eq!(a.id_of(t), Some(i));
        }
        assert_eq!(a.id_of("SCALPEL"), a.id_of("scalpel"));
    }

    #[test]
    fn partition_covers_disjointly() {
        assert_eq!(
            partition_blocks(30, 15),
            vec![(14, 0..15), (29, 15..30)]
        );
        assert_eq!(partition_blocks(1, 15), vec![(0, 0..1)]);
        assert_eq!(representative_frames(45, 15), vec![14, 29, 44]);
        assert_eq!(representative_frames(10, 15), vec![9]);
        for n in 1..=200 {
            let parts = partition_blocks(n, 15);
            assert_eq!(parts.len(), n.div_ceil(15), "count for n={n}");
            let mut covered = vec![false; n];
            for (rep, range) in &parts {
                assert!(range.contains(rep));
                for i in range.clone() {
                    assert!(!covered[i], "frame {i} covered twice at n={n}");
                    covered[i] = true;
                }
            }
            assert!(covered.iter().all(|&c| c), "gap at n={n}");
        }
    }

    #[test]
    fn feature_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.feat");
        let mut rng = rng_from(0);
        let frames: Vec<Array2<f32>> = (0..3)
            .map(|_| {
                Array2::from_shape_fn((4, OBJECT_FEATURE_WIDTH), |_| {
                    rng.random_range(-1.0_f32..1.0)
                })
            })
            .collect();
        write_features(&p, &frames).unwrap();
        let back = read_features(&p).unwrap();
        assert_eq!(back.len(), 3);
        for (a, b) in frames.iter().zip(&back) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn encode_question_shapes() {
        let (q, a) = vocabs();
        let mut rng = rng_from(1);
        let model = McanModel::<f64>::new(desk_cfg(false), q, a, &mut rng).unwrap();
        let mut tape = Tape::<f64>::new();
        let ids = model.question_vocab.encode("what tool is here").unwrap();
        let enc = model.encode_question(&mut tape, &ids).unwrap();
        assert_eq!(tape.value(enc).shape(), &[4, 32]);
        let one = model.encode_question(&mut tape, &[1]).unwrap();
        assert_eq!(tape.value(one).shape(), &[1, 32]);
    }

    #[test]
    fn embedding_permutation_invariance() {
        // permuting vocabulary rows together with ids leaves the lookup output unchanged
        let mut rng = rng_from(2);
        let table = init::matrix::<f64>(&mut rng, 5, 4, 1.0);
        let ids = [3usize, 1, 1, 4];
        let perm = [2usize, 0, 4, 1, 3]; // old id -> new id
        let mut permuted = table.clone();
        for (old, &new) in perm.iter().enumerate() {
            for j in 0..4 {
                permuted[[new, j]] = table[[old, j]];
            }
        }
        let permuted_ids: Vec<usize> = ids.iter().map(|&i| perm[i]).collect();
        let mut t1 = Tape::<f64>::new();
        let tab1 = t1.constant(table);
        let g1 = t1.gather_rows(tab1, &ids);
        let mut t2 = Tape::<f64>::new();
        let tab2 = t2.constant(permuted);
        let g2 = t2.gather_rows(tab2, &permuted_ids);
        assert_eq!(t1.value(g1), t2.value(g2));
    }

    #[test]
    fn flow_output_shapes() {
        let (q, a) = vocabs();
        let mut rng = rng_from(3);
        let model = McanModel::<f64>::new(desk_cfg(false), q, a, &mut rng).unwrap();
        let feats = features(4, 6, 64, 4);
        let mut tape = Tape::<f64>::new();
        let fwd = model
            .forward(&mut tape, &feats, &model.question_vocab.encode("what tool is here").unwrap())
            .unwrap();
        assert_eq!(tape.value(fwd.f_tokens).shape(), &[6, 32]);
        assert_eq!(tape.value(fwd.q_tokens).shape(), &[4, 32]);
        assert_eq!(tape.value(fwd.logits).shape(), &[1, 8]);
        assert_eq!(tape.value(fwd.q_pooled).shape(), &[1, 32]);
    }

    #[test]
    fn attention_rows_sum_to_one_over_unmasked() {
        let mut rng = rng_from(5);
        let attn = MultiHeadAttention::<f64>::new("a", 16, 4, &mut rng);
        let q = Array2::from_shape_fn((3, 16), |_| init::normal(&mut rng));
        let k = Array2::from_shape_fn((5, 16), |_| init::normal(&mut rng));
        let mask = [true, true, false, true, false];
        for map in attn.attention_maps(&q, &k, Some(&mask)) {
            for row in map.rows() {
                let s: f64 = row.sum();
                assert!((s - 1.0).abs() < 1e-5);
                assert_eq!(row[2], 0.0);
                assert_eq!(row[4], 0.0);
            }
        }
    }

    #[test]
    fn reduce_dim_uniform_scores_is_masked_mean() {
        let (q, a) = vocabs();
        let mut rng = rng_from(6);
        let mut model = McanModel::<f64>::new(desk_cfg(false), q, a, &mut rng).unwrap();
        model.q_pool.w.value.fill(0.0);
        model.q_pool.b.value.fill(0.0);
        let x = Array2::from_shape_fn((4, 32), |_| init::normal(&mut rng));
        let mask = [true, true, true, false];
        let mut tape = Tape::<f64>::new();
        let xv = tape.constant(x.clone().into_dyn());
        let pooled = model.reduce_dim(&mut tape, xv, &model.q_pool, &mask);
        let got = tape.value(pooled).to_owned();
        for j in 0..32 {
            let mean = (x[[0, j]] + x[[1, j]] + x[[2, j]]) / 3.0;
            assert!((got[[0, j]] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn reduce_dim_single_token_is_identity() {
        let (q, a) = vocabs();
        let mut rng = rng_from(7);
        let model = McanModel::<f64>::new(desk_cfg(false), q, a, &mut rng).unwrap();
        let x = Array2::from_shape_fn((1, 32), |_| init::normal(&mut rng));
        let mut tape = Tape::<f64>::new();
        let xv = tape.constant(x.clone().into_dyn());
        let pooled = model.reduce_dim(&mut tape, xv, &model.f_pool, &[true]);
        let got = tape.value(pooled).to_owned();
        for j in 0..32 {
            assert!((got[[0, j]] - x[[0, j]]).abs() < 1e-12);
        }
    }

    #[test]
    fn reduce_dim_matches_loop_oracle() {
        let (q, a) = vocabs();
        let mut rng = rng_from(8);
        let model = McanModel::<f64>::new(desk_cfg(false), q, a, &mut rng).unwrap();
        let x = Array2::from_shape_fn((5, 32), |_| init::normal(&mut rng));
        let mask = vec![true; 5];
        let mut tape = Tape::<f64>::new();
        let xv = tape.constant(x.clone().into_dyn());
        let pooled = model.reduce_dim(&mut tape, xv, &model.q_pool, &mask);
        let got = tape.value(pooled).to_owned();

        // explicit oracle: alpha_t = softmax(w·x_t + b), out = sum alpha_t x_t
        let w = &model.q_pool.w.value;
        let b = model.q_pool.b.value[[0]];
        let mut scores = Vec::new();
        for t in 0..5 {
            let mut s = b;
            for j in 0..32 {
                s += x[[t, j]] * w[[j, 0]];
            }
            scores.push(s);
        }
        let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
        let denom: f64 = exps.iter().sum();
        for j in 0..32 {
            let mut expect = 0.0;
            for t in 0..5 {
                expect += exps[t] / denom * x[[t, j]];
            }
            assert!((got[[0, j]] - expect).abs() < 1e-6);
        }
    }

    #[test]
    fn fqca_concat_shape_and_residual_identity() {
        let (q, a) = vocabs();
        let mut rng = rng_from(9);
        let mut model = McanModel::<f64>::new(desk_cfg(true), q, a, &mut rng).unwrap();
        // zero final projection -> identity on tilde
        model.q_fqca.fc1.w.value.fill(0.0);
        model.q_fqca.fc1.b.value.fill(0.0);
        let tilde = Array2::from_shape_fn((1, 32), |_| init::normal(&mut rng));
        let raw = Array2::from_shape_fn((6, 32), |_| init::normal(&mut rng));
        let mut tape = Tape::<f64>::new();
        let tv = tape.constant(tilde.clone().into_dyn());
        let rv = tape.constant(raw.into_dyn());
        let out = model.q_fqca.forward(&mut tape, tv, rv, None);
        assert_eq!(tape.value(out).shape(), &[1, 32]);
        let got = tape.value(out).to_owned();
        for j in 0..32 {
            assert_eq!(got[[0, j]], tilde[[0, j]], "exact residual identity");
        }
    }

    #[test]
    fn fqca_off_is_bit_identical_to_baseline_composition() {
        let (q, a) = vocabs();
        let mut rng = rng_from(10);
        let model = McanModel::<f64>::new(desk_cfg(false), q, a, &mut rng).unwrap();
        let feats = features(5, 6, 64, 11);
        let ids = model.question_vocab.encode("is the site clear").unwrap();

        let mut tape = Tape::<f64>::new();
        let fwd = model.forward(&mut tape, &feats, &ids).unwrap();
        let full = tape.value(fwd.logits).to_owned();

        // baseline composition without any fusion blocks in the graph
        let mut t2 = Tape::<f64>::new();
        let fv = t2.constant(feats.features.clone().into_dyn());
        let qe = model.encode_question(&mut t2, &ids).unwrap();
        let qmask = vec![true; ids.len()];
        let (fl, ql) = model.flows(&mut t2, fv, &feats.mask, qe, &qmask).unwrap();
        let qt = model.reduce_dim(&mut t2, ql, &model.q_pool, &qmask);
        let ft = model.reduce_dim(&mut t2, fl, &model.f_pool, &feats.mask);
        let logits = model.fuse_and_classify(&mut t2, qt, ft);
        let base = t2.value(logits).to_owned();

        assert_eq!(full, base);
    }

    #[test]
    fn padding_invariance() {
        let (q, a) = vocabs();
        let mut rng = rng_from(12);
        for fqca in [false, true] {
            let model = McanModel::<f64>::new(desk_cfg(fqca), q.clone(), a.clone(), &mut rng)
                .unwrap();
            let mut rng2 = rng_from(13);
            let raw = Array2::from_shape_fn((3, 64), |_| rng2.random_range(-1.0..1.0));
            let narrow = ObjectFeatureSet::from_raw(&raw, 3).unwrap();
            let wide = ObjectFeatureSet::from_raw(&raw, 6).unwrap();
            let s1 = model.answer_scores(&narrow, "what tool is here").unwrap();
            let s2 = model.answer_scores(&wide, "what tool is here").unwrap();
            for (x, y) in s1.iter().zip(&s2) {
                assert!((x - y).abs() < 1e-5, "fqca={fqca}: {x} vs {y}");
            }
        }
    }

    #[test]
    fn bce_zero_classifier_gives_half_scores_and_ln2() {
        let (q, a) = vocabs();
        let mut rng = rng_from(14);
        let mut model = McanModel::<f64>::new(desk_cfg(false), q, a, &mut rng).unwrap();
        model.classifier.w.value.fill(0.0);
        model.classifier.b.value.fill(0.0);
        let feats = features(2, 6, 64, 15);
        let scores = model.answer_scores(&feats, "what tool is here").unwrap();
        assert_eq!(scores.len(), 8);
        for s in &scores {
            assert!((s - 0.5).abs() < 1e-12);
        }
        let ids = model.question_vocab.encode("what tool is here").unwrap();
        let mut tape = Tape::<f64>::new();
        let loss = model.loss(&mut tape, &feats, &ids, 3).unwrap();
        assert!((tape.scalar(loss) - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn bce_matches_loop_oracle_on_random_scores() {
        let mut rng = rng_from(16);
        let n = 8;
        let logits_arr =
            ArrayD::from_shape_fn(IxDyn(&[1, n]), |_| rng.random_range(-2.0..2.0_f64));
        let mut onehot = ArrayD::zeros(IxDyn(&[1, n]));
        onehot[[0, 5]] = 1.0;
        let mut tape = Tape::<f64>::new();
        let lv = tape.constant(logits_arr.clone());
        let loss = tape.bce_with_logits(lv, &onehot);

        let mut expect = 0.0;
        for j in 0..n {
            let z: f64 = logits_arr[[0, j]];
            let y = onehot[[0, j]];
            let s = 1.0 / (1.0 + (-z).exp());
            expect += -(y * s.ln() + (1.0 - y) * (1.0 - s).ln());
        }
        expect /= n as f64;
        assert!((tape.scalar(loss) - expect).abs() < 1e-6);
    }

    #[test]
    fn training_overfits_a_small_decodable_set() {
        // answers are encoded as one active feature block per frame
        let questions = ["what tool is in the hand", "what is on the table"];
        let q = Vocab::build(questions);
        let a = AnswerVocab::build(["yes", "no", "red", "green", "blue", "left", "right", "gauze"])
            .unwrap();
        let cfg = MCANConfig {
            hidden_dim: 32,
            layers: 1,
            heads: 4,
            num_answers: 8,
            fqca: true,
            n_obj_max: 4,
            feat_dim: 64,
            glove_dim: 16,
        };
        let mut rng = rng_from(17);
        let mut model = McanModel::<f64>::new(cfg, q, a, &mut rng).unwrap();
        let mut opt = crate::nn::Adam::new(3e-3);

        let mut drng = rng_from(23);
        let mut data = Vec::new();
        for frame in 0..48 {
            let t = frame % 2;
            let ans = drng.random_range(0..8usize);
            let mut raw = Array2::<f64>::zeros((3, 64));
            for o in 0..3 {
                raw[[o, t * 8 + ans]] = 5.0 + drng.random_range(-0.3..0.3);
                for j in 0..64 {
                    raw[[o, j]] += drng.random_range(-0.1..0.1);
                }
            }
            data.push((
                ObjectFeatureSet::from_raw(&raw, 4).unwrap(),
                questions[t],
                ans,
            ));
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut orng = rng_from(29);
        for step in 0..350 {
            if step % (data.len() / 8) == 0 {
                for i in (1..order.len()).rev() {
                    let j = orng.random_range(0..=i);
                    order.swap(i, j);
                }
            }
            let mut tape = Tape::<f64>::new();
            let mut losses = Vec::new();
            for b in 0..8 {
                let (f, qq, ans) = &data[order[(step * 8 + b) % data.len()]];
                let ids = model.question_vocab.encode(qq).unwrap();
                losses.push(model.loss(&mut tape, f, &ids, *ans).unwrap());
            }
            let total = tape.mean_of(&losses);
            let grads = tape.backward(total);
            opt.step(model.params_mut(), &grads);
        }
        let correct = data
            .iter()
            .filter(|(f, qq, ans)| {
                let s = model.answer_scores(f, qq).unwrap();
                crate::heads::argmax(&s) == *ans
            })
            .count();
        assert!(
            correct as f64 / data.len() as f64 >= 0.9,
            "only {correct}/{} correct",
            data.len()
        );
    }

    #[test]
    fn whole_model_gradients_match_finite_differences() {
        let (q, a) = vocabs();
        let mut rng = rng_from(18);
        let model = McanModel::<f64>::new(desk_cfg(true), q, a, &mut rng).unwrap();
        let feats = features(3, 4, 64, 19);
        let ids = model.question_vocab.encode("which hand moves").unwrap();

        let eval = |m: &McanModel<f64>| {
            let mut tape = Tape::<f64>::new();
            let loss = m.loss(&mut tape, &feats, &ids, 2).unwrap();
            tape.scalar(loss)
        };
        let mut tape = Tape::<f64>::new();
        let loss = model.loss(&mut tape, &feats, &ids, 2).unwrap();
        let grads = tape.backward(loss);

        let mut checked = 0;
        let n_params = model.params().len();
        let mut rng2 = rng_from(20);
        while checked < 20 {
            let pi = rng2.random_range(0..n_params);
            let len = model.params()[pi].len();
            let fi = rng2.random_range(0..len);
            let a_grad = match grads.for_param(model.params()[pi]) {
                Some(g) => g.as_slice().unwrap()[fi],
                None => continue,
            };
            let h = 1e-5;
            let mut plus = model.clone();
            plus.params_mut()[pi].value.as_slice_mut().unwrap()[fi] += h;
            let mut minus = model.clone();
            minus.params_mut()[pi].value.as_slice_mut().unwrap()[fi] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let denom = a_grad.abs().max(fd.abs()).max(1e-7);
            assert!(
                ((a_grad - fd) / denom).abs() < 1e-3,
                "param {pi}[{fi}]: {a_grad} vs {fd}"
            );
            checked += 1;
        }
    }
}
