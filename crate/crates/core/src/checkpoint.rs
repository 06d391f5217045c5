//! Checkpoint serialization: trainable parameters, negative-queue
//! contents, optimizer state, and the architecture hash of the config
//! that produced them. Values are stored as f64, which round-trips f32
//! and f64 parameters exactly through JSON.

use std::collections::HashMap;
use std::path::Path;

use ndarray::{Array2, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::config::TaskKind;
use crate::error::{Error, Result};
use crate::heads::HeadMode;
use crate::mcan::{AnswerVocab, Vocab};
use crate::nn::{Adam, AdamSlot, Param};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorData {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl TensorData {
    pub fn from_array<F: Scalar>(a: &ArrayD<F>) -> Self {
        TensorData {
            shape: a.shape().to_vec(),
            data: a.iter().map(|x| x.to_f64_lossy()).collect(),
        }
    }

    pub fn from_matrix<F: Scalar>(a: &Array2<F>) -> Self {
        Self::from_array(&a.clone().into_dyn())
    }

    pub fn to_array<F: Scalar>(&self) -> Result<ArrayD<F>> {
        ArrayD::from_shape_vec(
            IxDyn(&self.shape),
            self.data.iter().map(|&x| F::from_f64(x)).collect(),
        )
        .map_err(|e| Error::Checkpoint(format!("bad tensor shape: {e}")))
    }

    pub fn to_matrix<F: Scalar>(&self) -> Result<Array2<F>> {
        self.to_array::<F>()?
            .into_dimensionality::<ndarray::Ix2>()
            .map_err(|e| Error::Checkpoint(format!("expected matrix: {e}")))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizerState {
    pub step: u64,
    /// (param name, first moment, second moment), sorted by name.
    pub slots: Vec<(String, TensorData, TensorData)>,
}

impl OptimizerState {
    pub fn capture<F: Scalar>(opt: &Adam<F>) -> Self {
        let mut slots: Vec<(String, TensorData, TensorData)> = opt
            .slots()
            .map(|(name, slot)| {
                (
                    name.clone(),
                    TensorData::from_array(&slot.m),
                    TensorData::from_array(&slot.v),
                )
            })
            .collect();
        slots.sort_by(|a, b| a.0.cmp(&b.0));
        OptimizerState {
            step: opt.step_count(),
            slots,
        }
    }

    pub fn restore<F: Scalar>(&self, opt: &mut Adam<F>) -> Result<()> {
        let mut slots = HashMap::new();
        for (name, m, v) in &self.slots {
            slots.insert(
                name.clone(),
                AdamSlot {
                    m: m.to_array()?,
                    v: v.to_array()?,
                },
            );
        }
        opt.restore(self.step, slots);
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config_hash: String,
    pub task: TaskKind,
    /// Head design this checkpoint was trained with (distillation tasks).
    pub head_mode: Option<HeadMode>,
    pub step: u64,
    /// Trainable parameters, sorted by name.
    pub params: Vec<(String, TensorData)>,
    /// Negative-queue rows, oldest first (distillation tasks).
    pub queue: Option<TensorData>,
    pub optimizer: OptimizerState,
    /// Vocabularies (answer-classification task).
    pub question_vocab: Option<Vocab>,
    pub answer_vocab: Option<AnswerVocab>,
}

impl Checkpoint {
    pub fn capture_params<F: Scalar>(params: &[&Param<F>]) -> Vec<(String, TensorData)> {
        let mut out: Vec<(String, TensorData)> = params
            .iter()
            .map(|p| (p.name().to_string(), TensorData::from_array(&p.value)))
            .collect();
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    /// Copy saved values into matching parameters; every parameter must be
    /// present with the right shape.
    pub fn restore_params<F: Scalar>(
        saved: &[(String, TensorData)],
        params: Vec<&mut Param<F>>,
    ) -> Result<()> {
        let by_name: HashMap<&str, &TensorData> =
            saved.iter().map(|(n, t)| (n.as_str(), t)).collect();
        for p in params {
            let t = by_name.get(p.name()).ok_or_else(|| {
                Error::Checkpoint(format!("parameter {} missing from checkpoint", p.name()))
            })?;
            if t.shape != p.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {} has shape {:?}, checkpoint has {:?}",
                    p.name(),
                    p.value.shape(),
                    t.shape
                )));
            }
            p.value = t.to_array()?;
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_string(self).map_err(|e| Error::Checkpoint(e.to_string()))?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut ckpt: Checkpoint = serde_json::from_str(&text)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        if let Some(v) = &mut ckpt.question_vocab {
            v.rebuild_index();
        }
        if let Some(v) = &mut ckpt.answer_vocab {
            v.rebuild_index();
        }
        Ok(ckpt)
    }

    /// Refuse checkpoints produced under a different architecture.
    pub fn check_hash(&self, expected: &str) -> Result<()> {
        if self.config_hash != expected {
            return Err(Error::Checkpoint(format!(
                "checkpoint config hash {} does not match the current config {}; \
                 refusing to load",
                &self.config_hash[..12.min(self.config_hash.len())],
                &expected[..12.min(expected.len())]
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Linear, Module};
    use crate::seeding::rng_from;

    #[test]
    fn f32_values_round_trip_exactly() {
        let mut rng = rng_from(0);
        let lin = Linear::<f32>::new("l", 5, 3, &mut rng);
        let saved = Checkpoint::capture_params(&lin.params());
        let mut rng2 = rng_from(1);
        let mut other = Linear::<f32>::new("l", 5, 3, &mut rng2);
        Checkpoint::restore_params(&saved, other.params_mut()).unwrap();
        assert_eq!(lin.w.value, other.w.value);
        assert_eq!(lin.b.value, other.b.value);
    }

    #[test]
    fn shape_mismatch_is_refused() {
        let mut rng = rng_from(2);
        let lin = Linear::<f32>::new("l", 5, 3, &mut rng);
        let saved = Checkpoint::capture_params(&lin.params());
        let mut wrong = Linear::<f32>::new("l", 4, 3, &mut rng);
        assert!(Checkpoint::restore_params(&saved, wrong.params_mut()).is_err());
    }

    #[test]
    fn optimizer_state_round_trips() {
        let mut rng = rng_from(3);
        let mut lin = Linear::<f64>::new("l", 4, 2, &mut rng);
        let mut opt = Adam::new(1e-2);
        for _ in 0..3 {
            let mut tape = crate::tape::Tape::<f64>::new();
            let x = tape.constant(crate::nn::init::matrix::<f64>(&mut rng, 2, 4, 1.0));
            let y = lin.forward(&mut tape, x);
            let sq = tape.mul(y, y);
            let loss = tape.mean_all(sq);
            let grads = tape.backward(loss);
            opt.step(lin.params_mut(), &grads);
        }
        let state = OptimizerState::capture(&opt);
        let mut restored = Adam::<f64>::new(1e-2);
        state.restore(&mut restored).unwrap();
        assert_eq!(restored.step_count(), 3);
        let a = OptimizerState::capture(&opt);
        let b = OptimizerState::capture(&restored);
        assert_eq!(a.slots.len(), b.slots.len());
        for ((n1, m1, v1), (n2, m2, v2)) in a.slots.iter().zip(&b.slots) {
            assert_eq!(n1, n2);
            assert_eq!(m1.data, m2.data);
            assert_eq!(v1.data, v2.data);
        }
    }

    #[test]
    fn hash_check_refuses_mismatch() {
        let ckpt = Checkpoint {
            config_hash: "abc123".into(),
            task: TaskKind::Recognition,
            head_mode: None,
            step: 0,
            params: vec![],
            queue: None,
            optimizer: OptimizerState {
                step: 0,
                slots: vec![],
            },
            question_vocab: None,
            answer_vocab: None,
        };
        assert!(ckpt.check_hash("abc123").is_ok());
        assert!(ckpt.check_hash("def456").is_err());
    }
}
