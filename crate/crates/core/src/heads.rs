//! Classification heads over a shared encoder embedding.
//!
//! Four designs: two independent single-task models (verb-only and
//! noun-only), a multi-task head pair on one encoder, and the unified
//! action head that predicts a dictionary entry and decodes it back to
//! (verb, noun).

use serde::{Deserialize, Serialize};

use crate::dictionary::ActionDictionary;
use crate::error::{Error, Result};
use crate::nn::{Linear, Module, Param};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadMode {
    SingleVerb,
    SingleNoun,
    Multi,
    Adg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub mode: HeadMode,
    pub input_dim: usize,
    pub num_verbs: usize,
    pub num_nouns: usize,
    pub num_actions: usize,
}

impl HeadConfig {
    pub fn logit_width(&self) -> usize {
        match self.mode {
            HeadMode::SingleVerb => self.num_verbs,
            HeadMode::SingleNoun => self.num_nouns,
            HeadMode::Multi => self.num_verbs + self.num_nouns,
            HeadMode::Adg => self.num_actions,
        }
    }

    pub fn validate_against(&self, dict: &ActionDictionary) -> Result<()> {
        if self.num_verbs != dict.num_verbs()
            || self.num_nouns != dict.num_nouns()
            || self.num_actions != dict.num_actions()
        {
            return Err(Error::Config(format!(
                "head counts ({}, {}, {}) do not match dictionary ({}, {}, {})",
                self.num_verbs,
                self.num_nouns,
                self.num_actions,
                dict.num_verbs(),
                dict.num_nouns(),
                dict.num_actions()
            )));
        }
        Ok(())
    }
}

/// Ground truth for one clip. `action` must be present in adg mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Target {
    pub verb: usize,
    pub noun: usize,
    pub action: Option<usize>,
}

/// Per-head score vectors (logits or probabilities; decode only argmaxes).
#[derive(Debug, Clone, PartialEq)]
pub enum HeadScores {
    Action(Vec<f64>),
    Factored { verb: Vec<f64>, noun: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActionPrediction {
    pub verb: usize,
    pub noun: usize,
    /// Present iff (verb, noun) is a dictionary entry.
    pub action: Option<usize>,
    pub scores: HeadScores,
}

/// Argmax with ties broken by lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone)]
pub struct ClassifierHead<F: Scalar> {
    pub cfg: HeadConfig,
    verb_head: Option<Linear<F>>,
    noun_head: Option<Linear<F>>,
    action_head: Option<Linear<F>>,
}

impl<F: Scalar> ClassifierHead<F> {
    pub fn new(name: &str, cfg: HeadConfig, rng: &mut rand_chacha::ChaCha8Rng) -> Self {
        let mk = |suffix: &str, out: usize, rng: &mut rand_chacha::ChaCha8Rng| {
            Linear::new(&format!("{name}.{suffix}"), cfg.input_dim, out, rng)
        };
        let (verb_head, noun_head, action_head) = match cfg.mode {
            HeadMode::SingleVerb => (Some(mk("verb", cfg.num_verbs, rng)), None, None),
            HeadMode::SingleNoun => (None, Some(mk("noun", cfg.num_nouns, rng)), None),
            HeadMode::Multi => (
                Some(mk("verb", cfg.num_verbs, rng)),
                Some(mk("noun", cfg.num_nouns, rng)),
                None,
            ),
            HeadMode::Adg => (None, None, Some(mk("action", cfg.num_actions, rng))),
        };
        ClassifierHead {
            cfg,
            verb_head,
            noun_head,
            action_head,
        }
    }

    /// embeddings (B, d) → logits (B, logit_width). Multi mode emits the
    /// verb block followed by the noun block.
    pub fn forward(&self, tape: &mut Tape<F>, embeddings: Var) -> Result<Var> {
        let width = tape.value(embeddings).shape()[1];
        if width != self.cfg.input_dim {
            return Err(Error::Shape(format!(
                "head expected embedding width {}, got {width}",
                self.cfg.input_dim
            )));
        }
        Ok(match self.cfg.mode {
            HeadMode::SingleVerb => self.verb_head.as_ref().unwrap().forward(tape, embeddings),
            HeadMode::SingleNoun => self.noun_head.as_ref().unwrap().forward(tape, embeddings),
            HeadMode::Adg => self.action_head.as_ref().unwrap().forward(tape, embeddings),
            HeadMode::Multi => {
                let v = self.verb_head.as_ref().unwrap().forward(tape, embeddings);
                let n = self.noun_head.as_ref().unwrap().forward(tape, embeddings);
                tape.concat(&[v, n], 1)
            }
        })
    }

    /// Cross-entropy on the mode's target field; multi mode sums the verb
    /// and noun cross-entropies.
    pub fn supervised_loss(&self, tape: &mut Tape<F>, logits: Var, targets: &[Target]) -> Result<Var> {
        let n = tape.value(logits).shape()[0];
        if targets.len() != n {
            return Err(Error::Shape(format!(
                "{} logit rows vs {} targets",
                n,
                targets.len()
            )));
        }
        let check = |ids: &[usize], count: usize, what: &str| -> Result<()> {
            for &id in ids {
                if id >= count {
                    return Err(Error::Loss(format!("{what} id {id} outside 0..{count}")));
                }
            }
            Ok(())
        };
        match self.cfg.mode {
            HeadMode::SingleVerb => {
                let ids: Vec<usize> = targets.iter().map(|t| t.verb).collect();
                check(&ids, self.cfg.num_verbs, "verb")?;
                Ok(tape.cross_entropy(logits, &ids))
            }
            HeadMode::SingleNoun => {
                let ids: Vec<usize> = targets.iter().map(|t| t.noun).collect();
                check(&ids, self.cfg.num_nouns, "noun")?;
                Ok(tape.cross_entropy(logits, &ids))
            }
            HeadMode::Adg => {
                let ids: Vec<usize> = targets
                    .iter()
                    .map(|t| {
                        t.action
                            .ok_or_else(|| Error::Loss("adg target without action id".into()))
                    })
                    .collect::<Result<_>>()?;
                check(&ids, self.cfg.num_actions, "action")?;
                Ok(tape.cross_entropy(logits, &ids))
            }
            HeadMode::Multi => {
                let k = self.cfg.num_verbs;
                let verbs: Vec<usize> = targets.iter().map(|t| t.verb).collect();
                let nouns: Vec<usize> = targets.iter().map(|t| t.noun).collect();
                check(&verbs, k, "verb")?;
                check(&nouns, self.cfg.num_nouns, "noun")?;
                let vblock = tape.slice_cols(logits, 0, k);
                let nblock = tape.slice_cols(logits, k, k + self.cfg.num_nouns);
                let lv = tape.cross_entropy(vblock, &verbs);
                let ln = tape.cross_entropy(nblock, &nouns);
                Ok(tape.add(lv, ln))
            }
        }
    }

    /// Split one logit row into per-head score vectors. Single-task modes
    /// yield a prediction only when paired with their counterpart model,
    /// so they return `None` here.
    pub fn scores_from_logits(&self, row: &[f64]) -> Option<HeadScores> {
        match self.cfg.mode {
            HeadMode::Adg => Some(HeadScores::Action(row.to_vec())),
            HeadMode::Multi => {
                let k = self.cfg.num_verbs;
                Some(HeadScores::Factored {
                    verb: row[..k].to_vec(),
                    noun: row[k..].to_vec(),
                })
            }
            HeadMode::SingleVerb | HeadMode::SingleNoun => None,
        }
    }
}

impl<F: Scalar> Module<F> for ClassifierHead<F> {
    fn params(&self) -> Vec<&Param<F>> {
        [&self.verb_head, &self.noun_head, &self.action_head]
            .iter()
            .filter_map(|h| h.as_ref())
            .flat_map(|h| h.params())
            .collect()
    }
    fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        let mut v = Vec::new();
        for h in [
            self.verb_head.as_mut(),
            self.noun_head.as_mut(),
            self.action_head.as_mut(),
        ]
        .into_iter()
        .flatten()
        {
            v.extend(h.params_mut());
        }
        v
    }
}

/// Decode per-head scores into a prediction. In the unified-action case the
/// (verb, noun) pair comes from the dictionary; in the factored case the
/// action id is looked up and may be absent.
pub fn decode(scores: &HeadScores, dict: &ActionDictionary) -> Result<ActionPrediction> {
    match scores {
        HeadScores::Action(a) => {
            let action = argmax(a);
            let (verb, noun) = dict.action_to_pair(action)?;
            Ok(ActionPrediction {
                verb,
                noun,
                action: Some(action),
                scores: scores.clone(),
            })
        }
        HeadScores::Factored { verb, noun } => {
            let v = argmax(verb);
            let n = argmax(noun);
            Ok(ActionPrediction {
                verb: v,
                noun: n,
                action: dict.pair_to_action(v, n)?,
                scores: scores.clone(),
            })
        }
    }
}

/// Trainable parameter count for one model under the given head design.
pub fn param_count(cfg: &HeadConfig, encoder_params: usize) -> usize {
    let d = cfg.input_dim;
    let head = match cfg.mode {
        HeadMode::SingleVerb => d * cfg.num_verbs + cfg.num_verbs,
        HeadMode::SingleNoun => d * cfg.num_nouns + cfg.num_nouns,
        HeadMode::Multi => d * cfg.num_verbs + cfg.num_verbs + d * cfg.num_nouns + cfg.num_nouns,
        HeadMode::Adg => d * cfg.num_actions + cfg.num_actions,
    };
    encoder_params + head
}

/// Single-task learning trains two separate models (verb and noun); this is
/// their combined parameter count.
pub fn single_task_total(cfg: &HeadConfig, encoder_params: usize) -> usize {
    let verb = HeadConfig {
        mode: HeadMode::SingleVerb,
        ..*cfg
    };
    let noun = HeadConfig {
        mode: HeadMode::SingleNoun,
        ..*cfg
    };
    param_count(&verb, encoder_params) + param_count(&noun, encoder_params)
}
