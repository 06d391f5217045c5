//! Evaluation metrics: hierarchical verb/noun/action accuracy, corpus
//! BLEU for answer strings, and probability aggregation across test
//! replicas and checkpoints.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::ActionPrediction;

pub const BLEU_EPSILON: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecognitionScore {
    pub acc_action: f64,
    pub acc_verb: f64,
    pub acc_noun: f64,
}

/// Fraction of predictions with the verb right, the noun right, and both
/// right at once. An action counts only when verb and noun both match.
pub fn recognition_accuracy(
    preds: &[ActionPrediction],
    targets: &[(usize, usize)],
) -> Result<RecognitionScore> {
    if preds.len() != targets.len() {
        return Err(Error::Shape(format!(
            "{} predictions vs {} targets",
            preds.len(),
            targets.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::Data("empty evaluation set".into()));
    }
    let mut verb = 0usize;
    let mut noun = 0usize;
    let mut action = 0usize;
    for (p, &(v, n)) in preds.iter().zip(targets) {
        let v_ok = p.verb == v;
        let n_ok = p.noun == n;
        verb += usize::from(v_ok);
        noun += usize::from(n_ok);
        action += usize::from(v_ok && n_ok);
    }
    let total = preds.len() as f64;
    Ok(RecognitionScore {
        acc_action: action as f64 / total,
        acc_verb: verb as f64 / total,
        acc_noun: noun as f64 / total,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BleuScore {
    pub b1: f64,
    pub b4: f64,
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts: HashMap<&[String], usize> = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_default() += 1;
        }
    }
    counts
}

/// Corpus BLEU with uniform weights over 1..=n-grams, clipped counts, and
/// a brevity penalty. Zero match counts are smoothed by adding a small
/// epsilon inside the log, so one- and two-token answers still score under
/// the 4-gram variant. An order where the corpus has no n-grams at all is
/// vacuously precise, which keeps BLEU(x, x) = 1 on short-answer corpora.
pub fn bleu(candidates: &[Vec<String>], references: &[Vec<String>], n: usize) -> Result<f64> {
    if candidates.len() != references.len() {
        return Err(Error::Shape(format!(
            "{} candidates vs {} references",
            candidates.len(),
            references.len()
        )));
    }
    if candidates.is_empty() {
        return Err(Error::Data("empty corpus".into()));
    }
    if n == 0 {
        return Err(Error::Config("n must be at least 1".into()));
    }
    let mut clipped = vec![0usize; n];
    let mut total = vec![0usize; n];
    let mut cand_len = 0usize;
    let mut ref_len = 0usize;
    for (cand, reference) in candidates.iter().zip(references) {
        cand_len += cand.len();
        ref_len += reference.len();
        for k in 1..=n {
            let ref_counts = ngram_counts(reference, k);
            for (gram, count) in ngram_counts(cand, k) {
                clipped[k - 1] += count.min(ref_counts.get(gram).copied().unwrap_or(0));
            }
            total[k - 1] += cand.len().saturating_sub(k - 1);
        }
    }
    let mut log_sum = 0.0;
    for k in 0..n {
        let p = if total[k] > 0 {
            clipped[k] as f64 / total[k] as f64
        } else {
            1.0
        };
        log_sum += (p + BLEU_EPSILON).ln() / n as f64;
    }
    let bp = if cand_len >= ref_len {
        1.0
    } else if cand_len == 0 {
        return Ok(0.0);
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    Ok((bp * log_sum.exp()).clamp(0.0, 1.0))
}

/// B@1 and B@4 for tokenized answer pairs.
pub fn bleu_scores(candidates: &[Vec<String>], references: &[Vec<String>]) -> Result<BleuScore> {
    Ok(BleuScore {
        b1: bleu(candidates, references, 1)?,
        b4: bleu(candidates, references, 4)?,
    })
}

/// Elementwise arithmetic mean of probability vectors; the argmax of the
/// result is taken downstream.
pub fn aggregate(prob_sets: &[Vec<f64>]) -> Result<Vec<f64>> {
    if prob_sets.is_empty() {
        return Err(Error::Data("nothing to aggregate".into()));
    }
    let width = prob_sets[0].len();
    let mut out = vec![0.0; width];
    for set in prob_sets {
        if set.len() != width {
            return Err(Error::Shape(format!(
                "probability width {} vs {width}",
                set.len()
            )));
        }
        for (o, &p) in out.iter_mut().zip(set) {
            if p < 0.0 {
                return Err(Error::Data(format!("negative probability {p}")));
            }
            *o += p;
        }
    }
    let inv = 1.0 / prob_sets.len() as f64;
    for o in &mut out {
        *o *= inv;
    }
    Ok(out)
}

pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let mx = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|x| (x - mx).exp()).collect();
    let denom: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / denom).collect()
}

/// The score report emitted by evaluation, as JSON and as a text table.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub acc_action: Option<f64>,
    pub acc_verb: Option<f64>,
    pub acc_noun: Option<f64>,
    pub b1: Option<f64>,
    pub b4: Option<f64>,
    pub answer_accuracy: Option<f64>,
}

impl ScoreReport {
    pub fn from_recognition(s: RecognitionScore) -> Self {
        ScoreReport {
            acc_action: Some(s.acc_action),
            acc_verb: Some(s.acc_verb),
            acc_noun: Some(s.acc_noun),
            ..ScoreReport::default()
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_table(&self) -> String {
        let row = |name: &str, v: Option<f64>| match v {
            Some(x) => format!("{name:<16} {x:>8.4}\n"),
            None => format!("{name:<16} {:>8}\n", "-"),
        };
        let mut out = String::from("metric              value\n");
        out.push_str(&row("acc_action", self.acc_action));
        out.push_str(&row("acc_verb", self.acc_verb));
        out.push_str(&row("acc_noun", self.acc_noun));
        out.push_str(&row("b1", self.b1));
        out.push_str(&row("b4", self.b4));
        out.push_str(&row("answer_accuracy", self.answer_accuracy));
        out
    }
}
