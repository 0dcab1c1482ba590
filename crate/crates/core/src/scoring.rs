//! Divergence-based candidate scores, prediction and the per-instance loss.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Real, Var};

/// Floor applied to probabilities inside every logarithm.
pub const PROBABILITY_FLOOR: f64 = 1e-12;

/// Sign given to `KL(p_j || p_v)` before the softmax over candidates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignConvention {
    /// `softmax(-KL)`: the candidate closest to the label distribution wins.
    #[default]
    Negated,
    /// `softmax(+KL)`.
    Literal,
}

impl SignConvention {
    pub fn factor(self) -> f64 {
        match self {
            Self::Negated => -1.0,
            Self::Literal => 1.0,
        }
    }
}

/// Softmax of the `[MASK]` logits for one candidate.
#[derive(Clone, Debug, PartialEq)]
pub struct CandidateDistribution {
    pub probabilities: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreVector {
    pub scores: Vec<f64>,
}

impl ScoreVector {
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

fn ln_floor(x: f64) -> f64 {
    x.max(PROBABILITY_FLOOR).ln()
}

/// `sum_i p_i (ln p_i - ln q_i)` with both logarithms floored.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    assert_eq!(p.len(), q.len(), "distributions over different supports");
    p.iter().zip(q).map(|(&a, &b)| a * (ln_floor(a) - ln_floor(b))).sum()
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

pub fn score_candidates(distributions: &[CandidateDistribution], label: &[f64], sign: SignConvention) -> ScoreVector {
    let s = sign.factor();
    let d: Vec<f64> = distributions.iter().map(|c| s * kl_divergence(&c.probabilities, label)).collect();
    ScoreVector { scores: softmax(&d) }
}

/// Index of the highest score, lowest index on ties.
pub fn predict(scores: &ScoreVector) -> usize {
    let mut best = 0;
    for (i, &s) in scores.scores.iter().enumerate() {
        if s > scores.scores[best] {
            best = i;
        }
    }
    best
}

pub fn instance_loss(scores: &ScoreVector, gold: usize) -> Result<f64> {
    let s = scores.scores.get(gold).ok_or(Error::GoldOutOfRange { gold, count: scores.len() })?;
    Ok(-ln_floor(*s))
}

/// Scores (`1 x m`) from candidate `[MASK]` distributions (`m x |V|`) and
/// the label distribution (`1 x |V|`).
pub fn score_graph<F: Real>(g: &mut Graph<'_, F>, candidates: Var, label: Var, sign: SignConvention) -> Var {
    let log_p = g.log_floor(candidates, PROBABILITY_FLOOR);
    let log_q = g.log_floor(label, PROBABILITY_FLOOR);
    let neg_q = g.scale(log_q, -1.0);
    let ratio = g.add_row(log_p, neg_q);
    let terms = g.mul(candidates, ratio);
    let kl = g.sum_cols(terms);
    let signed = g.scale(kl, sign.factor());
    let row = g.transpose(signed);
    g.softmax_rows(row)
}

/// `-ln(max(scores[gold], floor))` as a `1 x 1` node.
pub fn loss_graph<F: Real>(g: &mut Graph<'_, F>, scores: Var, gold: usize) -> Var {
    let s = g.slice_cols(scores, gold, 1);
    let l = g.log_floor(s, PROBABILITY_FLOOR);
    g.scale(l, -1.0)
}
