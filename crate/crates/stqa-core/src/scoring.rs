//! Candidate scoring heads, the LSEP ranking loss, and the inference-time
//! softmax-sum ensemble.

use serde::{Deserialize, Serialize};

use crate::error::{EngineError, Result};
use crate::params::BoundParams;
use crate::tape::{Tape, Var};
use crate::text::{bilstm, BiLstmVars};

/// Modality pipeline a score came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    /// RGB appearance stream.
    Spt,
    /// Optical-flow stream.
    Tpr,
    /// Subtitle text stream.
    Text,
}

impl Channel {
    pub const ALL: [Channel; 3] = [Channel::Spt, Channel::Tpr, Channel::Text];

    pub fn as_str(self) -> &'static str {
        match self {
            Channel::Spt => "spt",
            Channel::Tpr => "tpr",
            Channel::Text => "text",
        }
    }

    pub fn parse(s: &str) -> Result<Channel> {
        match s {
            "spt" => Ok(Channel::Spt),
            "tpr" => Ok(Channel::Tpr),
            "text" => Ok(Channel::Text),
            other => Err(EngineError::Config(format!("unknown channel {other:?}"))),
        }
    }
}

/// Fused feature to scalar: per-timestep linear map, then max over time.
/// The max picks the single most informative timestep, so gradient flows
/// only through it.
pub fn score_visual(tape: &mut Tape, m: Var, w: Var, b: Var) -> Result<Var> {
    let ms = tape.shape(m);
    let ws = tape.shape(w);
    if ms.len() != 2 || ws.len() != 2 || ms[1] != ws[0] || ws[1] != 1 {
        return Err(EngineError::Dimension {
            op: "score_visual",
            msg: format!("fused {ms:?} does not match scoring weight {ws:?}"),
        });
    }
    let per_step = tape.matmul(m, w)?;
    let per_step = tape.add(per_step, b)?;
    let flat = tape.reshape(per_step, vec![tape.shape(per_step)[0]])?;
    tape.reduce_max(flat, 0)
}

/// Fused text feature to scalar: a second bidirectional LSTM re-encodes
/// the fused sequence, then the same linear-map-and-temporal-max head.
pub fn score_textual(
    tape: &mut Tape,
    bound: &BoundParams,
    lstm_prefix: &str,
    hidden: usize,
    m_text: Var,
    w: Var,
    b: Var,
) -> Result<Var> {
    let encoded = bilstm(tape, bound, lstm_prefix, hidden, m_text)?;
    score_visual(tape, encoded, w, b)
}

/// Same as [`score_textual`] but with pre-bound LSTM variables.
pub fn score_textual_vars(
    tape: &mut Tape,
    lstm: &BiLstmVars,
    hidden: usize,
    m_text: Var,
    w: Var,
    b: Var,
) -> Result<Var> {
    let encoded = crate::text::bilstm_vars(tape, m_text, lstm, hidden)?;
    score_visual(tape, encoded, w, b)
}

/// Validate an LSEP label set against `k` candidates: non-empty, strictly
/// inside the candidate set, all indices valid and distinct.
fn check_label_set(k: usize, y: &[usize]) -> Result<Vec<usize>> {
    let mut y = y.to_vec();
    y.sort_unstable();
    y.dedup();
    if y.is_empty() || y.len() >= k {
        return Err(EngineError::Contract(format!(
            "label set must be a non-empty proper subset of {k} candidates"
        )));
    }
    if let Some(&bad) = y.iter().find(|&&i| i >= k) {
        return Err(EngineError::Validation(format!(
            "label index {bad} out of {k} candidates"
        )));
    }
    Ok(y)
}

/// Log-sum-exp pairwise ranking loss over raw scores `p` of `k`
/// candidates:
///
/// `log(1 + sum_{v not in Y} sum_{u in Y} exp(p_v - p_u))`
///
/// Built as a constant pair-difference matrix, a shifted log-sum-exp and
/// a softplus, so the tape gradient is exact.
pub fn lsep_loss(tape: &mut Tape, p: Var, y: &[usize]) -> Result<Var> {
    let shape = tape.shape(p).to_vec();
    if shape.len() != 1 {
        return Err(EngineError::Dimension {
            op: "lsep_loss",
            msg: format!("scores must be rank 1, got {shape:?}"),
        });
    }
    let k = shape[0];
    let y = check_label_set(k, y)?;
    let in_y = |i: usize| y.binary_search(&i).is_ok();
    let pairs: Vec<(usize, usize)> = (0..k)
        .filter(|&v| !in_y(v))
        .flat_map(|v| y.iter().map(move |&u| (v, u)))
        .collect();
    let mut sel = vec![0.0; pairs.len() * k];
    for (row, &(v, u)) in pairs.iter().enumerate() {
        sel[row * k + v] += 1.0;
        sel[row * k + u] -= 1.0;
    }
    let a = tape.constant(vec![pairs.len(), k], sel)?;
    let p_col = tape.reshape(p, vec![k, 1])?;
    let diffs = tape.matmul(a, p_col)?;
    let diffs = tape.reshape(diffs, vec![pairs.len()])?;
    let m = tape.reduce_max(diffs, 0)?;
    let shifted = tape.sub(diffs, m)?;
    let e = tape.exp(shifted)?;
    let s = tape.sum_all(e);
    let ln_s = tape.ln(s)?;
    let z = tape.add(ln_s, m)?;
    Ok(tape.softplus(z))
}

/// Numerically plain reference of Eq-style LSEP used by tests and by
/// evaluation reporting; no tape involved.
pub fn lsep_loss_scalar(p: &[f64], y: &[usize]) -> Result<f64> {
    let y = check_label_set(p.len(), y)?;
    let in_y = |i: usize| y.binary_search(&i).is_ok();
    let mut sum = 0.0;
    for v in 0..p.len() {
        if in_y(v) {
            continue;
        }
        for &u in &y {
            sum += (p[v] - p[u]).exp();
        }
    }
    Ok(sum.ln_1p())
}

/// Max-shifted softmax of a plain score slice.
pub fn softmax_slice(p: &[f64]) -> Vec<f64> {
    let m = p.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = p.iter().map(|&v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Raw scores of one channel for one question.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelScores {
    pub channel: Channel,
    pub p: Vec<f64>,
}

/// Softmax-normalized per-channel scores and their sum.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleScores {
    pub final_scores: Vec<f64>,
    pub per_channel: Vec<(Channel, Vec<f64>)>,
}

/// Normalize each enabled channel's scores with a softmax over the
/// candidates, then sum across channels.
pub fn ensemble(channels: &[ChannelScores]) -> Result<EnsembleScores> {
    if channels.is_empty() {
        return Err(EngineError::Contract("ensemble of zero channels".into()));
    }
    let k = channels[0].p.len();
    if k == 0 {
        return Err(EngineError::Contract(
            "ensemble needs at least one candidate".into(),
        ));
    }
    let mut final_scores = vec![0.0; k];
    let mut per_channel = Vec::with_capacity(channels.len());
    for ch in channels {
        if ch.p.len() != k {
            return Err(EngineError::Dimension {
                op: "ensemble",
                msg: format!(
                    "channel {} has {} scores, expected {k}",
                    ch.channel.as_str(),
                    ch.p.len()
                ),
            });
        }
        let norm = softmax_slice(&ch.p);
        for (f, n) in final_scores.iter_mut().zip(&norm) {
            *f += n;
        }
        per_channel.push((ch.channel, norm));
    }
    Ok(EnsembleScores {
        final_scores,
        per_channel,
    })
}

/// Index of the highest final score; exact ties resolve to the lowest
/// index.
pub fn predict(scores: &EnsembleScores) -> usize {
    let mut best = 0;
    for (i, &v) in scores.final_scores.iter().enumerate() {
        if v > scores.final_scores[best] {
            best = i;
        }
    }
    best
}
