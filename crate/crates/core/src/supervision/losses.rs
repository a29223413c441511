//! Training targets and losses for the bridging network.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::sigmoid;

/// Non-intrusive quality scores on the 1–5 MOS scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MosScore {
    /// Speech quality.
    pub sig: f64,
    /// Background quality.
    pub bak: f64,
}

impl MosScore {
    pub fn new(sig: f64, bak: f64) -> Result<Self> {
        for (name, v) in [("sig", sig), ("bak", bak)] {
            if !(1.0..=5.0).contains(&v) {
                return Err(Error::invalid(format!("{name} = {v} outside [1, 5]")));
            }
        }
        Ok(Self { sig, bak })
    }
}

/// Maps a 1–5 score linearly onto [0, 1].
pub fn norm_mos(alpha: f64) -> Result<f64> {
    if !(1.0..=5.0).contains(&alpha) {
        return Err(Error::invalid(format!("MOS value {alpha} outside [1, 5]")));
    }
    Ok((alpha - 1.0) / 4.0)
}

/// Quality target: mean of the normalized speech and background scores.
pub fn pq_target(m: MosScore) -> f64 {
    ((m.sig - 1.0) / 4.0 + (m.bak - 1.0) / 4.0) / 2.0
}

pub fn loss_pq(omega_hat: f64, target: f64) -> f64 {
    (omega_hat - target).powi(2)
}

/// Returns the loss and its derivative with respect to `omega_hat`.
pub fn loss_pq_grad(omega_hat: f64, target: f64) -> (f64, f64) {
    let diff = omega_hat - target;
    (diff * diff, 2.0 * diff)
}

/// Mean of per-utterance quality losses.
pub fn loss_pq_batch(pairs: &[(f64, f64)]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    pairs.iter().map(|&(o, t)| loss_pq(o, t)).sum::<f64>() / pairs.len() as f64
}

/// Recognition-information loss `-ln σ(cos(σ(logits), σ(wers)))`.
pub fn loss_ri(logits: &[f64], wers: &[f64]) -> Result<f64> {
    Ok(loss_ri_grad(logits, wers)?.0)
}

/// Returns the recognition loss and its gradient with respect to `logits`.
pub fn loss_ri_grad(logits: &[f64], wers: &[f64]) -> Result<(f64, Vec<f64>)> {
    if logits.len() != wers.len() {
        return Err(Error::Shape(format!(
            "logits length {} vs WER vector length {}",
            logits.len(),
            wers.len()
        )));
    }
    if logits.len() < 2 {
        return Err(Error::invalid("recognition vectors need at least two entries"));
    }
    let a: Vec<f64> = logits.iter().map(|&v| sigmoid(v)).collect();
    let b: Vec<f64> = wers.iter().map(|&v| sigmoid(v)).collect();
    let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    let cos = dot / (na * nb);

    // -ln σ(c) = ln(1 + e^{-c}); c lies in (0, 1] so this is well conditioned.
    let loss = (-cos).exp().ln_1p();
    let d_cos = -(1.0 - sigmoid(cos));
    let grad = a
        .iter()
        .zip(&b)
        .map(|(&ai, &bi)| {
            let d_a = bi / (na * nb) - cos * ai / (na * na);
            d_cos * d_a * ai * (1.0 - ai)
        })
        .collect();
    Ok((loss, grad))
}

/// Objective used when both supervisions are active.
pub fn loss_combined(lpq: f64, lri: f64) -> f64 {
    (lpq + lri) / 2.0
}
