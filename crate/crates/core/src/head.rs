//! Cosine-similarity logits against per-category text embeddings, the
//! temperature-scaled cross-entropy over all categories, and prediction.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::model::{names, Model};
use crate::tensor::{dot, l2_norm, Tensor};

/// Lower bound on the temperature; `log τ` is clamped to `ln(MIN_TAU)`.
pub const MIN_TAU: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TemperatureMode {
    Fixed,
    #[default]
    LearnableLog,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContrastiveConfig {
    pub temperature_mode: TemperatureMode,
    pub tau_init: f64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            temperature_mode: TemperatureMode::LearnableLog,
            tau_init: 0.07,
        }
    }
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::InvalidArgument(format!(
            "cosine of vectors with lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let na = l2_norm(a);
    if na == 0.0 {
        return Err(Error::ZeroNorm("a"));
    }
    let nb = l2_norm(b);
    if nb == 0.0 {
        return Err(Error::ZeroNorm("b"));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("temperature must be positive, got {tau}")))
    }
}

/// `sim(v, t_c) / τ` for every category `c`, in text-embedding order.
pub fn class_logits(v: &[f64], text_embs: &[Vec<f64>], tau: f64) -> Result<Vec<f64>> {
    check_tau(tau)?;
    text_embs
        .iter()
        .map(|t| cosine_similarity(v, t).map(|s| s / tau))
        .collect()
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(logits);
    logits.iter().map(|l| (l - lse).exp()).collect()
}

/// Mean over the batch of `-log softmax(logits)[label]`.
pub fn contrastive_ce_loss(
    video_embs: &[Vec<f64>],
    labels: &[usize],
    text_embs: &[Vec<f64>],
    tau: f64,
) -> Result<f64> {
    if video_embs.is_empty() || video_embs.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} embeddings for {} labels",
            video_embs.len(),
            labels.len()
        )));
    }
    let mut total = 0.0;
    for (i, (v, &label)) in video_embs.iter().zip(labels).enumerate() {
        if label >= text_embs.len() {
            return Err(Error::InvalidArgument(format!(
                "label {label} outside {} categories",
                text_embs.len()
            )));
        }
        let logits = class_logits(v, text_embs, tau)?;
        let l = log_sum_exp(&logits) - logits[label];
        if !l.is_finite() {
            return Err(Error::NonFiniteLoss { epoch: 0, batch: i });
        }
        total += l;
    }
    Ok(total / video_embs.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub index: usize,
    pub probabilities: Vec<f64>,
}

/// Arg-max over the logits, ties resolved toward the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

pub fn predict(v: &[f64], text_embs: &[Vec<f64>], tau: f64) -> Result<Prediction> {
    if text_embs.is_empty() {
        return Err(Error::InvalidArgument("no category embeddings".into()));
    }
    let logits = class_logits(v, text_embs, tau)?;
    Ok(Prediction {
        index: argmax(&logits),
        probabilities: softmax(&logits),
    })
}

/// Differentiable batch loss on `graph`: stacks and normalises the clip and
/// category embeddings, scales cosine similarities by `1/τ` and takes the
/// mean cross-entropy. In learnable mode the gradient reaches `log τ`.
pub fn loss_node(
    g: &mut Graph,
    videos: &[NodeId],
    texts: &[NodeId],
    labels: &[usize],
    model: &Model,
    mode: TemperatureMode,
) -> Result<NodeId> {
    if videos.is_empty() || videos.len() != labels.len() {
        return Err(Error::InvalidArgument("one label per clip required".into()));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= texts.len()) {
        return Err(Error::InvalidArgument(format!(
            "label {l} outside {} categories",
            texts.len()
        )));
    }
    let v = g.concat_rows(videos);
    let v = g.normalize_rows(v).ok_or(Error::ZeroNorm("video embedding"))?;
    let t = g.concat_rows(texts);
    let t = g.normalize_rows(t).ok_or(Error::ZeroNorm("text embedding"))?;
    let sims = g.matmul_t(v, t);
    let log_tau = model.params.get(names::LOG_TAU);
    let logits = match mode {
        TemperatureMode::LearnableLog => {
            let lt = g.param(names::LOG_TAU, log_tau);
            let neg = g.scale(lt, -1.0);
            let inv_tau = g.exp(neg);
            g.mul_scalar(sims, inv_tau)
        }
        TemperatureMode::Fixed => g.scale(sims, (-log_tau.as_scalar()).exp()),
    };
    Ok(g.cross_entropy(logits, labels))
}

/// Stacks equal-length vectors into a matrix.
pub fn stack(rows: &[Vec<f64>]) -> Tensor {
    let cols = rows.first().map_or(0, Vec::len);
    Tensor::from_vec(rows.len(), cols, rows.concat())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_examples() {
        let v = [0.3, -1.2, 2.0];
        assert!((cosine_similarity(&v, &v).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let v2: Vec<f64> = v.iter().map(|x| 2.0 * x).collect();
        assert!((cosine_similarity(&v2, &v).unwrap() - 1.0).abs() < 1e-15);
        assert!(matches!(
            cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]),
            Err(Error::ZeroNorm("a"))
        ));
        assert!(matches!(
            cosine_similarity(&[1.0, 0.0], &[0.0, 0.0]),
            Err(Error::ZeroNorm("b"))
        ));
    }

    #[test]
    fn logits_scale_with_temperature() {
        let v = vec![1.0, 0.0];
        let texts = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0]];
        assert_eq!(class_logits(&v, &texts, 1.0).unwrap(), vec![1.0, 0.0, -1.0]);
        assert_eq!(class_logits(&v, &texts, 0.5).unwrap(), vec![2.0, 0.0, -2.0]);
        assert!(class_logits(&v, &texts, 0.0).is_err());
    }

    #[test]
    fn closed_form_losses() {
        let videos = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let texts = videos.clone();
        let l1 = contrastive_ce_loss(&videos, &[0, 1], &texts, 1.0).unwrap();
        assert!((l1 - (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-12);
        assert!((l1 - 0.313262).abs() < 1e-6);
        let l2 = contrastive_ce_loss(&videos, &[0, 1], &texts, 0.5).unwrap();
        assert!((l2 - 0.126928).abs() < 1e-6);

        let same = vec![vec![0.2, 0.7, -0.1]; 6];
        let v = vec![vec![5.0, -3.0, 1.0], vec![0.1, 0.1, 0.9]];
        let l = contrastive_ce_loss(&v, &[2, 5], &same, 0.07).unwrap();
        assert!((l - 6f64.ln()).abs() < 1e-12);
        assert!((l - 1.791759).abs() < 1e-6);
    }

    #[test]
    fn loss_vanishes_with_large_margin() {
        let texts = vec![vec![1.0, 0.0], vec![-1.0, 0.0]];
        // Similarity gap of 2 at τ = 0.04 gives a logit margin of 50.
        let l = contrastive_ce_loss(&[vec![1.0, 0.0]], &[0], &texts, 0.04).unwrap();
        assert!((0.0..1e-9).contains(&l));
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[3.0, 1.0, 0.0, 0.0, 0.0, 0.0]), 0);
        assert_eq!(argmax(&[0.0, 1.0, 4.0, 2.0, 4.0, 0.0]), 2);
    }

    #[test]
    fn prediction_probabilities_normalised() {
        let texts = vec![vec![1.0, 0.2], vec![0.1, 1.0], vec![-0.5, 0.5]];
        let p = predict(&[0.7, 0.3], &texts, 0.07).unwrap();
        assert!((p.probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert_eq!(p.index, 0);
    }
}
