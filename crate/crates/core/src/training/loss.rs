use std::fmt::Display;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::Element;

use super::mining::Triplet;

/// Added under the square root so distances stay differentiable at zero.
pub const DISTANCE_EPS: f64 = 1e-12;

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// `max(0, d(a, p) - d(a, n) + margin)` with Euclidean `d`.
pub fn triplet_loss(a: &[f64], p: &[f64], n: &[f64], margin: f64) -> Result<f64> {
    if a.len() != p.len() || a.len() != n.len() {
        return Err(Error::Input(format!(
            "triplet embeddings differ in width: {}, {}, {}",
            a.len(),
            p.len(),
            n.len()
        )));
    }
    Ok((euclidean(a, p) - euclidean(a, n) + margin).max(0.0))
}

/// Per-batch summary of a triplet loss evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TripletStats {
    pub mean_loss: f64,
    /// Fraction of triplets with a positive loss.
    pub active_fraction: f64,
    /// Fraction of anchors whose positive is strictly closer than the negative.
    pub accuracy: f64,
}

/// Mean triplet loss over `triplets` drawn from the rows of `embeddings: [B, D]`.
///
/// With `hinge = false` the raw `d(a, p) - d(a, n) + m` is averaged.
pub fn triplet_loss_batch<T: Element>(
    embeddings: &Var<T>,
    triplets: &[Triplet],
    margin: f64,
    hinge: bool,
) -> Result<(Var<T>, TripletStats)> {
    if triplets.is_empty() {
        return Err(Error::Sampling("no triplets to score".into()));
    }
    let pick = |f: fn(&Triplet) -> usize| -> Vec<usize> { triplets.iter().map(f).collect() };
    let anchors = embeddings.gather(0, &pick(|t| t.anchor))?;
    let positives = embeddings.gather(0, &pick(|t| t.positive))?;
    let negatives = embeddings.gather(0, &pick(|t| t.negative))?;
    let dist = |other: &Var<T>| -> Result<Var<T>> {
        let diff = anchors.sub(other)?;
        Ok(diff
            .mul(&diff)?
            .sum_axis(1)?
            .add_scalar(DISTANCE_EPS)
            .sqrt())
    };
    let d_ap = dist(&positives)?;
    let d_an = dist(&negatives)?;
    let raw = d_ap.sub(&d_an)?.add_scalar(margin);
    let per = if hinge { raw.relu() } else { raw.clone() };
    let loss = per.mean();

    let stats = {
        let r = raw.value();
        let (ap, an) = (d_ap.value(), d_an.value());
        let k = triplets.len() as f64;
        TripletStats {
            mean_loss: loss.value().item()?.as_f64(),
            active_fraction: r.data().iter().filter(|v| v.as_f64() > 0.0).count() as f64 / k,
            accuracy: ap
                .data()
                .iter()
                .zip(an.data())
                .filter(|(p, n)| p < n)
                .count() as f64
                / k,
        }
    };
    Ok((loss, stats))
}

pub(crate) fn label_error(label: impl Display, what: &str) -> Error {
    Error::Sampling(format!("label {label}: {what}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stated_values() {
        let a = [0.0, 0.0];
        // d(a, p) = 0.5, d(a, n) = 0.1
        let l = triplet_loss(&a, &[0.5, 0.0], &[0.0, 0.1], 0.02).unwrap();
        assert!((l - 0.42).abs() < 1e-12);
        let l = triplet_loss(&a, &[0.1, 0.0], &[0.0, 0.5], 0.02).unwrap();
        assert_eq!(l, 0.0);
        let l = triplet_loss(&a, &a, &a, 0.02).unwrap();
        assert_eq!(l, 0.02);
        assert!(triplet_loss(&a, &[0.0], &a, 0.02).is_err());
    }
}
