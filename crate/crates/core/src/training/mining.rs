use std::fmt::Display;

use crate::error::{Error, Result};

use super::loss::label_error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

/// Batch-hard mining: for every anchor, the farthest same-label sample and
/// the nearest different-label sample under Euclidean distance. Ties go to
/// the lowest index.
pub fn batch_hard_mine<L: PartialEq + Display>(
    embeddings: &[Vec<f64>],
    labels: &[L],
) -> Result<Vec<Triplet>> {
    let b = embeddings.len();
    if labels.len() != b {
        return Err(Error::Sampling(format!(
            "{b} embeddings but {} labels",
            labels.len()
        )));
    }
    let mut distinct = 0;
    for (i, l) in labels.iter().enumerate() {
        if labels[..i].contains(l) {
            continue;
        }
        distinct += 1;
        if labels.iter().filter(|m| *m == l).count() < 2 {
            return Err(label_error(l, "needs at least 2 samples in the batch"));
        }
    }
    if distinct < 2 {
        return Err(Error::Sampling(
            "batch needs at least 2 distinct labels".into(),
        ));
    }
    if let Some(w) = embeddings.first().map(Vec::len) {
        if embeddings.iter().any(|e| e.len() != w) {
            return Err(Error::Sampling("embeddings differ in width".into()));
        }
    }

    // Squared distances order identically to distances.
    let sq = |i: usize, j: usize| -> f64 {
        embeddings[i]
            .iter()
            .zip(&embeddings[j])
            .map(|(x, y)| (x - y) * (x - y))
            .sum()
    };
    let mut out = Vec::with_capacity(b);
    for a in 0..b {
        let mut pos: Option<(usize, f64)> = None;
        let mut neg: Option<(usize, f64)> = None;
        for j in 0..b {
            if j == a {
                continue;
            }
            let d = sq(a, j);
            if labels[j] == labels[a] {
                if pos.is_none_or(|(_, best)| d > best) {
                    pos = Some((j, d));
                }
            } else if neg.is_none_or(|(_, best)| d < best) {
                neg = Some((j, d));
            }
        }
        out.push(Triplet {
            anchor: a,
            positive: pos.expect("label has a second sample").0,
            negative: neg.expect("batch has a second label").0,
        });
    }
    Ok(out)
}
