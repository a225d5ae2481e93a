use std::cmp::Ordering;
use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::GaitPT;
use crate::skeleton::{sample_window, Condition, GaitSequence, WindowMode};
use crate::tensor::Element;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRow {
    pub key: String,
    pub subject_id: String,
    pub condition: Condition,
    pub view: i32,
    pub session: u32,
    pub embedding: Vec<f64>,
}

/// Embeddings with unique keys and a common width.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingSet {
    rows: Vec<EmbeddingRow>,
}

impl EmbeddingSet {
    pub fn new(rows: Vec<EmbeddingRow>) -> Result<Self> {
        if let Some(first) = rows.first() {
            let d = first.embedding.len();
            if let Some(r) = rows.iter().find(|r| r.embedding.len() != d) {
                return Err(Error::Input(format!(
                    "embedding {} has width {}, expected {d}",
                    r.key,
                    r.embedding.len()
                )));
            }
        }
        let mut keys = HashSet::new();
        if let Some(r) = rows.iter().find(|r| !keys.insert(r.key.as_str())) {
            return Err(Error::Input(format!("duplicate embedding key {}", r.key)));
        }
        Ok(Self { rows })
    }

    pub fn rows(&self) -> &[EmbeddingRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.rows.first().map(|r| r.embedding.len())
    }

    /// Rows satisfying `keep`, as a new set.
    pub fn filter(&self, keep: impl Fn(&EmbeddingRow) -> bool) -> EmbeddingSet {
        EmbeddingSet {
            rows: self.rows.iter().filter(|r| keep(r)).cloned().collect(),
        }
    }

    /// Union of two sets; keys must stay unique.
    pub fn merged(&self, other: &EmbeddingSet) -> Result<EmbeddingSet> {
        EmbeddingSet::new(self.rows.iter().chain(&other.rows).cloned().collect())
    }
}

/// Embeds the first `sequence_length` frames of every sequence.
pub fn embed_sequences<T: Element>(
    model: &GaitPT<T>,
    seqs: &[GaitSequence],
    batch: usize,
) -> Result<EmbeddingSet> {
    let n = model.config().sequence_length;
    let mut rng = rand::rngs::mock::StepRng::new(0, 0);
    let windows = seqs
        .iter()
        .map(|s| sample_window(s, n, WindowMode::EvalHead, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let embeddings = model.embed_windows(&windows, batch)?;
    EmbeddingSet::new(
        seqs.iter()
            .zip(embeddings)
            .map(|(s, embedding)| EmbeddingRow {
                key: s.key.clone(),
                subject_id: s.subject_id.clone(),
                condition: s.condition,
                view: s.view,
                session: s.session,
                embedding,
            })
            .collect(),
    )
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn check_pair(gallery: &EmbeddingSet, probe: &EmbeddingSet) -> Result<()> {
    if gallery.is_empty() {
        return Err(Error::Protocol("gallery is empty".into()));
    }
    if probe.is_empty() {
        return Err(Error::Protocol("probe set is empty".into()));
    }
    if gallery.dim() != probe.dim() {
        return Err(Error::Protocol(format!(
            "gallery width {:?} differs from probe width {:?}",
            gallery.dim(),
            probe.dim()
        )));
    }
    Ok(())
}

/// Zero-based position of the first same-subject gallery entry when the
/// gallery is ordered by (distance, key). `None` if the subject is absent.
fn first_match_rank(gallery: &EmbeddingSet, probe: &EmbeddingRow) -> Option<usize> {
    let dists: Vec<f64> = gallery
        .rows
        .iter()
        .map(|g| distance(&g.embedding, &probe.embedding))
        .collect();
    let order = |i: usize, j: usize| -> Ordering {
        dists[i]
            .total_cmp(&dists[j])
            .then_with(|| gallery.rows[i].key.cmp(&gallery.rows[j].key))
    };
    let best = (0..gallery.len())
        .filter(|&i| gallery.rows[i].subject_id == probe.subject_id)
        .min_by(|&i, &j| order(i, j))?;
    Some(
        (0..gallery.len())
            .filter(|&i| order(i, best) == Ordering::Less)
            .count(),
    )
}

/// Fraction of probes whose subject is among the `k` nearest gallery
/// entries, for each `k`. Probes whose subject is missing from the gallery
/// count as misses.
pub fn rank_k_accuracy(
    gallery: &EmbeddingSet,
    probe: &EmbeddingSet,
    ks: &[usize],
) -> Result<BTreeMap<usize, f64>> {
    check_pair(gallery, probe)?;
    if ks.contains(&0) {
        return Err(Error::Usage("rank levels start at 1".into()));
    }
    let ranks: Vec<Option<usize>> = probe
        .rows
        .iter()
        .map(|p| first_match_rank(gallery, p))
        .collect();
    Ok(ks
        .iter()
        .map(|&k| {
            let hits = ranks.iter().filter(|r| r.is_some_and(|r| r < k)).count();
            (k, hits as f64 / ranks.len() as f64)
        })
        .collect())
}

pub const GREW_RANKS: [usize; 4] = [1, 5, 10, 20];

/// Rank-1, 5, 10 and 20 accuracy of an open gallery/probe split.
pub fn grew_eval(gallery: &EmbeddingSet, probe: &EmbeddingSet) -> Result<BTreeMap<usize, f64>> {
    rank_k_accuracy(gallery, probe, &GREW_RANKS)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn row(key: &str, subject: &str, e: &[f64]) -> EmbeddingRow {
        EmbeddingRow {
            key: key.into(),
            subject_id: subject.into(),
            condition: Condition::NM,
            view: 90,
            session: 1,
            embedding: e.to_vec(),
        }
    }

    #[test]
    fn nearest_neighbour_and_ties() {
        let g = EmbeddingSet::new(vec![row("a", "A", &[0.0, 0.0]), row("b", "B", &[1.0, 0.0])])
            .unwrap();
        let p = EmbeddingSet::new(vec![row("p", "A", &[0.1, 0.0])]).unwrap();
        assert_eq!(rank_k_accuracy(&g, &p, &[1]).unwrap()[&1], 1.0);

        // Equidistant: key "a" sorts first.
        let p = EmbeddingSet::new(vec![row("p", "B", &[0.5, 0.0])]).unwrap();
        let r = rank_k_accuracy(&g, &p, &[1, 2]).unwrap();
        assert_eq!(r[&1], 0.0);
        assert_eq!(r[&2], 1.0);
    }

    #[test]
    fn absent_subject_is_a_miss_and_empty_gallery_errors() {
        let g = EmbeddingSet::new(vec![row("a", "A", &[0.0])]).unwrap();
        let p = EmbeddingSet::new(vec![row("p", "Z", &[0.0])]).unwrap();
        assert_eq!(rank_k_accuracy(&g, &p, &[1]).unwrap()[&1], 0.0);
        assert!(matches!(
            rank_k_accuracy(&EmbeddingSet::default(), &p, &[1]),
            Err(Error::Protocol(_))
        ));
    }

    #[test]
    fn duplicate_keys_rejected() {
        assert!(EmbeddingSet::new(vec![row("a", "A", &[0.0]), row("a", "B", &[1.0])]).is_err());
        assert!(
            EmbeddingSet::new(vec![row("a", "A", &[0.0]), row("b", "B", &[1.0, 2.0])]).is_err()
        );
    }
}
