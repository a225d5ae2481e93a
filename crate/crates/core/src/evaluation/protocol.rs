use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::skeleton::Condition;

use super::retrieval::{rank_k_accuracy, EmbeddingRow, EmbeddingSet};

/// Sequences of one condition restricted to a set of sessions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionGroup {
    pub name: String,
    pub condition: Condition,
    /// Empty means every session.
    pub sessions: Vec<u32>,
}

impl SessionGroup {
    pub fn new(name: &str, condition: Condition, sessions: &[u32]) -> Self {
        Self {
            name: name.into(),
            condition,
            sessions: sessions.to_vec(),
        }
    }

    pub fn contains(&self, row: &EmbeddingRow) -> bool {
        row.condition == self.condition
            && (self.sessions.is_empty() || self.sessions.contains(&row.session))
    }
}

/// Cross-view gallery/probe protocol: every (gallery view, probe view)
/// pair is scored separately with rank-1 accuracy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossViewProtocol {
    pub views: Vec<i32>,
    pub gallery: SessionGroup,
    pub probes: Vec<SessionGroup>,
}

pub const CASIA_VIEWS: [i32; 11] = [0, 18, 36, 54, 72, 90, 108, 126, 144, 162, 180];

impl CrossViewProtocol {
    /// NM sessions 1-4 as gallery; NM 5-6, BG 1-2 and CL 1-2 as probes,
    /// over the eleven views 0..=180 in steps of 18.
    pub fn casia_b() -> Self {
        Self {
            views: CASIA_VIEWS.to_vec(),
            gallery: SessionGroup::new("NM#1-4", Condition::NM, &[1, 2, 3, 4]),
            probes: vec![
                SessionGroup::new("NM", Condition::NM, &[5, 6]),
                SessionGroup::new("BG", Condition::BG, &[1, 2]),
                SessionGroup::new("CL", Condition::CL, &[1, 2]),
            ],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub gallery_view: i32,
    pub probe_view: i32,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub name: String,
    /// Every (gallery view, probe view) pair, identical views included.
    pub cells: Vec<Cell>,
    /// Per probe view, the mean over the other gallery views.
    pub per_probe_view: Vec<(i32, f64)>,
    /// Mean of the per-probe-view values.
    pub mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub views: Vec<i32>,
    pub probes: Vec<ProbeReport>,
}

impl ProbeReport {
    pub fn cell(&self, gallery_view: i32, probe_view: i32) -> Option<f64> {
        self.cells
            .iter()
            .find(|c| c.gallery_view == gallery_view && c.probe_view == probe_view)
            .map(|c| c.accuracy)
    }
}

/// Scores an embedding set under a cross-view protocol. Identical-view
/// pairs are kept in the matrix but left out of every mean.
pub fn cross_view_eval(set: &EmbeddingSet, protocol: &CrossViewProtocol) -> Result<EvalReport> {
    if protocol.views.len() < 2 {
        return Err(Error::Protocol(
            "cross-view evaluation needs at least two views".into(),
        ));
    }
    let mut gaps = Vec::new();
    for &v in &protocol.views {
        if !set
            .rows()
            .iter()
            .any(|r| r.view == v && protocol.gallery.contains(r))
        {
            gaps.push(format!("gallery {} at {v}°", protocol.gallery.name));
        }
        for p in &protocol.probes {
            if !set.rows().iter().any(|r| r.view == v && p.contains(r)) {
                gaps.push(format!("probe {} at {v}°", p.name));
            }
        }
    }
    if !gaps.is_empty() {
        return Err(Error::Protocol(format!("missing {}", gaps.join(", "))));
    }

    let mut probes = Vec::with_capacity(protocol.probes.len());
    for group in &protocol.probes {
        let mut cells = Vec::new();
        let mut per_probe_view = Vec::new();
        for &pv in &protocol.views {
            let probe = set.filter(|r| r.view == pv && group.contains(r));
            let mut off_view = Vec::new();
            for &gv in &protocol.views {
                let gallery = set.filter(|r| r.view == gv && protocol.gallery.contains(r));
                let accuracy = rank_k_accuracy(&gallery, &probe, &[1])?[&1];
                cells.push(Cell {
                    gallery_view: gv,
                    probe_view: pv,
                    accuracy,
                });
                if gv != pv {
                    off_view.push(accuracy);
                }
            }
            per_probe_view.push((pv, off_view.iter().sum::<f64>() / off_view.len() as f64));
        }
        let mean = per_probe_view.iter().map(|(_, m)| m).sum::<f64>() / per_probe_view.len() as f64;
        probes.push(ProbeReport {
            name: group.name.clone(),
            cells,
            per_probe_view,
            mean,
        });
    }
    Ok(EvalReport {
        views: protocol.views.clone(),
        probes,
    })
}

pub fn casia_eval(set: &EmbeddingSet) -> Result<EvalReport> {
    cross_view_eval(set, &CrossViewProtocol::casia_b())
}

impl EvalReport {
    /// One row per probe group, one column per probe view, then the mean.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        let _ = write!(out, "{:<8}", "probe");
        for v in &self.views {
            let _ = write!(out, "{:>7}", format!("{v}°"));
        }
        let _ = writeln!(out, "{:>8}", "mean");
        for p in &self.probes {
            let _ = write!(out, "{:<8}", p.name);
            for (_, m) in &p.per_probe_view {
                let _ = write!(out, "{:>7.1}", m * 100.0);
            }
            let _ = writeln!(out, "{:>8.1}", p.mean * 100.0);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(subject: usize, cond: Condition, session: u32, view: i32, e: Vec<f64>) -> EmbeddingRow {
        EmbeddingRow {
            key: format!("{subject}-{cond}-{session}-{view}"),
            subject_id: format!("s{subject}"),
            condition: cond,
            view,
            session,
            embedding: e,
        }
    }

    #[test]
    fn perfect_separation_scores_one_everywhere() {
        let mut rows = Vec::new();
        for s in 0..3 {
            let e = vec![s as f64, 0.0];
            for &v in &CASIA_VIEWS {
                for sess in 1..=6 {
                    rows.push(row(s, Condition::NM, sess, v, e.clone()));
                }
                for sess in 1..=2 {
                    rows.push(row(s, Condition::BG, sess, v, e.clone()));
                    rows.push(row(s, Condition::CL, sess, v, e.clone()));
                }
            }
        }
        let report = casia_eval(&EmbeddingSet::new(rows).unwrap()).unwrap();
        assert_eq!(report.probes.len(), 3);
        for p in &report.probes {
            assert_eq!(p.cells.len(), 121);
            assert!(p.cells.iter().all(|c| c.accuracy == 1.0));
            assert_eq!(p.mean, 1.0);
        }
        assert!(report.render_table().contains("100.0"));
    }

    #[test]
    fn gaps_are_listed() {
        let rows = vec![row(0, Condition::NM, 1, 0, vec![0.0])];
        let err = casia_eval(&EmbeddingSet::new(rows).unwrap())
            .unwrap_err()
            .to_string();
        assert!(err.contains("gallery NM#1-4 at 18°"), "{err}");
        assert!(err.contains("probe CL at 0°"), "{err}");
    }
}
