//! Fixtures and brute-force oracles shared by several test targets.
#![allow(dead_code)]

use gaitpt::evaluation::{EmbeddingRow, EmbeddingSet, CASIA_VIEWS};
use gaitpt::training::Triplet;
use gaitpt::Condition;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn row(
    key: &str,
    subject: &str,
    condition: Condition,
    view: i32,
    session: u32,
    e: &[f64],
) -> EmbeddingRow {
    EmbeddingRow {
        key: key.into(),
        subject_id: subject.into(),
        condition,
        view,
        session,
        embedding: e.to_vec(),
    }
}

pub fn simple(key: &str, subject: &str, e: &[f64]) -> EmbeddingRow {
    row(key, subject, Condition::NM, 90, 1, e)
}

/// Top-k by a full sort over (distance, key).
pub fn rank_oracle(gallery: &[EmbeddingRow], probe: &[EmbeddingRow], k: usize) -> f64 {
    let hits = probe
        .iter()
        .filter(|p| {
            let mut order: Vec<(f64, &str, &str)> = gallery
                .iter()
                .map(|g| {
                    let d: f64 = g
                        .embedding
                        .iter()
                        .zip(&p.embedding)
                        .map(|(a, b)| (a - b).powi(2))
                        .sum();
                    (d.sqrt(), g.key.as_str(), g.subject_id.as_str())
                })
                .collect();
            order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(b.1)));
            order.iter().take(k).any(|(_, _, s)| *s == p.subject_id)
        })
        .count();
    hits as f64 / probe.len() as f64
}

pub fn random_rows(
    rng: &mut ChaCha8Rng,
    n: usize,
    subjects: usize,
    prefix: &str,
) -> Vec<EmbeddingRow> {
    (0..n)
        .map(|i| {
            let e: Vec<f64> = (0..3).map(|_| rng.gen_range(-2..=2) as f64 * 0.5).collect();
            simple(
                &format!("{prefix}{i:02}"),
                &format!("s{}", rng.gen_range(0..subjects)),
                &e,
            )
        })
        .collect()
}

/// Four subjects over the eleven views with one-hot embeddings.
///
/// Gallery (NM#1) of subject s at view index g sits on e_s, except that on
/// odd g subjects 0 and 1 trade places. Probes:
/// * NM#5 of s sits on e_s.
/// * BG#1 of s sits on e_s, except subject 3 which sits on e_2.
/// * CL#1 of s sits on e_s for view index < 5; from index 5 on, subjects
///   0 and 1 sit on the midpoint of e_0 and e_1, where the tie goes to the
///   gallery key of subject 0.
/// An NM#7 row duplicates each probe under a foreign subject; it belongs to
/// no group and must be ignored.
pub fn casia_fixture() -> EmbeddingSet {
    let one_hot = |i: usize| {
        let mut e = vec![0.0; 4];
        e[i] = 1.0;
        e
    };
    let mid = [0.5, 0.5, 0.0, 0.0];
    let mut rows = Vec::new();
    for (vi, &view) in CASIA_VIEWS.iter().enumerate() {
        for s in 0..4 {
            let subject = format!("sub{s}");
            let placed = if vi % 2 == 1 && s < 2 { 1 - s } else { s };
            rows.push(row(
                &format!("g-{s}-{view:03}"),
                &subject,
                Condition::NM,
                view,
                1,
                &one_hot(placed),
            ));
            rows.push(row(
                &format!("p-nm-{s}-{view:03}"),
                &subject,
                Condition::NM,
                view,
                5,
                &one_hot(s),
            ));
            let bg = if s == 3 { 2 } else { s };
            rows.push(row(
                &format!("p-bg-{s}-{view:03}"),
                &subject,
                Condition::BG,
                view,
                1,
                &one_hot(bg),
            ));
            let cl = if vi >= 5 && s < 2 {
                mid.to_vec()
            } else {
                one_hot(s)
            };
            rows.push(row(
                &format!("p-cl-{s}-{view:03}"),
                &subject,
                Condition::CL,
                view,
                1,
                &cl,
            ));
            rows.push(row(
                &format!("x-{s}-{view:03}"),
                "intruder",
                Condition::NM,
                view,
                7,
                &one_hot(s),
            ));
        }
    }
    EmbeddingSet::new(rows).unwrap()
}

pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Exhaustive batch-hard mining: sort every candidate by (distance, index).
pub fn mine_oracle(emb: &[Vec<f64>], labels: &[u32]) -> Vec<Triplet> {
    (0..emb.len())
        .map(|a| {
            let mut pos: Vec<(f64, usize)> = (0..emb.len())
                .filter(|&j| j != a && labels[j] == labels[a])
                .map(|j| (dist(&emb[a], &emb[j]), j))
                .collect();
            let mut neg: Vec<(f64, usize)> = (0..emb.len())
                .filter(|&j| labels[j] != labels[a])
                .map(|j| (dist(&emb[a], &emb[j]), j))
                .collect();
            pos.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));
            neg.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
            Triplet {
                anchor: a,
                positive: pos[0].1,
                negative: neg[0].1,
            }
        })
        .collect()
}

pub fn random_batch(rng: &mut ChaCha8Rng) -> (Vec<Vec<f64>>, Vec<u32>) {
    let ids = rng.gen_range(2..=4);
    let per = rng.gen_range(2..=4);
    let dim = rng.gen_range(1..=5);
    let mut labels: Vec<u32> = (0..ids * per).map(|i| (i / per) as u32).collect();
    // Shuffle so labels are interleaved.
    for i in (1..labels.len()).rev() {
        labels.swap(i, rng.gen_range(0..=i));
    }
    // A coarse grid makes exact distance ties common.
    let emb = labels
        .iter()
        .map(|_| {
            (0..dim)
                .map(|_| rng.gen_range(-2..=2) as f64 * 0.5)
                .collect()
        })
        .collect();
    (emb, labels)
}

/// Hand-computed expectations for [`casia_fixture`]: per probe group, the
/// cell value at (gallery view index, probe view index), the per-probe-view
/// means and the overall mean.
pub struct CasiaExpectation {
    pub name: &'static str,
    pub cell: fn(usize, usize) -> f64,
    pub rows: [f64; 11],
    pub mean: f64,
}

fn nm_cell(g: usize, _p: usize) -> f64 {
    if g.is_multiple_of(2) {
        1.0
    } else {
        0.5
    }
}

fn bg_cell(g: usize, _p: usize) -> f64 {
    if g.is_multiple_of(2) {
        0.75
    } else {
        0.25
    }
}

fn cl_cell(g: usize, p: usize) -> f64 {
    if p >= 5 {
        0.75
    } else {
        nm_cell(g, p)
    }
}

pub fn casia_expected() -> [CasiaExpectation; 3] {
    [
        CasiaExpectation {
            name: "NM",
            cell: nm_cell,
            rows: [0.75, 0.8, 0.75, 0.8, 0.75, 0.8, 0.75, 0.8, 0.75, 0.8, 0.75],
            mean: 8.5 / 11.0,
        },
        CasiaExpectation {
            name: "BG",
            cell: bg_cell,
            rows: [0.5, 0.55, 0.5, 0.55, 0.5, 0.55, 0.5, 0.55, 0.5, 0.55, 0.5],
            mean: 5.75 / 11.0,
        },
        CasiaExpectation {
            name: "CL",
            cell: cl_cell,
            rows: [
                0.75, 0.8, 0.75, 0.8, 0.75, 0.75, 0.75, 0.75, 0.75, 0.75, 0.75,
            ],
            mean: 8.35 / 11.0,
        },
    ]
}
