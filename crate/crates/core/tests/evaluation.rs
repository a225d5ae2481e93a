use std::collections::BTreeMap;

use gaitpt::evaluation::{
    ablation_run, casia_eval, grew_eval, pearson_r, rank_k_accuracy, student_t_two_sided,
    welch_t_test, EmbeddingRow, EmbeddingSet, Splits, CASIA_VIEWS,
};
use gaitpt::synth::{generate_dataset, SynthConfig};
use gaitpt::training::TrainConfig;
use gaitpt::{Condition, Error, GaitPTConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

mod common;
use common::{casia_expected, casia_fixture, random_rows, rank_oracle, simple};

#[test]
fn rank_k_examples() {
    let g = EmbeddingSet::new(vec![
        simple("A", "a", &[0.0, 0.0]),
        simple("B", "b", &[1.0, 0.0]),
    ])
    .unwrap();
    let p = EmbeddingSet::new(vec![simple("P", "a", &[0.1, 0.0])]).unwrap();
    assert_eq!(rank_k_accuracy(&g, &p, &[1]).unwrap()[&1], 1.0);

    // Equidistant: the lower key wins.
    let tie = EmbeddingSet::new(vec![simple("P", "b", &[0.5, 0.0])]).unwrap();
    assert_eq!(
        rank_k_accuracy(&g, &tie, &[1, 2]).unwrap(),
        BTreeMap::from([(1, 0.0), (2, 1.0)])
    );
    let swapped = EmbeddingSet::new(vec![
        simple("A", "b", &[0.0, 0.0]),
        simple("B", "a", &[1.0, 0.0]),
    ])
    .unwrap();
    assert_eq!(rank_k_accuracy(&swapped, &tie, &[1]).unwrap()[&1], 1.0);

    // Absent subjects are misses.
    let stranger = EmbeddingSet::new(vec![simple("Q", "z", &[0.0, 0.0])]).unwrap();
    assert_eq!(rank_k_accuracy(&g, &stranger, &[2]).unwrap()[&2], 0.0);

    let empty = EmbeddingSet::new(vec![]).unwrap();
    assert!(matches!(
        rank_k_accuracy(&empty, &p, &[1]),
        Err(Error::Protocol(_))
    ));
    assert!(matches!(
        rank_k_accuracy(&g, &p, &[0]),
        Err(Error::Usage(_))
    ));
}

#[test]
fn embedding_set_invariants() {
    assert!(EmbeddingSet::new(vec![simple("A", "a", &[0.0]), simple("A", "b", &[1.0])]).is_err());
    assert!(EmbeddingSet::new(vec![
        simple("A", "a", &[0.0]),
        simple("B", "b", &[1.0, 2.0])
    ])
    .is_err());
}

#[test]
fn rank_k_matches_full_sort_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..150 {
        let n = rng.gen_range(1..12);
        let gallery = random_rows(&mut rng, n, 5, "g");
        let probe = random_rows(&mut rng, 10, 6, "p");
        let gs = EmbeddingSet::new(gallery.clone()).unwrap();
        let ps = EmbeddingSet::new(probe.clone()).unwrap();
        let ks = [1, 2, 3, 5, 10, 20];
        let got = rank_k_accuracy(&gs, &ps, &ks).unwrap();
        for k in ks {
            assert_eq!(got[&k], rank_oracle(&gallery, &probe, k), "k={k}");
        }
        let grew = grew_eval(&gs, &ps).unwrap();
        assert_eq!(grew.keys().copied().collect::<Vec<_>>(), vec![1, 5, 10, 20]);
        let vals: Vec<f64> = grew.values().copied().collect();
        assert!(vals.windows(2).all(|w| w[0] <= w[1]));
    }
}

#[test]
fn full_gallery_rank_is_perfect_when_subjects_are_present() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let gallery: Vec<EmbeddingRow> = (0..6)
        .map(|i| simple(&format!("g{i}"), &format!("s{i}"), &[rng.gen(), rng.gen()]))
        .collect();
    let probe: Vec<EmbeddingRow> = (0..20)
        .map(|i| {
            simple(
                &format!("p{i}"),
                &format!("s{}", i % 6),
                &[rng.gen(), rng.gen()],
            )
        })
        .collect();
    let got = rank_k_accuracy(
        &EmbeddingSet::new(gallery).unwrap(),
        &EmbeddingSet::new(probe).unwrap(),
        &[6],
    )
    .unwrap();
    assert_eq!(got[&6], 1.0);
}

#[test]
fn casia_matrix_matches_the_hand_computed_fixture() {
    let report = casia_eval(&casia_fixture()).unwrap();
    assert_eq!(report.probes.len(), 3);
    // Worked out by hand from the fixture layout.
    for (report, want) in report.probes.iter().zip(casia_expected()) {
        assert_eq!(report.name, want.name);
        assert_eq!(report.cells.len(), 121);
        for (gi, &gv) in CASIA_VIEWS.iter().enumerate() {
            for (pi, &pv) in CASIA_VIEWS.iter().enumerate() {
                assert_eq!(
                    report.cell(gv, pv),
                    Some((want.cell)(gi, pi)),
                    "{} g{gv} p{pv}",
                    report.name
                );
            }
        }
        let got: Vec<f64> = report.per_probe_view.iter().map(|(_, m)| *m).collect();
        for (g, w) in got.iter().zip(want.rows) {
            assert!((g - w).abs() < 1e-12, "{}: {got:?}", report.name);
        }
        assert!(
            (report.mean - want.mean).abs() < 1e-12,
            "{} {}",
            report.name,
            report.mean
        );
    }
    assert_eq!(
        report
            .probes
            .iter()
            .map(|p| p.name.as_str())
            .collect::<Vec<_>>(),
        ["NM", "BG", "CL"]
    );
    let table = report.render_table();
    assert!(table.contains("BG") && table.contains("180°"));
}

#[test]
fn casia_perfect_separation_scores_one() {
    let rows: Vec<EmbeddingRow> = casia_fixture()
        .rows()
        .iter()
        .filter(|r| r.session != 7)
        .map(|r| {
            let s: usize = r.subject_id[3..].parse().unwrap();
            let mut e = vec![0.0; 4];
            e[s] = 1.0;
            EmbeddingRow {
                embedding: e,
                ..r.clone()
            }
        })
        .collect();
    let report = casia_eval(&EmbeddingSet::new(rows).unwrap()).unwrap();
    for p in &report.probes {
        assert!(p.cells.iter().all(|c| c.accuracy == 1.0));
        assert_eq!(p.mean, 1.0);
    }
}

#[test]
fn casia_reports_missing_groups() {
    let set = casia_fixture()
        .filter(|r| !(r.condition == Condition::CL && r.view == 36) && r.key != "g-0-000");
    match casia_eval(&set) {
        Err(Error::Protocol(msg)) => {
            assert!(msg.contains("probe CL at 36°"), "{msg}");
            assert!(!msg.contains("gallery NM#1-4 at 0°"), "{msg}");
        }
        other => panic!("{other:?}"),
    }
    let set = casia_fixture()
        .filter(|r| !(r.session == 1 && r.condition == Condition::NM && r.view == 18));
    match casia_eval(&set) {
        Err(Error::Protocol(msg)) => assert!(msg.contains("gallery NM#1-4 at 18°"), "{msg}"),
        other => panic!("{other:?}"),
    }
}

#[derive(Deserialize)]
struct WelchCase {
    xs: Vec<f64>,
    ys: Vec<f64>,
    t: f64,
    df: f64,
    p: f64,
}

#[derive(Deserialize)]
struct TailCase {
    t: f64,
    df: f64,
    p: f64,
}

#[derive(Deserialize)]
struct Fixtures {
    welch: Vec<WelchCase>,
    t_two_sided: Vec<TailCase>,
}

fn fixtures() -> Fixtures {
    serde_json::from_str(include_str!("fixtures/numeric.json")).unwrap()
}

#[test]
fn welch_matches_high_precision_reference() {
    let f = fixtures();
    assert!(f.welch.len() >= 100);
    for (i, c) in f.welch.iter().enumerate() {
        let got = welch_t_test(&c.xs, &c.ys).unwrap();
        assert!(
            (got.t - c.t).abs() <= 1e-6 * c.t.abs().max(1.0),
            "case {i}: t {} vs {}",
            got.t,
            c.t
        );
        assert!(
            (got.df - c.df).abs() <= 1e-6 * c.df.max(1.0),
            "case {i}: df {} vs {}",
            got.df,
            c.df
        );
        assert!(
            (got.p - c.p).abs() <= 1e-6,
            "case {i}: p {} vs {}",
            got.p,
            c.p
        );
    }
}

#[test]
fn student_tail_matches_high_precision_reference() {
    for c in fixtures().t_two_sided {
        let got = student_t_two_sided(c.t, c.df);
        assert!(
            (got - c.p).abs() <= 1e-6,
            "t={} df={}: {got} vs {}",
            c.t,
            c.df,
            c.p
        );
    }
}

#[test]
fn welch_examples() {
    let xs = [1.0, 2.0, 3.0];
    let w = welch_t_test(&xs, &xs).unwrap();
    assert_eq!((w.t, w.p), (0.0, 1.0));
    let ys: Vec<f64> = xs.iter().map(|x| x + 10.0).collect();
    assert!(welch_t_test(&xs, &ys).unwrap().p < 0.05);
    assert!(matches!(
        welch_t_test(&[1.0], &xs),
        Err(Error::Statistics(_))
    ));
    assert!(matches!(
        welch_t_test(&[2.0, 2.0], &[3.0, 3.0]),
        Err(Error::Statistics(_))
    ));
}

/// Pearson via E[xy] - E[x]E[y] over population moments.
fn pearson_oracle(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let e = |v: &dyn Fn(usize) -> f64| (0..xs.len()).map(v).sum::<f64>() / n;
    let (ex, ey) = (e(&|i| xs[i]), e(&|i| ys[i]));
    let cov = e(&|i| xs[i] * ys[i]) - ex * ey;
    let vx = e(&|i| xs[i] * xs[i]) - ex * ex;
    let vy = e(&|i| ys[i] * ys[i]) - ey * ey;
    cov / (vx * vy).sqrt()
}

#[test]
fn pearson_examples_and_oracle() {
    let xs = [1.0, 2.0, 4.0, 7.0];
    let double: Vec<f64> = xs.iter().map(|x| 2.0 * x).collect();
    let neg: Vec<f64> = xs.iter().map(|x| -x).collect();
    assert!((pearson_r(&xs, &double).unwrap() - 1.0).abs() < 1e-15);
    assert!((pearson_r(&xs, &neg).unwrap() + 1.0).abs() < 1e-15);
    assert!(matches!(
        pearson_r(&xs, &[1.0; 4]),
        Err(Error::Statistics(_))
    ));
    assert!(matches!(
        pearson_r(&xs, &xs[..3]),
        Err(Error::Statistics(_))
    ));

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..120 {
        let n = rng.gen_range(3..30);
        let xs: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let ys: Vec<f64> = xs
            .iter()
            .map(|x| 0.7 * x + rng.gen_range(-1.0..1.0))
            .collect();
        assert!((pearson_r(&xs, &ys).unwrap() - pearson_oracle(&xs, &ys)).abs() < 1e-9);
    }
}

proptest! {
    #[test]
    fn welch_is_antisymmetric(xs in proptest::collection::vec(-5.0f64..5.0, 2..10),
                              ys in proptest::collection::vec(-5.0f64..5.0, 2..10)) {
        let a = welch_t_test(&xs, &ys);
        let b = welch_t_test(&ys, &xs);
        if let (Ok(a), Ok(b)) = (a, b) {
            prop_assert_eq!(a.t, -b.t);
            prop_assert_eq!(a.p, b.p);
            prop_assert!((0.0..=1.0).contains(&a.p));
        }
    }

    #[test]
    fn pearson_is_affine_invariant(xs in proptest::collection::vec(-5.0f64..5.0, 3..12),
                                   noise in proptest::collection::vec(-1.0f64..1.0, 12),
                                   scale in 0.1f64..10.0, shift in -10.0f64..10.0) {
        let ys: Vec<f64> = xs.iter().zip(&noise).map(|(x, e)| x + e).collect();
        if let Ok(r) = pearson_r(&xs, &ys) {
            let moved: Vec<f64> = xs.iter().map(|x| scale * x + shift).collect();
            let r2 = pearson_r(&moved, &ys).unwrap();
            prop_assert!((r - r2).abs() < 1e-9);
        }
    }
}

fn small_splits() -> gaitpt::synth::SynthDataset {
    generate_dataset(&SynthConfig {
        identities: 4,
        sequences_per_identity: 4,
        frames: 6,
        views: vec![90],
        train_per_view: 2,
        seed: 2,
        ..SynthConfig::default()
    })
    .unwrap()
}

fn quick_train() -> TrainConfig {
    TrainConfig {
        identities_per_batch: 4,
        samples_per_identity: 2,
        batches_per_epoch: Some(1),
        epochs: 1,
        ..TrainConfig::default()
    }
}

#[test]
fn ablation_harness_smoke_and_determinism() {
    let ds = small_splits();
    let splits = Splits {
        train: &ds.train,
        gallery: &ds.gallery,
        probe: &ds.probe,
    };
    let base = GaitPTConfig::tiny();
    let subsets = vec![vec![4], vec![1, 4]];
    let run = || {
        ablation_run::<f32>(
            &base,
            &subsets,
            splits,
            &quick_train(),
            3,
            5,
            8,
            |_, _, _| {},
        )
        .unwrap()
    };
    let table = run();
    assert_eq!(table.rows.len(), 2);
    assert_eq!(table.rows[0].label, "stages 4");
    assert!(table.rows.iter().all(|r| r.accuracies.len() == 3));
    assert_eq!(table.pairwise.len(), 1);
    let pair = &table.pairwise[0];
    assert!(pair.welch.is_some() || pair.note.is_some());
    assert_eq!(
        serde_json::to_string(&table).unwrap(),
        serde_json::to_string(&run()).unwrap()
    );

    let single = ablation_run::<f32>(
        &base,
        &[vec![1, 2, 3, 4]],
        splits,
        &quick_train(),
        2,
        5,
        8,
        |_, _, _| {},
    )
    .unwrap();
    assert_eq!(single.rows.len(), 1);
    assert!(single.pairwise.is_empty());
    assert!(single.render_table().contains("stages 1,2,3,4"));
}
