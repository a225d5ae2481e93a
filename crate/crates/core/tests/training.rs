use gaitpt::nn::ParamStore;
use gaitpt::synth::{generate_dataset, SynthConfig};
use gaitpt::training::{
    adamw_step, batch_hard_mine, cyclic_lr, evaluate_loss, train, triplet_loss, triplet_loss_batch,
    AdamWConfig, CyclicLr, OptimizerState, TrainConfig, Triplet,
};
use gaitpt::{Condition, Error, GaitPT, GaitPTConfig, GaitSequence, Pose, Tape, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

mod common;
use common::{dist, mine_oracle, random_batch};

#[test]
fn triplet_loss_examples() {
    let a = [0.0];
    assert!((triplet_loss(&a, &[0.5], &[0.1], 0.02).unwrap() - 0.42).abs() < 1e-12);
    assert_eq!(triplet_loss(&a, &[0.1], &[0.5], 0.02).unwrap(), 0.0);
    let x = [0.3, -0.2];
    assert!((triplet_loss(&x, &x, &x, 0.02).unwrap() - 0.02).abs() < 1e-15);
    assert!(matches!(
        triplet_loss(&x, &x, &a, 0.02),
        Err(Error::Input(_))
    ));
}

#[test]
fn batch_hard_mining_matches_exhaustive_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..200 {
        let (emb, labels) = random_batch(&mut rng);
        let got = batch_hard_mine(&emb, &labels).unwrap();
        assert_eq!(got, mine_oracle(&emb, &labels));
        for t in &got {
            let dn = dist(&emb[t.anchor], &emb[t.negative]);
            for j in 0..emb.len() {
                if labels[j] != labels[t.anchor] {
                    assert!(dn <= dist(&emb[t.anchor], &emb[j]));
                }
            }
        }
    }
}

#[test]
fn mining_two_by_two() {
    let emb = vec![
        vec![0.0, 0.0],
        vec![1.0, 0.0],
        vec![0.0, 3.0],
        vec![0.0, 5.0],
    ];
    let labels = ["a", "a", "b", "b"];
    let got = batch_hard_mine(&emb, &labels).unwrap();
    let want = [(0, 1, 2), (1, 0, 2), (2, 3, 0), (3, 2, 0)];
    for (t, (a, p, n)) in got.iter().zip(want) {
        assert_eq!((t.anchor, t.positive, t.negative), (a, p, n));
    }
}

#[test]
fn mining_preconditions_name_the_label() {
    let emb = vec![vec![0.0]; 3];
    match batch_hard_mine(&emb, &["a", "a", "lonely"]) {
        Err(Error::Sampling(msg)) => assert!(msg.contains("lonely"), "{msg}"),
        other => panic!("{other:?}"),
    }
    assert!(matches!(
        batch_hard_mine(&emb, &["a", "a", "a"]),
        Err(Error::Sampling(_))
    ));
}

#[test]
fn identical_embeddings_score_the_margin() {
    let emb = vec![vec![0.25, -0.5]; 4];
    let labels = [0, 0, 1, 1];
    let triplets = batch_hard_mine(&emb, &labels).unwrap();
    let tape = Tape::<f64>::new();
    let v = tape.constant(Tensor::new(vec![4, 2], emb.concat()).unwrap());
    let (loss, stats) = triplet_loss_batch(&v, &triplets, 0.02, true).unwrap();
    assert!((loss.value().item().unwrap() - 0.02).abs() < 1e-9);
    assert_eq!(stats.active_fraction, 1.0);
    assert_eq!(stats.accuracy, 0.0);
}

#[test]
fn unhinged_loss_can_go_negative() {
    let tape = Tape::<f64>::new();
    let v = tape.constant(Tensor::new(vec![3, 1], vec![0.0, 0.1, 0.5]).unwrap());
    let t = [Triplet {
        anchor: 0,
        positive: 1,
        negative: 2,
    }];
    let (hinged, _) = triplet_loss_batch(&v, &t, 0.02, true).unwrap();
    let (raw, _) = triplet_loss_batch(&v, &t, 0.02, false).unwrap();
    assert_eq!(hinged.value().item().unwrap(), 0.0);
    assert!((raw.value().item().unwrap() + 0.38).abs() < 1e-9);
}

fn scalar_store(values: &[f64]) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    s.register(
        "theta",
        Tensor::new(vec![values.len()], values.to_vec()).unwrap(),
    )
    .unwrap();
    s
}

#[test]
fn adamw_closed_forms() {
    let no_decay = AdamWConfig {
        weight_decay: 0.0,
        ..AdamWConfig::default()
    };
    let mut s = scalar_store(&[1.0, -2.0]);
    let mut st = OptimizerState::new(&s);
    s.iter_mut().next().unwrap().grad = Some(Tensor::zeros(vec![2]));
    adamw_step(&mut s, &mut st, &no_decay, 0.1).unwrap();
    assert_eq!(s.iter().next().unwrap().value.data(), &[1.0, -2.0]);

    let decay = AdamWConfig {
        weight_decay: 0.01,
        ..AdamWConfig::default()
    };
    let mut s = scalar_store(&[1.0, -2.0]);
    let mut st = OptimizerState::new(&s);
    adamw_step(&mut s, &mut st, &decay, 0.1).unwrap();
    let got = s.iter().next().unwrap().value.data().to_vec();
    assert!((got[0] - 0.999).abs() < 1e-15 && (got[1] + 1.998).abs() < 1e-15);

    let mut s = scalar_store(&[0.0, 0.0]);
    let mut st = OptimizerState::new(&s);
    s.iter_mut().next().unwrap().grad = Some(Tensor::new(vec![2], vec![3.0, -0.25]).unwrap());
    adamw_step(&mut s, &mut st, &no_decay, 0.01).unwrap();
    let got = s.iter().next().unwrap().value.data().to_vec();
    assert!(
        (got[0] + 0.01).abs() < 1e-9 && (got[1] - 0.01).abs() < 1e-9,
        "{got:?}"
    );

    assert!(matches!(
        adamw_step(&mut s, &mut st, &no_decay, 0.0),
        Err(Error::Config(_))
    ));
}

#[test]
fn adamw_descends_a_convex_quadratic() {
    // f(θ) = Σ c_i (θ_i - t_i)^2
    let c = [1.0, 4.0, 0.5];
    let target = [0.3, -1.0, 2.0];
    let f = |th: &[f64]| -> f64 {
        th.iter()
            .zip(&c)
            .zip(&target)
            .map(|((x, c), t)| c * (x - t).powi(2))
            .sum()
    };
    let cfg = AdamWConfig {
        weight_decay: 0.0,
        ..AdamWConfig::default()
    };
    let mut s = scalar_store(&[2.0, 2.0, -2.0]);
    let mut st = OptimizerState::new(&s);
    let mut prev = f(s.iter().next().unwrap().value.data());
    for _ in 0..50 {
        let th = s.iter().next().unwrap().value.data().to_vec();
        let g: Vec<f64> = th
            .iter()
            .zip(&c)
            .zip(&target)
            .map(|((x, c), t)| 2.0 * c * (x - t))
            .collect();
        s.iter_mut().next().unwrap().grad = Some(Tensor::new(vec![3], g).unwrap());
        adamw_step(&mut s, &mut st, &cfg, 0.01).unwrap();
        let now = f(s.iter().next().unwrap().value.data());
        assert!(now < prev);
        prev = now;
    }
}

#[test]
fn cyclic_schedule_points() {
    let c = CyclicLr::default();
    assert_eq!(cyclic_lr(0, &c), 0.0001);
    let at15 = 0.0001 + 0.0099 * 0.995f64.powi(15);
    assert!((cyclic_lr(15, &c) - at15).abs() < 1e-15);
    assert!((cyclic_lr(7, &c) - (0.0001 + 0.0099 * 0.995f64.powi(7) * 7.0 / 15.0)).abs() < 1e-15);
    assert!(cyclic_lr(100_015, &c) - 1e-4 < 1e-12);
}

proptest! {
    #[test]
    fn cyclic_lr_stays_in_bounds(iter in 0u64..1_000_000, lo in 1e-6f64..1e-2, span in 1e-6f64..1.0,
                                 gamma in 0.5f64..=1.0, step in 1u64..100) {
        let c = CyclicLr { lr_min: lo, lr_max: lo + span, gamma, step_size: step };
        let lr = cyclic_lr(iter, &c);
        prop_assert!(lr >= c.lr_min && lr <= c.lr_max);
    }

    #[test]
    fn triplet_loss_is_nonnegative_and_zero_iff_separated(
        a in proptest::collection::vec(-1.0f64..1.0, 3),
        p in proptest::collection::vec(-1.0f64..1.0, 3),
        n in proptest::collection::vec(-1.0f64..1.0, 3),
        m in 0.0f64..0.5,
    ) {
        let l = triplet_loss(&a, &p, &n, m).unwrap();
        prop_assert!(l >= 0.0);
        prop_assert_eq!(l == 0.0, dist(&a, &n) >= dist(&a, &p) + m);
    }
}

fn tiny_data() -> Vec<GaitSequence> {
    let cfg = SynthConfig {
        identities: 4,
        sequences_per_identity: 4,
        frames: 8,
        views: vec![90],
        train_per_view: 3,
        seed: 5,
        ..SynthConfig::default()
    };
    generate_dataset(&cfg).unwrap().train
}

fn tiny_train_config() -> TrainConfig {
    TrainConfig {
        identities_per_batch: 4,
        samples_per_identity: 2,
        batches_per_epoch: Some(4),
        epochs: 1,
        lr_max: 2e-3,
        margin: 0.2,
        seed: 9,
        ..TrainConfig::default()
    }
}

#[test]
fn short_training_reduces_the_held_fixed_batch_loss() {
    let data = tiny_data();
    let cfg = tiny_train_config();
    let mut model: GaitPT<f64> = GaitPT::new(GaitPTConfig::tiny(), 1).unwrap();
    let before = evaluate_loss(&model, &data, &cfg, 4, 77).unwrap();
    let cfg = TrainConfig {
        lr_min: 1e-3,
        lr_max: 2e-3,
        epochs: 3,
        ..cfg
    };
    let log = train(&mut model, &data, &cfg, |_, _| Ok(())).unwrap();
    let after = evaluate_loss(&model, &data, &cfg, 4, 77).unwrap();
    assert_eq!(log.len(), 3);
    assert!(log.iter().all(|e| e.steps == 4 && e.active_fraction <= 1.0));
    assert!(
        after.mean_loss < before.mean_loss,
        "{before:?} -> {after:?}"
    );
}

#[test]
fn training_is_bitwise_reproducible() {
    let data = tiny_data();
    let cfg = TrainConfig {
        epochs: 2,
        ..tiny_train_config()
    };
    let run = || {
        let mut model: GaitPT<f32> = GaitPT::new(GaitPTConfig::tiny(), 2).unwrap();
        let log = train(&mut model, &data, &cfg, |_, _| Ok(())).unwrap();
        let weights: Vec<u32> = model
            .params()
            .iter()
            .flat_map(|p| {
                p.value
                    .data()
                    .iter()
                    .map(|x| x.to_bits())
                    .collect::<Vec<_>>()
            })
            .collect();
        (
            log.iter()
                .map(|e| e.mean_loss.to_bits())
                .collect::<Vec<_>>(),
            weights,
        )
    };
    assert_eq!(run(), run());
}

#[test]
fn zero_margin_on_identical_inputs_leaves_parameters_alone() {
    let frozen: Vec<Pose> = vec![Pose::zeros(); 8];
    let data: Vec<GaitSequence> = (0..8)
        .map(|i| GaitSequence {
            key: format!("k{i}"),
            subject_id: format!("s{}", i / 2),
            condition: Condition::NM,
            view: 90,
            session: 1,
            frames: frozen.clone(),
        })
        .collect();
    let cfg = TrainConfig {
        margin: 0.0,
        weight_decay: 0.0,
        ..tiny_train_config()
    };
    let mut model: GaitPT<f64> = GaitPT::new(GaitPTConfig::tiny(), 3).unwrap();
    let before = model.clone();
    let log = train(&mut model, &data, &cfg, |_, _| Ok(())).unwrap();
    assert_eq!(log[0].mean_loss, 0.0);
    for (a, b) in model.params().iter().zip(before.params().iter()) {
        assert_eq!(a.value.data(), b.value.data(), "{}", a.name);
    }
}

#[test]
fn configuration_errors() {
    let data = tiny_data();
    let mut model: GaitPT<f32> = GaitPT::new(GaitPTConfig::tiny(), 0).unwrap();
    let too_many = TrainConfig {
        identities_per_batch: 5,
        ..tiny_train_config()
    };
    assert!(matches!(
        train(&mut model, &data, &too_many, |_, _| Ok(())),
        Err(Error::Config(_))
    ));
    for bad in [
        TrainConfig {
            margin: -0.1,
            ..TrainConfig::default()
        },
        TrainConfig {
            lr_min: 0.02,
            ..TrainConfig::default()
        },
        TrainConfig {
            gamma: 1.5,
            ..TrainConfig::default()
        },
        TrainConfig {
            step_size: 0,
            ..TrainConfig::default()
        },
        TrainConfig {
            samples_per_identity: 1,
            ..TrainConfig::default()
        },
    ] {
        assert!(matches!(bad.validate(), Err(Error::Config(_))), "{bad:?}");
    }
    TrainConfig::default().validate().unwrap();
}

#[test]
fn epoch_callback_sees_every_epoch_and_can_abort() {
    let data = tiny_data();
    let cfg = TrainConfig {
        epochs: 3,
        ..tiny_train_config()
    };
    let mut model: GaitPT<f32> = GaitPT::new(GaitPTConfig::tiny(), 0).unwrap();
    let mut seen = Vec::new();
    let err = train(&mut model, &data, &cfg, |e, _| {
        seen.push(e.epoch);
        if e.epoch == 1 {
            Err(Error::Usage("stop".into()))
        } else {
            Ok(())
        }
    });
    assert!(matches!(err, Err(Error::Usage(_))));
    assert_eq!(seen, vec![0, 1]);
}
