//! Parametric synthetic walkers.
//!
//! Each identity is a small set of body proportions and gait rhythm
//! parameters. A sequence is rendered by walking a planar articulated body
//! forward, rotating it by the camera angle and dropping depth, then adding
//! per-joint Gaussian jitter. Coordinates are already width-normalized.
//!
//! Identity parameters are drawn uniformly from these ranges (lengths in
//! frame widths, angles in radians):
//!
//! | parameter        | range          |
//! |------------------|----------------|
//! | thigh, shin      | 0.11 .. 0.15   |
//! | upper arm        | 0.08 .. 0.11   |
//! | forearm          | 0.07 .. 0.10   |
//! | torso            | 0.15 .. 0.21   |
//! | shoulder width   | 0.06 .. 0.11   |
//! | hip width        | 0.04 .. 0.08   |
//! | head size        | 0.035 .. 0.055 |
//! | frequency        | 0.02 .. 0.04 cycles/frame |
//! | leg swing        | 0.25 .. 0.50   |
//! | arm swing        | 0.15 .. 0.55   |
//! | knee flex        | 0.30 .. 0.80   |
//! | elbow bend       | 0.10 .. 0.50   |
//! | lean             | 0.00 .. 0.15   |
//! | bounce           | 0.003 .. 0.012 |
//! | phase offsets    | -0.04 .. 0.04  |
//! | noise            | 0.002 .. 0.005 |

use std::f64::consts::{PI, TAU};
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataio::{
    write_manifest, write_records, Manifest, ManifestFile, SequenceRecord, MANIFEST_VERSION,
};
use crate::error::{config_err, Error, Result};
use crate::skeleton::{joint, Condition, GaitSequence, Pose, NUM_JOINTS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentityParams {
    pub thigh: f64,
    pub shin: f64,
    pub upper_arm: f64,
    pub forearm: f64,
    pub torso: f64,
    pub shoulder_width: f64,
    pub hip_width: f64,
    pub head_size: f64,
    /// Stride cycles per frame.
    pub frequency: f64,
    /// Extra phase of the left and right leg.
    pub leg_phase: [f64; 2],
    /// Extra phase of the left and right arm.
    pub arm_phase: [f64; 2],
    pub leg_swing: f64,
    pub arm_swing: f64,
    pub knee_flex: f64,
    pub elbow_bend: f64,
    pub lean: f64,
    pub bounce: f64,
    /// Standard deviation of the per-joint jitter.
    pub noise: f64,
}

impl IdentityParams {
    pub fn lengths(&self) -> [f64; 8] {
        [
            self.thigh,
            self.shin,
            self.upper_arm,
            self.forearm,
            self.torso,
            self.shoulder_width,
            self.hip_width,
            self.head_size,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if self.lengths().iter().any(|l| !(*l > 0.0)) {
            return Err(config_err!("identity lengths must be positive"));
        }
        if !(self.frequency > 0.0 && self.frequency < 0.5) {
            return Err(config_err!(
                "stride frequency must be in (0, 0.5), got {}",
                self.frequency
            ));
        }
        let amps = [
            self.leg_swing,
            self.arm_swing,
            self.knee_flex,
            self.bounce,
            self.noise,
        ];
        if amps.iter().any(|a| !(*a >= 0.0)) {
            return Err(config_err!("amplitudes and noise must be non-negative"));
        }
        Ok(())
    }
}

pub fn sample_identity<R: Rng + ?Sized>(rng: &mut R) -> IdentityParams {
    let mut u = |lo: f64, hi: f64| rng.gen_range(lo..hi);
    IdentityParams {
        thigh: u(0.11, 0.15),
        shin: u(0.11, 0.15),
        upper_arm: u(0.08, 0.11),
        forearm: u(0.07, 0.10),
        torso: u(0.15, 0.21),
        shoulder_width: u(0.06, 0.11),
        hip_width: u(0.04, 0.08),
        head_size: u(0.035, 0.055),
        frequency: u(0.02, 0.04),
        leg_phase: [u(-0.04, 0.04), u(-0.04, 0.04)],
        arm_phase: [u(-0.04, 0.04), u(-0.04, 0.04)],
        leg_swing: u(0.25, 0.5),
        arm_swing: u(0.15, 0.55),
        knee_flex: u(0.3, 0.8),
        elbow_bend: u(0.1, 0.5),
        lean: u(0.0, 0.15),
        bounce: u(0.003, 0.012),
        noise: u(0.002, 0.005),
    }
}

/// Body-frame point: forward, lateral (positive to the walker's left), up.
type P3 = [f64; 3];

fn add(a: P3, b: P3) -> P3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

/// Segment of length `len` hanging from `from` at `angle` off vertical,
/// positive angles pointing forward.
fn hang(from: P3, len: f64, angle: f64) -> P3 {
    add(from, [len * angle.sin(), 0.0, -len * angle.cos()])
}

const GROUND: f64 = 0.92;

/// Per-sequence variation that does not depend on the frame.
struct Take {
    phase0: f64,
    start: f64,
    /// Multipliers on thigh, shin, upper arm, forearm and torso.
    scale: [f64; 5],
    /// Arm swing multipliers, left and right.
    arm_gain: [f64; 2],
    /// Constant arm angle offset, left and right.
    arm_hold: [f64; 2],
}

impl Take {
    fn new<R: Rng + ?Sized>(condition: Condition, rng: &mut R) -> Self {
        let mut take = Take {
            phase0: rng.gen_range(0.0..TAU),
            start: rng.gen_range(-0.22..-0.08),
            scale: [1.0; 5],
            arm_gain: [1.0; 2],
            arm_hold: [0.0; 2],
        };
        match condition {
            Condition::BG => {
                // One hand carries a bag: that arm barely swings and hangs
                // slightly forward.
                let side = rng.gen_range(0..2);
                take.arm_gain[side] = 0.15;
                take.arm_hold[side] = 0.15;
            }
            Condition::CL => {
                let jitter = Normal::new(1.0, 0.05).expect("valid normal");
                for s in &mut take.scale {
                    let v: f64 = jitter.sample(rng);
                    *s = v.clamp(0.85, 1.15);
                }
            }
            Condition::NM | Condition::Other => {}
        }
        take
    }
}

fn render(id: &IdentityParams, take: &Take, view: f64, t: f64) -> [[f64; 2]; NUM_JOINTS] {
    let [thigh, shin, upper, fore, torso] = [
        id.thigh * take.scale[0],
        id.shin * take.scale[1],
        id.upper_arm * take.scale[2],
        id.forearm * take.scale[3],
        id.torso * take.scale[4],
    ];
    let phase = TAU * id.frequency * t + take.phase0;
    // Distance covered per stride cycle, two steps.
    let stride = 2.0 * (thigh + shin) * id.leg_swing.sin();
    let forward = take.start + stride * id.frequency * t;
    let hip_up = 0.97 * (thigh + shin) + id.bounce * (2.0 * phase).cos();
    let pelvis = [forward, 0.0, hip_up];
    let neck = add(pelvis, [torso * id.lean.sin(), 0.0, torso * id.lean.cos()]);

    let mut j = [[0.0; 3]; NUM_JOINTS];
    for (side, sign) in [(0usize, 1.0f64), (1, -1.0)] {
        let leg_phase = phase + side as f64 * PI + id.leg_phase[side];
        let alpha = id.leg_swing * leg_phase.sin();
        let beta = alpha - id.knee_flex * 0.5 * (1.0 + (leg_phase + 0.6).sin());
        let hip = add(pelvis, [0.0, sign * id.hip_width / 2.0, 0.0]);
        let knee = hang(hip, thigh, alpha);
        let ankle = hang(knee, shin, beta);

        // Arms swing against the leg on the same side.
        let arm_phase = leg_phase + PI + id.arm_phase[side] - id.leg_phase[side];
        let gamma = take.arm_hold[side] + take.arm_gain[side] * id.arm_swing * arm_phase.sin();
        let shoulder = add(neck, [0.0, sign * id.shoulder_width / 2.0, 0.0]);
        let elbow = hang(shoulder, upper, gamma);
        let wrist = hang(elbow, fore, gamma + id.elbow_bend);

        let (s, e, w, h, k, a) = if side == 0 {
            use joint::*;
            (
                LEFT_SHOULDER,
                LEFT_ELBOW,
                LEFT_WRIST,
                LEFT_HIP,
                LEFT_KNEE,
                LEFT_ANKLE,
            )
        } else {
            use joint::*;
            (
                RIGHT_SHOULDER,
                RIGHT_ELBOW,
                RIGHT_WRIST,
                RIGHT_HIP,
                RIGHT_KNEE,
                RIGHT_ANKLE,
            )
        };
        j[s] = shoulder;
        j[e] = elbow;
        j[w] = wrist;
        j[h] = hip;
        j[k] = knee;
        j[a] = ankle;
    }
    let h = id.head_size;
    let head = add(neck, [h * 0.2, 0.0, 1.3 * h]);
    j[joint::NOSE] = add(head, [0.6 * h, 0.0, -0.1 * h]);
    j[joint::LEFT_EYE] = add(head, [0.45 * h, 0.3 * h, 0.15 * h]);
    j[joint::RIGHT_EYE] = add(head, [0.45 * h, -0.3 * h, 0.15 * h]);
    j[joint::LEFT_EAR] = add(head, [-0.1 * h, 0.55 * h, 0.0]);
    j[joint::RIGHT_EAR] = add(head, [-0.1 * h, -0.55 * h, 0.0]);
    j[joint::NOSE_COPY] = j[joint::NOSE];

    let (sin, cos) = view.to_radians().sin_cos();
    j.map(|p| [0.5 + p[0] * sin + p[1] * cos, GROUND - p[2]])
}

/// Renders `frames` poses of identity `id` seen from `view` degrees, where
/// 90 is a side view and 0 faces the walker. Coordinates are clamped to
/// [0, 1].
pub fn generate_sequence<R: Rng + ?Sized>(
    id: &IdentityParams,
    view: f64,
    condition: Condition,
    frames: usize,
    rng: &mut R,
) -> Vec<Pose> {
    let take = Take::new(condition, rng);
    let jitter = Normal::new(0.0, id.noise.max(0.0)).expect("finite noise level");
    (0..frames)
        .map(|t| {
            let mut joints = render(id, &take, view, t as f64);
            for p in joints.iter_mut().take(NUM_JOINTS - 1) {
                for c in p.iter_mut() {
                    if id.noise > 0.0 {
                        *c += jitter.sample(rng);
                    }
                    *c = c.clamp(0.0, 1.0);
                }
            }
            joints[joint::NOSE_COPY] = joints[joint::NOSE];
            Pose { joints }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub identities: usize,
    /// Sequences per identity and view.
    pub sequences_per_identity: usize,
    pub frames: usize,
    pub views: Vec<i32>,
    /// Assigned round-robin over each identity's sequences, starting with
    /// the first entry.
    pub conditions: Vec<Condition>,
    /// Sequences per identity and view that go to the training split.
    pub train_per_view: usize,
    /// Replaces every identity's jitter level when set.
    pub noise: Option<f64>,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            identities: 16,
            sequences_per_identity: 8,
            frames: 60,
            views: vec![54, 90],
            conditions: vec![Condition::NM],
            train_per_view: 4,
            noise: None,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.identities == 0 || self.sequences_per_identity == 0 || self.frames == 0 {
            return Err(config_err!(
                "identity, sequence and frame counts must be at least 1"
            ));
        }
        if self.views.is_empty() {
            return Err(config_err!("at least one view is required"));
        }
        if self.conditions.is_empty() {
            return Err(config_err!("at least one condition is required"));
        }
        if self.conditions[0] != Condition::NM {
            return Err(config_err!(
                "the first condition must be NM so every view has a gallery sequence"
            ));
        }
        if self.train_per_view >= self.sequences_per_identity {
            return Err(config_err!(
                "train_per_view ({}) must leave room for a gallery sequence out of {}",
                self.train_per_view,
                self.sequences_per_identity
            ));
        }
        if let Some(n) = self.noise {
            if !(n >= 0.0) {
                return Err(config_err!("noise must be non-negative, got {n}"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Gallery,
    Probe,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Gallery, Split::Probe];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Gallery => "gallery",
            Split::Probe => "probe",
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SynthDataset {
    pub identities: Vec<IdentityParams>,
    pub train: Vec<GaitSequence>,
    pub gallery: Vec<GaitSequence>,
    pub probe: Vec<GaitSequence>,
}

impl SynthDataset {
    pub fn split(&self, split: Split) -> &[GaitSequence] {
        match split {
            Split::Train => &self.train,
            Split::Gallery => &self.gallery,
            Split::Probe => &self.probe,
        }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.gallery.len() + self.probe.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// SplitMix64 finalizer, used to derive independent stream seeds.
pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    let mut z = seed;
    for p in parts {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(*p);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^= z >> 31;
    }
    z
}

pub fn subject_name(index: usize) -> String {
    format!("id{index:03}")
}

/// Generates every sequence of `cfg`. Per identity and view the first
/// sequence (always NM) is the gallery, the next `train_per_view` are for
/// training, and the rest are probes.
pub fn generate_dataset(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let mut out = SynthDataset::default();
    for i in 0..cfg.identities {
        let mut params = sample_identity(&mut ChaCha8Rng::seed_from_u64(derive_seed(
            cfg.seed,
            &[0, i as u64],
        )));
        if let Some(n) = cfg.noise {
            params.noise = n;
        }
        let subject = subject_name(i);
        for &view in &cfg.views {
            for s in 0..cfg.sequences_per_identity {
                let condition = cfg.conditions[s % cfg.conditions.len()];
                // Sessions count up separately within each condition.
                let session = (0..s)
                    .filter(|&e| cfg.conditions[e % cfg.conditions.len()] == condition)
                    .count()
                    + 1;
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                    cfg.seed,
                    &[1, i as u64, view as u64, s as u64],
                ));
                let seq = GaitSequence {
                    key: format!(
                        "{subject}-{}-{s:02}-{view:03}",
                        condition.to_string().to_lowercase()
                    ),
                    subject_id: subject.clone(),
                    condition,
                    view,
                    session: session as u32,
                    frames: generate_sequence(
                        &params,
                        view as f64,
                        condition,
                        cfg.frames,
                        &mut rng,
                    ),
                };
                match s {
                    0 => out.gallery.push(seq),
                    s if s <= cfg.train_per_view => out.train.push(seq),
                    _ => out.probe.push(seq),
                }
            }
        }
        out.identities.push(params);
    }
    Ok(out)
}

/// Generates `cfg` into `dir`: one JSON-lines file per split plus
/// `manifest.json`. Output bytes depend only on `cfg`.
pub fn build_dataset(cfg: &SynthConfig, dir: &Path) -> Result<Manifest> {
    let data = generate_dataset(cfg)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for split in Split::ALL {
        let seqs = data.split(split);
        let file = PathBuf::from(format!("{}.jsonl", split.name()));
        let records: Vec<_> = seqs
            .iter()
            .map(|s| SequenceRecord::from_sequence(s, 1.0))
            .collect();
        write_records(&dir.join(&file), &records)?;
        files.push(ManifestFile {
            split,
            path: file,
            keys: seqs.iter().map(|s| s.key.clone()).collect(),
        });
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        name: "synthgait".into(),
        seed: Some(cfg.seed),
        generator: serde_json::to_value(cfg).map_err(|e| Error::Input(e.to_string()))?,
        files,
    };
    write_manifest(&dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sampled_identities_are_valid_and_seeded() {
        let mut a = ChaCha8Rng::seed_from_u64(3);
        let mut b = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let p = sample_identity(&mut a);
            p.validate().unwrap();
            assert_eq!(p, sample_identity(&mut b));
        }
    }

    #[test]
    fn single_frame_and_unit_square() {
        let id = sample_identity(&mut ChaCha8Rng::seed_from_u64(1));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for view in [0.0, 54.0, 90.0, 180.0] {
            let seq = generate_sequence(&id, view, Condition::CL, 40, &mut rng);
            assert_eq!(seq.len(), 40);
            for p in &seq {
                assert_eq!(p.joints[17], p.joints[0]);
                assert!(p.joints.iter().flatten().all(|c| (0.0..=1.0).contains(c)));
            }
        }
        assert_eq!(
            generate_sequence(&id, 90.0, Condition::NM, 1, &mut rng).len(),
            1
        );
    }

    #[test]
    fn split_counts() {
        let cfg = SynthConfig {
            identities: 8,
            sequences_per_identity: 4,
            train_per_view: 2,
            frames: 5,
            ..Default::default()
        };
        let d = generate_dataset(&cfg).unwrap();
        assert_eq!(d.len(), 64);
        assert_eq!(d.gallery.len(), 16);
        assert_eq!(d.train.len(), 32);
        assert!(d.gallery.iter().all(|s| s.condition == Condition::NM));
    }

    #[test]
    fn rejects_bad_configs() {
        let bad = [
            SynthConfig {
                identities: 0,
                ..Default::default()
            },
            SynthConfig {
                views: vec![],
                ..Default::default()
            },
            SynthConfig {
                conditions: vec![Condition::BG],
                ..Default::default()
            },
            SynthConfig {
                train_per_view: 8,
                ..Default::default()
            },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err());
        }
    }
}
