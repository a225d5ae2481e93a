//! Pose and sequence types, the anatomical merge hierarchy, and
//! preprocessing.
//!
//! Joints follow the COCO-17 keypoint order with the nose duplicated at
//! index 17:
//!
//! | index | joint | index | joint |
//! |-------|-------|-------|-------|
//! | 0 | nose | 9 / 10 | left / right wrist |
//! | 1 / 2 | left / right eye | 11 / 12 | left / right hip |
//! | 3 / 4 | left / right ear | 13 / 14 | left / right knee |
//! | 5 / 6 | left / right shoulder | 15 / 16 | left / right ankle |
//! | 7 / 8 | left / right elbow | 17 | nose (copy) |

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};

pub const NUM_JOINTS: usize = 18;
pub const NUM_RAW_JOINTS: usize = 17;

pub mod joint {
    pub const NOSE: usize = 0;
    pub const LEFT_EYE: usize = 1;
    pub const RIGHT_EYE: usize = 2;
    pub const LEFT_EAR: usize = 3;
    pub const RIGHT_EAR: usize = 4;
    pub const LEFT_SHOULDER: usize = 5;
    pub const RIGHT_SHOULDER: usize = 6;
    pub const LEFT_ELBOW: usize = 7;
    pub const RIGHT_ELBOW: usize = 8;
    pub const LEFT_WRIST: usize = 9;
    pub const RIGHT_WRIST: usize = 10;
    pub const LEFT_HIP: usize = 11;
    pub const RIGHT_HIP: usize = 12;
    pub const LEFT_KNEE: usize = 13;
    pub const RIGHT_KNEE: usize = 14;
    pub const LEFT_ANKLE: usize = 15;
    pub const RIGHT_ANKLE: usize = 16;
    pub const NOSE_COPY: usize = 17;
}

/// Limb-level tokens, in stage-2 token order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Limb {
    Head,
    LeftArm,
    RightArm,
    LeftLeg,
    RightLeg,
}

impl Limb {
    pub const ALL: [Limb; 5] = [
        Limb::Head,
        Limb::LeftArm,
        Limb::RightArm,
        Limb::LeftLeg,
        Limb::RightLeg,
    ];

    /// Position of this limb among the stage-2 tokens.
    pub fn token(self) -> usize {
        self as usize
    }

    /// Member joints, in merge order.
    pub fn joints(self) -> &'static [usize] {
        use joint::*;
        match self {
            Limb::Head => &[NOSE, LEFT_EYE, RIGHT_EYE, LEFT_EAR, RIGHT_EAR, NOSE_COPY],
            Limb::LeftArm => &[LEFT_SHOULDER, LEFT_ELBOW, LEFT_WRIST],
            Limb::RightArm => &[RIGHT_SHOULDER, RIGHT_ELBOW, RIGHT_WRIST],
            Limb::LeftLeg => &[LEFT_HIP, LEFT_KNEE, LEFT_ANKLE],
            Limb::RightLeg => &[RIGHT_HIP, RIGHT_KNEE, RIGHT_ANKLE],
        }
    }
}

/// Stage-3 grouping of limb tokens.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PartitionScheme {
    /// Head, upper body (both arms), lower body (both legs).
    #[default]
    #[serde(rename = "HUL")]
    Hul,
    /// Head, left side, right side.
    #[serde(rename = "HLR")]
    Hlr,
    /// Head, left arm with right leg, right arm with left leg.
    #[serde(rename = "OPPOSITE")]
    Opposite,
    /// Every distinct group of the three schemes above.
    #[serde(rename = "ALL")]
    All,
}

impl PartitionScheme {
    pub const ALL_SCHEMES: [PartitionScheme; 4] = [
        PartitionScheme::Hul,
        PartitionScheme::Hlr,
        PartitionScheme::Opposite,
        PartitionScheme::All,
    ];

    pub fn stage3_groups(self) -> Vec<Vec<Limb>> {
        use Limb::*;
        let head = vec![Head];
        let arms = vec![LeftArm, RightArm];
        let legs = vec![LeftLeg, RightLeg];
        let left = vec![LeftArm, LeftLeg];
        let right = vec![RightArm, RightLeg];
        let larm_rleg = vec![LeftArm, RightLeg];
        let rarm_lleg = vec![RightArm, LeftLeg];
        match self {
            PartitionScheme::Hul => vec![head, arms, legs],
            PartitionScheme::Hlr => vec![head, left, right],
            PartitionScheme::Opposite => vec![head, larm_rleg, rarm_lleg],
            PartitionScheme::All => vec![head, arms, legs, left, right, larm_rleg, rarm_lleg],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PartitionScheme::Hul => "HUL",
            PartitionScheme::Hlr => "HLR",
            PartitionScheme::Opposite => "OPPOSITE",
            PartitionScheme::All => "ALL",
        }
    }
}

impl fmt::Display for PartitionScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PartitionScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "HUL" => Ok(PartitionScheme::Hul),
            "HLR" => Ok(PartitionScheme::Hlr),
            "OPPOSITE" => Ok(PartitionScheme::Opposite),
            "ALL" => Ok(PartitionScheme::All),
            _ => Err(config_err!(
                "unknown partition scheme {s:?} (expected HUL, HLR, OPPOSITE or ALL)"
            )),
        }
    }
}

/// Token groups merged when moving from one stage to the next.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MergePlan {
    pub inputs: usize,
    pub groups: Vec<Vec<usize>>,
}

impl MergePlan {
    pub fn outputs(&self) -> usize {
        self.groups.len()
    }

    /// True when the groups are pairwise disjoint.
    pub fn is_disjoint(&self) -> bool {
        let mut seen = vec![false; self.inputs];
        for &i in self.groups.iter().flatten() {
            if i >= self.inputs || std::mem::replace(&mut seen[i], true) {
                return false;
            }
        }
        true
    }

    /// Checks that every group is nonempty, in range and free of repeats,
    /// that no group appears twice, and that the groups cover every input.
    /// Groups may overlap (the `ALL` scheme shares limbs between groups).
    pub fn validate(&self) -> Result<()> {
        let mut covered = vec![false; self.inputs];
        for (gi, g) in self.groups.iter().enumerate() {
            if g.is_empty() {
                return Err(config_err!("merge group {gi} is empty"));
            }
            let mut sorted = g.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != g.len() {
                return Err(config_err!("merge group {gi} repeats a token: {g:?}"));
            }
            for &i in g {
                if i >= self.inputs {
                    return Err(config_err!(
                        "merge group {gi} references token {i} of {}",
                        self.inputs
                    ));
                }
                covered[i] = true;
            }
            if self.groups[..gi].iter().any(|h| {
                let mut hs = h.clone();
                hs.sort_unstable();
                hs == sorted
            }) {
                return Err(config_err!("merge group {gi} duplicates an earlier group"));
            }
        }
        if let Some(missing) = covered.iter().position(|c| !c) {
            return Err(config_err!("merge plan does not cover token {missing}"));
        }
        Ok(())
    }
}

/// Number of tokens entering stage `stage` (1-based) under `scheme`.
pub fn stage_tokens(stage: usize, scheme: PartitionScheme) -> usize {
    match stage {
        1 => NUM_JOINTS,
        2 => Limb::ALL.len(),
        3 => scheme.stage3_groups().len(),
        _ => 1,
    }
}

/// Merge plan taking the tokens of `stage` to those of `stage + 1`.
/// Stage 4 has no successor and yields the identity on its single token.
pub fn merge_plan(stage: usize, scheme: PartitionScheme) -> Result<MergePlan> {
    let plan = match stage {
        1 => MergePlan {
            inputs: NUM_JOINTS,
            groups: Limb::ALL.iter().map(|l| l.joints().to_vec()).collect(),
        },
        2 => MergePlan {
            inputs: Limb::ALL.len(),
            groups: scheme
                .stage3_groups()
                .into_iter()
                .map(|g| g.into_iter().map(Limb::token).collect())
                .collect(),
        },
        3 => {
            let n = stage_tokens(3, scheme);
            MergePlan {
                inputs: n,
                groups: vec![(0..n).collect()],
            }
        }
        4 => MergePlan {
            inputs: 1,
            groups: vec![vec![0]],
        },
        _ => return Err(config_err!("stage must be in 1..=4, got {stage}")),
    };
    Ok(plan)
}

/// One 18-joint skeleton in normalized image units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub joints: [[f64; 2]; NUM_JOINTS],
}

impl Pose {
    pub fn zeros() -> Self {
        Self {
            joints: [[0.0; 2]; NUM_JOINTS],
        }
    }

    /// The 17 estimator-native joints (the nose copy dropped).
    pub fn raw(&self) -> [[f64; 2]; NUM_RAW_JOINTS] {
        let mut out = [[0.0; 2]; NUM_RAW_JOINTS];
        out.copy_from_slice(&self.joints[..NUM_RAW_JOINTS]);
        out
    }
}

/// Builds an 18-joint pose from 17 COCO keypoints by copying the nose.
pub fn duplicate_nose(raw: &[[f64; 2]]) -> Result<Pose> {
    if raw.len() != NUM_RAW_JOINTS {
        return Err(Error::Input(format!(
            "expected {NUM_RAW_JOINTS} joints, got {}",
            raw.len()
        )));
    }
    let mut joints = [[0.0; 2]; NUM_JOINTS];
    joints[..NUM_RAW_JOINTS].copy_from_slice(raw);
    joints[joint::NOSE_COPY] = raw[joint::NOSE];
    Ok(Pose { joints })
}

#[derive(
    Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize,
)]
pub enum Condition {
    /// Normal walking.
    #[default]
    NM,
    /// Carrying a bag.
    BG,
    /// Wearing a coat.
    CL,
    #[serde(rename = "OTHER")]
    Other,
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Condition::NM => "NM",
            Condition::BG => "BG",
            Condition::CL => "CL",
            Condition::Other => "OTHER",
        })
    }
}

impl FromStr for Condition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "NM" => Ok(Condition::NM),
            "BG" => Ok(Condition::BG),
            "CL" => Ok(Condition::CL),
            "OTHER" => Ok(Condition::Other),
            _ => Err(Error::Input(format!("unknown walking condition {s:?}"))),
        }
    }
}

/// A labeled walking sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct GaitSequence {
    pub key: String,
    pub subject_id: String,
    pub condition: Condition,
    /// Camera angle in degrees.
    pub view: i32,
    pub session: u32,
    pub frames: Vec<Pose>,
}

impl GaitSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Divides both coordinates of every joint by the frame width.
pub fn normalize_sequence(seq: &GaitSequence, frame_width: f64) -> Result<GaitSequence> {
    if !(frame_width > 0.0) || !frame_width.is_finite() {
        return Err(Error::Input(format!(
            "frame width must be positive, got {frame_width}"
        )));
    }
    let mut out = seq.clone();
    for pose in &mut out.frames {
        for j in &mut pose.joints {
            j[0] /= frame_width;
            j[1] /= frame_width;
        }
    }
    Ok(out)
}

/// Keeps sequences with at least `min_frames` frames.
pub fn filter_min_length(seqs: Vec<GaitSequence>, min_frames: usize) -> Vec<GaitSequence> {
    seqs.into_iter().filter(|s| s.len() >= min_frames).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WindowMode {
    /// Uniformly random contiguous crop.
    TrainRandom,
    /// The first `length` frames.
    EvalHead,
}

/// Fixed-length contiguous window of a sequence.
pub fn sample_window<'a, R: Rng + ?Sized>(
    seq: &'a GaitSequence,
    length: usize,
    mode: WindowMode,
    rng: &mut R,
) -> Result<&'a [Pose]> {
    if length == 0 || seq.len() < length {
        return Err(Error::Input(format!(
            "sequence {} has {} frames, window needs {length}",
            seq.key,
            seq.len()
        )));
    }
    let start = match mode {
        WindowMode::EvalHead => 0,
        WindowMode::TrainRandom => rng.gen_range(0..=seq.len() - length),
    };
    Ok(&seq.frames[start..start + length])
}
