//! The four-stage pyramid: joint, limb, limb-group and full-body levels,
//! each with spatial and temporal encoders, joined by joint-merging
//! projections. Class outputs of every encoder are concatenated and
//! projected to the final L2-normalized embedding.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{config_err, Error, Result};
use crate::nn::{Bound, Encoder, ForwardCtx, Linear, ParamStore};
use crate::skeleton::{merge_plan, stage_tokens, MergePlan, PartitionScheme, Pose, NUM_JOINTS};
use crate::tensor::{Element, Tensor};

pub const NUM_STAGES: usize = 4;

/// Small constant added under the square root of the output normalization.
const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub index: usize,
    pub dim: usize,
    pub blocks: usize,
    pub heads: usize,
    pub has_spatial: bool,
    pub active: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GaitPTConfig {
    pub stages: Vec<StageConfig>,
    pub scheme: PartitionScheme,
    pub sequence_length: usize,
    pub output_dim: usize,
    pub ff_multiplier: usize,
    pub spatial_positions: bool,
    pub temporal_positions: bool,
    pub dropout: f64,
}

impl Default for GaitPTConfig {
    fn default() -> Self {
        Self::with_widths([32, 64, 128, 256], 3, 4, 30, 256)
    }
}

impl GaitPTConfig {
    /// A config with the given stage widths; stage 4 is temporal-only.
    pub fn with_widths(
        dims: [usize; NUM_STAGES],
        blocks: usize,
        heads: usize,
        sequence_length: usize,
        output_dim: usize,
    ) -> Self {
        let stages = dims
            .iter()
            .enumerate()
            .map(|(i, &dim)| StageConfig {
                index: i + 1,
                dim,
                blocks,
                heads,
                has_spatial: i + 1 < NUM_STAGES,
                active: true,
            })
            .collect();
        Self {
            stages,
            scheme: PartitionScheme::Hul,
            sequence_length,
            output_dim,
            ff_multiplier: 4,
            spatial_positions: true,
            temporal_positions: true,
            dropout: 0.0,
        }
    }

    /// Dims 8/16/32/64, one block, two heads, four frames.
    pub fn tiny() -> Self {
        Self::with_widths([8, 16, 32, 64], 1, 2, 4, 16)
    }

    pub fn dims(&self) -> Vec<usize> {
        self.stages.iter().map(|s| s.dim).collect()
    }

    pub fn active_stages(&self) -> Vec<usize> {
        self.stages
            .iter()
            .filter(|s| s.active)
            .map(|s| s.index)
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.len() != NUM_STAGES {
            return Err(config_err!(
                "expected {NUM_STAGES} stages, got {}",
                self.stages.len()
            ));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.index != i + 1 {
                return Err(config_err!(
                    "stage {} listed at position {}",
                    s.index,
                    i + 1
                ));
            }
            if s.dim == 0 || s.heads == 0 || s.dim % s.heads != 0 {
                return Err(config_err!(
                    "stage {}: width {} must be a positive multiple of {} heads",
                    s.index,
                    s.dim,
                    s.heads
                ));
            }
            if s.index == NUM_STAGES && s.has_spatial {
                return Err(config_err!(
                    "stage 4 operates on a single token and has no spatial encoder"
                ));
            }
        }
        if !self.stages.iter().any(|s| s.active) {
            return Err(config_err!("at least one stage must be active"));
        }
        if self.output_dim == 0 || self.sequence_length == 0 || self.ff_multiplier == 0 {
            return Err(config_err!(
                "output_dim, sequence_length and ff_multiplier must be positive"
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(config_err!(
                "dropout must lie in [0, 1), got {}",
                self.dropout
            ));
        }
        Ok(())
    }
}

/// Returns `config` with only the listed stages keeping their encoders.
/// Merges between stages are kept so later stages still see their own
/// token granularity and width.
pub fn with_stages(config: &GaitPTConfig, active: &[usize]) -> Result<GaitPTConfig> {
    if active.is_empty() {
        return Err(config_err!("stage subset must be nonempty"));
    }
    if let Some(bad) = active.iter().find(|&&s| !(1..=NUM_STAGES).contains(&s)) {
        return Err(config_err!("stage {bad} is not in 1..=4"));
    }
    let mut out = config.clone();
    for s in &mut out.stages {
        s.active = active.contains(&s.index);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    Spatial,
    Temporal,
}

/// Token count and width observed after each stage of a forward pass.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct StageTrace {
    pub stage: usize,
    pub tokens: usize,
    pub dim: usize,
}

pub struct ForwardOutput<T: Element> {
    /// `[B, output_dim]`, unit rows.
    pub embedding: Var<T>,
    pub trace: Vec<StageTrace>,
    /// Which encoder produced each concatenated class vector, in order.
    pub class_sources: Vec<(usize, EncoderKind)>,
}

/// Concatenates the member tokens of each group and projects them.
#[derive(Clone, Debug)]
pub struct JointMerge {
    pub plan: MergePlan,
    pub projections: Vec<Linear>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl JointMerge {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        plan: MergePlan,
        in_dim: usize,
        out_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        plan.validate()?;
        let projections = plan
            .groups
            .iter()
            .enumerate()
            .map(|(i, g)| {
                Linear::new(
                    store,
                    &format!("{name}.group{i}"),
                    g.len() * in_dim,
                    out_dim,
                    true,
                    rng,
                )
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            plan,
            projections,
            in_dim,
            out_dim,
        })
    }

    /// `[B, n, t_in, C_in] -> [B, n, t_out, C_out]`
    pub fn forward<T: Element>(&self, p: &Bound<T>, feat: &Var<T>) -> Result<Var<T>> {
        let shape = feat.shape();
        let [b, n, t, c] = shape[..] else {
            return Err(Error::Shape(format!(
                "joint merge expects [B, n, t, C], got {shape:?}"
            )));
        };
        if t != self.plan.inputs || c != self.in_dim {
            return Err(Error::Shape(format!(
                "joint merge built for {} tokens of width {}, got {shape:?}",
                self.plan.inputs, self.in_dim
            )));
        }
        let parts = self
            .plan
            .groups
            .iter()
            .zip(&self.projections)
            .map(|(group, proj)| {
                let members = feat
                    .gather(2, group)?
                    .reshape(vec![b, n, group.len() * c])?;
                proj.forward(p, &members)?
                    .reshape(vec![b, n, 1, self.out_dim])
            })
            .collect::<Result<Vec<_>>>()?;
        if parts.len() == 1 {
            return Ok(parts.into_iter().next().unwrap());
        }
        Var::concat(&parts, 2)
    }
}

#[derive(Clone, Debug)]
struct StageModules {
    merge: Option<JointMerge>,
    spatial: Option<Encoder>,
    temporal: Option<Encoder>,
}

/// The gait pyramid transformer.
#[derive(Clone, Debug)]
pub struct GaitPT<T: Element> {
    config: GaitPTConfig,
    params: ParamStore<T>,
    input_proj: Linear,
    stages: Vec<StageModules>,
    head: Linear,
}

impl<T: Element> GaitPT<T> {
    pub fn new(config: GaitPTConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let n = config.sequence_length;
        let dims = config.dims();
        let input_proj = Linear::new(&mut store, "input_proj", 2, dims[0], true, &mut rng)?;

        let mut stages = Vec::with_capacity(NUM_STAGES);
        let mut head_in = 0;
        for sc in &config.stages {
            let s = sc.index;
            let name = format!("stage{s}");
            let merge = if s > 1 {
                Some(JointMerge::new(
                    &mut store,
                    &format!("{name}.merge"),
                    merge_plan(s - 1, config.scheme)?,
                    dims[s - 2],
                    sc.dim,
                    &mut rng,
                )?)
            } else {
                None
            };
            let tokens = stage_tokens(s, config.scheme);
            let encoder = |store: &mut ParamStore<T>,
                           rng: &mut ChaCha8Rng,
                           kind: &str,
                           len: usize,
                           pos: bool| {
                Encoder::new(
                    store,
                    &format!("{name}.{kind}"),
                    sc.dim,
                    len,
                    sc.blocks,
                    sc.heads,
                    config.ff_multiplier,
                    pos,
                    rng,
                )
            };
            let spatial = if sc.active && sc.has_spatial {
                head_in += sc.dim;
                Some(encoder(
                    &mut store,
                    &mut rng,
                    "spatial",
                    tokens,
                    config.spatial_positions,
                )?)
            } else {
                None
            };
            let temporal = if sc.active {
                head_in += sc.dim;
                Some(encoder(
                    &mut store,
                    &mut rng,
                    "temporal",
                    n,
                    config.temporal_positions,
                )?)
            } else {
                None
            };
            stages.push(StageModules {
                merge,
                spatial,
                temporal,
            });
        }
        let head = Linear::new(
            &mut store,
            "head",
            head_in,
            config.output_dim,
            true,
            &mut rng,
        )?;
        Ok(Self {
            config,
            params: store,
            input_proj,
            stages,
            head,
        })
    }

    pub fn config(&self) -> &GaitPTConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Exact number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn joint_merge_module(&self, stage: usize) -> Option<&JointMerge> {
        self.stages.get(stage.checked_sub(1)?)?.merge.as_ref()
    }

    fn stage(&self, stage: usize) -> Result<&StageModules> {
        stage
            .checked_sub(1)
            .and_then(|i| self.stages.get(i))
            .ok_or_else(|| config_err!("stage must be in 1..=4, got {stage}"))
    }

    /// Spatial encoder of `stage` over `feat: [B, n, t, C]`: each frame is
    /// a separate token sequence. Returns the token outputs and the class
    /// outputs averaged over frames, `[B, C]`.
    pub fn spatial_attention_stage(
        &self,
        p: &Bound<T>,
        stage: usize,
        feat: &Var<T>,
        ctx: &ForwardCtx,
    ) -> Result<(Var<T>, Var<T>)> {
        let enc = self
            .stage(stage)?
            .spatial
            .as_ref()
            .ok_or_else(|| config_err!("stage {stage} has no spatial encoder"))?;
        let shape = feat.shape();
        let [b, n, t, c] = shape[..] else {
            return Err(Error::Shape(format!(
                "spatial stage expects [B, n, t, C], got {shape:?}"
            )));
        };
        let (tokens, class) = enc.forward(p, &feat.reshape(vec![b * n, t, c])?, ctx)?;
        let tokens = tokens.reshape(vec![b, n, t, c])?;
        let class = class.reshape(vec![b, n, c])?.mean_axis(1)?;
        Ok((tokens, class))
    }

    /// Temporal encoder of `stage` over `feat: [B, n, t, C]`: each token
    /// index is followed through time. Returns the token outputs and the
    /// class outputs averaged over token indices, `[B, C]`.
    pub fn temporal_attention_stage(
        &self,
        p: &Bound<T>,
        stage: usize,
        feat: &Var<T>,
        ctx: &ForwardCtx,
    ) -> Result<(Var<T>, Var<T>)> {
        let enc = self
            .stage(stage)?
            .temporal
            .as_ref()
            .ok_or_else(|| config_err!("stage {stage} has no temporal encoder"))?;
        let shape = feat.shape();
        let [b, n, t, c] = shape[..] else {
            return Err(Error::Shape(format!(
                "temporal stage expects [B, n, t, C], got {shape:?}"
            )));
        };
        let streams = feat.permute(&[0, 2, 1, 3])?.reshape(vec![b * t, n, c])?;
        let (tokens, class) = enc.forward(p, &streams, ctx)?;
        let tokens = tokens.reshape(vec![b, t, n, c])?.permute(&[0, 2, 1, 3])?;
        let class = class.reshape(vec![b, t, c])?.mean_axis(1)?;
        Ok((tokens, class))
    }

    /// Batched forward pass over `input: [B, n, 18, 2]`.
    pub fn forward_batch(
        &self,
        p: &Bound<T>,
        input: &Var<T>,
        ctx: &ForwardCtx,
    ) -> Result<ForwardOutput<T>> {
        let shape = input.shape();
        let n = self.config.sequence_length;
        if shape.len() != 4 || shape[1] != n || shape[2] != NUM_JOINTS || shape[3] != 2 {
            return Err(Error::Input(format!(
                "expected input [B, {n}, {NUM_JOINTS}, 2], got {shape:?}"
            )));
        }
        let mut feat = self.input_proj.forward(p, input)?;
        let mut classes = Vec::new();
        let mut class_sources = Vec::new();
        let mut trace = Vec::with_capacity(NUM_STAGES);
        for (i, modules) in self.stages.iter().enumerate() {
            let stage = i + 1;
            if let Some(merge) = &modules.merge {
                feat = merge.forward(p, &feat)?;
            }
            if modules.spatial.is_some() {
                let (tokens, class) = self.spatial_attention_stage(p, stage, &feat, ctx)?;
                feat = tokens;
                classes.push(class);
                class_sources.push((stage, EncoderKind::Spatial));
            }
            if modules.temporal.is_some() {
                let (tokens, class) = self.temporal_attention_stage(p, stage, &feat, ctx)?;
                feat = tokens;
                classes.push(class);
                class_sources.push((stage, EncoderKind::Temporal));
            }
            let s = feat.shape();
            trace.push(StageTrace {
                stage,
                tokens: s[2],
                dim: s[3],
            });
        }
        let pooled = if classes.len() == 1 {
            classes.pop().unwrap()
        } else {
            Var::concat(&classes, 1)?
        };
        let embedding = self.head.forward(p, &pooled)?.l2_normalize(NORM_EPS)?;
        Ok(ForwardOutput {
            embedding,
            trace,
            class_sources,
        })
    }

    /// Embedding of a single window of exactly `sequence_length` poses.
    pub fn forward(&self, window: &[Pose]) -> Result<Tensor<T>> {
        let mut out = self.embed_windows(&[window], 1)?;
        let row = out.pop().expect("one window in, one embedding out");
        Tensor::from_f64(vec![row.len()], &row)
    }

    /// Embeds windows in inference mode, `batch_size` at a time.
    pub fn embed_windows(&self, windows: &[&[Pose]], batch_size: usize) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(windows.len());
        let ctx = ForwardCtx::eval();
        for chunk in windows.chunks(batch_size.max(1)) {
            let tape = Tape::new();
            let p = self.params.bind(&tape, false);
            let input = tape.constant(poses_to_tensor(chunk, self.config.sequence_length)?);
            let emb = self.forward_batch(&p, &input, &ctx)?.embedding;
            let v = emb.value();
            out.extend(
                v.data()
                    .chunks(self.config.output_dim)
                    .map(|r| r.iter().map(|x| x.as_f64()).collect()),
            );
        }
        Ok(out)
    }

    /// Replaces parameter values by name; every parameter must be supplied
    /// with its exact shape.
    pub fn load_values(&mut self, values: Vec<(String, Tensor<T>)>) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(config_err!(
                "expected {} parameters, got {}",
                self.params.len(),
                values.len()
            ));
        }
        for (name, value) in values {
            let p = self
                .params
                .by_name_mut(&name)
                .ok_or_else(|| config_err!("unknown parameter {name:?}"))?;
            if p.value.shape() != value.shape() {
                return Err(config_err!(
                    "parameter {name:?} has shape {:?}, got {:?}",
                    p.value.shape(),
                    value.shape()
                ));
            }
            p.value = value.with_requires_grad(false);
        }
        Ok(())
    }
}

/// Stacks windows into `[B, n, 18, 2]`.
pub fn poses_to_tensor<T: Element>(windows: &[&[Pose]], n: usize) -> Result<Tensor<T>> {
    if windows.is_empty() {
        return Err(Error::Input("no windows to embed".into()));
    }
    let mut data = Vec::with_capacity(windows.len() * n * NUM_JOINTS * 2);
    for w in windows {
        if w.len() != n {
            return Err(Error::Input(format!(
                "window has {} frames, model expects {n}",
                w.len()
            )));
        }
        for pose in *w {
            for j in &pose.joints {
                data.push(T::lit(j[0]));
                data.push(T::lit(j[1]));
            }
        }
    }
    Tensor::new(vec![windows.len(), n, NUM_JOINTS, 2], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_matches_pyramid_widths() {
        let c = GaitPTConfig::default();
        assert_eq!(c.dims(), vec![32, 64, 128, 256]);
        assert!(c.stages.iter().all(|s| s.blocks == 3));
        assert!(!c.stages[3].has_spatial);
        assert_eq!(c.output_dim, 256);
        assert_eq!(c.ff_multiplier, 4);
        c.validate().unwrap();
    }

    #[test]
    fn stage_subsets() {
        let c = GaitPTConfig::default();
        assert!(with_stages(&c, &[]).is_err());
        assert!(with_stages(&c, &[5]).is_err());
        assert_eq!(with_stages(&c, &[1, 2, 3, 4]).unwrap(), c);
        assert_eq!(with_stages(&c, &[4]).unwrap().active_stages(), vec![4]);
    }

    #[test]
    fn spatial_stage_4_is_a_config_error() {
        let model = GaitPT::<f64>::new(GaitPTConfig::tiny(), 0).unwrap();
        let tape = Tape::new();
        let p = model.params().bind(&tape, false);
        let feat = tape.constant(Tensor::zeros(vec![1, 4, 1, 64]));
        assert!(matches!(
            model.spatial_attention_stage(&p, 4, &feat, &ForwardCtx::eval()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn wrong_frame_count_is_an_input_error() {
        let model = GaitPT::<f64>::new(GaitPTConfig::tiny(), 0).unwrap();
        let frames = vec![Pose::zeros(); 5];
        assert!(matches!(model.forward(&frames), Err(Error::Input(_))));
    }
}
