//! Central finite-difference verification of reverse-mode gradients.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::{GaitPT, GaitPTConfig};
use crate::nn::{multi_head_attention, AttentionWeights, ForwardCtx};
use crate::skeleton::NUM_JOINTS;
use crate::tensor::Tensor;
use crate::training::{triplet_loss_batch, Triplet};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Finite-difference step.
    pub step: f64,
    pub tolerance: f64,
    /// Check at most this many randomly chosen coordinates per input.
    pub max_coords_per_input: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-6,
            max_coords_per_input: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub coords_checked: usize,
    /// (input index, flat coordinate) of the worst mismatch.
    pub worst: Option<(usize, usize)>,
    pub pass: bool,
}

/// `|a - n| / max(1, |a|, |n|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

fn evaluate<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&Tape<f64>, &[Var<f64>]) -> Result<Var<f64>>,
{
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&tape, &vars)?;
    let v = out.value().item()?;
    Ok(v)
}

/// Compares the gradients of a scalar function of several inputs with
/// central differences `(f(x + h e) - f(x - h e)) / 2h`.
pub fn grad_check<F>(
    f: F,
    inputs: &[Tensor<f64>],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&Tape<f64>, &[Var<f64>]) -> Result<Var<f64>>,
{
    if !(opts.step > 0.0) {
        return Err(Error::Usage(format!(
            "finite-difference step must be positive, got {}",
            opts.step
        )));
    }
    let analytic: Vec<Tensor<f64>> = {
        let tape = Tape::new();
        let vars: Vec<_> = inputs
            .iter()
            .map(|t| tape.leaf(t.clone().with_requires_grad(true)))
            .collect();
        let out = f(&tape, &vars)?;
        let mut grads = out.backward()?;
        vars.iter()
            .map(|v| grads.take(v).expect("leaf gradients are always populated"))
            .collect()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        coords_checked: 0,
        worst: None,
        pass: true,
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (which, grad) in analytic.iter().enumerate() {
        let len = inputs[which].len();
        let coords: Vec<usize> = match opts.max_coords_per_input {
            Some(k) if k < len => {
                let mut c = sample(&mut rng, len, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..len).collect(),
        };
        for c in coords {
            let orig = work[which].data()[c];
            work[which].data_mut()[c] = orig + opts.step;
            let plus = evaluate(&f, &work)?;
            work[which].data_mut()[c] = orig - opts.step;
            let minus = evaluate(&f, &work)?;
            work[which].data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let err = relative_error(grad.data()[c], numeric);
            report.coords_checked += 1;
            if err > report.max_rel_err || err.is_nan() {
                report.max_rel_err = err;
                report.worst = Some((which, c));
            }
        }
    }
    report.pass = report.max_rel_err < opts.tolerance && report.max_rel_err.is_finite();
    Ok(report)
}

/// Result of checking one operation or model.
#[derive(Clone, Debug, Serialize)]
pub struct NamedReport {
    pub name: String,
    #[serde(flatten)]
    pub report: GradCheckReport,
}

type ScalarFn = Box<dyn Fn(&Tape<f64>, &[Var<f64>]) -> Result<Var<f64>>>;

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(lo..hi))
}

/// Reduces `out` to a scalar through fixed random weights so that every
/// output coordinate contributes a distinct gradient.
fn project(out: Var<f64>, seed: u64) -> Result<Var<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = uniform(&out.shape(), -1.0, 1.0, &mut rng);
    let w = out.tape().constant(w);
    Ok(out.mul(&w)?.sum())
}

/// One case per differentiable tape operation: a name, the inputs, and a
/// scalar function of them.
fn op_cases(seed: u64) -> Vec<(&'static str, Vec<Tensor<f64>>, ScalarFn)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = |shape: &[usize]| uniform(shape, -1.0, 1.0, &mut rng);
    let pos = |t: Tensor<f64>| t.map(|x| 0.5 + x.abs() * 1.5);
    macro_rules! case {
        ($name:expr, [$($input:expr),*], $f:expr) => {
            ($name, vec![$($input),*], Box::new(move |_t: &Tape<f64>, v: &[Var<f64>]| project($f(v)?, 7)) as ScalarFn)
        };
    }
    vec![
        case!("add", [r(&[3, 4]), r(&[4])], |v: &[Var<f64>]| v[0]
            .add(&v[1])),
        case!("sub", [r(&[2, 3, 4]), r(&[3, 4])], |v: &[Var<f64>]| v[0]
            .sub(&v[1])),
        case!("mul", [r(&[3, 4]), r(&[3, 4])], |v: &[Var<f64>]| v[0]
            .mul(&v[1])),
        case!("scale", [r(&[5])], |v: &[Var<f64>]| Ok(v[0].scale(-1.7))),
        case!("add_scalar", [r(&[5])], |v: &[Var<f64>]| Ok(
            v[0].add_scalar(0.3)
        )),
        case!("matmul", [r(&[2, 3, 4]), r(&[4, 5])], |v: &[Var<f64>]| v[0]
            .matmul(&v[1])),
        case!("matmul_t", [r(&[2, 3, 4]), r(&[2, 5, 4])], |v: &[Var<
            f64,
        >]| v[0]
            .matmul_t(&v[1])),
        case!(
            "linear",
            [r(&[2, 3, 4]), r(&[4, 6]), r(&[6])],
            |v: &[Var<f64>]| v[0].linear(&v[1], Some(&v[2]))
        ),
        case!("reshape", [r(&[2, 6])], |v: &[Var<f64>]| v[0]
            .reshape(vec![3, 4])),
        case!("permute", [r(&[2, 3, 4])], |v: &[Var<f64>]| v[0]
            .permute(&[2, 0, 1])),
        case!("transpose", [r(&[2, 3, 4])], |v: &[Var<f64>]| v[0]
            .transpose(1, 2)),
        case!("concat", [r(&[2, 3]), r(&[2, 2])], |v: &[Var<f64>]| {
            Var::concat(&v[..2], 1)
        }),
        case!("slice", [r(&[4, 5])], |v: &[Var<f64>]| v[0].slice(1, 1, 3)),
        case!("gather", [r(&[4, 3])], |v: &[Var<f64>]| v[0]
            .gather(0, &[3, 0, 0, 2])),
        case!("expand", [r(&[3])], |v: &[Var<f64>]| v[0].expand(&[2, 2])),
        case!("softmax", [r(&[2, 5])], |v: &[Var<f64>]| v[0].softmax(1)),
        case!(
            "layer_norm",
            [r(&[3, 6]), r(&[6]), r(&[6])],
            |v: &[Var<f64>]| v[0].layer_norm(&v[1], &v[2], 1e-5)
        ),
        case!("gelu", [r(&[8])], |v: &[Var<f64>]| Ok(v[0].gelu())),
        case!("relu", [r(&[8])], |v: &[Var<f64>]| Ok(v[0].relu())),
        case!("sqrt", [pos(r(&[6]))], |v: &[Var<f64>]| Ok(v[0].sqrt())),
        case!("ln", [pos(r(&[6]))], |v: &[Var<f64>]| Ok(v[0].ln())),
        case!("exp", [r(&[6])], |v: &[Var<f64>]| Ok(v[0].exp())),
        case!("sum", [r(&[2, 3])], |v: &[Var<f64>]| Ok(v[0].sum())),
        case!("mean", [r(&[2, 3])], |v: &[Var<f64>]| Ok(v[0].mean())),
        case!("sum_axis", [r(&[2, 3, 4])], |v: &[Var<f64>]| v[0]
            .sum_axis(1)),
        case!("mean_axis", [r(&[2, 3, 4])], |v: &[Var<f64>]| v[0]
            .mean_axis(2)),
        case!("l2_normalize", [r(&[3, 4])], |v: &[Var<f64>]| v[0]
            .l2_normalize(1e-12)),
        case!(
            "multi_head_attention",
            [
                r(&[2, 3, 4]),
                r(&[4, 4]),
                r(&[4]),
                r(&[4, 4]),
                r(&[4]),
                r(&[4, 4]),
                r(&[4]),
                r(&[4, 4]),
                r(&[4])
            ],
            |v: &[Var<f64>]| {
                let w = AttentionWeights {
                    wq: v[1].clone(),
                    bq: v[2].clone(),
                    wk: v[3].clone(),
                    bk: v[4].clone(),
                    wv: v[5].clone(),
                    bv: v[6].clone(),
                    wo: v[7].clone(),
                    bo: v[8].clone(),
                };
                multi_head_attention(&v[0], &w, 2)
            }
        ),
    ]
}

/// Checks every differentiable tape operation on small random inputs.
pub fn op_suite(opts: &GradCheckOptions) -> Result<Vec<NamedReport>> {
    op_cases(opts.seed)
        .into_iter()
        .map(|(name, inputs, f)| {
            Ok(NamedReport {
                name: name.to_string(),
                report: grad_check(f, &inputs, opts)?,
            })
        })
        .collect()
}

/// Checks a whole model end to end: the triplet loss of three random
/// windows, differentiated with respect to the input poses and every
/// parameter tensor.
pub fn model_check(
    config: &GaitPTConfig,
    seed: u64,
    opts: &GradCheckOptions,
) -> Result<NamedReport> {
    let model: GaitPT<f64> = GaitPT::new(config.clone(), seed)?;
    let n = config.sequence_length;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut inputs = vec![uniform(&[3, n, NUM_JOINTS, 2], 0.0, 1.0, &mut rng)];
    inputs.extend(model.params().iter().map(|p| p.value.clone()));
    let f = |_: &Tape<f64>, v: &[Var<f64>]| -> Result<Var<f64>> {
        let bound = model.params().bind_vars(&v[1..])?;
        let emb = model
            .forward_batch(&bound, &v[0], &ForwardCtx::eval())?
            .embedding;
        let triplet = [Triplet {
            anchor: 0,
            positive: 1,
            negative: 2,
        }];
        // A wide margin keeps the hinge active, so the check sees the
        // gradient of the whole path.
        Ok(triplet_loss_batch(&emb, &triplet, 4.0, true)?.0)
    };
    Ok(NamedReport {
        name: "gaitpt".into(),
        report: grad_check(f, &inputs, opts)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact_to_rounding() {
        let x = Tensor::new(vec![4], vec![0.3, -1.2, 2.5, 0.0]).unwrap();
        let report = grad_check(
            |_, v| Ok(v[0].mul(&v[0])?.sum()),
            &[x],
            &GradCheckOptions {
                tolerance: 1e-9,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(report.pass, "{report:?}");
        assert!(report.max_rel_err < 1e-9);
    }

    #[test]
    fn zero_tolerance_always_fails() {
        let x = Tensor::new(vec![2], vec![0.3, -1.2]).unwrap();
        let report = grad_check(
            |_, v| Ok(v[0].exp().sum()),
            &[x],
            &GradCheckOptions {
                tolerance: 0.0,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(!report.pass);
    }
}
