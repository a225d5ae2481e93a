//! Named parameters and the transformer layers built on the tape.

use std::cell::RefCell;
use std::collections::HashMap;
use std::ops::Index;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{config_err, shape_err, Error, Result};
use crate::tensor::{Element, Tensor};

/// A named, trainable tensor.
#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of uniquely named parameters.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(config_err!("duplicate parameter name {name:?}"));
        }
        self.by_name.insert(name.clone(), self.params.len());
        self.params.push(Parameter {
            name,
            value: value.with_requires_grad(false),
            grad: None,
        });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter<T>> {
        self.by_name.get(name).map(|&i| &self.params[i])
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Parameter<T>> {
        self.by_name.get(name).map(|&i| &mut self.params[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Places every parameter on `tape`; gradients are tracked iff `trainable`.
    pub fn bind(&self, tape: &Tape<T>, trainable: bool) -> Bound<T> {
        let vars = self
            .params
            .iter()
            .map(|p| tape.leaf(p.value.clone().with_requires_grad(trainable)))
            .collect();
        Bound { vars }
    }

    /// Uses caller-owned tape variables as the parameters, in store order.
    pub fn bind_vars(&self, vars: &[Var<T>]) -> Result<Bound<T>> {
        if vars.len() != self.params.len() {
            return Err(shape_err!(
                "expected {} parameter variables, got {}",
                self.params.len(),
                vars.len()
            ));
        }
        for (p, v) in self.params.iter().zip(vars) {
            if p.value.shape() != v.shape().as_slice() {
                return Err(shape_err!(
                    "parameter {:?} has shape {:?}, got {:?}",
                    p.name,
                    p.value.shape(),
                    v.shape()
                ));
            }
        }
        Ok(Bound {
            vars: vars.to_vec(),
        })
    }

    /// Moves the gradients of a bound pass into the parameters.
    pub fn absorb_grads(&mut self, bound: &Bound<T>, grads: &mut Gradients<T>) {
        for (p, v) in self.params.iter_mut().zip(&bound.vars) {
            p.grad = grads.take(v);
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }
}

/// Parameters of a [`ParamStore`] placed on a tape.
pub struct Bound<T: Element> {
    vars: Vec<Var<T>>,
}

impl<T: Element> Index<ParamId> for Bound<T> {
    type Output = Var<T>;

    fn index(&self, id: ParamId) -> &Var<T> {
        &self.vars[id.0]
    }
}

/// Forward-pass options that differ between training and inference.
pub struct ForwardCtx {
    dropout: f64,
    rng: Option<RefCell<ChaCha8Rng>>,
}

impl ForwardCtx {
    pub fn eval() -> Self {
        Self {
            dropout: 0.0,
            rng: None,
        }
    }

    pub fn train(dropout: f64, seed: u64) -> Self {
        Self {
            dropout,
            rng: Some(RefCell::new(ChaCha8Rng::seed_from_u64(seed))),
        }
    }

    /// Inverted dropout; the identity at inference or rate 0.
    pub fn dropout<T: Element>(&self, x: &Var<T>) -> Result<Var<T>> {
        let Some(rng) = &self.rng else {
            return Ok(x.clone());
        };
        if self.dropout <= 0.0 {
            return Ok(x.clone());
        }
        let keep = 1.0 - self.dropout;
        let scale = T::lit(1.0 / keep);
        let shape = x.shape();
        let mut rng = rng.borrow_mut();
        let mask = Tensor::from_fn(shape, |_| {
            if rng.gen::<f64>() < keep {
                scale
            } else {
                T::zero()
            }
        });
        x.mul(&x.tape().constant(mask))
    }
}

pub(crate) fn xavier_uniform<T: Element>(
    fan_in: usize,
    fan_out: usize,
    rng: &mut impl Rng,
) -> Tensor<T> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new_inclusive(-limit, limit);
    Tensor::from_fn(vec![fan_in, fan_out], |_| T::lit(dist.sample(rng)))
}

pub(crate) fn normal<T: Element>(shape: Vec<usize>, std: f64, rng: &mut impl Rng) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("positive std");
    Tensor::from_fn(shape, |_| T::lit(dist.sample(rng)))
}

/// `y = x W + b` over the last axis.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let weight = store.register(
            format!("{name}.weight"),
            xavier_uniform(in_dim, out_dim, rng),
        )?;
        let bias = if bias {
            Some(store.register(format!("{name}.bias"), Tensor::zeros(vec![out_dim]))?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward<T: Element>(&self, p: &Bound<T>, x: &Var<T>) -> Result<Var<T>> {
        x.linear(&p[self.weight], self.bias.map(|b| &p[b]))
    }

    pub fn num_scalars(&self) -> usize {
        self.in_dim * self.out_dim + if self.bias.is_some() { self.out_dim } else { 0 }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub const DEFAULT_EPS: f64 = 1e-5;

    pub fn new<T: Element>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gain: store.register(format!("{name}.gain"), Tensor::ones(vec![dim]))?,
            bias: store.register(format!("{name}.bias"), Tensor::zeros(vec![dim]))?,
            eps: Self::DEFAULT_EPS,
        })
    }

    pub fn forward<T: Element>(&self, p: &Bound<T>, x: &Var<T>) -> Result<Var<T>> {
        x.layer_norm(&p[self.gain], &p[self.bias], self.eps)
    }
}

/// Projection weights of one attention layer, each `C×C` with a `C` bias.
pub struct AttentionWeights<T: Element> {
    pub wq: Var<T>,
    pub bq: Var<T>,
    pub wk: Var<T>,
    pub bk: Var<T>,
    pub wv: Var<T>,
    pub bv: Var<T>,
    pub wo: Var<T>,
    pub bo: Var<T>,
}

/// Multi-head scaled dot-product self-attention over `tokens: [b, t, C]`.
///
/// Each head attends with `softmax(Q K^T / sqrt(C/h)) V`; head outputs are
/// concatenated and passed through the output projection.
pub fn multi_head_attention<T: Element>(
    tokens: &Var<T>,
    w: &AttentionWeights<T>,
    heads: usize,
) -> Result<Var<T>> {
    let shape = tokens.shape();
    let [b, t, c] = shape[..] else {
        return Err(Error::Shape(format!(
            "attention expects [b, t, C] tokens, got {shape:?}"
        )));
    };
    if heads == 0 || c % heads != 0 {
        return Err(config_err!("width {c} is not divisible by {heads} heads"));
    }
    let d = c / heads;
    let split =
        |x: Var<T>| -> Result<Var<T>> { x.reshape(vec![b, t, heads, d])?.permute(&[0, 2, 1, 3]) };
    let q = split(tokens.linear(&w.wq, Some(&w.bq))?)?.scale(1.0 / (d as f64).sqrt());
    let k = split(tokens.linear(&w.wk, Some(&w.bk))?)?;
    let v = split(tokens.linear(&w.wv, Some(&w.bv))?)?;
    let attn = q.matmul_t(&k)?.softmax(3)?;
    let ctx = attn
        .matmul(&v)?
        .permute(&[0, 2, 1, 3])?
        .reshape(vec![b, t, c])?;
    ctx.linear(&w.wo, Some(&w.bo))
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(config_err!(
                "{name}: width {dim} is not divisible by {heads} heads"
            ));
        }
        Ok(Self {
            q: Linear::new(store, &format!("{name}.wq"), dim, dim, true, rng)?,
            k: Linear::new(store, &format!("{name}.wk"), dim, dim, true, rng)?,
            v: Linear::new(store, &format!("{name}.wv"), dim, dim, true, rng)?,
            o: Linear::new(store, &format!("{name}.wo"), dim, dim, true, rng)?,
            heads,
        })
    }

    pub fn weights<T: Element>(&self, p: &Bound<T>) -> AttentionWeights<T> {
        let pair = |l: &Linear| {
            (
                p[l.weight].clone(),
                p[l.bias.expect("attention projections have biases")].clone(),
            )
        };
        let (wq, bq) = pair(&self.q);
        let (wk, bk) = pair(&self.k);
        let (wv, bv) = pair(&self.v);
        let (wo, bo) = pair(&self.o);
        AttentionWeights {
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wo,
            bo,
        }
    }

    pub fn forward<T: Element>(&self, p: &Bound<T>, x: &Var<T>) -> Result<Var<T>> {
        multi_head_attention(x, &self.weights(p), self.heads)
    }
}

/// Pre-norm transformer block: `x + MHA(LN(x))`, then `x + FFN(LN(x))`.
#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl EncoderBlock {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        ff_multiplier: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim)?,
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, heads, rng)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim)?,
            fc1: Linear::new(
                store,
                &format!("{name}.ff.fc1"),
                dim,
                ff_multiplier * dim,
                true,
                rng,
            )?,
            fc2: Linear::new(
                store,
                &format!("{name}.ff.fc2"),
                ff_multiplier * dim,
                dim,
                true,
                rng,
            )?,
        })
    }

    pub fn forward<T: Element>(
        &self,
        p: &Bound<T>,
        x: &Var<T>,
        ctx: &ForwardCtx,
    ) -> Result<Var<T>> {
        let h = self.attn.forward(p, &self.ln1.forward(p, x)?)?;
        let x = x.add(&ctx.dropout(&h)?)?;
        let h = self.fc1.forward(p, &self.ln2.forward(p, &x)?)?.gelu();
        let h = self.fc2.forward(p, &h)?;
        x.add(&ctx.dropout(&h)?)
    }
}

/// A stack of encoder blocks with a learned class token and optional
/// learned positional embeddings.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub class_token: ParamId,
    pub positions: Option<ParamId>,
    pub blocks: Vec<EncoderBlock>,
    pub final_norm: LayerNorm,
    pub dim: usize,
    pub seq_len: usize,
}

impl Encoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        seq_len: usize,
        depth: usize,
        heads: usize,
        ff_multiplier: usize,
        positional: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let class_token =
            store.register(format!("{name}.class_token"), normal(vec![dim], 0.02, rng))?;
        let positions = if positional {
            Some(store.register(
                format!("{name}.positions"),
                normal(vec![seq_len + 1, dim], 0.02, rng),
            )?)
        } else {
            None
        };
        let blocks = (0..depth)
            .map(|i| {
                EncoderBlock::new(
                    store,
                    &format!("{name}.block{i}"),
                    dim,
                    heads,
                    ff_multiplier,
                    rng,
                )
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            class_token,
            positions,
            blocks,
            final_norm: LayerNorm::new(store, &format!("{name}.norm"), dim)?,
            dim,
            seq_len,
        })
    }

    /// Encodes `seqs: [S, L, C]` and returns the token outputs `[S, L, C]`
    /// (residual stream, class token removed) and the normalized class
    /// outputs `[S, C]`.
    pub fn forward<T: Element>(
        &self,
        p: &Bound<T>,
        seqs: &Var<T>,
        ctx: &ForwardCtx,
    ) -> Result<(Var<T>, Var<T>)> {
        let shape = seqs.shape();
        let [s, l, c] = shape[..] else {
            return Err(Error::Shape(format!(
                "encoder expects [S, L, C], got {shape:?}"
            )));
        };
        if c != self.dim || l != self.seq_len {
            return Err(Error::Shape(format!(
                "encoder built for length {} width {}, got {shape:?}",
                self.seq_len, self.dim
            )));
        }
        let cls = p[self.class_token].expand(&[s, 1])?;
        let mut x = Var::concat(&[cls, seqs.clone()], 1)?;
        if let Some(pos) = self.positions {
            x = x.add(&p[pos])?;
        }
        for block in &self.blocks {
            x = block.forward(p, &x, ctx)?;
        }
        let class = self
            .final_norm
            .forward(p, &x.slice(1, 0, 1)?.reshape(vec![s, c])?)?;
        let tokens = x.slice(1, 1, l)?;
        Ok((tokens, class))
    }
}
