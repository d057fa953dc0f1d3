//! Parameter storage and small building blocks shared by every layer.
//!
//! candle's CPU random generator cannot be seeded, so parameters are created
//! here from a ChaCha stream keyed by (run seed, parameter path). The value of
//! a parameter therefore depends only on its name and the seed, never on
//! construction order.

use std::collections::BTreeMap;
use std::fmt::Display;

use candle_core::{DType, Device, Result, Tensor, Var, D};
use candle_nn::{Embedding, Linear, Module, VarMap};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// U(-bound, bound)
    Uniform(f64),
    /// N(0, std²)
    Normal(f64),
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

pub struct ParamStore {
    varmap: VarMap,
    seed: u64,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType, device: Device) -> Self {
        ParamStore {
            varmap: VarMap::new(),
            seed,
            dtype,
            device,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn root(&self) -> Scope<'_> {
        Scope {
            store: self,
            prefix: String::new(),
        }
    }

    fn initial_values(&self, path: &str, n: usize, init: Init) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(path));
        match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Uniform(b) => (0..n).map(|_| rng.random_range(-b..=b)).collect(),
            Init::Normal(std) => {
                let dist = Normal::new(0.0, std).expect("finite std");
                (0..n).map(|_| dist.sample(&mut rng)).collect()
            }
        }
    }

    /// Returns the parameter at `path`, creating it on first use.
    pub fn get(&self, path: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let mut data = self.varmap.data().lock().unwrap();
        if let Some(var) = data.get(path) {
            if var.dims() != shape {
                candle_core::bail!(
                    "parameter {path} exists with shape {:?}, requested {shape:?}",
                    var.dims()
                );
            }
            return Ok(var.as_tensor().clone());
        }
        let n = shape.iter().product();
        let values = self.initial_values(path, n, init);
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        data.insert(path.to_owned(), var);
        Ok(out)
    }

    /// All parameters sorted by name.
    pub fn vars(&self) -> Vec<(String, Var)> {
        let data = self.varmap.data().lock().unwrap();
        let mut out: Vec<_> = data.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    pub fn tensors(&self) -> BTreeMap<String, Tensor> {
        self.vars()
            .into_iter()
            .map(|(k, v)| (k, v.as_tensor().clone()))
            .collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.vars().iter().map(|(_, v)| v.elem_count()).sum()
    }

    /// Overwrites an existing parameter in place.
    pub fn assign(&self, path: &str, value: &Tensor) -> Result<()> {
        let data = self.varmap.data().lock().unwrap();
        let var = data
            .get(path)
            .ok_or_else(|| candle_core::Error::Msg(format!("no parameter named {path}")))?;
        if var.dims() != value.dims() {
            candle_core::bail!(
                "shape mismatch for {path}: have {:?}, got {:?}",
                var.dims(),
                value.dims()
            );
        }
        var.set(&value.to_dtype(self.dtype)?.to_device(&self.device)?)
    }
}

/// A path prefix into a [`ParamStore`].
#[derive(Clone)]
pub struct Scope<'a> {
    store: &'a ParamStore,
    prefix: String,
}

impl<'a> Scope<'a> {
    pub fn pp(&self, name: impl Display) -> Scope<'a> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        Scope {
            store: self.store,
            prefix,
        }
    }

    pub fn get(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        self.store.get(&self.pp(name).prefix, shape, init)
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    pub fn device(&self) -> &Device {
        &self.store.device
    }
}

/// Affine layer with the PyTorch default U(±1/√in) initialization; weight is
/// stored `(out, in)`.
pub fn linear(scope: &Scope, input: usize, output: usize, bias: bool) -> Result<Linear> {
    let bound = 1.0 / (input as f64).sqrt();
    linear_with(scope, input, output, bias, Init::Uniform(bound))
}

pub fn linear_with(
    scope: &Scope,
    input: usize,
    output: usize,
    bias: bool,
    init: Init,
) -> Result<Linear> {
    let w = scope.get("weight", &[output, input], init)?;
    let b = if bias {
        let b_init = match init {
            Init::Normal(_) => Init::Zeros,
            other => other,
        };
        Some(scope.get("bias", &[output], b_init)?)
    } else {
        None
    };
    Ok(Linear::new(w, b))
}

pub fn embedding(scope: &Scope, rows: usize, dim: usize, init: Init) -> Result<Embedding> {
    Ok(Embedding::new(scope.get("weight", &[rows, dim], init)?, dim))
}

/// Layer normalization over the last dimension, built from differentiable
/// primitives.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(scope: &Scope, dim: usize, eps: f64) -> Result<Self> {
        Ok(LayerNorm {
            weight: scope.get("weight", &[dim], Init::Ones)?,
            bias: scope.get("bias", &[dim], Init::Zeros)?,
            eps,
        })
    }
}

impl Module for LayerNorm {
    fn forward(&self, xs: &Tensor) -> Result<Tensor> {
        let mean = xs.mean_keepdim(D::Minus1)?;
        let centered = xs.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        normed.broadcast_mul(&self.weight)?.broadcast_add(&self.bias)
    }
}

/// Two affine layers with a ReLU in between.
#[derive(Debug, Clone)]
pub struct Mlp {
    hidden: Linear,
    out: Linear,
}

impl Mlp {
    pub fn new(scope: &Scope, input: usize, hidden: usize, output: usize) -> Result<Self> {
        Ok(Mlp {
            hidden: linear(&scope.pp("hidden"), input, hidden, true)?,
            out: linear(&scope.pp("out"), hidden, output, true)?,
        })
    }
}

impl Module for Mlp {
    fn forward(&self, xs: &Tensor) -> Result<Tensor> {
        self.out.forward(&self.hidden.forward(xs)?.relu()?)
    }
}

const MASKED_LOGIT: f64 = -1e9;

/// Softmax over the last dimension restricted to positions where `mask` is 1.
/// `mask` must broadcast against `logits`; masked positions come out exactly
/// zero and fully masked rows are all zero.
pub fn masked_softmax(logits: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let penalty = ((mask.ones_like()? - mask)? * MASKED_LOGIT)?;
    let p = candle_nn::ops::softmax(&logits.broadcast_add(&penalty)?, D::Minus1)?;
    p.broadcast_mul(mask)
}

/// Log-softmax over the last dimension restricted to `mask`; masked entries
/// are meaningless and must be multiplied away by the caller.
pub fn masked_log_softmax(logits: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let penalty = ((mask.ones_like()? - mask)? * MASKED_LOGIT)?;
    candle_nn::ops::log_softmax(&logits.broadcast_add(&penalty)?, D::Minus1)
}

/// Inverted dropout driven by an explicit RNG so runs are reproducible.
pub fn dropout(xs: &Tensor, p: f64, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    if p <= 0.0 {
        return Ok(xs.clone());
    }
    let keep = 1.0 - p;
    let mask: Vec<f64> = (0..xs.elem_count())
        .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
        .collect();
    let mask = Tensor::from_vec(mask, xs.shape(), xs.device())?.to_dtype(xs.dtype())?;
    xs.mul(&mask)
}

/// Row-wise cross entropy summed over rows. `logits` is `(rows, classes)`.
pub fn cross_entropy_sum(logits: &Tensor, targets: &[u32]) -> Result<Tensor> {
    let targets = Tensor::new(targets, logits.device())?;
    let log_p = candle_nn::ops::log_softmax(logits, D::Minus1)?;
    log_p
        .gather(&targets.unsqueeze(1)?, 1)?
        .sum_all()?
        .neg()
}

/// Per-forward state: train/eval switch, dropout randomness and a record of
/// which pipeline stages ran.
pub struct ForwardCtx {
    pub train: bool,
    pub rng: ChaCha8Rng,
    trace: Vec<&'static str>,
}

impl ForwardCtx {
    pub fn train(seed: u64) -> Self {
        ForwardCtx {
            train: true,
            rng: ChaCha8Rng::seed_from_u64(seed),
            trace: Vec::new(),
        }
    }

    pub fn eval() -> Self {
        ForwardCtx {
            train: false,
            rng: ChaCha8Rng::seed_from_u64(0),
            trace: Vec::new(),
        }
    }

    pub fn record(&mut self, stage: &'static str) {
        self.trace.push(stage);
    }

    /// Stage names in call order.
    pub fn trace(&self) -> &[&'static str] {
        &self.trace
    }

    pub fn calls(&self, stage: &str) -> usize {
        self.trace.iter().filter(|s| **s == stage).count()
    }

    pub fn dropout(&mut self, xs: &Tensor, p: f64) -> Result<Tensor> {
        if self.train {
            dropout(xs, p, &mut self.rng)
        } else {
            Ok(xs.clone())
        }
    }
}
