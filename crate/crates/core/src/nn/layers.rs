use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ops::{self, BnStats, Mode};
use super::tape::{Tape, Var};
use super::Tensor;
use crate::error::{Error, Result};

pub const DEFAULT_BN_MOMENTUM: f64 = 0.9;
pub const DEFAULT_BN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerKind {
    SharedLinear,
    Linear,
    Relu,
    Batchnorm,
    MaxpoolPoints,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub in_dim: usize,
    pub out_dim: usize,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl LayerSpec {
    fn with(kind: LayerKind, in_dim: usize, out_dim: usize) -> Self {
        Self {
            kind,
            in_dim,
            out_dim,
            bn_momentum: DEFAULT_BN_MOMENTUM,
            bn_eps: DEFAULT_BN_EPS,
        }
    }

    pub fn shared_linear(in_dim: usize, out_dim: usize) -> Self {
        Self::with(LayerKind::SharedLinear, in_dim, out_dim)
    }

    pub fn linear(in_dim: usize, out_dim: usize) -> Self {
        Self::with(LayerKind::Linear, in_dim, out_dim)
    }

    pub fn relu(dim: usize) -> Self {
        Self::with(LayerKind::Relu, dim, dim)
    }

    pub fn batchnorm(dim: usize) -> Self {
        Self::with(LayerKind::Batchnorm, dim, dim)
    }

    pub fn maxpool_points(dim: usize) -> Self {
        Self::with(LayerKind::MaxpoolPoints, dim, dim)
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_dim == 0 || self.out_dim == 0 {
            return Err(Error::Config(format!(
                "{:?} layer needs positive dimensions, got {}→{}",
                self.kind, self.in_dim, self.out_dim
            )));
        }
        let shape_preserving = !matches!(self.kind, LayerKind::SharedLinear | LayerKind::Linear);
        if shape_preserving && self.in_dim != self.out_dim {
            return Err(Error::Config(format!(
                "{:?} layer cannot change width ({}→{})",
                self.kind, self.in_dim, self.out_dim
            )));
        }
        if self.kind == LayerKind::Batchnorm
            && (!(0.0..=1.0).contains(&self.bn_momentum) || self.bn_eps < 0.0)
        {
            return Err(Error::Config("batch-norm momentum must lie in [0,1] and eps ≥ 0".into()));
        }
        Ok(())
    }
}

/// One instantiated layer: its spec, trainable tensors and, for batch norm, running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub spec: LayerSpec,
    /// `[weight (in×out), bias (out)]` for linear kinds, `[gamma, beta]` for batch norm.
    pub params: Vec<Tensor>,
    pub running: Option<BnStats>,
}

impl Layer {
    /// Fan-in uniform initialization: weights and biases in `±1/sqrt(in_dim)`.
    pub fn init<R: Rng>(spec: LayerSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let (params, running) = match spec.kind {
            LayerKind::SharedLinear | LayerKind::Linear => {
                let bound = 1.0 / (spec.in_dim as f64).sqrt();
                let w = (0..spec.in_dim * spec.out_dim)
                    .map(|_| rng.random_range(-bound..bound))
                    .collect();
                let b = (0..spec.out_dim)
                    .map(|_| rng.random_range(-bound..bound))
                    .collect();
                (
                    vec![
                        Tensor::new(vec![spec.in_dim, spec.out_dim], w)?.with_grad(),
                        Tensor::new(vec![spec.out_dim], b)?.with_grad(),
                    ],
                    None,
                )
            }
            LayerKind::Batchnorm => (
                vec![
                    Tensor::filled(vec![spec.out_dim], 1.0)?.with_grad(),
                    Tensor::zeros(vec![spec.out_dim])?.with_grad(),
                ],
                Some(BnStats::new(spec.out_dim)),
            ),
            LayerKind::Relu | LayerKind::MaxpoolPoints => (Vec::new(), None),
        };
        Ok(Self {
            spec,
            params,
            running,
        })
    }

    fn param_names(&self) -> &'static [&'static str] {
        match self.spec.kind {
            LayerKind::SharedLinear | LayerKind::Linear => &["weight", "bias"],
            LayerKind::Batchnorm => &["gamma", "beta"],
            _ => &[],
        }
    }
}

/// Output of a recorded forward pass.
pub struct TapeForward {
    pub output: Var,
    /// Leaf handles in [`Sequential::params_mut`] order.
    pub params: Vec<Var>,
    /// Argmax of the max-pool layer, `B×F` row-major, if the network has one.
    pub argmax: Option<Vec<usize>>,
}

/// A feed-forward stack of [`Layer`]s.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequential {
    pub layers: Vec<Layer>,
}

impl Sequential {
    pub fn new<R: Rng>(specs: &[LayerSpec], rng: &mut R) -> Result<Self> {
        for pair in specs.windows(2) {
            if pair[0].out_dim != pair[1].in_dim {
                return Err(Error::Config(format!(
                    "layer widths do not chain: {:?} then {:?}",
                    pair[0], pair[1]
                )));
            }
        }
        let layers = specs
            .iter()
            .map(|s| Layer::init(s.clone(), rng))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec.clone()).collect()
    }

    pub fn params(&self) -> impl Iterator<Item = &Tensor> {
        self.layers.iter().flat_map(|l| l.params.iter())
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.layers.iter_mut().flat_map(|l| l.params.iter_mut())
    }

    pub fn param_count(&self) -> usize {
        self.params().map(Tensor::len).sum()
    }

    /// Every tensor that defines the network, trainable or not, with stable names.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            for (name, t) in layer.param_names().iter().zip(&layer.params) {
                out.push((format!("layer{i}.{name}"), t.detached()));
            }
            if let Some(stats) = &layer.running {
                let c = stats.channels();
                out.push((
                    format!("layer{i}.running_mean"),
                    Tensor::new(vec![c], stats.mean.clone()).expect("nonzero width"),
                ));
                out.push((
                    format!("layer{i}.running_var"),
                    Tensor::new(vec![c], stats.var.clone()).expect("nonzero width"),
                ));
            }
        }
        out
    }

    /// Rebuilds a network from specs and the tensors produced by [`Sequential::named_tensors`].
    pub fn from_named_tensors(specs: &[LayerSpec], tensors: &[(String, Tensor)]) -> Result<Self> {
        let lookup = |name: &str, len: usize| -> Result<Tensor> {
            let t = tensors
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| Error::Validation(format!("missing tensor {name}")))?;
            if t.len() != len {
                return Err(Error::Dimension {
                    op: "load tensor",
                    left: t.shape().to_vec(),
                    right: vec![len],
                });
            }
            Ok(t)
        };
        let mut layers = Vec::with_capacity(specs.len());
        for (i, spec) in specs.iter().enumerate() {
            spec.validate()?;
            let mut layer = Layer {
                spec: spec.clone(),
                params: Vec::new(),
                running: None,
            };
            match spec.kind {
                LayerKind::SharedLinear | LayerKind::Linear => {
                    layer.params = vec![
                        lookup(&format!("layer{i}.weight"), spec.in_dim * spec.out_dim)?
                            .reshape(vec![spec.in_dim, spec.out_dim])?
                            .with_grad(),
                        lookup(&format!("layer{i}.bias"), spec.out_dim)?.with_grad(),
                    ];
                }
                LayerKind::Batchnorm => {
                    let c = spec.out_dim;
                    layer.params = vec![
                        lookup(&format!("layer{i}.gamma"), c)?.with_grad(),
                        lookup(&format!("layer{i}.beta"), c)?.with_grad(),
                    ];
                    layer.running = Some(BnStats {
                        mean: lookup(&format!("layer{i}.running_mean"), c)?.into_data(),
                        var: lookup(&format!("layer{i}.running_var"), c)?.into_data(),
                    });
                }
                LayerKind::Relu | LayerKind::MaxpoolPoints => {}
            }
            layers.push(layer);
        }
        Ok(Self { layers })
    }

    /// Records a forward pass on `tape`. Train mode updates batch-norm running statistics.
    pub fn forward_tape(&mut self, tape: &mut Tape, input: Var, mode: Mode) -> Result<TapeForward> {
        let mut params = Vec::new();
        let mut argmax = None;
        let mut x = input;
        for layer in &mut self.layers {
            let vars: Vec<Var> = layer.params.iter().map(|p| tape.leaf(p.clone())).collect();
            params.extend_from_slice(&vars);
            x = match layer.spec.kind {
                LayerKind::SharedLinear | LayerKind::Linear => {
                    tape.shared_linear(x, vars[0], vars[1])?
                }
                LayerKind::Relu => tape.relu(x),
                LayerKind::Batchnorm => tape.batchnorm(
                    x,
                    vars[0],
                    vars[1],
                    layer.running.as_mut().expect("batch norm has running stats"),
                    layer.spec.bn_momentum,
                    layer.spec.bn_eps,
                    mode,
                )?,
                LayerKind::MaxpoolPoints => {
                    let (v, am) = tape.maxpool_points(x)?;
                    argmax = Some(am);
                    v
                }
            };
        }
        Ok(TapeForward {
            output: x,
            params,
            argmax,
        })
    }

    /// Eval-mode forward without recording; safe to call from many threads.
    pub fn forward_eval(&self, input: &Tensor) -> Result<(Tensor, Option<Vec<usize>>)> {
        let mut argmax = None;
        let mut x = input.clone();
        for layer in &self.layers {
            x = match layer.spec.kind {
                LayerKind::SharedLinear | LayerKind::Linear => {
                    ops::forward_shared_linear(&x, &layer.params[0], &layer.params[1])?
                }
                LayerKind::Relu => {
                    x.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
                    x
                }
                LayerKind::Batchnorm => ops::batchnorm_eval(
                    &x,
                    &layer.params[0],
                    &layer.params[1],
                    layer.running.as_ref().expect("batch norm has running stats"),
                    layer.spec.bn_eps,
                )?,
                LayerKind::MaxpoolPoints => {
                    let pooled = ops::forward_maxpool_points(&x)?;
                    argmax = Some(pooled.argmax);
                    pooled.values
                }
            };
        }
        Ok((x, argmax))
    }

    /// Copies leaf gradients from a finished tape into the parameters' grad buffers.
    pub fn collect_grads(&mut self, tape: &Tape, params: &[Var]) -> Result<()> {
        for (p, v) in self.params_mut().zip(params) {
            if let Some(g) = tape.grad(*v) {
                p.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().for_each(Tensor::zero_grad);
    }
}
