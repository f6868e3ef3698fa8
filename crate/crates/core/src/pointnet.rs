//! PointNet regressor without the spatial transform sub-network and with a
//! scalar output head. The max-pool argmax is exposed for critical region
//! localization.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{Checkpoint, PointTable, POINT_CHANNELS};
use crate::nn::{LayerKind, LayerSpec, Mode, Sequential, Tape, TapeForward, Tensor, Var};

/// Standard deviations below this are floored before dividing.
pub const STD_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_channels: usize,
    /// Per-point shared MLP widths; the last one is the global feature size.
    pub shared_widths: Vec<usize>,
    /// Fully connected head widths; must end in 1.
    pub head_widths: Vec<usize>,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_channels: POINT_CHANNELS,
            shared_widths: vec![64, 64, 64, 128, 1024],
            head_widths: vec![512, 256, 1],
            bn_momentum: crate::nn::DEFAULT_BN_MOMENTUM,
            bn_eps: crate::nn::DEFAULT_BN_EPS,
        }
    }
}

impl ModelConfig {
    pub fn global_dim(&self) -> usize {
        self.shared_widths.last().copied().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_channels != POINT_CHANNELS {
            return Err(Error::Config(format!(
                "input_channels must be {POINT_CHANNELS}, got {}",
                self.input_channels
            )));
        }
        if self.shared_widths.is_empty() || self.head_widths.last() != Some(&1) {
            return Err(Error::Config(
                "need at least one shared width and a head ending in width 1".into(),
            ));
        }
        if self.shared_widths.iter().chain(&self.head_widths).any(|&w| w == 0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        Ok(())
    }

    /// `[shared-linear → batchnorm → relu]*, maxpool, [linear → batchnorm → relu]*, linear`.
    pub fn layer_specs(&self) -> Result<Vec<LayerSpec>> {
        self.validate()?;
        let bn = |d: usize| {
            let mut s = LayerSpec::batchnorm(d);
            s.bn_momentum = self.bn_momentum;
            s.bn_eps = self.bn_eps;
            s
        };
        let mut specs = Vec::new();
        let mut width = self.input_channels;
        for &w in &self.shared_widths {
            specs.push(LayerSpec::shared_linear(width, w));
            specs.push(bn(w));
            specs.push(LayerSpec::relu(w));
            width = w;
        }
        specs.push(LayerSpec::maxpool_points(width));
        let (last, hidden) = self.head_widths.split_last().expect("validated nonempty");
        for &w in hidden {
            specs.push(LayerSpec::linear(width, w));
            specs.push(bn(w));
            specs.push(LayerSpec::relu(w));
            width = w;
        }
        specs.push(LayerSpec::linear(width, *last));
        Ok(specs)
    }
}

/// Per-channel standardization statistics for `(x, y, z, fa, nos)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: [f64; POINT_CHANNELS],
    pub std: [f64; POINT_CHANNELS],
}

impl Default for ChannelStats {
    fn default() -> Self {
        Self {
            mean: [0.0; POINT_CHANNELS],
            std: [1.0; POINT_CHANNELS],
        }
    }
}

impl ChannelStats {
    /// Population mean and standard deviation over every row of every table.
    pub fn fit<'a>(tables: impl IntoIterator<Item = &'a PointTable> + Clone) -> Result<Self> {
        let mut n = 0usize;
        let mut sum = [0.0; POINT_CHANNELS];
        for t in tables.clone() {
            for row in &t.rows {
                for c in 0..POINT_CHANNELS {
                    sum[c] += row[c];
                }
            }
            n += t.len();
        }
        if n == 0 {
            return Err(Error::EmptyInput("no points to fit channel statistics".into()));
        }
        let mean = sum.map(|s| s / n as f64);
        let mut ss = [0.0; POINT_CHANNELS];
        for t in tables {
            for row in &t.rows {
                for c in 0..POINT_CHANNELS {
                    let d = row[c] - mean[c];
                    ss[c] += d * d;
                }
            }
        }
        Ok(Self {
            mean,
            std: ss.map(|s| (s / n as f64).sqrt()),
        })
    }

    pub fn apply(&self, row: &[f64; POINT_CHANNELS]) -> [f64; POINT_CHANNELS] {
        let mut out = [0.0; POINT_CHANNELS];
        for c in 0..POINT_CHANNELS {
            out[c] = (row[c] - self.mean[c]) / self.std[c].max(STD_FLOOR);
        }
        out
    }
}

/// `(x − mean) / max(std, 1e-8)` on the trailing channel axis.
pub fn standardize(batch: &Tensor, stats: &ChannelStats) -> Result<Tensor> {
    check_channels(batch)?;
    let mut out = batch.clone();
    for row in out.data_mut().chunks_exact_mut(POINT_CHANNELS) {
        let r: &mut [f64; POINT_CHANNELS] = row.try_into().expect("chunk width");
        *r = stats.apply(r);
    }
    Ok(out)
}

/// Representation of the regression target inside the network.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum TargetScaling {
    /// Network output is in score units.
    Raw,
    /// Network output is `(score − mean) / std`.
    Standardized { mean: f64, std: f64 },
}

impl TargetScaling {
    pub fn to_model(&self, score: f64) -> f64 {
        match *self {
            TargetScaling::Raw => score,
            TargetScaling::Standardized { mean, std } => (score - mean) / std.max(STD_FLOOR),
        }
    }

    pub fn to_score(&self, output: f64) -> f64 {
        match *self {
            TargetScaling::Raw => output,
            TargetScaling::Standardized { mean, std } => output * std.max(STD_FLOOR) + mean,
        }
    }
}

/// Result of one sample's forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace {
    /// Predicted score in raw score units.
    pub prediction: f64,
    /// Point index that attains each global feature channel.
    pub argmax: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PointNetRegressor {
    pub net: Sequential,
    pub input_stats: ChannelStats,
    pub target: TargetScaling,
}

fn check_channels(batch: &Tensor) -> Result<()> {
    if batch.rank() != 3 || batch.channels() != POINT_CHANNELS {
        return Err(Error::Dimension {
            op: "point batch",
            left: batch.shape().to_vec(),
            right: vec![0, 0, POINT_CHANNELS],
        });
    }
    Ok(())
}

impl PointNetRegressor {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            net: Sequential::new(&config.layer_specs()?, &mut rng)?,
            input_stats: ChannelStats::default(),
            target: TargetScaling::Raw,
        })
    }

    pub fn global_dim(&self) -> usize {
        self.net
            .layers
            .iter()
            .find(|l| l.spec.kind == LayerKind::MaxpoolPoints)
            .map(|l| l.spec.out_dim)
            .unwrap_or(0)
    }

    /// Sets the output bias so an all-zero head starts at `value` in model units.
    pub fn set_output_bias(&mut self, value: f64) {
        if let Some(last) = self.net.layers.last_mut() {
            if last.spec.kind == LayerKind::Linear {
                last.params[1].data_mut().fill(value);
            }
        }
    }

    /// Eval-mode forward over an already standardized `B×N×5` batch.
    pub fn forward_eval(&self, batch: &Tensor) -> Result<Vec<ForwardTrace>> {
        check_channels(batch)?;
        let (out, argmax) = self.net.forward_eval(batch)?;
        Ok(self.traces(&out, argmax))
    }

    pub fn forward(&mut self, batch: &Tensor, mode: Mode) -> Result<Vec<ForwardTrace>> {
        match mode {
            Mode::Eval => self.forward_eval(batch),
            Mode::Train => {
                check_channels(batch)?;
                let mut tape = Tape::new();
                let x = tape.leaf(batch.clone());
                let fwd = self.net.forward_tape(&mut tape, x, Mode::Train)?;
                let out = tape.value(fwd.output).clone();
                Ok(self.traces(&out, fwd.argmax))
            }
        }
    }

    /// Records a forward pass for training; the output is `B×1` in model units.
    pub fn forward_tape(&mut self, tape: &mut Tape, batch: Tensor, mode: Mode) -> Result<TapeForward> {
        check_channels(&batch)?;
        let x: Var = tape.leaf(batch);
        self.net.forward_tape(tape, x, mode)
    }

    fn traces(&self, out: &Tensor, argmax: Option<Vec<usize>>) -> Vec<ForwardTrace> {
        let b = out.shape()[0];
        let f = self.global_dim();
        let argmax = argmax.unwrap_or_default();
        (0..b)
            .map(|s| ForwardTrace {
                prediction: self.target.to_score(out.data()[s]),
                argmax: argmax.get(s * f..(s + 1) * f).map(<[usize]>::to_vec).unwrap_or_default(),
            })
            .collect()
    }

    pub fn to_checkpoint(&self, seed: u64, config: serde_json::Value) -> Checkpoint {
        Checkpoint {
            specs: self.net.specs(),
            tensors: self.net.named_tensors(),
            input_stats: self.input_stats,
            target: self.target,
            seed,
            config,
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let net = Sequential::from_named_tensors(&ckpt.specs, &ckpt.tensors)?;
        match net.layers.first().map(|l| (l.spec.kind, l.spec.in_dim)) {
            Some((LayerKind::SharedLinear, POINT_CHANNELS)) => {}
            _ => {
                return Err(Error::Validation(
                    "checkpoint network does not start with a 5-channel shared linear layer".into(),
                ))
            }
        }
        Ok(Self {
            net,
            input_stats: ckpt.input_stats,
            target: ckpt.target,
        })
    }
}
