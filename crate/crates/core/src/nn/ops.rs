//! Forward kernels shared by the tape and the tape-free inference path.

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

/// `c = a · b + beta · c` with arbitrary strides, `a` is `m×k`, `b` is `k×n`, `c` is `m×n` row-major.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() == m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the asserts above guarantee every strided access stays in bounds
    // for the three layouts used in this crate (plain and transposed views of
    // dense row-major buffers).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Per-point affine map `out[.., :] = x[.., :] · W + b`; `x` may be `B×N×Cin` or `B×Cin`.
pub fn forward_shared_linear(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let cin = x.channels();
    if weight.rank() != 2 || weight.shape()[0] != cin {
        return Err(Error::Dimension {
            op: "shared_linear",
            left: x.shape().to_vec(),
            right: weight.shape().to_vec(),
        });
    }
    let cout = weight.shape()[1];
    if bias.len() != cout {
        return Err(Error::Dimension {
            op: "shared_linear bias",
            left: weight.shape().to_vec(),
            right: bias.shape().to_vec(),
        });
    }
    let rows = x.rows();
    let mut out = Vec::with_capacity(rows * cout);
    for _ in 0..rows {
        out.extend_from_slice(bias.data());
    }
    gemm(
        rows,
        cin,
        cout,
        x.data(),
        (cin as isize, 1),
        weight.data(),
        (cout as isize, 1),
        1.0,
        &mut out,
    );
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = cout;
    Tensor::new(shape, out)
}

pub fn forward_relu(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| v.max(0.0)).collect();
    Tensor::new(x.shape().to_vec(), data).expect("shape preserved")
}

/// Channel-wise maximum over the point axis.
#[derive(Clone, Debug, PartialEq)]
pub struct Pooled {
    /// `B×C` maxima.
    pub values: Tensor,
    /// `B×C` point indices, row-major; the smallest index wins ties.
    pub argmax: Vec<usize>,
}

pub fn forward_maxpool_points(x: &Tensor) -> Result<Pooled> {
    if x.rank() != 3 {
        return Err(Error::Dimension {
            op: "maxpool_points",
            left: x.shape().to_vec(),
            right: vec![0, 0, 0],
        });
    }
    let (b, n, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if n == 0 {
        return Err(Error::EmptyInput("max-pool over zero points".into()));
    }
    let data = x.data();
    let mut values = Vec::with_capacity(b * c);
    let mut argmax = Vec::with_capacity(b * c);
    for s in 0..b {
        let base = s * n * c;
        let mut best = data[base..base + c].to_vec();
        let mut idx = vec![0usize; c];
        for p in 1..n {
            let row = &data[base + p * c..base + (p + 1) * c];
            for ch in 0..c {
                // Strict comparison keeps the lowest index on ties.
                if row[ch] > best[ch] {
                    best[ch] = row[ch];
                    idx[ch] = p;
                }
            }
        }
        values.extend(best);
        argmax.extend(idx);
    }
    Ok(Pooled {
        values: Tensor::new(vec![b, c], values)?,
        argmax,
    })
}

/// Running batch-norm statistics, per channel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BnStats {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// Quantities the train-mode backward pass needs.
#[derive(Clone, Debug)]
pub struct BnCache {
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
}

/// Batch normalization over every leading position of each channel.
///
/// Train mode normalizes with the biased batch variance and folds the batch
/// statistics into `stats` as `stats = momentum * stats + (1 - momentum) * batch`,
/// using the unbiased variance for the running estimate. Eval mode reads `stats` only.
pub fn forward_batchnorm(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    stats: &mut BnStats,
    momentum: f64,
    eps: f64,
    mode: Mode,
) -> Result<(Tensor, Option<BnCache>)> {
    match mode {
        Mode::Eval => Ok((batchnorm_eval(x, gamma, beta, stats, eps)?, None)),
        Mode::Train => {
            check_bn_shapes(x, gamma, beta, stats)?;
            let c = x.channels();
            let rows = x.rows();
            let data = x.data();
            let mut mean = vec![0.0; c];
            for row in data.chunks_exact(c) {
                mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
            }
            mean.iter_mut().for_each(|m| *m /= rows as f64);
            let mut var = vec![0.0; c];
            for row in data.chunks_exact(c) {
                for ch in 0..c {
                    let d = row[ch] - mean[ch];
                    var[ch] += d * d;
                }
            }
            var.iter_mut().for_each(|v| *v /= rows as f64);
            let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();

            let mut xhat = Vec::with_capacity(data.len());
            let mut out = Vec::with_capacity(data.len());
            let (g, b) = (gamma.data(), beta.data());
            for row in data.chunks_exact(c) {
                for ch in 0..c {
                    let h = (row[ch] - mean[ch]) * inv_std[ch];
                    xhat.push(h);
                    out.push(g[ch] * h + b[ch]);
                }
            }

            let unbias = if rows > 1 {
                rows as f64 / (rows - 1) as f64
            } else {
                1.0
            };
            for ch in 0..c {
                stats.mean[ch] = momentum * stats.mean[ch] + (1.0 - momentum) * mean[ch];
                stats.var[ch] = momentum * stats.var[ch] + (1.0 - momentum) * var[ch] * unbias;
            }
            Ok((
                Tensor::new(x.shape().to_vec(), out)?,
                Some(BnCache { xhat, inv_std }),
            ))
        }
    }
}

pub fn batchnorm_eval(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    stats: &BnStats,
    eps: f64,
) -> Result<Tensor> {
    check_bn_shapes(x, gamma, beta, stats)?;
    let (scale, shift) = eval_affine(gamma, beta, stats, eps);
    let c = x.channels();
    let mut out = Vec::with_capacity(x.len());
    for row in x.data().chunks_exact(c) {
        for ch in 0..c {
            out.push(row[ch] * scale[ch] + shift[ch]);
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Per-channel `(scale, shift)` that eval-mode batch norm applies.
pub(crate) fn eval_affine(
    gamma: &Tensor,
    beta: &Tensor,
    stats: &BnStats,
    eps: f64,
) -> (Vec<f64>, Vec<f64>) {
    let scale: Vec<f64> = gamma
        .data()
        .iter()
        .zip(&stats.var)
        .map(|(g, v)| g / (v + eps).sqrt())
        .collect();
    let shift = beta
        .data()
        .iter()
        .zip(&stats.mean)
        .zip(&scale)
        .map(|((b, m), s)| b - m * s)
        .collect();
    (scale, shift)
}

fn check_bn_shapes(x: &Tensor, gamma: &Tensor, beta: &Tensor, stats: &BnStats) -> Result<()> {
    let c = x.channels();
    if gamma.len() != c || beta.len() != c || stats.channels() != c {
        return Err(Error::Dimension {
            op: "batchnorm",
            left: x.shape().to_vec(),
            right: vec![gamma.len(), beta.len(), stats.channels()],
        });
    }
    Ok(())
}
