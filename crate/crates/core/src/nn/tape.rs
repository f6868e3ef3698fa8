//! Reverse-mode differentiation over a linear tape of the engine's ops.

use super::ops::{self, gemm, BnStats, Mode};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    SharedLinear { x: Var, w: Var, b: Var },
    Relu { x: Var },
    BatchNormTrain { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    BatchNormEval { x: Var, gamma: Var, beta: Var, mean: Vec<f64>, inv_std: Vec<f64> },
    MaxPool { x: Var, argmax: Vec<usize>, points: usize },
    SliceRows { x: Var, start: usize },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    SubConst { a: Var },
    Square { a: Var },
    Scale { a: Var, c: f64 },
    WeightedSum { a: Var, weights: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input; it receives gradients iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let needs_grad = t.requires_grad();
        self.push(t, Op::Leaf, needs_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of a trainable leaf after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn shared_linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let out = ops::forward_shared_linear(self.value(x), self.value(w), self.value(b))?;
        let ng = self.needs(&[x, w, b]);
        Ok(self.push(out, Op::SharedLinear { x, w, b }, ng))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = ops::forward_relu(self.value(x));
        let ng = self.needs(&[x]);
        self.push(out, Op::Relu { x }, ng)
    }

    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut BnStats,
        momentum: f64,
        eps: f64,
        mode: Mode,
    ) -> Result<Var> {
        let ng = self.needs(&[x, gamma, beta]);
        match mode {
            Mode::Train => {
                let (out, cache) = ops::forward_batchnorm(
                    self.value(x),
                    self.value(gamma),
                    self.value(beta),
                    stats,
                    momentum,
                    eps,
                    Mode::Train,
                )?;
                let cache = cache.expect("train mode returns a cache");
                Ok(self.push(
                    out,
                    Op::BatchNormTrain {
                        x,
                        gamma,
                        beta,
                        xhat: cache.xhat,
                        inv_std: cache.inv_std,
                    },
                    ng,
                ))
            }
            Mode::Eval => {
                let out = ops::batchnorm_eval(
                    self.value(x),
                    self.value(gamma),
                    self.value(beta),
                    stats,
                    eps,
                )?;
                let inv_std = stats.var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
                Ok(self.push(
                    out,
                    Op::BatchNormEval {
                        x,
                        gamma,
                        beta,
                        mean: stats.mean.clone(),
                        inv_std,
                    },
                    ng,
                ))
            }
        }
    }

    /// Returns the pooled variable and the per-(sample, channel) argmax indices.
    pub fn maxpool_points(&mut self, x: Var) -> Result<(Var, Vec<usize>)> {
        let pooled = ops::forward_maxpool_points(self.value(x))?;
        let points = self.value(x).shape()[1];
        let ng = self.needs(&[x]);
        let argmax = pooled.argmax.clone();
        let v = self.push(
            pooled.values,
            Op::MaxPool {
                x,
                argmax: pooled.argmax,
                points,
            },
            ng,
        );
        Ok((v, argmax))
    }

    /// Rows `start..start+len` of the leading axis.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let src = self.value(x);
        let lead = src.shape()[0];
        if len == 0 || start + len > lead {
            return Err(Error::Dimension {
                op: "slice_rows",
                left: src.shape().to_vec(),
                right: vec![start, len],
            });
        }
        let stride = src.len() / lead;
        let data = src.data()[start * stride..(start + len) * stride].to_vec();
        let mut shape = src.shape().to_vec();
        shape[0] = len;
        let out = Tensor::new(shape, data)?;
        let ng = self.needs(&[x]);
        Ok(self.push(out, Op::SliceRows { x, start }, ng))
    }

    fn same_len(&self, op: &'static str, a: Var, b: usize) -> Result<()> {
        if self.value(a).len() != b {
            return Err(Error::Dimension {
                op,
                left: self.value(a).shape().to_vec(),
                right: vec![b],
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_len("add", a, self.value(b).len())?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x + y);
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(out, Op::Add { a, b }, ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_len("sub", a, self.value(b).len())?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x - y);
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(out, Op::Sub { a, b }, ng))
    }

    /// `a - c` for a constant `c`.
    pub fn sub_const(&mut self, a: Var, c: &[f64]) -> Result<Var> {
        self.same_len("sub_const", a, c.len())?;
        let data = zip_map(self.value(a).data(), c, |x, y| x - y);
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let ng = self.needs(&[a]);
        Ok(self.push(out, Op::SubConst { a }, ng))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let data = self.value(a).data().iter().map(|v| v * v).collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data).expect("shape preserved");
        let ng = self.needs(&[a]);
        self.push(out, Op::Square { a }, ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let data = self.value(a).data().iter().map(|v| v * c).collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data).expect("shape preserved");
        let ng = self.needs(&[a]);
        self.push(out, Op::Scale { a, c }, ng)
    }

    /// Scalar `Σ weights[i] · a[i]`.
    pub fn weighted_sum(&mut self, a: Var, weights: Vec<f64>) -> Result<Var> {
        self.same_len("weighted_sum", a, weights.len())?;
        let s = self
            .value(a)
            .data()
            .iter()
            .zip(&weights)
            .map(|(x, w)| x * w)
            .sum();
        let ng = self.needs(&[a]);
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum { a, weights }, ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        self.weighted_sum(a, vec![1.0; n]).expect("lengths agree")
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        self.weighted_sum(a, vec![1.0 / n as f64; n])
            .expect("lengths agree")
    }

    /// Signature of every non-differentiable decision taken in the forward pass
    /// (ReLU gates and max-pool winners). Two evaluations with equal signatures
    /// lie on the same smooth piece of the function.
    pub fn branch_signature(&self) -> Vec<usize> {
        let mut sig = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu { x } => sig.extend(
                    self.value(*x)
                        .data()
                        .iter()
                        .map(|&v| usize::from(v > 0.0)),
                ),
                Op::MaxPool { argmax, .. } => sig.extend_from_slice(argmax),
                _ => {}
            }
        }
        sig
    }

    /// Propagates `d loss / d node` back to every trainable leaf, adding into
    /// the leaves' gradient buffers.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                self.nodes[i].value.accumulate_grad(&g)?;
                continue;
            }
            match &self.nodes[i].op {
                Op::Leaf => unreachable!(),
                Op::SharedLinear { x, w, b } => {
                    let (x, w, b) = (*x, *w, *b);
                    let xv = self.value(x);
                    let cin = xv.channels();
                    let rows = xv.rows();
                    let cout = self.value(w).shape()[1];
                    if self.nodes[x.0].needs_grad {
                        let mut dx = vec![0.0; rows * cin];
                        gemm(
                            rows,
                            cout,
                            cin,
                            &g,
                            (cout as isize, 1),
                            self.value(w).data(),
                            (1, cout as isize),
                            0.0,
                            &mut dx,
                        );
                        add_into(&mut grads[x.0], dx);
                    }
                    if self.nodes[w.0].needs_grad {
                        let mut dw = vec![0.0; cin * cout];
                        gemm(
                            cin,
                            rows,
                            cout,
                            xv.data(),
                            (1, cin as isize),
                            &g,
                            (cout as isize, 1),
                            0.0,
                            &mut dw,
                        );
                        add_into(&mut grads[w.0], dw);
                    }
                    if self.nodes[b.0].needs_grad {
                        add_into(&mut grads[b.0], column_sums(&g, cout));
                    }
                }
                Op::Relu { x } => {
                    let x = *x;
                    let out = self.nodes[i].value.data();
                    let dx = zip_map(&g, out, |gi, yi| if yi > 0.0 { gi } else { 0.0 });
                    add_into(&mut grads[x.0], dx);
                }
                Op::BatchNormTrain {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let c = inv_std.len();
                    let rows = g.len() / c;
                    let mut dgamma = vec![0.0; c];
                    let mut dbeta = vec![0.0; c];
                    for (grow, hrow) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                        for ch in 0..c {
                            dbeta[ch] += grow[ch];
                            dgamma[ch] += grow[ch] * hrow[ch];
                        }
                    }
                    if self.nodes[x.0].needs_grad {
                        let gam = self.value(*gamma).data();
                        let m = rows as f64;
                        let mut dx = Vec::with_capacity(g.len());
                        for (grow, hrow) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                            for ch in 0..c {
                                let k = gam[ch] * inv_std[ch] / m;
                                dx.push(k * (m * grow[ch] - dbeta[ch] - hrow[ch] * dgamma[ch]));
                            }
                        }
                        add_into(&mut grads[x.0], dx);
                    }
                    let (gamma, beta) = (*gamma, *beta);
                    add_into(&mut grads[gamma.0], dgamma);
                    add_into(&mut grads[beta.0], dbeta);
                }
                Op::BatchNormEval {
                    x,
                    gamma,
                    beta,
                    mean,
                    inv_std,
                } => {
                    let c = inv_std.len();
                    let gam = self.value(*gamma).data();
                    let xv = self.value(*x).data();
                    let mut dgamma = vec![0.0; c];
                    let mut dbeta = vec![0.0; c];
                    let mut dx = Vec::with_capacity(g.len());
                    for (grow, xrow) in g.chunks_exact(c).zip(xv.chunks_exact(c)) {
                        for ch in 0..c {
                            dbeta[ch] += grow[ch];
                            dgamma[ch] += grow[ch] * (xrow[ch] - mean[ch]) * inv_std[ch];
                            dx.push(grow[ch] * gam[ch] * inv_std[ch]);
                        }
                    }
                    let (x, gamma, beta) = (*x, *gamma, *beta);
                    add_into(&mut grads[x.0], dx);
                    add_into(&mut grads[gamma.0], dgamma);
                    add_into(&mut grads[beta.0], dbeta);
                }
                Op::MaxPool { x, argmax, points } => {
                    let xv = self.value(*x);
                    let c = xv.channels();
                    let mut dx = vec![0.0; xv.len()];
                    for (k, (&p, gi)) in argmax.iter().zip(&g).enumerate() {
                        let (s, ch) = (k / c, k % c);
                        dx[(s * points + p) * c + ch] += gi;
                    }
                    let x = *x;
                    add_into(&mut grads[x.0], dx);
                }
                Op::SliceRows { x, start } => {
                    let xv = self.value(*x);
                    let stride = xv.len() / xv.shape()[0];
                    let mut dx = vec![0.0; xv.len()];
                    dx[start * stride..start * stride + g.len()].copy_from_slice(&g);
                    let x = *x;
                    add_into(&mut grads[x.0], dx);
                }
                Op::Add { a, b } => {
                    let (a, b) = (*a, *b);
                    add_into(&mut grads[b.0], g.clone());
                    add_into(&mut grads[a.0], g);
                }
                Op::Sub { a, b } => {
                    let (a, b) = (*a, *b);
                    add_into(&mut grads[b.0], g.iter().map(|v| -v).collect());
                    add_into(&mut grads[a.0], g);
                }
                Op::SubConst { a } => {
                    let a = *a;
                    add_into(&mut grads[a.0], g);
                }
                Op::Square { a } => {
                    let a = *a;
                    let dx = zip_map(&g, self.value(a).data(), |gi, xi| 2.0 * xi * gi);
                    add_into(&mut grads[a.0], dx);
                }
                Op::Scale { a, c } => {
                    let (a, c) = (*a, *c);
                    add_into(&mut grads[a.0], g.iter().map(|v| v * c).collect());
                }
                Op::WeightedSum { a, weights } => {
                    let dx = weights.iter().map(|w| w * g[0]).collect();
                    let a = *a;
                    add_into(&mut grads[a.0], dx);
                }
            }
        }
        Ok(())
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn add_into(slot: &mut Option<Vec<f64>>, g: Vec<f64>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g),
    }
}

fn column_sums(g: &[f64], c: usize) -> Vec<f64> {
    let mut out = vec![0.0; c];
    for row in g.chunks_exact(c) {
        out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
    }
    out
}
