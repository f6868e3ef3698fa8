//! Hand-crafted tract features (whole-tract mean and along-tract profile)
//! with ordinary least squares and elastic-net regressors.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_tract, CohortManifest, Split, Tract};
use crate::metrics::evaluate;
use crate::rng::{rng_for, stream};

pub const PROFILE_NODES: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureKind {
    /// `[mean FA, NoS]`
    Mean,
    /// Node FA values followed by NoS.
    AlongTract,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub kind: FeatureKind,
    pub subject_id: String,
    pub values: Vec<f64>,
}

pub fn mean_features(tract: &Tract) -> Result<FeatureVector> {
    tract.validate()?;
    let (sum, n) = tract
        .streamlines
        .iter()
        .flat_map(|s| s.fa.iter())
        .fold((0.0, 0usize), |(s, n), &f| (s + f64::from(f), n + 1));
    Ok(FeatureVector {
        kind: FeatureKind::Mean,
        subject_id: tract.subject_id.clone(),
        values: vec![sum / n as f64, tract.nos() as f64],
    })
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    (0..3).map(|k| (a[k] - b[k]).powi(2)).sum::<f64>().sqrt()
}

/// Positions and FA at `nodes` equidistant arc-length positions, by linear
/// interpolation along the polyline.
pub fn resample_streamline(points: &[[f64; 3]], fa: &[f64], nodes: usize) -> Result<(Vec<[f64; 3]>, Vec<f64>)> {
    if points.len() < 2 || points.len() != fa.len() || nodes < 2 {
        return Err(Error::Validation(format!(
            "resampling needs >= 2 points with matching FA and >= 2 nodes (got {} points, {} fa, {nodes} nodes)",
            points.len(),
            fa.len()
        )));
    }
    let mut cum = Vec::with_capacity(points.len());
    cum.push(0.0);
    for w in points.windows(2) {
        cum.push(cum.last().unwrap() + dist(w[0], w[1]));
    }
    let total = *cum.last().unwrap();
    if !(total > 0.0) {
        return Err(Error::Validation("zero-length streamline".into()));
    }
    let mut pos = Vec::with_capacity(nodes);
    let mut val = Vec::with_capacity(nodes);
    let mut seg = 0;
    for k in 0..nodes {
        let s = total * k as f64 / (nodes - 1) as f64;
        while seg + 2 < points.len() && cum[seg + 1] < s {
            seg += 1;
        }
        let len = cum[seg + 1] - cum[seg];
        let t = if len > 0.0 { ((s - cum[seg]) / len).clamp(0.0, 1.0) } else { 0.0 };
        let (a, b) = (points[seg], points[seg + 1]);
        pos.push([0, 1, 2].map(|i| a[i] + t * (b[i] - a[i])));
        val.push(fa[seg] + t * (fa[seg + 1] - fa[seg]));
    }
    Ok((pos, val))
}

fn lex_less(a: [f64; 3], b: [f64; 3]) -> bool {
    a.partial_cmp(&b) == Some(std::cmp::Ordering::Less)
}

/// Along-tract FA profile. Streamlines are oriented so their starts lie near
/// the running mean start; the first one starts at its lexicographically
/// smaller endpoint. Node `k` is the mean resampled FA over streamlines.
pub fn tract_profile(tract: &Tract, nodes: usize) -> Result<FeatureVector> {
    tract.validate()?;
    let mut sum = vec![0.0; nodes];
    let mut mean_start = [0.0; 3];
    for (i, s) in tract.streamlines.iter().enumerate() {
        let mut pts: Vec<[f64; 3]> = s.points.iter().map(|p| p.map(f64::from)).collect();
        let mut fa: Vec<f64> = s.fa.iter().map(|&f| f64::from(f)).collect();
        let (first, last) = (pts[0], pts[pts.len() - 1]);
        let flip = if i == 0 {
            lex_less(last, first)
        } else {
            dist(last, mean_start) < dist(first, mean_start)
        };
        if flip {
            pts.reverse();
            fa.reverse();
        }
        let start = pts[0];
        for k in 0..3 {
            mean_start[k] += (start[k] - mean_start[k]) / (i + 1) as f64;
        }
        let (_, vals) = resample_streamline(&pts, &fa, nodes)
            .map_err(|e| Error::Validation(format!("streamline {i}: {e}")))?;
        sum.iter_mut().zip(vals).for_each(|(a, v)| *a += v);
    }
    let n = tract.nos() as f64;
    let mut values: Vec<f64> = sum.into_iter().map(|v| v / n).collect();
    values.push(n);
    Ok(FeatureVector {
        kind: FeatureKind::AlongTract,
        subject_id: tract.subject_id.clone(),
        values,
    })
}

pub fn extract(tract: &Tract, kind: FeatureKind) -> Result<FeatureVector> {
    match kind {
        FeatureKind::Mean => mean_features(tract),
        FeatureKind::AlongTract => tract_profile(tract, PROFILE_NODES),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Regularization {
    None,
    ElasticNet { alpha: f64, l1_ratio: f64 },
}

/// `y ≈ intercept + coefficients · x` in raw feature units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub coefficients: Vec<f64>,
    pub intercept: f64,
    pub regularization: Regularization,
    pub feature_mean: Vec<f64>,
    /// Population std per column; 0 marks a constant column.
    pub feature_std: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
}

impl LinearModel {
    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.coefficients.len() {
            return Err(Error::Dimension {
                op: "linear predict",
                left: vec![x.len()],
                right: vec![self.coefficients.len()],
            });
        }
        Ok(self.intercept + x.iter().zip(&self.coefficients).map(|(a, b)| a * b).sum::<f64>())
    }

    /// Coefficients on the standardized columns.
    pub fn standardized_coefficients(&self) -> Vec<f64> {
        self.coefficients
            .iter()
            .zip(&self.feature_std)
            .map(|(c, s)| c * s)
            .collect()
    }
}

/// Column-standardized design, centered target and the statistics used.
pub struct Standardized {
    pub z: DMatrix<f64>,
    pub y: DVector<f64>,
    pub y_mean: f64,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

const CONSTANT_COLUMN: f64 = 1e-12;

pub fn standardize_design(x: &[Vec<f64>], y: &[f64]) -> Result<Standardized> {
    let n = x.len();
    if n == 0 || y.len() != n {
        return Err(Error::Dimension {
            op: "design",
            left: vec![n],
            right: vec![y.len()],
        });
    }
    let p = x[0].len();
    if p == 0 || x.iter().any(|r| r.len() != p) {
        return Err(Error::Validation("design rows must share a nonzero width".into()));
    }
    let mut mean = vec![0.0; p];
    let mut std = vec![0.0; p];
    for j in 0..p {
        mean[j] = x.iter().map(|r| r[j]).sum::<f64>() / n as f64;
        let v = x.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n as f64;
        std[j] = if v.sqrt() > CONSTANT_COLUMN { v.sqrt() } else { 0.0 };
    }
    let z = DMatrix::from_fn(n, p, |i, j| {
        if std[j] > 0.0 {
            (x[i][j] - mean[j]) / std[j]
        } else {
            0.0
        }
    });
    let y_mean = y.iter().sum::<f64>() / n as f64;
    Ok(Standardized {
        z,
        y: DVector::from_iterator(n, y.iter().map(|v| v - y_mean)),
        y_mean,
        mean,
        std,
    })
}

fn to_raw(s: &Standardized, beta: &[f64], reg: Regularization, converged: bool, iterations: usize) -> LinearModel {
    let coefficients: Vec<f64> = beta
        .iter()
        .zip(&s.std)
        .map(|(b, &sd)| if sd > 0.0 { b / sd } else { 0.0 })
        .collect();
    let intercept = s.y_mean - coefficients.iter().zip(&s.mean).map(|(c, m)| c * m).sum::<f64>();
    LinearModel {
        coefficients,
        intercept,
        regularization: reg,
        feature_mean: s.mean.clone(),
        feature_std: s.std.clone(),
        converged,
        iterations,
    }
}

pub const OLS_JITTER: f64 = 1e-10;

/// Least squares on standardized columns: normal equations with a 1e-10
/// ridge when rows ≥ columns, minimum-norm pseudo-inverse otherwise.
pub fn fit_ols(x: &[Vec<f64>], y: &[f64]) -> Result<LinearModel> {
    let s = standardize_design(x, y)?;
    let (n, p) = s.z.shape();
    let beta = if n >= p {
        let mut gram = s.z.transpose() * &s.z;
        for j in 0..p {
            gram[(j, j)] += OLS_JITTER;
        }
        let rhs = s.z.transpose() * &s.y;
        let chol = gram.cholesky().ok_or_else(|| {
            Error::Singular("normal equations are not positive definite".into())
        })?;
        chol.solve(&rhs)
    } else {
        s.z.clone()
            .svd(true, true)
            .solve(&s.y, 1e-12)
            .map_err(|e| Error::Singular(e.to_string()))?
    };
    Ok(to_raw(&s, beta.as_slice(), Regularization::None, true, 1))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnetOptions {
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for EnetOptions {
    fn default() -> Self {
        Self {
            max_iter: 10_000,
            tol: 1e-7,
        }
    }
}

fn soft_threshold(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

/// Largest violation of the elastic-net optimality conditions for standardized
/// coefficients `beta`, objective `1/(2n)‖y − Zβ‖² + α·ρ‖β‖₁ + α(1−ρ)/2‖β‖²`.
pub fn kkt_residual(z: &DMatrix<f64>, y: &DVector<f64>, beta: &[f64], alpha: f64, l1_ratio: f64) -> f64 {
    let n = z.nrows() as f64;
    let b = DVector::from_column_slice(beta);
    let r = y - z * &b;
    let l1 = alpha * l1_ratio;
    let l2 = alpha * (1.0 - l1_ratio);
    (0..beta.len())
        .map(|j| {
            let g = -z.column(j).dot(&r) / n + l2 * beta[j];
            if beta[j] != 0.0 {
                (g + l1 * beta[j].signum()).abs()
            } else {
                (g.abs() - l1).max(0.0)
            }
        })
        .fold(0.0, f64::max)
}

/// Cyclic coordinate descent. Stops once a sweep changes no coefficient by
/// `tol` or more and the optimality residual is below `tol`; `converged` is
/// false when `max_iter` sweeps run out first.
pub fn fit_elastic_net(x: &[Vec<f64>], y: &[f64], alpha: f64, l1_ratio: f64, opts: EnetOptions) -> Result<LinearModel> {
    if !(alpha >= 0.0) || !(0.0..=1.0).contains(&l1_ratio) {
        return Err(Error::Config(format!(
            "need alpha >= 0 and l1_ratio in [0, 1], got {alpha}, {l1_ratio}"
        )));
    }
    let s = standardize_design(x, y)?;
    let (n, p) = s.z.shape();
    let nf = n as f64;
    let l1 = alpha * l1_ratio;
    let l2 = alpha * (1.0 - l1_ratio);
    let norms: Vec<f64> = (0..p).map(|j| s.z.column(j).norm_squared() / nf).collect();
    let mut beta = vec![0.0; p];
    let mut resid = s.y.clone();
    let mut converged = false;
    let mut sweeps = 0;
    while sweeps < opts.max_iter {
        sweeps += 1;
        let mut max_delta: f64 = 0.0;
        for j in 0..p {
            if norms[j] == 0.0 {
                continue;
            }
            let col = s.z.column(j);
            let rho = col.dot(&resid) / nf + norms[j] * beta[j];
            let new = soft_threshold(rho, l1) / (norms[j] + l2);
            let delta = new - beta[j];
            if delta != 0.0 {
                resid.axpy(-delta, &col, 1.0);
                beta[j] = new;
                max_delta = max_delta.max(delta.abs());
            }
        }
        if max_delta < opts.tol && kkt_residual(&s.z, &s.y, &beta, alpha, l1_ratio) < opts.tol {
            converged = true;
            break;
        }
    }
    Ok(to_raw(
        &s,
        &beta,
        Regularization::ElasticNet { alpha, l1_ratio },
        converged,
        sweeps,
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regressor {
    Lr,
    Enr,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BaselineMethod {
    pub features: FeatureKind,
    pub regressor: Regressor,
}

impl BaselineMethod {
    pub const ALL: [&'static str; 4] = ["mean-lr", "mean-enr", "afq-lr", "afq-enr"];
}

impl fmt::Display for BaselineMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let a = match self.features {
            FeatureKind::Mean => "mean",
            FeatureKind::AlongTract => "afq",
        };
        let b = match self.regressor {
            Regressor::Lr => "lr",
            Regressor::Enr => "enr",
        };
        write!(f, "{a}-{b}")
    }
}

impl FromStr for BaselineMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (a, b) = s
            .split_once(['-', '+'])
            .ok_or_else(|| Error::Config(format!("unknown baseline {s:?}; expected one of {:?}", Self::ALL)))?;
        let features = match a.to_ascii_lowercase().as_str() {
            "mean" => FeatureKind::Mean,
            "afq" | "along" => FeatureKind::AlongTract,
            _ => return Err(Error::Config(format!("unknown feature kind {a:?}"))),
        };
        let regressor = match b.to_ascii_lowercase().as_str() {
            "lr" => Regressor::Lr,
            "enr" => Regressor::Enr,
            _ => return Err(Error::Config(format!("unknown regressor {b:?}"))),
        };
        Ok(Self { features, regressor })
    }
}

/// Grid for elastic-net model selection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnetGrid {
    pub alphas: Vec<f64>,
    pub l1_ratios: Vec<f64>,
    /// Share of the training subjects held out for selection.
    pub validation_fraction: f64,
    pub options: EnetOptions,
}

impl Default for EnetGrid {
    fn default() -> Self {
        Self {
            alphas: (-4..=1).map(|e| 10f64.powi(e)).collect(),
            l1_ratios: vec![0.1, 0.5, 0.9],
            validation_fraction: 0.2,
            options: EnetOptions::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineReport {
    pub method: String,
    pub mae: f64,
    pub mae_std: f64,
    pub r: f64,
    pub n_test: usize,
    pub hyperparams: serde_json::Value,
}

/// Picks `(alpha, l1_ratio)` by validation MSE on a seeded split of the
/// training rows, then refits on all of them.
pub fn select_elastic_net(x: &[Vec<f64>], y: &[f64], grid: &EnetGrid, seed: u64) -> Result<LinearModel> {
    let n = x.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_for(seed, &[stream::SPLIT, n as u64]));
    let n_val = ((n as f64 * grid.validation_fraction).round() as usize).clamp(1, n.saturating_sub(2).max(1));
    let (val, fit) = order.split_at(n_val);
    let pick = |idx: &[usize]| -> (Vec<Vec<f64>>, Vec<f64>) {
        (idx.iter().map(|&i| x[i].clone()).collect(), idx.iter().map(|&i| y[i]).collect())
    };
    let (xf, yf) = pick(fit);
    let (xv, yv) = pick(val);
    let mut best: Option<(f64, f64, f64)> = None;
    for &l1 in &grid.l1_ratios {
        for &a in &grid.alphas {
            let m = fit_elastic_net(&xf, &yf, a, l1, grid.options)?;
            let mse = xv
                .iter()
                .zip(&yv)
                .map(|(r, t)| m.predict(r).map(|p| (p - t).powi(2)))
                .sum::<Result<f64>>()?
                / yv.len() as f64;
            if best.is_none_or(|b| mse < b.0) {
                best = Some((mse, a, l1));
            }
        }
    }
    let (_, a, l1) = best.ok_or_else(|| Error::Config("empty elastic-net grid".into()))?;
    fit_elastic_net(x, y, a, l1, grid.options)
}

/// Fits on the train rows and scores the test rows.
pub fn run_baseline_on(
    method: BaselineMethod,
    train: &[(FeatureVector, f64)],
    test: &[(FeatureVector, f64)],
    grid: &EnetGrid,
    seed: u64,
) -> Result<(LinearModel, BaselineReport)> {
    if train.len() < 3 || test.len() < 2 {
        return Err(Error::Config(format!(
            "baseline needs >= 3 train and >= 2 test subjects, got {} and {}",
            train.len(),
            test.len()
        )));
    }
    let x: Vec<Vec<f64>> = train.iter().map(|(f, _)| f.values.clone()).collect();
    let y: Vec<f64> = train.iter().map(|(_, s)| *s).collect();
    let model = match method.regressor {
        Regressor::Lr => fit_ols(&x, &y)?,
        Regressor::Enr => select_elastic_net(&x, &y, grid, seed)?,
    };
    let pred = test
        .iter()
        .map(|(f, _)| model.predict(&f.values))
        .collect::<Result<Vec<_>>>()?;
    let truth: Vec<f64> = test.iter().map(|(_, s)| *s).collect();
    let rep = evaluate(&pred, &truth)?;
    let hyperparams = match model.regularization {
        Regularization::None => serde_json::json!({}),
        Regularization::ElasticNet { alpha, l1_ratio } => serde_json::json!({
            "alpha": alpha,
            "l1_ratio": l1_ratio,
            "converged": model.converged,
        }),
    };
    Ok((
        model,
        BaselineReport {
            method: method.to_string(),
            mae: rep.mae,
            mae_std: rep.mae_std,
            r: rep.pearson_r,
            n_test: rep.n,
            hyperparams,
        },
    ))
}

/// Feature rows for one manifest split, in manifest order.
pub fn split_features(manifest: &CohortManifest, split: Split, kind: FeatureKind) -> Result<Vec<(FeatureVector, f64)>> {
    let rows: Vec<_> = manifest.split(split).collect();
    rows.par_iter()
        .map(|r| {
            let mut t = read_tract(&r.path)?;
            t.subject_id = r.subject_id.clone();
            Ok((extract(&t, kind)?, r.score))
        })
        .collect()
}

pub fn run_baseline(manifest: &CohortManifest, method: BaselineMethod, grid: &EnetGrid, seed: u64) -> Result<BaselineReport> {
    let train = split_features(manifest, Split::Train, method.features)?;
    let test = split_features(manifest, Split::Test, method.features)?;
    Ok(run_baseline_on(method, &train, &test, grid, seed)?.1)
}
