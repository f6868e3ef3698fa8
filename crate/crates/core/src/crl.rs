//! Critical region localization: partition the whole tract into point sets,
//! count max-pool wins per point, accumulate over repeated passes and keep
//! the top-weighted points.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{flatten_points, PointLabels, Tract, POINT_CHANNELS};
use crate::nn::Tensor;
use crate::pointnet::{ForwardTrace, PointNetRegressor};
use crate::rng::{rng_for, stream};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CrlConfig {
    pub set_size: usize,
    pub repeats: usize,
    pub top_fraction: f64,
    pub seed: u64,
}

impl Default for CrlConfig {
    fn default() -> Self {
        Self {
            set_size: 2048,
            repeats: 10,
            top_fraction: 0.05,
            seed: 0,
        }
    }
}

impl CrlConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.top_fraction > 0.0 && self.top_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "top_fraction must be in (0, 1], got {}",
                self.top_fraction
            )));
        }
        if self.repeats == 0 || self.set_size == 0 {
            return Err(Error::Config("repeats and set_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// A uniform random permutation of `0..p` cut into chunks of `n`; the last
/// chunk may be shorter.
pub fn partition_points<R: Rng>(p: usize, n: usize, rng: &mut R) -> Result<Vec<Vec<usize>>> {
    if p == 0 || n == 0 {
        return Err(Error::EmptyInput(format!("cannot partition P={p} points into sets of {n}")));
    }
    let mut perm: Vec<usize> = (0..p).collect();
    perm.shuffle(rng);
    Ok(perm.chunks(n).map(<[usize]>::to_vec).collect())
}

/// Weight of each set member = number of global feature channels whose argmax
/// it holds. Members that win no channel are omitted.
pub fn contributing_point_selection(trace: &ForwardTrace, set: &[usize]) -> Result<BTreeMap<usize, u64>> {
    let mut out = BTreeMap::new();
    for (c, &local) in trace.argmax.iter().enumerate() {
        let global = set.get(local).ok_or_else(|| {
            Error::Internal(format!(
                "argmax {local} of channel {c} outside a set of {} points",
                set.len()
            ))
        })?;
        *out.entry(*global).or_insert(0) += 1;
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrlWeightMap {
    pub subject_id: String,
    pub weights: Vec<u64>,
    pub critical: Vec<bool>,
    /// `(streamline_id, point_index)` per flattened point.
    pub provenance: Vec<(u32, u32)>,
    pub points: Vec<[f32; 3]>,
    pub repeats: usize,
    pub sets_per_pass: usize,
    pub features: usize,
}

impl CrlWeightMap {
    pub fn total_weight(&self) -> u64 {
        self.weights.iter().sum()
    }

    pub fn critical_count(&self) -> usize {
        self.critical.iter().filter(|&&c| c).count()
    }
}

/// `ceil(fraction · p)`, ignoring floating-point excess below 1e-9.
pub fn top_count(p: usize, fraction: f64) -> usize {
    let x = fraction * p as f64;
    let k = if (x - x.round()).abs() < 1e-9 { x.round() } else { x.ceil() };
    (k as usize).clamp(1, p.max(1))
}

/// Marks the `k` highest weights, ties broken by ascending row.
pub fn select_top(weights: &[u64], k: usize) -> Vec<bool> {
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| weights[b].cmp(&weights[a]).then(a.cmp(&b)));
    let mut mask = vec![false; weights.len()];
    for &i in order.iter().take(k) {
        mask[i] = true;
    }
    mask
}

pub fn localize(model: &PointNetRegressor, tract: &Tract, cfg: &CrlConfig) -> Result<CrlWeightMap> {
    cfg.validate()?;
    let table = flatten_points(tract)?;
    let rows: Vec<[f64; POINT_CHANNELS]> = table.rows.iter().map(|r| model.input_stats.apply(r)).collect();
    let p = rows.len();
    let features = model.global_dim();

    let passes: Vec<Vec<u64>> = (0..cfg.repeats)
        .into_par_iter()
        .map(|m| {
            let mut rng = rng_for(cfg.seed, &[stream::CRL, m as u64]);
            let mut w = vec![0u64; p];
            for set in partition_points(p, cfg.set_size, &mut rng)? {
                let x = Tensor::new(
                    vec![1, set.len(), POINT_CHANNELS],
                    set.iter().flat_map(|&i| rows[i]).collect(),
                )?;
                let trace = &model.forward_eval(&x)?[0];
                for (g, c) in contributing_point_selection(trace, &set)? {
                    w[g] += c;
                }
            }
            Ok(w)
        })
        .collect::<Result<_>>()?;

    let mut weights = vec![0u64; p];
    for w in passes {
        weights.iter_mut().zip(w).for_each(|(a, b)| *a += b);
    }
    let critical = select_top(&weights, top_count(p, cfg.top_fraction));
    Ok(CrlWeightMap {
        subject_id: tract.subject_id.clone(),
        weights,
        critical,
        provenance: table.provenance,
        points: tract.streamlines.iter().flat_map(|s| s.points.iter().copied()).collect(),
        repeats: cfg.repeats,
        sets_per_pass: p.div_ceil(cfg.set_size),
        features,
    })
}

pub const WEIGHTS_HEADER: &str = "streamline_id,point_index,x,y,z,weight,critical";

pub fn write_weights_csv(map: &CrlWeightMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::with_capacity(map.weights.len() * 48);
    let io = |e| Error::io(path, e);
    writeln!(out, "{WEIGHTS_HEADER}").map_err(io)?;
    for i in 0..map.weights.len() {
        let (s, k) = map.provenance[i];
        let [x, y, z] = map.points[i];
        writeln!(
            out,
            "{s},{k},{x:?},{y:?},{z:?},{},{}",
            map.weights[i],
            u8::from(map.critical[i])
        )
        .map_err(io)?;
    }
    std::fs::write(path, out).map_err(io)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelShare {
    pub label_id: u32,
    pub name: String,
    pub count: usize,
    pub percent: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionHistogram {
    pub critical_points: usize,
    /// Labels holding at least one critical point, by ascending id.
    pub labels: Vec<LabelShare>,
}

/// Share of critical points per label.
pub fn region_histogram(map: &CrlWeightMap, labels: &PointLabels) -> Result<RegionHistogram> {
    if labels.labels.len() != map.critical.len() {
        return Err(Error::Validation(format!(
            "label file has {} rows but the tract has {} points",
            labels.labels.len(),
            map.critical.len()
        )));
    }
    let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
    for (&l, _) in labels.labels.iter().zip(&map.critical).filter(|(_, &c)| c) {
        *counts.entry(l).or_insert(0) += 1;
    }
    let total = map.critical_count();
    Ok(RegionHistogram {
        critical_points: total,
        labels: counts
            .into_iter()
            .map(|(id, count)| LabelShare {
                label_id: id,
                name: labels.name(id),
                count,
                percent: 100.0 * count as f64 / total.max(1) as f64,
            })
            .collect(),
    })
}
