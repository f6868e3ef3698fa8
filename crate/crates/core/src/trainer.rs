//! Siamese pairing, point sampling, the paired loss, the training loop and inference.

use std::io::Write as _;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{
    flatten_points, format_f64, read_tract, Checkpoint, CohortManifest, PointTable, Split, Tract,
    POINT_CHANNELS,
};
use crate::metrics::{mae, pearson_r};
use crate::nn::{AdamaxConfig, AdamaxState, Mode, Tape, Tensor, Var};
use crate::pointnet::{ChannelStats, ModelConfig, PointNetRegressor, TargetScaling};
use crate::rng::{hash_id, rng_for, stream};

pub type Row = [f64; POINT_CHANNELS];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Pairs per optimizer step; each step sees `2 × batch_pairs` subjects.
    pub batch_pairs: usize,
    pub weight_decay: f64,
    /// Weight `w` of the paired term in `L_pre + w·L_ps`.
    pub loss_weight_w: f64,
    pub sample_points: usize,
    pub seed: u64,
    pub eval_every: usize,
    /// Train on z-scored targets instead of raw scores.
    pub standardize_targets: bool,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 500,
            lr: 1e-3,
            batch_pairs: 16,
            weight_decay: 5e-3,
            loss_weight_w: 0.1,
            sample_points: 2048,
            seed: 0,
            eval_every: 10,
            standardize_targets: false,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.loss_weight_w >= 0.0 && self.loss_weight_w.is_finite()) {
            return bad("loss_weight_w must be a finite value >= 0");
        }
        if self.sample_points == 0 {
            return bad("sample_points must be >= 1");
        }
        if self.epochs == 0 || self.batch_pairs == 0 || self.eval_every == 0 {
            return bad("epochs, batch_pairs and eval_every must be >= 1");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(self.weight_decay >= 0.0) {
            return bad("lr and weight_decay must be finite and >= 0");
        }
        self.model.validate()
    }

    pub fn adamax(&self) -> AdamaxConfig {
        AdamaxConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamaxConfig::default()
        }
    }
}

/// One subject's point table and score.
#[derive(Clone, Debug, PartialEq)]
pub struct Subject {
    pub id: String,
    pub score: f64,
    pub table: PointTable,
}

impl Subject {
    pub fn from_tract(tract: &Tract, score: f64) -> Result<Self> {
        Ok(Self {
            id: tract.subject_id.clone(),
            score,
            table: flatten_points(tract)?,
        })
    }
}

/// Reads every tract of one split, in manifest order.
pub fn load_subjects(manifest: &CohortManifest, split: Split) -> Result<Vec<Subject>> {
    let rows: Vec<_> = manifest.split(split).collect();
    rows.par_iter()
        .map(|r| {
            let mut tract = read_tract(&r.path)?;
            tract.subject_id = r.subject_id.clone();
            Subject::from_tract(&tract, r.score)
        })
        .collect()
}

/// Draws `n` rows: uniformly without replacement when `P ≥ n`, otherwise all
/// `P` rows followed by `n − P` uniform draws with replacement.
pub fn sample_point_cloud<R: Rng>(rows: &[Row], n: usize, rng: &mut R) -> Result<(Vec<Row>, Vec<usize>)> {
    let p = rows.len();
    if p == 0 {
        return Err(Error::EmptyInput("cannot sample from an empty point table".into()));
    }
    if n == 0 {
        return Err(Error::Config("sample size must be >= 1".into()));
    }
    let idx: Vec<usize> = if p >= n {
        index::sample(rng, p, n).into_vec()
    } else {
        (0..p).chain((p..n).map(|_| rng.random_range(0..p))).collect()
    };
    Ok((idx.iter().map(|&i| rows[i]).collect(), idx))
}

fn check_pairs(y1: &[f64], y2: &[f64], p1: &[f64], p2: &[f64]) -> Result<()> {
    let b = y1.len();
    if y2.len() != b || p1.len() != b || p2.len() != b {
        return Err(Error::Dimension {
            op: "paired loss",
            left: vec![y1.len(), y2.len()],
            right: vec![p1.len(), p2.len()],
        });
    }
    if b == 0 {
        return Err(Error::EmptyInput("paired loss needs at least one pair".into()));
    }
    Ok(())
}

/// `(1/B) Σ ((y1 − y2) − (p1 − p2))²`.
pub fn paired_siamese_loss(y1: &[f64], y2: &[f64], p1: &[f64], p2: &[f64]) -> Result<f64> {
    check_pairs(y1, y2, p1, p2)?;
    let s: f64 = (0..y1.len())
        .map(|i| {
            let d = (y1[i] - y2[i]) - (p1[i] - p2[i]);
            d * d
        })
        .sum();
    Ok(s / y1.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub total: f64,
    pub pre: f64,
    pub ps: f64,
}

pub fn total_loss(y1: &[f64], y2: &[f64], p1: &[f64], p2: &[f64], w: f64) -> Result<LossTerms> {
    let ps = paired_siamese_loss(y1, y2, p1, p2)?;
    let mse = |y: &[f64], p: &[f64]| {
        y.iter().zip(p).map(|(a, b)| (b - a) * (b - a)).sum::<f64>() / y.len() as f64
    };
    let pre = 0.5 * (mse(y1, p1) + mse(y2, p2));
    Ok(LossTerms {
        total: pre + w * ps,
        pre,
        ps,
    })
}

/// Both branches of `B` pairs stacked into one `2B×N×5` batch: rows `0..B`
/// are the first members, rows `B..2B` the second.
#[derive(Clone, Debug, PartialEq)]
pub struct SiameseBatch {
    pub inputs: Tensor,
    /// Targets in model units.
    pub y1: Vec<f64>,
    pub y2: Vec<f64>,
    /// Per-row weight of the squared error in `L_pre` (length `2B`).
    pub pre_weights: Vec<f64>,
}

impl SiameseBatch {
    /// `counted[r]` is false for a subject whose prediction loss is already
    /// counted elsewhere this epoch.
    pub fn new(inputs: Tensor, y1: Vec<f64>, y2: Vec<f64>, counted: &[bool]) -> Result<Self> {
        let b = y1.len();
        if y2.len() != b || counted.len() != 2 * b || inputs.shape()[0] != 2 * b {
            return Err(Error::Dimension {
                op: "siamese batch",
                left: inputs.shape().to_vec(),
                right: vec![y1.len(), y2.len(), counted.len()],
            });
        }
        let n = counted.iter().filter(|&&c| c).count().max(1) as f64;
        let pre_weights = counted.iter().map(|&c| if c { 1.0 / n } else { 0.0 }).collect();
        Ok(Self {
            inputs,
            y1,
            y2,
            pre_weights,
        })
    }

    pub fn pairs(&self) -> usize {
        self.y1.len()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub pre: Var,
    pub ps: Var,
}

/// Records `L_pre + w·L_ps` on `pred` (`2B×1`, model units).
pub fn siamese_loss_tape(tape: &mut Tape, pred: Var, batch: &SiameseBatch, w: f64) -> Result<LossVars> {
    let b = batch.pairs();
    let targets: Vec<f64> = batch.y1.iter().chain(&batch.y2).copied().collect();
    let err = tape.sub_const(pred, &targets)?;
    let sq = tape.square(err);
    let pre = tape.weighted_sum(sq, batch.pre_weights.clone())?;

    let p1 = tape.slice_rows(pred, 0, b)?;
    let p2 = tape.slice_rows(pred, b, b)?;
    let dp = tape.sub(p1, p2)?;
    let dy: Vec<f64> = batch.y1.iter().zip(&batch.y2).map(|(a, c)| a - c).collect();
    let gap = tape.sub_const(dp, &dy)?;
    let gap_sq = tape.square(gap);
    let ps = tape.mean(gap_sq);

    let wps = tape.scale(ps, w);
    let total = tape.add(pre, wps)?;
    Ok(LossVars { total, pre, ps })
}

/// A finished optimizer step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub loss: LossTerms,
    /// Train-mode predictions, model units, length `2B`.
    pub predictions: Vec<f64>,
}

/// Forward both branches with shared weights, backpropagate the composite
/// loss and apply one Adamax update.
pub fn train_step(
    model: &mut PointNetRegressor,
    opt: &mut AdamaxState,
    batch: &SiameseBatch,
    w: f64,
) -> Result<StepResult> {
    let mut tape = Tape::new();
    let fwd = model.forward_tape(&mut tape, batch.inputs.clone(), Mode::Train)?;
    let loss = siamese_loss_tape(&mut tape, fwd.output, batch, w)?;
    tape.backward(loss.total)?;
    model.net.zero_grad();
    model.net.collect_grads(&tape, &fwd.params)?;
    opt.step(model.net.params_mut())?;
    model.net.zero_grad();
    let scalar = |v: Var| tape.value(v).data()[0];
    Ok(StepResult {
        loss: LossTerms {
            total: scalar(loss.total),
            pre: scalar(loss.pre),
            ps: scalar(loss.ps),
        },
        predictions: tape.value(fwd.output).data().to_vec(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub l_total: f64,
    pub l_pre: f64,
    pub l_ps: f64,
    pub train_mae: f64,
    pub test_mae: Option<f64>,
    pub test_r: Option<f64>,
}

pub const LOG_HEADER: &str = "epoch,L_total,L_pre,L_ps,train_mae,test_mae,test_r";

impl EpochLog {
    pub fn csv_line(&self) -> String {
        let opt = |v: Option<f64>| v.map(format_f64).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{}",
            self.epoch,
            format_f64(self.l_total),
            format_f64(self.l_pre),
            format_f64(self.l_ps),
            format_f64(self.train_mae),
            opt(self.test_mae),
            opt(self.test_r)
        )
    }
}

pub fn write_log(log: &[EpochLog], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    writeln!(out, "{LOG_HEADER}").map_err(|e| Error::io(path, e))?;
    for l in log {
        writeln!(out, "{}", l.csv_line()).map_err(|e| Error::io(path, e))?;
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictConfig {
    pub sample_points: usize,
    pub repeats: usize,
    pub seed: u64,
}

fn standardized_rows(table: &PointTable, stats: &ChannelStats) -> Vec<Row> {
    table.rows.iter().map(|r| stats.apply(r)).collect()
}

fn predict_rows(model: &PointNetRegressor, rows: &[Row], id: &str, cfg: &PredictConfig) -> Result<f64> {
    if cfg.repeats == 0 {
        return Err(Error::Config("repeats must be >= 1".into()));
    }
    let mut sum = 0.0;
    for r in 0..cfg.repeats {
        let mut rng = rng_for(cfg.seed, &[stream::PREDICT, hash_id(id), r as u64]);
        let (pts, _) = sample_point_cloud(rows, cfg.sample_points, &mut rng)?;
        let x = Tensor::new(
            vec![1, cfg.sample_points, POINT_CHANNELS],
            pts.into_iter().flatten().collect(),
        )?;
        sum += model.forward_eval(&x)?[0].prediction;
    }
    Ok(sum / cfg.repeats as f64)
}

/// Eval-mode score for one subject's raw point table. Sampling is keyed by
/// `(seed, subject id, repeat)`.
pub fn predict_table(model: &PointNetRegressor, table: &PointTable, id: &str, cfg: &PredictConfig) -> Result<f64> {
    if table.is_empty() {
        return Err(Error::Validation(format!("subject {id:?} has no points")));
    }
    predict_rows(model, &standardized_rows(table, &model.input_stats), id, cfg)
}

pub fn predict(model: &PointNetRegressor, tract: &Tract, cfg: &PredictConfig) -> Result<f64> {
    let table = flatten_points(tract)?;
    predict_table(model, &table, &tract.subject_id, cfg)
}

/// Parallel over subjects; output order follows `subjects`.
pub fn predict_subjects(model: &PointNetRegressor, subjects: &[Subject], cfg: &PredictConfig) -> Result<Vec<f64>> {
    subjects
        .par_iter()
        .map(|s| predict_table(model, &s.table, &s.id, cfg))
        .collect()
}

pub struct TrainOutcome {
    pub model: PointNetRegressor,
    pub log: Vec<EpochLog>,
}

impl TrainOutcome {
    pub fn checkpoint(&self, cfg: &TrainConfig) -> Result<Checkpoint> {
        let echo = serde_json::to_value(cfg).map_err(|e| Error::Internal(e.to_string()))?;
        Ok(self.model.to_checkpoint(cfg.seed, echo))
    }
}

/// Shuffle, then pair `2k` with `2k+1`. An odd leftover is paired with a
/// uniformly chosen subject already used this epoch, whose prediction loss is
/// not counted a second time. Returns `(first, second, second_counts)`.
pub fn epoch_pairs<R: Rng>(n: usize, rng: &mut R) -> Vec<(usize, usize, bool)> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut pairs: Vec<_> = order.chunks_exact(2).map(|c| (c[0], c[1], true)).collect();
    if n % 2 == 1 && n > 1 {
        let j = rng.random_range(0..n - 1);
        pairs.push((order[n - 1], order[j], false));
    }
    pairs
}

fn eval_split(
    model: &PointNetRegressor,
    subjects: &[Subject],
    cfg: &TrainConfig,
) -> Result<Option<(f64, f64)>> {
    if subjects.len() < 2 {
        return Ok(None);
    }
    let pcfg = PredictConfig {
        sample_points: cfg.sample_points,
        repeats: 1,
        seed: cfg.seed,
    };
    let pred = predict_subjects(model, subjects, &pcfg)?;
    let truth: Vec<f64> = subjects.iter().map(|s| s.score).collect();
    Ok(Some((mae(&pred, &truth)?.0, pearson_r(&pred, &truth)?.r)))
}

/// Trains from scratch. `on_epoch` sees every log row as soon as it exists.
pub fn train(
    train_set: &[Subject],
    test_set: &[Subject],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.len() < 2 {
        return Err(Error::Config(format!(
            "training needs at least 2 subjects, got {}",
            train_set.len()
        )));
    }
    let n = cfg.sample_points;
    let mut model = PointNetRegressor::new(&cfg.model, rng_for(cfg.seed, &[stream::INIT]).random())?;
    model.input_stats = ChannelStats::fit(train_set.iter().map(|s| &s.table))?;
    let scores: Vec<f64> = train_set.iter().map(|s| s.score).collect();
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    if cfg.standardize_targets {
        let var = scores.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / scores.len() as f64;
        model.target = TargetScaling::Standardized { mean, std: var.sqrt() };
    }
    model.set_output_bias(model.target.to_model(mean));

    let rows: Vec<Vec<Row>> = train_set
        .iter()
        .map(|s| standardized_rows(&s.table, &model.input_stats))
        .collect();
    let mut opt = AdamaxState::new(cfg.adamax(), model.net.params());
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        let mut rng = rng_for(cfg.seed, &[stream::EPOCH, epoch as u64]);
        let pairs = epoch_pairs(train_set.len(), &mut rng);
        let samples: Vec<Vec<Row>> = rows
            .par_iter()
            .enumerate()
            .map(|(i, r)| {
                let mut rng = rng_for(cfg.seed, &[stream::SAMPLE, epoch as u64, i as u64]);
                sample_point_cloud(r, n, &mut rng).map(|(pts, _)| pts)
            })
            .collect::<Result<_>>()?;

        let (mut sums, mut weight) = (LossTerms { total: 0.0, pre: 0.0, ps: 0.0 }, 0.0);
        let (mut abs_err, mut counted) = (0.0, 0usize);
        for chunk in pairs.chunks(cfg.batch_pairs) {
            let b = chunk.len();
            let members: Vec<(usize, bool)> = chunk
                .iter()
                .map(|&(a, _, _)| (a, true))
                .chain(chunk.iter().map(|&(_, c, counts)| (c, counts)))
                .collect();
            let mut data = Vec::with_capacity(2 * b * n * POINT_CHANNELS);
            for &(s, _) in &members {
                data.extend(samples[s].iter().flatten());
            }
            let inputs = Tensor::new(vec![2 * b, n, POINT_CHANNELS], data)?;
            let y = |s: usize| model.target.to_model(train_set[s].score);
            let batch = SiameseBatch::new(
                inputs,
                chunk.iter().map(|p| y(p.0)).collect(),
                chunk.iter().map(|p| y(p.1)).collect(),
                &members.iter().map(|m| m.1).collect::<Vec<_>>(),
            )?;
            let step = train_step(&mut model, &mut opt, &batch, cfg.loss_weight_w)?;
            let wt = b as f64;
            sums.total += wt * step.loss.total;
            sums.pre += wt * step.loss.pre;
            sums.ps += wt * step.loss.ps;
            weight += wt;
            for (&(s, c), &p) in members.iter().zip(&step.predictions) {
                if c {
                    abs_err += (model.target.to_score(p) - train_set[s].score).abs();
                    counted += 1;
                }
            }
        }

        let evaluated = if epoch % cfg.eval_every == 0 || epoch == cfg.epochs {
            eval_split(&model, test_set, cfg)?
        } else {
            None
        };
        let entry = EpochLog {
            epoch,
            l_total: sums.total / weight,
            l_pre: sums.pre / weight,
            l_ps: sums.ps / weight,
            train_mae: abs_err / counted.max(1) as f64,
            test_mae: evaluated.map(|e| e.0),
            test_r: evaluated.map(|e| e.1),
        };
        if !entry.l_total.is_finite() {
            return Err(Error::Internal(format!("training diverged at epoch {epoch}")));
        }
        on_epoch(&entry);
        log.push(entry);
    }
    Ok(TrainOutcome { model, log })
}
