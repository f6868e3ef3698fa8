//! Acceptance suite. Prints one `[PASS]`/`[FAIL]` line per criterion and exits
//! nonzero if any criterion fails.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tractcloud::baselines::{
    extract, fit_elastic_net, fit_ols, resample_streamline, run_baseline_on, tract_profile, BaselineMethod,
    EnetGrid, EnetOptions, FeatureKind, PROFILE_NODES,
};
use tractcloud::crl::{contributing_point_selection, localize, top_count, CrlConfig};
use tractcloud::io::{read_manifest, read_tract, Split, Streamline, Tract};
use tractcloud::metrics::{mae, pearson_r};
use tractcloud::nn::{BnStats, Mode, Tape, Tensor, Var};
use tractcloud::pointnet::{ModelConfig, PointNetRegressor};
use tractcloud::synth::{generate_cohort, region_mask, write_cohort, SynthConfig};
use tractcloud::trainer::{
    load_subjects, paired_siamese_loss, siamese_loss_tape, total_loss, train, SiameseBatch, TrainConfig,
};

struct Report {
    failures: usize,
    total: usize,
}

impl Report {
    fn line(&mut self, name: &str, pass: bool, detail: String) {
        self.total += 1;
        if !pass {
            self.failures += 1;
        }
        println!("[{}] {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_tensor(shape: Vec<usize>, r: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| r.random_range(lo..hi)).collect()).unwrap()
}

// ---------------------------------------------------------------- gradients

const H: f64 = 1e-5;
const GRAD_TOL: f64 = 1e-4;
/// Denominator floor for the relative error. Central differences of an O(1)
/// loss carry about 1e-11 of rounding noise; gradients smaller than this floor
/// are compared on an absolute scale of 1e-10.
const GRAD_FLOOR: f64 = 1e-6;

#[derive(Default)]
struct GradStats {
    max_rel: f64,
    checked: usize,
    skipped: usize,
}

impl GradStats {
    fn record(&mut self, analytic: f64, numeric: f64) {
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR);
        self.max_rel = self.max_rel.max(rel);
        self.checked += 1;
    }

    fn merge(&mut self, o: GradStats) {
        self.max_rel = self.max_rel.max(o.max_rel);
        self.checked += o.checked;
        self.skipped += o.skipped;
    }
}

type Build<'a> = dyn Fn(&mut Tape, &[Var]) -> Var + 'a;

/// Compares tape gradients of a scalar built from leaves holding `tensors`
/// against central differences. Entries whose perturbation flips a ReLU gate
/// or a max-pool winner are skipped.
fn check_graph(tensors: &[Tensor], build: &Build) -> GradStats {
    let mut tape = Tape::new();
    let vars: Vec<Var> = tensors.iter().map(|t| tape.leaf(t.clone().with_grad())).collect();
    let loss = build(&mut tape, &vars);
    let sig = tape.branch_signature();
    tape.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(tensors)
        .map(|(v, t)| tape.grad(*v).map(<[f64]>::to_vec).unwrap_or(vec![0.0; t.len()]))
        .collect();
    let eval = |ts: &[Tensor]| {
        let mut tp = Tape::new();
        let vs: Vec<Var> = ts.iter().map(|t| tp.leaf(t.clone())).collect();
        let l = build(&mut tp, &vs);
        (tp.value(l).data()[0], tp.branch_signature())
    };
    let mut stats = GradStats::default();
    for k in 0..tensors.len() {
        for j in 0..tensors[k].len() {
            let mut plus = tensors.to_vec();
            plus[k].data_mut()[j] += H;
            let mut minus = tensors.to_vec();
            minus[k].data_mut()[j] -= H;
            let (fp, sp) = eval(&plus);
            let (fm, sm) = eval(&minus);
            if sp != sig || sm != sig {
                stats.skipped += 1;
                continue;
            }
            stats.record(analytic[k][j], (fp - fm) / (2.0 * H));
        }
    }
    stats
}

fn layer_gradients(cases: usize) -> BTreeMap<&'static str, GradStats> {
    let mut out: BTreeMap<&'static str, GradStats> = BTreeMap::new();
    let mut r = rng(101);
    for _ in 0..cases {
        let (b, n, cin, cout) = (
            r.random_range(1..=3),
            r.random_range(2..=5),
            r.random_range(1..=4),
            r.random_range(1..=4),
        );
        let coef = |r: &mut ChaCha8Rng, len: usize| -> Vec<f64> { (0..len).map(|_| r.random_range(-1.0..1.0)).collect() };

        let x3 = random_tensor(vec![b, n, cin], &mut r, -2.0, 2.0);
        let w = random_tensor(vec![cin, cout], &mut r, -1.0, 1.0);
        let bias = random_tensor(vec![cout], &mut r, -1.0, 1.0);
        let c = coef(&mut r, b * n * cout);
        let s = check_graph(&[x3.clone(), w.clone(), bias.clone()], &|t, v| {
            let y = t.shared_linear(v[0], v[1], v[2]).unwrap();
            t.weighted_sum(y, c.clone()).unwrap()
        });
        out.entry("shared-linear").or_default().merge(s);

        let x2 = random_tensor(vec![b + 1, cin], &mut r, -2.0, 2.0);
        let c = coef(&mut r, (b + 1) * cout);
        let s = check_graph(&[x2, w.clone(), bias.clone()], &|t, v| {
            let y = t.shared_linear(v[0], v[1], v[2]).unwrap();
            t.weighted_sum(y, c.clone()).unwrap()
        });
        out.entry("linear").or_default().merge(s);

        let c = coef(&mut r, b * n * cin);
        let s = check_graph(&[x3.clone()], &|t, v| {
            let y = t.relu(v[0]);
            t.weighted_sum(y, c.clone()).unwrap()
        });
        out.entry("relu").or_default().merge(s);

        let gamma = random_tensor(vec![cin], &mut r, 0.5, 1.5);
        let beta = random_tensor(vec![cin], &mut r, -0.5, 0.5);
        let c = coef(&mut r, b * n * cin);
        for mode in [Mode::Train, Mode::Eval] {
            let mut stats = BnStats::new(cin);
            stats.mean = coef(&mut r, cin);
            stats.var = (0..cin).map(|_| r.random_range(0.5..2.0)).collect();
            let s = check_graph(&[x3.clone(), gamma.clone(), beta.clone()], &|t, v| {
                let mut st = stats.clone();
                let y = t.batchnorm(v[0], v[1], v[2], &mut st, 0.9, 1e-5, mode).unwrap();
                t.weighted_sum(y, c.clone()).unwrap()
            });
            out.entry(if mode == Mode::Train { "batchnorm-train" } else { "batchnorm-eval" })
                .or_default()
                .merge(s);
        }

        let c = coef(&mut r, b * cin);
        let s = check_graph(&[x3.clone()], &|t, v| {
            let (y, _) = t.maxpool_points(v[0]).unwrap();
            t.weighted_sum(y, c.clone()).unwrap()
        });
        out.entry("maxpool-points").or_default().merge(s);
    }
    out
}

fn composite_loss(model: &PointNetRegressor, batch: &SiameseBatch, w: f64, grads: bool) -> (f64, Vec<usize>, Vec<Vec<f64>>) {
    let mut m = model.clone();
    let mut tape = Tape::new();
    let fwd = m.forward_tape(&mut tape, batch.inputs.clone(), Mode::Train).unwrap();
    let loss = siamese_loss_tape(&mut tape, fwd.output, batch, w).unwrap();
    let value = tape.value(loss.total).data()[0];
    let sig = tape.branch_signature();
    let mut g = Vec::new();
    if grads {
        tape.backward(loss.total).unwrap();
        m.net.zero_grad();
        m.net.collect_grads(&tape, &fwd.params).unwrap();
        g = m
            .net
            .params()
            .map(|p| p.grad().map(<[f64]>::to_vec).unwrap_or(vec![0.0; p.len()]))
            .collect();
    }
    (value, sig, g)
}

fn composite_gradients(cases: usize) -> GradStats {
    let mut total = GradStats::default();
    let mut r = rng(202);
    for case in 0..cases {
        let cfg = ModelConfig {
            shared_widths: vec![r.random_range(3..=6), r.random_range(3..=6)],
            head_widths: vec![r.random_range(3..=5), 1],
            ..ModelConfig::default()
        };
        let model = PointNetRegressor::new(&cfg, 1000 + case as u64).unwrap();
        // two or more pairs: with a single pair the head batch norm sees two rows
        // and maps them to +-gamma whatever the input
        let (b, n) = (r.random_range(2..=3), r.random_range(2..=5));
        let inputs = random_tensor(vec![2 * b, n, 5], &mut r, -1.5, 1.5);
        let y1: Vec<f64> = (0..b).map(|_| r.random_range(-2.0..2.0)).collect();
        let y2: Vec<f64> = (0..b).map(|_| r.random_range(-2.0..2.0)).collect();
        let batch = SiameseBatch::new(inputs, y1, y2, &vec![true; 2 * b]).unwrap();
        let (_, sig, analytic) = composite_loss(&model, &batch, 0.1, true);
        let sizes: Vec<usize> = model.net.params().map(Tensor::len).collect();
        for (k, &len) in sizes.iter().enumerate() {
            for j in 0..len {
                let shifted = |d: f64| {
                    let mut m = model.clone();
                    m.net.params_mut().nth(k).unwrap().data_mut()[j] += d;
                    composite_loss(&m, &batch, 0.1, false)
                };
                let (fp, sp, _) = shifted(H);
                let (fm, sm, _) = shifted(-H);
                if sp != sig || sm != sig {
                    total.skipped += 1;
                    continue;
                }
                total.record(analytic[k][j], (fp - fm) / (2.0 * H));
            }
        }
    }
    total
}

fn gradient_suite(rep: &mut Report) {
    let t0 = Instant::now();
    let layers = layer_gradients(20);
    let composite = composite_gradients(24);
    let secs = t0.elapsed().as_secs_f64();
    let mut detail = String::new();
    let mut ok = true;
    for (name, s) in &layers {
        ok &= s.max_rel < GRAD_TOL && s.checked > 0;
        detail.push_str(&format!("{name} {:.2e} ({} checked, {} skipped); ", s.max_rel, s.checked, s.skipped));
    }
    ok &= composite.max_rel < GRAD_TOL && composite.checked > 0 && secs < 60.0;
    detail.push_str(&format!(
        "composite L_pre+0.1*L_ps over 24 configs of 2-3 pairs {:.2e} ({} checked, {} skipped at kinks); {secs:.1}s",
        composite.max_rel, composite.checked, composite.skipped
    ));
    rep.line("gradient suite (h=1e-5, max rel err < 1e-4, < 60 s)", ok, detail);
}

// ---------------------------------------------------------------- losses

fn loss_identities(rep: &mut Report) {
    let mut r = rng(303);
    let mut shift_max: f64 = 0.0;
    let mut w0_max: f64 = 0.0;
    for _ in 0..200 {
        let b = r.random_range(1..=16);
        // dyadic values keep every difference exact
        let y1: Vec<f64> = (0..b).map(|_| r.random_range(-800..800) as f64 / 8.0).collect();
        let y2: Vec<f64> = (0..b).map(|_| r.random_range(-800..800) as f64 / 8.0).collect();
        let c: Vec<f64> = (0..b).map(|_| r.random_range(-400..400) as f64 / 4.0).collect();
        let p1: Vec<f64> = (0..b).map(|i| y1[i] + c[i]).collect();
        let p2: Vec<f64> = (0..b).map(|i| y2[i] + c[i]).collect();
        shift_max = shift_max.max(paired_siamese_loss(&y1, &y2, &p1, &p2).unwrap());

        let q1: Vec<f64> = (0..b).map(|_| r.random_range(50.0..150.0)).collect();
        let q2: Vec<f64> = (0..b).map(|_| r.random_range(50.0..150.0)).collect();
        let t = total_loss(&y1, &y2, &q1, &q2, 0.0).unwrap();
        let mut s1 = 0.0;
        let mut s2 = 0.0;
        for i in 0..b {
            s1 += (q1[i] - y1[i]) * (q1[i] - y1[i]);
            s2 += (q2[i] - y2[i]) * (q2[i] - y2[i]);
        }
        let oracle = (s1 / b as f64 + s2 / b as f64) / 2.0;
        w0_max = w0_max.max((t.total - oracle).abs() / oracle.max(1.0));
        w0_max = w0_max.max(if t.total == t.pre { 0.0 } else { 1.0 });
    }
    let worked = total_loss(&[10.0], &[8.0], &[9.0], &[9.0], 0.1).unwrap();
    let worked_ok = worked.pre == 1.0 && worked.ps == 4.0 && worked.total == 1.4;

    let mut tape = Tape::new();
    let pred = tape.leaf(Tensor::new(vec![2, 1], vec![9.0, 9.0]).unwrap());
    let batch = SiameseBatch::new(Tensor::zeros(vec![2, 1, 5]).unwrap(), vec![10.0], vec![8.0], &[true, true]).unwrap();
    let lv = siamese_loss_tape(&mut tape, pred, &batch, 0.1).unwrap();
    let tape_ok = tape.value(lv.pre).data()[0] == 1.0
        && tape.value(lv.ps).data()[0] == 4.0
        && tape.value(lv.total).data()[0] == 1.4;

    rep.line(
        "loss identities",
        shift_max == 0.0 && w0_max < 1e-12 && worked_ok && tape_ok,
        format!(
            "per-pair shift max loss {shift_max:e} over 200 cases; w=0 vs mean branch MSE max rel diff {w0_max:.1e}; worked pair (L_pre, L_ps, L_total) = ({}, {}, {}) (tape path {})",
            worked.pre,
            worked.ps,
            worked.total,
            if tape_ok { "identical" } else { "differs" }
        ),
    );
}

// ---------------------------------------------------------------- invariance

fn random_tract(r: &mut ChaCha8Rng, p: usize, id: &str) -> Tract {
    let mut sizes = Vec::new();
    let mut left = p;
    while left > 0 {
        let s = if left <= 3 { left } else { r.random_range(2..=left.min(40)) };
        let s = if left - s == 1 { s + 1 } else { s };
        sizes.push(s);
        left -= s;
    }
    let streamlines = sizes
        .into_iter()
        .map(|s| Streamline {
            points: (0..s)
                .map(|_| [r.random_range(-40.0..40.0), r.random_range(-40.0..40.0), r.random_range(-10.0..10.0)])
                .collect(),
            fa: (0..s).map(|_| r.random_range(0.2..0.9)).collect(),
        })
        .collect();
    Tract::new(id, streamlines).unwrap()
}

fn invariance_suite(rep: &mut Report) {
    let model = PointNetRegressor::new(&ModelConfig::default(), 77).unwrap();
    let f = model.global_dim();
    let mut r = rng(404);

    let mut perm_ok = 0;
    let mut dup_ok = 0;
    let trials = 20;
    for _ in 0..trials {
        let n = r.random_range(8..=200);
        let x = random_tensor(vec![1, n, 5], &mut r, -2.0, 2.0);
        let base = model.forward_eval(&x).unwrap()[0].prediction;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut r);
        let permuted: Vec<f64> = order.iter().flat_map(|&i| x.data()[i * 5..(i + 1) * 5].to_vec()).collect();
        let xp = Tensor::new(vec![1, n, 5], permuted).unwrap();
        perm_ok += usize::from(model.forward_eval(&xp).unwrap()[0].prediction.to_bits() == base.to_bits());
        let extra = r.random_range(1..=n);
        let mut dup = x.data().to_vec();
        for _ in 0..extra {
            let i = r.random_range(0..n);
            dup.extend_from_slice(&x.data()[i * 5..(i + 1) * 5]);
        }
        let xd = Tensor::new(vec![1, n + extra, 5], dup).unwrap();
        dup_ok += usize::from(model.forward_eval(&xd).unwrap()[0].prediction.to_bits() == base.to_bits());
    }

    let mut cps_ok = 0;
    for _ in 0..trials {
        let n = r.random_range(1..=300);
        let x = random_tensor(vec![1, n, 5], &mut r, -2.0, 2.0);
        let set: Vec<usize> = (0..n).map(|i| i * 3 + 1).collect();
        let trace = &model.forward_eval(&x).unwrap()[0];
        let total: u64 = contributing_point_selection(trace, &set).unwrap().values().sum();
        cps_ok += usize::from(total == f as u64);
    }

    let mut conserve_ok = 0;
    let mut top_ok = 0;
    let triples = 100;
    for t in 0..triples {
        let p = r.random_range(2..=400);
        let n = r.random_range(1..=300);
        let m = r.random_range(1..=4);
        let tract = random_tract(&mut r, p, &format!("t{t}"));
        let cfg = CrlConfig {
            set_size: n,
            repeats: m,
            top_fraction: 0.05,
            seed: t as u64,
        };
        let map = localize(&model, &tract, &cfg).unwrap();
        conserve_ok += usize::from(map.total_weight() == (m * f * p.div_ceil(n)) as u64);
        let k = top_count(p, 0.05);
        let min_crit = map.weights.iter().zip(&map.critical).filter(|(_, &c)| c).map(|(w, _)| *w).min();
        let max_rest = map.weights.iter().zip(&map.critical).filter(|(_, &c)| !c).map(|(w, _)| *w).max();
        top_ok += usize::from(
            map.critical_count() == k && min_crit.zip(max_rest).is_none_or(|(lo, hi)| hi <= lo),
        );
    }
    rep.line(
        "invariance suite",
        perm_ok == trials && dup_ok == trials && cps_ok == trials && conserve_ok == triples && top_ok == triples,
        format!(
            "permutation bitwise {perm_ok}/{trials}; duplicates bitwise {dup_ok}/{trials}; CPS set sum == {f} {cps_ok}/{trials}; localize total == M*{f}*ceil(P/N) {conserve_ok}/{triples} triples; top-5% selection {top_ok}/{triples}"
        ),
    );
}

// ---------------------------------------------------------------- oracles

fn ols_oracle(r: &mut ChaCha8Rng) -> f64 {
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let n = r.random_range(20..=60);
        let p = r.random_range(1..=8);
        let scales: Vec<f64> = (0..p).map(|_| 10f64.powf(r.random_range(-2.0..2.0))).collect();
        let x: Vec<Vec<f64>> = (0..n)
            .map(|_| scales.iter().map(|s| s * r.random_range(-1.0..1.0) + r.random_range(-1.0..1.0)).collect())
            .collect();
        let y: Vec<f64> = x
            .iter()
            .map(|row| 3.0 + row.iter().enumerate().map(|(j, v)| (j as f64 - 2.0) * v).sum::<f64>() + r.random_range(-1.0..1.0))
            .collect();
        let model = fit_ols(&x, &y).unwrap();
        let a = DMatrix::from_fn(n, p + 1, |i, j| if j == 0 { 1.0 } else { x[i][j - 1] });
        let theta = a.pseudo_inverse(1e-13).unwrap() * DVector::from_column_slice(&y);
        worst = worst.max((model.intercept - theta[0]).abs());
        for j in 0..p {
            worst = worst.max((model.coefficients[j] - theta[j + 1]).abs());
        }
    }
    worst
}

fn kkt_oracle(r: &mut ChaCha8Rng, tol: f64) -> (f64, usize, usize) {
    let mut worst: f64 = 0.0;
    let mut converged = 0;
    let mut fits = 0;
    for _ in 0..12 {
        let n = r.random_range(30..=80);
        let p = r.random_range(2..=12);
        let x: Vec<Vec<f64>> = (0..n).map(|_| (0..p).map(|_| r.random_range(-2.0..2.0)).collect()).collect();
        let y: Vec<f64> = x.iter().map(|row| row[0] * 2.0 - row[1] + r.random_range(-0.5..0.5)).collect();
        let nf = n as f64;
        let mean: Vec<f64> = (0..p).map(|j| x.iter().map(|row| row[j]).sum::<f64>() / nf).collect();
        let sd: Vec<f64> = (0..p)
            .map(|j| (x.iter().map(|row| (row[j] - mean[j]).powi(2)).sum::<f64>() / nf).sqrt())
            .collect();
        for &alpha in &[1e-3, 1e-2, 0.1, 0.5] {
            for &l1 in &[0.1, 0.5, 1.0] {
                let opts = EnetOptions { max_iter: 100_000, tol };
                let m = fit_elastic_net(&x, &y, alpha, l1, opts).unwrap();
                fits += 1;
                converged += usize::from(m.converged);
                let resid: Vec<f64> = x.iter().zip(&y).map(|(row, t)| t - m.predict(row).unwrap()).collect();
                for j in 0..p {
                    let beta = m.coefficients[j] * sd[j];
                    let zr: f64 = x.iter().zip(&resid).map(|(row, e)| (row[j] - mean[j]) / sd[j] * e).sum();
                    let g = -zr / nf + alpha * (1.0 - l1) * beta;
                    let v = if beta != 0.0 {
                        (g + alpha * l1 * beta.signum()).abs()
                    } else {
                        (g.abs() - alpha * l1).max(0.0)
                    };
                    worst = worst.max(v);
                }
            }
        }
    }
    (worst, converged, fits)
}

fn oracle_interp(points: &[[f64; 3]], fa: &[f64], nodes: usize) -> Vec<f64> {
    let cum: Vec<f64> = std::iter::once(0.0)
        .chain(points.windows(2).scan(0.0, |acc, w| {
            *acc += ((w[1][0] - w[0][0]).powi(2) + (w[1][1] - w[0][1]).powi(2) + (w[1][2] - w[0][2]).powi(2)).sqrt();
            Some(*acc)
        }))
        .collect();
    let total = cum[cum.len() - 1];
    (0..nodes)
        .map(|k| {
            let s = total * k as f64 / (nodes - 1) as f64;
            let i = cum.partition_point(|&c| c <= s).clamp(1, cum.len() - 1) - 1;
            let t = (s - cum[i]) / (cum[i + 1] - cum[i]);
            fa[i] + t * (fa[i + 1] - fa[i])
        })
        .collect()
}

fn profile_oracle(r: &mut ChaCha8Rng) -> (f64, f64) {
    let mut worst: f64 = 0.0;
    let mut spacing: f64 = 0.0;
    for t in 0..20 {
        let nos = r.random_range(1..=12);
        let mut streamlines = Vec::new();
        for _ in 0..nos {
            let len = r.random_range(2..=30);
            let mut p = [r.random_range(-5.0..5.0), r.random_range(-5.0..5.0), r.random_range(-5.0..5.0)];
            let mut pts = Vec::new();
            for _ in 0..len {
                pts.push(p.map(|v: f64| v as f32));
                p = [p[0] + r.random_range(0.5..2.0), p[1] + r.random_range(-1.0..1.0), p[2] + r.random_range(-1.0..1.0)];
            }
            let fa: Vec<f32> = (0..len).map(|_| r.random_range(0.1f32..0.9)).collect();
            let mut s = Streamline { points: pts, fa };
            if r.random_bool(0.5) {
                s.points.reverse();
                s.fa.reverse();
            }
            streamlines.push(s);
        }
        let tract = Tract::new(format!("p{t}"), streamlines).unwrap();
        let got = tract_profile(&tract, PROFILE_NODES).unwrap();

        // independent orientation + interpolation
        let mut acc = vec![0.0; PROFILE_NODES];
        let mut starts: Vec<[f64; 3]> = Vec::new();
        for (i, s) in tract.streamlines.iter().enumerate() {
            let mut pts: Vec<[f64; 3]> = s.points.iter().map(|p| p.map(f64::from)).collect();
            let mut fa: Vec<f64> = s.fa.iter().map(|&v| f64::from(v)).collect();
            let (a, b) = (pts[0], *pts.last().unwrap());
            let flip = if i == 0 {
                b < a
            } else {
                let m = [0, 1, 2].map(|k| starts.iter().map(|s| s[k]).sum::<f64>() / starts.len() as f64);
                let d = |q: [f64; 3]| ((q[0] - m[0]).powi(2) + (q[1] - m[1]).powi(2) + (q[2] - m[2]).powi(2)).sqrt();
                d(b) < d(a)
            };
            if flip {
                pts.reverse();
                fa.reverse();
            }
            starts.push(pts[0]);
            for (k, v) in oracle_interp(&pts, &fa, PROFILE_NODES).into_iter().enumerate() {
                acc[k] += v;
            }

            // arc-length spacing of the resampled positions
            let (pos, _) = resample_streamline(&pts, &fa, PROFILE_NODES).unwrap();
            let cum: Vec<f64> = std::iter::once(0.0)
                .chain(pts.windows(2).scan(0.0, |c, w| {
                    *c += ((w[1][0] - w[0][0]).powi(2) + (w[1][1] - w[0][1]).powi(2) + (w[1][2] - w[0][2]).powi(2)).sqrt();
                    Some(*c)
                }))
                .collect();
            let total = cum[cum.len() - 1];
            let arc_of = |q: [f64; 3]| -> f64 {
                // segment containing q: smallest distance to the segment
                let mut best = (f64::INFINITY, 0.0);
                for i in 0..pts.len() - 1 {
                    let (a, b) = (pts[i], pts[i + 1]);
                    let ab = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
                    let len2 = ab.iter().map(|v| v * v).sum::<f64>();
                    let t = if len2 > 0.0 {
                        (((q[0] - a[0]) * ab[0] + (q[1] - a[1]) * ab[1] + (q[2] - a[2]) * ab[2]) / len2).clamp(0.0, 1.0)
                    } else {
                        0.0
                    };
                    let proj = [a[0] + t * ab[0], a[1] + t * ab[1], a[2] + t * ab[2]];
                    let d = ((q[0] - proj[0]).powi(2) + (q[1] - proj[1]).powi(2) + (q[2] - proj[2]).powi(2)).sqrt();
                    if d < best.0 {
                        best = (d, cum[i] + t * (cum[i + 1] - cum[i]));
                    }
                }
                best.1
            };
            let arcs: Vec<f64> = pos.iter().map(|&q| arc_of(q)).collect();
            for w in arcs.windows(2) {
                spacing = spacing.max(((w[1] - w[0]) - total / (PROFILE_NODES - 1) as f64).abs());
            }
        }
        for k in 0..PROFILE_NODES {
            worst = worst.max((got.values[k] - acc[k] / nos as f64).abs());
        }
        worst = worst.max((got.values[PROFILE_NODES] - nos as f64).abs());
    }
    (worst, spacing)
}

fn metric_oracle(r: &mut ChaCha8Rng) -> f64 {
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let n = r.random_range(2..=200);
        let a: Vec<f64> = (0..n).map(|_| r.random_range(80.0..160.0)).collect();
        let b: Vec<f64> = a.iter().map(|v| 0.5 * v + r.random_range(-20.0..20.0)).collect();
        let mut s = 0.0;
        for i in 0..n {
            s += (a[i] - b[i]).abs();
        }
        let m = s / n as f64;
        let mut v = 0.0;
        for i in 0..n {
            v += ((a[i] - b[i]).abs() - m).powi(2);
        }
        let sd = (v / n as f64).sqrt();
        let (got_m, got_sd) = mae(&a, &b).unwrap();
        worst = worst.max((got_m - m).abs()).max((got_sd - sd).abs());

        let (mut ma, mut mb) = (0.0, 0.0);
        for i in 0..n {
            ma += a[i];
            mb += b[i];
        }
        ma /= n as f64;
        mb /= n as f64;
        let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
        for i in 0..n {
            sab += (a[i] - ma) * (b[i] - mb);
            saa += (a[i] - ma).powi(2);
            sbb += (b[i] - mb).powi(2);
        }
        let rr = sab / (saa * sbb).sqrt();
        worst = worst.max((pearson_r(&a, &b).unwrap().r - rr).abs());
    }
    worst
}

fn oracle_suite(rep: &mut Report) {
    let mut r = rng(505);
    let ols = ols_oracle(&mut r);
    let tol = 1e-7;
    let (kkt, conv, fits) = kkt_oracle(&mut r, tol);
    let (profile, spacing) = profile_oracle(&mut r);
    let metrics = metric_oracle(&mut r);
    rep.line(
        "oracle suite",
        ols < 1e-8 && kkt < tol && conv == fits && profile < 1e-9 && spacing < 1e-9 && metrics < 1e-12,
        format!(
            "OLS vs pseudo-inverse {ols:.1e}; elastic-net KKT residual {kkt:.1e} < tol {tol:e} ({conv}/{fits} converged); tract_profile vs arc-length oracle {profile:.1e} (node spacing deviation {spacing:.1e}); MAE/Pearson vs loops {metrics:.1e}"
        ),
    );
}

// ---------------------------------------------------------------- end to end

const E2E_EPOCHS: usize = 60;
const E2E_POINTS: usize = 256;

fn end_to_end(rep: &mut Report, dir: &Path) {
    let synth = SynthConfig {
        seed: 2024,
        ..SynthConfig::default()
    };
    let cohort = generate_cohort(&synth).unwrap();
    let manifest_path = write_cohort(&cohort, dir.join("cohort")).unwrap();
    let manifest = read_manifest(&manifest_path).unwrap();
    let train_set = load_subjects(&manifest, Split::Train).unwrap();
    let test_set = load_subjects(&manifest, Split::Test).unwrap();

    // oracle: least squares on the true components, fit on train, scored on test
    let truth: BTreeMap<&str, (f64, f64)> = cohort
        .truth
        .subjects
        .iter()
        .map(|s| (s.subject_id.as_str(), (s.mean_region_fa, s.nos as f64)))
        .collect();
    let comp = |ids: &[tractcloud::trainer::Subject]| -> Vec<Vec<f64>> {
        ids.iter().map(|s| { let t = truth[s.id.as_str()]; vec![t.0, t.1] }).collect()
    };
    let oracle = fit_ols(&comp(&train_set), &train_set.iter().map(|s| s.score).collect::<Vec<_>>()).unwrap();
    let test_truth: Vec<f64> = test_set.iter().map(|s| s.score).collect();
    let oracle_pred: Vec<f64> = comp(&test_set).iter().map(|x| oracle.predict(x).unwrap()).collect();
    let oracle_mae = mae(&oracle_pred, &test_truth).unwrap().0;
    let oracle_r = pearson_r(&oracle_pred, &test_truth).unwrap().r;
    println!(
        "[INFO] cohort: {} train / {} test subjects; oracle test r {oracle_r:.4}, oracle residual MAE {oracle_mae:.4}",
        train_set.len(),
        test_set.len()
    );

    let cfg = TrainConfig {
        epochs: E2E_EPOCHS,
        sample_points: E2E_POINTS,
        seed: 31,
        eval_every: 10,
        ..TrainConfig::default()
    };
    let t0 = Instant::now();
    let outcome = train(&train_set, &test_set, &cfg, |l| {
        if let (Some(m), Some(r)) = (l.test_mae, l.test_r) {
            println!("[INFO] w=0.1 epoch {:>3}: L_total {:.3} test_mae {m:.4} test_r {r:.4}", l.epoch, l.l_total);
        }
    })
    .unwrap();
    let secs = t0.elapsed().as_secs_f64();
    let last = outcome.log.last().unwrap();
    let (r_final, mae_final) = (last.test_r.unwrap(), last.test_mae.unwrap());
    rep.line(
        "synthetic e2e (a) test r >= 0.8 and MAE <= 1.5x oracle MAE in <= 200 epochs, < 15 min",
        r_final >= 0.8 && mae_final <= 1.5 * oracle_mae && E2E_EPOCHS <= 200 && secs < 900.0,
        format!(
            "{E2E_EPOCHS} epochs, N={E2E_POINTS}: test r {r_final:.4}, test MAE {mae_final:.4} vs 1.5x{oracle_mae:.4} = {:.4}; {secs:.0}s",
            1.5 * oracle_mae
        ),
    );

    let ablation_cfg = TrainConfig {
        loss_weight_w: 0.0,
        ..cfg.clone()
    };
    let ablation = train(&train_set, &test_set, &ablation_cfg, |_| {}).unwrap();
    let ab_last = ablation.log.last().unwrap();
    let differs = ablation.log[0].l_total != outcome.log[0].l_total;
    rep.line(
        "synthetic e2e (b) ablation w=0 vs w=0.1 both complete and log r",
        ab_last.test_r.is_some() && last.test_r.is_some() && differs,
        format!(
            "w=0.1 test r {:.4} (MAE {:.4}); w=0 test r {:.4} (MAE {:.4}); epoch-1 L_total {:.4} vs {:.4}",
            r_final,
            mae_final,
            ab_last.test_r.unwrap_or(f64::NAN),
            ab_last.test_mae.unwrap_or(f64::NAN),
            outcome.log[0].l_total,
            ablation.log[0].l_total
        ),
    );

    // (c) critical region enrichment on test subjects
    let crl = CrlConfig {
        set_size: E2E_POINTS,
        repeats: 10,
        top_fraction: 0.05,
        seed: 8,
    };
    let test_rows: Vec<_> = manifest.split(Split::Test).collect();
    let mut ratios = Vec::new();
    let mut jaccard = Vec::new();
    for (k, row) in test_rows.iter().enumerate() {
        let tract = read_tract(&row.path).unwrap();
        let mask = region_mask(&tract, &cohort.truth.region);
        let map = localize(&outcome.model, &tract, &crl).unwrap();
        let inside = map.critical.iter().zip(&mask).filter(|(c, m)| **c && **m).count();
        let base = mask.iter().filter(|&&m| m).count() as f64 / mask.len() as f64;
        ratios.push(inside as f64 / map.critical_count() as f64 / base);
        if k < 10 {
            let other = localize(&outcome.model, &tract, &CrlConfig { seed: 9, ..crl }).unwrap();
            let both = map.critical.iter().zip(&other.critical).filter(|(a, b)| **a && **b).count();
            let either = map.critical.iter().zip(&other.critical).filter(|(a, b)| **a || **b).count();
            jaccard.push(both as f64 / either as f64);
        }
    }
    let enrichment = ratios.iter().sum::<f64>() / ratios.len() as f64;
    rep.line(
        "synthetic e2e (c) CRL critical points enriched >= 3x in planted region",
        enrichment >= 3.0,
        format!(
            "mean enrichment {enrichment:.3} over {} test subjects (min {:.3}, max {:.3}); M=10, sets of {E2E_POINTS}, top 5%",
            ratios.len(),
            ratios.iter().cloned().fold(f64::INFINITY, f64::min),
            ratios.iter().cloned().fold(0.0, f64::max)
        ),
    );
    println!(
        "[INFO] critical-mask Jaccard across CRL seeds 8 and 9: mean {:.3} over {} test subjects",
        jaccard.iter().sum::<f64>() / jaccard.len() as f64,
        jaccard.len()
    );

    // (d) along-tract ENR vs mean-feature LR
    let feats = |kind: FeatureKind, split: Split| -> Vec<_> {
        manifest
            .split(split)
            .map(|row| (extract(&read_tract(&row.path).unwrap(), kind).unwrap(), row.score))
            .collect()
    };
    let grid = EnetGrid::default();
    let mut reports = BTreeMap::new();
    for name in BaselineMethod::ALL {
        let method: BaselineMethod = name.parse().unwrap();
        let (_, rep_b) = run_baseline_on(
            method,
            &feats(method.features, Split::Train),
            &feats(method.features, Split::Test),
            &grid,
            0,
        )
        .unwrap();
        reports.insert(name, rep_b);
    }
    let (afq, mean) = (&reports["afq-enr"], &reports["mean-lr"]);
    rep.line(
        "synthetic e2e (d) along-tract ENR test r > mean-feature LR test r",
        afq.r > mean.r,
        format!(
            "afq-enr r {:.4} (MAE {:.4}) vs mean-lr r {:.4} (MAE {:.4}); mean-enr r {:.4}, afq-lr r {:.4}",
            afq.r, afq.mae, mean.r, mean.mae, reports["mean-enr"].r, reports["afq-lr"].r
        ),
    );
}

// ---------------------------------------------------------------- determinism

fn tractcloud(args: &[&str]) -> bool {
    let out = Command::new(env!("CARGO_BIN_EXE_tractcloud"))
        .args(args)
        .output()
        .expect("binary runs");
    if !out.status.success() {
        eprintln!("tractcloud {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    }
    out.status.success()
}

fn files_under(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn determinism(rep: &mut Report, dir: &Path) {
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let mut same = Vec::new();
    let mut ran = true;
    for run in ["a", "b"] {
        let root = dir.join(run);
        let data = s(&root.join("data"));
        let manifest = format!("{data}/manifest.csv");
        let ckpt = s(&root.join("train/model.wmck"));
        ran &= tractcloud(&["synth", "--subjects", "24", "--seed", "5", "--streamlines-min", "15", "--streamlines-max", "30", "--out", &data]);
        ran &= tractcloud(&[
            "train", "--manifest", &manifest, "--out", &s(&root.join("train")), "--epochs", "3", "--points", "96",
            "--shared-widths", "16,32", "--head-widths", "16,1", "--eval-every", "1", "--seed", "9", "--batch-pairs", "4",
        ]);
        ran &= tractcloud(&["predict", "--checkpoint", &ckpt, "--manifest", &manifest, "--out", &s(&root.join("predict"))]);
        ran &= tractcloud(&[
            "eval", "--predictions", &s(&root.join("predict/predictions.csv")), "--manifest", &manifest, "--out",
            &s(&root.join("eval")),
        ]);
        ran &= tractcloud(&[
            "localize", "--checkpoint", &ckpt, "--manifest", &manifest, "--out", &s(&root.join("localize")), "--M", "3",
            "--set-size", "96", "--seed", "4",
        ]);
        ran &= tractcloud(&["baseline", "--manifest", &manifest, "--kind", "afq", "--model", "enr", "--out", &s(&root.join("baseline"))]);
    }
    let mut counts = 0;
    for stage in ["data", "train", "predict", "eval", "localize", "baseline"] {
        let a = files_under(&dir.join("a").join(stage));
        let b = files_under(&dir.join("b").join(stage));
        counts += a.len();
        // run.json records the output directory's inputs, which differ only by the a/b prefix
        let strip = |m: BTreeMap<PathBuf, Vec<u8>>, tag: &str| -> BTreeMap<PathBuf, Vec<u8>> {
            m.into_iter()
                .map(|(k, v)| {
                    let v = if k == Path::new("run.json") {
                        String::from_utf8(v).unwrap().replace(&format!("/{tag}/"), "/X/").into_bytes()
                    } else {
                        v
                    };
                    (k, v)
                })
                .collect()
        };
        same.push((stage, !a.is_empty() && strip(a, "a") == strip(b, "b")));
    }

    // predict + eval reproduce the trainer's logged final test MAE exactly
    let log = std::fs::read_to_string(dir.join("a/train/log.csv")).unwrap();
    let logged: f64 = log.lines().last().unwrap().split(',').nth(5).unwrap().parse().unwrap();
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.join("a/eval/report.json")).unwrap()).unwrap();
    let evaluated = report["mae"].as_f64().unwrap();

    let ok = ran && same.iter().all(|(_, s)| *s) && logged.to_bits() == evaluated.to_bits();
    let detail = same
        .iter()
        .map(|(k, v)| format!("{k} {}", if *v { "identical" } else { "DIFFERENT" }))
        .collect::<Vec<_>>()
        .join(", ");
    rep.line(
        "determinism (rerun with identical seed/config/data)",
        ok,
        format!("{counts} artifacts compared byte for byte: {detail}; eval MAE {evaluated} == logged final test MAE {logged}"),
    );
}

fn main() -> ExitCode {
    let dir = tempfile::tempdir().unwrap();
    let mut rep = Report { failures: 0, total: 0 };
    let t0 = Instant::now();
    gradient_suite(&mut rep);
    loss_identities(&mut rep);
    invariance_suite(&mut rep);
    oracle_suite(&mut rep);
    determinism(&mut rep, &dir.path().join("det"));
    end_to_end(&mut rep, dir.path());
    println!(
        "acceptance: {}/{} criteria passed in {:.0}s",
        rep.total - rep.failures,
        rep.total,
        t0.elapsed().as_secs_f64()
    );
    if rep.failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
