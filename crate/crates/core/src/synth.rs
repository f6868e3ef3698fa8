//! Synthetic arc-shaped tract cohorts with a planted regional-FA and NoS score signal.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{
    write_labels, write_manifest, write_tract, CohortManifest, ManifestRow, PointLabels, Split,
    Streamline, Tract,
};
use crate::rng::{rng_for, stream};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub center: [f64; 3],
    /// mm
    pub radius: f64,
}

impl Region {
    pub fn contains(&self, p: [f64; 3]) -> bool {
        let d2: f64 = (0..3).map(|k| (p[k] - self.center[k]).powi(2)).sum();
        d2.sqrt() <= self.radius
    }
}

/// Arc in the x-y plane around the origin. Angles in degrees.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArcGeometry {
    pub radius: f64,
    pub start_deg: f64,
    pub sweep_deg: f64,
    /// Per-subject Gaussian shift of the arc center, mm.
    pub center_jitter: f64,
    /// Standard deviation of each streamline's cross-section offset, mm.
    pub thickness: f64,
    /// Standard deviation of each endpoint's angle, degrees.
    pub end_jitter_deg: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignalCoeffs {
    pub a0: f64,
    /// Coefficient of mean FA inside the region.
    pub a1: f64,
    /// Coefficient of the streamline count.
    pub a2: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub subject_count: usize,
    /// Inclusive range.
    pub streamlines_per_subject: (usize, usize),
    pub points_per_streamline: (usize, usize),
    pub arc: ArcGeometry,
    pub critical_region: Region,
    pub signal_coeffs: SignalCoeffs,
    pub noise_std: f64,
    /// Inclusive range of the subject-level FA offset inside the region.
    pub region_fa_offset: (f64, f64),
    pub fa_point_noise: f64,
    /// Standard deviation of a subject-level FA bump unrelated to the score.
    pub nuisance_fa_std: f64,
    /// Arc position `u ∈ [0, 1]` of that bump.
    pub nuisance_center: f64,
    pub test_fraction: f64,
    /// Emit per-point anatomical labels (arc segments).
    pub labels: bool,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            subject_count: 200,
            streamlines_per_subject: (60, 140),
            points_per_streamline: (20, 40),
            arc: ArcGeometry {
                radius: 40.0,
                start_deg: 15.0,
                sweep_deg: 150.0,
                center_jitter: 1.5,
                thickness: 3.0,
                end_jitter_deg: 4.0,
            },
            critical_region: Region {
                // on the arc at 60 degrees
                center: [20.0, 34.641016151377545, 0.0],
                radius: 7.0,
            },
            signal_coeffs: SignalCoeffs {
                a0: 0.0,
                a1: 150.0,
                a2: 0.1,
            },
            noise_std: 6.4,
            region_fa_offset: (0.1, 0.4),
            fa_point_noise: 0.02,
            nuisance_fa_std: 0.06,
            nuisance_center: 0.8,
            test_fraction: 0.2,
            labels: true,
            seed: 0,
        }
    }
}

/// Segment names used for the synthetic per-point labels, in arc order.
pub const SEGMENT_NAMES: [&str; 4] = ["temporal", "supramarginal", "precentral", "frontal"];

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.subject_count < 2 {
            return bad("subject_count must be >= 2".into());
        }
        let (s0, s1) = self.streamlines_per_subject;
        let (p0, p1) = self.points_per_streamline;
        if s0 == 0 || s0 > s1 || p0 < 2 || p0 > p1 {
            return bad(format!(
                "empty or invalid ranges: streamlines {s0}..={s1}, points {p0}..={p1} (need >= 1 and >= 2)"
            ));
        }
        if !(self.critical_region.radius > 0.0) {
            return bad("critical region radius must be > 0".into());
        }
        if !(self.noise_std >= 0.0) || !(self.fa_point_noise >= 0.0) || !(self.nuisance_fa_std >= 0.0) {
            return bad("noise standard deviations must be >= 0".into());
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return bad("test_fraction must be in [0, 1)".into());
        }
        let (lo, hi) = self.region_fa_offset;
        if !(0.0 <= lo && lo <= hi && hi <= 0.5) {
            return bad("region_fa_offset must satisfy 0 <= min <= max <= 0.5".into());
        }
        let a = &self.arc;
        if !(a.radius > 0.0 && a.sweep_deg > 0.0 && a.sweep_deg <= 360.0)
            || a.thickness < 0.0
            || a.center_jitter < 0.0
            || a.end_jitter_deg < 0.0
        {
            return bad("arc radius and sweep must be positive, jitters >= 0".into());
        }
        let reach = self.critical_region.radius + 3.0 * (a.thickness + a.center_jitter);
        let dist = distance_to_arc(a, self.critical_region.center);
        if dist > reach {
            return bad(format!(
                "critical region lies outside the bundle envelope ({dist:.2} mm from the arc, reach {reach:.2} mm)"
            ));
        }
        Ok(())
    }
}

fn distance_to_arc(a: &ArcGeometry, c: [f64; 3]) -> f64 {
    let point = |deg: f64| {
        let t = deg.to_radians();
        [a.radius * t.cos(), a.radius * t.sin(), 0.0]
    };
    let dist = |p: [f64; 3]| (0..3).map(|k| (p[k] - c[k]).powi(2)).sum::<f64>().sqrt();
    let phi = c[1].atan2(c[0]).to_degrees();
    let rel = (phi - a.start_deg).rem_euclid(360.0);
    let ends = dist(point(a.start_deg)).min(dist(point(a.start_deg + a.sweep_deg)));
    if rel <= a.sweep_deg {
        ends.min(dist(point(phi)))
    } else {
        ends
    }
}

/// Baseline FA along normalized arc position `u ∈ [0, 1]`.
fn baseline_fa(u: f64) -> f64 {
    0.42 + 0.12 * (PI * u).sin() + 0.03 * (3.0 * PI * u).cos()
}

fn bump(u: f64, center: f64) -> f64 {
    (-(u - center).powi(2) / (2.0 * 0.1 * 0.1)).exp()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectTruth {
    pub subject_id: String,
    pub mean_region_fa: f64,
    pub nos: usize,
    pub noise: f64,
    pub score: f64,
    /// Subject-level FA offset applied inside the region.
    pub region_offset: f64,
    pub region_points: usize,
    pub point_count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub region: Region,
    pub signal_coeffs: SignalCoeffs,
    pub subjects: Vec<SubjectTruth>,
    /// Per-point inside-region masks in flattened row order. Not serialized;
    /// recompute with [`region_mask`].
    #[serde(skip)]
    pub masks: Vec<Vec<bool>>,
}

pub struct Cohort {
    pub tracts: Vec<Tract>,
    pub labels: Option<Vec<PointLabels>>,
    pub manifest: CohortManifest,
    pub truth: GroundTruth,
}

/// True for each flattened point within `region.radius` of the center.
pub fn region_mask(tract: &Tract, region: &Region) -> Vec<bool> {
    tract
        .streamlines
        .iter()
        .flat_map(|s| s.points.iter())
        .map(|p| region.contains([f64::from(p[0]), f64::from(p[1]), f64::from(p[2])]))
        .collect()
}

struct Generated {
    tract: Tract,
    labels: PointLabels,
    truth: SubjectTruth,
    mask: Vec<bool>,
}

fn segment_names() -> BTreeMap<u32, String> {
    SEGMENT_NAMES
        .iter()
        .enumerate()
        .map(|(i, n)| (i as u32 + 1, (*n).to_string()))
        .collect()
}

fn generate_subject(cfg: &SynthConfig, index: usize) -> Result<Generated> {
    let id = format!("s{:04}", index + 1);
    let mut rng = rng_for(cfg.seed, &[stream::SYNTH, index as u64]);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let a = &cfg.arc;

    let nos = rng.random_range(cfg.streamlines_per_subject.0..=cfg.streamlines_per_subject.1);
    let offset = rng.random_range(cfg.region_fa_offset.0..=cfg.region_fa_offset.1);
    let nuisance = cfg.nuisance_fa_std * unit.sample(&mut rng);
    let shift = [
        a.center_jitter * unit.sample(&mut rng),
        a.center_jitter * unit.sample(&mut rng),
        a.center_jitter * unit.sample(&mut rng),
    ];

    let mut streamlines = Vec::with_capacity(nos);
    let mut labels = Vec::new();
    for _ in 0..nos {
        let count = rng.random_range(cfg.points_per_streamline.0..=cfg.points_per_streamline.1);
        let dr = a.thickness * unit.sample(&mut rng);
        let dz = a.thickness * unit.sample(&mut rng);
        let t0 = a.start_deg + a.end_jitter_deg * unit.sample(&mut rng);
        let t1 = a.start_deg + a.sweep_deg + a.end_jitter_deg * unit.sample(&mut rng);
        let mut points = Vec::with_capacity(count);
        let mut fa = Vec::with_capacity(count);
        let mut seg = Vec::with_capacity(count);
        for i in 0..count {
            let deg = t0 + (t1 - t0) * i as f64 / (count - 1) as f64;
            let th = deg.to_radians();
            let r = a.radius + dr;
            let p = [
                (r * th.cos() + shift[0]) as f32,
                (r * th.sin() + shift[1]) as f32,
                (dz + shift[2]) as f32,
            ];
            let u = ((deg - a.start_deg) / a.sweep_deg).clamp(0.0, 1.0);
            let pf = [f64::from(p[0]), f64::from(p[1]), f64::from(p[2])];
            let mut v = baseline_fa(u)
                + nuisance * bump(u, cfg.nuisance_center)
                + cfg.fa_point_noise * unit.sample(&mut rng);
            if cfg.critical_region.contains(pf) {
                v += offset;
            }
            points.push(p);
            fa.push(v.clamp(0.0, 1.0) as f32);
            seg.push(((u * 4.0).floor() as u32).min(3) + 1);
        }
        if rng.random_bool(0.5) {
            points.reverse();
            fa.reverse();
            seg.reverse();
        }
        streamlines.push(Streamline { points, fa });
        labels.extend(seg);
    }
    let tract = Tract::new(id.clone(), streamlines)?;
    let mask = region_mask(&tract, &cfg.critical_region);
    let fa_all = tract.streamlines.iter().flat_map(|s| s.fa.iter());
    let (sum, hits) = fa_all
        .zip(&mask)
        .filter(|(_, &m)| m)
        .fold((0.0, 0usize), |(s, n), (&f, _)| (s + f64::from(f), n + 1));
    if hits == 0 {
        return Err(Error::Config(format!(
            "subject {id} has no points inside the critical region; enlarge the region or move it onto the arc"
        )));
    }
    let mean_region_fa = sum / hits as f64;
    let noise = if cfg.noise_std > 0.0 {
        cfg.noise_std * unit.sample(&mut rng)
    } else {
        0.0
    };
    let c = &cfg.signal_coeffs;
    let score = c.a0 + c.a1 * mean_region_fa + c.a2 * nos as f64 + noise;
    Ok(Generated {
        truth: SubjectTruth {
            subject_id: id,
            mean_region_fa,
            nos,
            noise,
            score,
            region_offset: offset,
            region_points: hits,
            point_count: tract.point_count(),
        },
        labels: PointLabels {
            labels,
            names: segment_names(),
        },
        tract,
        mask,
    })
}

pub fn generate_cohort(cfg: &SynthConfig) -> Result<Cohort> {
    cfg.validate()?;
    let generated: Vec<Generated> = (0..cfg.subject_count)
        .into_par_iter()
        .map(|i| generate_subject(cfg, i))
        .collect::<Result<_>>()?;

    let mut order: Vec<usize> = (0..cfg.subject_count).collect();
    order.shuffle(&mut rng_for(cfg.seed, &[stream::SPLIT]));
    let n_test = (cfg.subject_count as f64 * cfg.test_fraction).round() as usize;
    let mut split = vec![Split::Train; cfg.subject_count];
    for &i in &order[..n_test] {
        split[i] = Split::Test;
    }

    let mut tracts = Vec::new();
    let mut labels = Vec::new();
    let mut subjects = Vec::new();
    let mut masks = Vec::new();
    let mut rows = Vec::new();
    for (g, sp) in generated.into_iter().zip(split) {
        let id = g.truth.subject_id.clone();
        rows.push(ManifestRow {
            path: PathBuf::from("tracts").join(format!("{id}.wmpc")),
            labels: cfg
                .labels
                .then(|| PathBuf::from("labels").join(format!("{id}.csv"))),
            subject_id: id,
            score: g.truth.score,
            split: sp,
        });
        tracts.push(g.tract);
        labels.push(g.labels);
        subjects.push(g.truth);
        masks.push(g.mask);
    }
    Ok(Cohort {
        tracts,
        labels: cfg.labels.then_some(labels),
        manifest: CohortManifest::new(rows)?,
        truth: GroundTruth {
            region: cfg.critical_region,
            signal_coeffs: cfg.signal_coeffs,
            subjects,
            masks,
        },
    })
}

/// Writes `manifest.csv`, `tracts/*.wmpc`, optional `labels/*.csv` and
/// `ground_truth.json` under `dir`. Returns the manifest path.
pub fn write_cohort(cohort: &Cohort, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    for sub in ["tracts", "labels"] {
        let p = dir.join(sub);
        std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    for (i, (t, row)) in cohort.tracts.iter().zip(&cohort.manifest.rows).enumerate() {
        write_tract(t, dir.join(&row.path))?;
        if let (Some(all), Some(lp)) = (&cohort.labels, &row.labels) {
            write_labels(&all[i], dir.join(lp))?;
        }
    }
    let truth_path = dir.join("ground_truth.json");
    let json = serde_json::to_vec_pretty(&cohort.truth).map_err(|e| Error::Internal(e.to_string()))?;
    std::fs::write(&truth_path, json).map_err(|e| Error::io(&truth_path, e))?;
    let manifest_path = dir.join("manifest.csv");
    write_manifest(&cohort.manifest, &manifest_path)?;
    Ok(manifest_path)
}

pub fn read_ground_truth(path: impl AsRef<Path>) -> Result<GroundTruth> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::format(path, e.to_string()))
}
