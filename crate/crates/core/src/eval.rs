//! Geolocational accuracy, crop-averaged inference, the classification vs.
//! distance correlation study, and report files.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;

use crate::cells::{CellIndex, Level};
use crate::geom::{gcd_km, GeoCoord, EARTH_RADIUS_KM};
use crate::model::{Batch, Model, Prediction};
use crate::synth::Sample;
use crate::train::flip_planes;
use crate::{Error, Result};

pub const REPORT_HEADER: &str = "threshold_km,accuracy";

/// Top-N values and radii (km) of the correlation study before scaling.
pub const STUDY_TOP_N: [usize; 8] = [1, 5, 10, 50, 100, 200, 300, 500];
pub const STUDY_RADII_KM: [f64; 8] = [1.0, 25.0, 100.0, 200.0, 400.0, 750.0, 1500.0, 2500.0];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CropPolicy {
    Single,
    /// Centre and four corner crops plus their mirror images, logits averaged.
    TenCrop,
}

impl FromStr for CropPolicy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "single" => Ok(CropPolicy::Single),
            "tencrop" => Ok(CropPolicy::TenCrop),
            _ => Err(format!("expected single or tencrop, got {s:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRecord {
    pub gt: GeoCoord,
    pub pred_cell: usize,
    pub pred_gps: GeoCoord,
    pub distance_km: f64,
    pub scene_pred: usize,
    pub scene_gt: usize,
    /// Fine cell containing `gt`, if any.
    pub fine_gt: Option<usize>,
    /// 0-based rank of `fine_gt` among the fine logits (ties broken by id).
    pub fine_rank: Option<usize>,
    /// Fusion weights (rgb, seg).
    pub weights: (f64, f64),
}

/// Fraction of records strictly closer than `r_km`.
pub fn geolocational_accuracy(records: &[EvalRecord], r_km: f64) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Validation("no evaluation records".into()));
    }
    let hits = records.iter().filter(|r| r.distance_km < r_km).count();
    Ok(hits as f64 / records.len() as f64)
}

/// Side of the square TenCrop window.
pub fn crop_size(size: usize) -> usize {
    (0.875 * size as f64).ceil() as usize
}

/// Crop origins (row, col): centre, top-left, top-right, bottom-left, bottom-right.
fn crop_origins(size: usize) -> [(usize, usize); 5] {
    let c = crop_size(size);
    let m = size - c;
    [(m / 2, m / 2), (0, 0), (0, m), (m, 0), (m, m)]
}

/// Crops `c × c` at `(oy, ox)` from a `size × size` plane and resizes back to
/// `size` with half-pixel-centred bilinear interpolation.
fn crop_bilinear(plane: &[f32], size: usize, oy: usize, ox: usize, c: usize) -> Vec<f32> {
    let scale = c as f64 / size as f64;
    let coord = |d: usize| -> (usize, usize, f64) {
        let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (c - 1) as f64);
        let lo = s.floor() as usize;
        let hi = (lo + 1).min(c - 1);
        (lo, hi, s - lo as f64)
    };
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        let (y0, y1, ty) = coord(y);
        for x in 0..size {
            let (x0, x1, tx) = coord(x);
            let px = |yy: usize, xx: usize| f64::from(plane[(oy + yy) * size + ox + xx]);
            let top = px(y0, x0) * (1.0 - tx) + px(y0, x1) * tx;
            let bottom = px(y1, x0) * (1.0 - tx) + px(y1, x1) * tx;
            out.push((top * (1.0 - ty) + bottom * ty) as f32);
        }
    }
    out
}

fn crop_nearest(plane: &[u8], size: usize, oy: usize, ox: usize, c: usize) -> Vec<u8> {
    let src = |d: usize| (d * c / size).min(c - 1);
    (0..size * size)
        .map(|p| plane[(oy + src(p / size)) * size + ox + src(p % size)])
        .collect()
}

/// The ten crops of a square sample, in a fixed order.
pub fn ten_crops(sample: &Sample, size: usize) -> Vec<Sample> {
    let c = crop_size(size);
    let plane = size * size;
    let mut out = Vec::with_capacity(10);
    for mirror in [false, true] {
        for (oy, ox) in crop_origins(size) {
            let mut s = sample.clone();
            s.rgb = (0..3)
                .flat_map(|ch| {
                    crop_bilinear(&sample.rgb[ch * plane..(ch + 1) * plane], size, oy, ox, c)
                })
                .collect();
            s.seg = crop_nearest(&sample.seg, size, oy, ox, c);
            if mirror {
                flip_planes(&mut s.rgb, size);
                flip_planes(&mut s.seg, size);
            }
            out.push(s);
        }
    }
    out
}

/// Running mean, so that identical inputs average to themselves exactly.
fn running_mean(acc: &mut [f64], x: &[f64], k: usize) {
    let inv = 1.0 / k as f64;
    for (a, v) in acc.iter_mut().zip(x) {
        *a += (v - *a) * inv;
    }
}

/// Per-head logits for `samples`, batched; crop-averaged under TenCrop.
pub fn classify(
    model: &Model,
    samples: &[&Sample],
    batch_size: usize,
    crop: CropPolicy,
) -> Result<Prediction> {
    let dual = model.config.is_dual();
    let size = model.config.image_size;
    let classes = model.config.classes;
    let mut logits: [Vec<f64>; 4] = Default::default();
    let mut weights = model.config.attentive_fusion.then(Vec::new);
    let parts: Vec<Prediction> = samples
        .par_chunks(batch_size.max(1))
        .map(|chunk| -> Result<Prediction> {
            Ok(match crop {
                CropPolicy::Single => {
                    model.predict_logits(&Batch::from_samples(chunk.iter().copied(), dual))?
                }
                CropPolicy::TenCrop => {
                    let crops: Vec<Vec<Sample>> =
                        chunk.iter().map(|s| ten_crops(s, size)).collect();
                    let mut avg: Option<Prediction> = None;
                    for k in 0..10 {
                        let p = model.predict_logits(&Batch::from_samples(
                            crops.iter().map(|c| &c[k]),
                            dual,
                        ))?;
                        match &mut avg {
                            None => avg = Some(p),
                            Some(a) => {
                                for h in 0..4 {
                                    running_mean(&mut a.logits[h], &p.logits[h], k + 1);
                                }
                                if let (Some(aw), Some(pw)) = (&mut a.weights, &p.weights) {
                                    running_mean(aw, pw, k + 1);
                                }
                            }
                        }
                    }
                    avg.expect("ten crops")
                }
            })
        })
        .collect::<Result<_>>()?;
    for p in parts {
        for h in 0..4 {
            logits[h].extend_from_slice(&p.logits[h]);
        }
        if let (Some(w), Some(pw)) = (&mut weights, &p.weights) {
            w.extend_from_slice(pw);
        }
    }
    Ok(Prediction {
        n: samples.len(),
        classes,
        logits,
        weights,
    })
}

fn rank_of(row: &[f64], target: usize) -> usize {
    let t = row[target];
    row.iter()
        .enumerate()
        .filter(|&(i, &v)| v > t || (v == t && i < target))
        .count()
}

/// Fine-cell prediction, GPS tag and distance for every sample.
pub fn predict(
    model: &Model,
    samples: &[&Sample],
    index: &CellIndex,
    crop: CropPolicy,
    batch_size: usize,
) -> Result<Vec<EvalRecord>> {
    let [_, _, kf] = index.class_counts();
    if model.config.classes[2] != kf {
        return Err(Error::Validation(format!(
            "model has {} fine classes, cell index has {kf}",
            model.config.classes[2]
        )));
    }
    let pred = classify(model, samples, batch_size, crop)?;
    let dual = model.config.is_dual();
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let cell = pred.argmax(2, i);
            let pred_gps = index.class_to_gps(Level::Fine, cell)?;
            let fine_gt = index.fine.locate(s.coord);
            let weights = match &pred.weights {
                Some(w) => (w[2 * i], w[2 * i + 1]),
                None if dual => (0.5, 0.5),
                None => (1.0, 0.0),
            };
            Ok(EvalRecord {
                gt: s.coord,
                pred_cell: cell,
                pred_gps,
                distance_km: gcd_km(pred_gps, s.coord),
                scene_pred: pred.argmax(3, i),
                scene_gt: usize::from(s.scene),
                fine_gt,
                fine_rank: fine_gt.map(|t| rank_of(pred.row(2, i), t)),
                weights,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct AccuracyReport {
    pub thresholds_km: Vec<f64>,
    pub accuracy: Vec<f64>,
    pub n: usize,
    pub fine_accuracy: f64,
    pub scene_accuracy: f64,
}

pub fn accuracy_report(records: &[EvalRecord], thresholds_km: &[f64]) -> Result<AccuracyReport> {
    let accuracy = thresholds_km
        .iter()
        .map(|&r| geolocational_accuracy(records, r))
        .collect::<Result<Vec<_>>>()?;
    let n = records.len();
    let fine = records
        .iter()
        .filter(|r| r.fine_gt == Some(r.pred_cell))
        .count();
    let scene = records
        .iter()
        .filter(|r| r.scene_pred == r.scene_gt)
        .count();
    Ok(AccuracyReport {
        thresholds_km: thresholds_km.to_vec(),
        accuracy,
        n,
        fine_accuracy: fine as f64 / n as f64,
        scene_accuracy: scene as f64 / n as f64,
    })
}

fn scale_name(r: f64) -> Option<&'static str> {
    [
        (1.0, "street"),
        (25.0, "city"),
        (200.0, "region"),
        (750.0, "country"),
        (2500.0, "continent"),
    ]
    .into_iter()
    .find(|&(t, _)| t == r)
    .map(|(_, n)| n)
}

impl AccuracyReport {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{REPORT_HEADER}\n");
        for (r, a) in self.thresholds_km.iter().zip(&self.accuracy) {
            writeln!(s, "{r},{a:.6}").unwrap();
        }
        s
    }

    /// One line of percentages labelled by scale, then counts.
    pub fn summary(&self) -> String {
        let mut s = String::new();
        let cols: Vec<String> = self
            .thresholds_km
            .iter()
            .zip(&self.accuracy)
            .map(|(&r, a)| match scale_name(r) {
                Some(name) => format!("{name} ({r} km) {:.1}", 100.0 * a),
                None => format!("{r} km {:.1}", 100.0 * a),
            })
            .collect();
        writeln!(s, "{}", cols.join(" | ")).unwrap();
        writeln!(
            s,
            "samples {} | fine-cell accuracy {:.1} | scene accuracy {:.1}",
            self.n,
            100.0 * self.fine_accuracy,
            100.0 * self.scene_accuracy
        )
        .unwrap();
        s
    }
}

/// Writes `report.csv` and `summary.txt` into `dir`.
pub fn emit_report(report: &AccuracyReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, body) in [
        ("report.csv", report.to_csv()),
        ("summary.txt", report.summary()),
    ] {
        let p = dir.join(name);
        fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}

/// Product-moment correlation coefficient.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::Validation(
            "pearson needs two equal-length series of at least 2 values".into(),
        ));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Validation("degenerate series".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationStudy {
    pub top_n: Vec<usize>,
    pub top_n_accuracy: Vec<f64>,
    pub radii_km: Vec<f64>,
    pub geo_accuracy: Vec<f64>,
    /// `Err` text when a series is constant.
    pub pearson: std::result::Result<f64, String>,
}

impl CorrelationStudy {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("top_n,top_n_accuracy,radius_km,geo_accuracy\n");
        for i in 0..self.top_n.len() {
            writeln!(
                s,
                "{},{:.6},{:.6},{:.6}",
                self.top_n[i], self.top_n_accuracy[i], self.radii_km[i], self.geo_accuracy[i]
            )
            .unwrap();
        }
        match &self.pearson {
            Ok(r) => writeln!(s, "# pearson {r:.6}").unwrap(),
            Err(e) => writeln!(s, "# pearson unavailable: {e}").unwrap(),
        }
        s
    }
}

/// Largest great-circle distance between any two points.
pub fn diameter_km(points: &[GeoCoord]) -> f64 {
    let mut d: f64 = 0.0;
    for (i, a) in points.iter().enumerate() {
        for b in &points[i + 1..] {
            d = d.max(gcd_km(*a, *b));
        }
    }
    d
}

/// Top-N fine-cell accuracy against `a_r`, with N clipped to the class count
/// and radii scaled by the diameter of `world` over half the circumference.
pub fn correlation_study(
    records: &[EvalRecord],
    n_fine: usize,
    world: &[GeoCoord],
) -> Result<CorrelationStudy> {
    if records.is_empty() {
        return Err(Error::Validation("no evaluation records".into()));
    }
    let top_n: Vec<usize> = STUDY_TOP_N.iter().map(|&k| k.min(n_fine)).collect();
    let n = records.len() as f64;
    let top_n_accuracy = top_n
        .iter()
        .map(|&k| {
            records
                .iter()
                .filter(|r| r.fine_rank.is_some_and(|rank| rank < k))
                .count() as f64
                / n
        })
        .collect::<Vec<_>>();
    let scale = diameter_km(world) / (std::f64::consts::PI * EARTH_RADIUS_KM);
    let radii_km: Vec<f64> = STUDY_RADII_KM.iter().map(|r| r * scale).collect();
    let geo_accuracy = radii_km
        .iter()
        .map(|&r| geolocational_accuracy(records, r))
        .collect::<Result<Vec<_>>>()?;
    let pearson = pearson(&top_n_accuracy, &geo_accuracy).map_err(|e| e.to_string());
    Ok(CorrelationStudy {
        top_n,
        top_n_accuracy,
        radii_km,
        geo_accuracy,
        pearson,
    })
}

/// Binary greyscale image (`P5`), values scaled so the map's maximum is white.
pub fn pgm_bytes(map: &[f64], rows: usize, cols: usize) -> Vec<u8> {
    assert_eq!(map.len(), rows * cols);
    let max = map.iter().cloned().fold(0.0f64, f64::max);
    let mut out = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    out.extend(map.iter().map(|&v| {
        if max > 0.0 {
            (v / max * 255.0).round() as u8
        } else {
            0
        }
    }));
    out
}

pub fn write_pgm(path: &Path, map: &[f64], rows: usize, cols: usize) -> Result<()> {
    fs::write(path, pgm_bytes(map, rows, cols)).map_err(|e| Error::io(path, e))
}
