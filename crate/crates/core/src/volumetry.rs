//! Bleeding volume by voxel counting and by the bedside ABC/2 (Tada)
//! formula, and the volume MAE comparison between the two.

use std::fmt::Write as _;
use std::time::Instant;

use serde::Serialize;

use crate::data::{LesionClass, SegMask};
use crate::error::{data_err, Result};

/// `count * spacing product / 1000`.
pub fn voxel_volume_ml(mask: &SegMask) -> f64 {
    let s = mask.spacing();
    mask.count() as f64 * s[0] * s[1] * s[2] / 1000.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TadaMeasurement {
    pub a_mm: f64,
    pub b_mm: f64,
    pub c_mm: f64,
    /// Axial slice with the most foreground voxels (lowest index on ties).
    pub slice_index: usize,
    /// Endpoints `(row, col)` of the A chord on that slice.
    pub chord: [(usize, usize); 2],
}

fn cross(o: (i64, i64), a: (i64, i64), b: (i64, i64)) -> i64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

/// Strictly convex hull vertices of distinct points (monotone chain).
fn convex_hull(points: &[(usize, usize)]) -> Vec<(usize, usize)> {
    let mut pts: Vec<(i64, i64)> = points.iter().map(|&(r, c)| (r as i64, c as i64)).collect();
    pts.sort_unstable();
    if pts.len() < 3 {
        return points.to_vec();
    }
    let mut hull: Vec<(i64, i64)> = Vec::with_capacity(2 * pts.len());
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &(i64, i64)>> =
            if pass == 0 { Box::new(pts.iter()) } else { Box::new(pts.iter().rev()) };
        for &p in iter {
            while hull.len() >= start + 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0 {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
    }
    hull.into_iter().map(|(r, c)| (r as usize, c as usize)).collect()
}

/// Farthest pair of voxel centres. Ties keep the lexicographically smallest
/// `(p, q)` with `p <= q`; returns the pair and its physical length.
fn farthest_pair(points: &[(usize, usize)], sr: f64, sc: f64) -> ((usize, usize), (usize, usize), f64) {
    let hull = convex_hull(points);
    let d2 = |a: (usize, usize), b: (usize, usize)| {
        let dr = (a.0 as f64 - b.0 as f64) * sr;
        let dc = (a.1 as f64 - b.1 as f64) * sc;
        dr * dr + dc * dc
    };
    let mut best = (hull[0], hull[0], 0.0f64);
    for (i, &a) in hull.iter().enumerate() {
        for &b in &hull[i..] {
            let (p, q) = if a <= b { (a, b) } else { (b, a) };
            let d = d2(p, q);
            if d > best.2 || (d == best.2 && (p, q) < (best.0, best.1)) {
                best = (p, q, d);
            }
        }
    }
    (best.0, best.1, best.2.sqrt())
}

/// Unit physical direction of the chord `p -> q`; `(1, 0)` for a point.
pub fn chord_direction(p: (usize, usize), q: (usize, usize), sr: f64, sc: f64) -> (f64, f64) {
    let dr = (q.0 as f64 - p.0 as f64) * sr;
    let dc = (q.1 as f64 - p.1 as f64) * sc;
    let len = (dr * dr + dc * dc).sqrt();
    if len == 0.0 {
        (1.0, 0.0)
    } else {
        (dr / len, dc / len)
    }
}

/// A = longest centre-to-centre chord on the maximal-area slice, B = width
/// of that slice projected on the perpendicular of A, C = foreground slice
/// count times slice spacing. A and B are floored at one in-plane pitch.
pub fn tada_measure(mask: &SegMask) -> Result<TadaMeasurement> {
    mask.check_binary()?;
    let [d, h, w] = mask.shape();
    let [sz, sr, sc] = mask.spacing();
    let plane = h * w;
    let counts: Vec<usize> =
        (0..d).map(|z| mask.data()[z * plane..(z + 1) * plane].iter().filter(|&&v| v != 0).count()).collect();
    let fg_slices = counts.iter().filter(|&&c| c > 0).count();
    if fg_slices == 0 {
        return Err(data_err("Tada measurement needs a non-empty mask"));
    }
    let slice = (0..d).fold(0, |best, z| if counts[z] > counts[best] { z } else { best });
    let points: Vec<(usize, usize)> = (0..plane)
        .filter(|&i| mask.data()[slice * plane + i] != 0)
        .map(|i| (i / w, i % w))
        .collect();
    let (p, q, a) = farthest_pair(&points, sr, sc);
    let dir = chord_direction(p, q, sr, sc);
    let perp = (-dir.1, dir.0);
    let proj = |pt: &(usize, usize)| pt.0 as f64 * sr * perp.0 + pt.1 as f64 * sc * perp.1;
    let lo = points.iter().map(proj).fold(f64::INFINITY, f64::min);
    let hi = points.iter().map(proj).fold(f64::NEG_INFINITY, f64::max);
    let mut a_mm = a.max(sr.max(sc));
    let mut b_mm = (hi - lo).max(sr.min(sc));
    if b_mm > a_mm {
        std::mem::swap(&mut a_mm, &mut b_mm);
    }
    Ok(TadaMeasurement { a_mm, b_mm, c_mm: fg_slices as f64 * sz, slice_index: slice, chord: [p, q] })
}

/// `A * B * C / 2` in ml.
pub fn tada_volume_ml(m: &TadaMeasurement) -> f64 {
    m.a_mm * m.b_mm * m.c_mm / 2.0 / 1000.0
}

/// Mean absolute difference of paired volumes.
pub fn volume_mae(predictions: &[f64], truths: &[f64]) -> Result<f64> {
    if predictions.is_empty() || predictions.len() != truths.len() {
        return Err(data_err(format!(
            "volume MAE needs equal non-empty lists, got {} and {}",
            predictions.len(),
            truths.len()
        )));
    }
    let sum: f64 = predictions.iter().zip(truths).map(|(p, t)| (p - t).abs()).sum();
    Ok(sum / predictions.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VolumetryReport {
    pub id: String,
    pub class: LesionClass,
    pub voxel_volume_ml: f64,
    /// ABC/2 on the ground-truth mask; solitary lesions only.
    pub tada_volume_ml: Option<f64>,
    pub gt_volume_ml: f64,
    /// `|voxel_volume - gt_volume|`.
    pub abs_error_ml: f64,
    pub tada_abs_error_ml: Option<f64>,
    /// Wall time of the segmentation that produced the prediction.
    pub seconds: f64,
}

pub struct CaseVolumes<'a> {
    pub id: String,
    pub pred: &'a SegMask,
    pub gt: &'a SegMask,
    pub class: LesionClass,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodRow {
    pub method: String,
    pub mae_solitary_ml: Option<f64>,
    pub mae_scattered_ml: Option<f64>,
    pub seconds_per_case: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    pub rows: Vec<MethodRow>,
    pub cases: Vec<VolumetryReport>,
}

pub const TADA_ROW: &str = "Tada formula";
pub const MODEL_ROW: &str = "Voxel count (model)";

fn class_mae(cases: &[VolumetryReport], class: LesionClass, value: impl Fn(&VolumetryReport) -> Option<f64>) -> Option<f64> {
    let (p, t): (Vec<f64>, Vec<f64>) =
        cases.iter().filter(|c| c.class == class).filter_map(|c| Some((value(c)?, c.gt_volume_ml))).unzip();
    volume_mae(&p, &t).ok()
}

/// Per-class volume MAE of ABC/2 (solitary only) and of the predicted
/// masks' voxel volume, both against the ground-truth voxel volume.
pub fn compare_methods(cases: &[CaseVolumes]) -> Result<Comparison> {
    let mut reports = Vec::with_capacity(cases.len());
    let mut tada_seconds = 0.0;
    let mut tada_cases = 0usize;
    for c in cases {
        if c.pred.shape() != c.gt.shape() {
            return Err(data_err(format!("case {}: prediction and ground truth shapes differ", c.id)));
        }
        c.pred.check_binary()?;
        let gt_volume_ml = voxel_volume_ml(c.gt);
        let voxel = voxel_volume_ml(c.pred);
        let tada = if c.class == LesionClass::Solitary && c.gt.count() > 0 {
            let start = Instant::now();
            let v = tada_volume_ml(&tada_measure(c.gt)?);
            tada_seconds += start.elapsed().as_secs_f64();
            tada_cases += 1;
            Some(v)
        } else {
            None
        };
        reports.push(VolumetryReport {
            id: c.id.clone(),
            class: c.class,
            voxel_volume_ml: voxel,
            tada_volume_ml: tada,
            gt_volume_ml,
            abs_error_ml: (voxel - gt_volume_ml).abs(),
            tada_abs_error_ml: tada.map(|t| (t - gt_volume_ml).abs()),
            seconds: c.seconds,
        });
    }
    let rows = vec![
        MethodRow {
            method: TADA_ROW.into(),
            mae_solitary_ml: class_mae(&reports, LesionClass::Solitary, |c| c.tada_volume_ml),
            mae_scattered_ml: None,
            seconds_per_case: tada_seconds / tada_cases.max(1) as f64,
        },
        MethodRow {
            method: MODEL_ROW.into(),
            mae_solitary_ml: class_mae(&reports, LesionClass::Solitary, |c| Some(c.voxel_volume_ml)),
            mae_scattered_ml: class_mae(&reports, LesionClass::Scattered, |c| Some(c.voxel_volume_ml)),
            seconds_per_case: reports.iter().map(|c| c.seconds).sum::<f64>() / reports.len().max(1) as f64,
        },
    ];
    Ok(Comparison { rows, cases: reports })
}

impl Comparison {
    pub fn row(&self, method: &str) -> Option<&MethodRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    /// Aligned text table: method, MAE per class, time per case.
    pub fn to_table(&self) -> String {
        let cell = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.3}"));
        let header = ["Method", "Solitary MAE (ml)", "Scattered MAE (ml)", "Time (s)"];
        let body: Vec<[String; 4]> = self
            .rows
            .iter()
            .map(|r| {
                [r.method.clone(), cell(r.mae_solitary_ml), cell(r.mae_scattered_ml), format!("{:.4}", r.seconds_per_case)]
            })
            .collect();
        let mut widths = header.map(str::len);
        for row in &body {
            for (w, c) in widths.iter_mut().zip(row) {
                *w = (*w).max(c.len());
            }
        }
        let mut out = String::new();
        let line = |out: &mut String, cells: [&str; 4]| {
            let _ = writeln!(
                out,
                "{:<w0$}  {:>w1$}  {:>w2$}  {:>w3$}",
                cells[0],
                cells[1],
                cells[2],
                cells[3],
                w0 = widths[0],
                w1 = widths[1],
                w2 = widths[2],
                w3 = widths[3]
            );
        };
        line(&mut out, header);
        for row in &body {
            line(&mut out, [&row[0], &row[1], &row[2], &row[3]]);
        }
        out
    }
}
