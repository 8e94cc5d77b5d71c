//! Segmentation metrics: IoU, precision at thresholds, object-centric IoU and
//! the region / boundary measures.

use std::collections::BTreeMap;

use image::{GrayImage, Luma};
use imageproc::distance_transform::Norm;
use imageproc::morphology::dilate;
use serde::{Deserialize, Serialize};

use crate::data::Mask;
use crate::error::{argument, Result};

pub const THRESHOLDS: [f64; 3] = [0.5, 0.7, 0.9];

fn same_shape(a: &Mask, b: &Mask) -> Result<()> {
    if !a.same_shape(b) {
        return argument(format!(
            "mask shapes differ: {}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        ));
    }
    Ok(())
}

/// `|pred ∩ gt| / |pred ∪ gt|`; 1 when both are empty.
pub fn iou(pred: &Mask, gt: &Mask) -> Result<f64> {
    same_shape(pred, gt)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        inter += (p && g) as usize;
        union += (p || g) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Fraction of IoUs strictly above each threshold.
pub fn precision_at(ious: &[f64], thresholds: &[f64]) -> Result<Vec<(f64, f64)>> {
    if ious.is_empty() {
        return argument("precision needs at least one IoU");
    }
    Ok(thresholds
        .iter()
        .map(|&t| (t, ious.iter().filter(|&&v| v > t).count() as f64 / ious.len() as f64))
        .collect())
}

/// GT intersected with every prediction, over GT united with every
/// prediction.
pub fn oc_iou(gt: &Mask, preds: &[Mask]) -> Result<f64> {
    if preds.is_empty() {
        return argument("object-centric IoU needs at least one prediction");
    }
    for p in preds {
        same_shape(p, gt)?;
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for i in 0..gt.data().len() {
        let g = gt.data()[i];
        inter += (g && preds.iter().all(|p| p.data()[i])) as usize;
        union += (g || preds.iter().any(|p| p.data()[i])) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Mean object-centric IoU over objects.
pub fn oc_iou_total(objects: &[(Mask, Vec<Mask>)]) -> Result<f64> {
    if objects.is_empty() {
        return argument("object-centric IoU needs at least one object");
    }
    let mut sum = 0.0;
    for (gt, preds) in objects {
        sum += oc_iou(gt, preds)?;
    }
    Ok(sum / objects.len() as f64)
}

/// Foreground pixels with a 4-neighbour outside the foreground or on the
/// image edge.
pub fn boundary(mask: &Mask) -> Mask {
    let (h, w) = (mask.height(), mask.width());
    Mask::from_fn(h, w, |y, x| {
        mask.get(y, x)
            && (y == 0
                || x == 0
                || y + 1 == h
                || x + 1 == w
                || !mask.get(y - 1, x)
                || !mask.get(y + 1, x)
                || !mask.get(y, x - 1)
                || !mask.get(y, x + 1))
    })
}

/// Match radius of 0.8% of the image diagonal, rounded up.
pub fn default_radius(height: usize, width: usize) -> usize {
    (0.008 * ((height * height + width * width) as f64).sqrt()).ceil() as usize
}

fn dilate_disc(mask: &Mask, radius: usize) -> Mask {
    if radius == 0 {
        return mask.clone();
    }
    let img = GrayImage::from_fn(mask.width() as u32, mask.height() as u32, |x, y| {
        Luma([if mask.get(y as usize, x as usize) { 255 } else { 0 }])
    });
    let radius = radius.min(255) as u8;
    let out = dilate(&img, Norm::L2, radius);
    Mask::from_fn(mask.height(), mask.width(), |y, x| out.get_pixel(x as u32, y as u32)[0] > 0)
}

/// Boundary F-measure with matches allowed within `radius` pixels.
pub fn boundary_f(pred: &Mask, gt: &Mask, radius: usize) -> Result<f64> {
    same_shape(pred, gt)?;
    let (bp, bg) = (boundary(pred), boundary(gt));
    let (np, ng) = (bp.area(), bg.area());
    if np == 0 && ng == 0 {
        return Ok(1.0);
    }
    if np == 0 || ng == 0 {
        return Ok(0.0);
    }
    let (dp, dg) = (dilate_disc(&bp, radius), dilate_disc(&bg, radius));
    let hits = |b: &Mask, d: &Mask| b.data().iter().zip(d.data()).filter(|(&x, &y)| x && y).count();
    let precision = hits(&bp, &dg) as f64 / np as f64;
    let recall = hits(&bg, &dp) as f64 / ng as f64;
    Ok(if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) })
}

/// Mean of the mean region score and the mean boundary score.
pub fn jf_mean(j: &[f64], f: &[f64]) -> Result<f64> {
    if j.len() != f.len() {
        return argument(format!("{} region scores but {} boundary scores", j.len(), f.len()));
    }
    if j.is_empty() {
        return argument("no scores to average");
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok((mean(j) + mean(f)) / 2.0)
}

/// One evaluated prediction.
#[derive(Debug, Clone)]
pub struct SampleEval {
    pub scene_id: String,
    pub expression: usize,
    pub object_key: String,
    pub probability: f64,
    pub pred: Mask,
    pub gt: Mask,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub scene_id: String,
    pub expression: usize,
    pub object_key: String,
    pub probability: f64,
    pub iou: f64,
    pub boundary_f: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub miou: f64,
    pub precision_at: BTreeMap<String, f64>,
    pub oc_iou: f64,
    pub j_mean: f64,
    pub f_mean: f64,
    pub jf_mean: f64,
    pub samples: Vec<SampleRecord>,
}

impl EvalReport {
    pub fn precision(&self, threshold: f64) -> Option<f64> {
        self.precision_at.get(&format!("{threshold}")).copied()
    }

    /// Per-sample CSV with a header row.
    pub fn samples_csv(&self) -> String {
        let mut out = String::from("scene_id,expression,object_key,probability,iou,boundary_f\n");
        for s in &self.samples {
            out.push_str(&format!(
                "{},{},{},{:.6},{:.6},{:.6}\n",
                s.scene_id, s.expression, s.object_key, s.probability, s.iou, s.boundary_f
            ));
        }
        out
    }
}

pub fn build_report(samples: &[SampleEval]) -> Result<EvalReport> {
    if samples.is_empty() {
        return argument("nothing to evaluate");
    }
    let mut records = Vec::with_capacity(samples.len());
    let mut groups: BTreeMap<&str, (Mask, Vec<Mask>)> = BTreeMap::new();
    for s in samples {
        let radius = default_radius(s.gt.height(), s.gt.width());
        records.push(SampleRecord {
            scene_id: s.scene_id.clone(),
            expression: s.expression,
            object_key: s.object_key.clone(),
            probability: s.probability,
            iou: iou(&s.pred, &s.gt)?,
            boundary_f: boundary_f(&s.pred, &s.gt, radius)?,
        });
        groups.entry(&s.object_key).or_insert_with(|| (s.gt.clone(), Vec::new())).1.push(s.pred.clone());
    }
    let ious: Vec<f64> = records.iter().map(|r| r.iou).collect();
    let fs: Vec<f64> = records.iter().map(|r| r.boundary_f).collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let objects: Vec<(Mask, Vec<Mask>)> = groups.into_values().collect();
    Ok(EvalReport {
        miou: mean(&ious),
        precision_at: precision_at(&ious, &THRESHOLDS)?.into_iter().map(|(t, p)| (format!("{t}"), p)).collect(),
        oc_iou: oc_iou_total(&objects)?,
        j_mean: mean(&ious),
        f_mean: mean(&fs),
        jf_mean: jf_mean(&ious, &fs)?,
        samples: records,
    })
}
