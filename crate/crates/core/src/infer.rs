//! Inference: pick the most probable query and read out its mask.

use candle_core::{DType, IndexOp};
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::data::{Dataset, Mask, Rle, SampleRef};
use crate::error::{argument, Error, Result};
use crate::metrics::{build_report, EvalReport, SampleEval};
use crate::model::{Batch, Model, PriorCache, SampleInput};

#[derive(Debug, Clone)]
pub struct Prediction {
    /// Full-resolution mask.
    pub mask: Mask,
    pub probability: f64,
    pub query: usize,
}

/// Index of the largest value; the first one on ties.
pub fn select_query(probs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = i;
        }
    }
    best
}

/// Threshold stride-4 logits at probability 0.5 (strictly above) and
/// upsample by nearest neighbour.
pub fn logits_to_mask(logits: &[f64], h: usize, w: usize, factor: usize) -> Mask {
    Mask::from_fn(h * factor, w * factor, |y, x| logits[(y / factor) * w + x / factor] > 0.0)
}

pub fn predict_batch(model: &Model, batch: &Batch) -> Result<Vec<Prediction>> {
    let out = model.forward(batch)?;
    let last = out.decoder.last();
    let probs = last.probs()?.to_dtype(DType::F64)?.to_vec2::<f64>()?;
    let (_, _, h, w) = last.mask_logits.dims4()?;
    let logits = last.mask_logits.to_dtype(DType::F64)?;
    let mut preds = Vec::with_capacity(probs.len());
    for (s, row) in probs.iter().enumerate() {
        let q = select_query(row);
        let m = logits.i((s, q))?.flatten_all()?.to_vec1::<f64>()?;
        preds.push(Prediction { mask: logits_to_mask(&m, h, w, 4), probability: row[q], query: q });
    }
    Ok(preds)
}

pub fn predict_one(model: &Model, input: SampleInput) -> Result<Prediction> {
    let batch = model.make_batch(&[input])?;
    Ok(predict_batch(model, &batch)?.remove(0))
}

pub fn predict_dataset(
    model: &Model,
    dataset: &Dataset,
    cache: &PriorCache,
    refs: &[SampleRef],
    batch_size: usize,
) -> Result<Vec<Prediction>> {
    let mut out = Vec::with_capacity(refs.len());
    for chunk in refs.chunks(batch_size.max(1)) {
        let batch = model.dataset_batch(dataset, chunk, cache)?;
        out.extend(predict_batch(model, &batch)?);
    }
    Ok(out)
}

pub fn evaluate_model(model: &Model, dataset: &Dataset, cache: &PriorCache, refs: &[SampleRef]) -> Result<EvalReport> {
    let preds = predict_dataset(model, dataset, cache, refs, 32)?;
    let samples: Vec<SampleEval> = refs
        .iter()
        .zip(preds)
        .map(|(&r, p)| {
            let scene = &dataset.scenes[r.scene];
            SampleEval {
                scene_id: scene.scene_id.clone(),
                expression: scene.flat_expression_index(r.instance, r.expression),
                object_key: dataset.instance(r).object_key.clone(),
                probability: p.probability,
                pred: p.mask,
                gt: dataset.instance(r).mask.clone(),
            }
        })
        .collect();
    build_report(&samples)
}

pub const PREDICTIONS_FILE: &str = "preds.jsonl";

/// One line of a predictions file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub scene_id: String,
    /// Flat expression index within the scene.
    pub expression: usize,
    pub mask: Rle,
    pub probability: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query: Option<usize>,
}

impl PredictionRecord {
    pub fn new(dataset: &Dataset, r: SampleRef, p: &Prediction) -> Self {
        let scene = &dataset.scenes[r.scene];
        Self {
            scene_id: scene.scene_id.clone(),
            expression: scene.flat_expression_index(r.instance, r.expression),
            mask: Rle::encode(&p.mask),
            probability: p.probability,
            query: Some(p.query),
        }
    }
}

pub fn write_predictions(path: impl AsRef<Path>, records: &[PredictionRecord]) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_predictions(path: impl AsRef<Path>) -> Result<Vec<PredictionRecord>> {
    let path = path.as_ref();
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            record: format!("line {}", i + 1),
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Scores stored predictions against the ground truth of `dataset`. Every
/// record must name a known scene and expression, at most once.
pub fn evaluate_predictions(dataset: &Dataset, records: &[PredictionRecord]) -> Result<EvalReport> {
    let mut seen = HashSet::new();
    let mut samples = Vec::with_capacity(records.len());
    for rec in records {
        let Some(scene) = dataset.scene(&rec.scene_id) else {
            return argument(format!("unknown scene {}", rec.scene_id));
        };
        let Some((instance, _)) = scene.locate_expression(rec.expression) else {
            return argument(format!("scene {} has no expression {}", rec.scene_id, rec.expression));
        };
        if !seen.insert((rec.scene_id.as_str(), rec.expression)) {
            return argument(format!("duplicate prediction for {} expression {}", rec.scene_id, rec.expression));
        }
        let pred = rec.mask.decode()?;
        let inst = &scene.instances[instance];
        if !pred.same_shape(&inst.mask) {
            return argument(format!("prediction for {} has the wrong size", rec.scene_id));
        }
        samples.push(SampleEval {
            scene_id: rec.scene_id.clone(),
            expression: rec.expression,
            object_key: inst.object_key.clone(),
            probability: rec.probability,
            pred,
            gt: inst.mask.clone(),
        });
    }
    build_report(&samples)
}
