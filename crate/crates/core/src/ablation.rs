//! Module ablation grid: one training run per flag combination, a table of
//! validation scores and per-level sentence similarity curves.

use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::config::{AblationFlags, RunConfig};
use crate::data::{Dataset, SampleRef};
use crate::error::{argument, Result};
use crate::model::{Model, PriorCache};
use crate::plot::{line_chart, save_png, Series, PALETTE};
use crate::train::{train, val_refs, LogRecord, TrainData, TrainOptions};

pub const TABLE_CSV: &str = "ablation.csv";
pub const CURVES_CSV: &str = "similarity.csv";
pub const CURVES_PNG: &str = "similarity.png";
pub const REPORT_JSON: &str = "ablation.json";

/// Text levels: the encoder output followed by the four decoder levels.
pub const LEVELS: usize = 5;

/// The default grid, weakest first.
pub fn default_grid() -> Vec<AblationFlags> {
    vec![
        AblationFlags::BASELINE,
        AblationFlags { clip_prior: true, cmd: false, mcc: false },
        AblationFlags { clip_prior: false, cmd: true, mcc: false },
        AblationFlags { clip_prior: false, cmd: true, mcc: true },
        AblationFlags::FULL,
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub flags: AblationFlags,
    pub val_miou: f64,
    pub precision_0_5: f64,
    pub oc_iou: f64,
    pub seconds: f64,
}

/// Mean cosine similarity of sentence features at each text level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityCurve {
    pub label: String,
    pub same_object: Vec<f64>,
    pub different_object: Vec<f64>,
    pub same_pairs: usize,
    pub different_pairs: usize,
}

impl SimilarityCurve {
    /// Same-object minus different-object similarity at the last level.
    pub fn final_margin(&self) -> f64 {
        self.same_object[LEVELS - 1] - self.different_object[LEVELS - 1]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    pub curves: Vec<SimilarityCurve>,
}

impl AblationReport {
    pub fn row(&self, label: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn curve(&self, label: &str) -> Option<&SimilarityCurve> {
        self.curves.iter().find(|c| c.label == label)
    }

    pub fn table_csv(&self) -> String {
        let mut out = String::from("config,clip_prior,cmd,mcc,val_miou,precision_0.5,oc_iou,seconds\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{:.6},{:.6},{:.6},{:.1}\n",
                r.label, r.flags.clip_prior, r.flags.cmd, r.flags.mcc, r.val_miou, r.precision_0_5, r.oc_iou, r.seconds
            ));
        }
        out
    }

    /// Long format: one row per configuration, pair kind and level.
    pub fn curves_csv(&self) -> String {
        let mut out = String::from("config,pairs,level,mean_cosine\n");
        for c in &self.curves {
            for (kind, values) in [("same", &c.same_object), ("different", &c.different_object)] {
                for (level, v) in values.iter().enumerate() {
                    out.push_str(&format!("{},{kind},{level},{v:.6}\n", c.label));
                }
            }
        }
        out
    }

    /// Writes the table, the curves and their chart. In the chart each
    /// configuration keeps its palette color in row order; filled markers
    /// are same-object pairs, hollow ones different-object pairs.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(TABLE_CSV), self.table_csv())?;
        fs::write(dir.join(CURVES_CSV), self.curves_csv())?;
        fs::write(dir.join(REPORT_JSON), serde_json::to_string_pretty(self)?)?;
        let mut series = Vec::new();
        for (i, c) in self.curves.iter().enumerate() {
            let color = PALETTE[i % PALETTE.len()];
            series.push(Series { values: c.same_object.clone(), color, hollow: false });
            series.push(Series { values: c.different_object.clone(), color, hollow: true });
        }
        if !series.is_empty() {
            save_png(&line_chart(&series, 480, 320)?, dir.join(CURVES_PNG))?;
        }
        Ok(())
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Per-level sentence similarity over expression pairs inside each scene.
/// Pairs describing one instance count as same-object, pairs across two
/// instances as different-object.
pub fn similarity_curve(
    label: &str,
    model: &Model,
    dataset: &Dataset,
    cache: &PriorCache,
    refs: &[SampleRef],
) -> Result<SimilarityCurve> {
    let mut features: HashMap<SampleRef, Vec<Vec<f64>>> = HashMap::new();
    for chunk in refs.chunks(32) {
        let batch = model.dataset_batch(dataset, chunk, cache)?;
        let out = model.forward(&batch)?;
        let mut per_level = Vec::with_capacity(LEVELS);
        for level in 0..LEVELS {
            let f = out.sentence_features(level)?.to_dtype(candle_core::DType::F64)?;
            per_level.push(f.to_vec2::<f64>()?);
        }
        for (i, &r) in chunk.iter().enumerate() {
            features.insert(r, per_level.iter().map(|l| l[i].clone()).collect());
        }
    }

    let mut by_scene: HashMap<usize, Vec<SampleRef>> = HashMap::new();
    for &r in refs {
        by_scene.entry(r.scene).or_default().push(r);
    }
    let mut same = vec![0.0; LEVELS];
    let mut diff = vec![0.0; LEVELS];
    let (mut n_same, mut n_diff) = (0usize, 0usize);
    let mut scenes: Vec<_> = by_scene.into_iter().collect();
    scenes.sort_by_key(|(s, _)| *s);
    for (_, members) in scenes {
        for (i, a) in members.iter().enumerate() {
            for b in &members[i + 1..] {
                let (fa, fb) = (&features[a], &features[b]);
                let target = if a.instance == b.instance {
                    n_same += 1;
                    &mut same
                } else {
                    n_diff += 1;
                    &mut diff
                };
                for level in 0..LEVELS {
                    target[level] += cosine(&fa[level], &fb[level]);
                }
            }
        }
    }
    if n_same == 0 || n_diff == 0 {
        return argument("similarity curves need same-object and different-object pairs");
    }
    same.iter_mut().for_each(|v| *v /= n_same as f64);
    diff.iter_mut().for_each(|v| *v /= n_diff as f64);
    Ok(SimilarityCurve {
        label: label.to_string(),
        same_object: same,
        different_object: diff,
        same_pairs: n_same,
        different_pairs: n_diff,
    })
}

/// Callback for per-configuration progress: label and log record.
pub type AblationProgress<'a> = &'a dyn Fn(&str, &LogRecord, f64);

/// Trains each configuration of `grid` from the same base config and seed.
/// Training outputs go to `out_dir/<label>/` when a directory is given.
pub fn run_ablation(
    base: &RunConfig,
    grid: &[AblationFlags],
    data: &TrainData,
    out_dir: Option<&Path>,
    progress: Option<AblationProgress>,
) -> Result<AblationReport> {
    if grid.is_empty() {
        return argument("empty ablation grid");
    }
    let refs = val_refs(data.val, base.train.val_samples);
    let mut rows = Vec::new();
    let mut curves = Vec::new();
    for &flags in grid {
        let label = flags.label();
        let mut config = base.clone();
        config.ablation = flags;
        let report = |r: &LogRecord, t: f64| {
            if let Some(p) = progress {
                p(&label, r, t);
            }
        };
        let opts = TrainOptions { out_dir: out_dir.map(|d| d.join(&label)), progress: Some(&report) };
        let outcome = train(&config, data, &opts)?;
        let val = match outcome.val {
            Some(v) => v,
            None => crate::infer::evaluate_model(&outcome.model, data.val, data.val_priors, &refs)?,
        };
        rows.push(AblationRow {
            label: label.clone(),
            flags,
            val_miou: val.miou,
            precision_0_5: val.precision(0.5).unwrap_or(0.0),
            oc_iou: val.oc_iou,
            seconds: outcome.seconds,
        });
        curves.push(similarity_curve(&label, &outcome.model, data.val, data.val_priors, &refs)?);
    }
    let report = AblationReport { rows, curves };
    if let Some(dir) = out_dir {
        report.write(dir)?;
    }
    Ok(report)
}
