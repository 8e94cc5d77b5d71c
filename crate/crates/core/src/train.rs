//! Training loop.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::save_checkpoint;
use crate::config::RunConfig;
use crate::data::{Dataset, SampleRef};
use crate::error::{Error, Result};
use crate::infer::evaluate_model;
use crate::matching::{total_loss, LossBreakdown};
use crate::mcc::{mcc_loss, sample_triplets};
use crate::metrics::EvalReport;
use crate::model::{Model, PriorCache};
use crate::nn::ops;
use crate::optim::AdamW;
use crate::text::Vocabulary;

pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const NAN_DUMP: &str = "nan_dump.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iteration: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
    pub grad_norm: f64,
    pub triplets: usize,
    pub skipped_triplets: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_miou: Option<f64>,
}

pub struct TrainData<'a> {
    pub train: &'a Dataset,
    pub train_priors: &'a PriorCache,
    pub val: &'a Dataset,
    pub val_priors: &'a PriorCache,
}

#[derive(Default)]
pub struct TrainOptions<'a> {
    /// Receives the log, the checkpoint and any failure dump.
    pub out_dir: Option<PathBuf>,
    pub progress: Option<&'a dyn Fn(&LogRecord, f64)>,
}

pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<LogRecord>,
    pub val: Option<EvalReport>,
    pub seconds: f64,
}

/// Validation samples, capped by taking an even stride over the dataset.
pub fn val_refs(dataset: &Dataset, cap: usize) -> Vec<SampleRef> {
    let all = dataset.samples();
    if cap == 0 || cap >= all.len() {
        return all;
    }
    (0..cap).map(|i| all[i * all.len() / cap]).collect()
}

/// One iteration's samples: each scene contributes its triplet's three
/// expressions, or one random expression when no triplet exists.
fn draw_batch(dataset: &Dataset, scenes: &[usize], rng: &mut ChaCha8Rng) -> (Vec<SampleRef>, usize, usize) {
    let sample = sample_triplets(dataset, scenes, rng);
    let mut refs = Vec::new();
    for t in &sample.triplets {
        refs.extend([t.p1, t.p2, t.n]);
    }
    let covered: Vec<usize> = sample.triplets.iter().map(|t| t.p1.scene).collect();
    for &s in scenes.iter().filter(|s| !covered.contains(s)) {
        let all: Vec<SampleRef> = dataset.samples().into_iter().filter(|r| r.scene == s).collect();
        if let Some(&r) = all.choose(rng) {
            refs.push(r);
        }
    }
    (refs, sample.triplets.len(), sample.skipped)
}

fn dump_failure(dir: &Path, iteration: usize, dataset: &Dataset, refs: &[SampleRef], err: &Error) -> Result<PathBuf> {
    let samples: Vec<serde_json::Value> = refs
        .iter()
        .map(|&r| {
            serde_json::json!({
                "scene_id": dataset.scenes[r.scene].scene_id,
                "object_key": dataset.instance(r).object_key,
                "expression": dataset.expression(r).text,
            })
        })
        .collect();
    let path = dir.join(NAN_DUMP);
    let body = serde_json::json!({ "iteration": iteration, "error": err.to_string(), "samples": samples });
    fs::write(&path, serde_json::to_string_pretty(&body)?)?;
    Ok(path)
}

pub fn train(config: &RunConfig, data: &TrainData, opts: &TrainOptions) -> Result<TrainOutcome> {
    config.validate()?;
    if data.train.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    ops::flush_denormals();
    let start = Instant::now();
    let model = Model::new(&config.model, config.ablation, Vocabulary::template(), config.seed)?;
    let mut opt = AdamW::new(config.optim.clone(), config.train.iterations);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let weights = config.loss.weights();
    let use_mcc = config.ablation.mcc && weights.mcc > 0.0;
    let refs_val = val_refs(data.val, config.train.val_samples);

    let mut log_file = match &opts.out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            Some(std::io::BufWriter::new(fs::File::create(dir.join(TRAIN_LOG))?))
        }
        None => None,
    };
    let mut order: Vec<usize> = Vec::new();
    let mut log = Vec::with_capacity(config.train.iterations);
    let mut last_val = None;
    for it in 0..config.train.iterations {
        let mut scenes = Vec::with_capacity(config.train.batch_scenes);
        while scenes.len() < config.train.batch_scenes.min(data.train.len()) {
            if order.is_empty() {
                order = (0..data.train.len()).collect();
                order.shuffle(&mut rng);
            }
            let s = order.pop().unwrap();
            if !scenes.contains(&s) {
                scenes.push(s);
            }
        }
        let (refs, triplets, skipped) = draw_batch(data.train, &scenes, &mut rng);
        let step = (|| -> Result<(LossBreakdown, f64, f64)> {
            let batch = model.dataset_batch(data.train, &refs, data.train_priors)?;
            let out = model.forward(&batch)?;
            let mcc = if use_mcc && triplets > 0 {
                let s = out.sentence_features(4)?;
                let pick = |k: u32| -> Result<Tensor> {
                    let idx: Vec<u32> = (0..triplets as u32).map(|t| 3 * t + k).collect();
                    Ok(s.index_select(&Tensor::new(idx.as_slice(), s.device())?, 0)?)
                };
                Some(mcc_loss(&pick(0)?, &pick(1)?, &pick(2)?, config.loss.temperature)?)
            } else {
                None
            };
            let targets = batch.targets.as_ref().expect("training batches carry targets");
            let (loss, breakdown, _) =
                total_loss(&out.decoder, targets, mcc.as_ref(), &weights, config.loss.deep_supervision)?;
            let grads = loss.backward()?;
            let info = opt.step(&model.ps, &grads)?;
            Ok((breakdown, info.lr, info.grad_norm))
        })();
        let (breakdown, lr, grad_norm) = match step {
            Ok(v) => v,
            Err(e @ (Error::NonFinite(_) | Error::Degenerate(_))) => {
                if let Some(dir) = &opts.out_dir {
                    let path = dump_failure(dir, it, data.train, &refs, &e)?;
                    return Err(Error::NonFinite(format!("{e} at iteration {it}; batch written to {}", path.display())));
                }
                return Err(Error::NonFinite(format!("{e} at iteration {it}")));
            }
            Err(e) => return Err(e),
        };
        let is_last = it + 1 == config.train.iterations;
        let validate = !data.val.is_empty()
            && (is_last || (config.train.val_every > 0 && (it + 1) % config.train.val_every == 0));
        let val_miou = if validate {
            let report = evaluate_model(&model, data.val, data.val_priors, &refs_val)?;
            let m = report.miou;
            last_val = Some(report);
            Some(m)
        } else {
            None
        };
        let record = LogRecord {
            iteration: it,
            lr,
            loss: breakdown,
            grad_norm,
            triplets: if use_mcc { triplets } else { 0 },
            skipped_triplets: skipped,
            val_miou,
        };
        if let Some(f) = log_file.as_mut() {
            writeln!(f, "{}", serde_json::to_string(&record)?)?;
        }
        if let Some(p) = opts.progress {
            p(&record, start.elapsed().as_secs_f64());
        }
        log.push(record);
    }
    if let Some(mut f) = log_file {
        f.flush()?;
    }
    if let Some(dir) = &opts.out_dir {
        save_checkpoint(dir.join(CHECKPOINT_DIR), &model, config, config.train.iterations, Some(&opt), Some(&rng))?;
        if let Some(report) = &last_val {
            fs::write(dir.join("val_report.json"), serde_json::to_string_pretty(report)?)?;
        }
    }
    Ok(TrainOutcome { model, log, val: last_val, seconds: start.elapsed().as_secs_f64() })
}
