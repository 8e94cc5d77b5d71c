//! Checkpoint directories: one tensor file per parameter and optimizer
//! moment, plus `manifest.json`.

use std::fs;
use std::path::Path;

use candle_core::{DType, Tensor};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::ParamGroup;
use crate::optim::{AdamW, Moments};
use crate::tensor_file::{read_tensor_file, write_tensor_file};
use crate::text::Vocabulary;

pub const MANIFEST: &str = "manifest.json";
const FORMAT: &str = "refseg-checkpoint";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: Vec<u8>,
    pub stream: u64,
    /// Decimal, since the position exceeds 64 bits.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self { seed: rng.get_seed().to_vec(), stream: rng.get_stream(), word_pos: rng.get_word_pos().to_string() }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let seed: [u8; 32] = self
            .seed
            .as_slice()
            .try_into()
            .map_err(|_| Error::Config("rng seed must have 32 bytes".into()))?;
        let pos: u128 = self.word_pos.parse().map_err(|_| Error::Config("bad rng position".into()))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub group: ParamGroup,
    pub shape: Vec<usize>,
    pub file: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizerEntry {
    pub step: usize,
    pub total_iterations: usize,
    /// `(parameter, first moment file, second moment file)`
    pub moments: Vec<(String, String, String)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub iteration: usize,
    pub config_hash: String,
    pub config: RunConfig,
    pub vocabulary: Vec<String>,
    pub params: Vec<ParamEntry>,
    pub optimizer: Option<OptimizerEntry>,
    pub rng: Option<RngState>,
}

pub struct Checkpoint {
    pub manifest: Manifest,
    pub model: Model,
    pub optimizer: Option<AdamW>,
    pub rng: Option<ChaCha8Rng>,
}

fn file_name(name: &str, suffix: &str) -> String {
    format!("{}{suffix}.bin", name.replace('/', "_"))
}

fn write(dir: &Path, file: &str, t: &Tensor) -> Result<()> {
    let values = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    write_tensor_file(dir.join(file), t.dims(), &values)
}

fn read(dir: &Path, file: &str, shape: &[usize], dtype: DType) -> Result<Tensor> {
    let path = dir.join(file);
    let (found, values) = read_tensor_file(&path)?;
    if found != shape {
        return Err(Error::Format {
            path,
            record: file.to_string(),
            message: format!("shape {found:?}, expected {shape:?}"),
        });
    }
    Ok(Tensor::from_vec(values, shape, &candle_core::Device::Cpu)?.to_dtype(dtype)?)
}

pub fn save_checkpoint(
    dir: impl AsRef<Path>,
    model: &Model,
    config: &RunConfig,
    iteration: usize,
    optimizer: Option<&AdamW>,
    rng: Option<&ChaCha8Rng>,
) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir.join("params"))?;
    let mut params = Vec::new();
    for (name, p) in model.ps.params() {
        let file = format!("params/{}", file_name(name, ""));
        write(dir, &file, p.var.as_tensor())?;
        params.push(ParamEntry { name: name.clone(), group: p.group, shape: p.var.dims().to_vec(), file });
    }
    let optimizer = match optimizer {
        Some(opt) => {
            fs::create_dir_all(dir.join("optim"))?;
            let mut moments = Vec::new();
            for (name, m) in &opt.state {
                let (fm, fv) = (format!("optim/{}", file_name(name, ".m")), format!("optim/{}", file_name(name, ".v")));
                write(dir, &fm, &m.m)?;
                write(dir, &fv, &m.v)?;
                moments.push((name.clone(), fm, fv));
            }
            Some(OptimizerEntry { step: opt.step, total_iterations: opt.total_iterations, moments })
        }
        None => None,
    };
    let manifest = Manifest {
        format: FORMAT.into(),
        version: 1,
        iteration,
        config_hash: config.hash(),
        config: config.clone(),
        vocabulary: model.vocab.words()[2..].to_vec(),
        params,
        optimizer,
        rng: rng.map(RngState::capture),
    };
    fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<Checkpoint> {
    let dir = dir.as_ref();
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path)?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.clone(),
        record: "manifest".into(),
        message: e.to_string(),
    })?;
    if manifest.format != FORMAT || manifest.version != 1 {
        return Err(Error::Format { path, record: "manifest".into(), message: "not a checkpoint manifest".into() });
    }
    let config = &manifest.config;
    let model = Model::new(&config.model, config.ablation, Vocabulary::new(&manifest.vocabulary), config.seed)?;
    if model.ps.len() != manifest.params.len() {
        return Err(Error::Format {
            path,
            record: "params".into(),
            message: format!("{} parameters stored, model has {}", manifest.params.len(), model.ps.len()),
        });
    }
    for entry in &manifest.params {
        let t = read(dir, &entry.file, &entry.shape, model.dtype())?;
        model.ps.assign(&entry.name, &t)?;
    }
    let optimizer = match &manifest.optimizer {
        Some(o) => {
            let mut opt = AdamW::new(config.optim.clone(), o.total_iterations);
            opt.step = o.step;
            for (name, fm, fv) in &o.moments {
                let shape = model
                    .ps
                    .var(name)
                    .ok_or_else(|| Error::Config(format!("optimizer state for unknown parameter {name}")))?
                    .dims()
                    .to_vec();
                let m = read(dir, fm, &shape, model.dtype())?;
                let v = read(dir, fv, &shape, model.dtype())?;
                opt.state.insert(name.clone(), Moments { m, v });
            }
            Some(opt)
        }
        None => None,
    };
    let rng = manifest.rng.as_ref().map(|r| r.restore()).transpose()?;
    Ok(Checkpoint { manifest, model, optimizer, rng })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::MockBackend;
    use crate::data::{generate_dataset, GenerationConfig};
    use crate::model::PriorCache;
    use rand::{RngCore, SeedableRng};

    #[test]
    fn round_trip_is_bit_identical() {
        let mut config = RunConfig::default();
        config.model.dim = 16;
        config.model.heads = 2;
        config.model.decoder_layers = 2;
        let model = Model::new(&config.model, config.ablation, Vocabulary::template(), 3).unwrap();
        let ds = generate_dataset(&GenerationConfig { scenes: 2, ..Default::default() }, 0).unwrap();
        let cache = PriorCache::build(&ds, &MockBackend::default()).unwrap();
        let batch = model.dataset_batch(&ds, &ds.samples()[..4], &cache).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        rng.next_u64();
        let mut opt = AdamW::new(config.optim.clone(), 10);
        let out = model.forward(&batch).unwrap();
        let grads = out.decoder.last().mask_logits.sum_all().unwrap().backward().unwrap();
        opt.step(&model.ps, &grads).unwrap();
        let before = model.forward(&batch).unwrap().decoder.last().mask_logits.flatten_all().unwrap().to_vec1::<f32>().unwrap();

        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &model, &config, 1, Some(&opt), Some(&rng)).unwrap();
        let ck = load_checkpoint(dir.path()).unwrap();
        let after = ck.model.forward(&batch).unwrap().decoder.last().mask_logits.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(before, after);
        assert_eq!(ck.optimizer.as_ref().unwrap().step, 1);
        assert_eq!(ck.rng.unwrap().next_u64(), rng.next_u64());
        assert_eq!(ck.manifest.config_hash, config.hash());
    }

    #[test]
    fn corrupt_manifest_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join(MANIFEST), "{}").unwrap();
        assert!(load_checkpoint(dir.path()).is_err());
    }
}
