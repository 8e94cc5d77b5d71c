//! The full network and batch assembly.

use std::collections::HashMap;

use candle_core::{DType, Tensor};

use crate::backend::{EmbeddingBackend, PATCH};
use crate::cmd::{identity_cmd, Cmd, CmdOutput};
use crate::config::{AblationFlags, ModelConfig};
use crate::data::{Dataset, Expression, Mask, RgbImage, SampleRef};
use crate::decoder::{Decoder, DecoderOutput};
use crate::error::{argument, Error, Result};
use crate::mcc::sentence_feature;
use crate::nn::ParamStore;
use crate::prior::{compute_heatmap, QueryInit};
use crate::text::{build_prompt, extract_main_object, TextEncoder, TokenBatch, Vocabulary};
use crate::visual::{image_batch, VisualEncoder};

/// Prior similarity vector for one image and expression. Expressions whose
/// prompt matches nothing in the backend vocabulary get a zero vector.
pub fn prior_similarity(
    backend: &dyn EmbeddingBackend,
    image_key: &str,
    image: &RgbImage,
    expression: &Expression,
) -> Result<Vec<f64>> {
    let tokens = backend.embed_image(image_key, image)?;
    prior_from_tokens(backend, &tokens, expression)
}

fn prior_from_tokens(
    backend: &dyn EmbeddingBackend,
    tokens: &crate::backend::ImageTokenFeatures,
    expression: &Expression,
) -> Result<Vec<f64>> {
    let prompt = build_prompt(&extract_main_object(&expression.parse).phrase)?;
    let text = backend.embed_text(&prompt)?;
    match compute_heatmap(tokens, &text) {
        Ok(h) => Ok(h.similarity),
        Err(Error::Degenerate(_)) => Ok(vec![0.0; tokens.count()]),
        Err(e) => Err(e),
    }
}

/// Prior vectors for every expression of a dataset, computed once.
#[derive(Debug, Clone, Default)]
pub struct PriorCache {
    entries: HashMap<SampleRef, Vec<f64>>,
    pub degenerate: usize,
}

impl PriorCache {
    pub fn build(dataset: &Dataset, backend: &dyn EmbeddingBackend) -> Result<Self> {
        let mut cache = Self::default();
        for (s, scene) in dataset.scenes.iter().enumerate() {
            let tokens = backend.embed_image(&scene.scene_id, &scene.image)?;
            for (i, inst) in scene.instances.iter().enumerate() {
                for (e, expr) in inst.expressions.iter().enumerate() {
                    let v = prior_from_tokens(backend, &tokens, expr)?;
                    if v.iter().all(|&x| x == 0.0) {
                        cache.degenerate += 1;
                    }
                    cache.entries.insert(SampleRef { scene: s, instance: i, expression: e }, v);
                }
            }
        }
        Ok(cache)
    }

    pub fn get(&self, r: SampleRef) -> Option<&[f64]> {
        self.entries.get(&r).map(|v| v.as_slice())
    }
}

/// One forward batch: `S` expressions over `B` images.
#[derive(Debug, Clone)]
pub struct Batch {
    /// `(B, H, W, 3)`
    pub images: Tensor,
    /// `(S,)` image of each sample.
    pub image_index: Tensor,
    pub tokens: TokenBatch,
    /// `(S, M + 1)`
    pub priors: Tensor,
    /// `(S, H/4, W/4)` stride-4 targets, when known.
    pub targets: Option<Tensor>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.tokens.lengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Everything a sample needs to enter a batch.
#[derive(Debug, Clone, Copy)]
pub struct SampleInput<'a> {
    pub image: &'a RgbImage,
    pub expression: &'a Expression,
    pub prior: &'a [f64],
    pub target: Option<&'a Mask>,
}

#[derive(Debug, Clone)]
pub struct ModelOutput {
    pub decoder: DecoderOutput,
    pub cmd: CmdOutput,
    /// `(S, L)` word validity.
    pub word_mask: Tensor,
}

impl ModelOutput {
    /// Sentence features `(S, C)` at text level `0..=4`.
    pub fn sentence_features(&self, level: usize) -> Result<Tensor> {
        sentence_feature(&self.cmd.words[level], &self.word_mask)
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub flags: AblationFlags,
    pub ps: ParamStore,
    pub vocab: Vocabulary,
    pub text: TextEncoder,
    pub visual: VisualEncoder,
    pub prior: Option<QueryInit>,
    pub cmd: Option<Cmd>,
    pub decoder: Decoder,
}

impl Model {
    pub fn new(config: &ModelConfig, flags: AblationFlags, vocab: Vocabulary, seed: u64) -> Result<Self> {
        let dtype = if config.float64 { DType::F64 } else { DType::F32 };
        let mut ps = ParamStore::new(dtype, seed);
        let text = TextEncoder::new(&mut ps, vocab.len(), config.dim, config.heads, config.text_positional)?;
        let visual = VisualEncoder::new(&mut ps, config.dim)?;
        let grid = config.image_size / PATCH;
        let prior = if flags.clip_prior {
            Some(QueryInit::new(&mut ps, grid * grid + 1, config.dim)?)
        } else {
            None
        };
        let cmd = if flags.cmd { Some(Cmd::new(&mut ps, config.dim, config.heads)?) } else { None };
        let decoder = Decoder::new(&mut ps, config.dim, config.heads, config.decoder_layers)?;
        Ok(Self { config: config.clone(), flags, ps, vocab, text, visual, prior, cmd, decoder })
    }

    pub fn dtype(&self) -> DType {
        self.ps.dtype()
    }

    pub fn prior_len(&self) -> usize {
        let g = self.config.image_size / PATCH;
        g * g + 1
    }

    /// Assembles a batch; images shared by several samples are encoded once.
    pub fn make_batch(&self, samples: &[SampleInput]) -> Result<Batch> {
        if samples.is_empty() {
            return argument("empty batch");
        }
        let size = self.config.image_size;
        let mut images: Vec<&RgbImage> = Vec::new();
        let mut index = Vec::with_capacity(samples.len());
        let mut sequences = Vec::with_capacity(samples.len());
        let mut priors = Vec::with_capacity(samples.len() * self.prior_len());
        let mut targets = Vec::new();
        let with_targets = samples.iter().all(|s| s.target.is_some());
        for s in samples {
            if s.image.height() != size || s.image.width() != size {
                return argument(format!(
                    "image is {}x{}, model expects {size}x{size}",
                    s.image.height(),
                    s.image.width()
                ));
            }
            let pos = match images.iter().position(|&i| std::ptr::eq(i, s.image)) {
                Some(p) => p,
                None => {
                    images.push(s.image);
                    images.len() - 1
                }
            };
            index.push(pos as u32);
            let ids = self.vocab.encode(s.expression);
            if ids.is_empty() {
                return argument("expression has no tokens");
            }
            sequences.push(ids);
            if s.prior.len() != self.prior_len() {
                return argument(format!("prior has {} entries, expected {}", s.prior.len(), self.prior_len()));
            }
            priors.extend_from_slice(s.prior);
            if with_targets {
                let t = s.target.unwrap().downsample(4)?;
                targets.extend(t.data().iter().map(|&b| if b { 1.0 } else { 0.0 }));
            }
        }
        let n = samples.len();
        let dev = self.ps.device();
        Ok(Batch {
            images: image_batch(&images, &self.ps)?,
            image_index: Tensor::from_vec(index, n, dev)?,
            tokens: TokenBatch::new(&sequences, self.dtype())?,
            priors: self.ps.constant(priors, &[n, self.prior_len()])?,
            targets: if with_targets { Some(self.ps.constant(targets, &[n, size / 4, size / 4])?) } else { None },
        })
    }

    /// Batch for dataset samples with priors from `cache`.
    pub fn dataset_batch(&self, dataset: &Dataset, refs: &[SampleRef], cache: &PriorCache) -> Result<Batch> {
        let inputs = refs
            .iter()
            .map(|&r| {
                Ok(SampleInput {
                    image: &dataset.scenes[r.scene].image,
                    expression: dataset.expression(r),
                    prior: cache.get(r).ok_or_else(|| Error::Internal(format!("no prior for {r:?}")))?,
                    target: Some(&dataset.instance(r).mask),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        self.make_batch(&inputs)
    }

    pub fn forward(&self, batch: &Batch) -> Result<ModelOutput> {
        let pyramid = self.visual.forward(&batch.images)?;
        let per_sample = crate::visual::MultiScaleVisualFeatures {
            maps: pyramid
                .maps
                .iter()
                .map(|m| m.index_select(&batch.image_index, 0))
                .collect::<candle_core::Result<Vec<_>>>()?,
        };
        let words = self.text.forward(&batch.tokens)?;
        let mask = &batch.tokens.mask;
        let cmd = match &self.cmd {
            Some(c) => c.forward(&per_sample, &words, mask)?,
            None => identity_cmd(&per_sample, &words),
        };
        let pooled = sentence_feature(&words, mask)?;
        let n = self.config.queries;
        let queries = match &self.prior {
            Some(p) => p.forward(Some(&batch.priors), &pooled, n)?,
            None => {
                let (s, c) = pooled.dims2()?;
                pooled.unsqueeze(1)?.broadcast_as((s, n, c))?.contiguous()?
            }
        };
        let decoder = self.decoder.forward(&queries, &cmd.visual[..3], &cmd.visual[3])?;
        Ok(ModelOutput { decoder, cmd, word_mask: mask.clone() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::MockBackend;
    use crate::data::{generate_dataset, GenerationConfig};

    fn small() -> ModelConfig {
        ModelConfig { dim: 16, heads: 2, decoder_layers: 3, ..Default::default() }
    }

    #[test]
    fn forward_shapes() {
        let ds = generate_dataset(&GenerationConfig { scenes: 2, ..Default::default() }, 1).unwrap();
        let cache = PriorCache::build(&ds, &MockBackend::default()).unwrap();
        assert_eq!(cache.degenerate, 0);
        let model = Model::new(&small(), AblationFlags::FULL, Vocabulary::template(), 0).unwrap();
        let refs: Vec<SampleRef> = ds.samples().into_iter().take(5).collect();
        let batch = model.dataset_batch(&ds, &refs, &cache).unwrap();
        let out = model.forward(&batch).unwrap();
        assert_eq!(out.decoder.last().mask_logits.dims(), &[5, 5, 16, 16]);
        assert_eq!(out.decoder.predictions.len(), 4);
        assert_eq!(out.sentence_features(4).unwrap().dims(), &[5, 16]);
        assert_eq!(batch.images.dim(0).unwrap(), refs.iter().map(|r| r.scene).collect::<std::collections::BTreeSet<_>>().len());
    }

    #[test]
    fn ablated_model_runs() {
        let ds = generate_dataset(&GenerationConfig { scenes: 1, ..Default::default() }, 1).unwrap();
        let cache = PriorCache::build(&ds, &MockBackend::default()).unwrap();
        let model = Model::new(&small(), AblationFlags::BASELINE, Vocabulary::template(), 0).unwrap();
        assert!(model.cmd.is_none() && model.prior.is_none());
        let batch = model.dataset_batch(&ds, &ds.samples()[..2], &cache).unwrap();
        let out = model.forward(&batch).unwrap();
        assert_eq!(out.cmd.words.len(), 5);
    }
}
