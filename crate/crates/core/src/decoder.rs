//! Masked-attention query decoder and the probability / mask heads.

use candle_core::{Tensor, D};

use crate::error::{argument, Result};
use crate::nn::ops::{self, sigmoid, MASKED};
use crate::nn::{FeedForward, LayerNorm, Linear, MultiHeadAttention, ParamGroup, ParamStore};

/// Per-query probability and mask logits for a batch.
#[derive(Debug, Clone)]
pub struct PredictionSet {
    /// `(S, N)` logits of the per-query probability.
    pub prob_logits: Tensor,
    /// `(S, N, H/4, W/4)`
    pub mask_logits: Tensor,
}

impl PredictionSet {
    pub fn probs(&self) -> Result<Tensor> {
        sigmoid(&self.prob_logits)
    }
}

#[derive(Debug, Clone)]
pub struct DecoderOutput {
    /// Refined queries `(S, N, C)`.
    pub queries: Tensor,
    /// Predictions from the initial queries and after every layer; the last
    /// entry is the final prediction.
    pub predictions: Vec<PredictionSet>,
}

impl DecoderOutput {
    pub fn last(&self) -> &PredictionSet {
        self.predictions.last().expect("decoder output has predictions")
    }

    pub fn auxiliary(&self) -> &[PredictionSet] {
        &self.predictions[..self.predictions.len() - 1]
    }
}

/// `F_v_4 (S, H, W, C)` against queries `(S, N, C)`.
pub fn predict(class_head: &Linear, queries: &Tensor, finest: &Tensor) -> Result<PredictionSet> {
    let (s, h, w, c) = finest.dims4()?;
    let (sq, n, cq) = queries.dims3()?;
    if sq != s || cq != c {
        return argument(format!("queries {:?} do not match features {:?}", queries.dims(), finest.dims()));
    }
    let flat = finest.reshape((s, h * w, c))?;
    let mask_logits = queries.matmul(&flat.t()?)?.reshape((s, n, h, w))?;
    let prob_logits = class_head.forward(queries)?.squeeze(D::Minus1)?;
    Ok(PredictionSet { prob_logits, mask_logits })
}

/// Attention bias `(S, 1, N, h*w)` restricting each query to the cells
/// where its previous mask, area-averaged to `h x w`, has probability at
/// least 0.5. A query with no such cell attends everywhere.
pub fn attention_mask_bias(mask_logits: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (s, n, mh, mw) = mask_logits.dims4()?;
    if mh % h != 0 || mw % w != 0 {
        return argument(format!("cannot resize a {mh}x{mw} mask to {h}x{w}"));
    }
    let (fy, fx) = (mh / h, mw / w);
    let probs = sigmoid(&mask_logits.detach())?
        .to_dtype(candle_core::DType::F64)?
        .flatten_all()?
        .to_vec1::<f64>()?;
    let mut bias = vec![0.0; s * n * h * w];
    for q in 0..s * n {
        let src = &probs[q * mh * mw..(q + 1) * mh * mw];
        let dst = &mut bias[q * h * w..(q + 1) * h * w];
        let mut any = false;
        for y in 0..h {
            for x in 0..w {
                let mut sum = 0.0;
                for dy in 0..fy {
                    for dx in 0..fx {
                        sum += src[(y * fy + dy) * mw + x * fx + dx];
                    }
                }
                let keep = sum / (fy * fx) as f64 >= 0.5;
                any |= keep;
                dst[y * w + x] = if keep { 0.0 } else { MASKED };
            }
        }
        if !any {
            dst.iter_mut().for_each(|b| *b = 0.0);
        }
    }
    ops::constant(bias, &[s, 1, n, h * w], mask_logits.dtype())
}

#[derive(Debug, Clone)]
pub struct DecoderLayer {
    pub cross: MultiHeadAttention,
    pub cross_norm: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub self_norm: LayerNorm,
    pub ffn: FeedForward,
    pub ffn_norm: LayerNorm,
}

impl DecoderLayer {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize, heads: usize) -> Result<Self> {
        let g = ParamGroup::Head;
        Ok(Self {
            cross: MultiHeadAttention::new(ps, &format!("{name}.cross"), dim, heads, g)?,
            cross_norm: LayerNorm::new(ps, &format!("{name}.cross_norm"), dim, g)?,
            self_attn: MultiHeadAttention::new(ps, &format!("{name}.self"), dim, heads, g)?,
            self_norm: LayerNorm::new(ps, &format!("{name}.self_norm"), dim, g)?,
            ffn: FeedForward::new(ps, &format!("{name}.ffn"), dim, 4 * dim, g)?,
            ffn_norm: LayerNorm::new(ps, &format!("{name}.ffn_norm"), dim, g)?,
        })
    }

    /// `queries: (S, N, C)`, `memory: (S, H, W, C)`, `bias: (S, 1, N, H*W)`.
    /// Returns the updated queries and the cross-attention weights.
    pub fn forward(&self, queries: &Tensor, memory: &Tensor, bias: Option<&Tensor>) -> Result<(Tensor, Tensor)> {
        let (s, h, w, c) = memory.dims4()?;
        let values = memory.reshape((s, h * w, c))?;
        let pos = ops::constant(ops::sinusoidal_2d(h, w, c), &[1, h * w, c], memory.dtype())?;
        let keys = values.broadcast_add(&pos)?;
        let (attended, weights) = self.cross.forward_with_weights(queries, &keys, &values, bias)?;
        let q = self.cross_norm.forward(&(queries + attended)?)?;
        let q = self.self_norm.forward(&(&q + self.self_attn.forward(&q, &q, &q, None)?)?)?;
        let q = self.ffn_norm.forward(&(&q + self.ffn.forward(&q)?)?)?;
        Ok((q, weights))
    }
}

#[derive(Debug, Clone)]
pub struct Decoder {
    pub layers: Vec<DecoderLayer>,
    pub class_head: Linear,
}

impl Decoder {
    pub fn new(ps: &mut ParamStore, dim: usize, heads: usize, layers: usize) -> Result<Self> {
        if layers == 0 {
            return argument("decoder needs at least one layer");
        }
        Ok(Self {
            layers: (0..layers)
                .map(|i| DecoderLayer::new(ps, &format!("decoder.layer{i}"), dim, heads))
                .collect::<Result<_>>()?,
            class_head: Linear::new(ps, "decoder.class", dim, 1, ParamGroup::Head)?,
        })
    }

    /// `scales` are the three coarsest fused maps, visited round-robin;
    /// `finest` is the stride-4 map the masks are read from.
    pub fn forward(&self, queries: &Tensor, scales: &[Tensor], finest: &Tensor) -> Result<DecoderOutput> {
        if scales.is_empty() {
            return argument("decoder needs at least one memory scale");
        }
        let mut q = queries.clone();
        let mut predictions = vec![predict(&self.class_head, &q, finest)?];
        for (i, layer) in self.layers.iter().enumerate() {
            let memory = &scales[i % scales.len()];
            let (_, h, w, _) = memory.dims4()?;
            let bias = attention_mask_bias(&predictions.last().unwrap().mask_logits, h, w)?;
            q = layer.forward(&q, memory, Some(&bias))?.0;
            predictions.push(predict(&self.class_head, &q, finest)?);
        }
        Ok(DecoderOutput { queries: q, predictions })
    }
}
