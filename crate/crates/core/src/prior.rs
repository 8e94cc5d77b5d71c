//! Object-centric heatmap from the frozen embedding backend and query
//! initialization from it.

use candle_core::Tensor;

use crate::backend::{ImageTokenFeatures, TextEmbedding};
use crate::error::{argument, Error, Result};
use crate::nn::{Linear, ParamGroup, ParamStore};

/// Cosine similarity of every image token to the prompt, L2-normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    /// `M + 1` entries, class token first.
    pub similarity: Vec<f64>,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl Heatmap {
    /// Patch entries in row-major grid order (class slot dropped).
    pub fn grid(&self) -> &[f64] {
        &self.similarity[1..]
    }

    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.grid()[y * self.grid_w + x]
    }

    /// Grid cell with the largest value; the first one on ties.
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = 0;
        for (i, &v) in self.grid().iter().enumerate() {
            if v > self.grid()[best] {
                best = i;
            }
        }
        (best / self.grid_w, best % self.grid_w)
    }
}

pub fn compute_heatmap(image: &ImageTokenFeatures, text: &TextEmbedding) -> Result<Heatmap> {
    if image.dim != text.vector.len() {
        return argument(format!(
            "image tokens have width {}, text embedding {}",
            image.dim,
            text.vector.len()
        ));
    }
    let norm = |v: &[f32]| v.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    let text_norm = norm(&text.vector);
    if text_norm == 0.0 {
        return Err(Error::Degenerate("text embedding has zero norm".into()));
    }
    let mut similarity = Vec::with_capacity(image.count());
    for i in 0..image.count() {
        let tok = image.token(i);
        let tok_norm = norm(tok);
        if tok_norm == 0.0 {
            return Err(Error::Degenerate(format!("image token {i} has zero norm")));
        }
        let dot: f64 = tok.iter().zip(&text.vector).map(|(&a, &b)| a as f64 * b as f64).sum();
        similarity.push(dot / (tok_norm * text_norm));
    }
    let total = similarity.iter().map(|s| s * s).sum::<f64>().sqrt();
    if total < 1e-12 {
        return Err(Error::Degenerate("prompt is orthogonal to every image token".into()));
    }
    similarity.iter_mut().for_each(|s| *s /= total);
    Ok(Heatmap { similarity, grid_h: image.grid_h, grid_w: image.grid_w })
}

/// `N x C` initial object queries.
#[derive(Debug, Clone)]
pub struct QuerySet {
    pub queries: Tensor,
}

impl QuerySet {
    pub fn count(&self) -> usize {
        self.queries.dim(0).unwrap_or(0)
    }
}

/// Projects the heatmap to the model width and adds it to the pooled text
/// vector; every query starts from that same sum.
#[derive(Debug, Clone)]
pub struct QueryInit {
    pub projection: Linear,
    tokens: usize,
}

impl QueryInit {
    pub fn new(ps: &mut ParamStore, tokens: usize, dim: usize) -> Result<Self> {
        Ok(Self {
            projection: Linear::new(ps, "prior.projection", tokens, dim, ParamGroup::Head)?,
            tokens,
        })
    }

    /// `heatmaps: (S, M + 1)`, `text: (S, C)` → `(S, N, C)`. Without a
    /// heatmap the queries are the tiled text vector alone.
    pub fn forward(&self, heatmaps: Option<&Tensor>, text: &Tensor, count: usize) -> Result<Tensor> {
        if count == 0 {
            return argument("query count must be positive");
        }
        let (s, c) = text.dims2()?;
        let mut base = text.clone();
        if let Some(h) = heatmaps {
            let (hs, m) = h.dims2()?;
            if hs != s || m != self.tokens {
                return argument(format!(
                    "heatmap batch {:?} does not match {} tokens for {s} samples",
                    h.dims(),
                    self.tokens
                ));
            }
            let projected = self.projection.forward(h)?;
            if projected.dim(1)? != c {
                return argument("text width differs from query width");
            }
            base = (base + projected)?;
        }
        Ok(base.unsqueeze(1)?.broadcast_as((s, count, c))?.contiguous()?)
    }

    /// Single-sample form: `similarity` of length `M + 1`, text vector `C`.
    pub fn init_queries(&self, heatmap: &Heatmap, text: &Tensor, count: usize) -> Result<QuerySet> {
        let h = Tensor::from_vec(heatmap.similarity.clone(), (1, heatmap.similarity.len()), text.device())?
            .to_dtype(text.dtype())?;
        let q = self.forward(Some(&h), &text.unsqueeze(0)?, count)?;
        Ok(QuerySet { queries: q.squeeze(0)? })
    }
}
