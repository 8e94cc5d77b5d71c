//! Contextual multimodal decoder: four bidirectional attention levels,
//! coarse to fine, exchanging information between word features and the
//! visual pyramid.

use candle_core::Tensor;

use crate::error::{argument, Error, Result};
use crate::nn::ops::upsample2;
use crate::nn::{key_padding_bias, Conv3x3, Init, MultiHeadAttention, ParamGroup, ParamStore};
use crate::visual::MultiScaleVisualFeatures;

/// Output of one level.
#[derive(Debug, Clone)]
pub struct BatLevelState {
    /// `(S, L, C)`
    pub words: Tensor,
    /// `(S, H_i, W_i, C)`
    pub visual: Tensor,
}

#[derive(Debug, Clone)]
pub struct BatLevel {
    pub text_to_vision: MultiHeadAttention,
    pub vision_to_text: MultiHeadAttention,
    pub conv: Conv3x3,
}

impl BatLevel {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize, heads: usize) -> Result<Self> {
        let g = ParamGroup::Head;
        // both attentions act as multiplicative gates, which start at one
        for gate in ["t2v", "v2t"] {
            ps.get(&format!("{name}.{gate}.o.bias"), &[dim], Init::Ones, g)?;
        }
        Ok(Self {
            text_to_vision: MultiHeadAttention::new(ps, &format!("{name}.t2v"), dim, heads, g)?,
            vision_to_text: MultiHeadAttention::new(ps, &format!("{name}.v2t"), dim, heads, g)?,
            conv: Conv3x3::new(ps, &format!("{name}.conv"), dim, dim, g)?,
        })
    }

    /// `visual: (S, H, W, C)`, `words: (S, L, C)`, `word_mask: (S, L)`.
    /// `prev_visual` is absent at the first level.
    pub fn forward(
        &self,
        visual: &Tensor,
        words: &Tensor,
        word_mask: &Tensor,
        prev_visual: Option<&Tensor>,
    ) -> Result<BatLevelState> {
        let (s, h, w, c) = visual.dims4()?;
        let flat = visual.reshape((s, h * w, c))?;
        let words = (self.text_to_vision.forward(words, &flat, &flat, None)? * words)?;
        let bias = key_padding_bias(word_mask)?;
        let attended = (self.vision_to_text.forward(&flat, &words, &words, Some(&bias))? * &flat)?;
        let mut fused = attended.reshape((s, h, w, c))?;
        if let Some(prev) = prev_visual {
            let up = upsample2(prev)?;
            if up.dims() != fused.dims() {
                return Err(Error::Internal(format!(
                    "upsampled map {:?} does not match level map {:?}",
                    up.dims(),
                    fused.dims()
                )));
            }
            fused = (fused + up)?;
        }
        Ok(BatLevelState { words, visual: self.conv.forward(&fused)? })
    }
}

/// `visual[i]` is F^v_{i+1}; `words[i]` is F^w_i for `i` in `0..=4`, with
/// `words[0]` the encoder output.
#[derive(Debug, Clone)]
pub struct CmdOutput {
    pub visual: Vec<Tensor>,
    pub words: Vec<Tensor>,
}

impl CmdOutput {
    pub fn final_words(&self) -> &Tensor {
        self.words.last().expect("cmd output has word levels")
    }
}

#[derive(Debug, Clone)]
pub struct Cmd {
    pub levels: Vec<BatLevel>,
}

impl Cmd {
    pub fn new(ps: &mut ParamStore, dim: usize, heads: usize) -> Result<Self> {
        let levels = (1..=4)
            .map(|i| BatLevel::new(ps, &format!("cmd.level{i}"), dim, heads))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { levels })
    }

    pub fn forward(
        &self,
        visual: &MultiScaleVisualFeatures,
        words: &Tensor,
        word_mask: &Tensor,
    ) -> Result<CmdOutput> {
        if visual.maps.len() != self.levels.len() {
            return argument(format!("expected {} visual levels", self.levels.len()));
        }
        let mut out = CmdOutput { visual: Vec::new(), words: vec![words.clone()] };
        for (level, map) in self.levels.iter().zip(&visual.maps) {
            let state = level.forward(map, out.final_words(), word_mask, out.visual.last())?;
            out.words.push(state.words);
            out.visual.push(state.visual);
        }
        Ok(out)
    }
}

/// The decoder with this module disabled: visual levels pass through and the
/// text features stay those of the encoder.
pub fn identity_cmd(visual: &MultiScaleVisualFeatures, words: &Tensor) -> CmdOutput {
    CmdOutput { visual: visual.maps.clone(), words: vec![words.clone(); 5] }
}
