//! Convolutional pyramid producing four feature maps at strides 32, 16, 8
//! and 4, each projected to the model width.

use candle_core::Tensor;

use crate::error::{argument, Result};
use crate::nn::ops::{avg_pool2, gelu};
use crate::nn::{Conv3x3, Linear, ParamGroup, ParamStore};

/// Levels ordered coarse to fine: `maps[0]` is V_1 (stride 32), `maps[3]`
/// is V_4 (stride 4). Each map is `(B, H_i, W_i, C)`.
#[derive(Debug, Clone)]
pub struct MultiScaleVisualFeatures {
    pub maps: Vec<Tensor>,
}

impl MultiScaleVisualFeatures {
    pub fn level(&self, i: usize) -> &Tensor {
        &self.maps[i - 1]
    }

    pub fn finest(&self) -> &Tensor {
        &self.maps[3]
    }
}

const GAIN: f64 = std::f64::consts::SQRT_2;

pub const STRIDES: [usize; 4] = [32, 16, 8, 4];

#[derive(Debug, Clone)]
pub struct VisualEncoder {
    stem: Vec<Conv3x3>,
    stages: Vec<Conv3x3>,
    projections: Vec<Linear>,
    dim: usize,
}

impl VisualEncoder {
    pub fn new(ps: &mut ParamStore, dim: usize) -> Result<Self> {
        let g = ParamGroup::Backbone;
        let stem = vec![
            Conv3x3::with_gain(ps, "visual.stem0", 3, 16, GAIN, g)?,
            Conv3x3::with_gain(ps, "visual.stem1", 16, 32, GAIN, g)?,
        ];
        let widths = [32, 32, 48, 64, 64];
        let mut stages = Vec::new();
        for i in 0..4 {
            stages.push(Conv3x3::with_gain(ps, &format!("visual.stage{i}"), widths[i], widths[i + 1], GAIN, g)?);
        }
        // stage i produces stride 4 * 2^i; projections are stored fine to coarse
        let mut projections = Vec::new();
        for (i, &w) in widths[1..].iter().enumerate() {
            projections.push(Linear::new(ps, &format!("visual.proj{i}"), w, dim, g)?);
        }
        Ok(Self { stem, stages, projections, dim })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `images: (B, H, W, 3)` with values in `[0, 1]`.
    pub fn forward(&self, images: &Tensor) -> Result<MultiScaleVisualFeatures> {
        let (_, h, w, c) = images.dims4()?;
        if c != 3 {
            return argument(format!("expected 3 image channels, got {c}"));
        }
        if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
            return argument(format!("image size {h}x{w} is not a multiple of 32"));
        }
        let mut x = gelu(&self.stem[0].forward(images)?)?;
        x = avg_pool2(&x)?;
        x = gelu(&self.stem[1].forward(&x)?)?;
        x = avg_pool2(&x)?;
        let mut fine_to_coarse = Vec::with_capacity(4);
        for (i, stage) in self.stages.iter().enumerate() {
            if i > 0 {
                x = avg_pool2(&x)?;
            }
            x = gelu(&stage.forward(&x)?)?;
            fine_to_coarse.push(self.projections[i].forward(&x)?);
        }
        fine_to_coarse.reverse();
        Ok(MultiScaleVisualFeatures { maps: fine_to_coarse })
    }
}

/// Stacks images into a `(B, H, W, 3)` tensor.
pub fn image_batch(images: &[&crate::data::RgbImage], ps: &ParamStore) -> Result<Tensor> {
    let Some(first) = images.first() else {
        return argument("empty image batch");
    };
    let (h, w) = (first.height(), first.width());
    let mut values = Vec::with_capacity(images.len() * h * w * 3);
    for img in images {
        if img.height() != h || img.width() != w {
            return argument("images in a batch must share a size");
        }
        values.extend(img.data().iter().map(|&v| v as f64));
    }
    ps.constant(values, &[images.len(), h, w, 3])
}
