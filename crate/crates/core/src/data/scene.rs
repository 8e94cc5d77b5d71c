use serde::{Deserialize, Serialize};

use super::lexicon::Shape;
use super::mask::Mask;
use crate::error::{argument, Result};
use crate::text::DependencyParse;

/// Float RGB image in `[0, 1]`, row-major HWC.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return argument(format!(
                "image data has {} values, expected {}x{}x3",
                data.len(),
                height,
                width
            ));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [u8; 3]) -> Self {
        let px = rgb.map(|c| c as f32 / 255.0);
        Self { height, width, data: px.repeat(height * width) }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        for c in 0..3 {
            self.data[i + c] = rgb[c] as f32 / 255.0;
        }
    }

    /// Quantized to 8 bits per channel.
    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn from_rgb8(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(height, width, bytes.iter().map(|&b| b as f32 / 255.0).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExpressionKind {
    Direct,
    Paraphrase,
    Relational,
    External,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Expression {
    pub text: String,
    pub kind: ExpressionKind,
    pub parse: DependencyParse,
}

impl Expression {
    /// Builds an expression whose text is the space-joined parse tokens.
    pub fn from_parse(parse: DependencyParse, kind: ExpressionKind) -> Self {
        Self { text: parse.text(), kind, parse }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstanceAnnotation {
    pub object_key: String,
    pub color: String,
    pub shape: Shape,
    pub mask: Mask,
    pub expressions: Vec<Expression>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub scene_id: String,
    pub image: RgbImage,
    pub instances: Vec<InstanceAnnotation>,
}

impl Scene {
    pub fn height(&self) -> usize {
        self.image.height()
    }

    pub fn width(&self) -> usize {
        self.image.width()
    }

    /// Expressions of all instances, flattened in instance order. The flat
    /// position is the expression index used by prediction files.
    pub fn expressions(&self) -> impl Iterator<Item = (usize, &Expression)> {
        self.instances
            .iter()
            .enumerate()
            .flat_map(|(i, inst)| inst.expressions.iter().map(move |e| (i, e)))
    }

    pub fn expression_count(&self) -> usize {
        self.instances.iter().map(|i| i.expressions.len()).sum()
    }

    /// Resolves a flat expression index to `(instance, expression)`.
    pub fn locate_expression(&self, flat: usize) -> Option<(usize, usize)> {
        let mut rest = flat;
        for (i, inst) in self.instances.iter().enumerate() {
            if rest < inst.expressions.len() {
                return Some((i, rest));
            }
            rest -= inst.expressions.len();
        }
        None
    }

    pub fn flat_expression_index(&self, instance: usize, expression: usize) -> usize {
        self.instances[..instance]
            .iter()
            .map(|i| i.expressions.len())
            .sum::<usize>()
            + expression
    }

    /// Checks the structural invariants: disjoint nonempty masks of the
    /// image size, unique object keys, two or more expressions per instance.
    pub fn validate(&self) -> Result<()> {
        let (h, w) = (self.height(), self.width());
        for (i, inst) in self.instances.iter().enumerate() {
            if inst.mask.height() != h || inst.mask.width() != w {
                return argument(format!("{}: mask {i} has wrong size", self.scene_id));
            }
            if inst.mask.is_empty() {
                return argument(format!("{}: mask {i} is empty", self.scene_id));
            }
            if inst.expressions.len() < 2 {
                return argument(format!(
                    "{}: instance {} has fewer than two expressions",
                    self.scene_id, inst.object_key
                ));
            }
            for other in &self.instances[..i] {
                if other.object_key == inst.object_key {
                    return argument(format!(
                        "{}: duplicate object key {}",
                        self.scene_id, inst.object_key
                    ));
                }
                if other.mask.intersects(&inst.mask) {
                    return argument(format!(
                        "{}: masks of {} and {} overlap",
                        self.scene_id, other.object_key, inst.object_key
                    ));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub scenes: Vec<Scene>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }

    pub fn scene(&self, id: &str) -> Option<&Scene> {
        self.scenes.iter().find(|s| s.scene_id == id)
    }

    /// Every `(scene, instance, expression)` triple in dataset order.
    pub fn samples(&self) -> Vec<SampleRef> {
        let mut out = Vec::new();
        for (s, scene) in self.scenes.iter().enumerate() {
            for (i, inst) in scene.instances.iter().enumerate() {
                for e in 0..inst.expressions.len() {
                    out.push(SampleRef { scene: s, instance: i, expression: e });
                }
            }
        }
        out
    }

    pub fn expression(&self, r: SampleRef) -> &Expression {
        &self.scenes[r.scene].instances[r.instance].expressions[r.expression]
    }

    pub fn instance(&self, r: SampleRef) -> &InstanceAnnotation {
        &self.scenes[r.scene].instances[r.instance]
    }
}

/// Index of one referring sample inside a [`Dataset`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SampleRef {
    pub scene: usize,
    pub instance: usize,
    pub expression: usize,
}
