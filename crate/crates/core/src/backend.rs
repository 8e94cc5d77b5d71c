//! Frozen joint image/text embedding providers.
//!
//! The mock backend describes every 16x16 patch by the fraction of its
//! pixels that are background, each palette color, and each recognised
//! shape (background counts at a quarter weight, so a patch only partly
//! covered by an object still points at it), and maps that descriptor through a seeded matrix with orthonormal
//! columns. Prompts are described by the color and shape words they contain
//! and go through the same matrix, so cosine similarity in embedding space
//! equals cosine similarity of descriptors.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Deserialize;
use std::collections::HashMap;
use std::path::{Path, PathBuf};

use crate::data::lexicon::{self, Shape, PALETTE};
use crate::data::RgbImage;
use crate::error::{argument, Error, Result};
use crate::tensor_file::read_tensor_file;

pub const PATCH: usize = 16;
pub const MOCK_DIM: usize = 32;
const MOCK_SEED: u64 = 0x5eed_c11b;
/// background + colors + shapes
const DESCRIPTOR: usize = 1 + PALETTE.len() + 3;
const BACKGROUND_WEIGHT: f64 = 0.25;

/// Class token followed by one token per patch in row-major order,
/// `(M + 1) x D`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTokenFeatures {
    pub tokens: Vec<f32>,
    pub dim: usize,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl ImageTokenFeatures {
    pub fn count(&self) -> usize {
        self.grid_h * self.grid_w + 1
    }

    pub fn token(&self, i: usize) -> &[f32] {
        &self.tokens[i * self.dim..(i + 1) * self.dim]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbedding {
    pub vector: Vec<f32>,
}

pub trait EmbeddingBackend: Send + Sync {
    fn dim(&self) -> usize;

    /// `key` identifies the image for backends that look up precomputed
    /// features; the mock backend ignores it.
    fn embed_image(&self, key: &str, image: &RgbImage) -> Result<ImageTokenFeatures>;

    fn embed_text(&self, prompt: &str) -> Result<TextEmbedding>;
}

#[derive(Debug, Clone)]
pub struct MockBackend {
    /// `D x DESCRIPTOR`, row-major, orthonormal columns.
    projection: Vec<f64>,
}

impl Default for MockBackend {
    fn default() -> Self {
        Self::new(MOCK_SEED)
    }
}

impl MockBackend {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Gram-Schmidt over Gaussian columns.
        let mut cols: Vec<Vec<f64>> = Vec::with_capacity(DESCRIPTOR);
        while cols.len() < DESCRIPTOR {
            let mut v: Vec<f64> = (0..MOCK_DIM).map(|_| StandardNormal.sample(&mut rng)).collect();
            for c in &cols {
                let dot: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(c).for_each(|(a, b)| *a -= dot * b);
            }
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm > 1e-6 {
                cols.push(v.into_iter().map(|a| a / norm).collect());
            }
        }
        let mut projection = vec![0.0; MOCK_DIM * DESCRIPTOR];
        for (j, c) in cols.iter().enumerate() {
            for i in 0..MOCK_DIM {
                projection[i * DESCRIPTOR + j] = c[i];
            }
        }
        Self { projection }
    }

    fn project(&self, descriptor: &[f64; DESCRIPTOR]) -> Vec<f32> {
        (0..MOCK_DIM)
            .map(|i| {
                let row = &self.projection[i * DESCRIPTOR..(i + 1) * DESCRIPTOR];
                row.iter().zip(descriptor).map(|(a, b)| a * b).sum::<f64>() as f32
            })
            .collect()
    }

    /// Descriptor of a prompt: one count per color and shape word.
    pub fn text_descriptor(prompt: &str) -> [f64; DESCRIPTOR] {
        let mut d = [0.0; DESCRIPTOR];
        for word in prompt.split_whitespace() {
            let word = word
                .trim_matches(|c: char| !c.is_alphanumeric())
                .to_lowercase();
            if let Some(c) = lexicon::color_word(&word) {
                d[1 + c] += 1.0;
            } else if let Some(s) = lexicon::shape_word(&word) {
                d[1 + PALETTE.len() + s.index()] += 1.0;
            }
        }
        d
    }
}

/// Per-pixel palette label (`None` = background).
fn label_pixels(image: &RgbImage) -> Vec<Option<usize>> {
    let mut labels = Vec::with_capacity(image.height() * image.width());
    for y in 0..image.height() {
        for x in 0..image.width() {
            let px = image.pixel(y, x);
            let label = PALETTE.iter().position(|c| {
                c.rgb
                    .iter()
                    .zip(px)
                    .all(|(&a, b)| (a as f32 / 255.0 - b).abs() < 0.1)
            });
            labels.push(label);
        }
    }
    labels
}

/// Shape of every foreground pixel, from 4-connected same-color
/// components: a full bounding box is a square, a component wider at the
/// bottom than at the top is a triangle, anything else a circle.
pub fn recognise_shapes(image: &RgbImage) -> Vec<Option<Shape>> {
    let (h, w) = (image.height(), image.width());
    let labels = label_pixels(image);
    let mut shapes = vec![None; h * w];
    let mut seen = vec![false; h * w];
    for start in 0..h * w {
        let Some(color) = labels[start] else { continue };
        if seen[start] {
            continue;
        }
        let mut stack = vec![start];
        let mut component = Vec::new();
        seen[start] = true;
        while let Some(p) = stack.pop() {
            component.push(p);
            let (y, x) = (p / w, p % w);
            let mut push = |q: usize| {
                if !seen[q] && labels[q] == Some(color) {
                    seen[q] = true;
                    stack.push(q);
                }
            };
            if y > 0 { push(p - w); }
            if y + 1 < h { push(p + w); }
            if x > 0 { push(p - 1); }
            if x + 1 < w { push(p + 1); }
        }
        let (mut y0, mut y1, mut x0, mut x1) = (h, 0, w, 0);
        for &p in &component {
            let (y, x) = (p / w, p % w);
            y0 = y0.min(y);
            y1 = y1.max(y);
            x0 = x0.min(x);
            x1 = x1.max(x);
        }
        let box_area = (y1 - y0 + 1) * (x1 - x0 + 1);
        let row_width = |r: usize| component.iter().filter(|&&p| p / w == r).count();
        let shape = if component.len() == box_area {
            Shape::Square
        } else if row_width(y1) > row_width(y0) {
            Shape::Triangle
        } else {
            Shape::Circle
        };
        for &p in &component {
            shapes[p] = Some(shape);
        }
    }
    shapes
}

impl EmbeddingBackend for MockBackend {
    fn dim(&self) -> usize {
        MOCK_DIM
    }

    fn embed_image(&self, _key: &str, image: &RgbImage) -> Result<ImageTokenFeatures> {
        let (h, w) = (image.height(), image.width());
        if h == 0 || w == 0 || h % PATCH != 0 || w % PATCH != 0 {
            return argument(format!("image {h}x{w} is not divisible into {PATCH}x{PATCH} patches"));
        }
        let labels = label_pixels(image);
        let shapes = recognise_shapes(image);
        let (gh, gw) = (h / PATCH, w / PATCH);
        let area = (PATCH * PATCH) as f64;
        let mut patch_tokens = Vec::with_capacity(gh * gw);
        for py in 0..gh {
            for px in 0..gw {
                let mut d = [0.0; DESCRIPTOR];
                for y in py * PATCH..(py + 1) * PATCH {
                    for x in px * PATCH..(px + 1) * PATCH {
                        let p = y * w + x;
                        match labels[p] {
                            None => d[0] += BACKGROUND_WEIGHT,
                            Some(c) => d[1 + c] += 1.0,
                        }
                        if let Some(s) = shapes[p] {
                            d[1 + PALETTE.len() + s.index()] += 1.0;
                        }
                    }
                }
                d.iter_mut().for_each(|v| *v /= area);
                patch_tokens.push(self.project(&d));
            }
        }
        let mut cls = vec![0f32; MOCK_DIM];
        for t in &patch_tokens {
            cls.iter_mut().zip(t).for_each(|(a, b)| *a += b / patch_tokens.len() as f32);
        }
        let mut tokens = cls;
        for t in patch_tokens {
            tokens.extend(t);
        }
        Ok(ImageTokenFeatures { tokens, dim: MOCK_DIM, grid_h: gh, grid_w: gw })
    }

    fn embed_text(&self, prompt: &str) -> Result<TextEmbedding> {
        Ok(TextEmbedding { vector: self.project(&Self::text_descriptor(prompt)) })
    }
}

/// Reads precomputed features from `<dir>/embeddings/`: `<scene_id>.bin`
/// tensor files of shape `(M + 1, D)` and `text.jsonl` lines
/// `{"prompt": ..., "vector": [...]}`.
#[derive(Debug, Clone)]
pub struct ExternalBackend {
    dir: PathBuf,
    dim: usize,
    text: HashMap<String, Vec<f32>>,
}

#[derive(Deserialize)]
struct TextRecord {
    prompt: String,
    vector: Vec<f32>,
}

impl ExternalBackend {
    pub fn open(dataset_dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dataset_dir.as_ref().join("embeddings");
        let path = dir.join("text.jsonl");
        let mut text = HashMap::new();
        let mut dim = None;
        for (n, line) in std::fs::read_to_string(&path)?.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: TextRecord = serde_json::from_str(line).map_err(|e| Error::Format {
                path: path.clone(),
                record: format!("line {}", n + 1),
                message: e.to_string(),
            })?;
            if *dim.get_or_insert(rec.vector.len()) != rec.vector.len() {
                return Err(Error::Format {
                    path: path.clone(),
                    record: format!("line {}", n + 1),
                    message: "inconsistent embedding width".into(),
                });
            }
            text.insert(rec.prompt, rec.vector);
        }
        let dim = dim.ok_or_else(|| Error::Argument(format!("{} has no embeddings", path.display())))?;
        Ok(Self { dir, dim, text })
    }
}

impl EmbeddingBackend for ExternalBackend {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_image(&self, key: &str, image: &RgbImage) -> Result<ImageTokenFeatures> {
        let (h, w) = (image.height(), image.width());
        if h % PATCH != 0 || w % PATCH != 0 {
            return argument(format!("image {h}x{w} is not divisible into {PATCH}x{PATCH} patches"));
        }
        let (shape, tokens) = read_tensor_file(self.dir.join(format!("{key}.bin")))?;
        let (gh, gw) = (h / PATCH, w / PATCH);
        if shape != [gh * gw + 1, self.dim] {
            return argument(format!(
                "embedding file for {key} has shape {shape:?}, expected [{}, {}]",
                gh * gw + 1,
                self.dim
            ));
        }
        Ok(ImageTokenFeatures { tokens, dim: self.dim, grid_h: gh, grid_w: gw })
    }

    fn embed_text(&self, prompt: &str) -> Result<TextEmbedding> {
        self.text
            .get(prompt)
            .map(|v| TextEmbedding { vector: v.clone() })
            .ok_or_else(|| Error::Argument(format!("no precomputed text embedding for {prompt:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Mock,
    External,
}

pub fn open_backend(kind: BackendKind, dataset_dir: Option<&Path>) -> Result<Box<dyn EmbeddingBackend>> {
    match kind {
        BackendKind::Mock => Ok(Box::new(MockBackend::default())),
        BackendKind::External => {
            let dir = dataset_dir.ok_or_else(|| Error::Config("external backend needs a dataset directory".into()))?;
            Ok(Box::new(ExternalBackend::open(dir)?))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, GenerationConfig};
    use crate::tensor_file::write_tensor_file;

    fn cosine(a: &[f32], b: &[f32]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| (*x as f64) * (*y as f64)).sum();
        let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
        dot / (na * nb)
    }

    #[test]
    fn token_count_and_uniform_image() {
        let img = RgbImage::filled(64, 64, [0, 0, 0]);
        let f = MockBackend::default().embed_image("x", &img).unwrap();
        assert_eq!(f.count(), 17);
        assert_eq!(f.tokens.len(), 17 * MOCK_DIM);
        for i in 2..17 {
            assert_eq!(f.token(i), f.token(1));
        }
        assert!(MockBackend::default().embed_image("x", &RgbImage::filled(40, 64, [0, 0, 0])).is_err());
    }

    #[test]
    fn red_circle_patch_beats_blue_patch() {
        let mut img = RgbImage::filled(32, 16, lexicon::BACKGROUND_RGB);
        // Upper patch: a red disc larger than the patch, clipped to it.
        for y in 0..16 {
            for x in 0..16 {
                img.set_pixel(y, x, PALETTE[0].rgb);
            }
        }
        for (y, x) in [(0, 0), (0, 15), (15, 0), (15, 15)] {
            img.set_pixel(y, x, lexicon::BACKGROUND_RGB);
        }
        for y in 16..32 {
            for x in 0..16 {
                img.set_pixel(y, x, PALETTE[2].rgb);
            }
        }
        let b = MockBackend::default();
        let f = b.embed_image("x", &img).unwrap();
        let t = b.embed_text("A Photo of the red circle").unwrap();
        assert!(cosine(f.token(1), &t.vector) > cosine(f.token(2), &t.vector));
    }

    #[test]
    fn template_words_are_ignored() {
        let b = MockBackend::default();
        assert_eq!(b.embed_text("A Photo of the red circle").unwrap(), b.embed_text("red circle").unwrap());
        assert_eq!(b.embed_text("x").unwrap(), b.embed_text("x").unwrap());
        let c = cosine(
            &b.embed_text("A Photo of the red circle").unwrap().vector,
            &b.embed_text("A Photo of the blue square").unwrap().vector,
        );
        assert!(c < 1.0 - 1e-6);
        assert!(c.abs() < 1e-6, "distinct words map to orthogonal directions: {c}");
    }

    #[test]
    fn generated_shapes_are_recognised() {
        let ds = generate_dataset(&GenerationConfig { scenes: 60, ..Default::default() }, 21).unwrap();
        for scene in &ds.scenes {
            let shapes = recognise_shapes(&scene.image);
            for inst in &scene.instances {
                for y in 0..scene.height() {
                    for x in 0..scene.width() {
                        if inst.mask.get(y, x) {
                            assert_eq!(shapes[y * scene.width() + x], Some(inst.shape), "{}", scene.scene_id);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn external_backend_reads_files() {
        let dir = tempfile::tempdir().unwrap();
        let emb = dir.path().join("embeddings");
        std::fs::create_dir_all(&emb).unwrap();
        let values: Vec<f32> = (0..17 * 4).map(|i| i as f32).collect();
        write_tensor_file(emb.join("s0.bin"), &[17, 4], &values).unwrap();
        std::fs::write(emb.join("text.jsonl"), "{\"prompt\":\"A Photo of x\",\"vector\":[1,0,0,0]}\n").unwrap();
        let b = ExternalBackend::open(dir.path()).unwrap();
        assert_eq!(b.dim(), 4);
        let f = b.embed_image("s0", &RgbImage::filled(64, 64, [0, 0, 0])).unwrap();
        assert_eq!(f.token(1), &[4.0, 5.0, 6.0, 7.0]);
        assert_eq!(b.embed_text("A Photo of x").unwrap().vector, vec![1.0, 0.0, 0.0, 0.0]);
        assert!(b.embed_text("A Photo of y").is_err());
        assert!(b.embed_image("s0", &RgbImage::filled(32, 32, [0, 0, 0])).is_err());
    }
}
