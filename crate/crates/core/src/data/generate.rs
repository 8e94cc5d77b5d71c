//! Procedural scenes: colored shapes rasterized on a coarse lattice, one per
//! image quadrant, each with templated expressions and gold parses.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::lexicon::{Shape, BACKGROUND_RGB, PALETTE};
use super::mask::Mask;
use super::scene::{Dataset, Expression, ExpressionKind, InstanceAnnotation, RgbImage, Scene};
use crate::error::{Error, Result};
use crate::text::{DependencyParse, Head, Token};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationConfig {
    pub scenes: usize,
    pub image_size: usize,
    pub min_instances: usize,
    pub max_instances: usize,
    /// Paraphrased expressions per instance, on top of the direct one.
    pub paraphrases: usize,
    /// Chance that an instance with a unique shape also gets a relational
    /// expression.
    pub relational_prob: f64,
    /// Number of palette colors in use (6 to 8).
    pub colors: usize,
    /// Rasterization cell size in pixels.
    pub lattice: usize,
    pub id_prefix: String,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            scenes: 10,
            image_size: 64,
            min_instances: 2,
            max_instances: 4,
            paraphrases: 2,
            relational_prob: 0.5,
            colors: PALETTE.len(),
            lattice: 4,
            id_prefix: "scene".into(),
        }
    }
}

const PARAPHRASE_TEMPLATES: usize = 4;

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.image_size == 0 || self.image_size % 32 != 0 {
            return bad(format!("image size {} is not a positive multiple of 32", self.image_size));
        }
        if self.min_instances == 0 {
            return bad("scenes need at least one instance".into());
        }
        if self.max_instances > 4 || self.min_instances > self.max_instances {
            return bad(format!(
                "instance range {}..={} must lie within 1..=4",
                self.min_instances, self.max_instances
            ));
        }
        if !(2..=PARAPHRASE_TEMPLATES).contains(&self.paraphrases) {
            return bad(format!(
                "paraphrase count {} must be in 2..={PARAPHRASE_TEMPLATES}",
                self.paraphrases
            ));
        }
        if !(6..=PALETTE.len()).contains(&self.colors) {
            return bad(format!("color count {} must be in 6..={}", self.colors, PALETTE.len()));
        }
        if !(0.0..=1.0).contains(&self.relational_prob) {
            return bad("relational_prob must be a probability".into());
        }
        if self.lattice == 0 || (self.image_size / 2) % self.lattice != 0 {
            return bad(format!("lattice {} does not tile the image quadrants", self.lattice));
        }
        if self.image_size / 2 / self.lattice < 8 {
            return bad("quadrants must be at least 8 lattice cells wide".into());
        }
        Ok(())
    }
}

pub fn generate_dataset(config: &GenerationConfig, seed: u64) -> Result<Dataset> {
    config.validate()?;
    let scenes = (0..config.scenes)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            generate_scene(config, &format!("{}-{i:05}", config.id_prefix), &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { scenes })
}

struct Placed {
    color: usize,
    shape: Shape,
    mask: Mask,
}

fn generate_scene(config: &GenerationConfig, scene_id: &str, rng: &mut ChaCha8Rng) -> Result<Scene> {
    let size = config.image_size;
    let cells = config.image_size / 2 / config.lattice;
    let count = rng.gen_range(config.min_instances..=config.max_instances);
    let mut quadrants = [0usize, 1, 2, 3];
    quadrants.shuffle(rng);

    let mut placed: Vec<Placed> = Vec::with_capacity(count);
    for &quadrant in &quadrants[..count] {
        let (color, shape) = loop {
            let c = rng.gen_range(0..config.colors);
            let s = Shape::ALL[rng.gen_range(0..3)];
            if !placed.iter().any(|p| p.color == c && p.shape == s) {
                break (c, s);
            }
        };
        let d = rng.gen_range(cells / 2..cells);
        let ox = rng.gen_range(0..cells - d);
        let oy = rng.gen_range(0..cells - d);
        let qx = (quadrant % 2) * cells + ox;
        let qy = (quadrant / 2) * cells + oy;
        let cell_mask = rasterize(shape, d);
        let lattice = config.lattice;
        let mask = Mask::from_fn(size, size, |y, x| {
            let (cy, cx) = (y / lattice, x / lattice);
            cy >= qy && cy < qy + d && cx >= qx && cx < qx + d && cell_mask.get(cy - qy, cx - qx)
        });
        placed.push(Placed { color, shape, mask });
    }

    let mut image = RgbImage::filled(size, size, BACKGROUND_RGB);
    for p in &placed {
        for y in 0..size {
            for x in 0..size {
                if p.mask.get(y, x) {
                    image.set_pixel(y, x, PALETTE[p.color].rgb);
                }
            }
        }
    }

    let mut instances = Vec::with_capacity(count);
    for (k, p) in placed.iter().enumerate() {
        let color = &PALETTE[p.color];
        let mut expressions = vec![Expression::from_parse(
            direct_parse(color.name, p.shape.noun()),
            ExpressionKind::Direct,
        )];
        let mut templates: Vec<usize> = (0..PARAPHRASE_TEMPLATES).collect();
        templates.shuffle(rng);
        for &t in &templates[..config.paraphrases] {
            let csyn = color.synonyms[rng.gen_range(0..2)];
            let ssyn = p.shape.synonyms()[rng.gen_range(0..2)];
            let parse = paraphrase_parse(t, csyn, ssyn, p.shape.adjective());
            expressions.push(Expression::from_parse(parse, ExpressionKind::Paraphrase));
        }
        if rng.gen_bool(config.relational_prob) {
            if let Some(parse) = relational_for(&placed, k, rng) {
                expressions.push(Expression::from_parse(parse, ExpressionKind::Relational));
            }
        }
        instances.push(InstanceAnnotation {
            object_key: format!("{scene_id}/obj{k}"),
            color: color.name.to_string(),
            shape: p.shape,
            mask: p.mask.clone(),
            expressions,
        });
    }
    let scene = Scene { scene_id: scene_id.to_string(), image, instances };
    scene.validate()?;
    Ok(scene)
}

/// Shape occupancy on a `d x d` cell grid, decided at cell centers.
pub fn rasterize(shape: Shape, d: usize) -> Mask {
    let half = d as f64 / 2.0;
    Mask::from_fn(d, d, |r, c| {
        let (u, v) = (c as f64 + 0.5, r as f64 + 0.5);
        match shape {
            Shape::Square => true,
            Shape::Circle => (u - half).powi(2) + (v - half).powi(2) <= half * half,
            // Apex row at the top, widening by half a cell per row.
            Shape::Triangle => (u - half).abs() <= (r as f64 + 1.0) / 2.0,
        }
    })
}

fn build(rows: &[(&str, &str, u32, &str)]) -> DependencyParse {
    DependencyParse::new(
        rows.iter()
            .map(|&(form, upos, head, deprel)| Token::new(form, upos, Head::from(head), deprel))
            .collect(),
    )
    .expect("template parses are well formed")
}

/// "the red circle"
pub fn direct_parse(color: &str, shape: &str) -> DependencyParse {
    build(&[("the", "DET", 3, "det"), (color, "ADJ", 3, "amod"), (shape, "NOUN", 0, "root")])
}

fn paraphrase_parse(template: usize, csyn: &str, ssyn: &str, sadj: &str) -> DependencyParse {
    match template {
        // "the crimson round shape"
        0 => build(&[
            ("the", "DET", 4, "det"),
            (csyn, "ADJ", 4, "amod"),
            (sadj, "ADJ", 4, "amod"),
            ("shape", "NOUN", 0, "root"),
        ]),
        // "find the crimson disk"
        1 => build(&[
            ("find", "VERB", 0, "root"),
            ("the", "DET", 4, "det"),
            (csyn, "ADJ", 4, "amod"),
            (ssyn, "NOUN", 1, "obj"),
        ]),
        // "disk painted crimson"
        2 => build(&[
            (ssyn, "NOUN", 0, "root"),
            ("painted", "VERB", 1, "acl"),
            (csyn, "ADJ", 2, "xcomp"),
        ]),
        // "the disk that is crimson"
        _ => build(&[
            ("the", "DET", 2, "det"),
            (ssyn, "NOUN", 0, "root"),
            ("that", "PRON", 5, "nsubj"),
            ("is", "AUX", 5, "cop"),
            (csyn, "ADJ", 2, "acl:relcl"),
        ]),
    }
}

/// "the circle left of the square" / "the circle above the square".
pub fn relational_parse(shape: &str, relation: &str, other: &str) -> DependencyParse {
    match relation {
        "left" | "right" => build(&[
            ("the", "DET", 2, "det"),
            (shape, "NOUN", 0, "root"),
            (relation, "ADV", 2, "advmod"),
            ("of", "ADP", 6, "case"),
            ("the", "DET", 6, "det"),
            (other, "NOUN", 2, "nmod"),
        ]),
        _ => build(&[
            ("the", "DET", 2, "det"),
            (shape, "NOUN", 0, "root"),
            (relation, "ADP", 5, "case"),
            ("the", "DET", 5, "det"),
            (other, "NOUN", 2, "nmod"),
        ]),
    }
}

/// Relational expression for instance `k` when both it and some partner
/// have shapes unique within the scene.
fn relational_for(placed: &[Placed], k: usize, rng: &mut ChaCha8Rng) -> Option<DependencyParse> {
    let unique = |s: Shape| placed.iter().filter(|p| p.shape == s).count() == 1;
    let target = &placed[k];
    if !unique(target.shape) {
        return None;
    }
    let partners: Vec<usize> = (0..placed.len())
        .filter(|&j| j != k && unique(placed[j].shape))
        .collect();
    let &j = partners.choose(rng)?;
    let center = |m: &Mask| {
        let [x0, y0, x1, y1] = m.bbox().expect("instance masks are nonempty");
        ((x0 + x1) as f64 / 2.0, (y0 + y1) as f64 / 2.0)
    };
    let (tx, ty) = center(&target.mask);
    let (px, py) = center(&placed[j].mask);
    let (dx, dy) = (tx - px, ty - py);
    let relation = if dx.abs() >= dy.abs() {
        if dx < 0.0 { "left" } else { "right" }
    } else if dy < 0.0 {
        "above"
    } else {
        "below"
    };
    Some(relational_parse(target.shape.noun(), relation, placed[j].shape.noun()))
}
