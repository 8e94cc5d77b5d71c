//! On-disk dataset layout: `scenes.jsonl` (a header line followed by one
//! scene per line, masks run-length encoded) and `images/<scene_id>.png`.

use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::lexicon::Shape;
use super::mask::Rle;
use super::scene::{Dataset, Expression, InstanceAnnotation, RgbImage, Scene};
use crate::error::{Error, Result};

pub const SCENES_FILE: &str = "scenes.jsonl";
pub const IMAGES_DIR: &str = "images";
const FORMAT_TAG: &str = "refseg-scenes";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    scenes: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneRecord {
    id: String,
    height: usize,
    width: usize,
    image: String,
    instances: Vec<InstanceRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct InstanceRecord {
    object_key: String,
    color: String,
    shape: Shape,
    mask: Rle,
    expressions: Vec<Expression>,
}

pub fn save_dataset(ds: &Dataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir.join(IMAGES_DIR))?;
    let mut out = BufWriter::new(fs::File::create(dir.join(SCENES_FILE))?);
    let header = Header {
        format: FORMAT_TAG.into(),
        version: FORMAT_VERSION,
        scenes: ds.scenes.len(),
    };
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n")?;
    for scene in &ds.scenes {
        if scene.scene_id.is_empty() || scene.scene_id.contains(['/', '\\']) || scene.scene_id.starts_with('.') {
            return Err(Error::Argument(format!("scene id {:?} is not a valid file name", scene.scene_id)));
        }
        let image = format!("{IMAGES_DIR}/{}.png", scene.scene_id);
        image::save_buffer(
            dir.join(&image),
            &scene.image.to_rgb8(),
            scene.width() as u32,
            scene.height() as u32,
            image::ExtendedColorType::Rgb8,
        )?;
        let record = SceneRecord {
            id: scene.scene_id.clone(),
            height: scene.height(),
            width: scene.width(),
            image,
            instances: scene
                .instances
                .iter()
                .map(|inst| InstanceRecord {
                    object_key: inst.object_key.clone(),
                    color: inst.color.clone(),
                    shape: inst.shape,
                    mask: Rle::encode(&inst.mask),
                    expressions: inst.expressions.clone(),
                })
                .collect(),
        };
        serde_json::to_writer(&mut out, &record)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let path = dir.join(SCENES_FILE);
    let text = fs::read_to_string(&path)?;
    let fail = |record: String, message: String| Error::Format { path: path.clone(), record, message };

    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header_line) = lines
        .next()
        .ok_or_else(|| fail("header".into(), "file is empty".into()))?;
    let header: Header = serde_json::from_str(header_line)
        .map_err(|e| fail("header".into(), e.to_string()))?;
    if header.format != FORMAT_TAG || header.version != FORMAT_VERSION {
        return Err(fail(
            "header".into(),
            format!("unsupported format {} v{}", header.format, header.version),
        ));
    }

    let mut scenes = Vec::with_capacity(header.scenes);
    for (n, line) in lines {
        let label = format!("line {}", n + 1);
        let record: SceneRecord = serde_json::from_str(line).map_err(|e| fail(label.clone(), e.to_string()))?;
        let label = format!("line {} (scene {})", n + 1, record.id);
        let scene = scene_from_record(dir, record).map_err(|e| fail(label, e.to_string()))?;
        scenes.push(scene);
    }
    if scenes.len() != header.scenes {
        return Err(fail(
            "trailer".into(),
            format!("header announces {} scenes but {} were read", header.scenes, scenes.len()),
        ));
    }
    Ok(Dataset { scenes })
}

/// Loads any image file `image` can decode as 8-bit RGB.
pub fn read_image(path: impl AsRef<Path>) -> Result<RgbImage> {
    let img = image::open(path.as_ref())?.to_rgb8();
    RgbImage::from_rgb8(img.height() as usize, img.width() as usize, img.as_raw())
}

fn scene_from_record(dir: &Path, record: SceneRecord) -> Result<Scene> {
    let img = image::open(dir.join(&record.image))?.to_rgb8();
    if img.height() as usize != record.height || img.width() as usize != record.width {
        return Err(Error::Argument(format!(
            "image is {}x{}, record says {}x{}",
            img.height(),
            img.width(),
            record.height,
            record.width
        )));
    }
    let image = RgbImage::from_rgb8(record.height, record.width, img.as_raw())?;
    let instances = record
        .instances
        .into_iter()
        .map(|inst| {
            Ok(InstanceAnnotation {
                object_key: inst.object_key,
                color: inst.color,
                shape: inst.shape,
                mask: inst.mask.decode()?,
                expressions: inst.expressions,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    for inst in &instances {
        for e in &inst.expressions {
            if e.parse.text() != e.text {
                return Err(Error::InvalidParse(format!(
                    "parse tokens {:?} do not spell expression {:?}",
                    e.parse.text(),
                    e.text
                )));
            }
        }
    }
    let scene = Scene { scene_id: record.id, image, instances };
    scene.validate()?;
    Ok(scene)
}
