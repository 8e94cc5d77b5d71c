//! Synthetic referring-segmentation scenes and their on-disk format.

mod generate;
mod io;
pub mod lexicon;
mod mask;
mod scene;

pub use generate::{direct_parse, generate_dataset, rasterize, relational_parse, GenerationConfig};
pub use io::{load_dataset, read_image, save_dataset, IMAGES_DIR, SCENES_FILE};
pub use lexicon::Shape;
pub use mask::{Mask, Rle};
pub use scene::{Dataset, Expression, ExpressionKind, InstanceAnnotation, RgbImage, SampleRef, Scene};
