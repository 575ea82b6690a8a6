//! Scale-controllable artistic text stylization.
//!
//! A style is learned from a single image and its structure map. Text is
//! first reshaped toward the style's silhouette at a chosen deformation
//! level `l` in `[0, 1]`, then textured.

pub mod backbone;
pub mod error;
pub mod glyph;
pub mod graph;
pub mod imageio;
pub mod metrics;
pub mod pipeline;
pub mod sketch;
pub mod tensor;
pub mod text;
pub mod texture;
pub mod toy;

pub use error::{Error, Result};
pub use glyph::{distance_weight_map, GlyphNet, GlyphTrainConfig};
pub use imageio::{load_image, save_png, GridTag, ImageGrid, StyleAsset};
pub use pipeline::{mashup, stylize, train_style, RenderRequest, StyleLibrary, StyleModelBundle, StyleRef, TrainConfig};
pub use sketch::{SketchModule, SketchTrainConfig};
pub use tensor::Tensor;
pub use text::{build_text_dataset, TextDataset, TextDatasetBuilder};
pub use texture::{FeatureExtractor, TextureNet, TextureTrainConfig};
