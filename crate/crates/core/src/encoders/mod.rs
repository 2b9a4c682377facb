//! Frozen encoders: the vision transformer, the text embedding store, and the
//! augmentation used for the consistency view.

mod augment;
mod image;
mod text;
mod vit;

pub use augment::{augment, augment_with, AugmentConfig};
pub use image::Image;
pub(crate) use text::Reader;
pub use text::{ClassEmbedding, TextEmbeddingStore, EMBEDDING_MAGIC, EMBEDDING_VERSION};
pub use vit::{sinusoidal_positions, FrozenVit, FrozenVitConfig, PatchPack, VitHandles, INIT_STD};
