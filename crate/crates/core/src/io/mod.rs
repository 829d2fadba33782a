//! Configuration, checkpoints and image files.

mod checkpoint;
mod config;
mod image;

pub use checkpoint::{write_metrics_jsonl, Checkpoint, Manifest, TensorEntry};
pub use config::Config;
pub use image::{decode_image, encode_image, load_image, save_image, ImageFormat};
