//! Synthetic scenes, vocabulary and dataset files.

mod io;
mod render;
mod scene;
mod vocab;

pub use io::{load_dataset, read_records, save_dataset, write_records, ImageMode};
pub use render::{render, RgbImage};
pub use scene::{
    captions_for, generate_dataset, generate_scene, scene_seed, Alignment, Background, Color,
    Relation, SceneObject, SceneRecord, Shape, Size, IMAGE_SIZE,
};
pub use vocab::{Vocabulary, OOV, OOV_TOKEN, STOP, STOP_TOKEN};
