//! Scenes, labels and everything that turns them into model inputs.

mod cube;
mod noise;
mod palette;
mod patch;
mod split;
mod synth;

pub use cube::{HyperCube, LabelMap};
pub use noise::{inject_noise, mean_square, normalize_bands};
pub use palette::class_color;
pub use patch::{extract_patch, reflect_index};
pub use split::{stratified_split, Split, SplitSpec};
pub use synth::{synth_scene, SynthScene, SynthSpec};
