//! Dataset layer: raster codecs, manifests, augmentation, synthetic scenes.

pub mod augment;
pub mod manifest;
pub mod raster;
pub mod synth;
