//! Semantic taxonomy, label masks, one-hot conditioning and class statistics.

mod components;
mod io;
mod mask;
mod stats;
mod taxonomy;

pub use components::{label_components, large_component_mask, Component, ComponentMap};
pub use io::{
    decode_mask_png, encode_mask_png, encode_rgb_png, png_dimensions, read_mask_png, read_rgb_png,
    write_mask_png, write_rgb_png,
};
pub use mask::{encode_one_hot, InpaintMask, OneHotCondition, SemanticMask};
pub use stats::{compute_class_frequencies, ClassCounter, ClassStats};
pub use taxonomy::{ClassId, ClassInfo, ClassTaxonomy, DEFAULT_IGNORE_ID};
