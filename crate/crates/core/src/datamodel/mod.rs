//! Datasets, semantics tables, synthetic data and episodic sampling.

mod dataset;
mod episode;
mod semantics;
mod synth;

pub use dataset::{
    read_class_semantics, write_class_semantics, Dataset, Image, Region, Sample, Split,
    CLASS_SEMANTICS_FILE, MANIFEST_FILE,
};
pub use episode::{sample_episode, EpisodeBatch, EpisodeSampler};
pub use semantics::{
    attribute_semantics, readout_targets, validate_class_semantics, AttributeSemanticsMode,
    SemanticsNormalization, SemanticsTable,
};
pub use synth::{generate_synthetic, glyph_color, glyph_mask, render, GlyphLayout, SynthSpec};
