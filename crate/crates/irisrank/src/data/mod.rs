//! Dataset plumbing: manifests with deterministic ratio subsampling and
//! train/test splits, iris-pair composition into the fixed classifier input,
//! stratified minibatch construction, and a procedural specular-highlight
//! corpus for running the full pipeline at desk scale.

pub mod compose;
pub mod manifest;
pub mod sampler;
pub mod synth;

pub use compose::{bilinear_resize, compose_pair, load_image_rgb, ComposedDataset, Sample};
pub use manifest::{build_manifest, filter_discarded, load_manifest, ManifestRow, SampleManifest};
pub use sampler::stratified_batches;
pub use synth::{generate_synthetic, SyntheticSpec};

use crate::error::{Error, Result};

/// Positive class: GAN-generated. Negative class: real.
pub const LABEL_GAN: i8 = 1;
pub const LABEL_REAL: i8 = -1;

/// Train/test membership of a manifest row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Manifest(format!("unknown split {other:?}"))),
        }
    }
}

/// How the two iris crops become one classifier input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ComposeMode {
    /// Each crop resized to 48x96 (w x h) and placed left-then-right into a
    /// 96x96x3 image.
    #[default]
    SideBySide,
    /// Each crop resized to 96x96 and stacked into 6 channels.
    ChannelStack,
}

impl ComposeMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            ComposeMode::SideBySide => "side_by_side",
            ComposeMode::ChannelStack => "channel_stack",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "side_by_side" => Ok(ComposeMode::SideBySide),
            "channel_stack" => Ok(ComposeMode::ChannelStack),
            other => Err(Error::Manifest(format!("unknown compose mode {other:?}"))),
        }
    }

    /// Channel count of the composed tensor.
    pub fn channels(&self) -> usize {
        match self {
            ComposeMode::SideBySide => 3,
            ComposeMode::ChannelStack => 6,
        }
    }
}
