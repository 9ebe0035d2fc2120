//! Synthetic scenes, the stand-in encoder, and dataset files.

pub mod encoder;
pub mod manifest;
pub mod scene;

pub use encoder::{ConvStage, EncoderVars, FeatureMap, StageSpec, TinyEncoder};
pub use manifest::{image_id, Dataset, DatasetManifest, ManifestEntry, Sample};
pub use scene::{generate_corpus, generate_scene, scene_seed, Scene, SynthConfig, BACKGROUND};
