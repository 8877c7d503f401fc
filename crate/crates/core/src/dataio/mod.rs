//! Reading and writing sequences, pseudo-video sampling and the synthetic
//! video generator.

pub mod manifest;
pub mod png_io;
pub mod sampling;
pub mod synth;

pub use manifest::{
    load_manifest, load_sequence, resolve_manifests, DatasetIndex, FrameRecord, LoadedSequence,
    SequenceManifest, DATASET_FILE, MANIFEST_FILE,
};
pub use sampling::sample_pseudo_video;
pub use synth::{random_scene, synth_clip, synth_dataset, synth_sequences, SynthClip, SynthConfig};
