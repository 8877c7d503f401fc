//! Per-sequence JSON manifests and loading a sequence into model-ready
//! frames, masks and depth maps.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::png_io;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::types::{pad_reflect, pad_to_multiple, Frame, MaskMap, PAD_MULTIPLE};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameRecord {
    pub image: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth: Option<PathBuf>,
}

/// One sequence: ordered frames, which of them are annotated, and how many
/// objects the annotations carry. Paths are relative to the manifest file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceManifest {
    pub id: String,
    pub frames: Vec<FrameRecord>,
    pub annotated: Vec<usize>,
    pub num_objects: usize,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl SequenceManifest {
    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Error::config(format!("manifest `{}`: {reason}", self.id));
        if self.frames.is_empty() {
            return Err(bad("no frames".into()));
        }
        if self.annotated.is_empty() {
            return Err(bad("no annotated frames".into()));
        }
        if self.annotated.windows(2).any(|w| w[0] >= w[1]) {
            return Err(bad("annotated indices must be strictly increasing".into()));
        }
        if let Some(&i) = self.annotated.iter().find(|&&i| i >= self.frames.len()) {
            return Err(bad(format!("annotated index {i} out of {} frames", self.frames.len())));
        }
        if self.num_objects > u8::MAX as usize {
            return Err(bad("at most 255 objects".into()));
        }
        Ok(())
    }

    /// Index of the reference (first annotated) frame.
    pub fn reference_index(&self) -> usize {
        self.annotated[0]
    }

    pub fn read(path: &Path) -> Result<Self> {
        let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
        let m: SequenceManifest = serde_json::from_slice(&raw).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        m.validate()?;
        Ok(m)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let json = serde_json::to_vec_pretty(self).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }
}

/// A sequence in memory, padded for the model.
#[derive(Clone, Debug)]
pub struct LoadedSequence {
    pub id: String,
    pub frames: Vec<Frame>,
    /// `[1, H, W]` padded depth per frame, when available.
    pub depths: Vec<Option<Tensor>>,
    /// Ground truth at original size, keyed by frame index.
    pub masks: BTreeMap<usize, MaskMap>,
    pub annotated: Vec<usize>,
    pub num_objects: usize,
}

impl LoadedSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn orig_size(&self) -> (usize, usize) {
        self.frames[0].orig_size()
    }

    pub fn padded_size(&self) -> (usize, usize) {
        (self.frames[0].height(), self.frames[0].width())
    }

    /// Ground truth at frame `i`, zero-padded to the model size.
    pub fn padded_mask(&self, i: usize) -> Result<MaskMap> {
        let m = self
            .masks
            .get(&i)
            .ok_or_else(|| Error::config(format!("sequence `{}` has no mask at frame {i}", self.id)))?;
        let (h, w) = self.padded_size();
        m.pad_to(h, w)
    }

    pub fn has_depth(&self) -> bool {
        self.depths.iter().all(Option::is_some)
    }
}

/// Build a [`LoadedSequence`] from unpadded rasters.
pub fn assemble_sequence(
    id: &str,
    images: Vec<Tensor>,
    depths: Vec<Option<Tensor>>,
    masks: BTreeMap<usize, MaskMap>,
    annotated: Vec<usize>,
    num_objects: usize,
) -> Result<LoadedSequence> {
    let frames = images
        .iter()
        .map(|img| pad_to_multiple(img, PAD_MULTIPLE))
        .collect::<Result<Vec<_>>>()?;
    let depths = depths
        .into_iter()
        .zip(&frames)
        .map(|(d, f)| d.map(|d| pad_reflect(&d, f.height(), f.width())).transpose())
        .collect::<Result<Vec<_>>>()?;
    Ok(LoadedSequence {
        id: id.to_string(),
        frames,
        depths,
        masks,
        annotated,
        num_objects,
    })
}

/// Load every frame, mask and depth map named by a manifest at `path`.
pub fn load_sequence(path: &Path) -> Result<LoadedSequence> {
    let manifest = SequenceManifest::read(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    load_manifest(&manifest, base)
}

pub fn load_manifest(manifest: &SequenceManifest, base: &Path) -> Result<LoadedSequence> {
    manifest.validate()?;
    let mut images = Vec::with_capacity(manifest.frames.len());
    let mut depths = Vec::with_capacity(manifest.frames.len());
    let mut masks = BTreeMap::new();
    let mut size = None;
    for (i, rec) in manifest.frames.iter().enumerate() {
        let img_path = base.join(&rec.image);
        let img = png_io::read_rgb(&img_path)?;
        let (_, h, w) = img.chw()?;
        match size {
            None => size = Some((h, w)),
            Some(s) if s != (h, w) => {
                return Err(Error::data(&img_path, format!("frame is {h}x{w}, sequence is {}x{}", s.0, s.1)));
            }
            _ => {}
        }
        if let Some(mp) = &rec.mask {
            let mp = base.join(mp);
            let m = png_io::read_mask(&mp, manifest.num_objects)?;
            if (m.height(), m.width()) != (h, w) {
                return Err(Error::data(&mp, format!("mask is {}x{}, image is {h}x{w}", m.height(), m.width())));
            }
            masks.insert(i, m);
        } else if manifest.annotated.contains(&i) {
            return Err(Error::data(&img_path, format!("annotated frame {i} has no mask")));
        }
        let depth = match &rec.depth {
            Some(dp) => {
                let dp = base.join(dp);
                let d = png_io::read_depth(&dp)?;
                if d.shape()[1..] != [h, w] {
                    return Err(Error::data(&dp, format!("depth is {:?}, image is {h}x{w}", &d.shape()[1..])));
                }
                Some(d)
            }
            None => None,
        };
        images.push(img);
        depths.push(depth);
    }
    assemble_sequence(
        &manifest.id,
        images,
        depths,
        masks,
        manifest.annotated.clone(),
        manifest.num_objects,
    )
}

/// A dataset is a JSON list of manifest paths relative to the index file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetIndex {
    pub sequences: Vec<PathBuf>,
}

pub const DATASET_FILE: &str = "dataset.json";

impl DatasetIndex {
    pub fn read(path: &Path) -> Result<Self> {
        let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_slice(&raw).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_vec_pretty(self).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    /// Manifest paths resolved against the index location.
    pub fn manifest_paths(&self, index_path: &Path) -> Vec<PathBuf> {
        let base = index_path.parent().unwrap_or(Path::new("."));
        self.sequences.iter().map(|p| base.join(p)).collect()
    }
}

/// Accept a dataset index file, a directory holding `dataset.json`, a
/// manifest file, or a directory holding `manifest.json`.
pub fn resolve_manifests(path: &Path) -> Result<Vec<PathBuf>> {
    if path.is_dir() {
        let idx = path.join(DATASET_FILE);
        if idx.is_file() {
            return Ok(DatasetIndex::read(&idx)?.manifest_paths(&idx));
        }
        let m = path.join(MANIFEST_FILE);
        if m.is_file() {
            return Ok(vec![m]);
        }
        return Err(Error::config(format!(
            "{} holds neither {DATASET_FILE} nor {MANIFEST_FILE}",
            path.display()
        )));
    }
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    let value: serde_json::Value = serde_json::from_slice(&raw).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    if value.get("sequences").is_some() {
        Ok(DatasetIndex::read(path)?.manifest_paths(path))
    } else {
        Ok(vec![path.to_path_buf()])
    }
}
