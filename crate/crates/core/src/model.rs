//! The full model: two encoder streams, fusion, and the memory segmenter,
//! plus the per-sequence inference loop.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::archive::{load_weight_archive, save_weight_archive, ParamSchema, ParamStore};
use crate::autograd::Var;
use crate::encoders::{self, EncoderKind, EncoderSpec};
use crate::error::{Error, Result};
use crate::fusion::{self, FusionConfig, FusionDepth};
use crate::nn::Session;
use crate::segmenter::{
    self, EntryGeometry, MemoryConfig, MemoryEntry, SegmenterDims, TensorBank,
};
use crate::tensor::Tensor;
use crate::types::{argmax_decode, FeaturePyramid, Frame, MaskMap, ProbabilityVolume};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionSettings {
    pub enabled: bool,
    pub depth: FusionDepth,
}

impl Default for FusionSettings {
    fn default() -> Self {
        FusionSettings {
            enabled: true,
            depth: FusionDepth::Two,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub visual: EncoderSpec,
    pub geometric: EncoderSpec,
    #[serde(default)]
    pub fusion: FusionSettings,
    #[serde(default)]
    pub memory: MemoryConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            visual: EncoderSpec::toy_visual([32, 64, 128]),
            geometric: EncoderSpec::toy_geometric([32, 64, 128]),
            fusion: FusionSettings::default(),
            memory: MemoryConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.visual.validate()?;
        self.memory.validate()?;
        if self.visual.kind == EncoderKind::ToyGeometric {
            return Err(Error::config("visual stream cannot use the toy geometric encoder"));
        }
        if self.fusion.enabled {
            self.geometric.validate()?;
            if self.geometric.kind == EncoderKind::ToyVisual {
                return Err(Error::config("geometric stream cannot use the toy visual encoder"));
            }
        }
        Ok(())
    }

    /// Channels of the pyramid handed to the segmenter. Fusion outputs the
    /// visual widths, so this does not depend on whether fusion is on.
    pub fn fused_channels(&self) -> [usize; 3] {
        self.visual.channels
    }

    pub fn fusion_config(&self) -> FusionConfig {
        FusionConfig::new(self.visual.channels, self.geometric.channels, self.fusion.depth)
    }

    pub fn segmenter_dims(&self) -> SegmenterDims {
        SegmenterDims {
            features: self.fused_channels(),
            key_dim: self.memory.key_dim,
            value_dim: self.memory.value_dim,
        }
    }

    /// Whether frames need an auxiliary depth map.
    pub fn needs_depth(&self) -> bool {
        self.fusion.enabled && self.geometric.kind == EncoderKind::ToyGeometric
    }
}

/// Per-frame model input.
#[derive(Clone, Copy, Debug)]
pub struct FrameInput<'a> {
    pub frame: &'a Frame,
    /// `[1, H, W]` inverse depth in `[0, 1]`, padded like the frame.
    pub depth: Option<&'a Tensor>,
    pub visual_features: Option<&'a FeaturePyramid>,
    pub geometric_features: Option<&'a FeaturePyramid>,
}

impl<'a> FrameInput<'a> {
    pub fn new(frame: &'a Frame, depth: Option<&'a Tensor>) -> Self {
        FrameInput {
            frame,
            depth,
            visual_features: None,
            geometric_features: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
}

impl Model {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        if config.visual.kind == EncoderKind::ToyVisual {
            params.extend(encoders::visual_params(&config.visual, seed));
        }
        if config.fusion.enabled {
            if config.geometric.kind == EncoderKind::ToyGeometric {
                params.extend(encoders::geometric_params(&config.geometric, seed));
            }
            params.extend(fusion::init_fusion(&config.fusion_config(), seed).to_store());
        }
        params.extend(segmenter::segmenter_params(&config.segmenter_dims(), seed));
        Ok(Model { config, params })
    }

    /// Expected archive contents for `config`.
    pub fn schema(config: &ModelConfig) -> Result<ParamSchema> {
        Ok(Self::init(config.clone(), 0)?.params.schema())
    }

    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let schema = Self::schema(&config)?;
        if params.schema() != schema {
            let missing: Vec<_> = schema.keys().filter(|k| params.get(k).is_none()).collect();
            return Err(Error::config(format!(
                "parameters do not match the model configuration (missing: {missing:?})"
            )));
        }
        Ok(Model { config, params })
    }

    pub fn load(dir: &Path, config: ModelConfig) -> Result<Self> {
        let schema = Self::schema(&config)?;
        let params = load_weight_archive(dir, &schema)?;
        Ok(Model { config, params })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        save_weight_archive(dir, &self.params)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn stream(
        &self,
        sess: &mut Session,
        spec: &EncoderSpec,
        external: Option<&FeaturePyramid>,
        build: impl FnOnce(&mut Session) -> Result<[Var; 3]>,
    ) -> Result<[Var; 3]> {
        match spec.kind {
            EncoderKind::External => {
                let p = external.ok_or_else(|| {
                    Error::config("external encoder selected but no features were supplied")
                })?;
                if p.channels() != spec.channels {
                    return Err(Error::shape(format!(
                        "external features have channels {:?}, expected {:?}",
                        p.channels(),
                        spec.channels
                    )));
                }
                Ok(p.levels().clone().map(|t| sess.graph.constant(t)))
            }
            _ => build(sess),
        }
    }

    /// Fused pyramid of one frame inside `sess`.
    pub fn features_graph(&self, sess: &mut Session, input: &FrameInput) -> Result<[Var; 3]> {
        let frame = input.frame;
        frame.check_model_ready()?;
        let fv = self.stream(sess, &self.config.visual, input.visual_features, |s| {
            let x = s.graph.constant(frame.data().clone());
            encoders::visual_graph(s, x)
        })?;
        if !self.config.fusion.enabled {
            return Ok(fv);
        }
        let spec = &self.config.geometric;
        let fg = self.stream(sess, spec, input.geometric_features, |s| {
            let depth = input
                .depth
                .ok_or_else(|| Error::config("toy geometric encoder needs an auxiliary depth map"))?;
            encoders::check_depth(depth, frame)?;
            let d = s.graph.constant(depth.clone());
            encoders::geometric_graph(s, spec, d)
        })?;
        fusion::fuse_graph(sess, fv, fg, self.config.fusion.depth)
    }

    /// Fused pyramid as plain tensors.
    pub fn encode(&self, input: &FrameInput) -> Result<FeaturePyramid> {
        let mut sess = Session::inference(&self.params);
        let vars = self.features_graph(&mut sess, input)?;
        encoders::pyramid_of(&sess, vars)
    }
}

/// Output of one segmented frame.
#[derive(Clone, Debug)]
pub struct FrameOutput {
    pub probs: ProbabilityVolume,
    pub mask: MaskMap,
    /// Whether this frame was written to memory.
    pub stored: bool,
}

/// Inference state for one sequence: the model and its memory bank.
pub struct SequenceSegmenter<'m> {
    model: &'m Model,
    bank: TensorBank,
    write_interval: usize,
    frame_hw: (usize, usize),
    num_objects: usize,
}

impl<'m> SequenceSegmenter<'m> {
    /// Encode the annotated first frame into the permanent memory slot.
    pub fn init_from_first_frame(model: &'m Model, input: &FrameInput, gt: &MaskMap) -> Result<Self> {
        let frame = input.frame;
        if (gt.height(), gt.width()) != (frame.height(), frame.width()) {
            return Err(Error::shape(format!(
                "first-frame mask {}x{} vs frame {}x{}",
                gt.height(),
                gt.width(),
                frame.height(),
                frame.width()
            )));
        }
        let mut sess = Session::inference(&model.params);
        let [_, _, f3] = model.features_graph(&mut sess, input)?;
        let key = segmenter::key_graph(&mut sess, f3)?;
        let values = segmenter::value_graph(&mut sess, f3, gt)?;
        let (_, h, w) = sess.graph.value(f3).chw()?;
        let geometry = EntryGeometry::of_tensors(
            sess.graph.value(key),
            sess.graph.value(values),
            model.config.memory.value_dim,
            h,
            w,
        )?;
        let mut bank = TensorBank::new(model.config.memory.capacity);
        bank.init(
            MemoryEntry {
                key: sess.graph.shared_value(key),
                values: sess.graph.shared_value(values),
                frame_index: 0,
            },
            geometry,
        );
        Ok(SequenceSegmenter {
            model,
            bank,
            write_interval: model.config.memory.write_interval,
            frame_hw: (frame.height(), frame.width()),
            num_objects: gt.num_objects(),
        })
    }

    pub fn bank(&self) -> &TensorBank {
        &self.bank
    }

    pub fn set_write_interval(&mut self, r: usize) {
        self.write_interval = r.max(1);
    }

    /// encode -> fuse -> read -> decode -> aggregate -> argmax; then store
    /// the frame with its predicted mask iff `frame_index % r == 0`.
    pub fn segment_frame(&mut self, input: &FrameInput, frame_index: usize) -> Result<FrameOutput> {
        let frame = input.frame;
        if (frame.height(), frame.width()) != self.frame_hw {
            return Err(Error::shape(format!(
                "frame {}x{} in a {}x{} sequence",
                frame.height(),
                frame.width(),
                self.frame_hw.0,
                self.frame_hw.1
            )));
        }
        let model = self.model;
        let mem = &model.config.memory;
        let mut sess = Session::inference(&model.params);
        let [f1, f2, f3] = model.features_graph(&mut sess, input)?;
        let (_, h, w) = sess.graph.value(f3).chw()?;
        let query = segmenter::key_graph(&mut sess, f3)?;
        let (keys, values): (Vec<Var>, Vec<Var>) = self
            .bank
            .entries()
            .map(|e| {
                (
                    sess.graph.constant_shared(e.key.clone()),
                    sess.graph.constant_shared(e.values.clone()),
                )
            })
            .unzip();
        let (readout, _) =
            segmenter::read_graph(&mut sess.graph, query, &keys, &values, mem.similarity, mem.top_k)?;
        let skips = segmenter::decoder_skips(&mut sess, f2, f1)?;
        let logits = segmenter::decode_graph(&mut sess, readout, &skips, (h, w), self.frame_hw)?;
        let probs = sess.graph.soft_aggregate(logits)?;
        let probs = ProbabilityVolume::new(sess.graph.value(probs).clone())?;
        let mask = argmax_decode(&probs);
        debug_assert_eq!(mask.num_objects(), self.num_objects);

        let stored = frame_index > 0 && frame_index.is_multiple_of(self.write_interval);
        if stored {
            let v = segmenter::value_graph(&mut sess, f3, &mask)?;
            let geometry =
                EntryGeometry::of_tensors(sess.graph.value(query), sess.graph.value(v), mem.value_dim, h, w)?;
            self.bank.write(
                MemoryEntry {
                    key: sess.graph.shared_value(query),
                    values: sess.graph.shared_value(v),
                    frame_index,
                },
                geometry,
            )?;
        }
        Ok(FrameOutput { probs, mask, stored })
    }
}
