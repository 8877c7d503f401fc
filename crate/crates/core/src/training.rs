//! Two-stage training: pseudo-video sampling, sequential prediction with
//! memory writes, the segmentation loss, and AdamW with decoupled weight
//! decay on weights only.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archive::ParamStore;
use crate::autograd::Var;
use crate::dataio::{sample_pseudo_video, LoadedSequence};
use crate::encoders::{GEOMETRIC_PREFIX, VISUAL_PREFIX};
use crate::error::{Error, Result};
use crate::model::{FrameInput, Model};
use crate::nn::{Session, Trainable};
use crate::segmenter;
use crate::tensor::Tensor;
use crate::tta::{self, Variant};
use crate::types::{argmax_decode, MaskMap, ProbabilityVolume};

pub const ENCODER_PREFIX: &str = "encoder.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub stage: u8,
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Parameters whose names start with any of these are not updated.
    pub frozen_prefixes: Vec<String>,
    #[serde(default = "default_n_frames")]
    pub n_frames: usize,
    #[serde(default = "default_max_skip")]
    pub max_skip: usize,
    /// Fraction of iterations whose memory writes use ground-truth masks.
    #[serde(default = "default_teacher_forcing")]
    pub teacher_forcing: f64,
    /// Training-time rescaling: each sample picks one of these scales
    /// (empty means no rescaling).
    #[serde(default)]
    pub augment_scales: Vec<f64>,
    /// Flip each sample horizontally with probability 1/2.
    #[serde(default)]
    pub augment_flip: bool,
    #[serde(default)]
    pub seed: u64,
}

fn default_n_frames() -> usize {
    3
}

fn default_max_skip() -> usize {
    1
}

fn default_teacher_forcing() -> f64 {
    0.5
}

impl StageConfig {
    /// Stage 1: all encoders frozen; fusion and segmenter learn.
    pub fn stage1(seed: u64) -> Self {
        StageConfig {
            stage: 1,
            iterations: 2000,
            batch_size: 4,
            lr: 5e-5,
            weight_decay: 0.5,
            frozen_prefixes: vec![ENCODER_PREFIX.into()],
            n_frames: default_n_frames(),
            max_skip: default_max_skip(),
            teacher_forcing: default_teacher_forcing(),
            augment_scales: Vec::new(),
            augment_flip: false,
            seed,
        }
    }

    /// Stage 2: everything but the geometric encoder.
    pub fn stage2(seed: u64) -> Self {
        StageConfig {
            stage: 2,
            frozen_prefixes: vec![GEOMETRIC_PREFIX.into()],
            ..Self::stage1(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::config(format!("stage {}: {m}", self.stage)));
        if !matches!(self.stage, 1 | 2) {
            return bad("stage must be 1 or 2".into());
        }
        if self.iterations == 0 || self.batch_size == 0 {
            return bad("iterations and batch_size must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.weight_decay >= 0.0) {
            return bad("lr must be positive and weight_decay non-negative".into());
        }
        if self.n_frames < 2 || self.max_skip == 0 {
            return bad("n_frames >= 2 and max_skip >= 1 required".into());
        }
        if !(0.0..=1.0).contains(&self.teacher_forcing) {
            return bad("teacher_forcing must lie in [0, 1]".into());
        }
        for &s in &self.augment_scales {
            Variant::new(s, false)?;
        }
        if self.stage == 1 {
            let trainable = self.trainable();
            for enc in [VISUAL_PREFIX, GEOMETRIC_PREFIX] {
                if trainable.is_trainable(&format!("{enc}.x")) {
                    return bad(format!("stage 1 must freeze `{enc}`"));
                }
            }
        }
        Ok(())
    }

    pub fn trainable(&self) -> Trainable {
        Trainable::AllExcept(self.frozen_prefixes.clone())
    }
}

/// Weight decay applies to weights only: names whose last segment starts
/// with `w` (`w`, `w1`, `w2`); biases are exempt.
pub fn is_decayed(name: &str) -> bool {
    name.rsplit('.').next().is_some_and(|s| s.starts_with('w'))
}

/// One training sample: a sequence and the frames of its pseudo-video.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub sequence: usize,
    pub frames: Vec<usize>,
    pub variant: Variant,
}

pub fn sample_batch<R: Rng + ?Sized>(
    data: &[LoadedSequence],
    cfg: &StageConfig,
    rng: &mut R,
) -> Result<Vec<Sample>> {
    (0..cfg.batch_size)
        .map(|_| {
            let sequence = rng.random_range(0..data.len());
            let frames = sample_pseudo_video(&data[sequence].annotated, cfg.n_frames, cfg.max_skip, rng)?;
            let scale = match cfg.augment_scales.len() {
                0 => 1.0,
                n => cfg.augment_scales[rng.random_range(0..n)],
            };
            let flipped = cfg.augment_flip && rng.random_bool(0.5);
            Ok(Sample {
                sequence,
                frames,
                variant: Variant::new(scale, flipped)?,
            })
        })
        .collect()
}

/// Forward one pseudo-video: the first frame's ground truth seeds memory,
/// later frames are predicted in order and written back with either their
/// ground truth or their (detached) prediction. Every frame is first
/// transformed by `variant`. Returns the mean loss node.
pub fn pseudo_video_loss(
    model: &Model,
    sess: &mut Session,
    seq: &LoadedSequence,
    frames: &[usize],
    variant: Variant,
    gt_writes: bool,
) -> Result<Var> {
    let mem = &model.config().memory;
    let mut clip = Vec::with_capacity(frames.len());
    for &i in frames {
        let depth = match &seq.depths[i] {
            Some(d) if !variant.is_identity() => Some(tta::transform_tensor(d, variant)?),
            d => d.clone(),
        };
        clip.push((
            tta::apply_variant(&seq.frames[i], variant)?,
            depth,
            tta::apply_variant_mask(&seq.padded_mask(i)?, variant),
        ));
    }
    let (hh, ww) = (clip[0].0.height(), clip[0].0.width());
    let input = |t: usize| FrameInput::new(&clip[t].0, clip[t].1.as_ref());
    let [_, _, f3] = model.features_graph(sess, &input(0))?;
    let mut keys = vec![segmenter::key_graph(sess, f3)?];
    let mut values = vec![segmenter::value_graph(sess, f3, &clip[0].2)?];
    let mut losses = Vec::with_capacity(frames.len() - 1);
    for t in 1..clip.len() {
        let [f1, f2, f3] = model.features_graph(sess, &input(t))?;
        let (_, h, w) = sess.graph.value(f3).chw()?;
        let query = segmenter::key_graph(sess, f3)?;
        let (readout, _) = segmenter::read_graph(&mut sess.graph, query, &keys, &values, mem.similarity, mem.top_k)?;
        let skips = segmenter::decoder_skips(sess, f2, f1)?;
        let logits = segmenter::decode_graph(sess, readout, &skips, (h, w), (hh, ww))?;
        let probs = sess.graph.soft_aggregate(logits)?;
        let gt = clip[t].2.clone();
        losses.push(sess.graph.seg_loss(probs, Arc::new(gt.labels().to_vec()))?);
        if t + 1 < clip.len() {
            let written: MaskMap = if gt_writes {
                gt
            } else {
                argmax_decode(&ProbabilityVolume::new_unchecked(sess.graph.value(probs).clone()))
            };
            keys.push(query);
            values.push(segmenter::value_graph(sess, f3, &written)?);
        }
    }
    let total = sess.graph.sum(&losses)?;
    Ok(sess.graph.scale(total, 1.0 / losses.len() as f64))
}

/// AdamW state, keyed by parameter name.
#[derive(Clone, Debug, Default)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new() -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            ..Default::default()
        }
    }

    /// One update of every parameter in `grads`.
    pub fn step(
        &mut self,
        params: &mut ParamStore,
        grads: &HashMap<String, Tensor>,
        lr: f64,
        weight_decay: f64,
    ) -> Result<()> {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let mut names: Vec<&String> = grads.keys().collect();
        names.sort();
        for name in names {
            let g = &grads[name];
            let mut p = params.expect(name)?.as_ref().clone();
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            let decay = if is_decayed(name) { lr * weight_decay } else { 0.0 };
            for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let update = (*m / bc1) / ((*v / bc2).sqrt() + self.eps);
                *p -= decay * *p + lr * update;
            }
            params.set(name, p)?;
        }
        Ok(())
    }
}

/// Optimizer state plus the configuration it runs under.
pub struct Trainer {
    pub cfg: StageConfig,
    opt: AdamW,
}

impl Trainer {
    pub fn new(cfg: StageConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Trainer { cfg, opt: AdamW::new() })
    }

    /// Forward, backward and update on one batch. Returns the batch loss
    /// (mean over samples).
    pub fn step(&mut self, model: &mut Model, data: &[LoadedSequence], batch: &[Sample], gt_writes: bool) -> Result<f64> {
        let trainable = self.cfg.trainable();
        let scale = 1.0 / batch.len() as f64;
        let mut grads: HashMap<String, Tensor> = HashMap::new();
        let mut loss = 0.0;
        for s in batch {
            let seq = data
                .get(s.sequence)
                .ok_or_else(|| Error::config(format!("sample refers to sequence {}", s.sequence)))?;
            let mut sess = Session::new(model.params(), trainable.clone());
            let l = pseudo_video_loss(model, &mut sess, seq, &s.frames, s.variant, gt_writes)?;
            loss += sess.graph.value(l).data()[0] * scale;
            let mut g = sess.graph.backward(l)?;
            for (name, var) in sess.trainable_vars() {
                let Some(gv) = g.take(var) else { continue };
                match grads.get_mut(name) {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(gv.data()) {
                            *a += b * scale;
                        }
                    }
                    None => {
                        let mut gv = gv;
                        gv.data_mut().iter_mut().for_each(|x| *x *= scale);
                        grads.insert(name.to_string(), gv);
                    }
                }
            }
        }
        if !loss.is_finite() {
            return Err(Error::Divergence {
                iteration: self.opt.step as usize,
                loss,
            });
        }
        self.opt
            .step(model.params_mut(), &grads, self.cfg.lr, self.cfg.weight_decay)?;
        Ok(loss)
    }
}

/// Run a full stage; returns the per-iteration loss curve. `on_iter` sees
/// `(iteration, loss)` after every step.
pub fn train_stage(
    model: &mut Model,
    data: &[LoadedSequence],
    cfg: &StageConfig,
    mut on_iter: impl FnMut(usize, f64),
) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::config("training set is empty"));
    }
    if model.config().needs_depth() {
        if let Some(s) = data.iter().find(|s| !s.has_depth()) {
            return Err(Error::config(format!("training sequence `{}` lacks depth maps", s.id)));
        }
    }
    let mut trainer = Trainer::new(cfg.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let teacher_iters = (cfg.teacher_forcing * cfg.iterations as f64).round() as usize;
    let mut curve = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let batch = sample_batch(data, cfg, &mut rng)?;
        let loss = trainer.step(model, data, &batch, it < teacher_iters).map_err(|e| match e {
            Error::Divergence { loss, .. } => Error::Divergence { iteration: it, loss },
            other => other,
        })?;
        curve.push(loss);
        on_iter(it, loss);
    }
    Ok(curve)
}

pub fn write_loss_csv(path: &Path, curve: &[f64]) -> Result<()> {
    let mut s = String::from("iteration,loss\n");
    for (i, l) in curve.iter().enumerate() {
        let _ = writeln!(s, "{i},{l}");
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}
