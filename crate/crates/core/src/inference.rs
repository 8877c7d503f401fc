//! Whole-sequence inference, optionally ensembled over TTA variants.

use std::collections::BTreeMap;

use crate::dataio::LoadedSequence;
use crate::error::{Error, Result};
use crate::model::{FrameInput, Model, SequenceSegmenter};
use crate::tensor::Tensor;
use crate::tta::{self, Variant};
use crate::types::{Frame, MaskMap};

fn variant_depth(depth: Option<&Tensor>, v: Variant) -> Result<Option<Tensor>> {
    depth
        .map(|d| {
            let t = tta::transform_tensor(d, v)?;
            Tensor::new(
                t.shape().to_vec(),
                t.data().iter().map(|x| x.clamp(0.0, 1.0)).collect(),
            )
        })
        .transpose()
}

fn variant_input(seq: &LoadedSequence, i: usize, v: Variant) -> Result<(Frame, Option<Tensor>)> {
    Ok((
        tta::apply_variant(&seq.frames[i], v)?,
        variant_depth(seq.depths[i].as_ref(), v)?,
    ))
}

/// Segment every frame after the first annotated one. Each variant runs its
/// own memory bank; per-frame probabilities are mapped back and averaged.
/// Returns masks at the original (unpadded) size, including the reference
/// frame's ground truth.
pub fn infer_sequence(model: &Model, seq: &LoadedSequence, variants: &[Variant]) -> Result<BTreeMap<usize, MaskMap>> {
    if variants.is_empty() {
        return Err(Error::config("inference needs at least one variant"));
    }
    if model.config().needs_depth() && !seq.has_depth() {
        return Err(Error::config(format!(
            "sequence `{}` lacks depth maps required by the geometric encoder",
            seq.id
        )));
    }
    let reference = *seq
        .annotated
        .first()
        .ok_or_else(|| Error::config(format!("sequence `{}` has no annotated frame", seq.id)))?;
    let gt = seq.padded_mask(reference)?;
    let (h, w) = seq.padded_size();
    let (oh, ow) = seq.orig_size();

    let mut segmenters = Vec::with_capacity(variants.len());
    for &v in variants {
        let (frame, depth) = variant_input(seq, reference, v)?;
        let input = FrameInput::new(&frame, depth.as_ref());
        segmenters.push(SequenceSegmenter::init_from_first_frame(
            model,
            &input,
            &tta::apply_variant_mask(&gt, v),
        )?);
    }

    let mut out = BTreeMap::new();
    out.insert(reference, seq.masks[&reference].clone());
    for i in reference + 1..seq.len() {
        let mut probs = Vec::with_capacity(variants.len());
        for (seg, &v) in segmenters.iter_mut().zip(variants) {
            let (frame, depth) = variant_input(seq, i, v)?;
            let input = FrameInput::new(&frame, depth.as_ref());
            let o = seg.segment_frame(&input, i - reference)?;
            probs.push(tta::invert_probability(&o.probs, v, h, w)?);
        }
        let (_, mask) = tta::ensemble(&probs)?;
        out.insert(i, mask.crop(oh, ow)?);
    }
    Ok(out)
}
