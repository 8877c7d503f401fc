//! Test-time augmentation: rescaled and flipped inference passes whose
//! probabilities are mapped back to the original geometry and averaged.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{resize_bilinear, Tensor};
use crate::types::{argmax_decode, Frame, MaskMap, ProbabilityVolume, PAD_MULTIPLE};

pub const MIN_SCALE: f64 = 0.5;
pub const MAX_SCALE: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub scale: f64,
    pub flipped: bool,
}

impl Variant {
    pub const IDENTITY: Variant = Variant {
        scale: 1.0,
        flipped: false,
    };

    pub fn new(scale: f64, flipped: bool) -> Result<Self> {
        if !(MIN_SCALE..=MAX_SCALE).contains(&scale) {
            return Err(Error::config(format!(
                "TTA scale {scale} outside [{MIN_SCALE}, {MAX_SCALE}]"
            )));
        }
        Ok(Variant { scale, flipped })
    }

    pub fn is_identity(&self) -> bool {
        self.scale == 1.0 && !self.flipped
    }

    /// Input size under this variant.
    pub fn size(&self, h: usize, w: usize) -> (usize, usize) {
        (round16(self.scale * h as f64), round16(self.scale * w as f64))
    }
}

/// Nearest multiple of 16, at least 16.
pub fn round16(x: f64) -> usize {
    let m = PAD_MULTIPLE as f64;
    ((x / m).round() as usize).max(1) * PAD_MULTIPLE
}

/// `scales × {unflipped, flipped}` (or unflipped only), scale-major.
pub fn make_variants(scales: &[f64], flip: bool) -> Result<Vec<Variant>> {
    if scales.is_empty() {
        return Err(Error::config("TTA needs at least one scale"));
    }
    let flips: &[bool] = if flip { &[false, true] } else { &[false] };
    scales
        .iter()
        .flat_map(|&s| flips.iter().map(move |&f| Variant::new(s, f)))
        .collect()
}

/// Resize (bilinear) then optionally flip a `[C, H, W]` tensor.
pub fn transform_tensor(x: &Tensor, v: Variant) -> Result<Tensor> {
    let (_, h, w) = x.chw()?;
    let (nh, nw) = v.size(h, w);
    let y = if (nh, nw) == (h, w) {
        x.clone()
    } else {
        resize_bilinear(x, nh, nw)?
    };
    Ok(if v.flipped { y.flip_horizontal() } else { y })
}

pub fn apply_variant(frame: &Frame, v: Variant) -> Result<Frame> {
    if v.is_identity() {
        return Ok(frame.clone());
    }
    let data = transform_tensor(frame.data(), v)?;
    // Bilinear weights are convex, but guard the [0, 1] contract against rounding.
    let data = Tensor::new(
        data.shape().to_vec(),
        data.data().iter().map(|x| x.clamp(0.0, 1.0)).collect(),
    )?;
    Frame::unpadded(data)
}

/// Nearest-neighbour counterpart of [`apply_variant`] for label maps.
pub fn apply_variant_mask(mask: &MaskMap, v: Variant) -> MaskMap {
    let (nh, nw) = v.size(mask.height(), mask.width());
    let m = if (nh, nw) == (mask.height(), mask.width()) {
        mask.clone()
    } else {
        mask.resize_nearest(nh, nw)
    };
    if v.flipped {
        m.flip_horizontal()
    } else {
        m
    }
}

/// Map a probability volume produced under `v` back to `h × w`: unflip,
/// bilinear resize, renormalize each pixel.
pub fn invert_probability(p: &ProbabilityVolume, v: Variant, h: usize, w: usize) -> Result<ProbabilityVolume> {
    let t = p.probs();
    let t = if v.flipped { t.flip_horizontal() } else { t.clone() };
    if (p.height(), p.width()) == (h, w) {
        return Ok(ProbabilityVolume::new_unchecked(t));
    }
    let mut r = resize_bilinear(&t, h, w)?;
    let c = p.num_objects() + 1;
    let plane = h * w;
    let data = r.data_mut();
    for i in 0..plane {
        let s: f64 = (0..c).map(|k| data[k * plane + i]).sum();
        for k in 0..c {
            data[k * plane + i] /= s;
        }
    }
    ProbabilityVolume::new(r)
}

/// Mean of the volumes, then argmax.
pub fn ensemble(ps: &[ProbabilityVolume]) -> Result<(ProbabilityVolume, MaskMap)> {
    let first = ps.first().ok_or_else(|| Error::config("ensemble of zero volumes"))?;
    let mut acc = first.probs().clone();
    for p in &ps[1..] {
        if p.probs().shape() != acc.shape() {
            return Err(Error::shape(format!(
                "ensemble shapes {:?} vs {:?}",
                p.probs().shape(),
                acc.shape()
            )));
        }
        for (a, b) in acc.data_mut().iter_mut().zip(p.probs().data()) {
            *a += b;
        }
    }
    let n = ps.len() as f64;
    for a in acc.data_mut() {
        *a /= n;
    }
    let vol = ProbabilityVolume::new_unchecked(acc);
    let mask = argmax_decode(&vol);
    Ok((vol, mask))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vol(c: usize, h: usize, w: usize, seed: u64) -> ProbabilityVolume {
        let mut t = Tensor::from_fn(&[c, h, w], |i| {
            let x = (i as u64).wrapping_mul(6364136223846793005).wrapping_add(seed);
            ((x >> 33) % 1000) as f64 / 1000.0 + 0.01
        });
        let plane = h * w;
        let d = t.data_mut();
        for i in 0..plane {
            let s: f64 = (0..c).map(|k| d[k * plane + i]).sum();
            for k in 0..c {
                d[k * plane + i] /= s;
            }
        }
        ProbabilityVolume::new(t).unwrap()
    }

    #[test]
    fn variant_lists() {
        assert_eq!(make_variants(&[1.0], false).unwrap(), vec![Variant::IDENTITY]);
        assert_eq!(make_variants(&[1.0], true).unwrap().len(), 2);
        let v = make_variants(&[1.2, 1.3, 1.4], true).unwrap();
        assert_eq!(v.len(), 6);
        assert_eq!(v[1], Variant { scale: 1.2, flipped: true });
        assert!(make_variants(&[], true).is_err());
        assert!(make_variants(&[2.5], false).is_err());
    }

    #[test]
    fn rounding_rule() {
        assert_eq!(Variant::new(1.3, false).unwrap().size(64, 64), (80, 80));
        assert_eq!(Variant::new(1.2, false).unwrap().size(64, 64), (80, 80));
        assert_eq!(Variant::new(1.4, false).unwrap().size(64, 64), (96, 96));
        assert_eq!(round16(3.0), 16);
    }

    #[test]
    fn identity_and_flip_round_trips() {
        let f = Frame::unpadded(Tensor::from_fn(&[3, 16, 32], |i| (i % 17) as f64 / 16.0)).unwrap();
        assert_eq!(apply_variant(&f, Variant::IDENTITY).unwrap(), f);
        let flip = Variant::new(1.0, true).unwrap();
        let twice = apply_variant(&apply_variant(&f, flip).unwrap(), flip).unwrap();
        assert_eq!(twice, f);

        let p = vol(3, 16, 32, 1);
        assert_eq!(invert_probability(&p, Variant::IDENTITY, 16, 32).unwrap(), p);
        let fwd = ProbabilityVolume::new(p.probs().flip_horizontal()).unwrap();
        assert_eq!(invert_probability(&fwd, flip, 16, 32).unwrap(), p);
    }

    #[test]
    fn scaled_inversion_restores_shape_and_sums() {
        let v = Variant::new(1.3, true).unwrap();
        let p = vol(4, 80, 80, 7);
        let q = invert_probability(&p, v, 64, 64).unwrap();
        assert_eq!(q.probs().shape(), &[4, 64, 64]);
        assert!(q.max_sum_deviation() < 1e-5);
    }

    #[test]
    fn stronger_vote_wins() {
        let one_hot = |k: usize, s: f64| {
            let mut d = vec![(1.0 - s) / 2.0; 3];
            d[k] = s;
            ProbabilityVolume::new(Tensor::new(vec![3, 1, 1], d).unwrap()).unwrap()
        };
        let (_, m) = ensemble(&[one_hot(1, 0.9), one_hot(2, 0.8)]).unwrap();
        assert_eq!(m.get(0, 0), 1);
        let (_, m) = ensemble(&[one_hot(1, 0.7), one_hot(2, 0.8)]).unwrap();
        assert_eq!(m.get(0, 0), 2);
    }

    #[test]
    fn ensemble_shape_mismatch() {
        assert!(ensemble(&[vol(2, 4, 4, 0), vol(2, 4, 8, 0)]).is_err());
        assert!(ensemble(&[]).is_err());
    }
}
