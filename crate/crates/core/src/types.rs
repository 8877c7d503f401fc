//! Shared domain values: frames, label maps, probability volumes and
//! feature pyramids, plus the two raster utilities everything else leans on.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Spatial multiple every model input is padded to (the coarsest pyramid
/// scale is 1/16).
pub const PAD_MULTIPLE: usize = 16;

/// Per-pixel channel-sum tolerance of a [`ProbabilityVolume`].
pub const PROB_SUM_TOL: f64 = 1e-5;

/// A normalized `[3, H, W]` color frame, padded on the bottom/right.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    data: Tensor,
    orig_h: usize,
    orig_w: usize,
}

impl Frame {
    pub fn new(data: Tensor, orig_h: usize, orig_w: usize) -> Result<Self> {
        let (c, h, w) = data.chw()?;
        if c != 3 {
            return Err(Error::shape(format!("frame needs 3 channels, got {c}")));
        }
        if orig_h == 0 || orig_w == 0 || orig_h > h || orig_w > w {
            return Err(Error::shape(format!(
                "original size {orig_h}x{orig_w} does not fit padded {h}x{w}"
            )));
        }
        if !data.data().iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)) {
            return Err(Error::shape("frame values must be finite and in [0, 1]"));
        }
        Ok(Frame {
            data,
            orig_h,
            orig_w,
        })
    }

    /// Wrap an image whose size is already final (no padding recorded).
    pub fn unpadded(data: Tensor) -> Result<Self> {
        let (_, h, w) = data.chw()?;
        Self::new(data, h, w)
    }

    pub fn data(&self) -> &Tensor {
        &self.data
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn orig_size(&self) -> (usize, usize) {
        (self.orig_h, self.orig_w)
    }

    /// The frame with padding removed.
    pub fn crop_to_orig(&self) -> Tensor {
        crop(&self.data, self.orig_h, self.orig_w)
    }

    pub(crate) fn check_model_ready(&self) -> Result<()> {
        if !self.height().is_multiple_of(PAD_MULTIPLE) || !self.width().is_multiple_of(PAD_MULTIPLE) {
            return Err(Error::shape(format!(
                "frame {}x{} is not padded to a multiple of {PAD_MULTIPLE}",
                self.height(),
                self.width()
            )));
        }
        Ok(())
    }
}

/// Index into a raster of length `n` under half-sample symmetric
/// reflection (the edge sample is repeated: `n, n+1, ...` map to
/// `n-1, n-2, ...`).
fn mirror(i: usize, n: usize) -> usize {
    let r = i % (2 * n);
    if r < n {
        r
    } else {
        2 * n - 1 - r
    }
}

/// Reflect-pad a `[C, h, w]` raster on the bottom/right to `out_h x out_w`.
pub fn pad_reflect(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (c, h, w) = x.chw()?;
    if h == 0 || w == 0 {
        return Err(Error::shape("cannot pad an empty raster"));
    }
    if out_h < h || out_w < w {
        return Err(Error::shape(format!(
            "pad target {out_h}x{out_w} smaller than {h}x{w}"
        )));
    }
    let mut data = Vec::with_capacity(c * out_h * out_w);
    for ci in 0..c {
        let plane = &x.data()[ci * h * w..(ci + 1) * h * w];
        for y in 0..out_h {
            let row = &plane[mirror(y, h) * w..(mirror(y, h) + 1) * w];
            data.extend((0..out_w).map(|xx| row[mirror(xx, w)]));
        }
    }
    Tensor::new(vec![c, out_h, out_w], data)
}

/// Top-left `h x w` window of a `[C, H, W]` raster.
pub fn crop(x: &Tensor, h: usize, w: usize) -> Tensor {
    let (c, hh, ww) = x.chw().expect("rank-3 raster");
    assert!(h <= hh && w <= ww, "crop larger than raster");
    let mut data = Vec::with_capacity(c * h * w);
    for ci in 0..c {
        for y in 0..h {
            let off = (ci * hh + y) * ww;
            data.extend_from_slice(&x.data()[off..off + w]);
        }
    }
    Tensor::new(vec![c, h, w], data).expect("consistent crop")
}

pub fn round_up(n: usize, m: usize) -> usize {
    n.div_ceil(m) * m
}

/// Reflect-pad a `[3, h, w]` color image so both sides are multiples of `m`.
pub fn pad_to_multiple(image: &Tensor, m: usize) -> Result<Frame> {
    if m == 0 {
        return Err(Error::shape("padding multiple must be >= 1"));
    }
    let (_, h, w) = image.chw()?;
    if h == 0 || w == 0 {
        return Err(Error::shape("cannot pad an empty image"));
    }
    let padded = pad_reflect(image, round_up(h, m), round_up(w, m))?;
    Frame::new(padded, h, w)
}

/// Hard per-pixel object labels; 0 is background.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskMap {
    height: usize,
    width: usize,
    labels: Vec<u8>,
    num_objects: usize,
}

impl MaskMap {
    pub fn new(height: usize, width: usize, labels: Vec<u8>, num_objects: usize) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::shape(format!(
                "{} labels for a {height}x{width} mask",
                labels.len()
            )));
        }
        if num_objects > u8::MAX as usize {
            return Err(Error::shape("at most 255 objects per mask"));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize > num_objects) {
            return Err(Error::shape(format!(
                "label {bad} exceeds object count {num_objects}"
            )));
        }
        Ok(MaskMap {
            height,
            width,
            labels,
            num_objects,
        })
    }

    pub fn background(height: usize, width: usize, num_objects: usize) -> Self {
        MaskMap {
            height,
            width,
            labels: vec![0; height * width],
            num_objects,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_objects(&self) -> usize {
        self.num_objects
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    pub fn area(&self, obj: u8) -> usize {
        self.labels.iter().filter(|&&l| l == obj).count()
    }

    /// Zero-pad (background) on the bottom/right.
    pub fn pad_to(&self, height: usize, width: usize) -> Result<Self> {
        if height < self.height || width < self.width {
            return Err(Error::shape("mask pad target smaller than mask"));
        }
        let mut labels = vec![0; height * width];
        for y in 0..self.height {
            labels[y * width..y * width + self.width]
                .copy_from_slice(&self.labels[y * self.width..(y + 1) * self.width]);
        }
        Self::new(height, width, labels, self.num_objects)
    }

    pub fn crop(&self, height: usize, width: usize) -> Result<Self> {
        if height > self.height || width > self.width {
            return Err(Error::shape("mask crop larger than mask"));
        }
        let labels = (0..height)
            .flat_map(|y| self.labels[y * self.width..y * self.width + width].iter().copied())
            .collect();
        Self::new(height, width, labels, self.num_objects)
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut labels = self.labels.clone();
        for row in labels.chunks_mut(self.width.max(1)) {
            row.reverse();
        }
        MaskMap { labels, ..*self }
    }

    /// Nearest-neighbour resample (pixel-centre sampling).
    pub fn resize_nearest(&self, height: usize, width: usize) -> Self {
        let pick = |o: usize, out: usize, inp: usize| {
            (((o as f64 + 0.5) * inp as f64 / out as f64).floor() as usize).min(inp - 1)
        };
        let labels = (0..height)
            .flat_map(|y| {
                let sy = pick(y, height, self.height);
                (0..width).map(move |x| (sy, x))
            })
            .map(|(sy, x)| self.labels[sy * self.width + pick(x, width, self.width)])
            .collect();
        MaskMap {
            height,
            width,
            labels,
            num_objects: self.num_objects,
        }
    }

    /// Relabel objects: `mapping[i - 1]` is the new id of object `i`.
    pub fn relabel(&self, mapping: &[u8]) -> Result<Self> {
        if mapping.len() != self.num_objects {
            return Err(Error::shape("relabel mapping must cover every object"));
        }
        let labels = self
            .labels
            .iter()
            .map(|&l| if l == 0 { 0 } else { mapping[l as usize - 1] })
            .collect();
        Self::new(self.height, self.width, labels, self.num_objects)
    }
}

/// Per-pixel distribution over background plus `N` objects, `[(N+1), H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityVolume {
    probs: Tensor,
}

impl ProbabilityVolume {
    pub fn new(probs: Tensor) -> Result<Self> {
        let (c, h, w) = probs.chw()?;
        if c == 0 {
            return Err(Error::shape("probability volume needs a background channel"));
        }
        let plane = h * w;
        let d = probs.data();
        if d.iter().any(|v| !v.is_finite() || *v < -1e-12 || *v > 1.0 + 1e-12) {
            return Err(Error::shape("probabilities must lie in [0, 1]"));
        }
        for px in 0..plane {
            let s: f64 = (0..c).map(|ch| d[ch * plane + px]).sum();
            if (s - 1.0).abs() > PROB_SUM_TOL {
                return Err(Error::shape(format!(
                    "channel sum {s} at pixel {px} is not 1"
                )));
            }
        }
        Ok(ProbabilityVolume { probs })
    }

    /// Wrap without validation; used by [`argmax_decode`] property tests and
    /// the ensembler, which feed unnormalized sums.
    pub fn new_unchecked(probs: Tensor) -> Self {
        ProbabilityVolume { probs }
    }

    pub fn probs(&self) -> &Tensor {
        &self.probs
    }

    pub fn into_tensor(self) -> Tensor {
        self.probs
    }

    pub fn num_objects(&self) -> usize {
        self.probs.shape()[0] - 1
    }

    pub fn height(&self) -> usize {
        self.probs.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.probs.shape()[2]
    }

    pub fn max_sum_deviation(&self) -> f64 {
        let (c, h, w) = self.probs.chw().expect("rank 3");
        let plane = h * w;
        (0..plane)
            .map(|px| {
                let s: f64 = (0..c).map(|ch| self.probs.data()[ch * plane + px]).sum();
                (s - 1.0).abs()
            })
            .fold(0.0, f64::max)
    }
}

/// Per-pixel argmax; ties go to the lowest channel (background first).
pub fn argmax_decode(p: &ProbabilityVolume) -> MaskMap {
    let (c, h, w) = p.probs.chw().expect("rank 3");
    let plane = h * w;
    let d = p.probs.data();
    let labels = (0..plane)
        .map(|px| {
            let mut best = 0;
            for ch in 1..c {
                if d[ch * plane + px] > d[best * plane + px] {
                    best = ch;
                }
            }
            best as u8
        })
        .collect();
    MaskMap {
        height: h,
        width: w,
        labels,
        num_objects: c - 1,
    }
}

/// Feature maps at 1/4, 1/8 and 1/16 of the padded frame size.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    levels: [Tensor; 3],
}

/// Downsampling factor of each pyramid level.
pub const PYRAMID_STRIDES: [usize; 3] = [4, 8, 16];

impl FeaturePyramid {
    pub fn new(levels: [Tensor; 3]) -> Result<Self> {
        for (i, level) in levels.iter().enumerate() {
            let (c, h, w) = level.chw()?;
            if c == 0 {
                return Err(Error::shape(format!("pyramid level {i} has no channels")));
            }
            if !level.all_finite() {
                return Err(Error::shape(format!("pyramid level {i} is not finite")));
            }
            if i > 0 {
                let (_, ph, pw) = levels[i - 1].chw()?;
                if ph != 2 * h || pw != 2 * w {
                    return Err(Error::shape(format!(
                        "pyramid level {i} is {h}x{w}, previous is {ph}x{pw}"
                    )));
                }
            }
        }
        Ok(FeaturePyramid { levels })
    }

    pub fn level(&self, i: usize) -> &Tensor {
        &self.levels[i]
    }

    pub fn levels(&self) -> &[Tensor; 3] {
        &self.levels
    }

    pub fn into_levels(self) -> [Tensor; 3] {
        self.levels
    }

    pub fn channels(&self) -> [usize; 3] {
        [0, 1, 2].map(|i| self.levels[i].shape()[0])
    }

    /// `(h, w)` of each level.
    pub fn spatial(&self) -> [(usize, usize); 3] {
        [0, 1, 2].map(|i| (self.levels[i].shape()[1], self.levels[i].shape()[2]))
    }

    /// Whether the level sizes are exactly 1/4, 1/8, 1/16 of `h x w`.
    pub fn matches_frame(&self, h: usize, w: usize) -> bool {
        self.spatial()
            .iter()
            .zip(PYRAMID_STRIDES)
            .all(|(&(lh, lw), s)| lh * s == h && lw * s == w)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(h: usize, w: usize) -> Tensor {
        Tensor::from_fn(&[3, h, w], |i| (i % 251) as f64 / 250.0)
    }

    #[test]
    fn pad_examples() {
        let f = pad_to_multiple(&ramp(64, 64), 16).unwrap();
        assert_eq!((f.height(), f.width()), (64, 64));
        assert_eq!(f.data(), &ramp(64, 64));

        let img = ramp(60, 60);
        let f = pad_to_multiple(&img, 16).unwrap();
        assert_eq!((f.height(), f.width(), f.orig_size()), (64, 64, (60, 60)));
        for c in 0..3 {
            for (dst, src) in (60..64).zip([59, 58, 57, 56]) {
                for x in 0..60 {
                    assert_eq!(f.data().at3(c, dst, x), img.at3(c, src, x));
                }
            }
        }

        let f = pad_to_multiple(&Tensor::zeros(&[3, 480, 854]), 16).unwrap();
        assert_eq!((f.height(), f.width()), (480, 864));
    }

    #[test]
    fn pad_rejects_empty() {
        assert!(matches!(
            pad_to_multiple(&Tensor::zeros(&[3, 0, 5]), 16),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn pad_tiny_image_repeats_symmetrically() {
        let img = Tensor::from_fn(&[3, 1, 2], |i| i as f64 / 10.0);
        let f = pad_to_multiple(&img, 16).unwrap();
        assert_eq!(f.data().at3(0, 15, 0), img.at3(0, 0, 0));
        assert_eq!(f.data().at3(0, 0, 2), img.at3(0, 0, 1));
        assert_eq!(f.data().at3(0, 0, 4), img.at3(0, 0, 0));
    }

    #[test]
    fn argmax_examples() {
        let onehot = Tensor::new(vec![3, 1, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        let p = ProbabilityVolume::new(onehot).unwrap();
        assert_eq!(argmax_decode(&p).labels(), &[0, 1, 2]);

        let uniform = ProbabilityVolume::new(Tensor::full(&[3, 2, 2], 1.0 / 3.0)).unwrap();
        assert!(argmax_decode(&uniform).labels().iter().all(|&l| l == 0));
    }

    #[test]
    fn probability_volume_rejects_bad_sums() {
        assert!(ProbabilityVolume::new(Tensor::full(&[2, 2, 2], 0.6)).is_err());
    }

    #[test]
    fn mask_ops() {
        let m = MaskMap::new(2, 3, vec![0, 1, 2, 2, 1, 0], 2).unwrap();
        assert!(MaskMap::new(2, 3, vec![0, 1, 3, 2, 1, 0], 2).is_err());
        assert_eq!(m.flip_horizontal().labels(), &[2, 1, 0, 0, 1, 2]);
        assert_eq!(m.relabel(&[2, 1]).unwrap().labels(), &[0, 2, 1, 1, 2, 0]);
        let p = m.pad_to(4, 4).unwrap();
        assert_eq!(p.crop(2, 3).unwrap(), m);
        assert_eq!(m.resize_nearest(4, 6).resize_nearest(2, 3), m);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn pad_then_crop_is_identity(h in 1usize..70, w in 1usize..70, m in 1usize..20) {
            let img = Tensor::from_fn(&[3, h, w], |i| ((i * 7919) % 1000) as f64 / 999.0);
            let f = pad_to_multiple(&img, m).unwrap();
            prop_assert_eq!(f.height() % m, 0);
            prop_assert!(f.height() >= h && f.height() < h + m);
            prop_assert_eq!(f.crop_to_orig(), img);
        }

        #[test]
        fn argmax_is_scale_invariant(
            vals in proptest::collection::vec(0.0f64..1.0, 3 * 16),
            k in 1e-3f64..1e3,
        ) {
            let p = ProbabilityVolume::new_unchecked(Tensor::new(vec![3, 4, 4], vals.clone()).unwrap());
            let q = ProbabilityVolume::new_unchecked(
                Tensor::new(vec![3, 4, 4], vals.iter().map(|v| v * k).collect()).unwrap(),
            );
            prop_assert_eq!(argmax_decode(&p), argmax_decode(&q));
        }
    }
}
