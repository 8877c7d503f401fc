//! Visual and geometric feature encoders.
//!
//! Both streams emit a [`FeaturePyramid`] at 1/4, 1/8 and 1/16 of the padded
//! frame size. The geometric backbone tokenizes at its own patch size, so
//! its input is resized first such that the token grid lands exactly on the
//! 1/16 grid; a light head then upsamples tokens by x4, x2 and x1.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::archive::{read_weight_archive, save_weight_archive, ParamStore};
use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::{add_conv, Session};
use crate::tensor::Tensor;
use crate::types::{FeaturePyramid, Frame, PAD_MULTIPLE, PYRAMID_STRIDES};

pub const VISUAL_PREFIX: &str = "encoder.visual";
pub const GEOMETRIC_PREFIX: &str = "encoder.geometric";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderKind {
    ToyVisual,
    ToyGeometric,
    /// Features computed by an outside backbone and supplied per frame as
    /// pyramid archives.
    External,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSpec {
    pub kind: EncoderKind,
    pub channels: [usize; 3],
    pub patch: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights_ref: Option<PathBuf>,
}

const PATCH_SIZES: [usize; 4] = [4, 8, 14, 16];

impl EncoderSpec {
    pub fn toy_visual(channels: [usize; 3]) -> Self {
        EncoderSpec {
            kind: EncoderKind::ToyVisual,
            channels,
            patch: 4,
            weights_ref: None,
        }
    }

    pub fn toy_geometric(channels: [usize; 3]) -> Self {
        EncoderSpec {
            kind: EncoderKind::ToyGeometric,
            channels,
            patch: 14,
            weights_ref: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.contains(&0) {
            return Err(Error::config(format!(
                "encoder channels {:?} must all be >= 1",
                self.channels
            )));
        }
        if !PATCH_SIZES.contains(&self.patch) {
            return Err(Error::config(format!(
                "encoder patch {} not in {PATCH_SIZES:?}",
                self.patch
            )));
        }
        if self.kind == EncoderKind::External && self.weights_ref.is_none() {
            return Err(Error::config("external encoder needs a weights_ref feature directory"));
        }
        Ok(())
    }
}

/// Input size for the geometric backbone such that its token grid is
/// exactly `(H/16) x (W/16)`.
pub fn align_geometric_input(h: usize, w: usize, patch_g: usize) -> Result<(usize, usize)> {
    if !h.is_multiple_of(PAD_MULTIPLE) || !w.is_multiple_of(PAD_MULTIPLE) || h == 0 || w == 0 {
        return Err(Error::shape(format!(
            "geometric alignment needs sizes that are multiples of {PAD_MULTIPLE}, got {h}x{w}; pad first"
        )));
    }
    if patch_g == 0 {
        return Err(Error::config("patch size must be >= 1"));
    }
    Ok((patch_g * (h / PAD_MULTIPLE), patch_g * (w / PAD_MULTIPLE)))
}

pub(crate) fn visual_params(spec: &EncoderSpec, seed: u64) -> ParamStore {
    let [c1, c2, c3] = spec.channels;
    let mut s = ParamStore::new();
    let p = VISUAL_PREFIX;
    add_conv(&mut s, &format!("{p}.s1.conv0"), 3, c1, 3, seed);
    add_conv(&mut s, &format!("{p}.s1.conv1"), c1, c1, 3, seed);
    add_conv(&mut s, &format!("{p}.s2.conv0"), c1, c2, 3, seed);
    add_conv(&mut s, &format!("{p}.s2.conv1"), c2, c2, 3, seed);
    add_conv(&mut s, &format!("{p}.s3.conv0"), c2, c3, 3, seed);
    add_conv(&mut s, &format!("{p}.s3.conv1"), c3, c3, 3, seed);
    s
}

pub(crate) fn geometric_params(spec: &EncoderSpec, seed: u64) -> ParamStore {
    let tokens = spec.channels[2];
    let mut s = ParamStore::new();
    let p = GEOMETRIC_PREFIX;
    add_conv(&mut s, &format!("{p}.embed"), 1, tokens, spec.patch, seed);
    for (i, &c) in spec.channels.iter().enumerate() {
        add_conv(&mut s, &format!("{p}.s{}", i + 1), tokens, c, 3, seed);
    }
    s
}

/// Toy visual stream: stride-2 conv pairs reaching strides 4, 8, 16.
pub(crate) fn visual_graph(sess: &mut Session, frame: Var) -> Result<[Var; 3]> {
    let p = VISUAL_PREFIX;
    let x = sess.conv(frame, &format!("{p}.s1.conv0"), 2, 1, true)?;
    let s1 = sess.conv(x, &format!("{p}.s1.conv1"), 2, 1, true)?;
    let x = sess.conv(s1, &format!("{p}.s2.conv0"), 2, 1, true)?;
    let s2 = sess.conv(x, &format!("{p}.s2.conv1"), 1, 1, true)?;
    let x = sess.conv(s2, &format!("{p}.s3.conv0"), 2, 1, true)?;
    let s3 = sess.conv(x, &format!("{p}.s3.conv1"), 1, 1, true)?;
    Ok([s1, s2, s3])
}

/// Toy geometric stream over a `[1, H, W]` depth raster.
pub(crate) fn geometric_graph(sess: &mut Session, spec: &EncoderSpec, depth: Var) -> Result<[Var; 3]> {
    let (_, h, w) = sess.graph.value(depth).chw()?;
    let (hg, wg) = align_geometric_input(h, w, spec.patch)?;
    let p = GEOMETRIC_PREFIX;
    let resized = sess.graph.resize(depth, hg, wg)?;
    let tokens = sess.conv(resized, &format!("{p}.embed"), spec.patch, 0, true)?;
    let mut out = Vec::with_capacity(3);
    for (i, stride) in PYRAMID_STRIDES.iter().enumerate() {
        let up = sess.graph.resize(tokens, h / stride, w / stride)?;
        out.push(sess.conv(up, &format!("{p}.s{}", i + 1), 1, 1, true)?);
    }
    Ok([out[0], out[1], out[2]])
}

pub(crate) fn pyramid_of(sess: &Session, vars: [Var; 3]) -> Result<FeaturePyramid> {
    FeaturePyramid::new(vars.map(|v| sess.graph.value(v).clone()))
}

fn check_external(spec: &EncoderSpec, pyramid: &FeaturePyramid, frame: &Frame) -> Result<()> {
    if pyramid.channels() != spec.channels || !pyramid.matches_frame(frame.height(), frame.width()) {
        return Err(Error::shape(format!(
            "external features {:?} at {:?} do not fit channels {:?} for a {}x{} frame",
            pyramid.channels(),
            pyramid.spatial(),
            spec.channels,
            frame.height(),
            frame.width()
        )));
    }
    Ok(())
}

/// Visual pyramid of one frame.
pub fn encode_visual(spec: &EncoderSpec, params: &ParamStore, frame: &Frame) -> Result<FeaturePyramid> {
    spec.validate()?;
    frame.check_model_ready()?;
    match spec.kind {
        EncoderKind::ToyVisual => {
            let mut sess = Session::inference(params);
            let x = sess.graph.constant(frame.data().clone());
            let vars = visual_graph(&mut sess, x)?;
            pyramid_of(&sess, vars)
        }
        EncoderKind::External => Err(Error::config(
            "external visual features are read per frame with load_feature_pyramid",
        )),
        EncoderKind::ToyGeometric => Err(Error::config("a geometric encoder cannot encode the visual stream")),
    }
}

/// Geometric pyramid of one frame; the toy encoder reads only `aux_depth`.
pub fn encode_geometric(
    spec: &EncoderSpec,
    params: &ParamStore,
    frame: &Frame,
    aux_depth: Option<&Tensor>,
) -> Result<FeaturePyramid> {
    spec.validate()?;
    frame.check_model_ready()?;
    match spec.kind {
        EncoderKind::ToyGeometric => {
            let depth = aux_depth
                .ok_or_else(|| Error::config("toy geometric encoder needs an auxiliary depth map"))?;
            check_depth(depth, frame)?;
            let mut sess = Session::inference(params);
            let d = sess.graph.constant(depth.clone());
            let vars = geometric_graph(&mut sess, spec, d)?;
            pyramid_of(&sess, vars)
        }
        EncoderKind::External => Err(Error::config(
            "external geometric features are read per frame with load_feature_pyramid",
        )),
        EncoderKind::ToyVisual => Err(Error::config("a visual encoder cannot encode the geometric stream")),
    }
}

pub(crate) fn check_depth(depth: &Tensor, frame: &Frame) -> Result<()> {
    if depth.shape() != [1, frame.height(), frame.width()] {
        return Err(Error::shape(format!(
            "depth {:?} does not match frame {}x{}",
            depth.shape(),
            frame.height(),
            frame.width()
        )));
    }
    Ok(())
}

/// Load a per-frame feature pyramid (archive arrays `s1`, `s2`, `s3`) and
/// check it against `spec` and the frame it belongs to.
pub fn load_feature_pyramid(dir: &Path, spec: &EncoderSpec, frame: &Frame) -> Result<FeaturePyramid> {
    let store = read_weight_archive(dir)?;
    let level = |name: &str| -> Result<Tensor> {
        store
            .get(name)
            .map(|t| (**t).clone())
            .ok_or_else(|| Error::Archive {
                path: dir.to_path_buf(),
                reason: format!("missing required array `{name}`"),
            })
    };
    if store.len() != 3 {
        return Err(Error::Archive {
            path: dir.to_path_buf(),
            reason: "feature archive must hold exactly s1, s2, s3".into(),
        });
    }
    let pyramid = FeaturePyramid::new([level("s1")?, level("s2")?, level("s3")?])?;
    check_external(spec, &pyramid, frame)?;
    Ok(pyramid)
}

pub fn save_feature_pyramid(dir: &Path, pyramid: &FeaturePyramid) -> Result<()> {
    let mut store = ParamStore::new();
    for (i, level) in pyramid.levels().iter().enumerate() {
        store.insert(format!("s{}", i + 1), level.clone());
    }
    save_weight_archive(dir, &store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::pad_to_multiple;

    fn frame(h: usize, w: usize, seed: u64) -> Frame {
        let t = Tensor::from_fn(&[3, h, w], |i| {
            (((i as u64 + 1) * (seed * 2 + 7919)) % 1000) as f64 / 999.0
        });
        Frame::unpadded(t).unwrap()
    }

    #[test]
    fn alignment_examples() {
        assert_eq!(align_geometric_input(224, 224, 14).unwrap(), (196, 196));
        assert_eq!(align_geometric_input(64, 64, 14).unwrap(), (56, 56));
        assert_eq!(align_geometric_input(480, 864, 14).unwrap(), (420, 756));
        assert!(matches!(align_geometric_input(60, 64, 14), Err(Error::Shape(_))));
    }

    #[test]
    fn alignment_is_monotone_and_divisible() {
        for patch in PATCH_SIZES {
            let mut prev = 0;
            for h in (16..=512).step_by(16) {
                let (hg, wg) = align_geometric_input(h, 32, patch).unwrap();
                assert!(hg > prev);
                assert_eq!(hg % patch, 0);
                assert_eq!(wg % patch, 0);
                prev = hg;
            }
        }
    }

    #[test]
    fn visual_shapes_constant_input_and_determinism() {
        let spec = EncoderSpec::toy_visual([32, 64, 128]);
        let params = visual_params(&spec, 1);
        let f = frame(64, 64, 3);
        let p = encode_visual(&spec, &params, &f).unwrap();
        assert_eq!(p.level(0).shape(), &[32, 16, 16]);
        assert_eq!(p.level(1).shape(), &[64, 8, 8]);
        assert_eq!(p.level(2).shape(), &[128, 4, 4]);
        assert_eq!(encode_visual(&spec, &params, &f).unwrap(), p);

        // A constant frame: interior locations are identical (borders see
        // the conv zero padding).
        let c = Frame::unpadded(Tensor::full(&[3, 64, 64], 0.4)).unwrap();
        let p = encode_visual(&spec, &params, &c).unwrap();
        let l0 = p.level(0);
        for ch in 0..32 {
            let v = l0.at3(ch, 5, 5);
            for y in 2..14 {
                for x in 2..14 {
                    assert!((l0.at3(ch, y, x) - v).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn geometric_sizes_match_visual_sizes() {
        let vs = EncoderSpec::toy_visual([4, 4, 4]);
        let gs = EncoderSpec::toy_geometric([4, 4, 4]);
        let mut params = visual_params(&vs, 2);
        params.extend(geometric_params(&gs, 2));
        let sizes = [
            (16, 16), (32, 16), (16, 48), (64, 64), (48, 80), (80, 32), (96, 96), (112, 64),
            (128, 16), (16, 128), (144, 48), (32, 160), (176, 176), (64, 192), (208, 32),
            (224, 224), (48, 240), (256, 64), (80, 272), (288, 112),
        ];
        for (h, w) in sizes {
            let f = frame(h, w, 1);
            let depth = Tensor::from_fn(&[1, h, w], |i| (i % 17) as f64 / 16.0);
            let pv = encode_visual(&vs, &params, &f).unwrap();
            let pg = encode_geometric(&gs, &params, &f, Some(&depth)).unwrap();
            assert_eq!(pv.spatial(), pg.spatial(), "{h}x{w}");
            assert!(pg.matches_frame(h, w));
        }
    }

    #[test]
    fn geometric_reads_only_depth() {
        let gs = EncoderSpec::toy_geometric([8, 8, 8]);
        let params = geometric_params(&gs, 5);
        let zero = Tensor::zeros(&[1, 64, 64]);
        let a = encode_geometric(&gs, &params, &frame(64, 64, 1), Some(&zero)).unwrap();
        let b = encode_geometric(&gs, &params, &frame(64, 64, 9), Some(&zero)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.spatial(), [(16, 16), (8, 8), (4, 4)]);
        assert!(matches!(
            encode_geometric(&gs, &params, &frame(64, 64, 1), None),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn unpadded_frames_are_rejected() {
        let spec = EncoderSpec::toy_visual([4, 4, 4]);
        let params = visual_params(&spec, 1);
        let f = Frame::unpadded(Tensor::full(&[3, 60, 64], 0.5)).unwrap();
        assert!(encode_visual(&spec, &params, &f).is_err());
        let f = pad_to_multiple(&Tensor::full(&[3, 60, 64], 0.5), 16).unwrap();
        assert!(encode_visual(&spec, &params, &f).is_ok());
    }

    #[test]
    fn spec_validation() {
        let mut s = EncoderSpec::toy_visual([1, 2, 3]);
        assert!(s.validate().is_ok());
        s.patch = 7;
        assert!(s.validate().is_err());
        s.patch = 16;
        s.channels = [0, 1, 1];
        assert!(s.validate().is_err());
    }

    #[test]
    fn external_feature_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = EncoderSpec {
            kind: EncoderKind::External,
            channels: [2, 3, 4],
            patch: 16,
            weights_ref: Some(dir.path().to_path_buf()),
        };
        let p = FeaturePyramid::new([
            Tensor::full(&[2, 16, 16], 0.5),
            Tensor::full(&[3, 8, 8], 0.25),
            Tensor::full(&[4, 4, 4], 0.125),
        ])
        .unwrap();
        save_feature_pyramid(dir.path(), &p).unwrap();
        let f = frame(64, 64, 1);
        assert_eq!(load_feature_pyramid(dir.path(), &spec, &f).unwrap(), p);
        let wrong = frame(32, 32, 1);
        assert!(load_feature_pyramid(dir.path(), &spec, &wrong).is_err());
    }
}
