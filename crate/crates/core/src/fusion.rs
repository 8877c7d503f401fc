//! Per-scale fusion of visual and geometric features.
//!
//! At every pyramid scale the two feature maps are concatenated along
//! channels and passed through a pointwise perceptron, independently at
//! each spatial location.

use serde::{Deserialize, Serialize};

use crate::archive::ParamStore;
use crate::autograd::{Broadcast, Var};
use crate::error::{Error, Result};
use crate::nn::{init_weight, Session};
use crate::tensor::Tensor;
use crate::types::FeaturePyramid;

pub const FUSION_PREFIX: &str = "fusion";

/// One hidden ReLU layer (`Two`) or a single linear map (`One`).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum FusionDepth {
    One,
    Two,
}

impl TryFrom<u8> for FusionDepth {
    type Error = String;
    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            1 => Ok(FusionDepth::One),
            2 => Ok(FusionDepth::Two),
            _ => Err(format!("fusion depth must be 1 or 2, got {v}")),
        }
    }
}

impl From<FusionDepth> for u8 {
    fn from(d: FusionDepth) -> u8 {
        match d {
            FusionDepth::One => 1,
            FusionDepth::Two => 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FusionConfig {
    pub visual: [usize; 3],
    pub geometric: [usize; 3],
    /// Output (and hidden) width per scale.
    pub out: [usize; 3],
    pub depth: FusionDepth,
}

impl FusionConfig {
    /// Output width equal to the visual width, so the decoder does not care
    /// whether fusion is on.
    pub fn new(visual: [usize; 3], geometric: [usize; 3], depth: FusionDepth) -> Self {
        FusionConfig {
            visual,
            geometric,
            out: visual,
            depth,
        }
    }
}

/// Weights of one scale's perceptron. `w2`/`b2` are absent at depth one.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaleMlp {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Option<Tensor>,
    pub b2: Option<Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionParams {
    pub scales: [ScaleMlp; 3],
}

fn name(scale: usize, field: &str) -> String {
    format!("{FUSION_PREFIX}.s{}.{field}", scale + 1)
}

/// Fan-in scaled normal weights (std `1/sqrt(fan_in)`), zero biases.
pub fn init_fusion(cfg: &FusionConfig, seed: u64) -> FusionParams {
    let scales = [0, 1, 2].map(|i| {
        let cin = cfg.visual[i] + cfg.geometric[i];
        let cout = cfg.out[i];
        let w1 = init_weight(&[cout, cin], cin, 1.0, seed, &name(i, "w1"));
        let (w2, b2) = match cfg.depth {
            FusionDepth::One => (None, None),
            FusionDepth::Two => (
                Some(init_weight(&[cout, cout], cout, 1.0, seed, &name(i, "w2"))),
                Some(Tensor::zeros(&[cout])),
            ),
        };
        ScaleMlp {
            w1,
            b1: Tensor::zeros(&[cout]),
            w2,
            b2,
        }
    });
    FusionParams { scales }
}

impl FusionParams {
    pub fn to_store(&self) -> ParamStore {
        let mut s = ParamStore::new();
        for (i, m) in self.scales.iter().enumerate() {
            s.insert(name(i, "w1"), m.w1.clone());
            s.insert(name(i, "b1"), m.b1.clone());
            if let (Some(w2), Some(b2)) = (&m.w2, &m.b2) {
                s.insert(name(i, "w2"), w2.clone());
                s.insert(name(i, "b2"), b2.clone());
            }
        }
        s
    }

    pub fn from_store(store: &ParamStore, depth: FusionDepth) -> Result<Self> {
        let get = |i: usize, f: &str| -> Result<Tensor> { Ok((**store.expect(&name(i, f))?).clone()) };
        let mut scales = Vec::with_capacity(3);
        for i in 0..3 {
            let (w2, b2) = match depth {
                FusionDepth::One => (None, None),
                FusionDepth::Two => (Some(get(i, "w2")?), Some(get(i, "b2")?)),
            };
            scales.push(ScaleMlp {
                w1: get(i, "w1")?,
                b1: get(i, "b1")?,
                w2,
                b2,
            });
        }
        let scales: [ScaleMlp; 3] = scales.try_into().expect("three scales");
        Ok(FusionParams { scales })
    }

    pub fn depth(&self) -> FusionDepth {
        if self.scales[0].w2.is_some() {
            FusionDepth::Two
        } else {
            FusionDepth::One
        }
    }
}

/// Fuse two pyramids inside a session whose store holds `fusion.*`.
pub fn fuse_graph(sess: &mut Session, fv: [Var; 3], fg: [Var; 3], depth: FusionDepth) -> Result<[Var; 3]> {
    let mut out = Vec::with_capacity(3);
    for i in 0..3 {
        let (cv, h, w) = sess.graph.value(fv[i]).chw()?;
        let (cg, hg, wg) = sess.graph.value(fg[i]).chw()?;
        if (h, w) != (hg, wg) {
            return Err(Error::shape(format!(
                "scale {}: visual {h}x{w} vs geometric {hg}x{wg}; geometric alignment is broken",
                i + 1
            )));
        }
        let x = sess.graph.concat(&[fv[i], fg[i]], 0)?;
        let x = sess.graph.reshape(x, &[cv + cg, h * w])?;
        let w1 = sess.param(&name(i, "w1"))?;
        let b1 = sess.param(&name(i, "b1"))?;
        let mut y = sess.graph.matmul(w1, x, false, false)?;
        y = sess.graph.add_bias(y, b1, Broadcast::Rows)?;
        if depth == FusionDepth::Two {
            y = sess.graph.relu(y);
            let w2 = sess.param(&name(i, "w2"))?;
            let b2 = sess.param(&name(i, "b2"))?;
            y = sess.graph.matmul(w2, y, false, false)?;
            y = sess.graph.add_bias(y, b2, Broadcast::Rows)?;
        }
        let c = sess.graph.shape(y)[0];
        out.push(sess.graph.reshape(y, &[c, h, w])?);
    }
    Ok([out[0], out[1], out[2]])
}

/// `out = W2 relu(W1 [v; g] + b1) + b2` at every location of every scale.
pub fn fuse_pyramids(fv: &FeaturePyramid, fg: &FeaturePyramid, params: &FusionParams) -> Result<FeaturePyramid> {
    let store = params.to_store();
    let mut sess = Session::inference(&store);
    let v = fv.levels().clone().map(|t| sess.graph.constant(t));
    let g = fg.levels().clone().map(|t| sess.graph.constant(t));
    let out = fuse_graph(&mut sess, v, g, params.depth())?;
    FeaturePyramid::new(out.map(|o| sess.graph.value(o).clone()))
}
