//! Memory-based mask propagation.
//!
//! Keys and mask-conditioned values live at 1/16 resolution. A query frame
//! reads the bank through a row-softmax affinity over every stored
//! location; the per-object readout is decoded with the 1/8 and 1/4 skips
//! into logits, and the logits are soft-aggregated into a distribution over
//! background plus objects.

use std::collections::VecDeque;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::archive::ParamStore;
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{add_conv, init_weight, Session};
use crate::tensor::Tensor;
use crate::types::{MaskMap, ProbabilityVolume};

pub const SEGMENTER_PREFIX: &str = "segmenter";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Similarity {
    /// `k_q . k_m / sqrt(Ck)`.
    #[default]
    Dot,
    /// `-|k_q - k_m|^2 / sqrt(Ck)`.
    NegL2,
}

/// Memory settings shared by inference and training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MemoryConfig {
    pub key_dim: usize,
    pub value_dim: usize,
    /// Maximum number of non-permanent entries.
    pub capacity: usize,
    /// Inference writes frame `t` iff `t % write_interval == 0`.
    pub write_interval: usize,
    pub similarity: Similarity,
    pub top_k: Option<usize>,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        MemoryConfig {
            key_dim: 64,
            value_dim: 128,
            capacity: 7,
            write_interval: 5,
            similarity: Similarity::Dot,
            top_k: None,
        }
    }
}

impl MemoryConfig {
    pub fn validate(&self) -> Result<()> {
        if self.key_dim == 0 || self.value_dim == 0 {
            return Err(Error::config("memory key_dim and value_dim must be >= 1"));
        }
        if self.write_interval == 0 {
            return Err(Error::config("memory write_interval must be >= 1"));
        }
        if self.top_k == Some(0) {
            return Err(Error::config("memory top_k must be >= 1 when set"));
        }
        Ok(())
    }
}

/// Channel widths of the feature pyramid the segmenter consumes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SegmenterDims {
    pub features: [usize; 3],
    pub key_dim: usize,
    pub value_dim: usize,
}

pub(crate) fn segmenter_params(dims: &SegmenterDims, seed: u64) -> ParamStore {
    let [c1, c2, c3] = dims.features;
    let (ck, cv) = (dims.key_dim, dims.value_dim);
    let p = SEGMENTER_PREFIX;
    let mut s = ParamStore::new();
    let key = format!("{p}.key.w");
    s.insert(key.clone(), init_weight(&[ck, c3], c3, 1.0, seed, &key));
    add_conv(&mut s, &format!("{p}.value.conv0"), c3 + 1, cv, 3, seed);
    add_conv(&mut s, &format!("{p}.value.conv1"), cv, cv, 3, seed);
    add_conv(&mut s, &format!("{p}.decoder.a1"), cv, c2, 3, seed);
    add_conv(&mut s, &format!("{p}.decoder.skip2"), c2, c2, 1, seed);
    add_conv(&mut s, &format!("{p}.decoder.a2"), c2, c2, 3, seed);
    add_conv(&mut s, &format!("{p}.decoder.b1"), c2, c1, 3, seed);
    add_conv(&mut s, &format!("{p}.decoder.skip1"), c1, c1, 1, seed);
    add_conv(&mut s, &format!("{p}.decoder.b2"), c1, c1, 3, seed);
    add_conv(&mut s, &format!("{p}.decoder.head"), c1, 1, 1, seed);
    s
}

/// Per-location linear projection of the 1/16 features: `[Ck, h*w]`.
pub fn key_graph(sess: &mut Session, f3: Var) -> Result<Var> {
    let (c, h, w) = sess.graph.value(f3).chw()?;
    let wk = sess.param(&format!("{SEGMENTER_PREFIX}.key.w"))?;
    if sess.graph.shape(wk)[1] != c {
        return Err(Error::shape(format!(
            "key projection expects {} channels, features have {c}",
            sess.graph.shape(wk)[1]
        )));
    }
    let x = sess.graph.reshape(f3, &[c, h * w])?;
    sess.graph.matmul(wk, x, false, false)
}

/// Area-max downsample of object `obj`'s indicator onto an `h x w` grid:
/// a cell is 1 when any of its pixels carries the object.
pub fn downsample_indicator(mask: &MaskMap, obj: u8, h: usize, w: usize) -> Result<Tensor> {
    if h == 0 || w == 0 || !mask.height().is_multiple_of(h) || !mask.width().is_multiple_of(w) {
        return Err(Error::shape(format!(
            "mask {}x{} does not tile onto {h}x{w}",
            mask.height(),
            mask.width()
        )));
    }
    let (sy, sx) = (mask.height() / h, mask.width() / w);
    let mut out = Tensor::zeros(&[1, h, w]);
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            if mask.get(y, x) == obj {
                out.data_mut()[(y / sy) * w + x / sx] = 1.0;
            }
        }
    }
    Ok(out)
}

/// Mask-conditioned values for every object, `[N*Cv, h*w]`.
pub fn value_graph(sess: &mut Session, f3: Var, mask: &MaskMap) -> Result<Var> {
    let (_, h, w) = sess.graph.value(f3).chw()?;
    let p = SEGMENTER_PREFIX;
    let cv = sess.stored_shape(&format!("{p}.value.conv1.b"))?[0];
    let n = mask.num_objects();
    if n == 0 {
        return Ok(sess.graph.constant(Tensor::zeros(&[0, h * w])));
    }
    let mut per_object = Vec::with_capacity(n);
    for obj in 1..=n {
        let ind = sess.graph.constant(downsample_indicator(mask, obj as u8, h, w)?);
        let x = sess.graph.concat(&[f3, ind], 0)?;
        let x = sess.conv(x, &format!("{p}.value.conv0"), 1, 1, true)?;
        per_object.push(sess.conv(x, &format!("{p}.value.conv1"), 1, 1, false)?);
    }
    let v = sess.graph.concat(&per_object, 0)?;
    sess.graph.reshape(v, &[n * cv, h * w])
}

/// Affinity read of `query` (`[Ck, hw]`) against stored keys (`[Ck, m_i]`)
/// and values (`[N*Cv, m_i]`). Returns `(readout [N*Cv, hw], affinity [hw, M])`.
pub fn read_graph(
    g: &mut Graph,
    query: Var,
    keys: &[Var],
    values: &[Var],
    similarity: Similarity,
    top_k: Option<usize>,
) -> Result<(Var, Var)> {
    if keys.is_empty() {
        return Err(Error::EmptyMemory);
    }
    let ck = g.shape(query)[0];
    let mem_keys = g.concat(keys, 1)?;
    let mem_values = g.concat(values, 1)?;
    let scale = 1.0 / (ck as f64).sqrt();
    let mut scores = g.matmul(query, mem_keys, true, false)?;
    if similarity == Similarity::NegL2 {
        // -|q - k|^2 = 2 q.k - |k|^2 - |q|^2; the last term is constant per row.
        scores = g.scale(scores, 2.0);
        let norms = g.squared_col_norms(mem_keys)?;
        let neg = g.scale(norms, -1.0);
        scores = g.add_bias(scores, neg, crate::autograd::Broadcast::Cols)?;
    }
    let scores = g.scale(scores, scale);
    let affinity = g.softmax_rows(scores, top_k)?;
    let readout = g.matmul(mem_values, affinity, false, true)?;
    Ok((readout, affinity))
}

/// Decoder inputs shared by every object of a frame: the projected skips.
pub struct DecoderSkips {
    skip2: Var,
    skip1: Var,
}

pub fn decoder_skips(sess: &mut Session, f2: Var, f1: Var) -> Result<DecoderSkips> {
    let p = SEGMENTER_PREFIX;
    Ok(DecoderSkips {
        skip2: sess.conv(f2, &format!("{p}.decoder.skip2"), 1, 0, false)?,
        skip1: sess.conv(f1, &format!("{p}.decoder.skip1"), 1, 0, false)?,
    })
}

/// Logits `[N, H, W]` from a readout `[N*Cv, h*w]`; every object goes
/// through the same weights.
pub fn decode_graph(
    sess: &mut Session,
    readout: Var,
    skips: &DecoderSkips,
    (h, w): (usize, usize),
    (out_h, out_w): (usize, usize),
) -> Result<Var> {
    let p = SEGMENTER_PREFIX;
    let rows = sess.graph.shape(readout)[0];
    let cv = sess.stored_shape(&format!("{p}.value.conv1.b"))?[0];
    if !rows.is_multiple_of(cv) {
        return Err(Error::shape(format!("readout rows {rows} not a multiple of Cv={cv}")));
    }
    let n = rows / cv;
    if n == 0 {
        return Ok(sess.graph.constant(Tensor::zeros(&[0, out_h, out_w])));
    }
    let s2 = sess.graph.shape(skips.skip2).to_vec();
    let s1 = sess.graph.shape(skips.skip1).to_vec();
    if s2[1..] != [2 * h, 2 * w] || s1[1..] != [4 * h, 4 * w] {
        return Err(Error::shape(format!(
            "decoder skips {s2:?} / {s1:?} do not match a {h}x{w} readout"
        )));
    }
    let r = sess.graph.reshape(readout, &[rows, h, w])?;
    let mut logits = Vec::with_capacity(n);
    for i in 0..n {
        let x = sess.graph.slice(r, 0, i * cv, cv)?;
        let x = sess.conv(x, &format!("{p}.decoder.a1"), 1, 1, true)?;
        let x = sess.graph.resize(x, 2 * h, 2 * w)?;
        let x = sess.graph.add(x, skips.skip2)?;
        let x = sess.conv(x, &format!("{p}.decoder.a2"), 1, 1, true)?;
        let x = sess.conv(x, &format!("{p}.decoder.b1"), 1, 1, true)?;
        let x = sess.graph.resize(x, 4 * h, 4 * w)?;
        let x = sess.graph.add(x, skips.skip1)?;
        let x = sess.conv(x, &format!("{p}.decoder.b2"), 1, 1, true)?;
        let x = sess.conv(x, &format!("{p}.decoder.head"), 1, 0, false)?;
        logits.push(sess.graph.resize(x, out_h, out_w)?);
    }
    sess.graph.concat(&logits, 0)
}

/// One stored frame: key `[Ck, h*w]` and values `[N*Cv, h*w]`.
#[derive(Clone, Debug)]
pub struct MemoryEntry<E> {
    pub key: E,
    pub values: E,
    pub frame_index: usize,
}

/// Shape shared by every entry of a bank.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EntryGeometry {
    pub key_dim: usize,
    pub value_dim: usize,
    pub num_objects: usize,
    pub h: usize,
    pub w: usize,
}

impl EntryGeometry {
    pub fn of_tensors(key: &Tensor, values: &Tensor, value_dim: usize, h: usize, w: usize) -> Result<Self> {
        let [ck, hw] = key.shape()[..] else {
            return Err(Error::shape(format!("memory key must be [Ck, hw], got {:?}", key.shape())));
        };
        let [rows, hw2] = values.shape()[..] else {
            return Err(Error::shape(format!("memory values must be [N*Cv, hw], got {:?}", values.shape())));
        };
        if hw != h * w || hw2 != hw || value_dim == 0 || rows % value_dim != 0 {
            return Err(Error::shape(format!(
                "memory entry key {:?} / values {:?} inconsistent with {h}x{w}, Cv={value_dim}",
                key.shape(),
                values.shape()
            )));
        }
        Ok(EntryGeometry {
            key_dim: ck,
            value_dim,
            num_objects: rows / value_dim,
            h,
            w,
        })
    }
}

/// Permanent first-frame entry plus a FIFO tail of at most `capacity`
/// entries.
#[derive(Clone, Debug)]
pub struct MemoryBank<E> {
    capacity: usize,
    geometry: Option<EntryGeometry>,
    permanent: Option<MemoryEntry<E>>,
    tail: VecDeque<MemoryEntry<E>>,
}

/// Bank of concrete tensors, used at inference.
pub type TensorBank = MemoryBank<Arc<Tensor>>;

impl<E> MemoryBank<E> {
    pub fn new(capacity: usize) -> Self {
        MemoryBank {
            capacity,
            geometry: None,
            permanent: None,
            tail: VecDeque::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn geometry(&self) -> Option<EntryGeometry> {
        self.geometry
    }

    pub fn is_initialized(&self) -> bool {
        self.permanent.is_some()
    }

    /// Set the permanent entry; clears any tail.
    pub fn init(&mut self, entry: MemoryEntry<E>, geometry: EntryGeometry) {
        self.permanent = Some(entry);
        self.geometry = Some(geometry);
        self.tail.clear();
    }

    /// Append to the tail, evicting the oldest tail entry past capacity.
    /// Returns the evicted entry, if any.
    pub fn write(&mut self, entry: MemoryEntry<E>, geometry: EntryGeometry) -> Result<Option<MemoryEntry<E>>> {
        let Some(expected) = self.geometry else {
            return Err(Error::EmptyMemory);
        };
        if geometry != expected {
            return Err(Error::shape(format!(
                "memory entry {geometry:?} does not match bank {expected:?}"
            )));
        }
        self.tail.push_back(entry);
        Ok(if self.tail.len() > self.capacity {
            self.tail.pop_front()
        } else {
            None
        })
    }

    /// Number of stored entries, permanent included.
    pub fn len(&self) -> usize {
        self.permanent.iter().count() + self.tail.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Permanent entry first, then the tail oldest to newest.
    pub fn entries(&self) -> impl Iterator<Item = &MemoryEntry<E>> {
        self.permanent.iter().chain(self.tail.iter())
    }

    pub fn frame_indices(&self) -> Vec<usize> {
        self.entries().map(|e| e.frame_index).collect()
    }
}

impl TensorBank {
    /// Permanent slot from first-frame key and values.
    pub fn init_tensors(&mut self, key: Tensor, values: Tensor, value_dim: usize, (h, w): (usize, usize)) -> Result<()> {
        let geometry = EntryGeometry::of_tensors(&key, &values, value_dim, h, w)?;
        self.init(
            MemoryEntry {
                key: Arc::new(key),
                values: Arc::new(values),
                frame_index: 0,
            },
            geometry,
        );
        Ok(())
    }
}

/// Store a frame's key and values in the bank (FIFO past capacity; the
/// permanent entry is never evicted).
pub fn memory_write(bank: &mut TensorBank, key: Tensor, values: Tensor, frame_index: usize) -> Result<()> {
    let geom = bank.geometry().ok_or(Error::EmptyMemory)?;
    let g = EntryGeometry::of_tensors(&key, &values, geom.value_dim, geom.h, geom.w)?;
    bank.write(
        MemoryEntry {
            key: Arc::new(key),
            values: Arc::new(values),
            frame_index,
        },
        g,
    )?;
    Ok(())
}

/// Readout `[N*Cv, h*w]` and affinity `[h*w, M]` of a query key against a
/// tensor bank.
pub fn memory_read(query_key: &Tensor, bank: &TensorBank, cfg: &MemoryConfig) -> Result<(Tensor, Tensor)> {
    if !bank.is_initialized() {
        return Err(Error::EmptyMemory);
    }
    let geom = bank.geometry().expect("initialized");
    if query_key.shape() != [geom.key_dim, geom.h * geom.w] {
        return Err(Error::shape(format!(
            "query key {:?} vs bank keys [{}, {}]",
            query_key.shape(),
            geom.key_dim,
            geom.h * geom.w
        )));
    }
    let mut g = Graph::new();
    let q = g.constant(query_key.clone());
    let (keys, values): (Vec<Var>, Vec<Var>) = bank
        .entries()
        .map(|e| (g.constant_shared(e.key.clone()), g.constant_shared(e.values.clone())))
        .unzip();
    let (r, a) = read_graph(&mut g, q, &keys, &values, cfg.similarity, cfg.top_k)?;
    Ok((g.value(r).clone(), g.value(a).clone()))
}

/// Tensor-level key encoder.
pub fn encode_key(params: &ParamStore, f3: &Tensor) -> Result<Tensor> {
    let mut sess = Session::inference(params);
    let x = sess.graph.constant(f3.clone());
    let k = key_graph(&mut sess, x)?;
    Ok(sess.graph.value(k).clone())
}

/// Tensor-level value encoder; output `[N, Cv, h, w]`.
pub fn encode_value(params: &ParamStore, f3: &Tensor, mask: &MaskMap) -> Result<Tensor> {
    let (_, h, w) = f3.chw()?;
    let mut sess = Session::inference(params);
    let x = sess.graph.constant(f3.clone());
    let v = value_graph(&mut sess, x, mask)?;
    let cv = params.expect(&format!("{SEGMENTER_PREFIX}.value.conv1.b"))?.len();
    sess.graph.value(v).clone().reshape(&[mask.num_objects(), cv, h, w])
}

/// Tensor-level decoder: `[N, Cv, h, w]` readout plus skips to `[N, H, W]` logits.
pub fn decode(params: &ParamStore, readout: &Tensor, f2: &Tensor, f1: &Tensor) -> Result<Tensor> {
    let [n, cv, h, w] = readout.shape()[..] else {
        return Err(Error::shape(format!("readout must be [N, Cv, h, w], got {:?}", readout.shape())));
    };
    let mut sess = Session::inference(params);
    let r = sess.graph.constant(readout.clone().reshape(&[n * cv, h * w])?);
    let a = sess.graph.constant(f2.clone());
    let b = sess.graph.constant(f1.clone());
    let skips = decoder_skips(&mut sess, a, b)?;
    let out = decode_graph(&mut sess, r, &skips, (h, w), (16 * h, 16 * w))?;
    Ok(sess.graph.value(out).clone())
}

/// Per-object logits `[N, H, W]` to a normalized `[N+1, H, W]` volume.
pub fn soft_aggregate(logits: &Tensor) -> Result<ProbabilityVolume> {
    let mut g = Graph::new();
    let l = g.constant(logits.clone());
    let p = g.soft_aggregate(l)?;
    ProbabilityVolume::new(g.value(p).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geom(n: usize) -> EntryGeometry {
        EntryGeometry {
            key_dim: 2,
            value_dim: 1,
            num_objects: n,
            h: 1,
            w: 1,
        }
    }

    fn entry(idx: usize) -> MemoryEntry<usize> {
        MemoryEntry {
            key: idx,
            values: idx,
            frame_index: idx,
        }
    }

    #[test]
    fn fifo_keeps_permanent_and_newest() {
        let mut bank = MemoryBank::new(2);
        bank.init(entry(0), geom(1));
        for i in [5, 10, 15] {
            bank.write(entry(i), geom(1)).unwrap();
        }
        assert_eq!(bank.frame_indices(), vec![0, 10, 15]);
    }

    #[test]
    fn below_capacity_no_eviction_and_permanent_survives() {
        let mut bank = MemoryBank::new(7);
        bank.init(entry(0), geom(1));
        for i in 1..=3 {
            assert!(bank.write(entry(i), geom(1)).unwrap().is_none());
        }
        assert_eq!(bank.len(), 4);
        for i in 4..=103 {
            bank.write(entry(i), geom(1)).unwrap();
            assert!(bank.len() <= 8);
        }
        assert_eq!(bank.frame_indices()[0], 0);
        assert_eq!(bank.frame_indices().len(), 8);
    }

    #[test]
    fn write_requires_init_and_matching_shape() {
        let mut bank: MemoryBank<usize> = MemoryBank::new(2);
        assert!(matches!(bank.write(entry(1), geom(1)), Err(Error::EmptyMemory)));
        bank.init(entry(0), geom(1));
        assert!(matches!(bank.write(entry(1), geom(2)), Err(Error::Shape(_))));
    }

    #[test]
    fn read_of_single_cell_returns_its_values() {
        let mut bank = TensorBank::new(3);
        let key = Tensor::new(vec![2, 1], vec![0.3, -1.2]).unwrap();
        let values = Tensor::new(vec![3, 1], vec![1.5, -2.0, 0.25]).unwrap();
        bank.init_tensors(key, values.clone(), 3, (1, 1)).unwrap();
        let q = Tensor::new(vec![2, 1], vec![4.0, 2.0]).unwrap();
        let (r, a) = memory_read(&q, &bank, &MemoryConfig::default()).unwrap();
        assert_eq!(r, values);
        assert_eq!(a.data(), &[1.0]);
    }

    #[test]
    fn identical_keys_average_values() {
        let mut bank = TensorBank::new(3);
        let key = Tensor::new(vec![2, 2], vec![0.5, 0.5, -0.1, -0.1]).unwrap();
        let v0 = Tensor::new(vec![1, 2], vec![1.0, 3.0]).unwrap();
        bank.init_tensors(key.clone(), v0, 1, (1, 2)).unwrap();
        memory_write(&mut bank, key, Tensor::new(vec![1, 2], vec![5.0, 7.0]).unwrap(), 1).unwrap();
        let q = Tensor::new(vec![2, 2], vec![1.0, -2.0, 0.3, 0.8]).unwrap();
        for sim in [Similarity::Dot, Similarity::NegL2] {
            let cfg = MemoryConfig {
                similarity: sim,
                ..MemoryConfig::default()
            };
            let (r, _) = memory_read(&q, &bank, &cfg).unwrap();
            for v in r.data() {
                assert!((v - 4.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn empty_bank_read_errors() {
        let bank = TensorBank::new(3);
        let q = Tensor::zeros(&[2, 1]);
        assert!(matches!(
            memory_read(&q, &bank, &MemoryConfig::default()),
            Err(Error::EmptyMemory)
        ));
    }

    #[test]
    fn aggregate_examples() {
        let p = soft_aggregate(&Tensor::zeros(&[1, 2, 2])).unwrap();
        assert!(p.probs().data().iter().all(|&v| (v - 0.5).abs() < 1e-15));
        let p = soft_aggregate(&Tensor::full(&[1, 2, 2], 50.0)).unwrap();
        assert!(p.probs().data()[4..].iter().all(|&v| v >= 1.0 - 1e-5));
        let p = soft_aggregate(&Tensor::zeros(&[0, 2, 2])).unwrap();
        assert!(p.probs().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn indicator_area_max() {
        let mut labels = vec![0u8; 32 * 32];
        labels[17 * 32 + 3] = 2;
        let m = MaskMap::new(32, 32, labels, 2).unwrap();
        let ind = downsample_indicator(&m, 2, 2, 2).unwrap();
        assert_eq!(ind.data(), &[0.0, 0.0, 1.0, 0.0]);
        let none = downsample_indicator(&m, 1, 2, 2).unwrap();
        assert!(none.data().iter().all(|&v| v == 0.0));
    }
}
