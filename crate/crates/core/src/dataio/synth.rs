//! Procedural video generator: textured moving background with camera
//! shake, annotated target shapes, and unannotated distractors that copy a
//! target's appearance but sit on a different depth layer. Every frame comes
//! with a label map and an inverse-depth map rendered by the painter's rule.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::manifest::{
    assemble_sequence, DatasetIndex, FrameRecord, LoadedSequence, SequenceManifest, DATASET_FILE,
    MANIFEST_FILE,
};
use super::png_io::{self, from_u16, from_u8, to_u16, to_u8};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::types::MaskMap;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub max_distractors: usize,
    /// Object radius range in pixels.
    pub min_radius: f64,
    pub max_radius: f64,
    /// Peak camera-shake offset in pixels.
    pub shake: f64,
    /// Standard deviation of per-pixel color noise.
    pub noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            height: 64,
            width: 64,
            frames: 24,
            min_objects: 1,
            max_objects: 3,
            max_distractors: 2,
            min_radius: 6.0,
            max_radius: 11.0,
            shake: 1.5,
            noise: 0.02,
        }
    }
}

/// Inverse-depth layers shapes are drawn from; larger is nearer.
pub const DEPTH_LAYERS: [f64; 5] = [0.35, 0.5, 0.65, 0.8, 0.95];

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height < 8 || self.width < 8 || self.frames == 0 {
            return Err(Error::config("synthetic clips need at least 8x8 pixels and one frame"));
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return Err(Error::config("need 1 <= min_objects <= max_objects"));
        }
        if self.max_objects + self.max_distractors > DEPTH_LAYERS.len() {
            return Err(Error::config(format!(
                "at most {} shapes per clip",
                DEPTH_LAYERS.len()
            )));
        }
        if !(self.min_radius > 0.0 && self.min_radius <= self.max_radius) {
            return Err(Error::config("need 0 < min_radius <= max_radius"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Disk,
    Square,
    Triangle,
}

impl ShapeKind {
    /// Whether offset `(dx, dy)` from the center falls inside a shape of radius `r`.
    fn covers(self, dx: f64, dy: f64, r: f64) -> bool {
        match self {
            ShapeKind::Disk => dx * dx + dy * dy <= r * r,
            ShapeKind::Square => dx.abs() <= 0.85 * r && dy.abs() <= 0.85 * r,
            ShapeKind::Triangle => {
                // Apex up at (0, -r), base at dy = 0.8 r spanning [-r, r].
                let t = (dy + r) / (1.8 * r);
                (0.0..=1.0).contains(&t) && dx.abs() <= t * r
            }
        }
    }
}

/// One shape and its trajectory: linear drift plus a sinusoidal wobble
/// perpendicular to it, folded back at the borders so it stays in view.
#[derive(Clone, Debug)]
pub struct ShapeTrack {
    pub kind: ShapeKind,
    pub radius: f64,
    pub color: [f64; 3],
    pub inv_depth: f64,
    /// Object id in the label map, 0 for unannotated distractors.
    pub label: u8,
    pub start: (f64, f64),
    pub velocity: (f64, f64),
    pub wobble_amp: f64,
    pub wobble_freq: f64,
    pub wobble_phase: f64,
}

fn fold(v: f64, lo: f64, hi: f64) -> f64 {
    if hi <= lo {
        return (lo + hi) / 2.0;
    }
    let span = hi - lo;
    let m = (v - lo).rem_euclid(2.0 * span);
    lo + if m > span { 2.0 * span - m } else { m }
}

impl ShapeTrack {
    /// Center `(x, y)` at time `t` before camera shake.
    pub fn center(&self, t: f64, height: usize, width: usize) -> (f64, f64) {
        let (vx, vy) = self.velocity;
        let norm = (vx * vx + vy * vy).sqrt().max(1e-9);
        let (px, py) = (-vy / norm, vx / norm);
        let s = self.wobble_amp * (self.wobble_freq * t + self.wobble_phase).sin();
        let x = self.start.0 + vx * t + px * s;
        let y = self.start.1 + vy * t + py * s;
        let m = self.radius * 0.5;
        (fold(x, m, width as f64 - m), fold(y, m, height as f64 - m))
    }
}

#[derive(Clone, Debug)]
pub struct Background {
    pub base: [f64; 3],
    pub amp: f64,
    pub freq: (f64, f64),
    pub phase: [f64; 3],
    /// Per-frame drift of the texture in pixels.
    pub drift: (f64, f64),
}

#[derive(Clone, Debug)]
pub struct Scene {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub shapes: Vec<ShapeTrack>,
    pub background: Background,
    pub shake: f64,
    pub shake_phase: (f64, f64),
    pub noise: f64,
    pub noise_seed: u64,
}

/// A rendered clip. Frames and depth maps hold exactly the values their
/// 8-bit and 16-bit PNG encodings decode to.
#[derive(Clone, Debug)]
pub struct SynthClip {
    /// `[3, H, W]` per frame.
    pub frames: Vec<Tensor>,
    /// `[1, H, W]` inverse depth per frame.
    pub depths: Vec<Tensor>,
    pub masks: Vec<MaskMap>,
    pub num_objects: usize,
}

impl Scene {
    pub fn num_objects(&self) -> usize {
        self.shapes.iter().map(|s| s.label as usize).max().unwrap_or(0)
    }

    fn shake_at(&self, t: f64) -> (f64, f64) {
        (
            self.shake * (0.7 * t + self.shake_phase.0).sin(),
            self.shake * (0.9 * t + self.shake_phase.1).cos(),
        )
    }

    pub fn render(&self) -> SynthClip {
        let (h, w) = (self.height, self.width);
        let plane = h * w;
        let mut order: Vec<&ShapeTrack> = self.shapes.iter().collect();
        order.sort_by(|a, b| a.inv_depth.total_cmp(&b.inv_depth));
        let mut rng = ChaCha8Rng::seed_from_u64(self.noise_seed);
        let noise = Normal::new(0.0, self.noise.max(0.0)).expect("non-negative std");
        let bg = &self.background;
        let num_objects = self.num_objects();

        let mut clip = SynthClip {
            frames: Vec::with_capacity(self.frames),
            depths: Vec::with_capacity(self.frames),
            masks: Vec::with_capacity(self.frames),
            num_objects,
        };
        for f in 0..self.frames {
            let t = f as f64;
            let (sx, sy) = self.shake_at(t);
            let mut rgb = vec![0.0; 3 * plane];
            let mut depth = vec![0.0; plane];
            let mut labels = vec![0u8; plane];
            for y in 0..h {
                for x in 0..w {
                    let i = y * w + x;
                    let bx = x as f64 + 0.5 - sx - bg.drift.0 * t;
                    let by = y as f64 + 0.5 - sy - bg.drift.1 * t;
                    for c in 0..3 {
                        let wave = (bg.freq.0 * bx + bg.phase[c]).sin() * (bg.freq.1 * by + bg.phase[c]).cos();
                        rgb[c * plane + i] = bg.base[c] + bg.amp * wave;
                    }
                    depth[i] = 0.1 + 0.12 * (y as f64 + 0.5 - sy) / h as f64;
                }
            }
            for s in &order {
                let (cx, cy) = s.center(t, h, w);
                let (cx, cy) = (cx + sx, cy + sy);
                let r = s.radius;
                let y0 = (cy - r).floor().max(0.0) as usize;
                let y1 = ((cy + r).ceil().max(0.0) as usize).min(h);
                let x0 = (cx - r).floor().max(0.0) as usize;
                let x1 = ((cx + r).ceil().max(0.0) as usize).min(w);
                for y in y0..y1 {
                    for x in x0..x1 {
                        let dx = x as f64 + 0.5 - cx;
                        let dy = y as f64 + 0.5 - cy;
                        if !s.kind.covers(dx, dy, r) {
                            continue;
                        }
                        let i = y * w + x;
                        let shade = 1.0 - 0.15 * dy / r;
                        for c in 0..3 {
                            rgb[c * plane + i] = s.color[c] * shade;
                        }
                        depth[i] = s.inv_depth + 0.02 * dy / r;
                        labels[i] = s.label;
                    }
                }
            }
            for v in rgb.iter_mut() {
                *v = from_u8(to_u8(*v + noise.sample(&mut rng)));
            }
            for v in depth.iter_mut() {
                *v = from_u16(to_u16(*v));
            }
            clip.frames.push(Tensor::new(vec![3, h, w], rgb).expect("sized"));
            clip.depths.push(Tensor::new(vec![1, h, w], depth).expect("sized"));
            clip.masks
                .push(MaskMap::new(h, w, labels, num_objects).expect("labels within range"));
        }
        clip
    }
}

fn random_color<R: Rng>(rng: &mut R) -> [f64; 3] {
    // Saturated hue, kept away from the muted background.
    let hue: f64 = rng.random_range(0.0..6.0);
    let x = 1.0 - (hue % 2.0 - 1.0).abs();
    let (r, g, b) = match hue as usize {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    let lo = 0.15;
    [lo + 0.75 * r, lo + 0.75 * g, lo + 0.75 * b]
}

/// Draw a random scene; the same `(cfg, seed)` always gives the same scene.
pub fn random_scene(cfg: &SynthConfig, seed: u64) -> Result<Scene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (cfg.height as f64, cfg.width as f64);
    let n_obj = rng.random_range(cfg.min_objects..=cfg.max_objects);
    let n_dis = rng.random_range(0..=cfg.max_distractors);
    let mut layers = DEPTH_LAYERS.to_vec();
    layers.shuffle(&mut rng);
    let kinds = [ShapeKind::Disk, ShapeKind::Square, ShapeKind::Triangle];

    let track = |rng: &mut ChaCha8Rng, kind, color, inv_depth, label, speed: (f64, f64)| {
        let radius = rng.random_range(cfg.min_radius..=cfg.max_radius);
        let angle = rng.random_range(0.0..2.0 * PI);
        let speed = rng.random_range(speed.0..speed.1);
        ShapeTrack {
            kind,
            radius,
            color,
            inv_depth,
            label,
            start: (rng.random_range(radius..w - radius), rng.random_range(radius..h - radius)),
            velocity: (speed * angle.cos(), speed * angle.sin()),
            wobble_amp: rng.random_range(0.0..6.0),
            wobble_freq: rng.random_range(0.2..0.5),
            wobble_phase: rng.random_range(0.0..2.0 * PI),
        }
    };

    let mut shapes = Vec::with_capacity(n_obj + n_dis);
    for k in 0..n_obj {
        let kind = kinds[rng.random_range(0..kinds.len())];
        let color = random_color(&mut rng);
        shapes.push(track(&mut rng, kind, color, layers[k], (k + 1) as u8, (0.5, 1.5)));
    }
    for k in 0..n_dis {
        let src = rng.random_range(0..n_obj);
        let (kind, mut color) = (shapes[src].kind, shapes[src].color);
        for c in color.iter_mut() {
            *c = (*c + rng.random_range(-0.03..0.03)).clamp(0.0, 1.0);
        }
        shapes.push(track(&mut rng, kind, color, layers[n_obj + k], 0, (1.0, 2.5)));
    }

    let base = rng.random_range(0.3..0.55);
    let background = Background {
        base: [0, 1, 2].map(|_| base + rng.random_range(-0.08..0.08)),
        amp: rng.random_range(0.05..0.12),
        freq: (rng.random_range(0.15..0.5), rng.random_range(0.15..0.5)),
        phase: [0, 1, 2].map(|_| rng.random_range(0.0..2.0 * PI)),
        drift: (rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)),
    };
    Ok(Scene {
        height: cfg.height,
        width: cfg.width,
        frames: cfg.frames,
        shapes,
        background,
        shake: cfg.shake,
        shake_phase: (rng.random_range(0.0..2.0 * PI), rng.random_range(0.0..2.0 * PI)),
        noise: cfg.noise,
        noise_seed: rng.random(),
    })
}

pub fn synth_clip(cfg: &SynthConfig, seed: u64) -> Result<SynthClip> {
    Ok(random_scene(cfg, seed)?.render())
}

impl SynthClip {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// The clip as a fully annotated in-memory sequence.
    pub fn to_sequence(&self, id: &str) -> Result<LoadedSequence> {
        let masks: BTreeMap<usize, MaskMap> = self.masks.iter().cloned().enumerate().collect();
        assemble_sequence(
            id,
            self.frames.clone(),
            self.depths.iter().cloned().map(Some).collect(),
            masks,
            (0..self.len()).collect(),
            self.num_objects,
        )
    }

    /// Write frames, masks, depth maps and `manifest.json` under `dir`.
    pub fn write(&self, dir: &Path, id: &str) -> Result<SequenceManifest> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut frames = Vec::with_capacity(self.len());
        for i in 0..self.len() {
            let rec = FrameRecord {
                image: PathBuf::from(format!("frames/{i:05}.png")),
                mask: Some(PathBuf::from(format!("masks/{i:05}.png"))),
                depth: Some(PathBuf::from(format!("depth/{i:05}.png"))),
            };
            png_io::write_rgb(&dir.join(&rec.image), &self.frames[i])?;
            png_io::write_mask(&dir.join(rec.mask.as_ref().expect("set")), &self.masks[i])?;
            png_io::write_depth(&dir.join(rec.depth.as_ref().expect("set")), &self.depths[i])?;
            frames.push(rec);
        }
        let manifest = SequenceManifest {
            id: id.to_string(),
            frames,
            annotated: (0..self.len()).collect(),
            num_objects: self.num_objects,
        };
        manifest.write(&dir.join(MANIFEST_FILE))?;
        Ok(manifest)
    }
}

/// Clip ids of a generated dataset.
pub fn clip_id(prefix: &str, i: usize) -> String {
    format!("{prefix}{i:04}")
}

/// In-memory dataset of `n` clips; clip `i` uses seed `seed + i`.
pub fn synth_sequences(cfg: &SynthConfig, n: usize, seed: u64, prefix: &str) -> Result<Vec<LoadedSequence>> {
    (0..n)
        .map(|i| synth_clip(cfg, seed.wrapping_add(i as u64))?.to_sequence(&clip_id(prefix, i)))
        .collect()
}

/// Write `n` clips under `dir`, one subdirectory each, plus `dataset.json`.
/// Returns the index path.
pub fn synth_dataset(cfg: &SynthConfig, dir: &Path, n: usize, seed: u64, prefix: &str) -> Result<PathBuf> {
    let mut sequences = Vec::with_capacity(n);
    for i in 0..n {
        let id = clip_id(prefix, i);
        synth_clip(cfg, seed.wrapping_add(i as u64))?.write(&dir.join(&id), &id)?;
        sequences.push(PathBuf::from(&id).join(MANIFEST_FILE));
    }
    let index = dir.join(DATASET_FILE);
    DatasetIndex { sequences }.write(&index)?;
    Ok(index)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::manifest::load_sequence;

    fn crossing_scene() -> Scene {
        let disk = |x: f64, vx: f64, inv_depth, label| ShapeTrack {
            kind: ShapeKind::Disk,
            radius: 6.0,
            color: [0.9, 0.2, 0.2],
            inv_depth,
            label,
            start: (x, 32.0),
            velocity: (vx, 0.0),
            wobble_amp: 0.0,
            wobble_freq: 0.0,
            wobble_phase: 0.0,
        };
        Scene {
            height: 64,
            width: 64,
            frames: 20,
            shapes: vec![disk(12.0, 2.0, 0.5, 1), disk(52.0, -2.0, 0.8, 2)],
            background: Background {
                base: [0.4; 3],
                amp: 0.05,
                freq: (0.3, 0.3),
                phase: [0.0; 3],
                drift: (0.0, 0.0),
            },
            shake: 0.0,
            shake_phase: (0.0, 0.0),
            noise: 0.0,
            noise_seed: 0,
        }
    }

    #[test]
    fn crossing_hides_the_far_object_and_depth_follows_the_near_one() {
        let clip = crossing_scene().render();
        let far: Vec<usize> = clip.masks.iter().map(|m| m.area(1)).collect();
        let near: Vec<usize> = clip.masks.iter().map(|m| m.area(2)).collect();
        let full = far[0];
        assert_eq!(near[0], full);
        // Centers meet at t = 10: the far disk is completely hidden.
        assert_eq!(far[10], 0);
        assert!(far.iter().any(|&a| a > 0 && a < full), "{far:?}");
        assert!(near.iter().all(|&a| a == full), "{near:?}");
        let m = &clip.masks[10];
        let d = &clip.depths[10];
        for i in 0..64 * 64 {
            if m.labels()[i] == 2 {
                assert!((d.data()[i] - 0.8).abs() < 0.021);
            }
        }
    }

    #[test]
    fn same_seed_same_clip() {
        let cfg = SynthConfig::default();
        let a = synth_clip(&cfg, 11).unwrap();
        let b = synth_clip(&cfg, 11).unwrap();
        assert_eq!(a.frames, b.frames);
        assert_eq!(a.masks, b.masks);
        let c = synth_clip(&cfg, 12).unwrap();
        assert_ne!(a.frames, c.frames);
    }

    #[test]
    fn every_target_is_visible_at_the_first_frame_of_most_clips() {
        let cfg = SynthConfig::default();
        let mut visible = 0;
        let mut total = 0;
        for seed in 0..20 {
            let clip = synth_clip(&cfg, seed).unwrap();
            assert!(clip.num_objects >= 1 && clip.num_objects <= 3);
            for k in 1..=clip.num_objects {
                total += 1;
                visible += (clip.masks[0].area(k as u8) > 0) as usize;
            }
        }
        assert!(visible * 10 >= total * 8, "{visible}/{total}");
    }

    #[test]
    fn disk_round_trip_is_exact() {
        let cfg = SynthConfig {
            frames: 3,
            height: 30,
            width: 40,
            ..SynthConfig::default()
        };
        let clip = synth_clip(&cfg, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let manifest = clip.write(dir.path(), "c").unwrap();
        assert_eq!(manifest.annotated, vec![0, 1, 2]);
        let seq = load_sequence(&dir.path().join(MANIFEST_FILE)).unwrap();
        let mem = clip.to_sequence("c").unwrap();
        for i in 0..3 {
            assert_eq!(seq.frames[i].data(), mem.frames[i].data());
            assert_eq!(seq.depths[i], mem.depths[i]);
            assert_eq!(seq.masks[&i], clip.masks[i]);
        }
        assert_eq!(seq.padded_size(), (32, 48));
    }

    #[test]
    fn shape_coverage() {
        assert!(ShapeKind::Disk.covers(0.0, 4.9, 5.0));
        assert!(!ShapeKind::Disk.covers(3.6, 3.6, 5.0));
        assert!(ShapeKind::Square.covers(4.0, -4.0, 5.0));
        assert!(ShapeKind::Triangle.covers(0.0, -4.5, 5.0));
        assert!(!ShapeKind::Triangle.covers(3.0, -4.5, 5.0));
        assert!(ShapeKind::Triangle.covers(4.5, 3.9, 5.0));
    }

    #[test]
    fn fold_reflects_into_range() {
        assert_eq!(fold(5.0, 0.0, 10.0), 5.0);
        assert_eq!(fold(12.0, 0.0, 10.0), 8.0);
        assert_eq!(fold(-3.0, 0.0, 10.0), 3.0);
        assert_eq!(fold(23.0, 0.0, 10.0), 3.0);
    }
}
