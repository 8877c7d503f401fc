//! Region Jaccard (J), boundary F-measure (F) and their mean, per sequence
//! and over a dataset.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::MaskMap;

fn check_pair(pred: &MaskMap, gt: &MaskMap, obj: u8) -> Result<()> {
    if (pred.height(), pred.width()) != (gt.height(), gt.width()) {
        return Err(Error::shape(format!(
            "prediction {}x{} vs ground truth {}x{}",
            pred.height(),
            pred.width(),
            gt.height(),
            gt.width()
        )));
    }
    if obj == 0 || obj as usize > gt.num_objects().max(pred.num_objects()) {
        return Err(Error::Eval(format!(
            "object {obj} out of range 1..={}",
            gt.num_objects().max(pred.num_objects())
        )));
    }
    Ok(())
}

/// `|P ∩ G| / |P ∪ G|` for pixels labeled `obj`; 1 when both are empty.
pub fn jaccard(pred: &MaskMap, gt: &MaskMap, obj: u8) -> Result<f64> {
    check_pair(pred, gt, obj)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.labels().iter().zip(gt.labels()) {
        let (p, g) = (p == obj, g == obj);
        inter += (p && g) as usize;
        union += (p || g) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Default boundary tolerance: `ceil(0.008 * diagonal)` pixels.
pub fn default_tolerance(height: usize, width: usize) -> usize {
    (0.008 * ((height * height + width * width) as f64).sqrt()).ceil() as usize
}

/// Object pixels with at least one 4-neighbor outside the object. Pixels
/// beyond the image edge count as outside.
pub fn boundary(mask: &MaskMap, obj: u8) -> Vec<bool> {
    let (h, w) = (mask.height(), mask.width());
    let inside = |y: isize, x: isize| {
        y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && mask.get(y as usize, x as usize) == obj
    };
    let mut out = vec![false; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            if inside(y, x)
                && !(inside(y - 1, x) && inside(y + 1, x) && inside(y, x - 1) && inside(y, x + 1))
            {
                out[y as usize * w + x as usize] = true;
            }
        }
    }
    out
}

fn dilate(b: &[bool], h: usize, w: usize, tol: usize) -> Vec<bool> {
    let t = tol as isize;
    let offsets: Vec<(isize, isize)> = (-t..=t)
        .flat_map(|dy| (-t..=t).map(move |dx| (dy, dx)))
        .filter(|(dy, dx)| dy * dy + dx * dx <= t * t)
        .collect();
    let mut out = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            if !b[y * w + x] {
                continue;
            }
            for &(dy, dx) in &offsets {
                let (yy, xx) = (y as isize + dy, x as isize + dx);
                if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                    out[yy as usize * w + xx as usize] = true;
                }
            }
        }
    }
    out
}

/// Boundary F-measure with matching tolerance `tol` pixels (Euclidean).
///
/// 1 when both boundaries are empty, 0 when exactly one is.
pub fn boundary_f(pred: &MaskMap, gt: &MaskMap, obj: u8, tol: usize) -> Result<f64> {
    check_pair(pred, gt, obj)?;
    let (h, w) = (gt.height(), gt.width());
    let bp = boundary(pred, obj);
    let bg = boundary(gt, obj);
    let np = bp.iter().filter(|&&b| b).count();
    let ng = bg.iter().filter(|&&b| b).count();
    if np == 0 && ng == 0 {
        return Ok(1.0);
    }
    if np == 0 || ng == 0 {
        return Ok(0.0);
    }
    let dg = dilate(&bg, h, w, tol);
    let dp = dilate(&bp, h, w, tol);
    let matched_p = bp.iter().zip(&dg).filter(|(&b, &d)| b && d).count();
    let matched_g = bg.iter().zip(&dp).filter(|(&b, &d)| b && d).count();
    let precision = matched_p as f64 / np as f64;
    let recall = matched_g as f64 / ng as f64;
    Ok(if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectScore {
    pub j: f64,
    pub f: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceScore {
    pub id: String,
    pub objects: Vec<ObjectScore>,
    pub j: f64,
    pub f: f64,
    pub jf: f64,
    pub evaluated_frames: Vec<usize>,
}

fn mean(xs: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = xs.len();
    xs.sum::<f64>() / n as f64
}

impl SequenceScore {
    /// Aggregate per-object means: J and F are object means, J&F their average.
    pub fn from_objects(id: &str, objects: Vec<ObjectScore>, evaluated_frames: Vec<usize>) -> Result<Self> {
        if objects.is_empty() {
            return Err(Error::Eval(format!("sequence `{id}` has no objects to score")));
        }
        let j = mean(objects.iter().map(|o| o.j));
        let f = mean(objects.iter().map(|o| o.f));
        Ok(SequenceScore {
            id: id.to_string(),
            objects,
            j,
            f,
            jf: (j + f) / 2.0,
            evaluated_frames,
        })
    }
}

/// Score predictions on every annotated frame except the first (the given
/// reference). `tol` defaults to [`default_tolerance`] of the GT size.
pub fn evaluate_sequence(
    id: &str,
    preds: &BTreeMap<usize, MaskMap>,
    gts: &BTreeMap<usize, MaskMap>,
    annotated: &[usize],
    tol: Option<usize>,
) -> Result<SequenceScore> {
    let first = *annotated
        .first()
        .ok_or_else(|| Error::Eval(format!("sequence `{id}` has no annotated frames")))?;
    let num_objects = gts
        .get(&first)
        .ok_or_else(|| Error::Eval(format!("sequence `{id}` lacks ground truth at frame {first}")))?
        .num_objects();
    let scored: Vec<usize> = annotated.iter().copied().filter(|&i| i != first).collect();
    let mut sums = vec![(0.0, 0.0); num_objects];
    for &i in &scored {
        let gt = gts
            .get(&i)
            .ok_or_else(|| Error::Eval(format!("sequence `{id}` lacks ground truth at frame {i}")))?;
        let pred = preds
            .get(&i)
            .ok_or_else(|| Error::Eval(format!("sequence `{id}` has no prediction for frame {i}")))?;
        let tol = tol.unwrap_or_else(|| default_tolerance(gt.height(), gt.width()));
        for (k, s) in sums.iter_mut().enumerate() {
            let obj = (k + 1) as u8;
            s.0 += jaccard(pred, gt, obj)?;
            s.1 += boundary_f(pred, gt, obj, tol)?;
        }
    }
    if scored.is_empty() {
        return Err(Error::Eval(format!(
            "sequence `{id}` has no annotated frames beyond the reference"
        )));
    }
    let n = scored.len() as f64;
    let objects = sums
        .into_iter()
        .map(|(j, f)| ObjectScore { j: j / n, f: f / n })
        .collect();
    SequenceScore::from_objects(id, objects, scored)
}

/// Dataset aggregate: unweighted means over sequences.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetReport {
    pub averaging: String,
    pub j: f64,
    pub f: f64,
    pub jf: f64,
    pub sequences: Vec<SequenceScore>,
}

pub const AVERAGING_NOTE: &str = "per-object means within a sequence, unweighted mean over sequences";

pub fn evaluate_dataset(scores: Vec<SequenceScore>) -> Result<DatasetReport> {
    if scores.is_empty() {
        return Err(Error::Eval("no sequences to aggregate".into()));
    }
    let j = mean(scores.iter().map(|s| s.j));
    let f = mean(scores.iter().map(|s| s.f));
    let jf = mean(scores.iter().map(|s| s.jf));
    Ok(DatasetReport {
        averaging: AVERAGING_NOTE.into(),
        j,
        f,
        jf,
        sequences: scores,
    })
}

/// Fixed-width text table; scores are printed as percentages.
pub fn format_table(columns: &[&str], rows: &[(Vec<String>, [f64; 3])]) -> String {
    let mut header: Vec<String> = columns.iter().map(|c| c.to_string()).collect();
    header.extend(["J&F", "J", "F"].map(String::from));
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|(labels, s)| {
            let mut r = labels.clone();
            r.extend(s.iter().map(|v| format!("{:.1}", 100.0 * v)));
            r
        })
        .collect();
    let widths: Vec<usize> = (0..header.len())
        .map(|c| {
            body.iter()
                .map(|r| r.get(c).map_or(0, String::len))
                .chain([header[c].len()])
                .max()
                .unwrap_or(0)
        })
        .collect();
    let mut out = String::new();
    let line = |out: &mut String, cells: &[String]| {
        let parts: Vec<String> = cells
            .iter()
            .zip(&widths)
            .map(|(c, &w)| format!("{c:>w$}"))
            .collect();
        let _ = writeln!(out, "{}", parts.join("  "));
    };
    line(&mut out, &header);
    let rule: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
    line(&mut out, &rule);
    for r in &body {
        line(&mut out, r);
    }
    out
}

impl DatasetReport {
    /// Per-sequence rows followed by the mean.
    pub fn table(&self) -> String {
        let mut rows: Vec<(Vec<String>, [f64; 3])> = self
            .sequences
            .iter()
            .map(|s| (vec![s.id.clone()], [s.jf, s.j, s.f]))
            .collect();
        rows.push((vec!["mean".into()], [self.jf, self.j, self.f]));
        format!("# {}\n{}", self.averaging, format_table(&["Sequence"], &rows))
    }
}
