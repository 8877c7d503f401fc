//! Pseudo-video sampling: short ordered clips drawn from the annotated
//! frames of a sequence, with random gaps.

use rand::Rng;

use crate::error::{Error, Result};

/// Draw `n_frames` strictly increasing entries of `annotated` whose
/// consecutive positions differ by at most `max_skip`.
///
/// The start is uniform over positions that leave room for the clip; each
/// gap is uniform in `1..=max_skip`, capped so the remaining frames still fit.
pub fn sample_pseudo_video<R: Rng + ?Sized>(
    annotated: &[usize],
    n_frames: usize,
    max_skip: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if n_frames < 2 {
        return Err(Error::config("pseudo-video needs at least two frames"));
    }
    if max_skip == 0 {
        return Err(Error::config("max_skip must be at least 1"));
    }
    let len = annotated.len();
    if len < n_frames {
        return Err(Error::config(format!(
            "cannot sample {n_frames} frames from {len} annotated frames"
        )));
    }
    let mut pos = rng.random_range(0..=len - n_frames);
    let mut out = Vec::with_capacity(n_frames);
    out.push(annotated[pos]);
    for left in (1..n_frames).rev() {
        // `left` frames still to pick after this one, including it.
        let room = len - 1 - pos - (left - 1);
        let gap = rng.random_range(1..=max_skip.min(room));
        pos += gap;
        out.push(annotated[pos]);
    }
    Ok(out)
}
