use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{dist2, CloudSequence, Point3, PointFrame};
use crate::error::Result;

/// Greedy farthest point sampling of `k` indices starting from `start`.
///
/// Each step picks the point maximizing the distance to the selected set;
/// ties go to the lowest index. When `k >= points.len()` every index is
/// returned (in selection order).
pub fn farthest_point_sample(points: &[Point3], k: usize, start: usize) -> Vec<usize> {
    let n = points.len();
    let k = k.min(n);
    if k == 0 {
        return Vec::new();
    }
    let mut selected = Vec::with_capacity(k);
    let mut min_d = vec![f64::INFINITY; n];
    let mut current = start;
    for _ in 0..k {
        selected.push(current);
        min_d[current] = f64::NEG_INFINITY;
        let c = points[current];
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for (i, p) in points.iter().enumerate() {
            if min_d[i] == f64::NEG_INFINITY {
                continue;
            }
            let d = dist2(p, &c);
            if d < min_d[i] {
                min_d[i] = d;
            }
            if min_d[i] > best_d {
                best_d = min_d[i];
                best = i;
            }
        }
        if best == usize::MAX {
            break;
        }
        current = best;
    }
    selected
}

/// Resamples a sequence to `n_frames` uniformly strided frames of exactly
/// `n_points` points each.
///
/// Frame `k` of the output is input frame `floor(k * T / n_frames)`, and the
/// output is renumbered 1..n_frames. Frames with at least `n_points` points
/// are reduced by farthest point sampling from a seeded random start; smaller
/// frames keep every point and are padded with uniform draws (with
/// replacement). Deterministic given `seed`.
pub fn sample_sequence(
    seq: &CloudSequence,
    n_frames: usize,
    n_points: usize,
    seed: u64,
) -> Result<CloudSequence> {
    let n_frames = n_frames.max(1);
    let n_points = n_points.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total = seq.len();
    let mut frames = Vec::with_capacity(n_frames);
    for k in 0..n_frames {
        let src = seq.frame(k * total / n_frames).coords();
        let coords: Vec<Point3> = if src.len() >= n_points {
            let start = rng.random_range(0..src.len());
            farthest_point_sample(src, n_points, start)
                .into_iter()
                .map(|i| src[i])
                .collect()
        } else {
            let mut c = src.to_vec();
            while c.len() < n_points {
                c.push(src[rng.random_range(0..src.len())]);
            }
            c
        };
        frames.push(PointFrame::new(coords, k + 1)?);
    }
    CloudSequence::new(frames, seq.label())
}
