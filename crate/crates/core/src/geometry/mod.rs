//! Point cloud sequence containers and spatio-temporal neighbor indexing.
//!
//! Frames are addressed by their position in the sequence (0-based) in every
//! API; the 1-based `timestamp` is the frame index used as the time
//! coordinate when fitting space-time surfaces.

mod index;
mod sample;

pub use index::{KdTree, NeighborSet, StIndex, DEFAULT_K_MAX};
pub use sample::{farthest_point_sample, sample_sequence};

use crate::error::{invalid, Result};

pub type Point3 = [f64; 3];

/// Squared Euclidean distance. Every radius test in the crate goes through
/// this function so that index queries and linear scans agree bit-for-bit.
#[inline]
pub fn dist2(a: &Point3, b: &Point3) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointFrame {
    coords: Vec<Point3>,
    timestamp: usize,
}

impl PointFrame {
    pub fn new(coords: Vec<Point3>, timestamp: usize) -> Result<Self> {
        if coords.is_empty() {
            return Err(invalid(format!("frame {timestamp} has no points")));
        }
        if let Some(p) = coords.iter().find(|p| p.iter().any(|c| !c.is_finite())) {
            return Err(invalid(format!(
                "frame {timestamp} has a non-finite coordinate {p:?}"
            )));
        }
        Ok(Self { coords, timestamp })
    }

    pub fn coords(&self) -> &[Point3] {
        &self.coords
    }

    pub fn timestamp(&self) -> usize {
        self.timestamp
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn centroid(&self) -> Point3 {
        let n = self.coords.len() as f64;
        let mut c = [0.0; 3];
        for p in &self.coords {
            for k in 0..3 {
                c[k] += p[k];
            }
        }
        c.map(|v| v / n)
    }
}

/// An ordered list of frames `P_1 .. P_T` with an optional class label.
#[derive(Debug, Clone, PartialEq)]
pub struct CloudSequence {
    frames: Vec<PointFrame>,
    label: Option<usize>,
}

impl CloudSequence {
    pub fn new(frames: Vec<PointFrame>, label: Option<usize>) -> Result<Self> {
        if frames.is_empty() {
            return Err(invalid("sequence has no frames"));
        }
        for (pos, f) in frames.iter().enumerate() {
            if f.timestamp != pos + 1 {
                return Err(invalid(format!(
                    "frame at position {pos} has timestamp {}, expected {}",
                    f.timestamp,
                    pos + 1
                )));
            }
        }
        Ok(Self { frames, label })
    }

    /// Builds a sequence from raw per-frame coordinates, numbering frames 1..T.
    pub fn from_coords(frames: Vec<Vec<Point3>>, label: Option<usize>) -> Result<Self> {
        let frames = frames
            .into_iter()
            .enumerate()
            .map(|(pos, c)| PointFrame::new(c, pos + 1))
            .collect::<Result<Vec<_>>>()?;
        Self::new(frames, label)
    }

    pub fn frames(&self) -> &[PointFrame] {
        &self.frames
    }

    pub fn frame(&self, pos: usize) -> &PointFrame {
        &self.frames[pos]
    }

    /// Number of frames `T`.
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn label(&self) -> Option<usize> {
        self.label
    }

    pub fn with_label(mut self, label: Option<usize>) -> Self {
        self.label = label;
        self
    }

    pub fn point(&self, frame: usize, index: usize) -> &Point3 {
        &self.frames[frame].coords[index]
    }

    pub fn total_points(&self) -> usize {
        self.frames.iter().map(PointFrame::len).sum()
    }

    pub fn to_coords(&self) -> Vec<Vec<Point3>> {
        self.frames.iter().map(|f| f.coords.clone()).collect()
    }

    /// Centers the whole sequence at its pooled centroid and scales it so the
    /// farthest point lies on the unit sphere. One transform is shared by all
    /// frames, so motion is preserved up to the uniform scale.
    pub fn normalized_unit_sphere(&self) -> Self {
        let n = self.total_points() as f64;
        let mut c = [0.0; 3];
        for f in &self.frames {
            for p in &f.coords {
                for k in 0..3 {
                    c[k] += p[k];
                }
            }
        }
        let c = c.map(|v| v / n);
        let r = self
            .frames
            .iter()
            .flat_map(|f| f.coords.iter())
            .map(|p| dist2(p, &c))
            .fold(0.0_f64, f64::max)
            .sqrt();
        let scale = if r > 0.0 { 1.0 / r } else { 1.0 };
        let frames = self
            .frames
            .iter()
            .map(|f| PointFrame {
                coords: f
                    .coords
                    .iter()
                    .map(|p| [(p[0] - c[0]) * scale, (p[1] - c[1]) * scale, (p[2] - c[2]) * scale])
                    .collect(),
                timestamp: f.timestamp,
            })
            .collect();
        Self {
            frames,
            label: self.label,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_empty_and_non_finite() {
        assert!(PointFrame::new(vec![], 1).is_err());
        assert!(PointFrame::new(vec![[0.0, f64::NAN, 0.0]], 1).is_err());
        assert!(CloudSequence::new(vec![], None).is_err());
    }

    #[test]
    fn timestamps_must_count_from_one() {
        let f = PointFrame::new(vec![[0.0; 3]], 2).unwrap();
        assert!(CloudSequence::new(vec![f], None).is_err());
        let seq = CloudSequence::from_coords(vec![vec![[0.0; 3]]; 3], Some(1)).unwrap();
        let ts: Vec<_> = seq.frames().iter().map(PointFrame::timestamp).collect();
        assert_eq!(ts, vec![1, 2, 3]);
    }

    #[test]
    fn normalization_fits_unit_sphere() {
        let seq = CloudSequence::from_coords(
            vec![vec![[10.0, 0.0, 0.0], [12.0, 0.0, 0.0]], vec![[14.0, 0.0, 0.0]]],
            None,
        )
        .unwrap();
        let n = seq.normalized_unit_sphere();
        let max = n
            .frames()
            .iter()
            .flat_map(|f| f.coords().iter())
            .map(|p| dist2(p, &[0.0; 3]).sqrt())
            .fold(0.0, f64::max);
        assert!((max - 1.0).abs() < 1e-12);
        assert_eq!(n.point(0, 0)[0], -1.0);
    }
}
