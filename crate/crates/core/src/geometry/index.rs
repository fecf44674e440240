use super::{dist2, CloudSequence, Point3};
use crate::error::{invalid, Result};

/// Default neighborhood cap for the learned unit.
pub const DEFAULT_K_MAX: usize = 32;

const LEAF_SIZE: usize = 8;

/// Static kd-tree over the points of one frame, answering exact radius queries.
///
/// Nodes are laid out implicitly: the range `[lo, hi)` of `order` is split at
/// `mid = (lo + hi) / 2` along `axes[mid]`.
#[derive(Debug, Clone)]
pub struct KdTree {
    points: Vec<Point3>,
    order: Vec<usize>,
    axes: Vec<u8>,
}

impl KdTree {
    pub fn build(points: &[Point3]) -> Self {
        let mut order: Vec<usize> = (0..points.len()).collect();
        let mut axes = vec![0u8; points.len()];
        Self::build_range(points, &mut order, &mut axes, 0, points.len());
        Self {
            points: points.to_vec(),
            order,
            axes,
        }
    }

    fn build_range(points: &[Point3], order: &mut [usize], axes: &mut [u8], lo: usize, hi: usize) {
        if hi - lo <= LEAF_SIZE {
            return;
        }
        let mut min = [f64::INFINITY; 3];
        let mut max = [f64::NEG_INFINITY; 3];
        for &i in &order[lo..hi] {
            for k in 0..3 {
                min[k] = min[k].min(points[i][k]);
                max[k] = max[k].max(points[i][k]);
            }
        }
        let axis = (0..3)
            .max_by(|&a, &b| (max[a] - min[a]).total_cmp(&(max[b] - min[b])))
            .unwrap_or(0);
        let mid = (lo + hi) / 2;
        order[lo..hi].select_nth_unstable_by(mid - lo, |&a, &b| {
            points[a][axis].total_cmp(&points[b][axis])
        });
        axes[mid] = axis as u8;
        Self::build_range(points, order, axes, lo, mid);
        Self::build_range(points, order, axes, mid + 1, hi);
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    /// Calls `visit(index, squared_distance)` for every point with
    /// `dist2(point, query) <= radius * radius`, in unspecified order.
    pub fn for_each_within(&self, query: &Point3, radius: f64, mut visit: impl FnMut(usize, f64)) {
        let r2 = radius * radius;
        self.visit_range(query, r2, 0, self.points.len(), &mut visit);
    }

    fn visit_range(
        &self,
        q: &Point3,
        r2: f64,
        lo: usize,
        hi: usize,
        visit: &mut impl FnMut(usize, f64),
    ) {
        if hi - lo <= LEAF_SIZE {
            for &i in &self.order[lo..hi] {
                let d = dist2(&self.points[i], q);
                if d <= r2 {
                    visit(i, d);
                }
            }
            return;
        }
        let mid = (lo + hi) / 2;
        let i = self.order[mid];
        let split = self.points[i];
        let d = dist2(&split, q);
        if d <= r2 {
            visit(i, d);
        }
        let axis = self.axes[mid] as usize;
        let diff = q[axis] - split[axis];
        // Pruning is exact: a point on the far side has at least this
        // per-axis gap, and dist2 is a sum of nonnegative terms.
        if diff <= 0.0 || diff * diff <= r2 {
            self.visit_range(q, r2, lo, mid, visit);
        }
        if diff >= 0.0 || diff * diff <= r2 {
            self.visit_range(q, r2, mid + 1, hi, visit);
        }
    }

    /// Nearest point to `query` as `(index, squared_distance)`; ties go to the
    /// lower index. `None` for an empty tree.
    pub fn nearest(&self, query: &Point3) -> Option<(usize, f64)> {
        let mut best: Option<(usize, f64)> = None;
        self.nearest_range(query, 0, self.points.len(), &mut best);
        best
    }

    fn nearest_range(&self, q: &Point3, lo: usize, hi: usize, best: &mut Option<(usize, f64)>) {
        let offer = |i: usize, d: f64, best: &mut Option<(usize, f64)>| match best {
            Some((bi, bd)) if d > *bd || (d == *bd && i > *bi) => {}
            _ => *best = Some((i, d)),
        };
        if hi - lo <= LEAF_SIZE {
            for &i in &self.order[lo..hi] {
                offer(i, dist2(&self.points[i], q), best);
            }
            return;
        }
        let mid = (lo + hi) / 2;
        let i = self.order[mid];
        offer(i, dist2(&self.points[i], q), best);
        let axis = self.axes[mid] as usize;
        let diff = q[axis] - self.points[i][axis];
        let (near, far) = if diff <= 0.0 {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        self.nearest_range(q, near.0, near.1, best);
        if best.is_none_or(|(_, bd)| diff * diff <= bd) {
            self.nearest_range(q, far.0, far.1, best);
        }
    }
}

/// Space-time neighbors of one center point.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborSet {
    /// `(frame position, point index)` of the center.
    pub center: (usize, usize),
    /// Members as `(frame position, point index)`; the center comes first.
    pub members: Vec<(usize, usize)>,
    pub dr: f64,
    pub dt: usize,
}

impl NeighborSet {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

/// Per-frame kd-trees over a sequence. Immutable after build.
#[derive(Debug, Clone)]
pub struct StIndex {
    trees: Vec<KdTree>,
    timestamps: Vec<usize>,
}

impl StIndex {
    pub fn build(seq: &CloudSequence) -> Result<Self> {
        if seq.is_empty() {
            return Err(invalid("cannot index an empty sequence"));
        }
        Ok(Self {
            trees: seq.frames().iter().map(|f| KdTree::build(f.coords())).collect(),
            timestamps: seq.frames().iter().map(|f| f.timestamp()).collect(),
        })
    }

    /// Builds an index from raw per-frame coordinate lists (frames numbered 1..T).
    pub fn from_frames(frames: &[Vec<Point3>]) -> Result<Self> {
        if frames.is_empty() {
            return Err(invalid("cannot index an empty sequence"));
        }
        Ok(Self {
            trees: frames.iter().map(|f| KdTree::build(f)).collect(),
            timestamps: (1..=frames.len()).collect(),
        })
    }

    pub fn frame_count(&self) -> usize {
        self.trees.len()
    }

    pub fn frame_len(&self, frame: usize) -> usize {
        self.trees[frame].len()
    }

    pub fn entry_count(&self) -> usize {
        self.trees.iter().map(KdTree::len).sum()
    }

    pub fn timestamp(&self, frame: usize) -> usize {
        self.timestamps[frame]
    }

    pub fn point(&self, frame: usize, index: usize) -> &Point3 {
        &self.trees[frame].points()[index]
    }

    pub fn tree(&self, frame: usize) -> &KdTree {
        &self.trees[frame]
    }

    /// Space-time ball query around point `index` of frame `frame`.
    ///
    /// Members satisfy `|t - tau| <= dt` and `dist2 <= dr^2`. The center is
    /// listed first; the rest are sorted by ascending spatial distance, ties by
    /// `(frame, index)`, and the whole set is truncated to `k_max` entries
    /// (`k_max >= 1`; pass `usize::MAX` for no cap).
    pub fn query(&self, center: (usize, usize), dr: f64, dt: usize, k_max: usize) -> NeighborSet {
        let (t, i) = center;
        let q = *self.point(t, i);
        let lo = t.saturating_sub(dt);
        let hi = (t + dt).min(self.trees.len() - 1);
        let mut found: Vec<(f64, usize, usize)> = Vec::new();
        for tau in lo..=hi {
            self.trees[tau].for_each_within(&q, dr, |j, d| {
                if (tau, j) != center {
                    found.push((d, tau, j));
                }
            });
        }
        found.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let keep = k_max.max(1) - 1;
        let mut members = Vec::with_capacity(found.len().min(keep) + 1);
        members.push(center);
        members.extend(found.into_iter().take(keep).map(|(_, tau, j)| (tau, j)));
        NeighborSet {
            center,
            members,
            dr,
            dt,
        }
    }
}
