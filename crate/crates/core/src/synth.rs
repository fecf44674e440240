//! Synthetic dynamic point clouds with analytic scene flow, and a labeled
//! motion-direction benchmark whose labels are invisible to any single frame.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{invalid, Result};
use crate::geometry::{CloudSequence, Point3};
use crate::stsolver::StNormal;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaseShape {
    /// Uniform on the unit sphere surface.
    Sphere,
    /// Uniform in `[-0.5, 0.5]^3`.
    Cube,
    /// Uniform on the square `[-1, 1]^2` of the plane `z = 0`.
    Plane,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MotionKind {
    Static,
    /// Constant displacement per frame.
    Translation([f64; 3]),
    /// Rotation about the z axis by `omega` radians per frame.
    Rotation(f64),
    /// A translation whose frames are then put in a random order.
    Shuffle([f64; 3]),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MotionSpec {
    pub kind: MotionKind,
    pub base: BaseShape,
    /// Standard deviation of isotropic Gaussian position noise.
    pub noise_sigma: f64,
    /// Probability that a point of a frame is replaced by a uniform draw in
    /// the bounding box of the clean sequence.
    pub outlier_frac: f64,
}

impl MotionSpec {
    pub fn new(kind: MotionKind) -> Self {
        Self {
            kind,
            base: BaseShape::Sphere,
            noise_sigma: 0.0,
            outlier_frac: 0.0,
        }
    }

    pub fn with_base(mut self, base: BaseShape) -> Self {
        self.base = base;
        self
    }

    pub fn with_noise(mut self, sigma: f64) -> Self {
        self.noise_sigma = sigma;
        self
    }

    pub fn with_outliers(mut self, frac: f64) -> Self {
        self.outlier_frac = frac;
        self
    }

    fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.outlier_frac) {
            return Err(invalid("outlier fraction must lie in [0, 1)"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(invalid("noise sigma must be finite and non-negative"));
        }
        let finite = match self.kind {
            MotionKind::Static => true,
            MotionKind::Translation(v) | MotionKind::Shuffle(v) => v.iter().all(|x| x.is_finite()),
            MotionKind::Rotation(w) => w.is_finite(),
        };
        if !finite {
            return Err(invalid("motion parameters must be finite"));
        }
        Ok(())
    }
}

/// Ground-truth per-point, per-frame flow (displacement per frame) of the
/// generating motion, indexed `[frame][point]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowOracle {
    pub flows: Vec<Vec<Point3>>,
    /// False where a point was replaced by an outlier.
    pub inlier: Vec<Vec<bool>>,
}

pub fn sample_base(shape: BaseShape, n: usize, rng: &mut impl Rng) -> Vec<Point3> {
    (0..n)
        .map(|_| match shape {
            BaseShape::Sphere => loop {
                let g: [f64; 3] = std::array::from_fn(|_| StandardNormal.sample(rng));
                let r = (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt();
                if r > 1e-12 {
                    break g.map(|v| v / r);
                }
            },
            BaseShape::Cube => std::array::from_fn(|_| rng.random_range(-0.5..0.5)),
            BaseShape::Plane => [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 0.0],
        })
        .collect()
}

fn rotate_z(p: &Point3, angle: f64) -> Point3 {
    let (s, c) = angle.sin_cos();
    [c * p[0] - s * p[1], s * p[0] + c * p[1], p[2]]
}

/// Generates `frames` frames of `n_points` points each; frame `t` (1-based)
/// of a translation is `base + v t`, of a rotation `R_z(omega t) base`.
pub fn gen_sequence(spec: &MotionSpec, n_points: usize, frames: usize, seed: u64) -> Result<(CloudSequence, FlowOracle)> {
    spec.validate()?;
    if n_points == 0 || frames == 0 {
        return Err(invalid("need at least one point and one frame"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = sample_base(spec.base, n_points, &mut rng);
    let mut coords: Vec<Vec<Point3>> = Vec::with_capacity(frames);
    let mut flows: Vec<Vec<Point3>> = Vec::with_capacity(frames);
    for t in 1..=frames {
        let s = t as f64;
        let (pts, flow): (Vec<Point3>, Vec<Point3>) = base
            .iter()
            .map(|p| match spec.kind {
                MotionKind::Static => (*p, [0.0; 3]),
                MotionKind::Translation(v) | MotionKind::Shuffle(v) => {
                    ([p[0] + v[0] * s, p[1] + v[1] * s, p[2] + v[2] * s], v)
                }
                MotionKind::Rotation(w) => {
                    let q = rotate_z(p, w * s);
                    (q, [-w * q[1], w * q[0], 0.0])
                }
            })
            .unzip();
        coords.push(pts);
        flows.push(flow);
    }
    if let MotionKind::Shuffle(_) = spec.kind {
        let mut order: Vec<usize> = (0..frames).collect();
        if frames > 1 {
            while order.iter().enumerate().all(|(i, &o)| i == o) {
                order.shuffle(&mut rng);
            }
        }
        coords = order.iter().map(|&o| coords[o].clone()).collect();
        // the shuffled sequence has no coherent flow; report frame differences
        flows = (0..frames)
            .map(|t| {
                let (a, b) = if t + 1 < frames { (t, t + 1) } else { (t.saturating_sub(1), t) };
                coords[a]
                    .iter()
                    .zip(&coords[b])
                    .map(|(p, q)| [q[0] - p[0], q[1] - p[1], q[2] - p[2]])
                    .collect()
            })
            .collect();
    }
    let (lo, hi) = bounding_box(&coords);
    let mut inlier = vec![vec![true; n_points]; frames];
    for (t, frame) in coords.iter_mut().enumerate() {
        for (i, p) in frame.iter_mut().enumerate() {
            if spec.noise_sigma > 0.0 {
                for v in p.iter_mut() {
                    let g: f64 = StandardNormal.sample(&mut rng);
                    *v += spec.noise_sigma * g;
                }
            }
            if spec.outlier_frac > 0.0 && rng.random_bool(spec.outlier_frac) {
                *p = std::array::from_fn(|k| {
                    if hi[k] > lo[k] {
                        rng.random_range(lo[k]..hi[k])
                    } else {
                        lo[k]
                    }
                });
                inlier[t][i] = false;
            }
        }
    }
    let seq = CloudSequence::from_coords(coords, None)?;
    Ok((seq, FlowOracle { flows, inlier }))
}

fn bounding_box(frames: &[Vec<Point3>]) -> (Point3, Point3) {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in frames.iter().flatten() {
        for k in 0..3 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    (lo, hi)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrthoStats {
    pub mean: f64,
    pub p95: f64,
    /// Points that entered the statistics.
    pub count: usize,
}

/// `|cos|` between each normal and its 4D flow direction `(v, 1)`, over
/// inlier points with nonzero flow.
pub fn orthogonality_error(normals: &[Vec<StNormal>], oracle: &FlowOracle) -> Result<OrthoStats> {
    if normals.len() != oracle.flows.len()
        || normals.iter().zip(&oracle.flows).any(|(n, f)| n.len() != f.len())
    {
        return Err(invalid("normals and flow oracle differ in shape"));
    }
    let mut errs = Vec::new();
    for t in 0..normals.len() {
        for (i, n) in normals[t].iter().enumerate() {
            let v = oracle.flows[t][i];
            if !oracle.inlier[t][i] || v == [0.0; 3] {
                continue;
            }
            let f = [v[0], v[1], v[2], 1.0];
            let fnorm = f.iter().map(|x| x * x).sum::<f64>().sqrt();
            let n = n.as_slice();
            let nnorm = n.iter().map(|x| x * x).sum::<f64>().sqrt();
            let dot: f64 = n.iter().zip(f).map(|(a, b)| a * b).sum();
            errs.push((dot / (nnorm * fnorm)).abs());
        }
    }
    if errs.is_empty() {
        return Ok(OrthoStats {
            mean: 0.0,
            p95: 0.0,
            count: 0,
        });
    }
    errs.sort_by(f64::total_cmp);
    let mean = errs.iter().sum::<f64>() / errs.len() as f64;
    let rank = ((0.95 * errs.len() as f64).ceil() as usize).clamp(1, errs.len());
    Ok(OrthoStats {
        mean,
        p95: errs[rank - 1],
        count: errs.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DatasetConfig {
    pub n_classes: usize,
    pub per_class: usize,
    pub n_points: usize,
    pub frames: usize,
    /// Translation distance per frame.
    pub speed: f64,
    /// Half-width of the uniform cube the shape center is drawn from.
    pub offset: f64,
    pub noise_sigma: f64,
    pub outlier_frac: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n_classes: 4,
            per_class: 50,
            n_points: 64,
            frames: 4,
            speed: 0.15,
            offset: 1.0,
            noise_sigma: 0.0,
            outlier_frac: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MotionDataset {
    pub n_classes: usize,
    pub train: Vec<CloudSequence>,
    pub test: Vec<CloudSequence>,
}

/// Unit motion direction of class `k`: the ±x/±y axes for up to four
/// classes, the eight compass directions for eight.
pub fn class_direction(n_classes: usize, k: usize) -> Point3 {
    match n_classes {
        2 | 4 => [[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, -1.0, 0.0]][k],
        _ => {
            let a = k as f64 * std::f64::consts::FRAC_PI_4;
            [a.cos(), a.sin(), 0.0]
        }
    }
}

/// Sequences of a randomly centered unit sphere translating in one of
/// `n_classes` directions. The trajectory is centered on the sampled center
/// (frame `t` sits at `c + dir * speed * (t - (T+1)/2)`), so the sequence
/// mean position carries no label information; within a sequence the frame
/// positions under direction `d` and `-d` form the same set.
pub fn gen_motion_dataset(cfg: &DatasetConfig, seed: u64) -> Result<MotionDataset> {
    if ![2, 4, 8].contains(&cfg.n_classes) {
        return Err(invalid("class count must be 2, 4 or 8"));
    }
    if cfg.per_class == 0 || cfg.n_points == 0 || cfg.frames == 0 {
        return Err(invalid("dataset dimensions must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_train = (cfg.per_class * 7).div_ceil(10);
    let mut train = Vec::new();
    let mut test = Vec::new();
    let mid = (cfg.frames as f64 + 1.0) / 2.0;
    for k in 0..cfg.n_classes {
        let dir = class_direction(cfg.n_classes, k);
        for s in 0..cfg.per_class {
            let center: Point3 = std::array::from_fn(|_| rng.random_range(-cfg.offset..=cfg.offset));
            let spec = MotionSpec::new(MotionKind::Translation(dir.map(|d| d * cfg.speed)))
                .with_noise(cfg.noise_sigma)
                .with_outliers(cfg.outlier_frac);
            let (seq, _) = gen_sequence(&spec, cfg.n_points, cfg.frames, rng.random())?;
            let shift: Point3 = std::array::from_fn(|j| center[j] - dir[j] * cfg.speed * mid);
            let coords = seq
                .to_coords()
                .into_iter()
                .map(|f| f.into_iter().map(|p| [p[0] + shift[0], p[1] + shift[1], p[2] + shift[2]]).collect())
                .collect();
            let seq = CloudSequence::from_coords(coords, Some(k))?;
            if s < n_train {
                train.push(seq);
            } else {
                test.push(seq);
            }
        }
    }
    Ok(MotionDataset {
        n_classes: cfg.n_classes,
        train,
        test,
    })
}
