//! Physical-space fitting of space-time tangent planes `A x + b = tau`.
//!
//! Time is measured relative to the center frame (`tau' = tau - t`), so `b`
//! is the offset from the center time and a motionless neighborhood fits
//! `A = 0, b = 0`.

use rayon::prelude::*;

use crate::error::{invalid, Result};
use crate::geometry::{CloudSequence, NeighborSet, Point3, StIndex};
use crate::tensor::linalg::Lu;

/// Lower clip of refined weights; keeps every system at least weakly posed.
pub const MIN_WEIGHT: f64 = 1e-4;
/// Consistency constant turning a median absolute residual into a Gaussian
/// scale estimate.
pub const MAD_SCALE: f64 = 1.4826;
/// Additive floor of the residual scale.
pub const SIGMA_EPS: f64 = 1e-9;
pub const DEFAULT_MAX_ITERS: usize = 10;
/// Angular convergence tolerance between successive normals, radians.
pub const DEFAULT_TOL: f64 = 1e-4;

const REFINE_STEPS: usize = 3;

/// Ridge added to a `(D+1) x (D+1)` normal matrix with the given trace.
pub fn ridge_lambda(trace: f64, size: usize) -> f64 {
    1e-8 * trace / size as f64 + 1e-12
}

#[derive(Debug, Clone, PartialEq)]
pub struct TangentPlane {
    /// Time-per-length slope, one entry per spatial (or feature) dimension.
    pub a: Vec<f64>,
    pub b: f64,
}

impl TangentPlane {
    pub fn dim(&self) -> usize {
        self.a.len()
    }

    /// `A x + b`, the fitted time at `x`.
    pub fn eval(&self, x: &[f64]) -> f64 {
        self.a.iter().zip(x).map(|(a, x)| a * x).sum::<f64>() + self.b
    }

    /// The unnormalized normal `(A, -1)`.
    pub fn raw_normal(&self) -> Vec<f64> {
        let mut n = self.a.clone();
        n.push(-1.0);
        n
    }
}

/// Unit normal of a tangent plane; the time component is always negative.
#[derive(Debug, Clone, PartialEq)]
pub struct StNormal(Vec<f64>);

impl StNormal {
    /// Normalizes `v`, flipping it if needed so the time component is
    /// non-positive.
    pub fn from_raw(v: &[f64]) -> Self {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let sign = if v.last().is_some_and(|&t| t > 0.0) { -1.0 } else { 1.0 };
        Self(v.iter().map(|x| sign * x / norm).collect())
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    /// Angle to `other` in radians, accurate for nearly parallel normals.
    pub fn angle_to(&self, other: &StNormal) -> f64 {
        let chord = self
            .0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        2.0 * (chord / 2.0).min(1.0).asin()
    }
}

/// Per-neighbor weights in `[0, 1]`, not all zero.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector(Vec<f64>);

impl WeightVector {
    pub fn new(w: Vec<f64>) -> Result<Self> {
        if w.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(invalid("weights must lie in [0, 1]"));
        }
        if !w.iter().any(|&v| v > 0.0) {
            return Err(invalid("at least one weight must be positive"));
        }
        Ok(Self(w))
    }

    pub fn ones(n: usize) -> Self {
        Self(vec![1.0; n])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub plane: TangentPlane,
    pub normal: StNormal,
    /// `A x_j + b - tau'_j`, in neighbor order.
    pub residuals: Vec<f64>,
}

/// Coordinates and times of the points a [`NeighborSet`] refers to.
pub trait PointAccess {
    fn coords(&self, frame: usize, index: usize) -> Point3;
    fn time(&self, frame: usize) -> f64;
}

impl PointAccess for StIndex {
    fn coords(&self, frame: usize, index: usize) -> Point3 {
        *self.point(frame, index)
    }

    fn time(&self, frame: usize) -> f64 {
        self.timestamp(frame) as f64
    }
}

impl PointAccess for CloudSequence {
    fn coords(&self, frame: usize, index: usize) -> Point3 {
        *self.point(frame, index)
    }

    fn time(&self, frame: usize) -> f64 {
        self.frame(frame).timestamp() as f64
    }
}

/// Weighted least squares `argmin sum_j w_j (A x_j + b - tau_j)^2`.
///
/// `x` is row-major `n x cols` with an all-ones last column. The normal
/// system is solved with a small ridge and then polished by iterative
/// refinement against the unregularized matrix, so the returned coefficients
/// satisfy the true normal equations to rounding level whenever they are
/// well conditioned and stay bounded when they are not.
pub fn solve_weighted_ls(x: &[f64], cols: usize, w: &WeightVector, tau: &[f64]) -> Result<TangentPlane> {
    let n = tau.len();
    if cols < 1 || n < 1 || x.len() != n * cols || w.len() != n {
        return Err(invalid(format!(
            "weighted LS: {} design entries, {cols} columns, {} weights, {n} targets",
            x.len(),
            w.len()
        )));
    }
    if x.iter().chain(tau).any(|v| !v.is_finite()) {
        return Err(invalid("weighted LS: non-finite input"));
    }
    if (0..n).any(|j| x[j * cols + cols - 1] != 1.0) {
        return Err(invalid("weighted LS: last design column must be all ones"));
    }
    let w = w.as_slice();
    let mut m = vec![0.0; cols * cols];
    let mut rhs = vec![0.0; cols];
    for j in 0..n {
        if w[j] == 0.0 {
            continue;
        }
        let row = &x[j * cols..(j + 1) * cols];
        for r in 0..cols {
            let wr = w[j] * row[r];
            rhs[r] += wr * tau[j];
            for c in 0..cols {
                m[r * cols + c] += wr * row[c];
            }
        }
    }
    let trace: f64 = (0..cols).map(|k| m[k * cols + k]).sum();
    let lambda = ridge_lambda(trace, cols);
    let mut reg = m.clone();
    for k in 0..cols {
        reg[k * cols + k] += lambda;
    }
    let lu = Lu::factor(&reg, cols)?;
    let mut coef = lu.solve(&rhs);
    for _ in 0..REFINE_STEPS {
        let resid: Vec<f64> = (0..cols)
            .map(|r| rhs[r] - (0..cols).map(|c| m[r * cols + c] * coef[c]).sum::<f64>())
            .collect();
        let delta = lu.solve(&resid);
        for (c, d) in coef.iter_mut().zip(delta) {
            *c += d;
        }
    }
    let b = coef.pop().expect("cols >= 1");
    Ok(TangentPlane { a: coef, b })
}

/// `(A, -1) / ||(A, -1)||`.
pub fn compute_normal(plane: &TangentPlane) -> StNormal {
    let raw = plane.raw_normal();
    let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
    StNormal(raw.into_iter().map(|v| v / norm).collect())
}

/// Fits the tangent plane of a neighborhood under the given weights.
///
/// The system is solved in coordinates centered at the weighted means of
/// position and `tau'`, so the ridge only shrinks the slope. This leaves
/// well-posed fits unchanged and sends the slope of a degenerate
/// neighborhood (e.g. one point seen in several frames) to exactly zero.
pub fn fit_plane(neigh: &NeighborSet, pts: &impl PointAccess, w: &WeightVector) -> Result<FitResult> {
    let n = neigh.len();
    if w.len() != n {
        return Err(invalid(format!("{} weights for {n} neighbors", w.len())));
    }
    let t0 = pts.time(neigh.center.0);
    let raw: Vec<(Point3, f64)> = neigh
        .members
        .iter()
        .map(|&(f, j)| (pts.coords(f, j), pts.time(f) - t0))
        .collect();
    let wsum: f64 = w.as_slice().iter().sum();
    let mut mx = [0.0; 3];
    let mut mt = 0.0;
    for ((p, t), &wj) in raw.iter().zip(w.as_slice()) {
        for k in 0..3 {
            mx[k] += wj * p[k] / wsum;
        }
        mt += wj * t / wsum;
    }
    let mut x = Vec::with_capacity(n * 4);
    let mut tau = Vec::with_capacity(n);
    for (p, t) in &raw {
        x.extend([p[0] - mx[0], p[1] - mx[1], p[2] - mx[2], 1.0]);
        tau.push(t - mt);
    }
    let centered = solve_weighted_ls(&x, 4, w, &tau)?;
    let plane = TangentPlane {
        b: centered.b + mt - centered.a.iter().zip(&mx).map(|(a, m)| a * m).sum::<f64>(),
        a: centered.a,
    };
    let residuals = raw.iter().map(|(p, t)| plane.eval(p) - t).collect();
    Ok(FitResult {
        normal: compute_normal(&plane),
        plane,
        residuals,
    })
}

/// Robust Gaussian reweighting `exp(-(r / sigma)^2)` with a median-based
/// scale, clipped to `[MIN_WEIGHT, 1]`.
pub fn reweight(residuals: &[f64]) -> WeightVector {
    let sigma = MAD_SCALE * median_abs(residuals) + SIGMA_EPS;
    WeightVector(
        residuals
            .iter()
            .map(|r| (-(r / sigma).powi(2)).exp().clamp(MIN_WEIGHT, 1.0))
            .collect(),
    )
}

fn median_abs(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let mut a: Vec<f64> = v.iter().map(|r| r.abs()).collect();
    a.sort_by(f64::total_cmp);
    let n = a.len();
    if n % 2 == 1 {
        a[n / 2]
    } else {
        0.5 * (a[n / 2 - 1] + a[n / 2])
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefineConfig {
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            max_iters: DEFAULT_MAX_ITERS,
            tol: DEFAULT_TOL,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Refined {
    /// Fit from the last iteration.
    pub fit: FitResult,
    /// Weights derived from that fit's residuals.
    pub weights: WeightVector,
    pub iters: usize,
}

/// Alternates weighted fitting and reweighting, starting from unit weights,
/// until successive normals differ by less than `cfg.tol` radians or
/// `cfg.max_iters` fits have run.
pub fn iterative_normal_refinement(
    neigh: &NeighborSet,
    pts: &impl PointAccess,
    cfg: RefineConfig,
) -> Result<Refined> {
    if cfg.max_iters == 0 {
        return Err(invalid("max_iters must be at least 1"));
    }
    let mut w = WeightVector::ones(neigh.len());
    let mut prev: Option<StNormal> = None;
    let mut iters = 0;
    loop {
        let fit = fit_plane(neigh, pts, &w)?;
        iters += 1;
        w = reweight(&fit.residuals);
        let converged = prev.as_ref().is_some_and(|p| p.angle_to(&fit.normal) < cfg.tol);
        if converged || iters == cfg.max_iters {
            return Ok(Refined {
                fit,
                weights: w,
                iters,
            });
        }
        prev = Some(fit.normal.clone());
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldConfig {
    pub dr: f64,
    pub dt: usize,
    /// Neighborhood cap; `usize::MAX` keeps every qualifying point.
    pub k_max: usize,
    /// `None` fits once with unit weights.
    pub refine: Option<RefineConfig>,
}

impl FieldConfig {
    pub fn new(dr: f64, dt: usize, refine: bool) -> Self {
        Self {
            dr,
            dt,
            k_max: usize::MAX,
            refine: refine.then(RefineConfig::default),
        }
    }
}

/// ST-normal at every point of `seq`, indexed `[frame][point]`.
pub fn normal_field(seq: &CloudSequence, dr: f64, dt: usize, refine: bool) -> Result<Vec<Vec<StNormal>>> {
    normal_field_with(seq, &FieldConfig::new(dr, dt, refine))
}

pub fn normal_field_with(seq: &CloudSequence, cfg: &FieldConfig) -> Result<Vec<Vec<StNormal>>> {
    if !(cfg.dr > 0.0) {
        return Err(invalid("spatial radius must be positive"));
    }
    let index = StIndex::build(seq)?;
    (0..seq.len())
        .map(|t| {
            (0..seq.frame(t).len())
                .into_par_iter()
                .map(|i| {
                    let neigh = index.query((t, i), cfg.dr, cfg.dt, cfg.k_max);
                    match cfg.refine {
                        Some(r) => iterative_normal_refinement(&neigh, &index, r).map(|o| o.fit.normal),
                        None => fit_plane(&neigh, &index, &WeightVector::ones(neigh.len())).map(|f| f.normal),
                    }
                })
                .collect()
        })
        .collect()
}
