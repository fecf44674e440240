//! The feature-space kinematic learning unit.
//!
//! Static per-point features are reduced to `c` channels and split into
//! `c / d` groups of `d` channels. Each group of each point fits a weighted
//! tangent plane `A f + b = tau'` over its space-time neighbors; the unit
//! normals of all groups are concatenated and abstracted by an affine map,
//! and an affine map of the static features is added as a residual. Fitting
//! residuals at each point are kept so the next unit can predict neighbor
//! weights from them.
//!
//! All groups of all points are solved as one batch: neighborhoods are padded
//! to a common size with zero-weight copies of the center, which leaves every
//! weighted system unchanged.

use rand::Rng;

use crate::error::{invalid, shape, Error, Result};
use crate::geometry::{dist2, NeighborSet, Point3, StIndex, DEFAULT_K_MAX};
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

/// Relative and absolute ridge of the feature-space normal matrices.
pub const RIDGE_ALPHA: f64 = 1e-8;
pub const RIDGE_BETA: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KinetConfig {
    /// `c` as a fraction of the static feature dimension.
    pub reduce_ratio: f64,
    /// Channels per group, `d`.
    pub group_dim: usize,
    /// Temporal radius in frames.
    pub dt: usize,
    /// Spatial radius.
    pub dr: f64,
    /// Output dimension `d_l`.
    pub out_dim: usize,
    pub k_max: usize,
}

impl Default for KinetConfig {
    fn default() -> Self {
        Self {
            reduce_ratio: 0.5,
            group_dim: 4,
            dt: 1,
            dr: 0.5,
            out_dim: 64,
            k_max: DEFAULT_K_MAX,
        }
    }
}

impl KinetConfig {
    /// The reduced width `c` for a static feature width.
    pub fn reduced_dim(&self, static_dim: usize) -> Result<usize> {
        if !(self.reduce_ratio > 0.0 && self.reduce_ratio <= 1.0) {
            return Err(Error::Config(format!("reduce ratio {} not in (0, 1]", self.reduce_ratio)));
        }
        let exact = self.reduce_ratio * static_dim as f64;
        let c = exact.round() as usize;
        if c == 0 || (exact - c as f64).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "ratio {} of {static_dim} channels is not a positive integer",
                self.reduce_ratio
            )));
        }
        if self.group_dim == 0 || c % self.group_dim != 0 {
            return Err(Error::Config(format!(
                "group size {} does not divide {c} channels",
                self.group_dim
            )));
        }
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dr > 0.0 && self.dr.is_finite()) {
            return Err(Error::Config("spatial radius must be positive".into()));
        }
        if self.out_dim == 0 || self.k_max == 0 {
            return Err(Error::Config("output width and k_max must be positive".into()));
        }
        Ok(())
    }
}

/// Which parts of the unit are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Ablation {
    #[default]
    Full,
    /// Group normals replaced by a max-pool of reduced neighbor features.
    NoNormal,
    /// Neighbor weights fixed to 1 (no weight heads).
    NoWeight,
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" | "none" => Ok(Self::Full),
            "no-normal" => Ok(Self::NoNormal),
            "no-weight" => Ok(Self::NoWeight),
            other => Err(invalid(format!("unknown ablation {other:?}"))),
        }
    }
}

impl std::fmt::Display for Ablation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Full => "full",
            Self::NoNormal => "no-normal",
            Self::NoWeight => "no-weight",
        })
    }
}

/// Padded space-time neighborhoods of every point of one sampling level.
///
/// Points are numbered frame by frame. Row `i` of `idx` holds `k` neighbor
/// numbers; padded slots repeat `i` with `mask = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct Neighborhoods {
    pub n: usize,
    pub k: usize,
    pub idx: Vec<usize>,
    pub mask: Vec<f64>,
    /// Neighbor frame time minus center frame time, shifted so that it
    /// averages to zero over the real members. The shift only moves the
    /// intercept of a well-posed fit; in rank-deficient neighborhoods it
    /// keeps a motionless input at `A = 0`.
    pub tau: Vec<f64>,
    /// 1 at the slot holding the center itself.
    pub center: Vec<f64>,
}

impl Neighborhoods {
    /// Ball queries at every point of `frames` (timestamps `1..=T`).
    pub fn build(frames: &[Vec<Point3>], dr: f64, dt: usize, k_max: usize) -> Result<Self> {
        let index = StIndex::from_frames(frames)?;
        let sets: Vec<NeighborSet> = frames
            .iter()
            .enumerate()
            .flat_map(|(t, f)| (0..f.len()).map(move |i| (t, i)))
            .map(|c| index.query(c, dr, dt, k_max))
            .collect();
        Self::from_sets(&sets, &frame_offsets(frames))
    }

    /// Packs explicit neighbor sets; `sets[i]` must be centered on point `i`
    /// and `offsets[t]` is the number of the first point of frame `t`.
    pub fn from_sets(sets: &[NeighborSet], offsets: &[usize]) -> Result<Self> {
        let n = sets.len();
        let k = sets.iter().map(NeighborSet::len).max().unwrap_or(1).max(1);
        let number = |(t, i): (usize, usize)| offsets[t] + i;
        let mut out = Self {
            n,
            k,
            idx: Vec::with_capacity(n * k),
            mask: Vec::with_capacity(n * k),
            tau: Vec::with_capacity(n * k),
            center: Vec::with_capacity(n * k),
        };
        for (g, s) in sets.iter().enumerate() {
            if number(s.center) != g || !s.members.contains(&s.center) {
                return Err(invalid(format!("neighbor set {g} is not centered on point {g}")));
            }
            let mean_dt = s.members.iter().map(|m| m.0 as f64 - s.center.0 as f64).sum::<f64>() / s.len() as f64;
            let mut seen_center = false;
            for &m in &s.members {
                let is_center = m == s.center && !seen_center;
                seen_center |= is_center;
                out.idx.push(number(m));
                out.mask.push(1.0);
                out.tau.push(m.0 as f64 - s.center.0 as f64 - mean_dt);
                out.center.push(if is_center { 1.0 } else { 0.0 });
            }
            for _ in s.len()..k {
                out.idx.push(g);
                out.mask.push(0.0);
                out.tau.push(0.0);
                out.center.push(0.0);
            }
        }
        Ok(out)
    }
}

/// First point number of each frame when frames are numbered consecutively.
pub fn frame_offsets(frames: &[Vec<Point3>]) -> Vec<usize> {
    let mut acc = 0;
    frames
        .iter()
        .map(|f| {
            let o = acc;
            acc += f.len();
            o
        })
        .collect()
}

/// For every point of `to`, the number of the nearest point of the same
/// frame in `from`.
pub fn predecessor_map(from: &[Vec<Point3>], to: &[Vec<Point3>]) -> Result<Vec<usize>> {
    if from.len() != to.len() {
        return Err(shape("predecessor map across different frame counts"));
    }
    let offsets = frame_offsets(from);
    let mut map = Vec::new();
    for (t, (src, dst)) in from.iter().zip(to).enumerate() {
        if src.is_empty() {
            return Err(invalid("empty frame in predecessor level"));
        }
        for q in dst {
            let best = (0..src.len())
                .min_by(|&a, &b| dist2(&src[a], q).total_cmp(&dist2(&src[b], q)))
                .unwrap();
            map.push(offsets[t] + best);
        }
    }
    Ok(map)
}

/// Glorot-uniform `[fan_in, fan_out]` weight and zero bias.
pub fn init_affine(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> (ParamId, ParamId) {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let w = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..=bound)).collect();
    let w = store.add(format!("{name}.w"), Tensor::new(vec![fan_in, fan_out], w).expect("sized"));
    let b = store.add(format!("{name}.b"), Tensor::zeros(&[fan_out]));
    (w, b)
}

/// Affine parameters applied point-wise.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Affine {
    pub w: ParamId,
    pub b: ParamId,
}

impl Affine {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let (w, b) = init_affine(store, name, fan_in, fan_out, rng);
        Self { w, b }
    }

    pub fn zeros(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let w = store.add(format!("{name}.w"), Tensor::zeros(&[fan_in, fan_out]));
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[fan_out]));
        Self { w, b }
    }

    pub fn apply(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store.get(self.w));
        let b = tape.param(store.get(self.b));
        tape.pointwise_linear(x, w, b)
    }

    pub fn fan_in(&self, store: &ParamStore) -> usize {
        store.get(self.w).value().shape()[0]
    }

    pub fn fan_out(&self, store: &ParamStore) -> usize {
        store.get(self.w).value().shape()[1]
    }
}

/// Parameters of one unit: reduction `D`, abstraction `C`, residual `R` and,
/// past the first unit, the weight heads `H` (one output per group).
#[derive(Debug, Clone, PartialEq)]
pub struct KinetUnitParams {
    pub d: Affine,
    pub c: Affine,
    pub r: Affine,
    pub h: Option<Affine>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KinetUnit {
    pub cfg: KinetConfig,
    pub ablation: Ablation,
    pub static_dim: usize,
    /// Reduced width `c`.
    pub reduced_dim: usize,
    pub params: KinetUnitParams,
}

/// Everything a unit hands to its successor.
#[derive(Debug, Clone, Copy)]
pub struct UnitState {
    /// Reduced features `[N, c]`.
    pub features: Var,
    /// Fitting residual at each point, per group `[N, c/d]`.
    pub deviations: Var,
    /// Unit normals `[N, c/d, d+1]`; absent in the no-normal ablation.
    pub normals: Option<Var>,
    /// Output features `[N, d_l]`.
    pub output: Var,
}

/// Link to the previous unit: its state and, for each point of this level,
/// the number of its nearest point at the previous level.
#[derive(Debug, Clone, Copy)]
pub struct PrevLink<'a> {
    pub state: &'a UnitState,
    pub map: &'a [usize],
}

impl KinetUnit {
    /// Registers the unit's parameters under `name`. `prev_groups` is the
    /// group count of the preceding unit, `None` for the first unit.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cfg: KinetConfig,
        ablation: Ablation,
        static_dim: usize,
        prev_groups: Option<usize>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.reduced_dim(static_dim)?;
        let groups = c / cfg.group_dim;
        let abstract_in = match ablation {
            Ablation::NoNormal => c,
            _ => groups * (cfg.group_dim + 1),
        };
        let d = Affine::new(store, &format!("{name}.D"), static_dim, c, rng);
        let cl = Affine::new(store, &format!("{name}.C"), abstract_in, cfg.out_dim, rng);
        let r = Affine::new(store, &format!("{name}.R"), static_dim, cfg.out_dim, rng);
        let h = match (prev_groups, ablation) {
            // zero heads start every weight at sigmoid(0) = 1/2: uniform
            // weighting, the same fit as the unweighted unit
            (Some(g), Ablation::Full) => Some(Affine::zeros(store, &format!("{name}.H"), g, groups)),
            _ => None,
        };
        Ok(Self {
            cfg,
            ablation,
            static_dim,
            reduced_dim: c,
            params: KinetUnitParams { d, c: cl, r, h },
        })
    }

    pub fn groups(&self) -> usize {
        self.reduced_dim / self.cfg.group_dim
    }

    /// `D_l`: static features `[N, dim]` to reduced features `[N, c]`.
    pub fn reduce(&self, tape: &mut Tape, store: &ParamStore, feats: Var) -> Result<Var> {
        self.params.d.apply(tape, store, feats)
    }

    /// Neighbor weights `[N, G, K]`, zero on padded slots. Without a
    /// predecessor (or without weight heads) every real neighbor gets 1.
    pub fn predict_weights(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        neigh: &Neighborhoods,
        prev: Option<PrevLink>,
    ) -> Result<Var> {
        let (n, k, g) = (neigh.n, neigh.k, self.groups());
        let mask: Vec<f64> = (0..n)
            .flat_map(|i| (0..g).flat_map(move |_| neigh.mask[i * k..(i + 1) * k].iter().copied()))
            .collect();
        let mask = tape.constant(Tensor::new(vec![n, g, k], mask)?);
        let (Some(h), Some(prev)) = (self.params.h, prev) else {
            return Ok(mask);
        };
        let dev = tape.gather(prev.state.deviations, prev.map)?;
        let w = predict_group_weights(tape, store, h, dev)?;
        let w = tape.gather(w, &neigh.idx)?;
        let w = tape.reshape(w, &[n, k, g])?;
        let w = tape.permute(w, &[0, 2, 1])?;
        tape.mul(w, mask)
    }

    /// Runs the unit on static features `[N, dim]` of this level's points.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        static_feats: Var,
        neigh: &Neighborhoods,
        prev: Option<PrevLink>,
    ) -> Result<UnitState> {
        let (n, k, d, g) = (neigh.n, neigh.k, self.cfg.group_dim, self.groups());
        if tape.shape(static_feats) != [n, self.static_dim] {
            return Err(shape(format!(
                "kinet unit expects features [{n}, {}], got {:?}",
                self.static_dim,
                tape.shape(static_feats)
            )));
        }
        if let Some(p) = prev {
            if p.map.len() != n {
                return Err(shape("predecessor map length differs from point count"));
            }
        }
        let feats = self.reduce(tape, store, static_feats)?;
        let nb = tape.gather(feats, &neigh.idx)?;
        let weights = self.predict_weights(tape, store, neigh, prev)?;

        let (deviations, normals, dynamic) = if self.ablation == Ablation::NoNormal {
            let nb = tape.reshape(nb, &[n, k, self.reduced_dim])?;
            let pooled = tape.reduce_max(nb, 1)?;
            let zero = tape.constant(Tensor::zeros(&[n, g]));
            (zero, None, pooled)
        } else {
            let x = tape.reshape(nb, &[n, k, g, d])?;
            let x = tape.permute(x, &[0, 2, 1, 3])?;
            let x = tape.reshape(x, &[n * g, k, d])?;
            let w = tape.reshape(weights, &[n * g, k])?;
            let tau = repeat_rows(&neigh.tau, n, g, k);
            let fit = fit_batch(tape, x, w, &tau)?;
            let normals = group_normal(tape, fit.a)?;
            let center = repeat_rows(&neigh.center, n, g, k);
            let center = tape.constant(center);
            let dev = tape.mul(fit.residuals, center)?;
            let dev = tape.reduce_sum(dev, 1)?;
            let dev = tape.reshape(dev, &[n, g])?;
            let normals = tape.reshape(normals, &[n, g, d + 1])?;
            let flat = tape.reshape(normals, &[n, g * (d + 1)])?;
            (dev, Some(normals), flat)
        };
        let mut output = self.params.c.apply(tape, store, dynamic)?;
        let residual = self.params.r.apply(tape, store, static_feats)?;
        output = tape.add(output, residual)?;
        if let Some(p) = prev {
            if tape.shape(p.state.output)[1] != self.cfg.out_dim {
                return Err(shape("consecutive kinet units must share the output width"));
            }
            let carried = tape.gather(p.state.output, p.map)?;
            output = tape.add(output, carried)?;
        }
        Ok(UnitState {
            features: feats,
            deviations,
            normals,
            output,
        })
    }
}

/// `sigmoid(H(dev))`: one weight per group from the full deviation vector.
pub fn predict_group_weights(tape: &mut Tape, store: &ParamStore, h: Affine, dev: Var) -> Result<Var> {
    let z = h.apply(tape, store, dev)?;
    Ok(tape.sigmoid(z))
}

/// `[N*K]` per-neighbor values repeated for each group: `[N*G, K]`.
fn repeat_rows(v: &[f64], n: usize, g: usize, k: usize) -> Tensor {
    let data: Vec<f64> = (0..n)
        .flat_map(|i| (0..g).flat_map(move |_| v[i * k..(i + 1) * k].iter().copied()))
        .collect();
    Tensor::new(vec![n * g, k], data).expect("sized")
}

/// Splits `[.., c]` into `c / d` contiguous `[.., d]` slices.
pub fn split_groups(tape: &mut Tape, x: Var, d: usize) -> Result<Vec<Var>> {
    let r = tape.shape(x).len();
    let c = *tape.shape(x).last().ok_or_else(|| shape("split_groups on a scalar"))?;
    if d == 0 || c % d != 0 {
        return Err(Error::Config(format!("group size {d} does not divide {c} channels")));
    }
    (0..c / d).map(|k| tape.slice(x, r - 1, k * d, (k + 1) * d)).collect()
}

/// Batched weighted fits `A f + b = tau'`.
#[derive(Debug, Clone, Copy)]
pub struct FeatureFit {
    /// `[B, d]`
    pub a: Var,
    /// `[B]`
    pub b: Var,
    /// `A f_j + b - tau'_j`, `[B, K]`
    pub residuals: Var,
}

/// Fits `B` independent systems: features `[B, K, d]`, weights `[B, K]`,
/// targets `tau [B, K]`. Solves the ridge-regularized normal equations
/// `(X^T W X + lambda I) [A; b] = X^T W tau` with `X = [f, 1]`.
pub fn fit_batch(tape: &mut Tape, feats: Var, weights: Var, tau: &Tensor) -> Result<FeatureFit> {
    let s = tape.shape(feats).to_vec();
    if s.len() != 3 || tape.shape(weights) != [s[0], s[1]] || tau.shape() != [s[0], s[1]] {
        return Err(shape(format!(
            "fit_batch: features {s:?}, weights {:?}, tau {:?}",
            tape.shape(weights),
            tau.shape()
        )));
    }
    let (b, k, d) = (s[0], s[1], s[2]);
    let ones = tape.constant(Tensor::ones(&[b, k, 1]));
    let x = tape.concat(&[feats, ones], 2)?;
    let xt = tape.transpose(x)?;
    let wx = tape.mul(x, weights)?;
    let m = tape.matmul(xt, wx)?;
    let tau_v = tape.constant(tau.clone());
    let wt = tape.mul(weights, tau_v)?;
    let wt = tape.reshape(wt, &[b, k, 1])?;
    let rhs = tape.matmul(xt, wt)?;
    let rhs = tape.reshape(rhs, &[b, d + 1])?;
    let m = tape.ridge(m, RIDGE_ALPHA, RIDGE_BETA)?;
    let sol = tape.linear_solve(m, rhs)?;
    let a = tape.slice(sol, 1, 0, d)?;
    let off = tape.slice(sol, 1, d, d + 1)?;
    let off = tape.reshape(off, &[b])?;
    let col = tape.reshape(sol, &[b, d + 1, 1])?;
    let pred = tape.matmul(x, col)?;
    let pred = tape.reshape(pred, &[b, k])?;
    let residuals = tape.sub(pred, tau_v)?;
    Ok(FeatureFit {
        a,
        b: off,
        residuals,
    })
}

/// Single-neighborhood fit: features `[n, d]`, weights `[n]`, `tau' [n]`.
pub fn fit_feature_plane(tape: &mut Tape, feats: Var, weights: Var, tau: &[f64]) -> Result<FeatureFit> {
    let s = tape.shape(feats).to_vec();
    if s.len() != 2 {
        return Err(shape(format!("fit_feature_plane: features {s:?}")));
    }
    let f = tape.reshape(feats, &[1, s[0], s[1]])?;
    let w = tape.reshape(weights, &[1, s[0]])?;
    let fit = fit_batch(tape, f, w, &Tensor::new(vec![1, tau.len()], tau.to_vec())?)?;
    Ok(FeatureFit {
        a: tape.reshape(fit.a, &[s[1]])?,
        b: tape.reshape(fit.b, &[])?,
        residuals: tape.reshape(fit.residuals, &[s[0]])?,
    })
}

/// `(A, -1) / ||(A, -1)||` along the last axis of `a [.., d]`.
pub fn group_normal(tape: &mut Tape, a: Var) -> Result<Var> {
    let mut s = tape.shape(a).to_vec();
    let axis = s.len().checked_sub(1).ok_or_else(|| shape("group_normal on a scalar"))?;
    s[axis] = 1;
    let neg = tape.constant(Tensor::full(&s, -1.0));
    let raw = tape.concat(&[a, neg], axis)?;
    tape.l2_normalize(raw, axis)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{check_inputs, check_params, FD_STEP};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> KinetConfig {
        KinetConfig {
            reduce_ratio: 0.5,
            group_dim: 2,
            dt: 1,
            dr: 0.6,
            out_dim: 3,
            k_max: 32,
        }
    }

    fn random_frames(rng: &mut impl Rng, t: usize, m: usize, step: Point3) -> Vec<Vec<Point3>> {
        let base: Vec<Point3> = (0..m).map(|_| std::array::from_fn(|_| rng.random_range(-0.3..0.3))).collect();
        (0..t)
            .map(|f| {
                let s = f as f64;
                base.iter().map(|p| [p[0] + step[0] * s, p[1] + step[1] * s, p[2] + step[2] * s]).collect()
            })
            .collect()
    }

    /// Position-dependent static features, identical for identical points.
    fn static_feats(frames: &[Vec<Point3>], dim: usize) -> Tensor {
        let data = frames
            .iter()
            .flatten()
            .flat_map(|p| (0..dim).map(move |j| ((j + 1) as f64 * p[j % 3] + 0.3 * j as f64).sin()))
            .collect::<Vec<_>>();
        let n = data.len() / dim;
        Tensor::new(vec![n, dim], data).unwrap()
    }

    #[test]
    fn default_config_values() {
        let c = KinetConfig::default();
        assert_eq!((c.reduce_ratio, c.group_dim, c.dt, c.dr), (0.5, 4, 1, 0.5));
        assert_eq!(c.reduced_dim(64).unwrap(), 32);
        assert_eq!(c.reduced_dim(32).unwrap() / c.group_dim, 4);
        assert!(matches!(
            KinetConfig { group_dim: 3, ..c }.reduced_dim(64),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn identity_reduction() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = KinetConfig {
            reduce_ratio: 1.0,
            ..small_cfg()
        };
        let unit = KinetUnit::new(&mut store, "u", cfg, Ablation::Full, 4, None, &mut rng).unwrap();
        let mut eye = Tensor::zeros(&[4, 4]);
        for i in 0..4 {
            eye.data_mut()[i * 5] = 1.0;
        }
        store.get_mut(unit.params.d.w).set_value(eye).unwrap();
        let x = Tensor::new(vec![2, 4], (0..8).map(f64::from).collect()).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = unit.reduce(&mut tape, &store, xv).unwrap();
        assert_eq!(tape.value(y), &x);
        let loss = tape.sum(y);
        let grads = tape.backward(loss).unwrap();
        let g = grads.param(store.get(unit.params.d.w).key()).unwrap();
        assert!(g.data().iter().any(|v| *v != 0.0));
    }

    #[test]
    fn split_roundtrip() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![3, 32], (0..96).map(f64::from).collect()).unwrap());
        let parts = split_groups(&mut tape, x, 4).unwrap();
        assert_eq!(parts.len(), 8);
        let back = tape.concat(&parts, 1).unwrap();
        assert_eq!(tape.value(back), tape.value(x));
        assert_eq!(split_groups(&mut tape, x, 32).unwrap().len(), 1);
        assert!(matches!(split_groups(&mut tape, x, 5), Err(Error::Config(_))));
        // batched grouping by reshape agrees with contiguous slices
        let r = tape.reshape(x, &[3, 8, 4]).unwrap();
        for (k, p) in parts.iter().enumerate() {
            for i in 0..3 {
                assert_eq!(
                    &tape.value(r).data()[(i * 8 + k) * 4..(i * 8 + k + 1) * 4],
                    &tape.value(*p).data()[i * 4..(i + 1) * 4]
                );
            }
        }
    }

    #[test]
    fn constant_features_fit_nothing() {
        let mut tape = Tape::new();
        let f = tape.constant(Tensor::new(vec![3, 2], vec![0.4, -1.0, 0.4, -1.0, 0.4, -1.0]).unwrap());
        let w = tape.constant(Tensor::ones(&[3]));
        let fit = fit_feature_plane(&mut tape, f, w, &[-1.0, 0.0, 1.0]).unwrap();
        assert!(tape.value(fit.a).data().iter().all(|v| v.abs() < 1e-12));
        let r = tape.value(fit.residuals).data();
        for (r, t) in r.iter().zip([-1.0, 0.0, 1.0]) {
            assert!((r + t).abs() < 1e-12);
        }
    }

    #[test]
    fn one_dimensional_feature_fit() {
        let mut tape = Tape::new();
        let f = tape.constant(Tensor::new(vec![3, 1], vec![-2.0, 0.0, 2.0]).unwrap());
        let w = tape.constant(Tensor::ones(&[3]));
        let fit = fit_feature_plane(&mut tape, f, w, &[-1.0, 0.0, 1.0]).unwrap();
        assert!((tape.value(fit.a).item() - 0.5).abs() < 1e-7);
        assert!(tape.value(fit.b).item().abs() < 1e-12);
        assert!(tape.value(fit.residuals).data().iter().all(|r| r.abs() < 1e-7));
        let n = group_normal(&mut tape, fit.a).unwrap();
        let n = tape.value(n).data();
        assert!((n[0] - 0.5 / 1.25f64.sqrt()).abs() < 1e-7);
        assert!((n[1] + 1.0 / 1.25f64.sqrt()).abs() < 1e-7);
    }

    #[test]
    fn group_normals_are_unit() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::new(vec![100, 4], (0..400).map(|_| rng.random_range(-20.0..20.0)).collect()).unwrap();
        let mut tape = Tape::new();
        let av = tape.constant(a);
        let n = group_normal(&mut tape, av).unwrap();
        for row in tape.value(n).data().chunks(5) {
            let norm: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-12);
            assert!(row[4] < 0.0);
        }
        let z = tape.constant(Tensor::zeros(&[4]));
        let nz = group_normal(&mut tape, z).unwrap();
        assert_eq!(tape.value(nz).data(), &[0.0, 0.0, 0.0, 0.0, -1.0]);
    }

    #[test]
    fn feature_fit_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let f = Tensor::new(vec![7, 3], (0..21).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let w = Tensor::new(vec![7], (0..7).map(|_| rng.random_range(0.2..1.0)).collect()).unwrap();
        let tau = [-1.0, -1.0, 0.0, 0.0, 0.0, 1.0, 1.0];
        let r = check_inputs(&[f, w], FD_STEP, usize::MAX, |t, v| {
            let fit = fit_feature_plane(t, v[0], v[1], &tau)?;
            let sq = t.mul(fit.a, fit.a)?;
            Ok(t.sum(sq))
        })
        .unwrap();
        assert!(r.max_rel_err < 1e-5, "{r:?}");
    }

    #[test]
    fn first_unit_weights_are_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let frames = random_frames(&mut rng, 3, 8, [0.1, 0.0, 0.0]);
        let neigh = Neighborhoods::build(&frames, 0.6, 1, 32).unwrap();
        let mut store = ParamStore::new();
        let unit = KinetUnit::new(&mut store, "u", small_cfg(), Ablation::Full, 4, None, &mut rng).unwrap();
        let mut tape = Tape::new();
        let w = unit.predict_weights(&mut tape, &store, &neigh, None).unwrap();
        let g = unit.groups();
        for i in 0..neigh.n {
            for k in 0..g {
                for j in 0..neigh.k {
                    let v = tape.value(w).data()[(i * g + k) * neigh.k + j];
                    assert_eq!(v, neigh.mask[i * neigh.k + j]);
                }
            }
        }
    }

    #[test]
    fn zero_heads_give_half_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let h = Affine::new(&mut store, "h", 3, 2, &mut rng);
        store.get_mut(h.w).set_value(Tensor::zeros(&[3, 2])).unwrap();
        let mut tape = Tape::new();
        let dev = tape.constant(Tensor::new(vec![4, 3], (0..12).map(|_| rng.random_range(-5.0..5.0)).collect()).unwrap());
        let w = predict_group_weights(&mut tape, &store, h, dev).unwrap();
        assert!(tape.value(w).data().iter().all(|&v| v == 0.5));
        let mut store2 = ParamStore::new();
        let h2 = Affine::new(&mut store2, "h", 3, 2, &mut rng);
        let w2 = predict_group_weights(&mut tape, &store2, h2, dev).unwrap();
        assert!(tape.value(w2).data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    fn run_unit(unit: &KinetUnit, store: &ParamStore, frames: &[Vec<Point3>], cfg: &KinetConfig) -> Tensor {
        let neigh = Neighborhoods::build(frames, cfg.dr, cfg.dt, cfg.k_max).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(static_feats(frames, unit.static_dim));
        let st = unit.forward(&mut tape, store, x, &neigh, None).unwrap();
        tape.value(st.output).clone()
    }

    #[test]
    fn static_input_collapses_dynamics() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let frames = random_frames(&mut rng, 3, 10, [0.0; 3]);
        let cfg = KinetConfig {
            k_max: usize::MAX,
            ..small_cfg()
        };
        let mut store = ParamStore::new();
        let unit = KinetUnit::new(&mut store, "u", cfg, Ablation::Full, 4, None, &mut rng).unwrap();
        let neigh = Neighborhoods::build(&frames, cfg.dr, cfg.dt, cfg.k_max).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(static_feats(&frames, 4));
        let st = unit.forward(&mut tape, &store, x, &neigh, None).unwrap();
        for row in tape.value(st.normals.unwrap()).data().chunks(3) {
            assert!(row[0].abs() < 1e-6 && row[1].abs() < 1e-6, "{row:?}");
            assert!((row[2] + 1.0).abs() < 1e-12);
        }
        // the dynamic term is the same at every point: output - R(static) is constant
        let r = unit.params.r.apply(&mut tape, &store, x).unwrap();
        let dynamic = tape.sub(st.output, r).unwrap();
        let d = tape.value(dynamic).data();
        for row in d.chunks(3) {
            for j in 0..3 {
                assert!((row[j] - d[j]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn motion_changes_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let coherent = random_frames(&mut rng, 3, 10, [0.15, 0.0, 0.0]);
        let shuffled = vec![coherent[1].clone(), coherent[2].clone(), coherent[0].clone()];
        let cfg = small_cfg();
        let mut store = ParamStore::new();
        let unit = KinetUnit::new(&mut store, "u", cfg, Ablation::Full, 4, None, &mut rng).unwrap();
        let a = run_unit(&unit, &store, &coherent, &cfg);
        let b = run_unit(&unit, &store, &shuffled, &cfg);
        // compare per point: the shuffled sequence numbers frames differently
        let per = 10 * cfg.out_dim;
        let mut diff = 0.0;
        for (fa, fb) in [(0, 2), (1, 0), (2, 1)] {
            let xa = &a.data()[fa * per..(fa + 1) * per];
            let xb = &b.data()[fb * per..(fb + 1) * per];
            diff += xa.iter().zip(xb).map(|(p, q)| (p - q).powi(2)).sum::<f64>();
        }
        assert!(diff.sqrt() > 1e-3, "{}", diff.sqrt());
    }

    #[test]
    fn neighbor_order_does_not_matter() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let frames = random_frames(&mut rng, 3, 8, [0.1, 0.05, 0.0]);
        let index = StIndex::from_frames(&frames).unwrap();
        let sets: Vec<NeighborSet> = (0..3)
            .flat_map(|t| (0..8).map(move |i| (t, i)))
            .map(|c| index.query(c, 0.6, 1, 32))
            .collect();
        let mut shuffled = sets.clone();
        for s in shuffled.iter_mut() {
            s.members.reverse();
        }
        let offsets = frame_offsets(&frames);
        let cfg = small_cfg();
        let mut store = ParamStore::new();
        let u1 = KinetUnit::new(&mut store, "u1", cfg, Ablation::Full, 4, None, &mut rng).unwrap();
        let u2 = KinetUnit::new(&mut store, "u2", cfg, Ablation::Full, 4, Some(u1.groups()), &mut rng).unwrap();
        let map: Vec<usize> = (0..24).collect();
        let run = |sets: &[NeighborSet]| {
            let neigh = Neighborhoods::from_sets(sets, &offsets).unwrap();
            let mut tape = Tape::new();
            let x = tape.constant(static_feats(&frames, 4));
            let s1 = u1.forward(&mut tape, &store, x, &neigh, None).unwrap();
            let s2 = u2
                .forward(&mut tape, &store, x, &neigh, Some(PrevLink { state: &s1, map: &map }))
                .unwrap();
            tape.value(s2.output).clone()
        };
        let a = run(&sets);
        let b = run(&shuffled);
        assert!(a.max_abs_diff(&b) < 1e-9);
    }

    #[test]
    fn unit_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let frames = random_frames(&mut rng, 3, 8, [0.1, 0.05, 0.0]);
        let cfg = small_cfg();
        let neigh = Neighborhoods::build(&frames, cfg.dr, cfg.dt, cfg.k_max).unwrap();
        let mut store = ParamStore::new();
        let u1 = KinetUnit::new(&mut store, "u1", cfg, Ablation::Full, 4, None, &mut rng).unwrap();
        let u2 = KinetUnit::new(&mut store, "u2", cfg, Ablation::Full, 4, Some(u1.groups()), &mut rng).unwrap();
        let x = static_feats(&frames, 4);
        let map: Vec<usize> = (0..24).collect();
        let probe = Tensor::new(vec![24, 3], (0..72).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let report = check_params(&store, FD_STEP, 12, |t, s| {
            let xv = t.constant(x.clone());
            let s1 = u1.forward(t, s, xv, &neigh, None)?;
            let s2 = u2.forward(t, s, xv, &neigh, Some(PrevLink { state: &s1, map: &map }))?;
            let p = t.constant(probe.clone());
            let y = t.mul(s2.output, p)?;
            Ok(t.sum(y))
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "{report:?}");
    }
}
