//! Parameter and FLOP accounting for one forward pass.
//!
//! FLOP rules: a pointwise linear map over `n` rows from `i` to `o` channels
//! costs `2 n i o` (a multiply-add is 2); a dense `s x s` solve costs
//! `ceil((2 s^3 + 6 s^2) / 3)`; every elementwise op and every reduction input
//! costs 1 per element, `l2_normalize` 3. Gathers, reshapes and
//! concatenations move data and cost nothing. Sampling and neighbor search
//! happen once per sequence outside the network and are not counted.
//! Neighborhoods are costed at their `k_max` capacity.

use std::fmt;

use crate::kinet_unit::{Ablation, KinetConfig, KinetUnit};
use crate::network::{ModelConfig, TwoStreamModel};
use crate::tensor::ParamStore;
use crate::Result;

pub const FLOP_CONVENTION: &str = "FLOPs count one multiply-add as 2 operations";

pub fn linear_flops(rows: u64, fan_in: u64, fan_out: u64) -> u64 {
    2 * rows * fan_in * fan_out
}

pub fn solve_flops(s: u64) -> u64 {
    (2 * s * s * s + 6 * s * s).div_ceil(3)
}

fn affine_params(fan_in: usize, fan_out: usize) -> usize {
    fan_in * fan_out + fan_out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CostReport {
    pub parameter_count: usize,
    /// Whole forward pass of both streams plus score fusion.
    pub flop_estimate: u64,
    /// The part of `flop_estimate` that does not grow with the point count.
    pub fixed_flops: u64,
}

impl fmt::Display for CostReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "# {FLOP_CONVENTION}")?;
        writeln!(f, "parameters={}", self.parameter_count)?;
        writeln!(f, "flops={}", self.flop_estimate)?;
        write!(f, "fixed_flops={}", self.fixed_flops)
    }
}

/// Sum of element counts over every registered parameter.
pub fn count_params(model: &TwoStreamModel) -> usize {
    store_params(&model.backbone.store) + store_params(&model.temporal.store)
}

pub fn store_params(store: &ParamStore) -> usize {
    store.iter().map(|p| p.numel()).sum()
}

/// Closed-form parameter count of one unit from its configuration.
pub fn unit_param_count(
    cfg: &KinetConfig,
    ablation: Ablation,
    static_dim: usize,
    prev_groups: Option<usize>,
) -> Result<usize> {
    let c = cfg.reduced_dim(static_dim)?;
    let g = c / cfg.group_dim;
    let abstract_in = match ablation {
        Ablation::NoNormal => c,
        _ => g * (cfg.group_dim + 1),
    };
    let h = match (prev_groups, ablation) {
        (Some(gp), Ablation::Full) => affine_params(gp, g),
        _ => 0,
    };
    Ok(affine_params(static_dim, c)
        + affine_params(abstract_in, cfg.out_dim)
        + affine_params(static_dim, cfg.out_dim)
        + h)
}

/// Parameter count derived from the configuration alone, walking the
/// temporal stream first and the backbone last. Independent of any store.
pub fn config_param_count(cfg: &ModelConfig) -> Result<usize> {
    cfg.validate()?;
    let mut total = affine_params(cfg.kinet.out_dim, cfg.n_classes);
    for l in (0..cfg.levels.len()).rev() {
        let prev_groups = match l {
            0 => None,
            _ => Some(cfg.kinet.reduced_dim(cfg.levels[l - 1].out_dim())? / cfg.kinet.group_dim),
        };
        total += unit_param_count(&cfg.kinet, cfg.ablation, cfg.levels[l].out_dim(), prev_groups)?;
    }
    total += affine_params(cfg.levels.last().expect("validated").out_dim(), cfg.n_classes);
    for (l, spec) in cfg.levels.iter().enumerate().rev() {
        let mut fan_in = if l == 0 { 6 } else { 3 + cfg.levels[l - 1].out_dim() };
        for &o in &spec.mlp {
            total += affine_params(fan_in, o);
            fan_in = o;
        }
    }
    Ok(total)
}

/// FLOPs of one unit over `n` points with neighborhoods of capacity `k`.
/// `carried` adds the predecessor's output.
pub fn unit_flops(unit: &KinetUnit, prev_groups: Option<usize>, n: u64, k: u64, carried: bool) -> u64 {
    let s_in = unit.static_dim as u64;
    let c = unit.reduced_dim as u64;
    let g = unit.groups() as u64;
    let d = unit.cfg.group_dim as u64;
    let out = unit.cfg.out_dim as u64;
    let mut f = linear_flops(n, s_in, c);
    match unit.ablation {
        Ablation::NoNormal => {
            f += n * k * c;
            f += linear_flops(n, c, out);
        }
        _ => {
            if let (Some(gp), true) = (prev_groups, unit.params.h.is_some()) {
                let gp = gp as u64;
                f += linear_flops(n, gp, g) + n * g + n * g * k;
            }
            let s = d + 1;
            let per_system = k * s // weighting the design
                + 2 * s * k * s // gram matrix
                + k + 2 * s * k // weighted right-hand side
                + s // ridge
                + solve_flops(s)
                + 2 * k * s + k // prediction and residual
                + 3 * s // normalization
                + 2 * k; // center deviation
            f += n * g * per_system;
            f += linear_flops(n, g * s, out);
        }
    }
    f += linear_flops(n, s_in, out) + n * out;
    if carried {
        f += n * out;
    }
    f
}

/// Cost of one forward pass on a sequence of `frames` frames holding
/// `points` points each.
pub fn estimate_flops(model: &TwoStreamModel, frames: usize, points: usize) -> (u64, u64) {
    let cfg = &model.cfg;
    let t = frames as u64;
    let classes = cfg.n_classes as u64;
    let mut per_frame = points;
    let mut sizes = Vec::new();
    let mut variable = 0u64;
    for (l, spec) in cfg.levels.iter().enumerate() {
        per_frame = per_frame.div_ceil(spec.stride).clamp(1, per_frame.max(1));
        sizes.push(per_frame as u64);
        let rows = t * per_frame as u64 * spec.k as u64;
        let mut fan_in = if l == 0 { 6 } else { 3 + cfg.levels[l - 1].out_dim() } as u64;
        for &o in &spec.mlp {
            variable += linear_flops(rows, fan_in, o as u64) + rows * o as u64;
            fan_in = o as u64;
        }
        variable += rows * fan_in;
    }
    let last_dim = cfg.levels.last().expect("validated").out_dim() as u64;
    let last_size = *sizes.last().expect("validated");
    variable += t * last_size * last_dim;
    let mut fixed = linear_flops(t, last_dim, classes) + t * classes;

    let k = cfg.kinet.k_max as u64;
    let mut prev_groups = None;
    for (l, unit) in model.temporal.units.iter().enumerate() {
        variable += unit_flops(unit, prev_groups, t * sizes[l], k, l > 0);
        prev_groups = Some(unit.groups());
    }
    let out = cfg.kinet.out_dim as u64;
    variable += t * last_size * out;
    fixed += linear_flops(1, out, classes);
    // two softmaxes (exp, sum, divide) and their mean
    fixed += 2 * 3 * classes + 2 * classes;
    (variable + fixed, fixed)
}

pub fn cost_report(model: &TwoStreamModel, frames: usize, points: usize) -> CostReport {
    let (flop_estimate, fixed_flops) = estimate_flops(model, frames, points);
    CostReport {
        parameter_count: count_params(model),
        flop_estimate,
        fixed_flops,
    }
}

/// Cost of a single unit with no predecessor over `points` points.
pub fn unit_report(unit: &KinetUnit, store: &ParamStore, points: usize) -> CostReport {
    let f = unit_flops(unit, None, points as u64, unit.cfg.k_max as u64, false);
    CostReport {
        parameter_count: store_params(store),
        flop_estimate: f,
        fixed_flops: 0,
    }
}
