//! Finite-difference checks of every differentiable primitive and of the
//! kinematic composites built from them, on randomized shapes.
//!
//! Each op is wrapped as `sum(op(x) * probe)` with a random probe, so every
//! output entry contributes a distinct gradient.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::geometry::Point3;
use crate::kinet_unit::{fit_feature_plane, Ablation, KinetConfig, KinetUnit, Neighborhoods, PrevLink};
use crate::tensor::gradcheck::{check_inputs, check_params, GradCheck, FD_STEP};
use crate::tensor::{ParamStore, Tape, Tensor, Var};

/// Relative-error bound for single ops.
pub const OP_TOL: f64 = 1e-6;
/// Relative-error bound for composite graphs with nested solves.
pub const COMPOSITE_TOL: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteEntry {
    pub name: &'static str,
    pub report: GradCheck,
    pub tol: f64,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.report.max_rel_err < self.tol
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("sized")
}

/// Values at least 0.1 away from zero, so relu has no kink within a step.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let mut t = uniform(rng, shape, 0.1, 1.0);
    for v in t.data_mut() {
        if rng.random_bool(0.5) {
            *v = -*v;
        }
    }
    t
}

/// Entries pairwise at least 0.05 apart, so a max never switches within a step.
fn distinct(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| 0.1 * i as f64 + rng.random_range(0.0..0.05)).collect();
    vals.shuffle(rng);
    Tensor::new(shape.to_vec(), vals).expect("sized")
}

fn random_shape(rng: &mut ChaCha8Rng, min_rank: usize, max_rank: usize) -> Vec<usize> {
    let rank = rng.random_range(min_rank..=max_rank);
    (0..rank).map(|_| rng.random_range(1..=4)).collect()
}

/// `sum(y * probe)` for a fixed probe of `y`'s shape.
fn project(tape: &mut Tape, y: Var, probe: &Tensor) -> Result<Var> {
    let p = tape.constant(probe.clone());
    let z = tape.mul(y, p)?;
    Ok(tape.sum(z))
}

/// Runs `build(rng)` for `trials` random instances and merges the reports.
/// `build` returns the inputs and the op; the output shape is discovered by
/// one forward pass so a matching probe can be drawn.
fn op_check<F, O>(rng: &mut ChaCha8Rng, trials: usize, mut build: F) -> Result<GradCheck>
where
    F: FnMut(&mut ChaCha8Rng) -> (Vec<Tensor>, O),
    O: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut total = GradCheck::default();
    for _ in 0..trials {
        let (inputs, op) = build(rng);
        let out_shape = {
            let mut tape = Tape::new();
            let vars: Vec<Var> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
            let y = op(&mut tape, &vars)?;
            tape.shape(y).to_vec()
        };
        let probe = uniform(rng, &out_shape, -1.0, 1.0);
        let r = check_inputs(&inputs, FD_STEP, usize::MAX, |t, v| {
            let y = op(t, v)?;
            project(t, y, &probe)
        })?;
        total.max_rel_err = total.max_rel_err.max(r.max_rel_err);
        total.max_abs_err = total.max_abs_err.max(r.max_abs_err);
        total.entries += r.entries;
    }
    Ok(total)
}

/// Every primitive op, `trials` random shapes each.
pub fn op_suite(seed: u64, trials: usize) -> Result<Vec<SuiteEntry>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let mut out = Vec::new();
    let mut push = |name, report| {
        out.push(SuiteEntry {
            name,
            report,
            tol: OP_TOL,
        })
    };

    push(
        "add",
        op_check(r, trials, |r| {
            let s = random_shape(r, 1, 3);
            (vec![uniform(r, &s, -1.0, 1.0), uniform(r, &s, -1.0, 1.0)], |t: &mut Tape, v: &[Var]| t.add(v[0], v[1]))
        })?,
    );
    push(
        "sub",
        op_check(r, trials, |r| {
            let s = random_shape(r, 1, 3);
            (vec![uniform(r, &s, -1.0, 1.0), uniform(r, &s, -1.0, 1.0)], |t: &mut Tape, v: &[Var]| t.sub(v[0], v[1]))
        })?,
    );
    push(
        "mul",
        op_check(r, trials, |r| {
            let s = random_shape(r, 1, 3);
            (vec![uniform(r, &s, -1.0, 1.0), uniform(r, &s, -1.0, 1.0)], |t: &mut Tape, v: &[Var]| t.mul(v[0], v[1]))
        })?,
    );
    push(
        "mul_broadcast",
        op_check(r, trials, |r| {
            let s = random_shape(r, 2, 3);
            let prefix = r.random_bool(0.5);
            let small = if prefix { s[..s.len() - 1].to_vec() } else { s[1..].to_vec() };
            (vec![uniform(r, &s, -1.0, 1.0), uniform(r, &small, -1.0, 1.0)], |t: &mut Tape, v: &[Var]| t.mul(v[0], v[1]))
        })?,
    );
    push(
        "scale",
        op_check(r, trials, |r| {
            let s = random_shape(r, 1, 3);
            let c = r.random_range(-2.0..2.0);
            (vec![uniform(r, &s, -1.0, 1.0)], move |t: &mut Tape, v: &[Var]| Ok(t.scale(v[0], c)))
        })?,
    );
    push(
        "matmul",
        op_check(r, trials, |r| {
            let (m, k, n) = (r.random_range(1..=4), r.random_range(1..=4), r.random_range(1..=4));
            let batched = r.random_bool(0.5);
            let a = if batched { vec![2, m, k] } else { vec![m, k] };
            (vec![uniform(r, &a, -1.0, 1.0), uniform(r, &[k, n], -1.0, 1.0)], |t: &mut Tape, v: &[Var]| {
                t.matmul(v[0], v[1])
            })
        })?,
    );
    push(
        "transpose",
        op_check(r, trials, |r| {
            let s = random_shape(r, 2, 3);
            (vec![uniform(r, &s, -1.0, 1.0)], |t: &mut Tape, v: &[Var]| t.transpose(v[0]))
        })?,
    );
    push(
        "permute",
        op_check(r, trials, |r| {
            let s = random_shape(r, 3, 3);
            let mut perm = vec![0, 1, 2];
            perm.shuffle(r);
            (vec![uniform(r, &s, -1.0, 1.0)], move |t: &mut Tape, v: &[Var]| t.permute(v[0], &perm))
        })?,
    );
    push(
        "reshape",
        op_check(r, trials, |r| {
            let s = random_shape(r, 1, 3);
            let n: usize = s.iter().product();
            (vec![uniform(r, &s, -1.0, 1.0)], move |t: &mut Tape, v: &[Var]| t.reshape(v[0], &[n]))
        })?,
    );
    push(
        "concat",
        op_check(r, trials, |r| {
            let s = random_shape(r, 1, 3);
            let axis = r.random_range(0..s.len());
            let mut s2 = s.clone();
            s2[axis] = r.random_range(1..=3);
            (vec![uniform(r, &s, -1.0, 1.0), uniform(r, &s2, -1.0, 1.0)], move |t: &mut Tape, v: &[Var]| {
                t.concat(&[v[0], v[1]], axis)
            })
        })?,
    );
    push(
        "slice",
        op_check(r, trials, |r| {
            let s = random_shape(r, 1, 3);
            let axis = r.random_range(0..s.len());
            let start = r.random_range(0..s[axis]);
            let end = r.random_range(start + 1..=s[axis]);
            (vec![uniform(r, &s, -1.0, 1.0)], move |t: &mut Tape, v: &[Var]| t.slice(v[0], axis, start, end))
        })?,
    );
    push(
        "gather",
        op_check(r, trials, |r| {
            let s = random_shape(r, 1, 3);
            let idx: Vec<usize> = (0..r.random_range(1..=6)).map(|_| r.random_range(0..s[0])).collect();
            (vec![uniform(r, &s, -1.0, 1.0)], move |t: &mut Tape, v: &[Var]| t.gather(v[0], &idx))
        })?,
    );
    push(
        "sigmoid",
        op_check(r, trials, |r| {
            let s = random_shape(r, 1, 3);
            (vec![uniform(r, &s, -3.0, 3.0)], |t: &mut Tape, v: &[Var]| Ok(t.sigmoid(v[0])))
        })?,
    );
    push(
        "relu",
        op_check(r, trials, |r| {
            let s = random_shape(r, 1, 3);
            (vec![off_zero(r, &s)], |t: &mut Tape, v: &[Var]| Ok(t.relu(v[0])))
        })?,
    );
    push(
        "reduce_max",
        op_check(r, trials, |r| {
            let s = random_shape(r, 1, 3);
            let axis = r.random_range(0..s.len());
            (vec![distinct(r, &s)], move |t: &mut Tape, v: &[Var]| t.reduce_max(v[0], axis))
        })?,
    );
    push(
        "reduce_sum",
        op_check(r, trials, |r| {
            let s = random_shape(r, 1, 3);
            let axis = r.random_range(0..s.len());
            (vec![uniform(r, &s, -1.0, 1.0)], move |t: &mut Tape, v: &[Var]| t.reduce_sum(v[0], axis))
        })?,
    );
    push(
        "reduce_mean",
        op_check(r, trials, |r| {
            let s = random_shape(r, 1, 3);
            let axis = r.random_range(0..s.len());
            (vec![uniform(r, &s, -1.0, 1.0)], move |t: &mut Tape, v: &[Var]| t.reduce_mean(v[0], axis))
        })?,
    );
    push(
        "l2_normalize",
        op_check(r, trials, |r| {
            let s = random_shape(r, 1, 3);
            let axis = r.random_range(0..s.len());
            (vec![off_zero(r, &s)], move |t: &mut Tape, v: &[Var]| t.l2_normalize(v[0], axis))
        })?,
    );
    push(
        "pointwise_linear",
        op_check(r, trials, |r| {
            let (n, i, o) = (r.random_range(1..=5), r.random_range(1..=4), r.random_range(1..=4));
            (
                vec![uniform(r, &[n, i], -1.0, 1.0), uniform(r, &[i, o], -1.0, 1.0), uniform(r, &[o], -1.0, 1.0)],
                |t: &mut Tape, v: &[Var]| t.pointwise_linear(v[0], v[1], v[2]),
            )
        })?,
    );
    push(
        "softmax_cross_entropy",
        op_check(r, trials, |r| {
            let (b, c) = (r.random_range(1..=4), r.random_range(2..=5));
            let labels: Vec<usize> = (0..b).map(|_| r.random_range(0..c)).collect();
            let shape = if b == 1 { vec![c] } else { vec![b, c] };
            (vec![uniform(r, &shape, -2.0, 2.0)], move |t: &mut Tape, v: &[Var]| {
                t.softmax_cross_entropy(v[0], &labels)
            })
        })?,
    );
    push(
        "linear_solve",
        op_check(r, trials, |r| {
            let s = r.random_range(1..=5);
            let mut m = uniform(r, &[s, s], -1.0, 1.0);
            for i in 0..s {
                m.data_mut()[i * s + i] += s as f64 + 1.0;
            }
            (vec![m, uniform(r, &[s], -1.0, 1.0)], |t: &mut Tape, v: &[Var]| t.linear_solve(v[0], v[1]))
        })?,
    );
    push(
        "ridge",
        op_check(r, trials, |r| {
            let s = r.random_range(1..=4);
            (vec![uniform(r, &[2, s, s], 0.1, 1.0)], |t: &mut Tape, v: &[Var]| t.ridge(v[0], 1e-3, 1e-6))
        })?,
    );
    Ok(out)
}

/// Points of `t` frames, each frame a shifted copy of the same random cloud.
fn drifting_frames(rng: &mut ChaCha8Rng, t: usize, m: usize, step: Point3) -> Vec<Vec<Point3>> {
    let base: Vec<Point3> = (0..m).map(|_| std::array::from_fn(|_| rng.random_range(-0.3..0.3))).collect();
    (0..t)
        .map(|f| {
            let s = f as f64;
            base.iter()
                .map(|p| std::array::from_fn(|k| p[k] + step[k] * s))
                .collect()
        })
        .collect()
}

/// Smooth position-dependent features: identical points get identical rows.
fn position_features(frames: &[Vec<Point3>], dim: usize) -> Tensor {
    let data: Vec<f64> = frames
        .iter()
        .flatten()
        .flat_map(|p| (0..dim).map(move |j| ((j + 1) as f64 * p[j % 3] + 0.3 * j as f64).sin()))
        .collect();
    let n = data.len() / dim;
    Tensor::new(vec![n, dim], data).expect("sized")
}

/// The feature-space plane fit, a single unit and a two-unit stack.
pub fn composite_suite(seed: u64) -> Result<Vec<SuiteEntry>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    let f = uniform(&mut rng, &[7, 3], -1.0, 1.0);
    let w = uniform(&mut rng, &[7], 0.2, 1.0);
    let tau = [-1.0, -1.0, 0.0, 0.0, 0.0, 1.0, 1.0];
    let probe = uniform(&mut rng, &[7], -1.0, 1.0);
    let report = check_inputs(&[f, w], FD_STEP, usize::MAX, |t, v| {
        let fit = fit_feature_plane(t, v[0], v[1], &tau)?;
        let sq = t.mul(fit.a, fit.a)?;
        let a = t.sum(sq);
        let r = project(t, fit.residuals, &probe)?;
        t.add(a, r)
    })?;
    out.push(SuiteEntry {
        name: "fit_feature_plane",
        report,
        tol: COMPOSITE_TOL,
    });

    let cfg = KinetConfig {
        reduce_ratio: 0.5,
        group_dim: 2,
        dt: 1,
        dr: 0.6,
        out_dim: 3,
        k_max: 32,
    };
    let (t, m, dim) = (3, 8, 4);
    let frames = drifting_frames(&mut rng, t, m, [0.1, 0.05, 0.0]);
    let neigh = Neighborhoods::build(&frames, cfg.dr, cfg.dt, cfg.k_max)?;
    let x = position_features(&frames, dim);
    let n = t * m;
    let probe = uniform(&mut rng, &[n, cfg.out_dim], -1.0, 1.0);
    let map: Vec<usize> = (0..n).collect();

    let mut store = ParamStore::new();
    let u1 = KinetUnit::new(&mut store, "u1", cfg, Ablation::Full, dim, None, &mut rng)?;
    let wrt_params = check_params(&store, FD_STEP, 12, |tp, s| {
        let xv = tp.constant(x.clone());
        let st = u1.forward(tp, s, xv, &neigh, None)?;
        project(tp, st.output, &probe)
    })?;
    let wrt_input = check_inputs(std::slice::from_ref(&x), FD_STEP, 48, |tp, v| {
        let st = u1.forward(tp, &store, v[0], &neigh, None)?;
        project(tp, st.output, &probe)
    })?;
    let mut report = wrt_params;
    report.max_rel_err = report.max_rel_err.max(wrt_input.max_rel_err);
    report.max_abs_err = report.max_abs_err.max(wrt_input.max_abs_err);
    report.entries += wrt_input.entries;
    out.push(SuiteEntry {
        name: "unit_forward",
        report,
        tol: COMPOSITE_TOL,
    });

    let u2 = KinetUnit::new(&mut store, "u2", cfg, Ablation::Full, dim, Some(u1.groups()), &mut rng)?;
    let report = check_params(&store, FD_STEP, 12, |tp, s| {
        let xv = tp.constant(x.clone());
        let s1 = u1.forward(tp, s, xv, &neigh, None)?;
        let s2 = u2.forward(tp, s, xv, &neigh, Some(PrevLink { state: &s1, map: &map }))?;
        project(tp, s2.output, &probe)
    })?;
    out.push(SuiteEntry {
        name: "two_unit_stack",
        report,
        tol: COMPOSITE_TOL,
    });
    Ok(out)
}

/// The op suite followed by the composites.
pub fn gradcheck_suite(seed: u64, trials: usize) -> Result<Vec<SuiteEntry>> {
    let mut all = op_suite(seed, trials)?;
    all.extend(composite_suite(seed.wrapping_add(1))?);
    Ok(all)
}
