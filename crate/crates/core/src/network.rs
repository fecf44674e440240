//! Two-stream classifier: a per-frame set-abstraction backbone (static
//! stream) and a stack of kinematic units over its intermediate features
//! (temporal stream), trained in two stages and fused by averaging softmax
//! scores.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{invalid, shape, Error, Result};
use crate::geometry::{farthest_point_sample, CloudSequence, KdTree, Point3};
use crate::kinet_unit::{
    frame_offsets, predecessor_map, Ablation, Affine, KinetConfig, KinetUnit, Neighborhoods, PrevLink, UnitState,
};
use crate::tensor::{adam_step, sgd_step, softmax, AdamConfig, Gradients, ParamStore, Tape, Tensor, Var};

/// One set-abstraction level: every `stride`-th share of the previous
/// level's points becomes a centroid, grouped with its `k` nearest previous
/// points within `radius`, encoded by an affine+relu stack and max-pooled.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelSpec {
    pub stride: usize,
    pub radius: f64,
    pub k: usize,
    pub mlp: Vec<usize>,
}

impl LevelSpec {
    pub fn out_dim(&self) -> usize {
        *self.mlp.last().expect("validated")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub n_classes: usize,
    pub levels: Vec<LevelSpec>,
    pub kinet: KinetConfig,
    pub ablation: Ablation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_classes: 4,
            levels: vec![
                LevelSpec {
                    stride: 2,
                    radius: 0.6,
                    k: 16,
                    mlp: vec![16, 32],
                },
                LevelSpec {
                    stride: 4,
                    radius: 1.2,
                    k: 8,
                    mlp: vec![32, 64],
                },
            ],
            kinet: KinetConfig {
                out_dim: 32,
                ..KinetConfig::default()
            },
            ablation: Ablation::Full,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        if self.levels.is_empty() {
            return Err(Error::Config("need at least one abstraction level".into()));
        }
        for (l, s) in self.levels.iter().enumerate() {
            if s.stride == 0 || s.k == 0 || s.mlp.is_empty() || s.mlp.contains(&0) || !(s.radius > 0.0) {
                return Err(Error::Config(format!("abstraction level {} is malformed", l + 1)));
            }
            self.kinet.reduced_dim(s.out_dim())?;
        }
        self.kinet.validate()
    }
}

/// Per-point input width of level `l` (0-based): relative plus absolute
/// coordinates at the first level, relative coordinates plus the previous
/// level's features afterwards.
fn level_in_dim(levels: &[LevelSpec], l: usize) -> usize {
    if l == 0 {
        6
    } else {
        3 + levels[l - 1].out_dim()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneLevel {
    pub spec: LevelSpec,
    pub layers: Vec<Affine>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StaticBackbone {
    pub store: ParamStore,
    pub levels: Vec<BackboneLevel>,
    pub head: Affine,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TemporalBranch {
    pub store: ParamStore,
    pub units: Vec<KinetUnit>,
    pub head: Affine,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TwoStreamModel {
    pub cfg: ModelConfig,
    pub backbone: StaticBackbone,
    pub temporal: TemporalBranch,
}

impl TwoStreamModel {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        // one random stream per component, so that adding or removing a
        // component leaves the initialization of all others unchanged
        let stream = |id: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(id);
            r
        };
        let mut rng = stream(0);
        let mut store = ParamStore::new();
        let mut levels = Vec::new();
        for (l, spec) in cfg.levels.iter().enumerate() {
            let mut fan_in = level_in_dim(&cfg.levels, l);
            let mut layers = Vec::new();
            for (j, &out) in spec.mlp.iter().enumerate() {
                layers.push(Affine::new(&mut store, &format!("sa{}.{}", l + 1, j + 1), fan_in, out, &mut rng));
                fan_in = out;
            }
            levels.push(BackboneLevel {
                spec: spec.clone(),
                layers,
            });
        }
        let last = cfg.levels.last().expect("validated").out_dim();
        let head = Affine::new(&mut store, "static_head", last, cfg.n_classes, &mut stream(1));
        let backbone = StaticBackbone { store, levels, head };

        let mut tstore = ParamStore::new();
        let mut units: Vec<KinetUnit> = Vec::new();
        for (l, spec) in cfg.levels.iter().enumerate() {
            let prev = units.last().map(KinetUnit::groups);
            units.push(KinetUnit::new(
                &mut tstore,
                &format!("kinet{}", l + 1),
                cfg.kinet,
                cfg.ablation,
                spec.out_dim(),
                prev,
                &mut stream(2 + l as u64),
            )?);
        }
        let thead = Affine::new(
            &mut tstore,
            "temporal_head",
            cfg.kinet.out_dim,
            cfg.n_classes,
            &mut stream(2 + cfg.levels.len() as u64),
        );
        Ok(Self {
            cfg,
            backbone,
            temporal: TemporalBranch {
                store: tstore,
                units,
                head: thead,
            },
        })
    }

    pub fn param_count(&self) -> usize {
        self.backbone.store.numel() + self.temporal.store.numel()
    }
}

/// Parameter-independent structure of one sequence under a model config:
/// sampled centroids, their groupings and the kinematic neighborhoods.
#[derive(Debug, Clone)]
pub struct SeqGeometry {
    pub label: Option<usize>,
    /// Coordinates per level (level 0 = input points), per frame.
    pub coords: Vec<Vec<Vec<Point3>>>,
    /// Per abstraction level: numbers (in the previous level) of the `k`
    /// grouped points of every centroid.
    pub groups: Vec<Vec<usize>>,
    /// Per abstraction level: `[rows, 3]` neighbor-minus-centroid offsets,
    /// with absolute neighbor coordinates appended at the first level.
    pub group_inputs: Vec<Tensor>,
    pub neighborhoods: Vec<Neighborhoods>,
    /// Per unit after the first: nearest point of the previous level.
    pub pred_maps: Vec<Vec<usize>>,
}

impl SeqGeometry {
    pub fn new(seq: &CloudSequence, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut coords = vec![seq.to_coords()];
        let mut groups = Vec::new();
        let mut group_inputs = Vec::new();
        for (l, spec) in cfg.levels.iter().enumerate() {
            let prev = &coords[l];
            let offsets = frame_offsets(prev);
            let mut centroids = Vec::with_capacity(prev.len());
            let mut idx = Vec::new();
            let mut feats = Vec::new();
            for (t, pts) in prev.iter().enumerate() {
                let m = pts.len();
                let count = m.div_ceil(spec.stride).clamp(1, m);
                let sel = farthest_point_sample(pts, count, farthest_from_centroid(pts));
                let tree = KdTree::build(pts);
                let mut cs = Vec::with_capacity(count);
                for &c in &sel {
                    let q = pts[c];
                    let mut found: Vec<(f64, usize)> = Vec::new();
                    tree.for_each_within(&q, spec.radius, |j, d2| found.push((d2, j)));
                    found.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                    let mut members: Vec<usize> = found.into_iter().take(spec.k).map(|(_, j)| j).collect();
                    members.resize(spec.k, c);
                    for j in members {
                        idx.push(offsets[t] + j);
                        let p = pts[j];
                        feats.extend([p[0] - q[0], p[1] - q[1], p[2] - q[2]]);
                        if l == 0 {
                            feats.extend(p);
                        }
                    }
                    cs.push(q);
                }
                centroids.push(cs);
            }
            let width = if l == 0 { 6 } else { 3 };
            group_inputs.push(Tensor::new(vec![idx.len(), width], feats)?);
            groups.push(idx);
            coords.push(centroids);
        }
        let k = &cfg.kinet;
        let neighborhoods = (1..coords.len())
            .map(|l| Neighborhoods::build(&coords[l], k.dr, k.dt, k.k_max))
            .collect::<Result<Vec<_>>>()?;
        let pred_maps = (2..coords.len())
            .map(|l| predecessor_map(&coords[l - 1], &coords[l]))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            label: seq.label(),
            coords,
            groups,
            group_inputs,
            neighborhoods,
            pred_maps,
        })
    }

    pub fn frames(&self) -> usize {
        self.coords[0].len()
    }

    /// Centroid count of abstraction level `l` (1-based) in each frame.
    pub fn level_sizes(&self, l: usize) -> Vec<usize> {
        self.coords[l].iter().map(Vec::len).collect()
    }
}

/// Index of the point farthest from the frame centroid (lowest on ties), a
/// start for farthest point sampling that does not depend on point order.
fn farthest_from_centroid(pts: &[Point3]) -> usize {
    let n = pts.len() as f64;
    let c: Point3 = std::array::from_fn(|k| pts.iter().map(|p| p[k]).sum::<f64>() / n);
    let mut best = (0, -1.0);
    for (i, p) in pts.iter().enumerate() {
        let d = crate::geometry::dist2(p, &c);
        if d > best.1 {
            best = (i, d);
        }
    }
    best.0
}

/// Output of the static stream for one sequence.
#[derive(Debug, Clone)]
pub struct StaticOut {
    /// Frame-averaged logits `[C]`.
    pub logits: Var,
    /// Features `[N_l, dim_l]` of every abstraction level.
    pub level_feats: Vec<Var>,
}

impl StaticBackbone {
    pub fn forward(&self, tape: &mut Tape, geom: &SeqGeometry) -> Result<StaticOut> {
        let mut level_feats: Vec<Var> = Vec::new();
        for (l, level) in self.levels.iter().enumerate() {
            let inputs = tape.constant(geom.group_inputs[l].clone());
            let mut x = match level_feats.last() {
                None => inputs,
                Some(&prev) => {
                    let g = tape.gather(prev, &geom.groups[l])?;
                    tape.concat(&[inputs, g], 1)?
                }
            };
            for layer in &level.layers {
                let z = layer.apply(tape, &self.store, x)?;
                x = tape.relu(z);
            }
            let rows = geom.groups[l].len() / level.spec.k;
            let x = tape.reshape(x, &[rows, level.spec.k, level.spec.out_dim()])?;
            level_feats.push(tape.reduce_max(x, 1)?);
        }
        let last = *level_feats.last().expect("at least one level");
        let sizes = geom.level_sizes(self.levels.len());
        let mut pooled = Vec::with_capacity(sizes.len());
        let mut start = 0;
        for m in sizes {
            let part = tape.slice(last, 0, start, start + m)?;
            let max = tape.reduce_max(part, 0)?;
            let dim = tape.shape(max)[0];
            pooled.push(tape.reshape(max, &[1, dim])?);
            start += m;
        }
        let frames = tape.concat(&pooled, 0)?;
        let logits = self.head.apply(tape, &self.store, frames)?;
        let logits = tape.reduce_mean(logits, 0)?;
        Ok(StaticOut { logits, level_feats })
    }
}

impl TemporalBranch {
    /// Temporal logits `[C]` from the static features of every level.
    pub fn forward(&self, tape: &mut Tape, level_feats: &[Var], geom: &SeqGeometry) -> Result<Var> {
        if level_feats.len() != self.units.len() {
            return Err(shape(format!(
                "{} feature levels for {} kinematic units",
                level_feats.len(),
                self.units.len()
            )));
        }
        let mut prev: Option<UnitState> = None;
        for (l, unit) in self.units.iter().enumerate() {
            let link = prev.as_ref().map(|state| PrevLink {
                state,
                map: &geom.pred_maps[l - 1],
            });
            let state = unit.forward(tape, &self.store, level_feats[l], &geom.neighborhoods[l], link)?;
            prev = Some(state);
        }
        let out = prev.expect("at least one unit").output;
        let pooled = tape.reduce_max(out, 0)?;
        self.head.apply(tape, &self.store, pooled)
    }
}

/// Mean of the two softmax score vectors.
pub fn aggregate(static_logits: &[f64], temporal_logits: &[f64]) -> Result<Vec<f64>> {
    if static_logits.len() != temporal_logits.len() || static_logits.is_empty() {
        return Err(shape(format!(
            "cannot fuse {} static with {} temporal scores",
            static_logits.len(),
            temporal_logits.len()
        )));
    }
    let (a, b) = (softmax(static_logits), softmax(temporal_logits));
    Ok(a.iter().zip(&b).map(|(x, y)| 0.5 * (x + y)).collect())
}

/// Index of the largest entry, the first on ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Fraction of rows whose argmax equals the label.
pub fn accuracy(scores: &[Vec<f64>], labels: &[usize]) -> f64 {
    if scores.is_empty() {
        return 0.0;
    }
    let hits = scores.iter().zip(labels).filter(|(s, &y)| argmax(s) == y).count();
    hits as f64 / scores.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Optimizer {
    Adam,
    Sgd,
}

impl std::str::FromStr for Optimizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(Self::Adam),
            "sgd" => Ok(Self::Sgd),
            other => Err(invalid(format!("unknown optimizer {other:?}"))),
        }
    }
}

impl std::fmt::Display for Optimizer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Adam => "adam",
            Self::Sgd => "sgd",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs_static: usize,
    pub epochs_temporal: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: Optimizer,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs_static: 30,
            epochs_temporal: 30,
            lr: 1e-3,
            batch_size: 8,
            seed: 0,
            optimizer: Optimizer::Adam,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) || self.batch_size == 0 {
            return Err(Error::Config("learning rate and batch size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Static,
    Temporal,
}

impl Stage {
    pub fn number(self) -> usize {
        match self {
            Self::Static => 1,
            Self::Temporal => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Accuracy {
    pub static_acc: f64,
    pub temporal_acc: f64,
    pub fused_acc: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub stage: Stage,
    /// Mean training cross-entropy of the epoch.
    pub loss: f64,
    /// Accuracies on the evaluation set after the epoch.
    pub acc: Accuracy,
}

impl EpochMetrics {
    /// One `key=value` record.
    pub fn to_line(&self) -> String {
        format!(
            "epoch={},stage={},loss={:.6},acc_static={:.6},acc_temporal={:.6},acc_fused={:.6}",
            self.epoch,
            self.stage.number(),
            self.loss,
            self.acc.static_acc,
            self.acc.temporal_acc,
            self.acc.fused_acc
        )
    }
}

/// Labeled sequences with their precomputed geometry.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub geoms: Vec<SeqGeometry>,
    pub labels: Vec<usize>,
}

impl Prepared {
    pub fn new(seqs: &[CloudSequence], cfg: &ModelConfig) -> Result<Self> {
        let labels = seqs
            .iter()
            .map(|s| {
                s.label()
                    .filter(|&y| y < cfg.n_classes)
                    .ok_or_else(|| invalid(format!("every sequence needs a label below {}", cfg.n_classes)))
            })
            .collect::<Result<Vec<_>>>()?;
        let geoms = seqs
            .par_iter()
            .map(|s| SeqGeometry::new(s, cfg))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { geoms, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Static and temporal logits of one sequence.
pub fn predict(model: &TwoStreamModel, geom: &SeqGeometry) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut tape = Tape::new();
    let out = model.backbone.forward(&mut tape, geom)?;
    let frozen: Vec<Var> = out
        .level_feats
        .iter()
        .map(|&v| {
            let t = tape.value(v).clone();
            tape.constant(t)
        })
        .collect();
    let tl = model.temporal.forward(&mut tape, &frozen, geom)?;
    Ok((tape.value(out.logits).data().to_vec(), tape.value(tl).data().to_vec()))
}

pub fn evaluate(model: &TwoStreamModel, data: &Prepared) -> Result<Accuracy> {
    let preds = data
        .geoms
        .par_iter()
        .map(|g| predict(model, g))
        .collect::<Result<Vec<_>>>()?;
    let (st, tm): (Vec<Vec<f64>>, Vec<Vec<f64>>) = preds.into_iter().unzip();
    let fused = st
        .iter()
        .zip(&tm)
        .map(|(a, b)| aggregate(a, b))
        .collect::<Result<Vec<_>>>()?;
    Ok(Accuracy {
        static_acc: accuracy(&st, &data.labels),
        temporal_acc: accuracy(&tm, &data.labels),
        fused_acc: accuracy(&fused, &data.labels),
    })
}

fn step(store: &mut ParamStore, cfg: &TrainConfig) {
    match cfg.optimizer {
        Optimizer::Adam => adam_step(
            store,
            &AdamConfig {
                lr: cfg.lr,
                ..AdamConfig::default()
            },
        ),
        Optimizer::Sgd => sgd_step(store, cfg.lr),
    }
}

/// Loss and gradients of one sample for the given stage. In the temporal
/// stage the backbone features enter the tape as constants, so no gradient
/// reaches the backbone.
fn sample_grads(model: &TwoStreamModel, geom: &SeqGeometry, label: usize, stage: Stage, frozen: Option<&[Tensor]>) -> Result<(f64, Gradients)> {
    let mut tape = Tape::new();
    let loss = match stage {
        Stage::Static => {
            let out = model.backbone.forward(&mut tape, geom)?;
            tape.softmax_cross_entropy(out.logits, &[label])?
        }
        Stage::Temporal => {
            let feats: Vec<Var> = frozen
                .expect("temporal stage needs cached features")
                .iter()
                .map(|t| tape.constant(t.clone()))
                .collect();
            let logits = model.temporal.forward(&mut tape, &feats, geom)?;
            tape.softmax_cross_entropy(logits, &[label])?
        }
    };
    let value = tape.value(loss).item();
    Ok((value, tape.backward(loss)?))
}

/// Backbone features of every level for each sequence, as plain values.
pub fn cache_static_features(model: &TwoStreamModel, data: &Prepared) -> Result<Vec<Vec<Tensor>>> {
    data.geoms
        .par_iter()
        .map(|g| {
            let mut tape = Tape::new();
            let out = model.backbone.forward(&mut tape, g)?;
            Ok(out.level_feats.iter().map(|&v| tape.value(v).clone()).collect())
        })
        .collect()
}

/// Trains one stage for `epochs` epochs, evaluating on `eval` after each.
/// Epoch numbers continue from `first_epoch`.
pub fn train_stage(
    model: &mut TwoStreamModel,
    train: &Prepared,
    eval: &Prepared,
    stage: Stage,
    epochs: usize,
    first_epoch: usize,
    cfg: &TrainConfig,
) -> Result<Vec<EpochMetrics>> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(invalid("training set is empty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (stage.number() as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let frozen = match stage {
        Stage::Temporal => Some(cache_static_features(model, train)?),
        Stage::Static => None,
    };
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut metrics = Vec::with_capacity(epochs);
    for e in 0..epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let results = batch
                .par_iter()
                .map(|&i| {
                    let cached = frozen.as_ref().map(|f| f[i].as_slice());
                    sample_grads(model, &train.geoms[i], train.labels[i], stage, cached)
                })
                .collect::<Result<Vec<_>>>()?;
            let store = match stage {
                Stage::Static => &mut model.backbone.store,
                Stage::Temporal => &mut model.temporal.store,
            };
            store.zero_grad();
            for (loss, grads) in &results {
                total += loss;
                store.accumulate(grads);
            }
            store.scale_grads(1.0 / batch.len() as f64);
            step(store, cfg);
        }
        metrics.push(EpochMetrics {
            epoch: first_epoch + e,
            stage,
            loss: total / train.len() as f64,
            acc: evaluate(model, eval)?,
        });
    }
    Ok(metrics)
}

/// Stage 1 trains the backbone on static cross-entropy; stage 2 keeps the
/// backbone fixed and trains the temporal branch on its own cross-entropy.
pub fn train_two_stage(model: &mut TwoStreamModel, train: &Prepared, eval: &Prepared, cfg: &TrainConfig) -> Result<Vec<EpochMetrics>> {
    let mut metrics = train_stage(model, train, eval, Stage::Static, cfg.epochs_static, 1, cfg)?;
    metrics.extend(train_stage(
        model,
        train,
        eval,
        Stage::Temporal,
        cfg.epochs_temporal,
        cfg.epochs_static + 1,
        cfg,
    )?);
    Ok(metrics)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{gen_sequence, MotionKind, MotionSpec};
    use crate::tensor::gradcheck::{check_params, FD_STEP};

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            n_classes: 3,
            levels: vec![
                LevelSpec {
                    stride: 2,
                    radius: 0.8,
                    k: 4,
                    mlp: vec![8],
                },
                LevelSpec {
                    stride: 2,
                    radius: 1.5,
                    k: 3,
                    mlp: vec![8],
                },
            ],
            kinet: KinetConfig {
                group_dim: 2,
                out_dim: 4,
                dr: 0.8,
                ..KinetConfig::default()
            },
            ablation: Ablation::Full,
        }
    }

    fn seq(kind: MotionKind, seed: u64) -> CloudSequence {
        gen_sequence(&MotionSpec::new(kind), 16, 3, seed).unwrap().0.with_label(Some(0))
    }

    fn static_logits(model: &TwoStreamModel, s: &CloudSequence) -> Vec<f64> {
        let g = SeqGeometry::new(s, &model.cfg).unwrap();
        predict(model, &g).unwrap().0
    }

    #[test]
    fn static_stream_ignores_point_order() {
        let model = TwoStreamModel::new(tiny_cfg(), 1).unwrap();
        let s = seq(MotionKind::Translation([0.1, 0.0, 0.0]), 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let permuted = s
            .to_coords()
            .into_iter()
            .map(|mut f| {
                f.shuffle(&mut rng);
                f
            })
            .collect();
        let p = CloudSequence::from_coords(permuted, Some(0)).unwrap();
        let (a, b) = (static_logits(&model, &s), static_logits(&model, &p));
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn static_stream_averages_frames() {
        let model = TwoStreamModel::new(tiny_cfg(), 4).unwrap();
        let s = seq(MotionKind::Translation([0.1, 0.05, 0.0]), 5);
        let doubled: Vec<Vec<Point3>> = s.to_coords().into_iter().flat_map(|f| [f.clone(), f]).collect();
        let reversed: Vec<Vec<Point3>> = s.to_coords().into_iter().rev().collect();
        let a = static_logits(&model, &s);
        let b = static_logits(&model, &CloudSequence::from_coords(doubled, None).unwrap());
        let c = static_logits(&model, &CloudSequence::from_coords(reversed, None).unwrap());
        for k in 0..a.len() {
            assert!((a[k] - b[k]).abs() < 1e-12);
            assert!((a[k] - c[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn temporal_stream_sees_direction() {
        let mut differ = 0;
        for seed in 0..50 {
            let model = TwoStreamModel::new(tiny_cfg(), seed).unwrap();
            let fwd = seq(MotionKind::Translation([0.15, 0.0, 0.0]), 100 + seed);
            let back = seq(MotionKind::Translation([-0.15, 0.0, 0.0]), 100 + seed);
            let a = predict(&model, &SeqGeometry::new(&fwd, &model.cfg).unwrap()).unwrap().1;
            let b = predict(&model, &SeqGeometry::new(&back, &model.cfg).unwrap()).unwrap().1;
            if a.iter().zip(&b).any(|(x, y)| (x - y).abs() > 1e-6) {
                differ += 1;
            }
        }
        assert!(differ >= 45, "{differ}/50");
    }

    #[test]
    fn fresh_full_model_matches_no_weight() {
        let full = TwoStreamModel::new(tiny_cfg(), 3).unwrap();
        let plain = TwoStreamModel::new(
            ModelConfig {
                ablation: Ablation::NoWeight,
                ..tiny_cfg()
            },
            3,
        )
        .unwrap();
        // every shared parameter is initialized identically
        for p in plain.backbone.store.iter().chain(plain.temporal.store.iter()) {
            let q = full
                .backbone
                .store
                .iter()
                .chain(full.temporal.store.iter())
                .find(|q| q.name() == p.name())
                .unwrap();
            assert_eq!(p.value(), q.value(), "{}", p.name());
        }
        // uniform 0.5 weights fit the same planes as unit weights, up to the
        // absolute ridge floor on near-singular feature systems
        let s = seq(MotionKind::Translation([0.1, 0.05, 0.0]), 21);
        let a = predict(&full, &SeqGeometry::new(&s, &full.cfg).unwrap()).unwrap();
        let b = predict(&plain, &SeqGeometry::new(&s, &plain.cfg).unwrap()).unwrap();
        assert_eq!(a.0, b.0);
        for (x, y) in a.1.iter().zip(&b.1) {
            assert!((x - y).abs() < 1e-4 * (1.0 + y.abs()), "{:?} vs {:?}", a.1, b.1);
        }
    }

    #[test]
    fn static_motionless_sequence_is_time_symmetric() {
        let model = TwoStreamModel::new(tiny_cfg(), 7).unwrap();
        let s = seq(MotionKind::Static, 8);
        let rev = CloudSequence::from_coords(s.to_coords().into_iter().rev().collect(), None).unwrap();
        let a = predict(&model, &SeqGeometry::new(&s, &model.cfg).unwrap()).unwrap().1;
        let b = predict(&model, &SeqGeometry::new(&rev, &model.cfg).unwrap()).unwrap().1;
        assert_eq!(a, b);
    }

    #[test]
    fn aggregation_contract() {
        let a = [0.3, -1.0, 2.0];
        let fused = aggregate(&a, &a).unwrap();
        for (f, s) in fused.iter().zip(softmax(&a)) {
            assert!((f - s).abs() < 1e-15);
        }
        let fused = aggregate(&[800.0, 0.0, 0.0], &[0.0, 800.0, 0.0]).unwrap();
        assert!((fused[0] - 0.5).abs() < 1e-12 && (fused[1] - 0.5).abs() < 1e-12 && fused[2] < 1e-12);
        assert!((fused.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(matches!(aggregate(&a, &[1.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn accuracy_edge_cases() {
        let labels = [0, 1, 2, 0, 0];
        let oracle: Vec<Vec<f64>> = labels
            .iter()
            .map(|&y| (0..3).map(|k| if k == y { 1.0 } else { 0.0 }).collect())
            .collect();
        assert_eq!(accuracy(&oracle, &labels), 1.0);
        let constant = vec![vec![0.0; 3]; 5];
        assert_eq!(accuracy(&constant, &labels), 0.6);
    }

    #[test]
    fn backbone_gradcheck() {
        let model = TwoStreamModel::new(tiny_cfg(), 11).unwrap();
        let g = SeqGeometry::new(&seq(MotionKind::Translation([0.1, 0.0, 0.05]), 12), &model.cfg).unwrap();
        let r = check_params(&model.backbone.store, FD_STEP, 10, |t, s| {
            let bb = StaticBackbone {
                store: s.clone(),
                ..model.backbone.clone()
            };
            let out = bb.forward(t, &g)?;
            t.softmax_cross_entropy(out.logits, &[1])
        })
        .unwrap();
        assert!(r.max_rel_err < 1e-4, "{r:?}");
    }

    #[test]
    fn temporal_gradcheck() {
        // radii wide enough that every feature fit is over-determined
        let mut cfg = tiny_cfg();
        cfg.kinet.dr = 1.5;
        let model = TwoStreamModel::new(cfg, 12).unwrap();
        let s = gen_sequence(&MotionSpec::new(MotionKind::Translation([0.1, 0.05, 0.0])), 32, 3, 13).unwrap().0;
        let g = SeqGeometry::new(&s, &model.cfg).unwrap();
        assert!(g.neighborhoods.iter().all(|n| n.mask.chunks(n.k).all(|m| m.iter().sum::<f64>() > 3.0)));
        let feats: Vec<Tensor> = {
            let mut tape = Tape::new();
            let out = model.backbone.forward(&mut tape, &g).unwrap();
            out.level_feats.iter().map(|&v| tape.value(v).clone()).collect()
        };
        let r = check_params(&model.temporal.store, FD_STEP, 10, |t, s| {
            let tb = TemporalBranch {
                store: s.clone(),
                ..model.temporal.clone()
            };
            let fv: Vec<Var> = feats.iter().map(|f| t.constant(f.clone())).collect();
            let logits = tb.forward(t, &fv, &g)?;
            t.softmax_cross_entropy(logits, &[2])
        })
        .unwrap();
        assert!(r.max_rel_err < 1e-4, "{r:?}");
    }

    #[test]
    fn empty_training_set_is_rejected() {
        let mut model = TwoStreamModel::new(tiny_cfg(), 0).unwrap();
        let empty = Prepared {
            geoms: vec![],
            labels: vec![],
        };
        assert!(matches!(
            train_two_stage(&mut model, &empty, &empty, &TrainConfig::default()),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn freeze_and_learn() {
        let mut cfg = tiny_cfg();
        cfg.n_classes = 2;
        let mut model = TwoStreamModel::new(cfg.clone(), 21).unwrap();
        // separable by shape scale: small vs large spheres
        let seqs: Vec<CloudSequence> = (0..12)
            .map(|i| {
                let (s, _) = gen_sequence(&MotionSpec::new(MotionKind::Static), 16, 2, 500 + i).unwrap();
                let scale = if i % 2 == 0 { 0.4 } else { 1.2 };
                let coords = s
                    .to_coords()
                    .into_iter()
                    .map(|f| f.into_iter().map(|p| p.map(|v| v * scale)).collect())
                    .collect();
                CloudSequence::from_coords(coords, Some((i % 2) as usize)).unwrap()
            })
            .collect();
        let data = Prepared::new(&seqs, &cfg).unwrap();
        let tc = TrainConfig {
            epochs_static: 15,
            epochs_temporal: 2,
            lr: 1e-2,
            batch_size: 4,
            seed: 3,
            optimizer: Optimizer::Adam,
        };
        let m1 = train_stage(&mut model, &data, &data, Stage::Static, tc.epochs_static, 1, &tc).unwrap();
        assert!(m1.last().unwrap().loss < m1[0].loss);
        let frozen = model.backbone.clone();
        let temporal_before = model.temporal.store.clone();
        train_stage(&mut model, &data, &data, Stage::Temporal, tc.epochs_temporal, 16, &tc).unwrap();
        assert_eq!(model.backbone, frozen);
        assert_ne!(model.temporal.store.iter().next().unwrap().value(), temporal_before.iter().next().unwrap().value());
    }
}
