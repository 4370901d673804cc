use serde::{Deserialize, Serialize};

use super::model::{ForwardOptions, ForwardOutput, Model};
use super::{NetworkError, Result};
use crate::assignment::{total_loss, CostWeights, GtShape, LossBreakdown, LossInputs, LossOutput, LossPlan};
use crate::geometry::Vec3;
use crate::scene::{LabeledCloud, PartialScan};
use crate::targets::{induce_targets, PatchedPrediction};

/// Ground-truth clouds larger than this are thinned by a fixed stride.
pub const GT_POINT_CAP: usize = 2048;

/// One training example: the partial input and its prepared ground truth.
#[derive(Debug, Clone)]
pub struct TrainShape {
    pub input: Vec<Vec3>,
    pub cloud: LabeledCloud,
    pub gt: GtShape,
}

impl TrainShape {
    pub fn new(scan: &PartialScan, cloud: &LabeledCloud, type_count: usize) -> Result<TrainShape> {
        Self::from_points(scan.points.clone(), cloud, type_count, GT_POINT_CAP)
    }

    pub fn from_points(input: Vec<Vec3>, cloud: &LabeledCloud, type_count: usize, cap: usize) -> Result<TrainShape> {
        let cloud = thin(cloud, cap)?;
        let gt = GtShape::new(&cloud, type_count)?;
        Ok(TrainShape { input, cloud, gt })
    }
}

/// Every `stride`-th point, plus the first point of any primitive left empty.
fn thin(cloud: &LabeledCloud, cap: usize) -> Result<LabeledCloud> {
    if cloud.len() <= cap {
        return Ok(cloud.clone());
    }
    let stride = cloud.len().div_ceil(cap);
    let mut keep: Vec<usize> = (0..cloud.len()).step_by(stride).collect();
    for g in 1..=cloud.primitives.len() {
        if !keep.iter().any(|&i| cloud.labels[i] == g) {
            if let Some(i) = cloud.labels.iter().position(|&l| l == g) {
                keep.push(i);
            }
        }
    }
    keep.sort_unstable();
    LabeledCloud::from_labels(
        keep.iter().map(|&i| cloud.points[i]).collect(),
        keep.iter().map(|&i| cloud.labels[i]).collect(),
        cloud.primitives.iter().map(|bp| bp.quadric.clone()).collect(),
    )
    .map_err(|e| NetworkError::Config(e.to_string()))
}

/// Discrete choices of one loss evaluation: targets, matching, correspondences
/// and max-pool winners.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapePlan {
    pub targets: Vec<Vec<usize>>,
    pub loss: LossPlan,
    pub pool_argmax: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct ShapeEval {
    pub output: ForwardOutput,
    pub loss: LossOutput,
    pub plan: ShapePlan,
}

pub(super) fn loss_for_output(
    model: &Model,
    out: &ForwardOutput,
    shape: &TrainShape,
    w: &CostWeights,
    plan: Option<&ShapePlan>,
) -> Result<(LossOutput, Vec<Vec<usize>>)> {
    let cfg = &model.config;
    let diverged = [
        ("points", out.points.iter().all(|p| p.iter().all(|v| v.is_finite()))),
        ("semantic", out.probs.is_finite()),
        ("membership", out.membership.is_finite()),
        ("param", out.theta.iter().flatten().all(|v| v.is_finite())),
    ]
    .into_iter()
    .find(|(_, ok)| !ok);
    if let Some((term, _)) = diverged {
        return Err(NetworkError::NonFiniteLoss { term: term.to_string() });
    }
    let targets = match plan {
        Some(p) => p.targets.clone(),
        None => induce_targets(&PatchedPrediction::new(cfg.u, cfg.j, out.points.clone()), &shape.cloud).target_sets,
    };
    let inputs = LossInputs {
        type_count: cfg.type_count,
        probs: &out.probs.data,
        membership: &out.membership.data,
        theta: &out.theta,
        points: &out.points,
    };
    let loss = total_loss(&inputs, &shape.gt, &targets, w, plan.map(|p| &p.loss))?;
    Ok((loss, targets))
}

/// Forward pass, online targets and total loss for one shape.
pub fn evaluate_shape(
    model: &Model,
    shape: &TrainShape,
    w: &CostWeights,
    plan: Option<&ShapePlan>,
) -> Result<ShapeEval> {
    let opts = ForwardOptions { temperature: 1.0, pool_argmax: plan.map(|p| p.pool_argmax.clone()) };
    let output = model.forward(&shape.input, &opts);
    let (loss, targets) = loss_for_output(model, &output, shape, w, plan)?;
    let plan = ShapePlan { targets, loss: loss.plan.clone(), pool_argmax: output.pool_argmax.clone() };
    Ok(ShapeEval { output, loss, plan })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    /// Multiplicative learning-rate decay applied every `decay_every` epochs.
    pub decay: f64,
    pub decay_every: usize,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig { lr: 2e-3, weight_decay: 5e-4, decay: 0.9, decay_every: 20, epochs: 250, batch_size: 1 }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.lr.is_finite()
            && self.weight_decay >= 0.0
            && self.decay > 0.0
            && self.decay <= 1.0
            && self.decay_every > 0
            && self.batch_size > 0;
        if ok {
            Ok(())
        } else {
            Err(NetworkError::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// AdamW with decoupled weight decay and a stepwise epoch schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub config: OptimConfig,
    pub step: u64,
    pub samples_seen: u64,
    pub dataset_size: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamW {
    pub fn new(config: OptimConfig, param_count: usize, dataset_size: usize) -> AdamW {
        AdamW {
            config,
            step: 0,
            samples_seen: 0,
            dataset_size: dataset_size.max(1) as u64,
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
        }
    }

    pub fn epoch(&self) -> u64 {
        self.samples_seen / self.dataset_size
    }

    pub fn current_lr(&self) -> f64 {
        let k = self.epoch() / self.config.decay_every as u64;
        self.config.lr * self.config.decay.powi(k as i32)
    }

    pub fn update(&mut self, params: &mut [f64], grads: &[f64], samples: usize) {
        let lr = self.current_lr();
        self.step += 1;
        let t = self.step as i32;
        let (c1, c2) = (1.0 - BETA1.powi(t), 1.0 - BETA2.powi(t));
        let wd = self.config.weight_decay;
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = BETA1 * self.m[i] + (1.0 - BETA1) * g;
            self.v[i] = BETA2 * self.v[i] + (1.0 - BETA2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= lr * (mh / (vh.sqrt() + ADAM_EPS) + wd * params[i]);
        }
        self.samples_seen += samples as u64;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: u64,
    pub lr: f64,
    pub total: f64,
    /// Batch mean of each loss term.
    pub breakdown: LossBreakdown,
}

/// One optimization step on the mean loss of `batch`.
pub fn train_step(model: &mut Model, opt: &mut AdamW, batch: &[&TrainShape], w: &CostWeights) -> Result<StepReport> {
    let mut grads = vec![0.0; model.param_count()];
    let mut breakdown = LossBreakdown::default();
    let n = batch.len().max(1) as f64;
    for shape in batch {
        let ev = evaluate_shape(model, shape, w, None)?;
        if let Some(term) = ev.loss.breakdown.non_finite_term() {
            return Err(NetworkError::NonFiniteLoss { term: term.to_string() });
        }
        let g = model.backward(&ev.output, &ev.loss.grads)?;
        for (a, b) in grads.iter_mut().zip(&g) {
            *a += b / n;
        }
        breakdown.add(&ev.loss.breakdown);
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(NetworkError::NonFiniteLoss { term: "gradient".into() });
    }
    let scale = |v: f64| v / n;
    let breakdown = LossBreakdown {
        semantic: scale(breakdown.semantic),
        membership: scale(breakdown.membership),
        chamfer: scale(breakdown.chamfer),
        param: scale(breakdown.param),
        null: scale(breakdown.null),
        points: scale(breakdown.points),
    };
    let lr = opt.current_lr();
    opt.update(&mut model.params, &grads, batch.len());
    if model.params.iter().any(|p| !p.is_finite()) {
        return Err(NetworkError::NonFiniteLoss { term: "parameters".into() });
    }
    Ok(StepReport { step: opt.step, lr, total: breakdown.total(), breakdown })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::ModelConfig;
    use crate::scene::{generate_shape, make_partial, ShapeSpec};

    fn shape(seed: u64) -> TrainShape {
        let spec = ShapeSpec { primitive_count_range: (2, 6), point_count: 512, ..ShapeSpec::default() }.with_seed(seed);
        let cloud = generate_shape(&spec).unwrap();
        let scan = make_partial(&cloud, "s", 0.25, seed, 128).unwrap();
        TrainShape::new(&scan, &cloud, 5).unwrap()
    }

    #[test]
    fn identical_seeds_give_identical_trajectories() {
        let data = [shape(1), shape(2)];
        let run = || {
            let mut m = Model::new(ModelConfig::default()).unwrap();
            let mut opt = AdamW::new(OptimConfig::default(), m.param_count(), 2);
            let mut losses = Vec::new();
            for i in 0..4 {
                let r = train_step(&mut m, &mut opt, &[&data[i % 2]], &CostWeights::default()).unwrap();
                losses.push(r.total.to_bits());
            }
            (m.params.iter().map(|p| p.to_bits()).collect::<Vec<_>>(), losses)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn breakdown_sums_to_total() {
        let data = shape(3);
        let mut m = Model::new(ModelConfig::default()).unwrap();
        let mut opt = AdamW::new(OptimConfig::default(), m.param_count(), 1);
        let r = train_step(&mut m, &mut opt, &[&data], &CostWeights::default()).unwrap();
        let b = r.breakdown;
        let sum = b.semantic + b.membership + b.chamfer + b.param + b.null + b.points;
        assert!((sum - r.total).abs() < 1e-9);
    }

    #[test]
    fn learning_rate_decays_per_interval() {
        let cfg = OptimConfig { decay_every: 2, ..OptimConfig::default() };
        let mut opt = AdamW::new(cfg, 1, 4);
        let mut p = [0.0];
        assert_eq!(opt.current_lr(), 2e-3);
        for _ in 0..8 {
            opt.update(&mut p, &[0.0], 1);
        }
        assert!((opt.current_lr() - 2e-3 * 0.9).abs() < 1e-15);
    }

    #[test]
    fn exploding_learning_rate_reports_a_term() {
        let data = shape(4);
        let mut m = Model::new(ModelConfig::default()).unwrap();
        let cfg = OptimConfig { lr: 1e300, ..OptimConfig::default() };
        let mut opt = AdamW::new(cfg, m.param_count(), 1);
        let err = (0..5).find_map(|_| train_step(&mut m, &mut opt, &[&data], &CostWeights::default()).err());
        assert!(matches!(err, Some(NetworkError::NonFiniteLoss { .. })), "{err:?}");
    }
}
