//! End-to-end runs: configuration, training data, the training loop and
//! evaluation of a model against labeled shapes.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assignment::CostWeights;
use crate::geometry::{sign_invariant_l1, PrimitiveType, Vec3};
use crate::inference::{candidates, refine_project, select, Candidate, DEFAULT_THRESHOLD};
use crate::metrics::{evaluate, EvalPrimitive, EvalReport, MetricsError, EVAL_SAMPLES};
use crate::network::{
    evaluate_shape, gradcheck, inlier_sets, train_step, AdamW, GradcheckOptions, GradcheckReport, Model, ModelConfig,
    NetworkError, OptimConfig, StepReport, TrainShape,
};
use crate::scene::{add_noise, generate_shape, make_partial, LabeledCloud, PartialScan, SceneError, ShapeSpec};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;

/// Synthetic data and scan protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub spec: ShapeSpec,
    /// Fraction of each shape removed by the crop.
    pub ratio: f64,
    pub noise_sigma: f64,
    pub input_points: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            spec: ShapeSpec { primitive_count_range: (2, 8), point_count: 4096, ..ShapeSpec::default() },
            ratio: 0.25,
            noise_sigma: 0.0,
            input_points: 512,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub weights: CostWeights,
    pub optimizer: OptimConfig,
    pub data: DataConfig,
    pub threshold: f64,
    pub seed: u64,
    pub steps: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            weights: CostWeights::default(),
            optimizer: OptimConfig { batch_size: 8, decay_every: 250, ..OptimConfig::default() },
            data: DataConfig::default(),
            threshold: DEFAULT_THRESHOLD,
            seed: 0,
            steps: 2000,
        }
    }
}

impl RunConfig {
    /// Full-size model, optimizer schedule and scan protocol.
    pub fn full() -> Self {
        RunConfig {
            model: ModelConfig::full(),
            optimizer: OptimConfig::default(),
            data: DataConfig { spec: ShapeSpec::default(), ratio: 0.5, noise_sigma: 0.0, input_points: 2048 },
            steps: 0,
            ..RunConfig::default()
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.optimizer.validate()?;
        self.weights.validate().map_err(PipelineError::Config)?;
        self.data.spec.validate()?;
        let d = &self.data;
        if !(d.ratio > 0.0 && d.ratio < 1.0) || !(d.noise_sigma >= 0.0) || d.input_points == 0 {
            return Err(PipelineError::Config(format!("invalid data settings: ratio {}, sigma {}", d.ratio, d.noise_sigma)));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(PipelineError::Config(format!("threshold {} outside [0, 1]", self.threshold)));
        }
        Ok(())
    }

    /// Epochs implied by `steps` at the configured batch size.
    pub fn dataset_steps(&self, shapes: usize) -> usize {
        if self.steps > 0 {
            self.steps
        } else {
            (self.optimizer.epochs * shapes).div_ceil(self.optimizer.batch_size)
        }
    }
}

/// Partial scan of shape `index` under the configured crop ratio and noise.
pub fn scan_for(cloud: &LabeledCloud, index: usize, data: &DataConfig, ratio: f64, seed: u64) -> Result<PartialScan> {
    let crop_seed = seed.wrapping_add(index as u64);
    let scan = make_partial(cloud, &format!("shape_{index:04}"), ratio, crop_seed, data.input_points)?;
    Ok(if data.noise_sigma > 0.0 { add_noise(&scan, data.noise_sigma, crop_seed ^ 0x5eed) } else { scan })
}

pub fn training_shapes(clouds: &[LabeledCloud], cfg: &RunConfig) -> Result<Vec<TrainShape>> {
    clouds
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let scan = scan_for(c, i, &cfg.data, cfg.data.ratio, cfg.seed)?;
            Ok(TrainShape::new(&scan, c, cfg.model.type_count)?)
        })
        .collect()
}

/// Runs `steps` optimizer steps. Batches cycle through `shapes` starting at
/// the optimizer's sample count, so a resumed run continues the same sequence.
pub fn train(
    model: &mut Model,
    opt: &mut AdamW,
    shapes: &[TrainShape],
    w: &CostWeights,
    steps: usize,
    mut on_step: impl FnMut(&StepReport),
) -> Result<()> {
    if shapes.is_empty() {
        return Err(PipelineError::Config("no training shapes".into()));
    }
    let bs = opt.config.batch_size;
    for _ in 0..steps {
        let start = opt.samples_seen as usize;
        let batch: Vec<&TrainShape> = (0..bs).map(|i| &shapes[(start + i) % shapes.len()]).collect();
        let r = train_step(model, opt, &batch, w)?;
        on_step(&r);
    }
    Ok(())
}

/// How closely matched candidates reproduce their training targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub pairs: usize,
    pub type_accuracy: f64,
    pub mean_iou: f64,
    pub mean_theta_l1: f64,
    pub worst_theta_l1: f64,
}

pub fn fit_report(model: &Model, shapes: &[TrainShape], w: &CostWeights) -> Result<FitReport> {
    let (mut n, mut typed, mut iou, mut l1, mut worst) = (0usize, 0usize, 0.0, 0.0, 0.0f64);
    let c = model.config.type_count;
    for s in shapes {
        let ev = evaluate_shape(model, s, w, None)?;
        for &(k, g) in &ev.loss.matching.pairs {
            n += 1;
            let pr = ev.output.probs.row(k);
            if crate::inference::predicted_class(pr) == s.gt.classes[g] && s.gt.classes[g] + 1 < c {
                typed += 1;
            }
            let inl = inlier_sets(ev.output.membership.row(k));
            let tgt = &ev.plan.targets[g];
            let inter = inl.iter().filter(|u| tgt.contains(u)).count();
            let union = inl.len() + tgt.len() - inter;
            iou += if union == 0 { 1.0 } else { inter as f64 / union as f64 };
            let d = sign_invariant_l1(&ev.output.theta[k], &s.gt.thetas[g]).0;
            l1 += d;
            worst = worst.max(d);
        }
    }
    let m = n.max(1) as f64;
    Ok(FitReport { pairs: n, type_accuracy: typed as f64 / m, mean_iou: iou / m, mean_theta_l1: l1 / m, worst_theta_l1: worst })
}

/// Selected candidates for one scan, optionally projected onto their quadrics.
pub fn predict(model: &Model, input: &[Vec3], threshold: f64, project: bool) -> (Vec<Candidate>, Vec<Vec3>) {
    let out = model.infer(input);
    let mut chosen = select(&candidates(&out, model.config.type_count), threshold);
    if project {
        chosen.iter_mut().for_each(|c| {
            refine_project(c);
        });
    }
    (chosen, out.points)
}

pub fn gt_primitives(cloud: &LabeledCloud) -> Vec<EvalPrimitive> {
    cloud.primitives.iter().enumerate().filter_map(|(i, bp)| EvalPrimitive::from_bounded(bp, i)).collect()
}

pub fn pred_primitives(chosen: &[Candidate]) -> Vec<EvalPrimitive> {
    chosen
        .iter()
        .filter(|c| c.ptype != PrimitiveType::Null)
        .filter_map(|c| {
            let q = c.quadric?;
            EvalPrimitive::sampled(c.ptype, q, c.points.clone(), EVAL_SAMPLES, c.index as u64)
        })
        .collect()
}

/// Evaluates the model's selected primitives for one scan against its shape.
pub fn evaluate_scan(model: &Model, input: &[Vec3], cloud: &LabeledCloud, threshold: f64, project: bool) -> Result<EvalReport> {
    let (chosen, completed) = predict(model, input, threshold, project);
    Ok(evaluate(&pred_primitives(&chosen), &gt_primitives(cloud), &completed)?)
}

/// Ground truth evaluated against itself.
pub fn oracle_report(cloud: &LabeledCloud) -> Result<EvalReport> {
    let gt = gt_primitives(cloud);
    Ok(evaluate(&gt, &gt, &cloud.points)?)
}

/// Small shape and freshly initialized model for one finite-difference check.
pub fn gradcheck_case(model: &ModelConfig, seed: u64) -> Result<(Model, TrainShape)> {
    let spec = ShapeSpec { primitive_count_range: (2, 6), point_count: 256, ..ShapeSpec::default() }.with_seed(seed);
    let cloud = generate_shape(&spec)?;
    let scan = make_partial(&cloud, "gradcheck", 0.25, seed, 32)?;
    let shape = TrainShape::new(&scan, &cloud, model.type_count)?;
    Ok((Model::new(ModelConfig { seed, ..model.clone() })?, shape))
}

pub fn gradcheck_seeds(cfg: &RunConfig, seeds: &[u64], opts: &GradcheckOptions) -> Result<Vec<GradcheckReport>> {
    seeds
        .iter()
        .map(|&s| {
            let (m, shape) = gradcheck_case(&cfg.model, s)?;
            Ok(gradcheck(&m, &shape, &cfg.weights, opts)?)
        })
        .collect()
}
