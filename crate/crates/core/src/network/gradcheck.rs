//! Central-difference verification of the analytic gradient of the total loss
//! with every discrete decision frozen.

use serde::{Deserialize, Serialize};

use super::model::{ForwardOptions, Model};
use super::train::{evaluate_shape, loss_for_output, TrainShape};
use super::Result;
use crate::assignment::CostWeights;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckOptions {
    pub h: f64,
    pub tol: f64,
    /// Lower bound on the denominator of the relative error.
    pub floor: f64,
    /// Parameter-group prefix whose analytic gradient is deliberately damaged.
    pub corrupt: Option<String>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions { h: 1e-5, tol: 1e-4, floor: 1e-5, corrupt: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub name: String,
    pub params: usize,
    pub max_rel: f64,
    /// Offset of the worst entry inside the group.
    pub worst: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub loss: f64,
    pub params: usize,
    pub layers: Vec<LayerReport>,
    pub max_rel: f64,
    pub worst_layer: String,
    pub passed: bool,
}

pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Compares every parameter's analytic gradient against central differences.
pub fn gradcheck(model: &Model, shape: &TrainShape, w: &CostWeights, opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let ev = evaluate_shape(model, shape, w, None)?;
    let mut analytic = model.backward(&ev.output, &ev.loss.grads)?;
    if let Some(prefix) = &opts.corrupt {
        for g in model.groups().iter().filter(|g| g.name.starts_with(prefix.as_str())) {
            analytic[g.start..g.start + g.len].iter_mut().for_each(|a| *a = 1.5 * *a + 1e-3);
        }
    }
    let fopts = ForwardOptions { temperature: 1.0, pool_argmax: Some(ev.plan.pool_argmax.clone()) };
    let mut m = model.clone();
    let mut layers = Vec::with_capacity(model.groups().len());
    for g in model.groups() {
        let mut rep = LayerReport { name: g.name.clone(), params: g.len, max_rel: 0.0, worst: 0, analytic: 0.0, numeric: 0.0 };
        for i in g.start..g.start + g.len {
            let x = m.params[i];
            let mut eval = |v: f64| -> Result<f64> {
                m.params[i] = v;
                let out = m.forward_from(&ev.output, g.stage, &fopts);
                Ok(loss_for_output(&m, &out, shape, w, Some(&ev.plan))?.0.total)
            };
            let (lp, lm) = (eval(x + opts.h)?, eval(x - opts.h)?);
            m.params[i] = x;
            let numeric = (lp - lm) / (2.0 * opts.h);
            let rel = relative_error(analytic[i], numeric, opts.floor);
            if rel > rep.max_rel || !rel.is_finite() {
                rep.max_rel = if rel.is_finite() { rel } else { f64::INFINITY };
                rep.worst = i - g.start;
                rep.analytic = analytic[i];
                rep.numeric = numeric;
            }
        }
        layers.push(rep);
    }
    let worst = layers.iter().max_by(|a, b| a.max_rel.total_cmp(&b.max_rel)).expect("at least one group");
    Ok(GradcheckReport {
        loss: ev.loss.total,
        params: model.param_count(),
        max_rel: worst.max_rel,
        worst_layer: format!("{}[{}]", worst.name, worst.worst),
        passed: worst.max_rel < opts.tol,
        layers,
    })
}
