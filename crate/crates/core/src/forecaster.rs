//! The differentiable spatiotemporal forecaster and its training loop.
//!
//! Architecture: a causal temporal convolution stack (kernel 3) applied per
//! node, a mean-over-time collapse to one hidden vector per node, a stack of
//! graph-convolution layers `Z' = act(E (Z W))` over the row-normalized
//! self-looped aggregation matrix `E`, and a linear head mapping the final
//! embedding to `tau` forecasts per node. Every piece is recorded on one tape,
//! so gradients with respect to inputs (attacks) and weights (training) come
//! from the same backward pass.

use crate::data::{DatasetSplit, Normalizer, StateWindow, TrafficNetwork};
use crate::error::{Result, StadvError};
use crate::tape::{Activation, Bindings, NodeId, Tape};
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub nodes: usize,
    pub t_in: usize,
    pub horizon: usize,
    pub features: usize,
    pub temporal_layers: usize,
    pub temporal_hidden: usize,
    pub conv_layers: usize,
    pub hidden: usize,
    pub activation: Activation,
}

impl ModelConfig {
    /// Desk-scale defaults: T = tau = 12, three dilated temporal conv layers
    /// (receptive field 15, covering the whole window), two graph-conv
    /// layers of width 20, ReLU.
    pub fn for_nodes(nodes: usize) -> Self {
        ModelConfig {
            nodes,
            t_in: 12,
            horizon: 12,
            features: 1,
            temporal_layers: 3,
            temporal_hidden: 10,
            conv_layers: 2,
            hidden: 20,
            activation: Activation::Relu,
        }
    }

}

const TEMPORAL_KERNEL: usize = 3;

#[derive(Debug, Clone)]
struct TapePlan {
    tape: Tape,
    x: NodeId,
    labels: NodeId,
    params: Vec<NodeId>,
    pred: NodeId,
    conv_out: NodeId,
    loss: NodeId,
}

/// A trained (or trainable) spatiotemporal forecaster. Immutable while shared;
/// training replaces the parameter tensors in place.
#[derive(Debug, Clone)]
pub struct StModel {
    cfg: ModelConfig,
    aggregation: Tensor,
    param_names: Vec<String>,
    params: Vec<Tensor>,
    plan: TapePlan,
}

fn build_plan(cfg: &ModelConfig, aggregation: &Tensor) -> Result<(TapePlan, Vec<String>, Vec<Vec<usize>>)> {
    let (n, t, c) = (cfg.nodes, cfg.t_in, cfg.features);
    let mut tape = Tape::new();
    let x = tape.leaf(&[t, n, c]);
    let labels = tape.leaf(&[n, cfg.horizon]);

    let mut param_ids = Vec::new();
    let mut param_names = Vec::new();
    let mut param_shapes = Vec::new();
    let mut add_param = |tape: &mut Tape, name: String, shape: Vec<usize>| {
        let id = tape.leaf(&shape);
        param_ids.push(id);
        param_names.push(name);
        param_shapes.push(shape);
        id
    };

    // Temporal causal convolution stack; layer k uses dilation 2^k.
    let mut cur = x;
    let mut width = c;
    for layer in 0..cfg.temporal_layers {
        let out_w = cfg.temporal_hidden;
        let dilation = 1usize << layer;
        let mut terms = Vec::with_capacity(TEMPORAL_KERNEL);
        for tap in 0..TEMPORAL_KERNEL {
            let shift = tap * dilation;
            let kernel = add_param(
                &mut tape,
                format!("temporal.{}.kernel.{}", layer, tap),
                vec![width, out_w],
            );
            let shifted = if shift == 0 {
                cur
            } else {
                if shift >= t {
                    return Err(StadvError::invalid(format!(
                        "input length {} too short for temporal kernel {} at dilation {}",
                        t, TEMPORAL_KERNEL, dilation
                    )));
                }
                let pad = tape.constant(Tensor::zeros(&[shift, n, width]));
                let kept = tape.slice_axis0(cur, 0, t - shift)?;
                tape.concat_axis0(&[pad, kept])?
            };
            terms.push(tape.matmul(shifted, kernel)?);
        }
        let mut pre = terms[0];
        for &term in &terms[1..] {
            pre = tape.add(pre, term)?;
        }
        let bias = add_param(&mut tape, format!("temporal.{}.bias", layer), vec![out_w]);
        pre = tape.add(pre, bias)?;
        cur = cfg.activation.apply(&mut tape, pre);
        width = out_w;
    }

    // Collapse T steps to one hidden vector per node: the window mean alone
    // for the identity encoder, mean concatenated with the final step's
    // features (via constant embedding matrices) after a conv stack, so the
    // head sees both the smoothed level and the most recent state.
    let mut z;
    if cfg.temporal_layers == 0 {
        z = tape.mean_axis0(cur)?; // [n, width]
    } else {
        let mean = tape.mean_axis0(cur)?; // [n, width]
        let last_row = tape.slice_axis0(cur, t - 1, t)?; // [1, n, width]
        let last = tape.mean_axis0(last_row)?; // [n, width]
        let embed_lo = Tensor::from_fn(&[width, 2 * width], |i| {
            if i[1] == i[0] {
                1.0
            } else {
                0.0
            }
        });
        let embed_hi = Tensor::from_fn(&[width, 2 * width], |i| {
            if i[1] == i[0] + width {
                1.0
            } else {
                0.0
            }
        });
        let e_lo = tape.constant(embed_lo);
        let e_hi = tape.constant(embed_hi);
        let mean_part = tape.matmul(mean, e_lo)?;
        let last_part = tape.matmul(last, e_hi)?;
        z = tape.add(mean_part, last_part)?; // [n, 2 width]
        width *= 2;
    }

    // Graph convolution stack.
    let agg = tape.constant(aggregation.clone());
    for layer in 0..cfg.conv_layers {
        let w = add_param(
            &mut tape,
            format!("conv.{}.weight", layer),
            vec![width, cfg.hidden],
        );
        let zw = tape.matmul(z, w)?;
        let mixed = tape.matmul(agg, zw)?;
        z = cfg.activation.apply(&mut tape, mixed);
        width = cfg.hidden;
    }
    let conv_out = z;

    // Linear head to tau forecasts per node.
    let w_out = add_param(&mut tape, "head.weight".into(), vec![width, cfg.horizon]);
    let b_out = add_param(&mut tape, "head.bias".into(), vec![cfg.horizon]);
    let hw = tape.matmul(z, w_out)?;
    let pred = tape.add(hw, b_out)?; // [n, tau]

    // MAE loss against the bound label matrix.
    let resid = tape.sub(pred, labels)?;
    let abs = tape.abs(resid);
    let loss = tape.mean_all(abs);

    Ok((
        TapePlan {
            tape,
            x,
            labels,
            params: param_ids,
            pred,
            conv_out,
            loss,
        },
        param_names,
        param_shapes,
    ))
}

impl StModel {
    /// Fresh model with weights drawn from the given RNG and zero biases.
    pub fn init(cfg: ModelConfig, graph: &TrafficNetwork, rng: &mut ChaCha20Rng) -> Result<Self> {
        if graph.node_count() != cfg.nodes {
            return Err(StadvError::invalid(format!(
                "config expects {} nodes, graph has {}",
                cfg.nodes,
                graph.node_count()
            )));
        }
        let aggregation = graph.aggregation_matrix();
        let (plan, names, shapes) = build_plan(&cfg, &aggregation)?;
        let params = shapes
            .iter()
            .zip(&names)
            .map(|(shape, name)| {
                if name.ends_with("bias") {
                    Tensor::zeros(shape)
                } else {
                    let fan_in = shape[0] as f64;
                    let fan_out = shape[shape.len() - 1] as f64;
                    let sigma = (2.0 / (fan_in + fan_out)).sqrt();
                    let dist = Normal::new(0.0, sigma).expect("valid sigma");
                    Tensor::from_fn(shape, |_| dist.sample(rng))
                }
            })
            .collect();
        Ok(StModel {
            cfg,
            aggregation,
            param_names: names,
            params,
            plan,
        })
    }

    /// Reassemble a model from explicit parameter tensors (checkpoint load).
    pub fn from_parts(cfg: ModelConfig, aggregation: Tensor, params: Vec<(String, Tensor)>) -> Result<Self> {
        if aggregation.shape() != [cfg.nodes, cfg.nodes] {
            return Err(StadvError::invalid(format!(
                "aggregation shape {:?} does not match {} nodes",
                aggregation.shape(),
                cfg.nodes
            )));
        }
        let (plan, names, shapes) = build_plan(&cfg, &aggregation)?;
        let mut by_name: std::collections::HashMap<String, Tensor> = params.into_iter().collect();
        let mut ordered = Vec::with_capacity(names.len());
        for (name, shape) in names.iter().zip(&shapes) {
            let t = by_name
                .remove(name)
                .ok_or_else(|| StadvError::invalid(format!("missing parameter {:?}", name)))?;
            if t.shape() != shape.as_slice() {
                return Err(StadvError::invalid(format!(
                    "parameter {:?} has shape {:?}, expected {:?}",
                    name,
                    t.shape(),
                    shape
                )));
            }
            ordered.push(t);
        }
        if let Some(extra) = by_name.keys().next() {
            return Err(StadvError::invalid(format!("unknown parameter {:?}", extra)));
        }
        Ok(StModel {
            cfg,
            aggregation,
            param_names: names,
            params: ordered,
            plan,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn aggregation(&self) -> &Tensor {
        &self.aggregation
    }

    pub fn param_names(&self) -> &[String] {
        &self.param_names
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn set_param(&mut self, name: &str, value: Tensor) -> Result<()> {
        let idx = self
            .param_names
            .iter()
            .position(|p| p == name)
            .ok_or_else(|| StadvError::invalid(format!("no parameter named {:?}", name)))?;
        if value.shape() != self.params[idx].shape() {
            return Err(StadvError::ShapeMismatch {
                primitive: "set_param",
                lhs: self.params[idx].shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        self.params[idx] = value;
        Ok(())
    }

    /// Weight matrices of the graph-convolution stack, in layer order.
    pub fn conv_weights(&self) -> Vec<&Tensor> {
        self.param_names
            .iter()
            .zip(&self.params)
            .filter(|(name, _)| name.starts_with("conv."))
            .map(|(_, t)| t)
            .collect()
    }

    fn bindings(&self, inputs: &Tensor, labels: &Tensor) -> Bindings {
        let mut b = Bindings::new();
        b.set(self.plan.x, inputs.clone());
        b.set(self.plan.labels, labels.clone());
        for (id, value) in self.plan.params.iter().zip(&self.params) {
            b.set(*id, value.clone());
        }
        b
    }

    fn check_inputs(&self, inputs: &Tensor) -> Result<()> {
        let want = [self.cfg.t_in, self.cfg.nodes, self.cfg.features];
        if inputs.shape() != want {
            return Err(StadvError::ShapeMismatch {
                primitive: "predict inputs",
                lhs: want.to_vec(),
                rhs: inputs.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// Forecast `tau x n` normalized speeds from a window's inputs.
    pub fn predict_inputs(&self, inputs: &Tensor) -> Result<Tensor> {
        self.check_inputs(inputs)?;
        let zero_labels = Tensor::zeros(&[self.cfg.nodes, self.cfg.horizon]);
        let vals = self.plan.tape.forward(&self.bindings(inputs, &zero_labels))?;
        vals.get(self.plan.pred).transpose2d()
    }

    pub fn predict(&self, window: &StateWindow) -> Result<Tensor> {
        self.predict_inputs(&window.inputs)
    }

    /// Final graph-conv embedding `n x h` for a window's inputs.
    pub fn embed_inputs(&self, inputs: &Tensor) -> Result<Tensor> {
        self.check_inputs(inputs)?;
        let zero_labels = Tensor::zeros(&[self.cfg.nodes, self.cfg.horizon]);
        let vals = self.plan.tape.forward(&self.bindings(inputs, &zero_labels))?;
        Ok(vals.get(self.plan.conv_out).clone())
    }

    /// MAE loss and its gradient with respect to the input window.
    /// `labels` is the `n x tau` normalized label matrix.
    pub fn loss_and_input_grad(&self, inputs: &Tensor, labels: &Tensor) -> Result<(f64, Tensor)> {
        self.check_inputs(inputs)?;
        let vals = self.plan.tape.forward(&self.bindings(inputs, labels))?;
        let loss = vals.scalar(self.plan.loss);
        let grads = self.plan.tape.backward(&vals, self.plan.loss)?;
        Ok((loss, grads.get(self.plan.x).clone()))
    }

    /// MAE loss and its gradient with respect to every parameter.
    pub fn loss_and_param_grads(&self, inputs: &Tensor, labels: &Tensor) -> Result<(f64, Vec<Tensor>)> {
        self.check_inputs(inputs)?;
        let vals = self.plan.tape.forward(&self.bindings(inputs, labels))?;
        let loss = vals.scalar(self.plan.loss);
        let grads = self.plan.tape.backward(&vals, self.plan.loss)?;
        Ok((
            loss,
            self.plan.params.iter().map(|id| grads.get(*id).clone()).collect(),
        ))
    }

    /// Tape access for gradient checking.
    pub fn input_scalar_fn(&self, labels: &Tensor) -> crate::tape::TapeScalarFn<'_> {
        let mut fixed = vec![(self.plan.labels, labels.clone())];
        for (id, value) in self.plan.params.iter().zip(&self.params) {
            fixed.push((*id, value.clone()));
        }
        crate::tape::TapeScalarFn {
            tape: &self.plan.tape,
            input: self.plan.x,
            loss: self.plan.loss,
            fixed,
        }
    }
}

/// `n x tau` normalized label matrix for binding into the loss.
pub fn normalized_labels(window: &StateWindow, normalizer: &Normalizer) -> Tensor {
    let tau = window.horizon();
    let n = window.node_count();
    Tensor::from_fn(&[n, tau], |idx| {
        normalizer.normalize(window.labels.get(&[idx[1], idx[0]]))
    })
}

/// Map a normalized `tau x n` forecast back to raw speed units.
pub fn denormalize_forecast(pred: &Tensor, normalizer: &Normalizer) -> Tensor {
    pred.map(|v| normalizer.denormalize(v))
}

/// Forecast that repeats each node's last observed value across the horizon.
pub fn persistence_forecast(window: &StateWindow) -> Tensor {
    let t = window.t_in();
    let n = window.node_count();
    let tau = window.horizon();
    Tensor::from_fn(&[tau, n], |idx| window.inputs.get(&[t - 1, idx[1], 0]))
}

#[derive(Debug, Clone, Copy)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 40,
            learning_rate: 0.1,
            batch_size: 64,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    /// Raw mean MAE per epoch.
    pub epoch_loss: Vec<f64>,
    /// Running minimum of `epoch_loss` (monotone non-increasing).
    pub smoothed_loss: Vec<f64>,
}

/// One fixed-step gradient-descent update over a set of windows. Per-sample
/// gradients are computed in parallel and reduced in index order, so the
/// result is independent of scheduling.
pub fn train_step(
    model: &mut StModel,
    windows: &[&StateWindow],
    normalizer: &Normalizer,
    learning_rate: f64,
) -> Result<f64> {
    let per_sample: Vec<Result<(f64, Vec<Tensor>)>> = windows
        .par_iter()
        .map(|w| {
            let labels = normalized_labels(w, normalizer);
            model.loss_and_param_grads(&w.inputs, &labels)
        })
        .collect();
    let mut total_loss = 0.0;
    let mut acc: Option<Vec<Tensor>> = None;
    for res in per_sample {
        let (loss, grads) = res?;
        total_loss += loss;
        match &mut acc {
            Some(acc) => {
                for (a, g) in acc.iter_mut().zip(&grads) {
                    a.add_scaled(g, 1.0);
                }
            }
            None => acc = Some(grads),
        }
    }
    let count = windows.len() as f64;
    if let Some(acc) = acc {
        for (param, grad) in model.params.iter_mut().zip(&acc) {
            param.add_scaled(grad, -learning_rate / count);
        }
    }
    Ok(total_loss / count)
}

/// Train by plain gradient descent on mean MAE. Deterministic for a fixed
/// model initialization and configuration.
pub fn train(model: &mut StModel, split: &DatasetSplit, cfg: &TrainConfig) -> Result<TrainReport> {
    if split.train().is_empty() {
        return Err(StadvError::invalid("training split is empty"));
    }
    let batches = crate::data::batch_indices(split.train().len(), cfg.batch_size)?;
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);
    let mut smoothed_loss = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut loss_sum = 0.0;
        let mut count = 0.0;
        for range in &batches {
            let batch: Vec<&StateWindow> = split.train()[range.clone()].iter().collect();
            let batch_loss = train_step(model, &batch, &split.normalizer, cfg.learning_rate)?;
            loss_sum += batch_loss * batch.len() as f64;
            count += batch.len() as f64;
        }
        let mean = loss_sum / count;
        if !mean.is_finite() {
            return Err(StadvError::Diverged { epoch });
        }
        epoch_loss.push(mean);
        let best = smoothed_loss.last().copied().unwrap_or(f64::INFINITY);
        smoothed_loss.push(mean.min(best));
    }
    Ok(TrainReport {
        epoch_loss,
        smoothed_loss,
    })
}

/// Run several fixed-step phases in sequence (typically one coarse and one
/// fine learning rate; a single fixed step plateaus well short of what the
/// model can fit). Histories are concatenated.
pub fn train_schedule(
    model: &mut StModel,
    split: &DatasetSplit,
    phases: &[TrainConfig],
) -> Result<TrainReport> {
    if phases.is_empty() {
        return Err(StadvError::invalid("training schedule has no phases"));
    }
    let mut epoch_loss = Vec::new();
    let mut smoothed_loss: Vec<f64> = Vec::new();
    for phase in phases {
        let report = train(model, split, phase)?;
        for loss in report.epoch_loss {
            let best = smoothed_loss.last().copied().unwrap_or(f64::INFINITY);
            smoothed_loss.push(loss.min(best));
            epoch_loss.push(loss);
        }
    }
    Ok(TrainReport {
        epoch_loss,
        smoothed_loss,
    })
}

/// Default coarse + fine schedule used by the CLI and experiment drivers.
pub fn default_phases(seed: u64) -> [TrainConfig; 2] {
    [
        TrainConfig {
            epochs: 40,
            learning_rate: 0.1,
            batch_size: 64,
            seed,
        },
        TrainConfig {
            epochs: 40,
            learning_rate: 0.02,
            batch_size: 64,
            seed,
        },
    ]
}

/// Estimate the current input window from the immediately preceding one by
/// forecasting forward (rolling when the horizon is shorter than `T`).
/// The estimator is typically the pre-trained forecaster itself.
pub fn estimate_current_state(
    model: &StModel,
    previous: &StateWindow,
    allow_rolling: bool,
) -> Result<StateWindow> {
    let t = model.cfg.t_in;
    let tau = model.cfg.horizon;
    let n = model.cfg.nodes;
    if tau < t && !allow_rolling {
        return Err(StadvError::invalid(format!(
            "estimator horizon {} shorter than window length {} and rolling disabled",
            tau, t
        )));
    }
    let mut estimated: Vec<Vec<f64>> = Vec::with_capacity(t);
    let mut virtual_inputs = previous.inputs.clone();
    while estimated.len() < t {
        let pred = model.predict_inputs(&virtual_inputs)?; // [tau, n]
        let take = tau.min(t - estimated.len());
        for step in 0..take {
            let row: Vec<f64> = (0..n)
                .map(|i| pred.get(&[step, i]).clamp(0.0, 1.0))
                .collect();
            estimated.push(row);
        }
        if estimated.len() < t {
            // Shift the virtual window forward by the steps just predicted.
            let mut rows: Vec<Vec<f64>> = (0..t)
                .map(|s| (0..n).map(|i| virtual_inputs.get(&[s, i, 0])).collect())
                .collect();
            for step in 0..take {
                rows.remove(0);
                rows.push(estimated[estimated.len() - take + step].clone());
            }
            virtual_inputs = Tensor::from_fn(&[t, n, 1], |idx| rows[idx[0]][idx[1]]);
        }
    }
    let inputs = Tensor::from_fn(&[t, n, 1], |idx| estimated[idx[0]][idx[1]]);
    Ok(StateWindow {
        inputs,
        labels: Tensor::zeros(&[tau, n]),
        anchor: previous.anchor + t,
    })
}

/// Surrogate labels: the labeler's own forecast plus elementwise uniform
/// noise on `[-eps/10, eps/10]` to diversify the attack direction.
/// Returns the `tau x n` normalized label tensor.
pub fn surrogate_label(
    model: &StModel,
    window: &StateWindow,
    eps: f64,
    rng: &mut ChaCha20Rng,
) -> Result<Tensor> {
    if eps < 0.0 {
        return Err(StadvError::invalid("eps must be >= 0"));
    }
    let pred = model.predict_inputs(&window.inputs)?;
    if eps == 0.0 {
        return Ok(pred);
    }
    let bound = eps / 10.0;
    Ok(pred.map(|v| v + rng.random_range(-bound..bound)))
}
