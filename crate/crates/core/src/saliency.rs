//! Victim-node selection: time-dependent node saliency (TDNS) plus the
//! random, degree, betweenness-centrality, and PageRank baselines.
//!
//! TDNS runs a short unmasked projected-gradient loop per sample, reads the
//! input gradient at the final iterate, averages the gradients over the
//! batch, rectifies with ReLU, and scores each node by the L2 norm over its
//! time and feature axes. Every selector breaks ties toward the lower node
//! index so selections are deterministic.

use crate::attack::clip_ball;
use crate::data::{StateWindow, TrafficNetwork};
use crate::error::{Result, StadvError};
use crate::forecaster::StModel;
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use std::collections::VecDeque;

/// Per-node saliency scores plus the raw fused gradient they came from.
#[derive(Debug, Clone)]
pub struct SaliencyVector {
    /// Non-negative per-node score.
    pub per_node: Vec<f64>,
    /// Batch-averaged input gradient, `T x n x c`.
    pub fused_gradient: Tensor,
}

impl SaliencyVector {
    /// CSV rendering: `node,score` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("node,score\n");
        for (i, s) in self.per_node.iter().enumerate() {
            out.push_str(&format!("{},{}\n", i, s));
        }
        out
    }
}

/// Which nodes an attack may perturb; constant across a window's time steps.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VictimMask {
    selected: Vec<bool>,
    eta: usize,
}

impl VictimMask {
    pub fn new(selected: Vec<bool>, eta: usize) -> Result<Self> {
        let count = selected.iter().filter(|&&s| s).count();
        if count > eta {
            return Err(StadvError::invalid(format!(
                "mask selects {} nodes, budget is {}",
                count, eta
            )));
        }
        Ok(VictimMask { selected, eta })
    }

    pub fn empty(n: usize) -> Self {
        VictimMask {
            selected: vec![false; n],
            eta: 0,
        }
    }

    pub fn node_count(&self) -> usize {
        self.selected.len()
    }

    pub fn eta(&self) -> usize {
        self.eta
    }

    pub fn is_selected(&self, node: usize) -> bool {
        self.selected[node]
    }

    pub fn selected_nodes(&self) -> Vec<usize> {
        self.selected
            .iter()
            .enumerate()
            .filter_map(|(i, &s)| if s { Some(i) } else { None })
            .collect()
    }

    pub fn count(&self) -> usize {
        self.selected.iter().filter(|&&s| s).count()
    }

    /// 0/1 mask tensor of shape `t x n x c` for masking input updates.
    pub fn to_tensor(&self, t: usize, c: usize) -> Tensor {
        Tensor::from_fn(&[t, self.selected.len(), c], |idx| {
            if self.selected[idx[1]] {
                1.0
            } else {
                0.0
            }
        })
    }
}

/// Select the `eta` largest scores, ties broken toward the lower index.
pub fn select_topk(scores: &[f64], eta: usize) -> Result<VictimMask> {
    let n = scores.len();
    if eta == 0 || eta > n {
        return Err(StadvError::invalid(format!(
            "victim budget {} out of range 1..={}",
            eta, n
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut selected = vec![false; n];
    for &i in order.iter().take(eta) {
        selected[i] = true;
    }
    VictimMask::new(selected, eta)
}

/// Time-dependent node saliency over a batch of (window, target-labels)
/// samples. `labels` are `tau x n` normalized targets. When `accumulate` is
/// set the gradient is averaged across all iterates instead of read once at
/// the final one.
pub fn tdns_saliency(
    model: &StModel,
    samples: &[(&StateWindow, &Tensor)],
    eps: f64,
    alpha: f64,
    iters: usize,
    accumulate: bool,
) -> Result<SaliencyVector> {
    if samples.is_empty() {
        return Err(StadvError::invalid("tdns_saliency needs a non-empty batch"));
    }
    if !(alpha > 0.0) || iters == 0 || eps < 0.0 {
        return Err(StadvError::invalid(
            "tdns_saliency needs eps >= 0, alpha > 0, iters >= 1",
        ));
    }
    let per_sample: Vec<Result<Tensor>> = samples
        .par_iter()
        .map(|(window, labels)| {
            let labels_nt = labels.transpose2d()?; // [n, tau] for the loss
            let reference = &window.inputs;
            let mut current = reference.clone();
            let mut accumulated = Tensor::zeros(reference.shape());
            for _ in 0..iters {
                let (_, grad) = model.loss_and_input_grad(&current, &labels_nt)?;
                if accumulate {
                    accumulated.add_scaled(&grad, 1.0);
                }
                let stepped = current.zip_map(&grad, |x, g| x + alpha * sign(g))?;
                current = clip_ball(&stepped, reference, eps)?;
            }
            let (_, final_grad) = model.loss_and_input_grad(&current, &labels_nt)?;
            if accumulate {
                accumulated.add_scaled(&final_grad, 1.0);
                accumulated.scale(1.0 / (iters as f64 + 1.0));
                Ok(accumulated)
            } else {
                Ok(final_grad)
            }
        })
        .collect();

    let mut fused: Option<Tensor> = None;
    for res in per_sample {
        let g = res?;
        match &mut fused {
            Some(f) => f.add_scaled(&g, 1.0),
            slot @ None => *slot = Some(g),
        }
    }
    let mut fused = fused.expect("non-empty batch");
    fused.scale(1.0 / samples.len() as f64);

    let shape = fused.shape().to_vec();
    let (t, n, c) = (shape[0], shape[1], shape[2]);
    let mut per_node = vec![0.0f64; n];
    for step in 0..t {
        for node in 0..n {
            for feat in 0..c {
                let v = fused.get(&[step, node, feat]).max(0.0);
                per_node[node] += v * v;
            }
        }
    }
    for s in &mut per_node {
        *s = s.sqrt();
    }
    Ok(SaliencyVector {
        per_node,
        fused_gradient: fused,
    })
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Uniform victim sample without replacement.
pub fn select_random(n: usize, eta: usize, rng: &mut ChaCha20Rng) -> Result<VictimMask> {
    if eta == 0 || eta > n {
        return Err(StadvError::invalid(format!(
            "victim budget {} out of range 1..={}",
            eta, n
        )));
    }
    let mut nodes: Vec<usize> = (0..n).collect();
    nodes.shuffle(rng);
    let mut selected = vec![false; n];
    for &i in nodes.iter().take(eta) {
        selected[i] = true;
    }
    VictimMask::new(selected, eta)
}

/// Highest-degree victims.
pub fn select_degree(graph: &TrafficNetwork, eta: usize) -> Result<VictimMask> {
    let scores: Vec<f64> = graph.degrees().iter().map(|&d| d as f64).collect();
    select_topk(&scores, eta)
}

/// Betweenness centrality over unweighted shortest paths (Brandes), with
/// each unordered pair counted once. Components are handled independently:
/// unreachable pairs contribute nothing.
pub fn betweenness_scores(graph: &TrafficNetwork) -> Vec<f64> {
    let n = graph.node_count();
    let mut centrality = vec![0.0f64; n];
    for source in 0..n {
        let mut stack = Vec::new();
        let mut preds: Vec<Vec<usize>> = vec![Vec::new(); n];
        let mut sigma = vec![0.0f64; n];
        let mut dist = vec![-1i64; n];
        sigma[source] = 1.0;
        dist[source] = 0;
        let mut queue = VecDeque::new();
        queue.push_back(source);
        while let Some(v) = queue.pop_front() {
            stack.push(v);
            for &(w, _) in graph.neighbors(v) {
                if dist[w] < 0 {
                    dist[w] = dist[v] + 1;
                    queue.push_back(w);
                }
                if dist[w] == dist[v] + 1 {
                    sigma[w] += sigma[v];
                    preds[w].push(v);
                }
            }
        }
        let mut delta = vec![0.0f64; n];
        while let Some(w) = stack.pop() {
            for &v in &preds[w] {
                delta[v] += sigma[v] / sigma[w] * (1.0 + delta[w]);
            }
            if w != source {
                centrality[w] += delta[w];
            }
        }
    }
    // Each unordered pair was accumulated from both endpoints.
    for c in &mut centrality {
        *c /= 2.0;
    }
    centrality
}

pub fn select_betweenness(graph: &TrafficNetwork, eta: usize) -> Result<VictimMask> {
    select_topk(&betweenness_scores(graph), eta)
}

/// PageRank scores by power iteration on the weighted row-stochastic
/// transition with uniform teleport. Dangling nodes redistribute uniformly.
pub fn pagerank_scores(graph: &TrafficNetwork, damping: f64, iters: usize) -> Vec<f64> {
    let n = graph.node_count();
    if n == 0 {
        return Vec::new();
    }
    let weight_sums: Vec<f64> = (0..n)
        .map(|i| graph.neighbors(i).iter().map(|&(_, w)| w).sum())
        .collect();
    let mut rank = vec![1.0 / n as f64; n];
    let mut next = vec![0.0f64; n];
    for _ in 0..iters {
        let mut dangling = 0.0;
        for (i, &ws) in weight_sums.iter().enumerate() {
            if ws == 0.0 {
                dangling += rank[i];
            }
        }
        let base = (1.0 - damping) / n as f64 + damping * dangling / n as f64;
        next.iter_mut().for_each(|v| *v = base);
        for i in 0..n {
            if weight_sums[i] > 0.0 {
                let share = damping * rank[i] / weight_sums[i];
                for &(j, w) in graph.neighbors(i) {
                    next[j] += share * w;
                }
            }
        }
        let delta: f64 = rank
            .iter()
            .zip(&next)
            .map(|(a, b)| (a - b).abs())
            .sum();
        std::mem::swap(&mut rank, &mut next);
        if delta < 1e-15 {
            break;
        }
    }
    rank
}

pub fn select_pagerank(
    graph: &TrafficNetwork,
    eta: usize,
    damping: f64,
    iters: usize,
) -> Result<VictimMask> {
    if graph.node_count() == 0 {
        return Err(StadvError::invalid("pagerank on an empty graph"));
    }
    select_topk(&pagerank_scores(graph, damping, iters), eta)
}
