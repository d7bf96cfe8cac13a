//! Traffic datasets: sensor graphs, speed series, normalization, windowing,
//! and chronological splits.
//!
//! Speed CSVs carry one header row of node identifiers and one row per time
//! step. Graph CSVs carry `from,to,weight` rows with zero-based node ids; the
//! loaded network is undirected and its topology is fixed for all windows.

use crate::error::{Result, StadvError};
use crate::rng::SeedStream;
use crate::tensor::Tensor;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use std::fmt::Write as _;
use std::path::Path;

/// Undirected weighted sensor network.
#[derive(Debug, Clone)]
pub struct TrafficNetwork {
    n: usize,
    edges: Vec<(usize, usize, f64)>,
    neighbors: Vec<Vec<(usize, f64)>>,
    degrees: Vec<usize>,
    max_degree: usize,
}

impl TrafficNetwork {
    /// Build from undirected edges `(u, v, weight)` with `weight` in `[0,1]`.
    pub fn new(n: usize, edges: Vec<(usize, usize, f64)>) -> Result<Self> {
        let mut neighbors = vec![Vec::new(); n];
        let mut seen = std::collections::HashSet::new();
        for &(u, v, w) in &edges {
            if u >= n || v >= n {
                return Err(StadvError::invalid(format!(
                    "edge ({},{}) out of range for {} nodes",
                    u, v, n
                )));
            }
            if u == v {
                return Err(StadvError::invalid(format!("self-loop on node {}", u)));
            }
            if !(0.0..=1.0).contains(&w) {
                return Err(StadvError::invalid(format!(
                    "edge ({},{}) weight {} outside [0,1]",
                    u, v, w
                )));
            }
            let key = (u.min(v), u.max(v));
            if !seen.insert(key) {
                return Err(StadvError::invalid(format!(
                    "duplicate edge between {} and {}",
                    u, v
                )));
            }
            neighbors[u].push((v, w));
            neighbors[v].push((u, w));
        }
        for list in &mut neighbors {
            list.sort_by_key(|&(j, _)| j);
        }
        let degrees: Vec<usize> = neighbors.iter().map(Vec::len).collect();
        let max_degree = degrees.iter().copied().max().unwrap_or(0);
        Ok(TrafficNetwork {
            n,
            edges,
            neighbors,
            degrees,
            max_degree,
        })
    }

    pub fn node_count(&self) -> usize {
        self.n
    }

    pub fn edges(&self) -> &[(usize, usize, f64)] {
        &self.edges
    }

    pub fn neighbors(&self, node: usize) -> &[(usize, f64)] {
        &self.neighbors[node]
    }

    pub fn degree(&self, node: usize) -> usize {
        self.degrees[node]
    }

    pub fn degrees(&self) -> &[usize] {
        &self.degrees
    }

    /// Maximum node degree, the constant `C` of the robustness bound.
    pub fn max_degree(&self) -> usize {
        self.max_degree
    }

    /// Row-normalized aggregation matrix with self-loops: entry `(i,j)` is
    /// `w_ij / (1 + sum_k w_ik)` and `(i,i)` is `1 / (1 + sum_k w_ik)`, so
    /// every row sums to one and every entry lies in `[0,1]`.
    pub fn aggregation_matrix(&self) -> Tensor {
        let n = self.n;
        let mut m = Tensor::zeros(&[n, n]);
        for i in 0..n {
            let wsum: f64 = self.neighbors[i].iter().map(|&(_, w)| w).sum();
            let denom = 1.0 + wsum;
            m.set(&[i, i], 1.0 / denom);
            for &(j, w) in &self.neighbors[i] {
                m.set(&[i, j], w / denom);
            }
        }
        m
    }

    /// Graph CSV rendering, one `from,to,weight` row per undirected edge.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for &(u, v, w) in &self.edges {
            let _ = writeln!(out, "{},{},{}", u, v, w);
        }
        out
    }
}

/// Raw speed measurements: `steps x n` values at a fixed sampling interval.
#[derive(Debug, Clone)]
pub struct SpeedSeries {
    steps: usize,
    n: usize,
    values: Vec<f64>,
    sampling_interval_minutes: u32,
}

impl SpeedSeries {
    pub fn new(steps: usize, n: usize, values: Vec<f64>, sampling_interval_minutes: u32) -> Result<Self> {
        if values.len() != steps * n {
            return Err(StadvError::invalid(format!(
                "speed series {}x{} needs {} values, got {}",
                steps,
                n,
                steps * n,
                values.len()
            )));
        }
        if values.iter().any(|v| *v < 0.0 || !v.is_finite()) {
            return Err(StadvError::invalid("speeds must be finite and >= 0"));
        }
        Ok(SpeedSeries {
            steps,
            n,
            values,
            sampling_interval_minutes,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn node_count(&self) -> usize {
        self.n
    }

    pub fn sampling_interval_minutes(&self) -> u32 {
        self.sampling_interval_minutes
    }

    pub fn get(&self, step: usize, node: usize) -> f64 {
        self.values[step * self.n + node]
    }

    pub fn row(&self, step: usize) -> &[f64] {
        &self.values[step * self.n..(step + 1) * self.n]
    }

    /// Speed CSV rendering: header of node ids, one row per step.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let header: Vec<String> = (0..self.n).map(|i| format!("node{}", i)).collect();
        let _ = writeln!(out, "{}", header.join(","));
        for step in 0..self.steps {
            let row: Vec<String> = self.row(step).iter().map(|v| format!("{}", v)).collect();
            let _ = writeln!(out, "{}", row.join(","));
        }
        out
    }
}

/// Min-max scaling parameters fit on the training portion of a series.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Normalizer {
    pub min: f64,
    pub max: f64,
}

impl Normalizer {
    /// Map to `[0,1]`, clamping values outside the fitted range.
    pub fn normalize(&self, v: f64) -> f64 {
        ((v - self.min) / (self.max - self.min)).clamp(0.0, 1.0)
    }

    /// Exact inverse of `normalize` for in-range values.
    pub fn denormalize(&self, u: f64) -> f64 {
        self.min + u * (self.max - self.min)
    }
}

/// One forecasting sample: `T x n x c` normalized inputs and `tau x n` labels
/// in raw speed units, anchored at the absolute index of its last input step.
#[derive(Debug, Clone)]
pub struct StateWindow {
    pub inputs: Tensor,
    pub labels: Tensor,
    pub anchor: usize,
}

impl StateWindow {
    pub fn t_in(&self) -> usize {
        self.inputs.shape()[0]
    }

    pub fn node_count(&self) -> usize {
        self.inputs.shape()[1]
    }

    pub fn horizon(&self) -> usize {
        self.labels.shape()[0]
    }
}

/// Chronologically split windows with the normalizer that produced them.
#[derive(Debug, Clone)]
pub struct DatasetSplit {
    windows: Vec<StateWindow>,
    train_end: usize,
    val_end: usize,
    pub normalizer: Normalizer,
}

impl DatasetSplit {
    pub fn train(&self) -> &[StateWindow] {
        &self.windows[..self.train_end]
    }

    pub fn validation(&self) -> &[StateWindow] {
        &self.windows[self.train_end..self.val_end]
    }

    pub fn test(&self) -> &[StateWindow] {
        &self.windows[self.val_end..]
    }

    /// All windows in anchor order, across the three splits.
    pub fn all(&self) -> &[StateWindow] {
        &self.windows
    }

    /// Index of the first test window within [`Self::all`].
    pub fn test_start(&self) -> usize {
        self.val_end
    }
}

fn parse_float(field: &str, line: usize) -> Result<f64> {
    field.trim().parse::<f64>().map_err(|_| StadvError::Parse {
        line,
        message: format!("not a number: {:?}", field.trim()),
    })
}

/// Parse a speed CSV. Empty cells are filled by carrying the same node's
/// previous observation forward (the first row must be complete).
pub fn load_speed_csv(path: impl AsRef<Path>) -> Result<SpeedSeries> {
    let text = std::fs::read_to_string(path)?;
    parse_speed_csv(&text)
}

pub fn parse_speed_csv(text: &str) -> Result<SpeedSeries> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or(StadvError::Parse {
        line: 1,
        message: "empty file".into(),
    })?;
    let n = header.split(',').count();
    if n == 0 || header.trim().is_empty() {
        return Err(StadvError::Parse {
            line: 1,
            message: "empty header".into(),
        });
    }
    let mut values: Vec<f64> = Vec::new();
    let mut steps = 0usize;
    for (idx, line) in lines {
        let lineno = idx + 1;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != n {
            return Err(StadvError::Parse {
                line: lineno,
                message: format!("expected {} columns, found {}", n, fields.len()),
            });
        }
        for (col, field) in fields.iter().enumerate() {
            if field.trim().is_empty() {
                // Last observation carried forward.
                if steps == 0 {
                    return Err(StadvError::Parse {
                        line: lineno,
                        message: format!("missing value in first data row, column {}", col),
                    });
                }
                let prev = values[(steps - 1) * n + col];
                values.push(prev);
            } else {
                values.push(parse_float(field, lineno)?);
            }
        }
        steps += 1;
    }
    if steps == 0 {
        return Err(StadvError::Parse {
            line: 1,
            message: "no data rows".into(),
        });
    }
    SpeedSeries::new(steps, n, values, 5)
}

/// Parse a graph CSV of `from,to,weight` rows into an undirected network.
pub fn load_graph_csv(path: impl AsRef<Path>, n: usize) -> Result<TrafficNetwork> {
    let text = std::fs::read_to_string(path)?;
    parse_graph_csv(&text, n)
}

pub fn parse_graph_csv(text: &str, n: usize) -> Result<TrafficNetwork> {
    let mut edges = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let lineno = idx + 1;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(StadvError::Parse {
                line: lineno,
                message: format!("expected from,to,weight, found {} fields", fields.len()),
            });
        }
        let from: usize = fields[0].trim().parse().map_err(|_| StadvError::Parse {
            line: lineno,
            message: format!("bad node id {:?}", fields[0]),
        })?;
        let to: usize = fields[1].trim().parse().map_err(|_| StadvError::Parse {
            line: lineno,
            message: format!("bad node id {:?}", fields[1]),
        })?;
        let w = parse_float(fields[2], lineno)?;
        edges.push((from, to, w));
    }
    TrafficNetwork::new(n, edges)
}

/// Diurnal period in steps for 5-minute sampling.
const DIURNAL_STEPS: f64 = 288.0;

/// Generate a synthetic sensor network and speed series.
///
/// Nodes are placed uniformly on the unit square and connected within radius
/// `1.5/sqrt(n)`. Per-node speeds follow `60 + 15 sin(diurnal phase)` with a
/// position-dependent phase, one step of neighbor averaging per tick, and
/// Gaussian noise (sigma = 2), floored at zero. Pure function of
/// `(n, steps, seed)`.
pub fn generate_synthetic(
    n: usize,
    steps: usize,
    seed: u64,
) -> Result<(TrafficNetwork, SpeedSeries)> {
    if n < 2 {
        return Err(StadvError::invalid("synthetic generation needs n >= 2"));
    }
    let streams = SeedStream::new(seed);
    let mut rng = streams.stream("data");
    let radius = 1.5 / (n as f64).sqrt();

    let positions: Vec<(f64, f64)> = (0..n)
        .map(|_| (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)))
        .collect();
    let mut edges = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            let dx = positions[i].0 - positions[j].0;
            let dy = positions[i].1 - positions[j].1;
            let dist = (dx * dx + dy * dy).sqrt();
            if dist < radius {
                let w = (-(dist / radius) * (dist / radius)).exp();
                edges.push((i, j, w));
            }
        }
    }
    let graph = TrafficNetwork::new(n, edges)?;

    // Spatially coherent diurnal phases keep nearby sensors in step.
    let phases: Vec<f64> = positions
        .iter()
        .map(|&(x, y)| {
            std::f64::consts::PI * (x + y) + rng.random_range(-0.3..0.3)
        })
        .collect();

    let noise = Normal::new(0.0, 2.0).expect("valid sigma");
    let mut values = Vec::with_capacity(steps * n);
    let mut raw = vec![0.0f64; n];
    for t in 0..steps {
        let angle = 2.0 * std::f64::consts::PI * t as f64 / DIURNAL_STEPS;
        for (i, r) in raw.iter_mut().enumerate() {
            *r = 60.0 + 15.0 * (angle + phases[i]).sin();
        }
        for i in 0..n {
            // One step of neighbor averaging.
            let mut acc = raw[i];
            let mut count = 1.0;
            for &(j, _) in graph.neighbors(i) {
                acc += raw[j];
                count += 1.0;
            }
            let smoothed = acc / count + noise.sample(&mut rng);
            values.push(smoothed.max(0.0));
        }
    }
    let series = SpeedSeries::new(steps, n, values, 5)?;
    Ok((graph, series))
}

/// Fraction of leading steps whose min/max define the scaling.
const TRAIN_FRACTION: f64 = 0.7;

/// Min-max normalize a series using the training-portion min/max.
pub fn normalize(series: &SpeedSeries) -> Result<(SpeedSeries, Normalizer)> {
    if series.steps() == 0 {
        return Err(StadvError::invalid("cannot normalize an empty series"));
    }
    let fit_steps = ((series.steps() as f64 * TRAIN_FRACTION).floor() as usize)
        .clamp(1, series.steps());
    let fit = &series.values[..fit_steps * series.n];
    let min = fit.iter().copied().fold(f64::INFINITY, f64::min);
    let max = fit.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if min == max {
        return Err(StadvError::invalid(
            "constant series: min equals max, cannot min-max scale",
        ));
    }
    let norm = Normalizer { min, max };
    let values = series.values.iter().map(|&v| norm.normalize(v)).collect();
    let normalized = SpeedSeries {
        steps: series.steps,
        n: series.n,
        values,
        sampling_interval_minutes: series.sampling_interval_minutes,
    };
    Ok((normalized, norm))
}

/// Cut a raw series into sliding windows (stride 1): inputs hold the last `T`
/// normalized steps, labels the next `tau` raw steps.
pub fn make_windows(
    series: &SpeedSeries,
    graph: &TrafficNetwork,
    normalizer: &Normalizer,
    t_in: usize,
    horizon: usize,
) -> Result<Vec<StateWindow>> {
    if series.node_count() != graph.node_count() {
        return Err(StadvError::invalid(format!(
            "series has {} nodes but graph has {}",
            series.node_count(),
            graph.node_count()
        )));
    }
    if t_in == 0 || horizon == 0 {
        return Err(StadvError::invalid("window lengths must be positive"));
    }
    if series.steps() < t_in + horizon {
        return Err(StadvError::invalid(format!(
            "series of {} steps too short for T={} plus tau={}",
            series.steps(),
            t_in,
            horizon
        )));
    }
    let n = series.node_count();
    let count = series.steps() - t_in - horizon + 1;
    let mut windows = Vec::with_capacity(count);
    for start in 0..count {
        let inputs = Tensor::from_fn(&[t_in, n, 1], |idx| {
            normalizer.normalize(series.get(start + idx[0], idx[1]))
        });
        let labels = Tensor::from_fn(&[horizon, n], |idx| {
            series.get(start + t_in + idx[0], idx[1])
        });
        windows.push(StateWindow {
            inputs,
            labels,
            anchor: start + t_in - 1,
        });
    }
    Ok(windows)
}

/// 70/10/20 chronological split: `floor(0.7 m)` train, `floor(0.1 m)`
/// validation, remainder test.
pub fn chronological_split(
    windows: Vec<StateWindow>,
    normalizer: Normalizer,
) -> Result<DatasetSplit> {
    let m = windows.len();
    if m < 10 {
        return Err(StadvError::invalid(format!(
            "need at least 10 windows to split, got {}",
            m
        )));
    }
    let train_end = (0.7 * m as f64).floor() as usize;
    let val_end = train_end + (0.1 * m as f64).floor() as usize;
    Ok(DatasetSplit {
        windows,
        train_end,
        val_end,
        normalizer,
    })
}

/// Contiguous batches of at most `batch_size` windows; the last batch may be
/// smaller.
pub fn batch_indices(total: usize, batch_size: usize) -> Result<Vec<std::ops::Range<usize>>> {
    if batch_size == 0 {
        return Err(StadvError::invalid("batch size must be >= 1"));
    }
    let mut out = Vec::new();
    let mut start = 0;
    while start < total {
        let end = (start + batch_size).min(total);
        out.push(start..end);
        start = end;
    }
    Ok(out)
}
