//! Model checkpoints: a versioned textual key->tensor archive.
//!
//! Layout: the magic line `STADV1`, `key=value` header lines (architecture,
//! activation, defense tag, and the dataset normalizer), then one
//! `tensor <name> <rank> <dims...>` line followed by one line of
//! space-separated hex-encoded f64 bit patterns per tensor, and a final
//! `end` line. Hex bit patterns make save/load round trips bit-exact.

use crate::data::Normalizer;
use crate::error::{Result, StadvError};
use crate::forecaster::{ModelConfig, StModel};
use crate::tape::Activation;
use crate::tensor::Tensor;
use std::fmt::Write as _;
use std::path::Path;

const MAGIC: &str = "STADV1";

fn f64_to_hex(v: f64) -> String {
    format!("{:016x}", v.to_bits())
}

fn f64_from_hex(s: &str, line: usize) -> Result<f64> {
    u64::from_str_radix(s, 16)
        .map(f64::from_bits)
        .map_err(|_| StadvError::Parse {
            line,
            message: format!("bad f64 hex {:?}", s),
        })
}

/// Serialize a model (with the normalizer that produced its training data
/// and a defense-strategy tag) to the STADV1 text format.
pub fn render_model(model: &StModel, normalizer: &Normalizer, defense: &str) -> String {
    let cfg = model.config();
    let mut out = String::new();
    let _ = writeln!(out, "{}", MAGIC);
    let _ = writeln!(out, "nodes={}", cfg.nodes);
    let _ = writeln!(out, "t_in={}", cfg.t_in);
    let _ = writeln!(out, "horizon={}", cfg.horizon);
    let _ = writeln!(out, "features={}", cfg.features);
    let _ = writeln!(out, "temporal_layers={}", cfg.temporal_layers);
    let _ = writeln!(out, "temporal_hidden={}", cfg.temporal_hidden);
    let _ = writeln!(out, "conv_layers={}", cfg.conv_layers);
    let _ = writeln!(out, "hidden={}", cfg.hidden);
    let _ = writeln!(out, "activation={}", cfg.activation.name());
    let _ = writeln!(out, "defense={}", defense);
    let _ = writeln!(out, "norm_min={}", f64_to_hex(normalizer.min));
    let _ = writeln!(out, "norm_max={}", f64_to_hex(normalizer.max));
    let write_tensor = |out: &mut String, name: &str, t: &Tensor| {
        let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        let _ = writeln!(out, "tensor {} {} {}", name, t.rank(), dims.join(" "));
        let values: Vec<String> = t.data().iter().map(|&v| f64_to_hex(v)).collect();
        let _ = writeln!(out, "{}", values.join(" "));
    };
    write_tensor(&mut out, "aggregation", model.aggregation());
    for (name, tensor) in model.param_names().iter().zip(model.params()) {
        write_tensor(&mut out, name, tensor);
    }
    let _ = writeln!(out, "end");
    out
}

pub fn save_model(
    path: impl AsRef<Path>,
    model: &StModel,
    normalizer: &Normalizer,
    defense: &str,
) -> Result<()> {
    std::fs::write(path, render_model(model, normalizer, defense))?;
    Ok(())
}

/// Parse an STADV1 archive back into a model, its normalizer, and its
/// defense tag.
pub fn parse_model(text: &str) -> Result<(StModel, Normalizer, String)> {
    let mut lines = text.lines().enumerate();
    let (_, magic) = lines.next().ok_or(StadvError::Parse {
        line: 1,
        message: "empty checkpoint".into(),
    })?;
    if magic.trim() != MAGIC {
        return Err(StadvError::Parse {
            line: 1,
            message: format!("bad magic {:?}, expected {:?}", magic, MAGIC),
        });
    }
    let mut header = std::collections::HashMap::new();
    let mut tensors: Vec<(String, Tensor)> = Vec::new();
    while let Some((idx, line)) = lines.next() {
        let lineno = idx + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if line == "end" {
            break;
        }
        if let Some(rest) = line.strip_prefix("tensor ") {
            let mut parts = rest.split_whitespace();
            let name = parts
                .next()
                .ok_or(StadvError::Parse {
                    line: lineno,
                    message: "tensor line missing name".into(),
                })?
                .to_string();
            let rank: usize = parts
                .next()
                .and_then(|r| r.parse().ok())
                .ok_or(StadvError::Parse {
                    line: lineno,
                    message: "tensor line missing rank".into(),
                })?;
            let dims: Vec<usize> = parts
                .map(|d| {
                    d.parse().map_err(|_| StadvError::Parse {
                        line: lineno,
                        message: format!("bad dimension {:?}", d),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            if dims.len() != rank {
                return Err(StadvError::Parse {
                    line: lineno,
                    message: format!("rank {} but {} dims", rank, dims.len()),
                });
            }
            let (vidx, vline) = lines.next().ok_or(StadvError::Parse {
                line: lineno,
                message: "tensor missing value line".into(),
            })?;
            let values: Vec<f64> = vline
                .split_whitespace()
                .map(|h| f64_from_hex(h, vidx + 1))
                .collect::<Result<Vec<_>>>()?;
            tensors.push((name, Tensor::new(dims, values).map_err(|e| StadvError::Parse {
                line: vidx + 1,
                message: e.to_string(),
            })?));
        } else if let Some((key, value)) = line.split_once('=') {
            header.insert(key.trim().to_string(), value.trim().to_string());
        } else {
            return Err(StadvError::Parse {
                line: lineno,
                message: format!("unrecognized line {:?}", line),
            });
        }
    }

    let get = |key: &str| -> Result<&String> {
        header.get(key).ok_or_else(|| StadvError::Parse {
            line: 0,
            message: format!("missing header field {:?}", key),
        })
    };
    let parse_usize = |key: &str| -> Result<usize> {
        get(key)?.parse().map_err(|_| StadvError::Parse {
            line: 0,
            message: format!("bad integer for {:?}", key),
        })
    };
    let cfg = ModelConfig {
        nodes: parse_usize("nodes")?,
        t_in: parse_usize("t_in")?,
        horizon: parse_usize("horizon")?,
        features: parse_usize("features")?,
        temporal_layers: parse_usize("temporal_layers")?,
        temporal_hidden: parse_usize("temporal_hidden")?,
        conv_layers: parse_usize("conv_layers")?,
        hidden: parse_usize("hidden")?,
        activation: Activation::parse(get("activation")?)?,
    };
    let normalizer = Normalizer {
        min: f64_from_hex(get("norm_min")?, 0)?,
        max: f64_from_hex(get("norm_max")?, 0)?,
    };
    let defense = get("defense")?.clone();
    let agg_idx = tensors.iter().position(|(name, _)| name == "aggregation");
    let aggregation = match agg_idx {
        Some(i) => tensors.remove(i).1,
        None => {
            return Err(StadvError::Parse {
                line: 0,
                message: "checkpoint has no aggregation tensor".into(),
            })
        }
    };
    let model = StModel::from_parts(cfg, aggregation, tensors)?;
    Ok((model, normalizer, defense))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<(StModel, Normalizer, String)> {
    let text = std::fs::read_to_string(path)?;
    parse_model(&text)
}
