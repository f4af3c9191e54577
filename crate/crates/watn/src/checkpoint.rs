//! Checkpoint file format.
//!
//! Layout, all multi-byte integers little-endian:
//!
//! ```text
//! bytes 0..4    magic "WATN"
//! bytes 4..8    format_version, u32
//! bytes 8..16   text block length N, u64
//! bytes 16..16+N  UTF-8 key-value text block (dims, epoch, config, history)
//! bytes 16+N..  parameter tensors, raw f64 values in the canonical field
//!               order (w_z, w_r, w_h, u_z, u_r, u_h, b_z, b_r, b_h, w_a,
//!               b_a, w_q, w_o, b_o), each row-major
//! ```
//!
//! Real values in the text block are written with Rust's shortest
//! round-trip float formatting, so save followed by load reproduces every
//! field bit-exactly.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use watn_core::net::{ModelDims, ModelParams};
use watn_core::optim::{
    Checkpoint, HistoryEntry, OptimizerKind, SelectionMetric, TrainConfig,
    CHECKPOINT_FORMAT_VERSION,
};

use crate::error::FormatError;

const MAGIC: &[u8; 4] = b"WATN";
const HEADER_LEN: usize = 16;

/// Serializes a checkpoint to bytes.
pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>, FormatError> {
    let dims = ckpt.params.dims;
    let mut text = String::new();
    let _ = writeln!(text, "dims.feat_dim = {}", dims.feat_dim);
    let _ = writeln!(text, "dims.hidden = {}", dims.hidden);
    let _ = writeln!(text, "dims.num_actions = {}", dims.num_actions);
    let _ = writeln!(text, "dims.num_recipes = {}", dims.num_recipes);
    let _ = writeln!(text, "epoch = {}", ckpt.epoch);
    let c = &ckpt.config;
    let _ = writeln!(text, "config.epochs = {}", c.epochs);
    let _ = writeln!(text, "config.batch_size = {}", c.batch_size);
    let _ = writeln!(text, "config.learning_rate = {}", c.learning_rate);
    let _ = writeln!(text, "config.optimizer = {}", c.optimizer.as_str());
    let _ = writeln!(text, "config.weight_decay = {}", c.weight_decay);
    let _ = writeln!(text, "config.dropout_p = {}", c.dropout_p);
    let _ = writeln!(text, "config.lambda_act = {}", c.lambda_act);
    let _ = writeln!(text, "config.lambda_div = {}", c.lambda_div);
    let _ = writeln!(text, "config.seed = {}", c.seed);
    let _ = writeln!(text, "config.eval_every = {}", c.eval_every);
    let _ = writeln!(text, "config.selection_metric = {}", c.selection_metric.as_str());
    for entry in &ckpt.metric_history {
        for token in [entry.split.as_str(), entry.metric.as_str()] {
            if token.is_empty() || token.chars().any(char::is_whitespace) {
                return Err(FormatError::InvalidHistoryToken { token: token.to_string() });
            }
        }
        let _ = writeln!(
            text,
            "history = {} {} {} {}",
            entry.epoch, entry.split, entry.metric, entry.value
        );
    }

    let flat = ckpt.params.to_flat();
    let mut out = Vec::with_capacity(HEADER_LEN + text.len() + flat.len() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&ckpt.format_version.to_le_bytes());
    out.extend_from_slice(&(text.len() as u64).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    for v in flat {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

struct TextBlock<'a> {
    pairs: Vec<(&'a str, &'a str)>,
}

impl<'a> TextBlock<'a> {
    fn parse(text: &'a str) -> Result<TextBlock<'a>, FormatError> {
        let mut pairs = Vec::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| FormatError::Parse {
                line: line.to_string(),
                reason: "expected `key = value`".to_string(),
            })?;
            pairs.push((key.trim(), value.trim()));
        }
        Ok(TextBlock { pairs })
    }

    fn get(&self, key: &str) -> Result<&'a str, FormatError> {
        self.pairs
            .iter()
            .find(|(k, _)| *k == key)
            .map(|(_, v)| *v)
            .ok_or_else(|| FormatError::MissingKey { key: key.to_string() })
    }

    fn parse_value<T: std::str::FromStr>(&self, key: &str) -> Result<T, FormatError> {
        let raw = self.get(key)?;
        raw.parse().map_err(|_| FormatError::BadValue {
            key: key.to_string(),
            value: raw.to_string(),
        })
    }
}

pub(crate) fn parse_optimizer(raw: &str) -> Option<OptimizerKind> {
    match raw {
        "sgd" => Some(OptimizerKind::Sgd),
        "adam" => Some(OptimizerKind::Adam),
        _ => None,
    }
}

pub(crate) fn parse_selection_metric(raw: &str) -> Option<SelectionMetric> {
    match raw {
        "recipe_accuracy" => Some(SelectionMetric::RecipeAccuracy),
        "action_f1" => Some(SelectionMetric::ActionF1),
        _ => None,
    }
}

/// Deserializes a checkpoint, reporting bad magic, version mismatch and
/// truncation as distinct errors.
pub fn decode_checkpoint(data: &[u8]) -> Result<Checkpoint, FormatError> {
    if data.len() < HEADER_LEN {
        return Err(FormatError::Truncated { expected: HEADER_LEN, actual: data.len() });
    }
    if &data[0..4] != MAGIC {
        let mut found = [0u8; 4];
        found.copy_from_slice(&data[0..4]);
        return Err(FormatError::BadMagic { found });
    }
    let format_version = u32::from_le_bytes(data[4..8].try_into().expect("4 bytes"));
    if format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(FormatError::UnsupportedVersion {
            found: format_version,
            expected: CHECKPOINT_FORMAT_VERSION,
        });
    }
    let text_len = u64::from_le_bytes(data[8..16].try_into().expect("8 bytes")) as usize;
    if data.len() < HEADER_LEN + text_len {
        return Err(FormatError::Truncated {
            expected: HEADER_LEN + text_len,
            actual: data.len(),
        });
    }
    let text = std::str::from_utf8(&data[HEADER_LEN..HEADER_LEN + text_len])
        .map_err(|_| FormatError::BadTextEncoding)?;
    let block = TextBlock::parse(text)?;

    let dims = ModelDims {
        feat_dim: block.parse_value("dims.feat_dim")?,
        hidden: block.parse_value("dims.hidden")?,
        num_actions: block.parse_value("dims.num_actions")?,
        num_recipes: block.parse_value("dims.num_recipes")?,
    };
    let epoch: usize = block.parse_value("epoch")?;

    let optimizer_raw = block.get("config.optimizer")?;
    let optimizer = parse_optimizer(optimizer_raw).ok_or_else(|| FormatError::BadValue {
        key: "config.optimizer".to_string(),
        value: optimizer_raw.to_string(),
    })?;
    let metric_raw = block.get("config.selection_metric")?;
    let selection_metric =
        parse_selection_metric(metric_raw).ok_or_else(|| FormatError::BadValue {
            key: "config.selection_metric".to_string(),
            value: metric_raw.to_string(),
        })?;
    let config = TrainConfig {
        epochs: block.parse_value("config.epochs")?,
        batch_size: block.parse_value("config.batch_size")?,
        learning_rate: block.parse_value("config.learning_rate")?,
        optimizer,
        weight_decay: block.parse_value("config.weight_decay")?,
        dropout_p: block.parse_value("config.dropout_p")?,
        lambda_act: block.parse_value("config.lambda_act")?,
        lambda_div: block.parse_value("config.lambda_div")?,
        seed: block.parse_value("config.seed")?,
        eval_every: block.parse_value("config.eval_every")?,
        selection_metric,
    };

    let mut metric_history = Vec::new();
    for (key, value) in &block.pairs {
        if *key != "history" {
            continue;
        }
        let fields: Vec<&str> = value.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(FormatError::Parse {
                line: value.to_string(),
                reason: "history entries are `epoch split metric value`".to_string(),
            });
        }
        let bad = |field: &str| FormatError::Parse {
            line: value.to_string(),
            reason: format!("cannot parse history field {field:?}"),
        };
        metric_history.push(HistoryEntry {
            epoch: fields[0].parse().map_err(|_| bad(fields[0]))?,
            split: fields[1].to_string(),
            metric: fields[2].to_string(),
            value: fields[3].parse().map_err(|_| bad(fields[3]))?,
        });
    }

    let count = ModelParams::param_count(&dims);
    let expected = HEADER_LEN + text_len + count * 8;
    if data.len() < expected {
        return Err(FormatError::Truncated { expected, actual: data.len() });
    }
    if data.len() > expected {
        return Err(FormatError::TrailingBytes { expected, actual: data.len() });
    }
    let mut flat = Vec::with_capacity(count);
    let body = &data[HEADER_LEN + text_len..];
    for chunk in body.chunks_exact(8) {
        let v = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
        if !v.is_finite() {
            return Err(FormatError::NonFiniteParam);
        }
        flat.push(v);
    }
    let params = ModelParams::from_flat(dims, &flat).map_err(|_| FormatError::Truncated {
        expected,
        actual: data.len(),
    })?;

    Ok(Checkpoint { params, config, epoch, metric_history, format_version })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<(), FormatError> {
    let bytes = encode_checkpoint(ckpt)?;
    fs::write(path, bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, FormatError> {
    let bytes = fs::read(path)?;
    decode_checkpoint(&bytes)
}
