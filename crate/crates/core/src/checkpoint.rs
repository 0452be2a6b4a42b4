//! Plain-text model checkpoints.
//!
//! ```text
//! safnet-checkpoint v1
//! class_count 4
//! config {...one line of JSON...}
//! history 3.1 2.7 ...
//! tensor gsm.a1 1
//! 0.1
//! ...
//! end
//! ```
//!
//! Tensors appear in the model's visit order; each value line holds the
//! whole tensor, space separated, written with Rust's shortest round-trip
//! float formatting so a reload is bit-exact.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::fusion::SafnetModel;
use crate::nn::ParamSet;
use crate::train::TrainConfig;

pub const MAGIC: &str = "safnet-checkpoint v1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: SafnetModel,
    pub config: TrainConfig,
    pub history: Vec<f64>,
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<String> {
    let mut out = String::new();
    writeln!(out, "{MAGIC}").unwrap();
    writeln!(out, "class_count {}", ckpt.model.class_count()).unwrap();
    writeln!(out, "config {}", serde_json::to_string(&ckpt.config)?).unwrap();
    out.push_str("history");
    for h in &ckpt.history {
        write!(out, " {h}").unwrap();
    }
    out.push('\n');
    ckpt.model.visit(&mut |name, t| {
        writeln!(out, "tensor {name} {}", t.len()).unwrap();
        let line: Vec<String> = t.iter().map(|v| v.to_string()).collect();
        writeln!(out, "{}", line.join(" ")).unwrap();
    });
    out.push_str("end\n");
    Ok(out)
}

pub fn decode_checkpoint(text: &str, origin: &str) -> Result<Checkpoint> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let parse_err = |line: usize, message: String| Error::Parse {
        path: origin.to_string(),
        line,
        message,
    };
    let mut next = |what: &str| {
        lines
            .next()
            .ok_or_else(|| parse_err(0, format!("unexpected end of file, expected {what}")))
    };

    let (n, magic) = next("header")?;
    if magic != MAGIC {
        return Err(parse_err(n, format!("expected '{MAGIC}'")));
    }
    let (n, cc) = next("class_count")?;
    let class_count: usize = cc
        .strip_prefix("class_count ")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| parse_err(n, "malformed class_count line".into()))?;
    let (n, cfg) = next("config")?;
    let config: TrainConfig = serde_json::from_str(
        cfg.strip_prefix("config ")
            .ok_or_else(|| parse_err(n, "malformed config line".into()))?,
    )
    .map_err(|e| parse_err(n, format!("config: {e}")))?;
    let (n, hist) = next("history")?;
    let history = hist
        .strip_prefix("history")
        .ok_or_else(|| parse_err(n, "malformed history line".into()))?
        .split_whitespace()
        .map(|v| v.parse::<f64>().map_err(|e| parse_err(n, format!("history: {e}"))))
        .collect::<Result<Vec<_>>>()?;

    if class_count == 0 || class_count > crate::fusion::HEAD_WIDTH {
        return Err(parse_err(2, format!("class_count {class_count} outside 1..={}", crate::fusion::HEAD_WIDTH)));
    }
    let mut model = SafnetModel::zeros(class_count);
    let mut expected = Vec::new();
    model.visit(&mut |name, t| expected.push((name.to_string(), t.len())));
    let mut values = Vec::with_capacity(model.param_count());
    for (name, len) in &expected {
        let (n, head) = next("tensor header")?;
        let mut parts = head.split_whitespace();
        if parts.next() != Some("tensor") || parts.next() != Some(name.as_str()) {
            return Err(parse_err(n, format!("expected tensor {name}")));
        }
        if parts.next().and_then(|v| v.parse::<usize>().ok()) != Some(*len) {
            return Err(parse_err(n, format!("tensor {name} should have {len} values")));
        }
        let (n, body) = next("tensor values")?;
        let before = values.len();
        for v in body.split_whitespace() {
            values.push(v.parse::<f64>().map_err(|e| parse_err(n, format!("{name}: {e}")))?);
        }
        if values.len() - before != *len {
            return Err(parse_err(n, format!("tensor {name} has {} values, expected {len}", values.len() - before)));
        }
    }
    let (n, end) = next("end")?;
    if end != "end" {
        return Err(parse_err(n, "expected 'end'".into()));
    }
    model.assign_flat(&values);
    if !model.is_finite() {
        return Err(parse_err(0, "non-finite parameter".into()));
    }
    Ok(Checkpoint { model, config, history })
}

pub fn write_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_checkpoint(ckpt)?).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&text, &path.display().to_string())
}
