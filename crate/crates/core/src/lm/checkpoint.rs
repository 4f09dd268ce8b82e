//! Plain-text checkpoints. Values are written with 17 significant digits,
//! which round-trips every f64, so save → load → save is byte-identical.
//!
//! ```text
//! thattn-checkpoint 1
//! vocab_size 12
//! seq_len 6
//! config {"layers":2,...}
//! tensor embed vocab:12 d:8
//! 1.2000000000000000e-1 -3.4000000000000001e-2 ...
//! ```

use std::fmt::Write as _;
use std::path::Path;

use super::model::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::{Axis, Tensor};

const MAGIC: &str = "thattn-checkpoint";
const VERSION: u32 = 1;

pub fn checkpoint_to_string(model: &Model) -> String {
    let mut out = String::new();
    let config = serde_json::to_string(model.config()).expect("config serializes");
    writeln!(out, "{MAGIC} {VERSION}").unwrap();
    writeln!(out, "vocab_size {}", model.vocab_size()).unwrap();
    writeln!(out, "seq_len {}", model.seq_len()).unwrap();
    writeln!(out, "config {config}").unwrap();
    for (name, t) in model.params() {
        write!(out, "tensor {name}").unwrap();
        for a in t.axes() {
            write!(out, " {}:{}", a.name, a.size).unwrap();
        }
        out.push('\n');
        let values: Vec<String> = t.data().iter().map(|v| format!("{v:.16e}")).collect();
        out.push_str(&values.join(" "));
        out.push('\n');
    }
    out
}

pub fn checkpoint_from_str(text: &str) -> Result<Model> {
    let bad = |msg: String| Error::Checkpoint(msg);
    let mut lines = text.lines().enumerate();
    let mut header = |key: &str| -> Result<&str> {
        let (no, line) = lines
            .next()
            .ok_or_else(|| bad(format!("missing `{key}` line")))?;
        line.strip_prefix(key)
            .and_then(|rest| rest.strip_prefix(' '))
            .ok_or_else(|| bad(format!("line {}: expected `{key}`", no + 1)))
    };
    let version = header(MAGIC)?;
    if version != VERSION.to_string() {
        return Err(bad(format!("unsupported format version {version}")));
    }
    let parse_usize = |s: &str, what: &str| {
        s.parse::<usize>()
            .map_err(|_| bad(format!("bad {what} `{s}`")))
    };
    let vocab_size = parse_usize(header("vocab_size")?, "vocab_size")?;
    let seq_len = parse_usize(header("seq_len")?, "seq_len")?;
    let config: ModelConfig =
        serde_json::from_str(header("config")?).map_err(|e| bad(format!("bad config: {e}")))?;

    let mut params = Vec::new();
    while let Some((no, line)) = lines.next() {
        let mut words = line
            .strip_prefix("tensor ")
            .ok_or_else(|| bad(format!("line {}: expected `tensor`", no + 1)))?
            .split(' ');
        let name = words.next().unwrap_or_default().to_string();
        let axes = words
            .map(|w| {
                let (n, s) = w
                    .split_once(':')
                    .ok_or_else(|| bad(format!("line {}: bad axis `{w}`", no + 1)))?;
                Ok(Axis::new(n, parse_usize(s, "axis size")?))
            })
            .collect::<Result<Vec<_>>>()?;
        let (no, values) = lines
            .next()
            .ok_or_else(|| bad(format!("tensor `{name}` has no values")))?;
        let data = values
            .split(' ')
            .filter(|w| !w.is_empty())
            .map(|w| {
                w.parse::<f64>()
                    .map_err(|_| bad(format!("line {}: bad value `{w}`", no + 1)))
            })
            .collect::<Result<Vec<_>>>()?;
        let t = Tensor::new(axes, data).map_err(|e| bad(format!("tensor `{name}`: {e}")))?;
        params.push((name, t));
    }
    Model::from_params(&config, vocab_size, seq_len, params)
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    std::fs::write(path, checkpoint_to_string(model))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    checkpoint_from_str(&text)
}
