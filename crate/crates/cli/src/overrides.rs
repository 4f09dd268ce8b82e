//! `key.path=value` overrides on a JSON config document.

use anyhow::{anyhow, bail};
use serde_json::Value;

/// Sets the dotted `key` to `value`, parsed as JSON when it parses and kept
/// as a string otherwise. Every parent object must already exist; unknown
/// leaf keys are left for the config schema to reject.
pub fn apply(doc: &mut Value, assignment: &str) -> anyhow::Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| anyhow!("override `{assignment}` is not KEY=VALUE"))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut parts: Vec<&str> = key.split('.').collect();
    let leaf = parts
        .pop()
        .filter(|l| !l.is_empty())
        .ok_or_else(|| anyhow!("empty override key"))?;
    let mut node = doc;
    for (i, p) in parts.iter().enumerate() {
        node = match node.get_mut(*p) {
            Some(n) if n.is_object() => n,
            _ => bail!(
                "override `{key}`: `{}` is not an object in the config",
                parts[..=i].join(".")
            ),
        };
    }
    match node.as_object_mut() {
        Some(obj) => {
            obj.insert(leaf.to_string(), value);
            Ok(())
        }
        None => bail!("override `{key}`: the config root is not an object"),
    }
}
