//! Config file loading: one TOML document with a section per pipeline stage
//! (`[pretrain]`, `[amt2]`, `[moco]`, `[finetune]`, `[model]`, `[optimizer]`,
//! `[eval]`) and a top-level `seed`. `--set section.key=value` edits the
//! document before it is interpreted, so overrides go through the same
//! validation as the file.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;
use toml::{Table, Value};

use segpre::eval::DecodeConfig;
use segpre::trainer::TrainConfig;

use crate::CliError;

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ResolvedConfig {
    #[serde(flatten)]
    pub train: TrainConfig,
    pub eval: DecodeConfig,
}

pub fn load(path: Option<&Path>, sets: &[String]) -> Result<ResolvedConfig> {
    let mut doc = match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            text.parse::<Table>()
                .map_err(|e| CliError::Usage(format!("config {}: {e}", p.display())))?
        }
        None => Table::new(),
    };
    for s in sets {
        apply_set(&mut doc, s)?;
    }
    let eval = match doc.remove("eval") {
        Some(v) => v
            .try_into::<DecodeConfig>()
            .map_err(|e| CliError::Usage(format!("[eval]: {e}")))?,
        None => DecodeConfig::default(),
    };
    let train: TrainConfig = Value::Table(doc)
        .try_into()
        .map_err(|e| CliError::Usage(format!("config: {e}")))?;
    Ok(ResolvedConfig { train, eval })
}

/// `a.b=value`; the value is read as a TOML literal, falling back to a bare
/// string.
fn apply_set(doc: &mut Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("--set expects key=value, got {assignment:?}")))?;
    let value = format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    let (last, path) = parts.split_last().expect("split yields at least one part");
    let mut table = doc;
    for p in path {
        let entry = table.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Usage(format!("--set {key}: `{p}` is not a section")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sets_override_defaults() {
        let c = load(None, &["finetune.steps=3".into(), "amt2.alpha=0.5".into(), "eval.score_thresh=0.2".into()]).unwrap();
        assert_eq!(c.train.finetune.steps, 3);
        assert_eq!(c.train.amt2.alpha, 0.5);
        assert_eq!(c.eval.score_thresh, 0.2);
        assert_eq!(c.train.pretrain, TrainConfig::default().pretrain);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(load(None, &["finetune.stpes=3".into()]).is_err());
        assert!(load(None, &["nonsense".into()]).is_err());
    }
}
