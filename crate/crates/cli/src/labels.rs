//! Per-participant label files (`irda-labels/1`).

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

pub const LABELS_SCHEMA: &str = "irda-labels/1";

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LabelsFile {
    pub schema: String,
    /// participant → item id → label.
    pub participants: BTreeMap<String, BTreeMap<String, u8>>,
}

impl LabelsFile {
    pub fn new(participants: BTreeMap<String, BTreeMap<String, u8>>) -> Self {
        Self { schema: LABELS_SCHEMA.to_string(), participants }
    }

    pub fn read(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let file: Self = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        if file.schema != LABELS_SCHEMA {
            bail!("{}: unsupported schema `{}`", path.display(), file.schema);
        }
        if let Some((p, id, l)) = file
            .participants
            .iter()
            .flat_map(|(p, m)| m.iter().map(move |(id, l)| (p, id, l)))
            .find(|(_, _, l)| **l > 1)
        {
            bail!("{}: label {l} for `{id}` of `{p}` is not 0 or 1", path.display());
        }
        Ok(file)
    }

    pub fn write(&self, path: &Path) -> anyhow::Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?).with_context(|| format!("writing {}", path.display()))
    }
}
