//! Flat, ordered, human-readable checkpoint format: one `feature weight`
//! line per feature id in schema order, bias last. Weights are printed in
//! shortest round-trip form, so save/load is lossless and byte-stable.
//!
//! A companion stats file (`feature,count` CSV) carries per-feature
//! occurrence counts for weight inspection.

use crate::analysis::GroupLayout;
use crate::error::{FedSimError, Result};
use crate::features::FeatureSchema;
use crate::model::ModelParams;

pub fn checkpoint_to_string(params: &ModelParams, schema: &FeatureSchema) -> Result<String> {
    if params.schema_id() != schema.schema_id() || params.dimension() != schema.total_dimension() {
        return Err(FedSimError::SchemaMismatch(
            "checkpoint schema does not match params".into(),
        ));
    }
    let mut out = String::new();
    for (id, w) in params.weights().iter().enumerate() {
        out.push_str(&format!("{} {}\n", schema.feature_name(id), w));
    }
    out.push_str(&format!("bias {}\n", params.bias()));
    Ok(out)
}

/// Parsed checkpoint: named weights in file order plus the bias.
#[derive(Debug, Clone)]
pub struct CheckpointData {
    pub entries: Vec<(String, f64)>,
    pub bias: f64,
}

impl CheckpointData {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        let mut bias: Option<f64> = None;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if bias.is_some() {
                return Err(FedSimError::MalformedCheckpoint(format!(
                    "line {}: content after the bias line",
                    lineno + 1
                )));
            }
            let (name, value) = line.rsplit_once(' ').ok_or_else(|| {
                FedSimError::MalformedCheckpoint(format!(
                    "line {}: expected `<feature> <weight>`",
                    lineno + 1
                ))
            })?;
            let value: f64 = value.parse().map_err(|_| {
                FedSimError::MalformedCheckpoint(format!(
                    "line {}: {value:?} is not a number",
                    lineno + 1
                ))
            })?;
            if name == "bias" {
                bias = Some(value);
            } else {
                entries.push((name.to_string(), value));
            }
        }
        let bias = bias
            .ok_or_else(|| FedSimError::MalformedCheckpoint("missing trailing bias line".into()))?;
        if entries.is_empty() {
            return Err(FedSimError::MalformedCheckpoint("no weight lines".into()));
        }
        Ok(Self { entries, bias })
    }

    pub fn weights(&self) -> Vec<f64> {
        self.entries.iter().map(|(_, w)| *w).collect()
    }

    /// Binds the checkpoint to a schema, verifying name-for-name layout
    /// agreement. The loaded version is zero; checkpoints record
    /// parameters, not round history.
    pub fn into_params(self, schema: &FeatureSchema) -> Result<ModelParams> {
        if self.entries.len() != schema.total_dimension() {
            return Err(FedSimError::SchemaMismatch(format!(
                "checkpoint has {} weights, schema expects {}",
                self.entries.len(),
                schema.total_dimension()
            )));
        }
        for (id, (name, _)) in self.entries.iter().enumerate() {
            let expect = schema.feature_name(id);
            if *name != expect {
                return Err(FedSimError::SchemaMismatch(format!(
                    "feature {id}: checkpoint says {name:?}, schema says {expect:?}"
                )));
            }
        }
        let bias = self.bias;
        let weights = self.entries.into_iter().map(|(_, w)| w).collect();
        Ok(ModelParams::from_parts(
            weights,
            bias,
            0,
            schema.schema_id(),
        ))
    }

    /// Recovers the group layout from feature names alone: consecutive
    /// `name[...]` lines with the same base form one group. Groups with
    /// numeric indices are treated as order-bearing, so inspection
    /// without a schema emits monotonicity verdicts for all of them.
    pub fn recover_layout(&self) -> Vec<GroupLayout> {
        let mut groups: Vec<GroupLayout> = Vec::new();
        let mut numeric: Vec<bool> = Vec::new();
        for (offset, (name, _)) in self.entries.iter().enumerate() {
            let (base, index) = match name.split_once('[') {
                Some((base, rest)) => (base, Some(rest.trim_end_matches(']'))),
                None => (name.as_str(), None),
            };
            let is_numeric = index.is_some_and(|i| i.parse::<usize>().is_ok());
            match groups.last_mut() {
                Some(last) if last.name == base && index.is_some() => {
                    last.width += 1;
                    *numeric.last_mut().unwrap() &= is_numeric;
                }
                _ => {
                    groups.push(GroupLayout {
                        name: base.to_string(),
                        offset,
                        width: 1,
                        binned: false,
                    });
                    numeric.push(index.is_some() && is_numeric);
                }
            }
        }
        for (g, n) in groups.iter_mut().zip(numeric) {
            g.binned = n && g.width > 1;
        }
        groups
    }
}

pub const STATS_HEADER: &str = "feature,count";

pub fn stats_to_string(schema: &FeatureSchema, counts: &[u64]) -> Result<String> {
    if counts.len() != schema.total_dimension() {
        return Err(FedSimError::MalformedStats(format!(
            "expected {} counts, got {}",
            schema.total_dimension(),
            counts.len()
        )));
    }
    let mut out = String::from(STATS_HEADER);
    out.push('\n');
    for (id, c) in counts.iter().enumerate() {
        out.push_str(&format!("{},{}\n", schema.feature_name(id), c));
    }
    Ok(out)
}

/// Parses a stats file and aligns the counts to the checkpoint's feature
/// order by name.
pub fn parse_stats(text: &str, checkpoint: &CheckpointData) -> Result<Vec<u64>> {
    let mut by_name = std::collections::BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line == STATS_HEADER {
            continue;
        }
        let (name, count) = line.rsplit_once(',').ok_or_else(|| {
            FedSimError::MalformedStats(format!("line {}: expected `feature,count`", lineno + 1))
        })?;
        let count: u64 = count.parse().map_err(|_| {
            FedSimError::MalformedStats(format!("line {}: {count:?} is not a count", lineno + 1))
        })?;
        by_name.insert(name.to_string(), count);
    }
    checkpoint
        .entries
        .iter()
        .map(|(name, _)| {
            by_name.get(name).copied().ok_or_else(|| {
                FedSimError::MalformedStats(format!("no occurrence count for feature {name:?}"))
            })
        })
        .collect()
}
