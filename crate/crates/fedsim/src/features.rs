//! Feature schema and featurization for the triggering model.
//!
//! A schema is an ordered list of feature groups; every group owns a
//! contiguous range of feature ids. Count features are stored as
//! `ln(1 + count)`, the baseline score activates exactly one bin
//! indicator, and the temporal features are one-hot.

use std::collections::BTreeMap;

use crate::error::{FedSimError, Result};
use crate::rng::mix64;

pub type FeatureId = usize;

/// What a group encodes and how many feature ids it spans.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GroupKind {
    /// Single `ln(1 + count)` value.
    ScalarLogCount,
    /// One `ln(1 + count)` value per listed category.
    PerCategoryLogCount { categories: Vec<String> },
    /// Indicator for the bin a real value falls into; `bin_edges` are the
    /// `n + 1` ascending edges of `n` bins.
    BinnedReal { bin_edges: Vec<f64> },
    /// Indicator vector with one active index.
    OneHot { cardinality: usize },
}

impl GroupKind {
    pub fn width(&self) -> usize {
        match self {
            GroupKind::ScalarLogCount => 1,
            GroupKind::PerCategoryLogCount { categories } => categories.len(),
            GroupKind::BinnedReal { bin_edges } => bin_edges.len().saturating_sub(1),
            GroupKind::OneHot { cardinality } => *cardinality,
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FeatureGroup {
    pub name: String,
    #[serde(flatten)]
    pub kind: GroupKind,
}

/// Ordered feature groups plus the derived id layout.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSchema {
    groups: Vec<FeatureGroup>,
    offsets: Vec<usize>,
    total: usize,
    id: u64,
}

impl FeatureSchema {
    pub fn new(groups: Vec<FeatureGroup>) -> Result<Self> {
        if groups.is_empty() {
            return Err(FedSimError::InvalidSchema("no feature groups".into()));
        }
        let mut offsets = Vec::with_capacity(groups.len());
        let mut total = 0usize;
        let mut id = 0xfeed_5eed_u64;
        for g in &groups {
            match &g.kind {
                GroupKind::ScalarLogCount => {}
                GroupKind::PerCategoryLogCount { categories } => {
                    if categories.is_empty() {
                        return Err(FedSimError::InvalidSchema(format!(
                            "group {:?}: category list is empty",
                            g.name
                        )));
                    }
                }
                GroupKind::BinnedReal { bin_edges } => {
                    if bin_edges.len() < 3 {
                        return Err(FedSimError::InvalidSchema(format!(
                            "group {:?}: need at least 2 bins",
                            g.name
                        )));
                    }
                    if bin_edges.windows(2).any(|w| w[0] >= w[1]) {
                        return Err(FedSimError::InvalidSchema(format!(
                            "group {:?}: bin edges must be strictly ascending",
                            g.name
                        )));
                    }
                }
                GroupKind::OneHot { cardinality } => {
                    if *cardinality < 2 {
                        return Err(FedSimError::InvalidSchema(format!(
                            "group {:?}: one-hot cardinality must be >= 2",
                            g.name
                        )));
                    }
                }
            }
            offsets.push(total);
            total += g.kind.width();
            id = mix64(id ^ mix64(g.name.len() as u64 ^ g.kind.width() as u64 ^ total as u64));
            for b in g.name.bytes() {
                id = id.wrapping_mul(0x100_0000_01b3) ^ b as u64;
            }
            if let GroupKind::BinnedReal { bin_edges } = &g.kind {
                for e in bin_edges {
                    id = mix64(id ^ e.to_bits());
                }
            }
        }
        Ok(Self {
            groups,
            offsets,
            total,
            id: mix64(id),
        })
    }

    pub fn groups(&self) -> &[FeatureGroup] {
        &self.groups
    }

    pub fn total_dimension(&self) -> usize {
        self.total
    }

    /// Fingerprint of the group layout; vectors and params carry it so
    /// cross-schema use is caught early.
    pub fn schema_id(&self) -> u64 {
        self.id
    }

    pub fn group_offset(&self, index: usize) -> usize {
        self.offsets[index]
    }

    pub fn group_named(&self, name: &str) -> Option<(usize, &FeatureGroup)> {
        self.groups.iter().enumerate().find(|(_, g)| g.name == name)
    }

    /// Human-readable name of one feature id, `group` or `group[k]`.
    pub fn feature_name(&self, id: FeatureId) -> String {
        for (i, g) in self.groups.iter().enumerate() {
            let start = self.offsets[i];
            let width = g.kind.width();
            if id < start + width {
                return match &g.kind {
                    GroupKind::ScalarLogCount => g.name.clone(),
                    GroupKind::PerCategoryLogCount { categories } => {
                        format!("{}[{}]", g.name, categories[id - start])
                    }
                    _ => format!("{}[{}]", g.name, id - start),
                };
            }
        }
        format!("feature[{id}]")
    }

    /// Index of the bin holding `value`, with out-of-range values clamped
    /// to the boundary bins. Returns `(bin, clamped)`.
    pub fn bin_for(edges: &[f64], value: f64) -> (usize, bool) {
        let n = edges.len() - 1;
        if value < edges[0] {
            return (0, true);
        }
        if value >= edges[n] {
            // The top edge itself belongs to the last bin.
            return (n - 1, value > edges[n]);
        }
        // Upper bound: first edge strictly greater than value.
        let mut lo = 0usize;
        let mut hi = n;
        while lo + 1 < hi {
            let mid = (lo + hi) / 2;
            if edges[mid] <= value {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        (lo, false)
    }
}

/// Sparse feature vector tied to a schema fingerprint.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    values: BTreeMap<FeatureId, f64>,
    schema_id: u64,
}

impl FeatureVector {
    pub fn new(schema_id: u64) -> Self {
        Self {
            values: BTreeMap::new(),
            schema_id,
        }
    }

    pub fn schema_id(&self) -> u64 {
        self.schema_id
    }

    pub fn set(&mut self, id: FeatureId, value: f64) {
        if value != 0.0 {
            self.values.insert(id, value);
        }
    }

    pub fn get(&self, id: FeatureId) -> f64 {
        self.values.get(&id).copied().unwrap_or(0.0)
    }

    pub fn iter(&self) -> impl Iterator<Item = (FeatureId, f64)> + '_ {
        self.values.iter().map(|(&k, &v)| (k, v))
    }

    pub fn nonzero_len(&self) -> usize {
        self.values.len()
    }
}

/// Raw interaction observed when a suggestion is surfaced; the input to
/// featurization.
#[derive(Debug, Clone, Default)]
pub struct InteractionContext {
    pub past_clicks: u64,
    pub past_impressions: u64,
    pub category_clicks: Vec<u64>,
    pub category_impressions: Vec<u64>,
    pub baseline_score: f64,
    /// Local hour of day, 0..24.
    pub hour: u8,
    /// Local day of week, 0..7.
    pub day_of_week: u8,
}

#[derive(Debug, Clone)]
pub struct Featurized {
    pub vector: FeatureVector,
    /// Baseline score fell outside the declared bin range and was clamped.
    pub baseline_clamped: bool,
}

fn log1p_count(c: u64) -> f64 {
    (c as f64).ln_1p()
}

/// Group names the featurizer knows how to fill.
pub mod group_names {
    pub const PAST_CLICKS: &str = "past_clicks";
    pub const PAST_IMPRESSIONS: &str = "past_impressions";
    pub const CATEGORY_CLICKS: &str = "category_clicks";
    pub const CATEGORY_IMPRESSIONS: &str = "category_impressions";
    pub const BASELINE_SCORE: &str = "baseline_score";
    pub const HOUR_OF_DAY: &str = "hour_of_day";
    pub const DAY_OF_WEEK: &str = "day_of_week";
}

/// Checks that every group name is one the featurizer can fill and that
/// temporal cardinalities match their domains.
pub fn validate_featurizable(schema: &FeatureSchema) -> Result<()> {
    use group_names::*;
    for g in schema.groups() {
        match (g.name.as_str(), &g.kind) {
            (PAST_CLICKS | PAST_IMPRESSIONS, GroupKind::ScalarLogCount) => {}
            (CATEGORY_CLICKS | CATEGORY_IMPRESSIONS, GroupKind::PerCategoryLogCount { .. }) => {}
            (BASELINE_SCORE, GroupKind::BinnedReal { .. }) => {}
            (HOUR_OF_DAY, GroupKind::OneHot { cardinality: 24 }) => {}
            (DAY_OF_WEEK, GroupKind::OneHot { cardinality: 7 }) => {}
            (name, kind) => {
                return Err(FedSimError::InvalidSchema(format!(
                    "group {name:?} with kind {kind:?} is not featurizable; \
                     known groups: past_clicks, past_impressions, category_clicks, \
                     category_impressions, baseline_score, hour_of_day (24), day_of_week (7)"
                )))
            }
        }
    }
    Ok(())
}

/// Builds the sparse vector for one interaction.
///
/// Counts become `ln(1 + c)`, the baseline score activates exactly one
/// bin (clamping to a boundary bin when out of range), and hour/day set
/// one-hot indicators.
pub fn featurize(schema: &FeatureSchema, ctx: &InteractionContext) -> Result<Featurized> {
    use group_names::*;
    if (ctx.hour as usize) >= 24 {
        return Err(FedSimError::SchemaMismatch(format!(
            "hour {} out of range",
            ctx.hour
        )));
    }
    if (ctx.day_of_week as usize) >= 7 {
        return Err(FedSimError::SchemaMismatch(format!(
            "day {} out of range",
            ctx.day_of_week
        )));
    }
    let mut vec = FeatureVector::new(schema.schema_id());
    let mut clamped = false;
    for (gi, g) in schema.groups().iter().enumerate() {
        let base = schema.group_offset(gi);
        match (&g.kind, g.name.as_str()) {
            (GroupKind::ScalarLogCount, PAST_CLICKS) => vec.set(base, log1p_count(ctx.past_clicks)),
            (GroupKind::ScalarLogCount, PAST_IMPRESSIONS) => {
                vec.set(base, log1p_count(ctx.past_impressions))
            }
            (GroupKind::PerCategoryLogCount { categories }, name) => {
                let counts = if name == CATEGORY_CLICKS {
                    &ctx.category_clicks
                } else {
                    &ctx.category_impressions
                };
                if counts.len() != categories.len() {
                    return Err(FedSimError::SchemaMismatch(format!(
                        "group {name:?} expects {} categories, context has {}",
                        categories.len(),
                        counts.len()
                    )));
                }
                for (k, &c) in counts.iter().enumerate() {
                    vec.set(base + k, log1p_count(c));
                }
            }
            (GroupKind::BinnedReal { bin_edges }, _) => {
                let (bin, was_clamped) = FeatureSchema::bin_for(bin_edges, ctx.baseline_score);
                clamped |= was_clamped;
                vec.set(base + bin, 1.0);
            }
            (GroupKind::OneHot { .. }, HOUR_OF_DAY) => vec.set(base + ctx.hour as usize, 1.0),
            (GroupKind::OneHot { .. }, DAY_OF_WEEK) => {
                vec.set(base + ctx.day_of_week as usize, 1.0)
            }
            (kind, name) => {
                return Err(FedSimError::SchemaMismatch(format!(
                    "cannot featurize group {name:?} of kind {kind:?}"
                )))
            }
        }
    }
    Ok(Featurized {
        vector: vec,
        baseline_clamped: clamped,
    })
}

/// Ten uniform baseline-score bins on [0, 1] plus the standard count and
/// temporal groups; the stock schema used by tests and default configs.
pub fn default_schema(categories: &[&str]) -> FeatureSchema {
    use group_names::*;
    let cats: Vec<String> = categories.iter().map(|s| s.to_string()).collect();
    let edges: Vec<f64> = (0..=10).map(|i| i as f64 / 10.0).collect();
    FeatureSchema::new(vec![
        FeatureGroup {
            name: PAST_CLICKS.into(),
            kind: GroupKind::ScalarLogCount,
        },
        FeatureGroup {
            name: PAST_IMPRESSIONS.into(),
            kind: GroupKind::ScalarLogCount,
        },
        FeatureGroup {
            name: CATEGORY_CLICKS.into(),
            kind: GroupKind::PerCategoryLogCount {
                categories: cats.clone(),
            },
        },
        FeatureGroup {
            name: CATEGORY_IMPRESSIONS.into(),
            kind: GroupKind::PerCategoryLogCount { categories: cats },
        },
        FeatureGroup {
            name: BASELINE_SCORE.into(),
            kind: GroupKind::BinnedReal { bin_edges: edges },
        },
        FeatureGroup {
            name: HOUR_OF_DAY.into(),
            kind: GroupKind::OneHot { cardinality: 24 },
        },
        FeatureGroup {
            name: DAY_OF_WEEK.into(),
            kind: GroupKind::OneHot { cardinality: 7 },
        },
    ])
    .expect("stock schema is valid")
}
