//! Experiment configuration: a single TOML file whose sections mirror the
//! library's types one to one. Parse errors surface with line/column
//! anchors; semantic validation errors name the offending field path.

use std::collections::BTreeSet;
use std::path::Path;

use crate::datagen::{GeneratorConfig, ParamDist, SubpopulationSpec};
use crate::error::{FedSimError, Result};
use crate::features::{validate_featurizable, FeatureGroup, FeatureSchema, GroupKind};
use crate::fleet::{AvailabilitySchedule, EligibilityPolicy, Tier};
use crate::model::LocalTrainConfig;
use crate::server::{RoundConfig, ServerConfig, Weighting};

/// Threshold grid used for eval-round retention counters when the config
/// does not pin one explicitly.
pub const DEFAULT_EVAL_TAUS: [f64; 5] = [-1.0, -0.5, 0.0, 0.5, 1.0];

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemaSection {
    pub groups: Vec<FeatureGroup>,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServerSection {
    pub pacing_base_s: u64,
    pub pacing_jitter: f64,
    pub server_learning_rate: f64,
    pub weighting: Weighting,
    pub eval_fraction: f64,
    pub selection_window_days: u64,
    pub max_examples_per_task: usize,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LocalTrainSection {
    pub epochs: u32,
    pub learning_rate: f64,
    pub batch_size: usize,
    #[serde(default)]
    pub l2: f64,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicySpec {
    pub min_ram_mb: u32,
    pub min_sdk_level: u32,
    pub locales: Vec<String>,
}

impl PolicySpec {
    pub fn to_policy(&self) -> EligibilityPolicy {
        EligibilityPolicy {
            min_ram_mb: self.min_ram_mb,
            min_sdk_level: self.min_sdk_level,
            locales: self.locales.iter().cloned().collect::<BTreeSet<String>>(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicySection {
    pub training: PolicySpec,
    pub deployment: PolicySpec,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisSection {
    /// Explicit threshold grid; empty means derive a uniform grid.
    #[serde(default)]
    pub taus: Vec<f64>,
    /// Grid size when `taus` is empty.
    pub tau_count: usize,
    pub display_tz_offset_hours: f64,
    /// Days of fresh interactions generated per population for the skew
    /// comparison.
    pub skew_days: u64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatagenSection {
    pub ground_truth_seed: u64,
    pub baseline_score_low: f64,
    pub baseline_score_high: f64,
    /// Hidden continuous baseline-score coefficient; nonzero values make
    /// the generator richer than the schema can express exactly.
    #[serde(default)]
    pub hidden_baseline_coeff: f64,
    /// Scale applied to the generative weights of binned groups. Zero
    /// removes the binned contribution entirely, which keeps the
    /// generator identical across schema variants that differ only in
    /// bin edges.
    #[serde(default = "one")]
    pub binned_weight_scale: f64,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceSection {
    pub cache_ttl_days: u64,
    pub cache_capacity: usize,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FleetSection {
    pub subpopulations: Vec<SubpopulationSpec>,
}

/// The whole experiment: everything a run needs besides the output
/// directory.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub master_seed: u64,
    pub horizon_days: u64,
    pub population: String,
    pub schema: SchemaSection,
    pub round: RoundConfig,
    pub server: ServerSection,
    pub local_train: LocalTrainSection,
    pub device: DeviceSection,
    pub policy: PolicySection,
    pub analysis: AnalysisSection,
    pub datagen: DatagenSection,
    pub fleet: FleetSection,
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let clamped = offset.min(text.len());
    let mut line = 1;
    let mut col = 1;
    for (i, ch) in text.char_indices() {
        if i >= clamped {
            break;
        }
        if ch == '\n' {
            line += 1;
            col = 1;
        } else {
            col += 1;
        }
    }
    (line, col)
}

impl ExperimentConfig {
    /// Parses and validates; errors carry the file name plus a line/column
    /// anchor (parse errors) or a field path (semantic errors).
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text).map_err(|e| match e {
            FedSimError::InvalidConfig(msg) => {
                FedSimError::InvalidConfig(format!("{}: {msg}", path.display()))
            }
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self)
            .map_err(|e| FedSimError::InvalidConfig(format!("serialization failed: {e}")))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|err| {
            let anchor = err
                .span()
                .map(|span| {
                    let (line, col) = line_col(text, span.start);
                    format!("{line}:{col}: ")
                })
                .unwrap_or_default();
            FedSimError::InvalidConfig(format!("{anchor}{}", err.message()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |field: &str, msg: &str| -> Result<()> {
            Err(FedSimError::InvalidConfig(format!("{field}: {msg}")))
        };
        if self.horizon_days == 0 {
            return fail("horizon_days", "must be at least one day");
        }
        if self.population.is_empty() {
            return fail("population", "must be non-empty");
        }
        let schema = self.build_schema()?;
        validate_featurizable(&schema)?;
        let cat_widths: Vec<usize> = schema
            .groups()
            .iter()
            .filter_map(|g| match &g.kind {
                GroupKind::PerCategoryLogCount { categories } => Some(categories.len()),
                _ => None,
            })
            .collect();
        if cat_widths.windows(2).any(|w| w[0] != w[1]) {
            return fail(
                "schema.groups",
                "per-category groups must share one category list",
            );
        }
        self.round.validate()?;
        self.to_server_config().validate()?;
        if self.local_train.epochs == 0 {
            return fail("local_train.epochs", "must be >= 1");
        }
        if self.local_train.learning_rate.is_nan() || self.local_train.learning_rate <= 0.0 {
            return fail("local_train.learning_rate", "must be positive");
        }
        if self.local_train.batch_size == 0 {
            return fail("local_train.batch_size", "must be >= 1");
        }
        if self.device.cache_ttl_days == 0 {
            return fail("device.cache_ttl_days", "must be >= 1");
        }
        if self.device.cache_capacity == 0 {
            return fail("device.cache_capacity", "must be >= 1");
        }
        if self.analysis.tau_count == 0 && self.analysis.taus.is_empty() {
            return fail("analysis.tau_count", "need a grid size or explicit taus");
        }
        let score_range_ok = self.datagen.baseline_score_low < self.datagen.baseline_score_high;
        if !score_range_ok {
            return fail("datagen.baseline_score_low", "range must be non-degenerate");
        }
        if self.fleet.subpopulations.is_empty() {
            return fail("fleet.subpopulations", "need at least one block");
        }
        for (i, sub) in self.fleet.subpopulations.iter().enumerate() {
            let field = format!("fleet.subpopulations[{i}]");
            if sub.count == 0 {
                return fail(&field, "count must be >= 1");
            }
            if AvailabilitySchedule::from_slice(&sub.availability).is_none() {
                return fail(
                    &format!("{field}.availability"),
                    "need 24 probabilities in [0, 1]",
                );
            }
            sub.tz_offset_hours
                .validate(&format!("{field}.tz_offset_hours"))?;
            sub.ram_mb.validate(&format!("{field}.ram_mb"))?;
            sub.sdk_level.validate(&format!("{field}.sdk_level"))?;
            sub.network_reliability
                .validate(&format!("{field}.network_reliability"))?;
            sub.impressions_per_day
                .validate(&format!("{field}.impressions_per_day"))?;
            sub.base_click_logit
                .validate(&format!("{field}.base_click_logit"))?;
            sub.category_affinity
                .validate(&format!("{field}.category_affinity"))?;
            sub.hour_effect.validate(&format!("{field}.hour_effect"))?;
            sub.ground_truth_alignment
                .validate(&format!("{field}.ground_truth_alignment"))?;
        }
        if self.policy.training.to_policy().locales.is_empty() {
            return fail("policy.training.locales", "must list at least one locale");
        }
        Ok(())
    }

    pub fn build_schema(&self) -> Result<FeatureSchema> {
        FeatureSchema::new(self.schema.groups.clone())
    }

    pub fn category_count(&self) -> usize {
        self.schema
            .groups
            .iter()
            .find_map(|g| match &g.kind {
                GroupKind::PerCategoryLogCount { categories } => Some(categories.len()),
                _ => None,
            })
            .unwrap_or(0)
    }

    pub fn to_local_train(&self) -> LocalTrainConfig {
        LocalTrainConfig {
            epochs: self.local_train.epochs,
            learning_rate: self.local_train.learning_rate,
            batch_size: self.local_train.batch_size,
            shuffle_seed: 0,
            l2: self.local_train.l2,
        }
    }

    /// Eval-round threshold grid: the explicit one, or the stock default.
    pub fn eval_taus(&self) -> Vec<f64> {
        if self.analysis.taus.is_empty() {
            DEFAULT_EVAL_TAUS.to_vec()
        } else {
            self.analysis.taus.clone()
        }
    }

    pub fn to_server_config(&self) -> ServerConfig {
        ServerConfig {
            round: self.round.clone(),
            population: self.population.clone(),
            pacing_base_s: self.server.pacing_base_s,
            pacing_jitter: self.server.pacing_jitter,
            server_learning_rate: self.server.server_learning_rate,
            weighting: self.server.weighting,
            eval_fraction: self.server.eval_fraction,
            selection_window_s: self.server.selection_window_days * crate::fleet::DAY_S,
            max_examples_per_task: self.server.max_examples_per_task,
            local_train: self.to_local_train(),
            eval_taus: self.eval_taus(),
            seed: crate::rng::SeedSpace::new(self.master_seed).stream("server"),
        }
    }

    pub fn to_generator(&self) -> GeneratorConfig {
        GeneratorConfig {
            baseline_score_low: self.datagen.baseline_score_low,
            baseline_score_high: self.datagen.baseline_score_high,
        }
    }

    /// Assembles the generative click model for this experiment.
    pub fn build_ground_truth(&self, schema: &FeatureSchema) -> crate::datagen::GroundTruth {
        let mut gt = crate::datagen::seeded_ground_truth(schema, self.datagen.ground_truth_seed);
        gt.hidden_baseline_coeff = self.datagen.hidden_baseline_coeff;
        let scale = self.datagen.binned_weight_scale;
        if scale != 1.0 {
            for (gi, group) in schema.groups().iter().enumerate() {
                if matches!(group.kind, GroupKind::BinnedReal { .. }) {
                    let base = schema.group_offset(gi);
                    for w in &mut gt.params.weights_mut()[base..base + group.kind.width()] {
                        *w *= scale;
                    }
                }
            }
        }
        gt
    }
}

fn ten_uniform_bins() -> Vec<f64> {
    (0..=10).map(|i| i as f64 / 10.0).collect()
}

pub const DEFAULT_CATEGORIES: [&str; 6] =
    ["food", "travel", "media", "shopping", "sports", "weather"];

fn default_schema_section() -> SchemaSection {
    use crate::features::group_names::*;
    let cats: Vec<String> = DEFAULT_CATEGORIES.iter().map(|s| s.to_string()).collect();
    SchemaSection {
        groups: vec![
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
                kind: GroupKind::BinnedReal {
                    bin_edges: ten_uniform_bins(),
                },
            },
            FeatureGroup {
                name: HOUR_OF_DAY.into(),
                kind: GroupKind::OneHot { cardinality: 24 },
            },
            FeatureGroup {
                name: DAY_OF_WEEK.into(),
                kind: GroupKind::OneHot { cardinality: 7 },
            },
        ],
    }
}

impl Default for ExperimentConfig {
    /// The stock two-subpopulation experiment: a North-American fleet
    /// charging overnight, plus a smaller en-US-labelled fleet at +5.5
    /// with weaker networks and weaker alignment, so daytime rounds are
    /// scarcer, skewed, and lossier than night rounds.
    fn default() -> Self {
        let night = AvailabilitySchedule::night_peaked();
        ExperimentConfig {
            master_seed: 20_180_612,
            horizon_days: 3,
            population: "keyboard_query_en".into(),
            schema: default_schema_section(),
            round: RoundConfig::default(),
            server: ServerSection {
                pacing_base_s: 1_800,
                pacing_jitter: 0.1,
                server_learning_rate: 1.0,
                weighting: Weighting::ExampleCount,
                eval_fraction: 0.35,
                selection_window_days: 7,
                max_examples_per_task: 500,
            },
            local_train: LocalTrainSection {
                epochs: 1,
                learning_rate: 0.2,
                batch_size: 10,
                l2: 0.0,
            },
            device: DeviceSection {
                cache_ttl_days: 7,
                cache_capacity: 500,
            },
            policy: PolicySection {
                training: PolicySpec {
                    min_ram_mb: 2048,
                    min_sdk_level: 21,
                    locales: vec!["en-US".into(), "en-CA".into()],
                },
                deployment: PolicySpec {
                    min_ram_mb: 0,
                    min_sdk_level: 0,
                    locales: vec!["en-US".into(), "en-CA".into()],
                },
            },
            analysis: AnalysisSection {
                taus: vec![],
                tau_count: 3,
                display_tz_offset_hours: -8.0,
                skew_days: 2,
            },
            datagen: DatagenSection {
                ground_truth_seed: 20_180_612,
                baseline_score_low: 0.0,
                baseline_score_high: 1.0,
                hidden_baseline_coeff: 0.0,
                binned_weight_scale: 1.0,
            },
            fleet: FleetSection {
                subpopulations: vec![
                    SubpopulationSpec {
                        name: "na".into(),
                        count: 700,
                        locale: "en-US".into(),
                        tier: Tier::High,
                        tz_offset_hours: ParamDist::Uniform {
                            low: -8.0,
                            high: -5.0,
                        },
                        ram_mb: ParamDist::constant(4096.0),
                        sdk_level: ParamDist::constant(30.0),
                        network_reliability: ParamDist::NormalTruncated {
                            mean: 0.97,
                            sd: 0.01,
                            low: 0.9,
                            high: 1.0,
                        },
                        availability: night.0.to_vec(),
                        impressions_per_day: ParamDist::Uniform {
                            low: 8.0,
                            high: 20.0,
                        },
                        base_click_logit: ParamDist::NormalTruncated {
                            mean: -1.4,
                            sd: 0.3,
                            low: -2.5,
                            high: -0.3,
                        },
                        category_affinity: ParamDist::NormalTruncated {
                            mean: 0.0,
                            sd: 0.25,
                            low: -0.8,
                            high: 0.8,
                        },
                        hour_effect: ParamDist::NormalTruncated {
                            mean: 0.0,
                            sd: 0.08,
                            low: -0.25,
                            high: 0.25,
                        },
                        ground_truth_alignment: ParamDist::constant(1.0),
                    },
                    SubpopulationSpec {
                        name: "in_skew".into(),
                        count: 400,
                        locale: "en-US".into(),
                        tier: Tier::Low,
                        tz_offset_hours: ParamDist::constant(5.5),
                        ram_mb: ParamDist::constant(3072.0),
                        sdk_level: ParamDist::constant(28.0),
                        network_reliability: ParamDist::NormalTruncated {
                            mean: 0.85,
                            sd: 0.02,
                            low: 0.75,
                            high: 0.95,
                        },
                        availability: night.scaled(0.5).0.to_vec(),
                        impressions_per_day: ParamDist::Uniform {
                            low: 6.0,
                            high: 16.0,
                        },
                        base_click_logit: ParamDist::NormalTruncated {
                            mean: -0.4,
                            sd: 0.3,
                            low: -1.5,
                            high: 0.8,
                        },
                        category_affinity: ParamDist::NormalTruncated {
                            mean: 0.0,
                            sd: 0.25,
                            low: -0.8,
                            high: 0.8,
                        },
                        hour_effect: ParamDist::NormalTruncated {
                            mean: 0.0,
                            sd: 0.08,
                            low: -0.25,
                            high: 0.25,
                        },
                        ground_truth_alignment: ParamDist::constant(0.65),
                    },
                ],
            },
        }
    }
}
