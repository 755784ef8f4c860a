//! Synthetic proxy-data generation: the generative click model, fleet
//! construction from subpopulation specs, and per-device interaction
//! streams feeding the training caches.
//!
//! The generative model is logistic in the live feature schema, which
//! makes weight recovery well-posed: indicator groups are mean-centered
//! and the generative bias is zero, so the identifiable projection of the
//! true weights is the true weights themselves. A mismatched-generator
//! mode adds a hidden continuous baseline-score term the schema can only
//! approximate through its bins.

use crate::error::Result;
use crate::features::{featurize, FeatureSchema, GroupKind, InteractionContext};
use crate::fleet::{local_day_of_week, local_hour, DeviceProfile, Tier, UserBehaviorParams, DAY_S};
use crate::model::{predict_prob, predict_score, Label, ModelParams, TrainingExample};
use crate::rng::{self, SeedSpace};

/// Distribution family for fleet parameter sampling.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum ParamDist {
    Constant {
        value: f64,
    },
    Uniform {
        low: f64,
        high: f64,
    },
    NormalTruncated {
        mean: f64,
        sd: f64,
        low: f64,
        high: f64,
    },
}

impl ParamDist {
    pub fn constant(value: f64) -> Self {
        ParamDist::Constant { value }
    }

    pub fn sample(&self, rng: &mut rand_chacha::ChaCha8Rng) -> f64 {
        match *self {
            ParamDist::Constant { value } => value,
            ParamDist::Uniform { low, high } => rng::uniform(rng, low, high),
            ParamDist::NormalTruncated {
                mean,
                sd,
                low,
                high,
            } => rng::normal_truncated(rng, mean, sd, low, high),
        }
    }

    pub fn validate(&self, what: &str) -> Result<()> {
        let ok = match *self {
            ParamDist::Constant { value } => value.is_finite(),
            ParamDist::Uniform { low, high } => low.is_finite() && high.is_finite() && low <= high,
            ParamDist::NormalTruncated {
                mean,
                sd,
                low,
                high,
            } => mean.is_finite() && sd.is_finite() && sd >= 0.0 && low <= high,
        };
        if ok {
            Ok(())
        } else {
            Err(crate::error::FedSimError::InvalidConfig(format!(
                "distribution for {what} is malformed"
            )))
        }
    }
}

/// One block of the fleet configuration.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubpopulationSpec {
    pub name: String,
    pub count: usize,
    pub locale: String,
    pub tier: Tier,
    pub tz_offset_hours: ParamDist,
    pub ram_mb: ParamDist,
    pub sdk_level: ParamDist,
    pub network_reliability: ParamDist,
    /// 24 per-local-hour availability probabilities.
    pub availability: Vec<f64>,
    pub impressions_per_day: ParamDist,
    #[serde(default = "zero_dist")]
    pub base_click_logit: ParamDist,
    #[serde(default = "zero_dist")]
    pub category_affinity: ParamDist,
    #[serde(default = "zero_dist")]
    pub hour_effect: ParamDist,
    #[serde(default = "one_dist")]
    pub ground_truth_alignment: ParamDist,
}

fn zero_dist() -> ParamDist {
    ParamDist::constant(0.0)
}

fn one_dist() -> ParamDist {
    ParamDist::constant(1.0)
}

/// Samples the device profiles for every subpopulation; ids are assigned
/// sequentially across blocks so a fleet is a pure function of
/// `(specs, seed)`.
pub fn build_fleet(
    specs: &[SubpopulationSpec],
    category_count: usize,
    space: &SeedSpace,
) -> Vec<DeviceProfile> {
    let mut fleet = Vec::new();
    let mut id = 0u64;
    for spec in specs {
        for _ in 0..spec.count {
            let mut rng = space.rng("fleet", &[id]);
            let tz = spec.tz_offset_hours.sample(&mut rng).clamp(-12.0, 14.0);
            let ram = spec.ram_mb.sample(&mut rng).round().max(0.0) as u32;
            let sdk = spec.sdk_level.sample(&mut rng).round().max(0.0) as u32;
            let reliability = spec.network_reliability.sample(&mut rng).clamp(0.0, 1.0);
            let rate = spec.impressions_per_day.sample(&mut rng).max(0.0);
            let base = spec.base_click_logit.sample(&mut rng);
            let affinities: Vec<f64> = (0..category_count)
                .map(|_| spec.category_affinity.sample(&mut rng))
                .collect();
            let mut hour_effects = [0.0; 24];
            for h in hour_effects.iter_mut() {
                *h = spec.hour_effect.sample(&mut rng);
            }
            let alignment = spec.ground_truth_alignment.sample(&mut rng);
            fleet.push(DeviceProfile {
                device_id: id,
                ram_mb: ram,
                sdk_level: sdk,
                locale: spec.locale.clone(),
                tz_offset_hours: tz,
                tier: spec.tier,
                network_reliability: reliability,
                behavior: UserBehaviorParams {
                    base_click_logit: base,
                    category_affinities: affinities,
                    hour_effects,
                    impressions_per_day: rate,
                    ground_truth_alignment: alignment,
                },
                subpopulation: spec.name.clone(),
            });
            id += 1;
        }
    }
    fleet
}

/// The generative click model: logistic weights in the live schema, plus
/// an optional hidden coefficient on the raw (unbinned) baseline score.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub params: ModelParams,
    pub hidden_baseline_coeff: f64,
}

impl GroundTruth {
    /// Click logit contributed by the generator for one featurized
    /// interaction.
    pub fn signal(
        &self,
        features: &crate::features::FeatureVector,
        raw_baseline: f64,
    ) -> Result<f64> {
        Ok(predict_score(&self.params, features)? + self.hidden_baseline_coeff * raw_baseline)
    }
}

/// Builds a structured generative model over the given schema:
/// count weights with fixed signs, category weights with clear
/// magnitudes, a monotone ramp over the baseline-score bins, a two-level
/// evening/off-hours pattern over the hour indicators, and a
/// near-zero day-of-week pattern. Indicator groups are mean-centered and
/// the bias is zero.
pub fn seeded_ground_truth(schema: &FeatureSchema, seed: u64) -> GroundTruth {
    use crate::features::group_names::*;
    let mut rng = SeedSpace::new(seed).rng("groundtruth", &[]);
    let mut weights = vec![0.0; schema.total_dimension()];
    for (gi, group) in schema.groups().iter().enumerate() {
        let base = schema.group_offset(gi);
        let width = group.kind.width();
        match (&group.kind, group.name.as_str()) {
            (GroupKind::ScalarLogCount, PAST_CLICKS) => weights[base] = 0.6,
            (GroupKind::ScalarLogCount, PAST_IMPRESSIONS) => weights[base] = -0.35,
            (GroupKind::ScalarLogCount, _) => {
                weights[base] = rng::uniform(&mut rng, 0.35, 0.8)
                    * if rng::next_unit(&mut rng) < 0.5 {
                        -1.0
                    } else {
                        1.0
                    };
            }
            (GroupKind::PerCategoryLogCount { .. }, _) => {
                for k in 0..width {
                    weights[base + k] = rng::uniform(&mut rng, 0.35, 0.8)
                        * if rng::next_unit(&mut rng) < 0.5 {
                            -1.0
                        } else {
                            1.0
                        };
                }
            }
            (GroupKind::BinnedReal { .. }, _) => {
                // monotone ramp from -0.8 to 0.8 across the bins
                for k in 0..width {
                    let t = if width > 1 {
                        k as f64 / (width - 1) as f64
                    } else {
                        0.5
                    };
                    weights[base + k] = -0.8 + 1.6 * t;
                }
            }
            (GroupKind::OneHot { .. }, HOUR_OF_DAY) => {
                // evening block clicks more; the per-hour grade keeps the
                // magnitudes distinct
                for k in 0..width {
                    let graded = 0.01 * k as f64;
                    weights[base + k] = if (18..=23).contains(&k) || k < 2 {
                        0.6 + graded
                    } else {
                        -(0.3 + graded)
                    };
                }
            }
            (GroupKind::OneHot { .. }, _) => {
                for k in 0..width {
                    weights[base + k] = rng::uniform(&mut rng, -0.01, 0.01);
                }
            }
        }
        // Center indicator groups so the generative weights coincide with
        // their identifiable projection.
        if matches!(
            group.kind,
            GroupKind::BinnedReal { .. } | GroupKind::OneHot { .. }
        ) {
            let mean = weights[base..base + width].iter().sum::<f64>() / width as f64;
            for w in &mut weights[base..base + width] {
                *w -= mean;
            }
        }
    }
    GroundTruth {
        params: ModelParams::from_parts(weights, 0.0, 0, schema.schema_id()),
        hidden_baseline_coeff: 0.0,
    }
}

/// Knobs of the impression generator.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GeneratorConfig {
    /// Range the synthetic baseline score is drawn from. Narrower than
    /// the schema's declared bin range reproduces the misconfigured-range
    /// failure mode.
    pub baseline_score_low: f64,
    pub baseline_score_high: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            baseline_score_low: 0.0,
            baseline_score_high: 1.0,
        }
    }
}

/// Running per-user interaction counters; these persist across simulated
/// days so the personalization features are non-degenerate.
#[derive(Debug, Clone)]
pub struct UserCounters {
    pub clicks: u64,
    pub impressions: u64,
    pub category_clicks: Vec<u64>,
    pub category_impressions: Vec<u64>,
}

impl UserCounters {
    pub fn new(category_count: usize) -> Self {
        Self {
            clicks: 0,
            impressions: 0,
            category_clicks: vec![0; category_count],
            category_impressions: vec![0; category_count],
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct DayStats {
    pub impressions: u64,
    pub clicks: u64,
    pub baseline_range_clamped: u64,
}

/// Generates one simulated day of impressions for a device.
///
/// The impression count is Poisson in the device's daily rate; each
/// impression picks a category and a synthetic baseline score, is
/// featurized against the live schema with the user's running counters,
/// and is labeled clicked with probability
/// `sigmoid(alignment * generator_signal + behavior offsets)`.
#[allow(clippy::too_many_arguments)]
pub fn generate_interactions(
    profile: &DeviceProfile,
    counters: &mut UserCounters,
    ground_truth: &GroundTruth,
    schema: &FeatureSchema,
    day: u64,
    gen: &GeneratorConfig,
    space: &SeedSpace,
    stats: &mut DayStats,
) -> Result<Vec<TrainingExample>> {
    let mut rng = space.rng("datagen", &[profile.device_id, day]);
    let n = rng::poisson(&mut rng, profile.behavior.impressions_per_day);
    let mut times: Vec<u64> = (0..n)
        .map(|_| day * DAY_S + (rng::next_unit(&mut rng) * DAY_S as f64) as u64)
        .collect();
    times.sort_unstable();

    let categories = counters.category_clicks.len();
    let mut out = Vec::with_capacity(times.len());
    for t in times {
        // Each user leans on one preferred category; heterogeneous usage
        // keeps the per-category counts from collapsing into the totals.
        let category = if categories > 0 {
            let preferred = (profile.device_id % categories as u64) as usize;
            if rng::next_unit(&mut rng) < 0.5 {
                preferred
            } else {
                rng::below(&mut rng, categories as u64) as usize
            }
        } else {
            0
        };
        let baseline = rng::uniform(&mut rng, gen.baseline_score_low, gen.baseline_score_high);
        let hour = local_hour(profile.tz_offset_hours, t);
        let ctx = InteractionContext {
            past_clicks: counters.clicks,
            past_impressions: counters.impressions,
            category_clicks: counters.category_clicks.clone(),
            category_impressions: counters.category_impressions.clone(),
            baseline_score: baseline,
            hour: hour as u8,
            day_of_week: local_day_of_week(profile.tz_offset_hours, t),
        };
        let featurized = featurize(schema, &ctx)?;
        stats.baseline_range_clamped += featurized.baseline_clamped as u64;

        let behavior = &profile.behavior;
        let logit = behavior.ground_truth_alignment
            * ground_truth.signal(&featurized.vector, baseline)?
            + behavior.base_click_logit
            + behavior
                .category_affinities
                .get(category)
                .copied()
                .unwrap_or(0.0)
            + behavior.hour_effects[hour];
        let clicked = rng::next_unit(&mut rng) < predict_prob(logit);

        counters.impressions += 1;
        if categories > 0 {
            counters.category_impressions[category] += 1;
        }
        if clicked {
            counters.clicks += 1;
            if categories > 0 {
                counters.category_clicks[category] += 1;
            }
        }
        stats.impressions += 1;
        stats.clicks += clicked as u64;

        out.push(TrainingExample {
            features: featurized.vector,
            label: if clicked {
                Label::Clicked
            } else {
                Label::Ignored
            },
            created_at: t,
        });
    }
    Ok(out)
}
