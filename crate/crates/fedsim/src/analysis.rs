//! Evaluation surface: threshold sweeps, time-of-day metric buckets,
//! weight inspection, and training-vs-deployment skew comparison.

use crate::datagen::{generate_interactions, DayStats, GeneratorConfig, GroundTruth, UserCounters};
use crate::error::{FedSimError, Result};
use crate::features::{FeatureSchema, GroupKind};
use crate::fleet::{is_eligible, local_hour, DeviceProfile, EligibilityPolicy};
use crate::model::{predict_score, ModelParams};
use crate::rng::SeedSpace;

/// One scored, labeled impression for sweep analysis.
#[derive(Debug, Clone, Copy)]
pub struct ScoredImpression {
    pub score: f64,
    pub clicked: bool,
}

/// Operating-point metrics at one threshold.
///
/// `delta_ctr` is the relative change of CTR among shown impressions
/// versus CTR over all impressions, so the no-filtering baseline is
/// exactly zero. It is `None` (flagged undefined) when the dataset has no
/// clicks or the threshold hides everything. With no clicks at all,
/// `retained_clicks` is vacuously 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThresholdMetrics {
    pub tau: f64,
    pub delta_ctr: Option<f64>,
    pub retained_impressions: f64,
    pub retained_clicks: f64,
}

impl ThresholdMetrics {
    pub fn from_counts(
        tau: f64,
        shown: u64,
        clicks_shown: u64,
        total: u64,
        total_clicks: u64,
    ) -> Self {
        let retained_impressions = shown as f64 / total as f64;
        let retained_clicks = if total_clicks > 0 {
            clicks_shown as f64 / total_clicks as f64
        } else {
            1.0
        };
        let delta_ctr = if total_clicks > 0 && shown > 0 {
            let ctr_all = total_clicks as f64 / total as f64;
            let ctr_shown = clicks_shown as f64 / shown as f64;
            Some((ctr_shown - ctr_all) / ctr_all)
        } else {
            None
        };
        Self {
            tau,
            delta_ctr,
            retained_impressions,
            retained_clicks,
        }
    }

    pub fn csv_row(&self) -> String {
        let delta = self
            .delta_ctr
            .map(|d| format!("{d:.6}"))
            .unwrap_or_default();
        format!(
            "{:.6},{},{:.6},{:.6}",
            self.tau, delta, self.retained_impressions, self.retained_clicks
        )
    }
}

pub const THRESHOLD_TABLE_HEADER: &str = "tau,delta_ctr,retained_impressions,retained_clicks";

/// Sweeps the threshold grid over a scored dataset in one sorted pass.
pub fn sweep_thresholds(
    dataset: &[ScoredImpression],
    taus: &[f64],
) -> Result<Vec<ThresholdMetrics>> {
    if dataset.is_empty() {
        return Err(FedSimError::InvalidConfig(
            "threshold sweep over an empty dataset".into(),
        ));
    }
    let mut sorted: Vec<ScoredImpression> = dataset.to_vec();
    sorted.sort_by(|a, b| a.score.total_cmp(&b.score));
    let n = sorted.len();
    // suffix click counts: clicks among impressions with index >= i
    let mut suffix_clicks = vec![0u64; n + 1];
    for i in (0..n).rev() {
        suffix_clicks[i] = suffix_clicks[i + 1] + sorted[i].clicked as u64;
    }
    let total_clicks = suffix_clicks[0];

    Ok(taus
        .iter()
        .map(|&tau| {
            // first index with score >= tau; ties at tau are shown
            let idx = sorted.partition_point(|imp| imp.score < tau);
            ThresholdMetrics::from_counts(
                tau,
                (n - idx) as u64,
                suffix_clicks[idx],
                n as u64,
                total_clicks,
            )
        })
        .collect())
}

/// Uniformly spaced interior thresholds over the empirical score range.
pub fn uniform_taus(dataset: &[ScoredImpression], count: usize) -> Vec<f64> {
    if dataset.is_empty() || count == 0 {
        return Vec::new();
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for imp in dataset {
        lo = lo.min(imp.score);
        hi = hi.max(imp.score);
    }
    if lo >= hi {
        return vec![lo];
    }
    (0..count)
        .map(|i| lo + (hi - lo) * (i + 1) as f64 / (count + 1) as f64)
        .collect()
}

/// One time-stamped observation feeding the hourly buckets.
#[derive(Debug, Clone, Copy)]
pub struct MetricRecord {
    pub time: u64,
    pub value: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HourBucket {
    pub mean: f64,
    pub weight: f64,
}

/// Weighted mean per display-timezone hour; empty buckets stay `None`
/// rather than reading as zero.
pub fn bucket_by_hour(
    records: &[MetricRecord],
    display_tz_offset_hours: f64,
) -> [Option<HourBucket>; 24] {
    let mut sums = [0.0f64; 24];
    let mut weights = [0.0f64; 24];
    for r in records {
        let h = local_hour(display_tz_offset_hours, r.time);
        sums[h] += r.value * r.weight;
        weights[h] += r.weight;
    }
    let mut out = [None; 24];
    for h in 0..24 {
        if weights[h] > 0.0 {
            out[h] = Some(HourBucket {
                mean: sums[h] / weights[h],
                weight: weights[h],
            });
        }
    }
    out
}

pub const HOURLY_TABLE_HEADER: &str = "hour,mean,weight";

pub fn hourly_csv(buckets: &[Option<HourBucket>; 24]) -> String {
    let mut out = String::from(HOURLY_TABLE_HEADER);
    out.push('\n');
    for (h, b) in buckets.iter().enumerate() {
        if let Some(b) = b {
            out.push_str(&format!("{h},{:.6},{:.6}\n", b.mean, b.weight));
        }
    }
    out
}

/// Weights below this magnitude count as zero for span detection.
pub const ZERO_WEIGHT_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Monotonicity {
    Monotone,
    MostlyMonotone,
    NonMonotone,
}

impl Monotonicity {
    pub fn as_str(self) -> &'static str {
        match self {
            Monotonicity::Monotone => "monotone",
            Monotonicity::MostlyMonotone => "mostly-monotone",
            Monotonicity::NonMonotone => "non-monotone",
        }
    }
}

/// Feature-group layout as needed by weight inspection; derivable from a
/// schema or recovered from checkpoint feature names.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupLayout {
    pub name: String,
    pub offset: usize,
    pub width: usize,
    pub binned: bool,
}

pub fn layout_of_schema(schema: &FeatureSchema) -> Vec<GroupLayout> {
    schema
        .groups()
        .iter()
        .enumerate()
        .map(|(gi, g)| GroupLayout {
            name: g.name.clone(),
            offset: schema.group_offset(gi),
            width: g.kind.width(),
            binned: matches!(g.kind, GroupKind::BinnedReal { .. }),
        })
        .collect()
}

/// Per-group verdicts from direct weight examination.
#[derive(Debug, Clone)]
pub struct GroupFinding {
    pub name: String,
    pub width: usize,
    /// Monotone-progression verdict; only for binned groups.
    pub monotonicity: Option<Monotonicity>,
    /// Length of the longest run of near-zero weights.
    pub max_zero_span: usize,
    /// `max_zero_span / width`.
    pub zero_span_fraction: f64,
}

/// Findings for every group plus the global |weight|-vs-frequency rank
/// correlation.
#[derive(Debug, Clone)]
pub struct WeightReport {
    pub groups: Vec<GroupFinding>,
    /// Spearman correlation between |w| and feature occurrence counts;
    /// `None` when undefined (degenerate ranks).
    pub magnitude_frequency_spearman: Option<f64>,
}

pub const WEIGHT_REPORT_HEADER: &str = "group,width,monotonicity,max_zero_span,zero_span_fraction";

impl WeightReport {
    pub fn csv(&self) -> String {
        let mut out = String::from(WEIGHT_REPORT_HEADER);
        out.push('\n');
        for g in &self.groups {
            out.push_str(&format!(
                "{},{},{},{},{:.6}\n",
                g.name,
                g.width,
                g.monotonicity.map(|m| m.as_str()).unwrap_or(""),
                g.max_zero_span,
                g.zero_span_fraction
            ));
        }
        out
    }
}

fn monotonicity_verdict(weights: &[f64]) -> Monotonicity {
    let signs: Vec<i8> = weights
        .windows(2)
        .map(|w| {
            let d = w[1] - w[0];
            if d > 0.0 {
                1
            } else if d < 0.0 {
                -1
            } else {
                0
            }
        })
        .filter(|s| *s != 0)
        .collect();
    let changes = signs.windows(2).filter(|p| p[0] != p[1]).count();
    match changes {
        0 => Monotonicity::Monotone,
        1 => Monotonicity::MostlyMonotone,
        _ => Monotonicity::NonMonotone,
    }
}

fn max_zero_run(weights: &[f64]) -> usize {
    let mut best = 0;
    let mut run = 0;
    for w in weights {
        if w.abs() < ZERO_WEIGHT_TOLERANCE {
            run += 1;
            best = best.max(run);
        } else {
            run = 0;
        }
    }
    best
}

fn average_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            ranks[idx[k]] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation; `None` when either side has zero rank
/// variance.
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let ra = average_ranks(a);
    let rb = average_ranks(b);
    let n = a.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in ra.iter().zip(rb.iter()) {
        cov += (x - mean) * (y - mean);
        va += (x - mean) * (x - mean);
        vb += (y - mean) * (y - mean);
    }
    if va == 0.0 || vb == 0.0 {
        return None;
    }
    Some(cov / (va * vb).sqrt())
}

/// Examines trained weights group by group: monotone progressions for
/// binned groups, maximal zero-weight spans everywhere, and the global
/// magnitude-frequency correlation against per-feature occurrence counts.
pub fn inspect_weights(
    layout: &[GroupLayout],
    weights: &[f64],
    occurrence_counts: &[u64],
) -> Result<WeightReport> {
    let dim: usize = layout.iter().map(|g| g.width).sum();
    if dim != weights.len() {
        return Err(FedSimError::SchemaMismatch(format!(
            "layout covers {dim} features, params have {}",
            weights.len()
        )));
    }
    if occurrence_counts.len() != weights.len() {
        return Err(FedSimError::MalformedStats(format!(
            "expected {} occurrence counts, got {}",
            weights.len(),
            occurrence_counts.len()
        )));
    }
    let groups = layout
        .iter()
        .map(|g| {
            let slice = &weights[g.offset..g.offset + g.width];
            let span = max_zero_run(slice);
            GroupFinding {
                name: g.name.clone(),
                width: g.width,
                monotonicity: g.binned.then(|| monotonicity_verdict(slice)),
                max_zero_span: span,
                zero_span_fraction: span as f64 / g.width as f64,
            }
        })
        .collect();
    let magnitudes: Vec<f64> = weights.iter().map(|w| w.abs()).collect();
    let counts: Vec<f64> = occurrence_counts.iter().map(|c| *c as f64).collect();
    Ok(WeightReport {
        groups,
        magnitude_frequency_spearman: spearman(&magnitudes, &counts),
    })
}

/// Side-by-side threshold tables for the training-eligible population and
/// the full deployment population.
#[derive(Debug, Clone)]
pub struct SkewReport {
    pub taus: Vec<f64>,
    pub training: Vec<ThresholdMetrics>,
    pub deployment: Vec<ThresholdMetrics>,
}

pub const SKEW_TABLE_HEADER: &str = "population,tau,delta_ctr,retained_impressions,retained_clicks";

impl SkewReport {
    /// `delta_ctr(deployment) - delta_ctr(training)` per threshold, when
    /// both are defined.
    pub fn delta_ctr_gaps(&self) -> Vec<Option<f64>> {
        self.training
            .iter()
            .zip(self.deployment.iter())
            .map(|(t, d)| match (t.delta_ctr, d.delta_ctr) {
                (Some(t), Some(d)) => Some(d - t),
                _ => None,
            })
            .collect()
    }

    pub fn csv(&self) -> String {
        let mut out = String::from(SKEW_TABLE_HEADER);
        out.push('\n');
        for row in &self.training {
            out.push_str(&format!("training,{}\n", row.csv_row()));
        }
        for row in &self.deployment {
            out.push_str(&format!("deployment,{}\n", row.csv_row()));
        }
        out
    }
}

/// Scores freshly generated interactions for every device admitted by a
/// policy. This is the simulator's own live-experiment view, not
/// something a production server could compute from reports.
#[allow(clippy::too_many_arguments)]
pub fn score_population(
    model: &ModelParams,
    fleet: &[DeviceProfile],
    policy: &EligibilityPolicy,
    ground_truth: &GroundTruth,
    schema: &FeatureSchema,
    gen: &GeneratorConfig,
    space: &SeedSpace,
    days: u64,
) -> Result<Vec<ScoredImpression>> {
    let categories = schema
        .group_named(crate::features::group_names::CATEGORY_CLICKS)
        .map(|(_, g)| g.kind.width())
        .unwrap_or(0);
    let mut out = Vec::new();
    for device in fleet.iter().filter(|d| is_eligible(d, policy)) {
        let mut counters = UserCounters::new(categories);
        let mut stats = DayStats::default();
        for day in 0..days {
            for ex in generate_interactions(
                device,
                &mut counters,
                ground_truth,
                schema,
                day,
                gen,
                space,
                &mut stats,
            )? {
                out.push(ScoredImpression {
                    score: predict_score(model, &ex.features)?,
                    clicked: ex.label.is_click(),
                });
            }
        }
    }
    Ok(out)
}

/// Runs the sweep over interactions generated by the training-eligible
/// population and by the deployment population, holding the model fixed.
#[allow(clippy::too_many_arguments)]
pub fn compare_populations(
    model: &ModelParams,
    fleet: &[DeviceProfile],
    training_policy: &EligibilityPolicy,
    deployment_policy: &EligibilityPolicy,
    ground_truth: &GroundTruth,
    schema: &FeatureSchema,
    gen: &GeneratorConfig,
    taus: &[f64],
    space: &SeedSpace,
    days: u64,
) -> Result<SkewReport> {
    if !training_policy.is_subset_of(deployment_policy) {
        return Err(FedSimError::InvalidConfig(
            "deployment policy must admit every training-eligible device".into(),
        ));
    }
    let training = score_population(
        model,
        fleet,
        training_policy,
        ground_truth,
        schema,
        gen,
        space,
        days,
    )?;
    if training.is_empty() {
        return Err(FedSimError::EmptyPopulation("training".into()));
    }
    let deployment = score_population(
        model,
        fleet,
        deployment_policy,
        ground_truth,
        schema,
        gen,
        space,
        days,
    )?;
    if deployment.is_empty() {
        return Err(FedSimError::EmptyPopulation("deployment".into()));
    }
    let taus = if taus.is_empty() {
        uniform_taus(&training, 3)
    } else {
        taus.to_vec()
    };
    Ok(SkewReport {
        training: sweep_thresholds(&training, &taus)?,
        deployment: sweep_thresholds(&deployment, &taus)?,
        taus,
    })
}
