//! Server-side round orchestration: check-in and gathering, task
//! distribution, report-window accounting, federated averaging, and the
//! concurrent evaluation rounds.
//!
//! The orchestrator is one logical state machine driven by timestamped
//! calls from the event loop. Round lifecycle is strictly
//! gathering -> running -> (committed | abandoned); the global model
//! changes only when a train round commits.
//!
//! Check-in protocol as realized here: the real exchange blocks a client
//! until the gathering round starts, so `check_in` answers either
//! `Enrolled` (the task is handed over when the round starts) or a pacing
//! retry. Each training period accepts at most `goal_client_count` new
//! enrollments per task kind; an enrolled surplus at round start carries
//! over to the next gathering instead of being re-dialed.

use std::collections::{BTreeMap, BTreeSet};

use rand_chacha::ChaCha8Rng;
use rand_core::SeedableRng;

use crate::device::{
    metric_names, ClientReport, MetricAccum, SelectionCriteria, TaskKind, TrainingTask,
};
use crate::error::{FedSimError, Result};
use crate::model::{LocalTrainConfig, ModelParams, ModelUpdate};
use crate::rng;

/// Simulation-internal client handle. Never appears inside a report.
pub type ClientId = u64;

/// The five round-gating parameters.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RoundConfig {
    pub goal_client_count: usize,
    pub min_client_count: usize,
    pub training_period_s: u64,
    pub report_window_s: u64,
    pub min_reporting_fraction: f64,
}

impl Default for RoundConfig {
    fn default() -> Self {
        Self {
            goal_client_count: 100,
            min_client_count: 80,
            training_period_s: 300,
            report_window_s: 120,
            min_reporting_fraction: 0.8,
        }
    }
}

impl RoundConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_client_count == 0 || self.min_client_count > self.goal_client_count {
            return Err(FedSimError::InvalidConfig(
                "round: need 1 <= min_client_count <= goal_client_count".into(),
            ));
        }
        if self.training_period_s == 0 || self.report_window_s == 0 {
            return Err(FedSimError::InvalidConfig(
                "round: durations must be positive".into(),
            ));
        }
        if !(self.min_reporting_fraction > 0.0 && self.min_reporting_fraction <= 1.0) {
            return Err(FedSimError::InvalidConfig(
                "round: min_reporting_fraction must be in (0, 1]".into(),
            ));
        }
        Ok(())
    }
}

/// Reports needed to commit: `ceil(fraction * selected)`, evaluated with a
/// small guard so binary representation of fractions like 0.8 cannot push
/// an exact product over the ceiling.
pub fn required_reports(fraction: f64, selected: usize) -> usize {
    (fraction * selected as f64 - 1e-9).ceil().max(1.0) as usize
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RoundKind {
    Train,
    Eval,
}

impl RoundKind {
    pub fn as_str(self) -> &'static str {
        match self {
            RoundKind::Train => "train",
            RoundKind::Eval => "eval",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RoundOutcome {
    Committed,
    Abandoned,
}

impl RoundOutcome {
    pub fn as_str(self) -> &'static str {
        match self {
            RoundOutcome::Committed => "committed",
            RoundOutcome::Abandoned => "abandoned",
        }
    }
}

/// Lifecycle outcome of one round.
#[derive(Debug, Clone)]
pub struct RoundRecord {
    pub round_id: u64,
    pub kind: RoundKind,
    pub selected: Vec<ClientId>,
    pub reports_received: u32,
    pub outcome: RoundOutcome,
    pub started_at: u64,
    pub closed_at: u64,
    pub aggregate_metrics: BTreeMap<String, f64>,
}

pub const ROUND_LOG_HEADER: &str =
    "round_id,kind,sim_time,selected,reported,outcome,mean_loss,example_count";

impl RoundRecord {
    pub fn mean_loss(&self) -> Option<f64> {
        self.aggregate_metrics.get("mean_loss").copied()
    }

    pub fn example_count(&self) -> u64 {
        self.aggregate_metrics
            .get("example_count")
            .copied()
            .unwrap_or(0.0) as u64
    }

    pub fn csv_row(&self) -> String {
        let mean_loss = self
            .mean_loss()
            .map(|v| format!("{v:.6}"))
            .unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{}",
            self.round_id,
            self.kind.as_str(),
            self.started_at,
            self.selected.len(),
            self.reports_received,
            self.outcome.as_str(),
            mean_loss,
            self.example_count()
        )
    }
}

/// Example-count weighting follows the federated averaging algorithm;
/// uniform weighting is kept behind this switch for comparison runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    ExampleCount,
    Uniform,
}

/// Weighted mean of client deltas.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregateDelta {
    pub weights: Vec<f64>,
    pub bias: f64,
}

/// Averages the contributions: `sum(n_k * delta_k) / sum(n_k)` under
/// example-count weighting, plain mean under uniform weighting.
pub fn federated_average(updates: &[ModelUpdate], weighting: Weighting) -> Result<AggregateDelta> {
    let first = updates.first().ok_or(FedSimError::EmptyTrainingSet)?;
    let dim = first.delta_weights.len();
    let version = first.round_version;
    let mut weights = vec![0.0; dim];
    let mut bias = 0.0;
    let mut total = 0.0;
    for up in updates {
        if up.round_version != version || up.schema_id != first.schema_id {
            return Err(FedSimError::VersionMismatch);
        }
        if up.delta_weights.len() != dim {
            return Err(FedSimError::SchemaMismatch(
                "updates disagree on dimension".into(),
            ));
        }
        let w = match weighting {
            Weighting::ExampleCount => up.example_count as f64,
            Weighting::Uniform => 1.0,
        };
        if w <= 0.0 {
            return Err(FedSimError::EmptyTrainingSet);
        }
        for (acc, d) in weights.iter_mut().zip(up.delta_weights.iter()) {
            *acc += w * d;
        }
        bias += w * up.delta_bias;
        total += w;
    }
    for acc in weights.iter_mut() {
        *acc /= total;
    }
    Ok(AggregateDelta {
        weights,
        bias: bias / total,
    })
}

/// Current model parameters plus the full round history.
#[derive(Debug, Clone)]
pub struct GlobalModel {
    params: ModelParams,
    history: Vec<RoundRecord>,
}

impl GlobalModel {
    pub fn new(params: ModelParams) -> Self {
        Self {
            params,
            history: Vec::new(),
        }
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn history(&self) -> &[RoundRecord] {
        &self.history
    }

    pub fn committed_train_rounds(&self) -> u32 {
        self.history
            .iter()
            .filter(|r| r.kind == RoundKind::Train && r.outcome == RoundOutcome::Committed)
            .count() as u32
    }

    /// Accumulates a committed round's delta:
    /// `params += server_lr * delta`, version +1.
    pub fn apply_delta(&mut self, delta: &AggregateDelta, server_lr: f64) {
        for (w, d) in self
            .params
            .weights_mut()
            .iter_mut()
            .zip(delta.weights.iter())
        {
            *w += server_lr * d;
        }
        self.params
            .set_bias(self.params.bias() + server_lr * delta.bias);
        self.params.bump_version();
    }

    fn record(&mut self, rec: RoundRecord) {
        self.history.push(rec);
    }
}

/// Answer to a check-in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckInOutcome {
    /// Client is gathered for the next round; it receives its task when
    /// the round starts.
    Enrolled,
    /// Come back later; minimum delay in seconds.
    RetryAfter { seconds: u64 },
}

#[derive(Debug, Clone)]
pub struct TaskAssignment {
    pub client: ClientId,
    pub task: TrainingTask,
}

#[derive(Debug, Clone, Default)]
pub struct ServerCounters {
    pub straggler_reports: u64,
    pub duplicate_reports: u64,
    pub unknown_round_reports: u64,
    pub stale_updates: u64,
    pub unknown_population_checkins: u64,
    pub duplicate_enrollments: u64,
    pub capacity_retries: u64,
    /// Clients concurrently selected by an overlapping train and eval
    /// round, and total selections, for the overlap-rate metric.
    pub overlap_selections: u64,
    pub total_selections: u64,
}

impl ServerCounters {
    pub fn overlap_rate(&self) -> f64 {
        if self.total_selections == 0 {
            0.0
        } else {
            self.overlap_selections as f64 / self.total_selections as f64
        }
    }
}

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub round: RoundConfig,
    pub population: String,
    pub pacing_base_s: u64,
    pub pacing_jitter: f64,
    pub server_learning_rate: f64,
    pub weighting: Weighting,
    /// Probability that a check-in is routed to eval gathering once a
    /// committed model exists.
    pub eval_fraction: f64,
    /// Lookback for the selection criteria sent with each task.
    pub selection_window_s: u64,
    pub max_examples_per_task: usize,
    pub local_train: LocalTrainConfig,
    pub eval_taus: Vec<f64>,
    pub seed: u64,
}

impl ServerConfig {
    pub fn validate(&self) -> Result<()> {
        self.round.validate()?;
        if self.pacing_base_s == 0 {
            return Err(FedSimError::InvalidConfig(
                "pacing delay must be positive".into(),
            ));
        }
        if !(0.0..=0.5).contains(&self.pacing_jitter) {
            return Err(FedSimError::InvalidConfig(
                "pacing jitter must be in [0, 0.5]".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.eval_fraction) {
            return Err(FedSimError::InvalidConfig(
                "eval_fraction must be in [0, 1)".into(),
            ));
        }
        if !self.server_learning_rate.is_finite() || self.server_learning_rate <= 0.0 {
            return Err(FedSimError::InvalidConfig(
                "server learning rate must be positive".into(),
            ));
        }
        if self.max_examples_per_task == 0 {
            return Err(FedSimError::InvalidConfig(
                "max_examples_per_task must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

struct ActiveRound {
    kind: RoundKind,
    selected: BTreeSet<ClientId>,
    reported: BTreeSet<ClientId>,
    updates: Vec<(ClientId, ModelUpdate)>,
    metrics: BTreeMap<String, MetricAccum>,
    started_at: u64,
    model_version: u32,
}

pub struct Orchestrator {
    cfg: ServerConfig,
    model: GlobalModel,
    train_pool: Vec<ClientId>,
    eval_pool: Vec<ClientId>,
    enrolled: BTreeSet<ClientId>,
    period_train_enrollments: usize,
    period_eval_enrollments: usize,
    active: BTreeMap<u64, ActiveRound>,
    /// Selected sets of closed rounds, so late reports from real
    /// participants count as stragglers rather than unknown-round noise.
    closed: BTreeMap<u64, BTreeSet<ClientId>>,
    next_round_id: u64,
    counters: ServerCounters,
    rng: ChaCha8Rng,
}

impl Orchestrator {
    pub fn new(cfg: ServerConfig, initial: ModelParams) -> Result<Self> {
        cfg.validate()?;
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(Self {
            cfg,
            model: GlobalModel::new(initial),
            train_pool: Vec::new(),
            eval_pool: Vec::new(),
            enrolled: BTreeSet::new(),
            period_train_enrollments: 0,
            period_eval_enrollments: 0,
            active: BTreeMap::new(),
            closed: BTreeMap::new(),
            next_round_id: 0,
            counters: ServerCounters::default(),
            rng,
        })
    }

    pub fn config(&self) -> &ServerConfig {
        &self.cfg
    }

    pub fn model(&self) -> &GlobalModel {
        &self.model
    }

    pub fn counters(&self) -> &ServerCounters {
        &self.counters
    }

    pub fn enrolled_count(&self) -> usize {
        self.train_pool.len()
    }

    pub fn has_active_rounds(&self) -> bool {
        !self.active.is_empty()
    }

    fn pacing_delay(&mut self) -> u64 {
        let base = self.cfg.pacing_base_s as f64;
        let jitter = self.cfg.pacing_jitter;
        if jitter == 0.0 {
            return self.cfg.pacing_base_s;
        }
        let u = rng::next_unit(&mut self.rng);
        (base * (1.0 + jitter * (2.0 * u - 1.0))).round().max(1.0) as u64
    }

    fn eval_gathering_open(&self) -> bool {
        self.cfg.eval_fraction > 0.0 && self.model.params().round_version() >= 1
    }

    /// Drops a gathered client that can no longer participate (its
    /// environmental conditions changed while it waited).
    pub fn withdraw(&mut self, client: ClientId) {
        if self.enrolled.remove(&client) {
            self.train_pool.retain(|c| *c != client);
            self.eval_pool.retain(|c| *c != client);
        }
    }

    /// One client checks in with a population name and nothing else.
    pub fn check_in(&mut self, client: ClientId, population: &str, _now: u64) -> CheckInOutcome {
        if population != self.cfg.population {
            self.counters.unknown_population_checkins += 1;
            let seconds = self.pacing_delay();
            return CheckInOutcome::RetryAfter { seconds };
        }
        if self.enrolled.contains(&client) {
            self.counters.duplicate_enrollments += 1;
            let seconds = self.pacing_delay();
            return CheckInOutcome::RetryAfter { seconds };
        }
        let goal = self.cfg.round.goal_client_count;
        let want_eval =
            self.eval_gathering_open() && rng::next_unit(&mut self.rng) < self.cfg.eval_fraction;
        let train_open = self.period_train_enrollments < goal;
        let eval_open = self.eval_gathering_open() && self.period_eval_enrollments < goal;

        let slot = if want_eval && eval_open {
            Some(RoundKind::Eval)
        } else if train_open {
            Some(RoundKind::Train)
        } else if eval_open {
            Some(RoundKind::Eval)
        } else {
            None
        };
        match slot {
            Some(RoundKind::Train) => {
                self.train_pool.push(client);
                self.enrolled.insert(client);
                self.period_train_enrollments += 1;
                CheckInOutcome::Enrolled
            }
            Some(RoundKind::Eval) => {
                self.eval_pool.push(client);
                self.enrolled.insert(client);
                self.period_eval_enrollments += 1;
                CheckInOutcome::Enrolled
            }
            None => {
                self.counters.capacity_retries += 1;
                let seconds = self.pacing_delay();
                CheckInOutcome::RetryAfter { seconds }
            }
        }
    }

    fn make_task(
        &self,
        round_id: u64,
        kind: RoundKind,
        client: ClientId,
        now: u64,
    ) -> TrainingTask {
        let mut train_config = self.cfg.local_train.clone();
        // Per-assignment shuffle seed so client passes are decorrelated
        // but reproducible.
        train_config.shuffle_seed = rng::mix64(self.cfg.seed ^ rng::mix64(round_id) ^ client);
        TrainingTask {
            round_id,
            kind: match kind {
                RoundKind::Train => TaskKind::Train,
                RoundKind::Eval => TaskKind::Eval,
            },
            model: self.model.params().clone(),
            train_config,
            criteria: SelectionCriteria {
                min_created_at: now.saturating_sub(self.cfg.selection_window_s),
                max_created_at: now,
                max_examples: self.cfg.max_examples_per_task,
            },
            eval_taus: match kind {
                RoundKind::Train => Vec::new(),
                RoundKind::Eval => self.cfg.eval_taus.clone(),
            },
        }
    }

    fn start_round_from_pool(&mut self, kind: RoundKind, now: u64) -> Option<Vec<TaskAssignment>> {
        let pool = match kind {
            RoundKind::Train => &mut self.train_pool,
            RoundKind::Eval => &mut self.eval_pool,
        };
        if pool.len() < self.cfg.round.min_client_count {
            return None;
        }
        // Uniform selection among the gathered clients; the surplus stays
        // enrolled for the next gathering.
        rng::shuffle(&mut self.rng, pool.as_mut_slice());
        let take = pool.len().min(self.cfg.round.goal_client_count);
        let selected: Vec<ClientId> = pool.drain(..take).collect();
        for c in &selected {
            self.enrolled.remove(c);
        }

        self.counters.total_selections += selected.len() as u64;
        let other_kind_active: BTreeSet<ClientId> = self
            .active
            .values()
            .filter(|r| r.kind != kind)
            .flat_map(|r| r.selected.iter().copied())
            .collect();
        self.counters.overlap_selections += selected
            .iter()
            .filter(|c| other_kind_active.contains(c))
            .count() as u64;

        let round_id = self.next_round_id;
        self.next_round_id += 1;
        let assignments: Vec<TaskAssignment> = selected
            .iter()
            .map(|&client| TaskAssignment {
                client,
                task: self.make_task(round_id, kind, client, now),
            })
            .collect();
        self.active.insert(
            round_id,
            ActiveRound {
                kind,
                selected: selected.iter().copied().collect(),
                reported: BTreeSet::new(),
                updates: Vec::new(),
                metrics: BTreeMap::new(),
                started_at: now,
                model_version: self.model.params().round_version(),
            },
        );
        Some(assignments)
    }

    /// Starts a train round if enough clients are gathered; otherwise the
    /// pool keeps gathering.
    pub fn try_start_round(&mut self, now: u64) -> Option<Vec<TaskAssignment>> {
        self.start_round_from_pool(RoundKind::Train, now)
    }

    /// Starts an eval round of the most recent committed model; never
    /// before the first commit.
    pub fn try_start_eval_round(&mut self, now: u64) -> Option<Vec<TaskAssignment>> {
        if self.model.params().round_version() == 0 {
            return None;
        }
        self.start_round_from_pool(RoundKind::Eval, now)
    }

    /// Training-period tick: resets the per-period enrollment budgets and
    /// attempts to start one train and one eval round.
    pub fn begin_period(&mut self, now: u64) -> Vec<TaskAssignment> {
        self.period_train_enrollments = 0;
        self.period_eval_enrollments = 0;
        let mut out = self.try_start_round(now).unwrap_or_default();
        if let Some(mut ev) = self.try_start_eval_round(now) {
            out.append(&mut ev);
        }
        out
    }

    /// Accepts one report. Reports inside the window (boundary inclusive)
    /// from selected, not-yet-reported clients accumulate; everything
    /// else is discarded with a counter. Returns the closed record when
    /// this report completes the selected set.
    pub fn receive_report(
        &mut self,
        round_id: u64,
        client: ClientId,
        report: ClientReport,
        now: u64,
    ) -> Option<RoundRecord> {
        let Some(round) = self.active.get_mut(&round_id) else {
            match self.closed.get(&round_id) {
                Some(selected) if selected.contains(&client) => {
                    self.counters.straggler_reports += 1
                }
                _ => self.counters.unknown_round_reports += 1,
            }
            return None;
        };
        if !round.selected.contains(&client) {
            self.counters.unknown_round_reports += 1;
            return None;
        }
        if now > round.started_at + self.cfg.round.report_window_s {
            self.counters.straggler_reports += 1;
            return None;
        }
        if !round.reported.insert(client) {
            self.counters.duplicate_reports += 1;
            return None;
        }
        if let Some(update) = report.update {
            if update.round_version != round.model_version {
                self.counters.stale_updates += 1;
                round.reported.remove(&client);
                return None;
            }
            round.updates.push((client, update));
        }
        for (name, acc) in report.metrics {
            round.metrics.entry(name).or_default().merge(acc);
        }
        if round.reported.len() == round.selected.len() {
            return Some(self.close_round(round_id, now));
        }
        None
    }

    /// Rounds whose report window has elapsed, closed in id order.
    pub fn close_due_rounds(&mut self, now: u64) -> Vec<RoundRecord> {
        let due: Vec<u64> = self
            .active
            .iter()
            .filter(|(_, r)| now >= r.started_at + self.cfg.round.report_window_s)
            .map(|(&id, _)| id)
            .collect();
        due.into_iter()
            .map(|id| self.close_round(id, now))
            .collect()
    }

    /// Commits or abandons one round. Committed train rounds apply the
    /// federated average to the global model; committed eval rounds only
    /// aggregate metrics; abandoned rounds discard everything received.
    pub fn close_round(&mut self, round_id: u64, now: u64) -> RoundRecord {
        let mut round = self
            .active
            .remove(&round_id)
            .expect("close_round on unknown or already-closed round");
        let selected_count = round.selected.len();
        let reports = round.reported.len();
        let needed = required_reports(self.cfg.round.min_reporting_fraction, selected_count);
        let committed = reports >= needed;

        let mut aggregate_metrics: BTreeMap<String, f64> = BTreeMap::new();
        let loss_key = match round.kind {
            RoundKind::Train => metric_names::TRAIN_LOSS,
            RoundKind::Eval => metric_names::EVAL_LOSS,
        };
        if let Some(mean) = round.metrics.get(loss_key).and_then(|m| m.mean()) {
            aggregate_metrics.insert("mean_loss".into(), mean);
        }
        if let Some(m) = round.metrics.get(metric_names::EXAMPLES) {
            aggregate_metrics.insert("example_count".into(), m.sum);
        }

        let outcome = if committed {
            match round.kind {
                RoundKind::Train => {
                    // Deterministic aggregation order regardless of report
                    // arrival order.
                    round.updates.sort_by_key(|(c, _)| *c);
                    let updates: Vec<ModelUpdate> =
                        round.updates.iter().map(|(_, u)| u.clone()).collect();
                    if let Ok(delta) = federated_average(&updates, self.cfg.weighting) {
                        self.model
                            .apply_delta(&delta, self.cfg.server_learning_rate);
                    }
                }
                RoundKind::Eval => {
                    let impressions = round
                        .metrics
                        .get(metric_names::IMPRESSIONS)
                        .map(|m| m.sum)
                        .unwrap_or(0.0);
                    let clicks = round
                        .metrics
                        .get(metric_names::CLICKS)
                        .map(|m| m.sum)
                        .unwrap_or(0.0);
                    for (i, tau) in self.cfg.eval_taus.iter().enumerate() {
                        let shown = round
                            .metrics
                            .get(&metric_names::shown_at(i))
                            .map(|m| m.sum)
                            .unwrap_or(0.0);
                        let clicks_shown = round
                            .metrics
                            .get(&metric_names::clicks_shown_at(i))
                            .map(|m| m.sum)
                            .unwrap_or(0.0);
                        if impressions > 0.0 {
                            aggregate_metrics.insert(
                                format!("retained_impressions_tau{i}"),
                                shown / impressions,
                            );
                        }
                        if clicks > 0.0 {
                            aggregate_metrics
                                .insert(format!("retained_clicks_tau{i}"), clicks_shown / clicks);
                        }
                        aggregate_metrics.insert(format!("tau{i}"), *tau);
                    }
                }
            }
            RoundOutcome::Committed
        } else {
            RoundOutcome::Abandoned
        };

        self.closed.insert(round_id, round.selected.clone());
        let record = RoundRecord {
            round_id,
            kind: round.kind,
            selected: round.selected.into_iter().collect(),
            reports_received: reports as u32,
            outcome,
            started_at: round.started_at,
            closed_at: now,
            aggregate_metrics,
        };
        self.model.record(record.clone());
        record
    }
}
