//! Discrete-event fleet simulation binding devices, the data generator,
//! and the round orchestrator.
//!
//! Time is in seconds with one-minute event granularity. The whole run is
//! a pure function of `(config, master seed)`: every draw comes from a
//! named stream or a stateless hash keyed by the entities involved, and
//! simultaneous events are ordered by an explicit kind priority plus a
//! scheduling sequence number.
//!
//! Event order within one timestamp: day generation, impressions landing
//! in caches, report arrivals, round closes (so a report on the window
//! boundary is counted), the training-period tick (close before start),
//! then device wakes (which enroll into the freshly reset period).

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};

use crate::analysis::MetricRecord;
use crate::config::ExperimentConfig;
use crate::datagen::{
    build_fleet, generate_interactions, DayStats, GeneratorConfig, GroundTruth, UserCounters,
};
use crate::device::{execute_task, ClientReport, TrainingCache};
use crate::error::Result;
use crate::features::FeatureSchema;
use crate::fleet::{is_available, is_eligible, AvailabilitySchedule, DeviceProfile, DAY_S, HOUR_S};
use crate::model::TrainingExample;
use crate::rng::{hash_bernoulli, mix64, unit_f64, SeedSpace};
use crate::server::{
    CheckInOutcome, ClientId, Orchestrator, RoundKind, RoundOutcome, RoundRecord, ServerCounters,
};

const MINUTE_S: u64 = 60;

#[derive(Debug)]
enum EventKind {
    GenerateDay {
        day: u64,
    },
    Impression {
        device: usize,
        example: Box<TrainingExample>,
    },
    Report {
        round_id: u64,
        device: usize,
        report: Box<ClientReport>,
    },
    CloseRounds,
    Tick,
    Wake {
        device: usize,
    },
}

impl EventKind {
    fn priority(&self) -> u8 {
        match self {
            EventKind::GenerateDay { .. } => 0,
            EventKind::Impression { .. } => 1,
            EventKind::Report { .. } => 2,
            EventKind::CloseRounds => 3,
            EventKind::Tick => 4,
            EventKind::Wake { .. } => 5,
        }
    }
}

struct Event {
    time: u64,
    priority: u8,
    seq: u64,
    kind: EventKind,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        (self.time, self.priority, self.seq) == (other.time, other.priority, other.seq)
    }
}
impl Eq for Event {}
impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Event {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.time, self.priority, self.seq).cmp(&(other.time, other.priority, other.seq))
    }
}

struct DeviceState {
    profile: DeviceProfile,
    schedule: AvailabilitySchedule,
    cache: TrainingCache,
    counters: UserCounters,
    /// Passes the training eligibility policy; ineligible devices never
    /// check in.
    eligible: bool,
    /// Enrolled with the server and waiting for a round to start.
    waiting: bool,
}

/// A compact trace of processed events for replay comparison.
pub type EventLog = Vec<(u64, u8, u64)>;

/// Everything a finished run exposes for analysis and output.
#[derive(Debug, Clone)]
pub struct SimOutcome {
    pub history: Vec<RoundRecord>,
    pub counters: ServerCounters,
    pub final_params: crate::model::ModelParams,
    /// Per committed eval round: (started_at, mean loss, example weight).
    pub eval_loss_records: Vec<MetricRecord>,
    /// Per committed train round: (started_at, examples processed, 1).
    pub train_example_records: Vec<MetricRecord>,
    /// Occurrence count per feature id across all generated examples.
    pub feature_stats: Vec<u64>,
    pub generated_impressions: u64,
    pub generated_clicks: u64,
    pub baseline_range_clamped: u64,
    /// `(reporters in committed rounds, fleet size)` per tier.
    pub tier_reporters: BTreeMap<&'static str, (u64, u64)>,
}

impl SimOutcome {
    pub fn committed(&self, kind: RoundKind) -> usize {
        self.history
            .iter()
            .filter(|r| r.kind == kind && r.outcome == RoundOutcome::Committed)
            .count()
    }

    pub fn abandoned(&self, kind: RoundKind) -> usize {
        self.history
            .iter()
            .filter(|r| r.kind == kind && r.outcome == RoundOutcome::Abandoned)
            .count()
    }

    pub fn round_log_csv(&self) -> String {
        let mut out = String::from(crate::server::ROUND_LOG_HEADER);
        out.push('\n');
        for rec in &self.history {
            out.push_str(&rec.csv_row());
            out.push('\n');
        }
        out
    }
}

/// The simulated world: fleet, orchestrator, and the event queue.
pub struct World {
    space: SeedSpace,
    schema: FeatureSchema,
    ground_truth: GroundTruth,
    generator: GeneratorConfig,
    devices: Vec<DeviceState>,
    orchestrator: Orchestrator,
    population: String,
    horizon_s: u64,
    clock: u64,
    events: BinaryHeap<Reverse<Event>>,
    next_seq: u64,
    feature_stats: Vec<u64>,
    day_stats: DayStats,
    /// round id -> (window close time, reporters delivered in-window)
    round_reporters: BTreeMap<u64, (u64, Vec<usize>)>,
    tier_reporters: BTreeMap<&'static str, (u64, u64)>,
    event_log: Option<EventLog>,
    avail_seed: u64,
    dropout_seed: u64,
    latency_seed: u64,
    wake_seed: u64,
}

impl World {
    pub fn new(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let space = SeedSpace::new(config.master_seed);
        let schema = config.build_schema()?;
        let ground_truth = config.build_ground_truth(&schema);
        let fleet = build_fleet(
            &config.fleet.subpopulations,
            config.category_count(),
            &space,
        );
        let training_policy = config.policy.training.to_policy();

        let ttl_s = config.device.cache_ttl_days * DAY_S;
        let capacity = config.device.cache_capacity;
        let categories = config.category_count();
        let schedules: BTreeMap<&str, AvailabilitySchedule> = config
            .fleet
            .subpopulations
            .iter()
            .map(|s| {
                (
                    s.name.as_str(),
                    AvailabilitySchedule::from_slice(&s.availability).expect("validated"),
                )
            })
            .collect();
        let devices: Vec<DeviceState> = fleet
            .into_iter()
            .map(|profile| {
                let eligible = is_eligible(&profile, &training_policy);
                DeviceState {
                    schedule: schedules[profile.subpopulation.as_str()].clone(),
                    cache: TrainingCache::new(ttl_s, capacity),
                    counters: UserCounters::new(categories),
                    eligible,
                    waiting: false,
                    profile,
                }
            })
            .collect();

        let orchestrator = Orchestrator::new(
            config.to_server_config(),
            crate::model::ModelParams::zeros(schema.total_dimension(), schema.schema_id()),
        )?;

        let mut tier_reporters: BTreeMap<&'static str, (u64, u64)> = BTreeMap::new();
        for d in &devices {
            tier_reporters
                .entry(d.profile.tier.as_str())
                .or_insert((0, 0))
                .1 += 1;
        }

        let horizon_s = config.horizon_days * DAY_S;
        let dim = schema.total_dimension();
        let mut world = World {
            avail_seed: space.stream("availability"),
            dropout_seed: space.stream("dropout"),
            latency_seed: space.stream("latency"),
            wake_seed: space.stream("wake"),
            space,
            schema,
            ground_truth,
            generator: config.to_generator(),
            devices,
            orchestrator,
            population: config.population.clone(),
            horizon_s,
            clock: 0,
            events: BinaryHeap::new(),
            next_seq: 0,
            feature_stats: vec![0; dim],
            day_stats: DayStats::default(),
            round_reporters: BTreeMap::new(),
            tier_reporters,
            event_log: None,
        };

        for day in 0..config.horizon_days {
            world.schedule(day * DAY_S, EventKind::GenerateDay { day });
        }
        let period = config.round.training_period_s;
        let mut t = period;
        while t < horizon_s {
            world.schedule(t, EventKind::Tick);
            t += period;
        }
        for i in 0..world.devices.len() {
            if world.devices[i].eligible {
                let stagger = mix64(world.wake_seed ^ world.devices[i].profile.device_id) % HOUR_S;
                world.schedule(stagger / MINUTE_S * MINUTE_S, EventKind::Wake { device: i });
            }
        }
        Ok(world)
    }

    pub fn record_event_log(&mut self) {
        self.event_log = Some(Vec::new());
    }

    pub fn take_event_log(&mut self) -> EventLog {
        self.event_log.take().unwrap_or_default()
    }

    pub fn now(&self) -> u64 {
        self.clock
    }

    pub fn orchestrator(&self) -> &Orchestrator {
        &self.orchestrator
    }

    pub fn schema(&self) -> &FeatureSchema {
        &self.schema
    }

    pub fn ground_truth(&self) -> &GroundTruth {
        &self.ground_truth
    }

    pub fn device_profiles(&self) -> Vec<DeviceProfile> {
        self.devices.iter().map(|d| d.profile.clone()).collect()
    }

    /// Pooled training examples currently cached by eligible devices;
    /// test-oracle access for centralized baselines.
    pub fn pooled_cache_snapshot(&mut self) -> Vec<TrainingExample> {
        let now = self.clock;
        let mut out = Vec::new();
        for d in self.devices.iter_mut() {
            if d.eligible {
                d.cache.evict(now);
                out.extend(d.cache.query(
                    &crate::device::SelectionCriteria {
                        min_created_at: 0,
                        max_created_at: u64::MAX,
                        max_examples: usize::MAX,
                    },
                    now,
                ));
            }
        }
        out
    }

    fn schedule(&mut self, time: u64, kind: EventKind) {
        let priority = kind.priority();
        let seq = self.next_seq;
        self.next_seq += 1;
        self.events.push(Reverse(Event {
            time,
            priority,
            seq,
            kind,
        }));
    }

    fn pacing_next_wake(&self, device: usize, now: u64) -> u64 {
        let cfg = self.orchestrator.config();
        let base = cfg.pacing_base_s as f64;
        let jitter = cfg.pacing_jitter;
        let u = unit_f64(mix64(
            self.wake_seed ^ mix64(self.devices[device].profile.device_id ^ now),
        ));
        let delay = (base * (1.0 + jitter * (2.0 * u - 1.0))).round().max(60.0) as u64;
        now + delay / MINUTE_S * MINUTE_S
    }

    fn next_hour_wake(&self, device: usize, now: u64) -> u64 {
        let boundary = (now / HOUR_S + 1) * HOUR_S;
        let slot = boundary / HOUR_S;
        let offset =
            mix64(self.wake_seed ^ mix64(self.devices[device].profile.device_id) ^ slot) % 600;
        boundary + offset / MINUTE_S * MINUTE_S
    }

    fn wake(&mut self, device: usize, at: u64) {
        if at < self.horizon_s {
            self.schedule(at, EventKind::Wake { device });
        }
    }

    fn handle_wake(&mut self, device: usize, now: u64) {
        let d = &self.devices[device];
        if d.waiting {
            return;
        }
        if !is_available(&d.profile, &d.schedule, now, self.avail_seed) {
            let at = self.next_hour_wake(device, now);
            self.wake(device, at);
            return;
        }
        let id = d.profile.device_id;
        match self
            .orchestrator
            .check_in(id, &self.population.clone(), now)
        {
            CheckInOutcome::Enrolled => {
                self.devices[device].waiting = true;
            }
            CheckInOutcome::RetryAfter { seconds } => {
                let at = now + seconds.max(MINUTE_S) / MINUTE_S * MINUTE_S;
                self.wake(device, at);
            }
        }
    }

    fn handle_tick(&mut self, now: u64) {
        // Gathered devices whose conditions changed withdraw before the
        // round starts.
        for i in 0..self.devices.len() {
            if self.devices[i].waiting {
                let d = &self.devices[i];
                if !is_available(&d.profile, &d.schedule, now, self.avail_seed) {
                    self.orchestrator.withdraw(d.profile.device_id);
                    self.devices[i].waiting = false;
                    let at = self.next_hour_wake(i, now);
                    self.wake(i, at);
                }
            }
        }

        let assignments = self.orchestrator.begin_period(now);
        if assignments.is_empty() {
            return;
        }
        let window = self.orchestrator.config().round.report_window_s;
        let mut started_rounds: Vec<u64> = assignments.iter().map(|a| a.task.round_id).collect();
        started_rounds.dedup();
        for rid in &started_rounds {
            self.round_reporters
                .insert(*rid, (now + window, Vec::new()));
        }
        self.schedule(now + window, EventKind::CloseRounds);

        let by_id: BTreeMap<ClientId, usize> = self
            .devices
            .iter()
            .enumerate()
            .map(|(i, d)| (d.profile.device_id, i))
            .collect();
        for assignment in assignments {
            let device = by_id[&assignment.client];
            self.devices[device].waiting = false;
            let report = {
                let d = &mut self.devices[device];
                execute_task(&mut d.cache, &assignment.task, &self.population, now)
            };
            match report {
                Ok(Some(report)) => {
                    let d = &self.devices[device];
                    let round_id = assignment.task.round_id;
                    let delivered = hash_bernoulli(
                        self.dropout_seed ^ mix64(round_id) ^ d.profile.device_id,
                        d.profile.network_reliability,
                    );
                    if delivered {
                        // Report latency: most uploads land in the first
                        // half of the window, a 10% tail stretches to
                        // 1.5x the window so some reports naturally
                        // straggle past the close.
                        let key = self.latency_seed ^ mix64(round_id) ^ d.profile.device_id;
                        let w = window as f64;
                        let pick = unit_f64(mix64(key));
                        let u = unit_f64(mix64(key ^ 0x9e37_79b9));
                        let latency = if pick < 0.9 {
                            10.0 + u * (0.5 * w - 10.0)
                        } else {
                            0.5 * w + u * w
                        };
                        self.schedule(
                            now + latency as u64,
                            EventKind::Report {
                                round_id,
                                device,
                                report: Box::new(report),
                            },
                        );
                    }
                }
                Ok(None) => {} // no matching examples: the client declines
                Err(err) => panic!("task execution failed: {err}"),
            }
            let at = self.pacing_next_wake(device, now);
            self.wake(device, at);
        }
    }

    fn finish_round(&mut self, record: &RoundRecord) {
        if record.outcome == RoundOutcome::Committed {
            if let Some((_, reporters)) = self.round_reporters.get(&record.round_id) {
                for &device in reporters {
                    let tier = self.devices[device].profile.tier.as_str();
                    self.tier_reporters.entry(tier).or_insert((0, 0)).0 += 1;
                }
            }
        }
        self.round_reporters.remove(&record.round_id);
    }

    fn handle_close(&mut self, now: u64) {
        for record in self.orchestrator.close_due_rounds(now) {
            self.finish_round(&record);
        }
    }

    fn handle_generate_day(&mut self, day: u64) {
        for i in 0..self.devices.len() {
            if !self.devices[i].eligible {
                continue;
            }
            let examples = {
                let d = &mut self.devices[i];
                generate_interactions(
                    &d.profile,
                    &mut d.counters,
                    &self.ground_truth,
                    &self.schema,
                    day,
                    &self.generator,
                    &self.space,
                    &mut self.day_stats,
                )
                .expect("generator and schema are validated together")
            };
            for ex in examples {
                for (id, _) in ex.features.iter() {
                    self.feature_stats[id] += 1;
                }
                self.schedule(
                    ex.created_at,
                    EventKind::Impression {
                        device: i,
                        example: Box::new(ex),
                    },
                );
            }
        }
    }

    /// Processes every event with `time <= until`. Returns the number of
    /// events handled.
    pub fn step_until(&mut self, until: u64) -> usize {
        let mut handled = 0;
        while let Some(Reverse(head)) = self.events.peek() {
            if head.time > until {
                break;
            }
            let Reverse(event) = self.events.pop().unwrap();
            self.clock = self.clock.max(event.time);
            if let Some(log) = &mut self.event_log {
                let tag = match &event.kind {
                    EventKind::GenerateDay { day } => *day,
                    EventKind::Impression { device, .. } => *device as u64,
                    EventKind::Report { round_id, .. } => *round_id,
                    EventKind::CloseRounds => 0,
                    EventKind::Tick => 0,
                    EventKind::Wake { device } => *device as u64,
                };
                log.push((event.time, event.priority, tag));
            }
            match event.kind {
                EventKind::GenerateDay { day } => self.handle_generate_day(day),
                EventKind::Impression { device, example } => {
                    let now = event.time;
                    self.devices[device].cache.put(*example, now);
                }
                EventKind::Report {
                    round_id,
                    device,
                    report,
                } => {
                    if let Some(record) = {
                        let now = event.time;
                        if let Some((deadline, reporters)) = self.round_reporters.get_mut(&round_id)
                        {
                            if now <= *deadline {
                                reporters.push(device);
                            }
                        }
                        let id = self.devices[device].profile.device_id;
                        self.orchestrator.receive_report(round_id, id, *report, now)
                    } {
                        self.finish_round(&record);
                    }
                }
                EventKind::CloseRounds => self.handle_close(event.time),
                EventKind::Tick => self.handle_tick(event.time),
                EventKind::Wake { device } => self.handle_wake(device, event.time),
            }
            handled += 1;
        }
        self.clock = self.clock.max(until.min(self.horizon_s));
        handled
    }

    /// Runs the remaining schedule to exhaustion (new activity stops at
    /// the horizon; in-flight reports and closes drain).
    pub fn run(&mut self) {
        self.step_until(u64::MAX);
    }

    pub fn outcome(&self) -> SimOutcome {
        let history: Vec<RoundRecord> = self.orchestrator.model().history().to_vec();
        let mut eval_loss_records = Vec::new();
        let mut train_example_records: Vec<MetricRecord> = Vec::new();
        for rec in &history {
            if rec.outcome != RoundOutcome::Committed {
                continue;
            }
            match rec.kind {
                RoundKind::Eval => {
                    if let Some(loss) = rec.mean_loss() {
                        eval_loss_records.push(MetricRecord {
                            time: rec.started_at,
                            value: loss,
                            weight: rec.example_count() as f64,
                        });
                    }
                }
                RoundKind::Train => {
                    train_example_records.push(MetricRecord {
                        time: rec.started_at,
                        value: rec.example_count() as f64,
                        weight: 1.0,
                    });
                }
            }
        }
        SimOutcome {
            counters: self.orchestrator.counters().clone(),
            final_params: self.orchestrator.model().params().clone(),
            history,
            eval_loss_records,
            train_example_records,
            feature_stats: self.feature_stats.clone(),
            generated_impressions: self.day_stats.impressions,
            generated_clicks: self.day_stats.clicks,
            baseline_range_clamped: self.day_stats.baseline_range_clamped,
            tier_reporters: self.tier_reporters.clone(),
        }
    }
}

/// Builds a world from the config and runs it to completion.
pub fn run_simulation(config: &ExperimentConfig) -> Result<SimOutcome> {
    let mut world = World::new(config)?;
    world.run();
    Ok(world.outcome())
}
