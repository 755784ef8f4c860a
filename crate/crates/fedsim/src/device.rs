//! Simulated client runtime: the TTL-bounded training cache, selection
//! criteria queries, and execution of training and evaluation tasks.
//!
//! Reports deliberately carry no device identifier of any kind; the
//! transport layer (the event loop) routes them by a separate handle.

use std::collections::BTreeMap;

use crate::error::{FedSimError, Result};
use crate::model::{
    compute_update, log_loss, predict_score, sgd_train, threshold_decision, LocalTrainConfig,
    ModelParams, ModelUpdate, TrainingExample, TriggerDecision,
};

/// On-device store of training examples with TTL retention and a capacity
/// cap. Records are kept ordered by `(created_at, insertion order)`.
#[derive(Debug, Clone)]
pub struct TrainingCache {
    records: Vec<(u64, TrainingExample)>,
    next_seq: u64,
    ttl_seconds: u64,
    capacity: usize,
}

impl TrainingCache {
    pub fn new(ttl_seconds: u64, capacity: usize) -> Self {
        Self {
            records: Vec::new(),
            next_seq: 0,
            ttl_seconds,
            capacity,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn ttl_seconds(&self) -> u64 {
        self.ttl_seconds
    }

    /// Inserts a record, evicting expired entries first and then the
    /// oldest entries if the capacity would be exceeded.
    pub fn put(&mut self, ex: TrainingExample, now: u64) {
        debug_assert!(ex.created_at <= now, "record stamped in the future");
        self.evict(now);
        let seq = self.next_seq;
        self.next_seq += 1;
        // Insertion point: after all records with created_at <= this one,
        // which preserves arrival order for equal timestamps.
        let pos = self
            .records
            .partition_point(|(_, r)| r.created_at <= ex.created_at);
        self.records.insert(pos, (seq, ex));
        while self.records.len() > self.capacity {
            self.records.remove(0);
        }
    }

    /// Drops every record older than the TTL; a record whose age equals
    /// the TTL exactly survives.
    pub fn evict(&mut self, now: u64) {
        let ttl = self.ttl_seconds;
        self.records
            .retain(|(_, r)| now.saturating_sub(r.created_at) <= ttl);
    }

    /// Live records inside the criteria window, newest retained when the
    /// cap bites, returned in chronological order.
    pub fn query(&mut self, criteria: &SelectionCriteria, now: u64) -> Vec<TrainingExample> {
        self.evict(now);
        let mut hits: Vec<&TrainingExample> = self
            .records
            .iter()
            .map(|(_, r)| r)
            .filter(|r| {
                r.created_at >= criteria.min_created_at && r.created_at <= criteria.max_created_at
            })
            .collect();
        if hits.len() > criteria.max_examples {
            let drop = hits.len() - criteria.max_examples;
            hits.drain(..drop);
        }
        hits.into_iter().cloned().collect()
    }

    #[cfg(test)]
    fn timestamps(&self) -> Vec<u64> {
        self.records.iter().map(|(_, r)| r.created_at).collect()
    }
}

/// Server-specified filter applied when querying the cache.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SelectionCriteria {
    pub min_created_at: u64,
    pub max_created_at: u64,
    pub max_examples: usize,
}

impl SelectionCriteria {
    pub fn validate(&self) -> Result<()> {
        if self.min_created_at > self.max_created_at {
            return Err(FedSimError::InvalidConfig(
                "selection criteria: min_created_at > max_created_at".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    Train,
    Eval,
}

/// What a checked-in client receives: the current model, execution
/// metadata, and the cache query to run. Eval tasks carry the threshold
/// grid for the retention counters and perform no learning step.
#[derive(Debug, Clone)]
pub struct TrainingTask {
    pub round_id: u64,
    pub kind: TaskKind,
    pub model: ModelParams,
    pub train_config: LocalTrainConfig,
    pub criteria: SelectionCriteria,
    pub eval_taus: Vec<f64>,
}

/// Streaming `(sum, count)` pair for one operational metric.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MetricAccum {
    pub sum: f64,
    pub count: u64,
}

impl MetricAccum {
    pub fn of(sum: f64, count: u64) -> Self {
        Self { sum, count }
    }

    pub fn merge(&mut self, other: MetricAccum) {
        self.sum += other.sum;
        self.count += other.count;
    }

    pub fn mean(&self) -> Option<f64> {
        (self.count > 0).then(|| self.sum / self.count as f64)
    }
}

/// Anonymous upload: an optional model update plus operational metrics
/// and the population name. No device identifier, ever.
#[derive(Debug, Clone)]
pub struct ClientReport {
    pub update: Option<ModelUpdate>,
    pub metrics: BTreeMap<String, MetricAccum>,
    pub population: String,
}

pub mod metric_names {
    pub const TRAIN_LOSS: &str = "train_loss";
    pub const EVAL_LOSS: &str = "eval_loss";
    pub const EXAMPLES: &str = "examples_processed";
    pub const IMPRESSIONS: &str = "impressions";
    pub const CLICKS: &str = "clicks";

    pub fn shown_at(tau_index: usize) -> String {
        format!("shown_at_tau{tau_index}")
    }

    pub fn clicks_shown_at(tau_index: usize) -> String {
        format!("clicks_shown_at_tau{tau_index}")
    }
}

/// Runs one task against the cache. Returns `None` when no examples match
/// the criteria: the client declines instead of reporting an empty or
/// zero-weighted update.
pub fn execute_task(
    cache: &mut TrainingCache,
    task: &TrainingTask,
    population: &str,
    now: u64,
) -> Result<Option<ClientReport>> {
    task.criteria.validate()?;
    let examples = cache.query(&task.criteria, now);
    if examples.is_empty() {
        return Ok(None);
    }
    let mut metrics: BTreeMap<String, MetricAccum> = BTreeMap::new();
    let n = examples.len() as u64;
    metrics.insert(
        metric_names::EXAMPLES.to_string(),
        MetricAccum::of(n as f64, 1),
    );

    let report = match task.kind {
        TaskKind::Train => {
            let mut loss_sum = 0.0;
            for ex in &examples {
                loss_sum += log_loss(&task.model, ex)?;
            }
            metrics.insert(
                metric_names::TRAIN_LOSS.to_string(),
                MetricAccum::of(loss_sum, n),
            );
            let trained = sgd_train(&task.model, &examples, &task.train_config)?;
            let update = compute_update(&task.model, &trained, n, loss_sum)?;
            ClientReport {
                update: Some(update),
                metrics,
                population: population.to_string(),
            }
        }
        TaskKind::Eval => {
            let mut loss_sum = 0.0;
            let mut clicks = 0u64;
            let mut shown = vec![0u64; task.eval_taus.len()];
            let mut clicks_shown = vec![0u64; task.eval_taus.len()];
            for ex in &examples {
                loss_sum += log_loss(&task.model, ex)?;
                let score = predict_score(&task.model, &ex.features)?;
                let clicked = ex.label.is_click();
                clicks += clicked as u64;
                for (i, &tau) in task.eval_taus.iter().enumerate() {
                    if threshold_decision(score, tau) == TriggerDecision::Show {
                        shown[i] += 1;
                        clicks_shown[i] += clicked as u64;
                    }
                }
            }
            metrics.insert(
                metric_names::EVAL_LOSS.to_string(),
                MetricAccum::of(loss_sum, n),
            );
            metrics.insert(
                metric_names::IMPRESSIONS.to_string(),
                MetricAccum::of(n as f64, 1),
            );
            metrics.insert(
                metric_names::CLICKS.to_string(),
                MetricAccum::of(clicks as f64, 1),
            );
            for i in 0..task.eval_taus.len() {
                metrics.insert(
                    metric_names::shown_at(i),
                    MetricAccum::of(shown[i] as f64, 1),
                );
                metrics.insert(
                    metric_names::clicks_shown_at(i),
                    MetricAccum::of(clicks_shown[i] as f64, 1),
                );
            }
            ClientReport {
                update: None,
                metrics,
                population: population.to_string(),
            }
        }
    };
    Ok(Some(report))
}
