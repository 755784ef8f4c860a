//! Logistic-regression triggering model: scoring, loss, local SGD, and
//! threshold decisions.
//!
//! All operations are pure; training returns new parameters and never
//! mutates its inputs. Given the same shuffle seed, `sgd_train` is
//! bit-deterministic.

use crate::error::{FedSimError, Result};
use crate::features::FeatureVector;
use crate::rng;
use rand_chacha::ChaCha8Rng;
use rand_core::SeedableRng;

/// Probabilities are clipped into [EPS, 1 - EPS] before taking logs.
pub const PROB_CLIP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Label {
    Clicked,
    Ignored,
}

impl Label {
    pub fn value(self) -> f64 {
        match self {
            Label::Clicked => 1.0,
            Label::Ignored => 0.0,
        }
    }

    pub fn is_click(self) -> bool {
        matches!(self, Label::Clicked)
    }
}

/// One `(features, label)` tuple as stored in a device training cache.
#[derive(Debug, Clone)]
pub struct TrainingExample {
    pub features: FeatureVector,
    pub label: Label,
    /// Simulation timestamp, seconds.
    pub created_at: u64,
}

/// Weights and bias of the triggering model, versioned by committed round.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    weights: Vec<f64>,
    bias: f64,
    round_version: u32,
    schema_id: u64,
}

impl ModelParams {
    pub fn zeros(dimension: usize, schema_id: u64) -> Self {
        Self {
            weights: vec![0.0; dimension],
            bias: 0.0,
            round_version: 0,
            schema_id,
        }
    }

    pub fn from_parts(weights: Vec<f64>, bias: f64, round_version: u32, schema_id: u64) -> Self {
        Self {
            weights,
            bias,
            round_version,
            schema_id,
        }
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn bias(&self) -> f64 {
        self.bias
    }

    pub fn set_bias(&mut self, b: f64) {
        self.bias = b;
    }

    pub fn dimension(&self) -> usize {
        self.weights.len()
    }

    pub fn round_version(&self) -> u32 {
        self.round_version
    }

    pub fn bump_version(&mut self) {
        self.round_version += 1;
    }

    pub fn schema_id(&self) -> u64 {
        self.schema_id
    }

    pub fn is_finite(&self) -> bool {
        self.bias.is_finite() && self.weights.iter().all(|w| w.is_finite())
    }
}

/// How a client runs its local pass.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalTrainConfig {
    pub epochs: u32,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub shuffle_seed: u64,
    /// Optional L2 coefficient; 0 disables regularization.
    pub l2: f64,
}

impl Default for LocalTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1,
            learning_rate: 0.2,
            batch_size: 10,
            shuffle_seed: 0,
            l2: 0.0,
        }
    }
}

/// A client's parameter delta plus the example count and loss statistics
/// that rode along with it.
#[derive(Debug, Clone)]
pub struct ModelUpdate {
    pub delta_weights: Vec<f64>,
    pub delta_bias: f64,
    pub example_count: u64,
    /// Sum of per-example log loss at the initial parameters.
    pub loss_sum: f64,
    pub round_version: u32,
    pub schema_id: u64,
}

fn check_schema(params: &ModelParams, x: &FeatureVector) -> Result<()> {
    if params.schema_id != x.schema_id() {
        return Err(FedSimError::SchemaMismatch(format!(
            "params schema {:#x} vs vector schema {:#x}",
            params.schema_id,
            x.schema_id()
        )));
    }
    Ok(())
}

/// Logit score `w . x + b`.
pub fn predict_score(params: &ModelParams, x: &FeatureVector) -> Result<f64> {
    check_schema(params, x)?;
    let mut s = params.bias;
    for (id, v) in x.iter() {
        let w = params.weights.get(id).ok_or_else(|| {
            FedSimError::SchemaMismatch(format!(
                "feature id {id} out of range for dimension {}",
                params.weights.len()
            ))
        })?;
        s += w * v;
    }
    Ok(s)
}

/// Numerically stable logistic sigmoid.
pub fn predict_prob(score: f64) -> f64 {
    if score >= 0.0 {
        1.0 / (1.0 + (-score).exp())
    } else {
        let e = score.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy of one example. The probability entering each
/// log is clipped at `PROB_CLIP` from below, which caps the loss without
/// disturbing the well-predicted side.
pub fn log_loss(params: &ModelParams, ex: &TrainingExample) -> Result<f64> {
    let p = predict_prob(predict_score(params, &ex.features)?);
    Ok(match ex.label {
        Label::Clicked => -p.max(PROB_CLIP).ln(),
        Label::Ignored => -(1.0 - p).max(PROB_CLIP).ln(),
    })
}

/// Accumulates `(p - y) * x` (plus L2) into dense gradient buffers.
fn accumulate_gradient(
    params: &ModelParams,
    ex: &TrainingExample,
    grad_w: &mut [f64],
    grad_b: &mut f64,
) -> Result<()> {
    let p = predict_prob(predict_score(params, &ex.features)?);
    let err = p - ex.label.value();
    for (id, v) in ex.features.iter() {
        grad_w[id] += err * v;
    }
    *grad_b += err;
    Ok(())
}

/// Mean gradient of the log loss over `examples` at `params`; the oracle
/// half of the gradient checks and the building block for full-batch
/// steps.
pub fn batch_gradient(
    params: &ModelParams,
    examples: &[&TrainingExample],
) -> Result<(Vec<f64>, f64)> {
    let mut grad_w = vec![0.0; params.dimension()];
    let mut grad_b = 0.0;
    for ex in examples {
        accumulate_gradient(params, ex, &mut grad_w, &mut grad_b)?;
    }
    let n = examples.len() as f64;
    for g in grad_w.iter_mut() {
        *g /= n;
    }
    Ok((grad_w, grad_b / n))
}

/// Minibatch SGD over the examples: `epochs` passes, each over a
/// Fisher-Yates shuffle drawn from `shuffle_seed`, stepping by the mean
/// gradient of each batch. Returns new parameters; the version is
/// unchanged (training does not commit rounds).
pub fn sgd_train(
    params: &ModelParams,
    examples: &[TrainingExample],
    config: &LocalTrainConfig,
) -> Result<ModelParams> {
    if examples.is_empty() {
        return Err(FedSimError::EmptyTrainingSet);
    }
    if config.learning_rate < 0.0 || !config.learning_rate.is_finite() {
        return Err(FedSimError::InvalidConfig(
            "learning_rate must be finite and >= 0".into(),
        ));
    }
    if config.epochs == 0 {
        return Err(FedSimError::InvalidConfig("epochs must be >= 1".into()));
    }
    if config.batch_size == 0 {
        return Err(FedSimError::InvalidConfig("batch_size must be >= 1".into()));
    }
    for ex in examples {
        check_schema(params, &ex.features)?;
    }

    let mut out = params.clone();
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.shuffle_seed);
    let mut grad_w = vec![0.0; out.dimension()];
    let lr = config.learning_rate;

    for _ in 0..config.epochs {
        rng::shuffle(&mut shuffle_rng, &mut order);
        for batch in order.chunks(config.batch_size) {
            grad_w.iter_mut().for_each(|g| *g = 0.0);
            let mut grad_b = 0.0;
            for &i in batch {
                accumulate_gradient(&out, &examples[i], &mut grad_w, &mut grad_b)?;
            }
            let scale = lr / batch.len() as f64;
            if config.l2 > 0.0 {
                for (w, g) in out.weights.iter_mut().zip(grad_w.iter()) {
                    *w -= scale * g + lr * config.l2 * *w;
                }
            } else {
                for (w, g) in out.weights.iter_mut().zip(grad_w.iter()) {
                    *w -= scale * g;
                }
            }
            out.bias -= scale * grad_b;
        }
    }
    Ok(out)
}

/// Component-wise difference `trained - initial`, packaged with the
/// example count and loss statistics for upload.
pub fn compute_update(
    initial: &ModelParams,
    trained: &ModelParams,
    example_count: u64,
    loss_sum: f64,
) -> Result<ModelUpdate> {
    if initial.schema_id != trained.schema_id || initial.dimension() != trained.dimension() {
        return Err(FedSimError::SchemaMismatch(
            "update endpoints use different schemas".into(),
        ));
    }
    if initial.round_version != trained.round_version {
        return Err(FedSimError::StaleModel {
            update: trained.round_version,
            expected: initial.round_version,
        });
    }
    let delta_weights = trained
        .weights
        .iter()
        .zip(initial.weights.iter())
        .map(|(t, i)| t - i)
        .collect();
    Ok(ModelUpdate {
        delta_weights,
        delta_bias: trained.bias - initial.bias,
        example_count,
        loss_sum,
        round_version: initial.round_version,
        schema_id: initial.schema_id,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TriggerDecision {
    Show,
    Hide,
}

/// Show iff `score >= tau`; the tie goes to showing.
pub fn threshold_decision(score: f64, tau: f64) -> TriggerDecision {
    if score >= tau {
        TriggerDecision::Show
    } else {
        TriggerDecision::Hide
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{default_schema, featurize, FeatureSchema, InteractionContext};

    fn tiny_schema() -> FeatureSchema {
        default_schema(&["a", "b"])
    }

    fn example(schema: &FeatureSchema, label: Label) -> TrainingExample {
        let ctx = InteractionContext {
            past_clicks: 3,
            past_impressions: 9,
            category_clicks: vec![1, 0],
            category_impressions: vec![4, 2],
            baseline_score: 0.55,
            hour: 20,
            day_of_week: 4,
        };
        TrainingExample {
            features: featurize(schema, &ctx).unwrap().vector,
            label,
            created_at: 0,
        }
    }

    #[test]
    fn score_is_bias_for_zero_weights() {
        let s = tiny_schema();
        let mut p = ModelParams::zeros(s.total_dimension(), s.schema_id());
        p.set_bias(0.7);
        let ex = example(&s, Label::Clicked);
        assert_eq!(predict_score(&p, &ex.features).unwrap(), 0.7);
    }

    #[test]
    fn score_is_plain_dot_product() {
        let s = tiny_schema();
        let mut p = ModelParams::zeros(s.total_dimension(), s.schema_id());
        // weight 2.0 on the hour indicator that is active (value 1.0) plus
        // weight on past_clicks (value ln 4)
        let (hi, _) = s.group_named("hour_of_day").unwrap();
        p.weights_mut()[s.group_offset(hi) + 20] = 2.0;
        p.set_bias(-1.0);
        let ex = example(&s, Label::Clicked);
        assert!((predict_score(&p, &ex.features).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn sigmoid_midpoint_symmetry_and_ln3() {
        assert_eq!(predict_prob(0.0), 0.5);
        for s in [-7.3, -1.0, 0.2, 3.5, 18.0] {
            assert!((predict_prob(s) + predict_prob(-s) - 1.0).abs() < 1e-15);
        }
        assert!((predict_prob(3.0f64.ln()) - 0.75).abs() < 1e-15);
    }

    #[test]
    fn sigmoid_is_strictly_increasing() {
        let mut prev = predict_prob(-30.0);
        let mut s = -29.5;
        while s <= 30.0 {
            let p = predict_prob(s);
            assert!(p > prev, "not increasing at {s}");
            prev = p;
            s += 0.5;
        }
    }

    #[test]
    fn loss_at_even_odds_is_ln2() {
        let s = tiny_schema();
        let p = ModelParams::zeros(s.total_dimension(), s.schema_id());
        let ex = example(&s, Label::Clicked);
        assert!((log_loss(&p, &ex).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn saturated_correct_prediction_has_negligible_loss() {
        let s = tiny_schema();
        let mut p = ModelParams::zeros(s.total_dimension(), s.schema_id());
        p.set_bias(-20.0);
        let ex = example(&s, Label::Ignored);
        assert!(log_loss(&p, &ex).unwrap() < 1e-8);
    }

    #[test]
    fn zero_learning_rate_is_identity() {
        let s = tiny_schema();
        let p = ModelParams::zeros(s.total_dimension(), s.schema_id());
        let exs = vec![example(&s, Label::Clicked), example(&s, Label::Ignored)];
        let cfg = LocalTrainConfig {
            learning_rate: 0.0,
            ..Default::default()
        };
        let trained = sgd_train(&p, &exs, &cfg).unwrap();
        assert_eq!(trained, p);
    }

    #[test]
    fn single_example_hand_step() {
        // One feature with value 1.0, label clicked, zero init, lr 0.1:
        // p = 0.5, gradient (p - 1) * x = -0.5, so w = b = 0.05.
        let s = FeatureSchema::new(vec![crate::features::FeatureGroup {
            name: "hour_of_day".into(),
            kind: crate::features::GroupKind::OneHot { cardinality: 24 },
        }])
        .unwrap();
        let mut x = FeatureVector::new(s.schema_id());
        x.set(0, 1.0);
        let ex = TrainingExample {
            features: x,
            label: Label::Clicked,
            created_at: 0,
        };
        let p = ModelParams::zeros(s.total_dimension(), s.schema_id());
        let cfg = LocalTrainConfig {
            epochs: 1,
            learning_rate: 0.1,
            batch_size: 1,
            shuffle_seed: 0,
            l2: 0.0,
        };
        let trained = sgd_train(&p, &[ex], &cfg).unwrap();
        assert!((trained.weights()[0] - 0.05).abs() < 1e-15);
        assert!((trained.bias() - 0.05).abs() < 1e-15);
    }

    #[test]
    fn sgd_is_bit_deterministic_across_runs() {
        let s = tiny_schema();
        let p = ModelParams::zeros(s.total_dimension(), s.schema_id());
        let exs: Vec<_> = (0..17)
            .map(|i| {
                example(
                    &s,
                    if i % 3 == 0 {
                        Label::Clicked
                    } else {
                        Label::Ignored
                    },
                )
            })
            .collect();
        let cfg = LocalTrainConfig {
            epochs: 2,
            learning_rate: 0.15,
            batch_size: 4,
            shuffle_seed: 99,
            l2: 0.0,
        };
        let a = sgd_train(&p, &exs, &cfg).unwrap();
        let b = sgd_train(&p, &exs, &cfg).unwrap();
        assert_eq!(a.weights(), b.weights());
        assert_eq!(a.bias().to_bits(), b.bias().to_bits());
    }

    #[test]
    fn empty_example_set_is_an_error() {
        let s = tiny_schema();
        let p = ModelParams::zeros(s.total_dimension(), s.schema_id());
        assert!(matches!(
            sgd_train(&p, &[], &LocalTrainConfig::default()),
            Err(FedSimError::EmptyTrainingSet)
        ));
    }

    #[test]
    fn update_roundtrip_reconstructs_trained_params() {
        let s = tiny_schema();
        let initial = ModelParams::zeros(s.total_dimension(), s.schema_id());
        let exs = vec![example(&s, Label::Clicked), example(&s, Label::Ignored)];
        let trained = sgd_train(&initial, &exs, &LocalTrainConfig::default()).unwrap();
        let up = compute_update(&initial, &trained, exs.len() as u64, 0.0).unwrap();
        assert_eq!(up.example_count, 2);
        let rebuilt: Vec<f64> = initial
            .weights()
            .iter()
            .zip(up.delta_weights.iter())
            .map(|(i, d)| i + d)
            .collect();
        assert_eq!(rebuilt, trained.weights());
        assert_eq!(initial.bias() + up.delta_bias, trained.bias());
    }

    #[test]
    fn identical_params_yield_zero_delta() {
        let s = tiny_schema();
        let p = ModelParams::zeros(s.total_dimension(), s.schema_id());
        let up = compute_update(&p, &p, 5, 1.0).unwrap();
        assert!(up.delta_weights.iter().all(|d| *d == 0.0));
        assert_eq!(up.delta_bias, 0.0);
    }

    #[test]
    fn version_mismatch_is_stale() {
        let s = tiny_schema();
        let a = ModelParams::zeros(s.total_dimension(), s.schema_id());
        let mut b = a.clone();
        b.bump_version();
        assert!(matches!(
            compute_update(&a, &b, 1, 0.0),
            Err(FedSimError::StaleModel { .. })
        ));
    }

    #[test]
    fn threshold_tie_shows_and_is_monotone() {
        assert_eq!(threshold_decision(0.3, 0.3), TriggerDecision::Show);
        assert_eq!(threshold_decision(0.3, -1e12), TriggerDecision::Show);
        assert_eq!(threshold_decision(0.3, 0.300001), TriggerDecision::Hide);

        let scores = [-2.0, -0.5, 0.0, 0.4, 1.9];
        let mut prev_shows = usize::MAX;
        let mut tau = -3.0;
        while tau <= 3.0 {
            let shows = scores
                .iter()
                .filter(|s| threshold_decision(**s, tau) == TriggerDecision::Show)
                .count();
            assert!(shows <= prev_shows);
            prev_shows = shows;
            tau += 0.05;
        }
    }

    #[test]
    fn full_batch_single_epoch_equals_one_gradient_step() {
        let s = tiny_schema();
        let p = ModelParams::zeros(s.total_dimension(), s.schema_id());
        let exs: Vec<_> = (0..13)
            .map(|i| {
                example(
                    &s,
                    if i % 2 == 0 {
                        Label::Clicked
                    } else {
                        Label::Ignored
                    },
                )
            })
            .collect();
        let cfg = LocalTrainConfig {
            epochs: 1,
            learning_rate: 0.3,
            batch_size: exs.len(),
            shuffle_seed: 5,
            l2: 0.0,
        };
        let trained = sgd_train(&p, &exs, &cfg).unwrap();

        let refs: Vec<&TrainingExample> = exs.iter().collect();
        let (gw, gb) = batch_gradient(&p, &refs).unwrap();
        for (w, g) in trained.weights().iter().zip(gw.iter()) {
            assert!((w - (-0.3 * g)).abs() < 1e-15);
        }
        assert!((trained.bias() - (-0.3 * gb)).abs() < 1e-15);
    }

    #[test]
    fn gradient_matches_central_finite_differences() {
        use crate::rng::SeedSpace;
        use rand_core::RngCore;
        let s = tiny_schema();
        let space = SeedSpace::new(0xace);
        let mut failures = 0;
        for trial in 0..100u64 {
            let mut rng = space.rng("grad", &[trial]);
            let mut params = ModelParams::zeros(s.total_dimension(), s.schema_id());
            // Bounded draws keep scores well inside the unclipped region,
            // where the loss is smooth.
            for w in params.weights_mut() {
                *w = rng::uniform(&mut rng, -0.6, 0.6);
            }
            params.set_bias(rng::uniform(&mut rng, -1.0, 1.0));
            let ctx = InteractionContext {
                past_clicks: rng.next_u64() % 30,
                past_impressions: rng.next_u64() % 30,
                category_clicks: vec![rng.next_u64() % 10, rng.next_u64() % 10],
                category_impressions: vec![rng.next_u64() % 15, rng.next_u64() % 15],
                baseline_score: rng::next_unit(&mut rng),
                hour: (rng.next_u64() % 24) as u8,
                day_of_week: (rng.next_u64() % 7) as u8,
            };
            let label = if rng.next_u64().is_multiple_of(2) {
                Label::Clicked
            } else {
                Label::Ignored
            };
            let ex = TrainingExample {
                features: featurize(&s, &ctx).unwrap().vector,
                label,
                created_at: 0,
            };

            let (gw, gb) = batch_gradient(&params, &[&ex]).unwrap();
            let h = 1e-5;
            let mut check = |analytic: f64, id: Option<usize>| {
                let mut plus = params.clone();
                let mut minus = params.clone();
                match id {
                    Some(i) => {
                        plus.weights_mut()[i] += h;
                        minus.weights_mut()[i] -= h;
                    }
                    None => {
                        plus.set_bias(plus.bias() + h);
                        minus.set_bias(minus.bias() - h);
                    }
                }
                let numeric =
                    (log_loss(&plus, &ex).unwrap() - log_loss(&minus, &ex).unwrap()) / (2.0 * h);
                // Relative check with a floor: below the floor the central
                // difference itself carries more rounding noise than the
                // tolerance admits.
                let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3);
                if rel >= 1e-5 {
                    failures += 1;
                }
            };
            for (id, _) in ex.features.iter() {
                check(gw[id], Some(id));
            }
            check(gb, None);
        }
        assert_eq!(failures, 0);
    }

    #[test]
    fn loss_is_convex_along_segments() {
        // Sampled in a bounded-parameter region where probability clipping
        // is inactive, so the exact convexity inequality applies.
        use crate::rng::SeedSpace;
        use rand_core::RngCore;
        let s = tiny_schema();
        let space = SeedSpace::new(0xc0);
        let exs: Vec<_> = (0..20)
            .map(|i| {
                example(
                    &s,
                    if i % 4 == 0 {
                        Label::Clicked
                    } else {
                        Label::Ignored
                    },
                )
            })
            .collect();
        let dataset_loss = |p: &ModelParams| -> f64 {
            exs.iter().map(|e| log_loss(p, e).unwrap()).sum::<f64>() / exs.len() as f64
        };
        for trial in 0..50u64 {
            let mut rng = space.rng("convex", &[trial]);
            let mut draw = |bound: f64| {
                let mut p = ModelParams::zeros(s.total_dimension(), s.schema_id());
                for w in p.weights_mut() {
                    *w = rng::uniform(&mut rng, -bound, bound);
                }
                p.set_bias(rng::uniform(&mut rng, -bound, bound));
                p
            };
            let a = draw(1.0);
            let b = draw(1.0);
            let lambda = rng::next_unit(&mut rng);
            let _ = rng.next_u64();
            let mut mid = ModelParams::zeros(s.total_dimension(), s.schema_id());
            for (i, w) in mid.weights_mut().iter_mut().enumerate() {
                *w = lambda * a.weights()[i] + (1.0 - lambda) * b.weights()[i];
            }
            mid.set_bias(lambda * a.bias() + (1.0 - lambda) * b.bias());
            assert!(
                dataset_loss(&mid)
                    <= lambda * dataset_loss(&a) + (1.0 - lambda) * dataset_loss(&b) + 1e-9
            );
        }
    }
}
