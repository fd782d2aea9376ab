//! Minibatch training loop with periodic validation and early stopping.

use std::collections::BTreeMap;
use std::time::Instant;

use log::info;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    ce_objective, clip_global_norm, make_dropout_plan, mrt_loss, DropoutRates, EarlyStopPolicy, EvalOutcome,
    MrtConfig, OptimizerConfig, OptimizerState, TrainError,
};
use crate::decoding::greedy_decode;
use crate::metrics::{MetricRegistry, MetricSpec, SentencePair};
use crate::model::layers::{self, BoundModel, DropoutVars};
use crate::model::{FactoredSentence, InitConfig, ModelConfig, ModelParams, SourceBatch, TargetBatch};
use crate::numerics::{Graph, Tensor};
use crate::EOS;

/// A source sentence (factor tuples) and its target ids, both ending in
/// EOS.
pub type ParallelExample = (FactoredSentence, Vec<usize>);

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Objective {
    #[default]
    Ce,
    Mrt(MrtConfig),
}

/// What early stopping watches. Metric losses are `1 - score` of a greedy
/// decode of the held-out sources.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ValidationMetric {
    #[default]
    #[serde(rename = "ce")]
    CrossEntropy,
    Metric(MetricSpec),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub model: ModelConfig,
    pub init: InitConfig,
    pub optimizer: OptimizerConfig,
    pub objective: Objective,
    pub dropout: DropoutRates,
    pub batch_size: usize,
    /// Batches per length-sorted bucket.
    pub bucket_batches: usize,
    pub max_epochs: usize,
    pub max_updates: Option<usize>,
    pub valid_every: usize,
    pub patience: usize,
    pub validation: ValidationMetric,
    /// Global gradient-norm cap; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::uniform(2, 2, 8),
            init: InitConfig::default(),
            optimizer: OptimizerConfig::default(),
            objective: Objective::Ce,
            dropout: DropoutRates::default(),
            batch_size: 32,
            bucket_batches: 20,
            max_epochs: 10,
            max_updates: None,
            valid_every: 500,
            patience: 10,
            validation: ValidationMetric::CrossEntropy,
            clip_norm: Some(1.0),
            seed: 1234,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self, registry: &MetricRegistry) -> Result<(), TrainError> {
        self.model.validate()?;
        self.dropout.validate()?;
        let bad = |field: &'static str, reason: &str| {
            Err(TrainError::Config {
                field,
                reason: reason.into(),
            })
        };
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive");
        }
        if self.bucket_batches == 0 {
            return bad("bucket_batches", "must be positive");
        }
        if self.valid_every == 0 {
            return bad("valid_every", "must be positive");
        }
        if self.patience == 0 {
            return bad("patience", "must be positive");
        }
        if self.clip_norm.is_some_and(|c| !(c > 0.0)) {
            return bad("clip_norm", "must be positive");
        }
        if let Objective::Mrt(m) = &self.objective {
            if m.sample_size < 2 {
                return bad("objective.sample_size", "must be at least 2");
            }
            if !(m.alpha > 0.0) {
                return bad("objective.alpha", "must be positive");
            }
            m.metric.validate()?;
            for (name, _) in &m.metric.components {
                registry.get(name)?;
            }
        }
        if let ValidationMetric::Metric(spec) = &self.validation {
            spec.validate()?;
            for (name, _) in &spec.components {
                registry.get(name)?;
            }
        }
        Ok(())
    }
}

/// One training update.
#[derive(Clone, Debug, PartialEq)]
pub struct UpdateLog {
    pub update: usize,
    pub epoch: usize,
    pub loss: f64,
    pub words: usize,
    pub words_per_sec: f64,
}

impl UpdateLog {
    /// `update<TAB>epoch<TAB>loss<TAB>words/sec`.
    pub fn line(&self) -> String {
        format!("{}\t{}\t{:.6}\t{:.1}", self.update, self.epoch, self.loss, self.words_per_sec)
    }
}

/// Hooks called by [`train_loop`]. Every method has a no-op default.
pub trait TrainObserver {
    fn on_update(&mut self, _log: &UpdateLog) {}

    fn on_validation(&mut self, _update: usize, _loss: f64, _outcome: EvalOutcome) {}

    /// Called with the current parameters whenever validation improves.
    fn on_checkpoint(&mut self, _params: &ModelParams, _update: usize, _valid_loss: f64) -> Result<(), String> {
        Ok(())
    }
}

impl TrainObserver for () {}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    /// Parameters at the best validation point (the final ones when no
    /// validation ran).
    pub best_params: ModelParams,
    pub final_params: ModelParams,
    pub best_valid: Option<f64>,
    pub updates: usize,
    pub epochs: usize,
    pub stopped_early: bool,
    pub losses: Vec<f64>,
    pub validations: Vec<(usize, f64)>,
}

/// Shuffles, groups `bucket_batches` batches' worth of examples, sorts each
/// group by length, cuts it into batches and shuffles the batch order.
fn make_batches(n: usize, data: &[ParallelExample], cfg: &TrainingConfig, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut batches = Vec::new();
    for bucket in order.chunks(cfg.batch_size * cfg.bucket_batches) {
        let mut bucket = bucket.to_vec();
        bucket.sort_by_key(|&i| (data[i].1.len(), data[i].0.len()));
        batches.extend(bucket.chunks(cfg.batch_size).map(<[usize]>::to_vec));
    }
    batches.shuffle(rng);
    batches
}

fn ce_step(
    params: &ModelParams,
    batch: &[&ParallelExample],
    dropout: DropoutRates,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, BTreeMap<String, Tensor>), TrainError> {
    let config = params.config();
    let srcs: Vec<&FactoredSentence> = batch.iter().map(|e| &e.0).collect();
    let tgts: Vec<&Vec<usize>> = batch.iter().map(|e| &e.1).collect();
    let src = SourceBatch::new(&srcs, config)?;
    let tgt = TargetBatch::new(&tgts, config)?;
    let mut g = Graph::new();
    let m = BoundModel::bind(&mut g, params)?;
    let drop = if dropout.is_off() {
        DropoutVars::default()
    } else {
        let plan = make_dropout_plan(config, dropout, batch.len(), rng.random())?;
        DropoutVars::bind(&mut g, &plan.masks)
    };
    let (loss, _) = ce_objective(&mut g, &m, &src, &tgt, &drop)?;
    let grads = g.backward(loss)?.into_params();
    Ok((g.value(loss).item(), grads))
}

fn mrt_step(
    params: &ModelParams,
    batch: &[&ParallelExample],
    mrt: &MrtConfig,
    loss_fn: &dyn Fn(&[usize], &[usize]) -> Result<f64, crate::metrics::MetricError>,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, BTreeMap<String, Tensor>), TrainError> {
    let mut risk = 0.0;
    let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
    for (src, tgt) in batch.iter().map(|e| (&e.0, &e.1)) {
        let out = mrt_loss(params, src, tgt, mrt, loss_fn, rng)?;
        risk += out.risk;
        for (k, g) in out.gradients {
            match grads.get_mut(&k) {
                Some(acc) => acc.axpy(1.0, &g),
                None => {
                    grads.insert(k, g);
                }
            }
        }
    }
    let b = batch.len() as f64;
    grads.values_mut().for_each(|g| g.data_mut().iter_mut().for_each(|v| *v /= b));
    Ok((risk / b, grads))
}

/// Mean per-token cross-entropy over a data set, batched, without dropout.
pub fn validation_cross_entropy(
    params: &ModelParams,
    data: &[ParallelExample],
    batch_size: usize,
) -> Result<f64, TrainError> {
    let mut nll = 0.0;
    let mut tokens = 0;
    for chunk in data.chunks(batch_size.max(1)) {
        let srcs: Vec<&FactoredSentence> = chunk.iter().map(|e| &e.0).collect();
        let tgts: Vec<&Vec<usize>> = chunk.iter().map(|e| &e.1).collect();
        let src = SourceBatch::new(&srcs, params.config())?;
        let tgt = TargetBatch::new(&tgts, params.config())?;
        let mut g = Graph::new();
        let m = BoundModel::bind(&mut g, params)?;
        let fwd = layers::forward_logprobs(&mut g, &m, &src, &tgt, &DropoutVars::default())?;
        nll -= g.value(fwd.total).item();
        tokens += fwd.tokens;
    }
    if tokens == 0 {
        return Err(TrainError::Empty("validation set"));
    }
    Ok(nll / tokens as f64)
}

fn strip_eos(s: &[usize]) -> &[usize] {
    match s.last() {
        Some(&EOS) => &s[..s.len() - 1],
        _ => s,
    }
}

/// Mean metric loss of greedy translations of the held-out sources.
pub fn validation_metric_loss(
    params: &ModelParams,
    data: &[ParallelExample],
    spec: &MetricSpec,
    registry: &MetricRegistry,
    batch_size: usize,
) -> Result<f64, TrainError> {
    if data.is_empty() {
        return Err(TrainError::Empty("validation set"));
    }
    let mut total = 0.0;
    for (c, chunk) in data.chunks(batch_size.max(1)).enumerate() {
        let srcs: Vec<&FactoredSentence> = chunk.iter().map(|e| &e.0).collect();
        let max_len = 2 * srcs.iter().map(|s| s.len()).max().unwrap_or(1) + 10;
        let hyps = greedy_decode(std::slice::from_ref(params), &srcs, max_len)?;
        for (i, (h, e)) in hyps.iter().zip(chunk).enumerate() {
            let pair = SentencePair {
                hyp: h,
                reference: strip_eos(&e.1),
                sentence: Some(c * batch_size.max(1) + i),
            };
            total += spec.loss(registry, &pair)?;
        }
    }
    Ok(total / data.len() as f64)
}

fn validate(
    params: &ModelParams,
    valid: &[ParallelExample],
    cfg: &TrainingConfig,
    registry: &MetricRegistry,
) -> Result<f64, TrainError> {
    match &cfg.validation {
        ValidationMetric::CrossEntropy => validation_cross_entropy(params, valid, cfg.batch_size),
        ValidationMetric::Metric(spec) => validation_metric_loss(params, valid, spec, registry, cfg.batch_size),
    }
}

/// Trains from a fresh initialisation drawn from `config.seed`. Given the
/// same data and config the loss trajectory and parameters are bitwise
/// reproducible.
pub fn train_loop(
    train: &[ParallelExample],
    valid: &[ParallelExample],
    config: &TrainingConfig,
    registry: &MetricRegistry,
    observer: &mut dyn TrainObserver,
) -> Result<TrainSummary, TrainError> {
    if train.is_empty() {
        return Err(TrainError::Empty("training corpus"));
    }
    config.validate(registry)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = ModelParams::init(config.model.clone(), &config.init, &mut rng)?;
    let mut state = OptimizerState::new();
    let mut policy = EarlyStopPolicy::new(config.patience);


    let mut summary = TrainSummary {
        best_params: params.clone(),
        final_params: params.clone(),
        best_valid: None,
        updates: 0,
        epochs: 0,
        stopped_early: false,
        losses: Vec::new(),
        validations: Vec::new(),
    };
    let mut validated_last = false;

    let mut run_validation =
        |params: &ModelParams, update: usize, summary: &mut TrainSummary, observer: &mut dyn TrainObserver| {
            let loss = validate(params, valid, config, registry)?;
            let outcome = policy.observe(loss);
            summary.validations.push((update, loss));
            info!("validation\t{update}\t{loss:.6}");
            if outcome.improved {
                summary.best_params = params.clone();
                summary.best_valid = Some(loss);
                observer
                    .on_checkpoint(params, update, loss)
                    .map_err(TrainError::Observer)?;
            }
            observer.on_validation(update, loss, outcome);
            Ok::<bool, TrainError>(outcome.stop)
        };

    'epochs: for epoch in 1..=config.max_epochs {
        summary.epochs = epoch;
        for batch in make_batches(train.len(), train, config, &mut rng) {
            let examples: Vec<&ParallelExample> = batch.iter().map(|&i| &train[i]).collect();
            let started = Instant::now();
            let (loss, mut grads) = match &config.objective {
                Objective::Ce => ce_step(&params, &examples, config.dropout, &mut rng)?,
                Objective::Mrt(mrt) => {
                    let loss_fn = |h: &[usize], r: &[usize]| mrt.metric.loss(registry, &SentencePair::new(h, r));
                    mrt_step(&params, &examples, mrt, &loss_fn, &mut rng)?
                }
            };
            if let Some(c) = config.clip_norm {
                clip_global_norm(&mut grads, c);
            }
            config.optimizer.step(&mut params, &grads, &mut state)?;
            summary.updates += 1;
            summary.losses.push(loss);
            validated_last = false;

            let words: usize = examples.iter().map(|e| e.1.len()).sum();
            let log = UpdateLog {
                update: summary.updates,
                epoch,
                loss,
                words,
                words_per_sec: words as f64 / started.elapsed().as_secs_f64().max(1e-9),
            };
            info!("{}", log.line());
            observer.on_update(&log);

            if !valid.is_empty() && summary.updates.is_multiple_of(config.valid_every) {
                validated_last = true;
                if run_validation(&params, summary.updates, &mut summary, observer)? {
                    summary.stopped_early = true;
                    break 'epochs;
                }
            }
            if config.max_updates.is_some_and(|m| summary.updates >= m) {
                break 'epochs;
            }
        }
    }
    if !valid.is_empty() && !validated_last && run_validation(&params, summary.updates, &mut summary, observer)? {
        summary.stopped_early = true;
    }
    if summary.best_valid.is_none() {
        summary.best_params = params.clone();
    }
    summary.final_params = params;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus(n: usize, seed: u64) -> Vec<ParallelExample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let len = rng.random_range(1..=4);
                let toks: Vec<usize> = (0..len).map(|_| rng.random_range(2..6)).collect();
                let mut src: FactoredSentence = toks.iter().map(|&t| vec![t]).collect();
                src.push(vec![EOS]);
                let mut tgt = toks.clone();
                tgt.push(EOS);
                (src, tgt)
            })
            .collect()
    }

    fn config() -> TrainingConfig {
        TrainingConfig {
            model: ModelConfig::uniform(6, 6, 8),
            batch_size: 8,
            max_epochs: 3,
            valid_every: 4,
            optimizer: OptimizerConfig::Adam {
                lr: 0.01,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
            ..Default::default()
        }
    }

    #[test]
    fn empty_corpus_is_an_error() {
        let r = train_loop(&[], &[], &config(), &MetricRegistry::default(), &mut ());
        assert!(matches!(r, Err(TrainError::Empty(_))));
    }

    #[test]
    fn same_seed_same_trajectory() {
        let data = corpus(40, 1);
        let valid = corpus(8, 2);
        let reg = MetricRegistry::default();
        let a = train_loop(&data, &valid, &config(), &reg, &mut ()).unwrap();
        let b = train_loop(&data, &valid, &config(), &reg, &mut ()).unwrap();
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.losses), bits(&b.losses));
        assert_eq!(a.final_params, b.final_params);
        assert_eq!(a.updates, 15);
        assert!(a.losses.last().unwrap() < &a.losses[0]);
    }

    #[test]
    fn dropout_and_mrt_objectives_run() {
        let data = corpus(16, 3);
        let valid = corpus(4, 4);
        let reg = MetricRegistry::default();
        let mut cfg = config();
        cfg.max_updates = Some(2);
        cfg.dropout = DropoutRates {
            embedding: 0.1,
            hidden: 0.2,
            context: 0.1,
        };
        let s = train_loop(&data, &valid, &cfg, &reg, &mut ()).unwrap();
        assert_eq!(s.updates, 2);

        cfg.dropout = DropoutRates::default();
        cfg.objective = Objective::Mrt(MrtConfig {
            sample_size: 4,
            ..Default::default()
        });
        cfg.validation = ValidationMetric::Metric(MetricSpec::default());
        let s = train_loop(&data, &valid, &cfg, &reg, &mut ()).unwrap();
        assert_eq!(s.updates, 2);
        assert!(s.losses.iter().all(|l| (0.0..=1.0).contains(l)));
        assert!(s.best_valid.is_some());
    }

    #[test]
    fn observer_sees_updates_and_checkpoints() {
        #[derive(Default)]
        struct Rec {
            updates: usize,
            checkpoints: Vec<usize>,
        }
        impl TrainObserver for Rec {
            fn on_update(&mut self, log: &UpdateLog) {
                assert_eq!(log.line().split('\t').count(), 4);
                self.updates += 1;
            }
            fn on_checkpoint(&mut self, _: &ModelParams, update: usize, _: f64) -> Result<(), String> {
                self.checkpoints.push(update);
                Ok(())
            }
        }
        let mut rec = Rec::default();
        let s = train_loop(&corpus(40, 5), &corpus(8, 6), &config(), &MetricRegistry::default(), &mut rec).unwrap();
        assert_eq!(rec.updates, s.updates);
        assert!(!rec.checkpoints.is_empty());
        assert_eq!(rec.checkpoints[0], 4);
    }

    #[test]
    fn invalid_fields_are_named() {
        let mut cfg = config();
        cfg.batch_size = 0;
        match cfg.validate(&MetricRegistry::default()) {
            Err(TrainError::Config { field, .. }) => assert_eq!(field, "batch_size"),
            other => panic!("{other:?}"),
        }
        let mut cfg = config();
        cfg.validation = ValidationMetric::Metric(MetricSpec::single("nope"));
        assert!(cfg.validate(&MetricRegistry::default()).is_err());
    }
}
