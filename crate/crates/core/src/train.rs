//! Mini-batch training with two learning-rate groups and best-dev selection.

use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::Dropout;
use crate::data::ScriptInstance;
use crate::error::{Error, Result};
use crate::eval::{evaluate_prepared, prepare_all, EvalOptions};
use crate::metrics::MetricRow;
use crate::model::{phase, Draw, ForwardOptions, Model, Prepared};
use crate::noise::{domain, NoiseSource};
use crate::optim::{AdamW, AdamWConfig};
use crate::scoring::{predict, ScoreVector};
use crate::tensor::{Family, Gradients, Graph, Group, ParamStore, Real};
use crate::vocab::Vocabulary;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub backbone_lr: f64,
    pub head_lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Steps between dev evaluations; the last step is always evaluated.
    pub eval_every: usize,
    /// Dev instances used for selection, 0 for all.
    pub dev_limit: usize,
    pub eval_samples: usize,
    pub log_every: usize,
    pub freeze_mlm_head: bool,
    /// Stop once dev accuracy reaches this value; 0 disables.
    pub target_dev_accuracy: f64,
    /// Fill `wall_clock_ms`; off keeps metric files byte-stable.
    pub record_wall_clock: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 8,
            backbone_lr: 1e-4,
            head_lr: 3e-4,
            weight_decay: 1e-8,
            seed: 13,
            eval_every: 250,
            dev_limit: 500,
            eval_samples: 1,
            log_every: 50,
            freeze_mlm_head: false,
            target_dev_accuracy: 0.0,
            record_wall_clock: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.backbone_lr > 0.0 && self.head_lr > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.batch_size == 0 || self.eval_every == 0 || self.log_every == 0 {
            return Err(Error::Config("batch_size, eval_every and log_every must be positive".into()));
        }
        Ok(())
    }

    pub fn learning_rate(&self, family: Family) -> Option<f64> {
        match family.group() {
            Group::Backbone if family == Family::MlmHead && self.freeze_mlm_head => None,
            Group::Backbone => Some(self.backbone_lr),
            Group::Head => Some(self.head_lr),
        }
    }
}

pub struct TrainOutcome<F> {
    /// Parameters at the best dev evaluation.
    pub best: ParamStore<F>,
    pub best_step: usize,
    pub best_dev_accuracy: f64,
    pub metrics: Vec<MetricRow>,
    pub steps_run: usize,
}

fn group_norms<F: Real>(store: &ParamStore<F>, grads: &Gradients<F>) -> String {
    let mut out = Vec::new();
    for group in [Group::Backbone, Group::Head] {
        let (mut p, mut g) = (0.0, 0.0);
        for (id, param) in store.iter().filter(|(_, p)| p.family.group() == group) {
            p += param.value.iter().map(|x| x.f64().powi(2)).sum::<f64>();
            if let Some(gr) = grads.get(id) {
                g += gr.iter().map(|x| x.f64().powi(2)).sum::<f64>();
            }
        }
        out.push(format!("{group:?}: |param| {:.4e} |grad| {:.4e}", p.sqrt(), g.sqrt()));
    }
    out.join("; ")
}

struct Clock {
    start: Instant,
    record: bool,
}

impl Clock {
    fn ms(&self) -> u64 {
        if self.record {
            self.start.elapsed().as_millis() as u64
        } else {
            0
        }
    }
}

pub fn train<F: Real>(
    model: &Model,
    mut store: ParamStore<F>,
    vocab: &Vocabulary,
    train_set: &[ScriptInstance],
    dev_set: &[ScriptInstance],
    config: &TrainConfig,
) -> Result<TrainOutcome<F>> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let clock = Clock { start: Instant::now(), record: config.record_wall_clock };
    let prepared = prepare_all(model, vocab, train_set)?;
    let dev_take = if config.dev_limit == 0 { dev_set.len() } else { config.dev_limit.min(dev_set.len()) };
    let dev = prepare_all(model, vocab, &dev_set[..dev_take])?;
    let flags = model.config.flags.label();
    let noise = NoiseSource::new(config.seed);
    let eval_options = EvalOptions { samples: config.eval_samples, seed: config.seed, ..EvalOptions::default() };
    let mut opt = AdamW::new(AdamWConfig { weight_decay: config.weight_decay, ..AdamWConfig::default() }, store.len());
    let mut metrics = Vec::new();
    let row = |step: usize, split: &str, accuracy: f64, mean_loss: f64, n: usize| MetricRow {
        step,
        split: split.to_string(),
        accuracy,
        mean_loss,
        n,
        ablation_flags: flags.clone(),
        seed: config.seed,
        wall_clock_ms: clock.ms(),
    };

    let mut best = store.clone();
    let mut best_step = 0;
    let mut best_acc = f64::NEG_INFINITY;
    let evaluate_dev = |store: &ParamStore<F>, step: usize, metrics: &mut Vec<MetricRow>| -> Option<f64> {
        if dev.is_empty() {
            return None;
        }
        let r = evaluate_prepared(model, store, &dev, &eval_options);
        metrics.push(row(step, "dev", r.accuracy, r.mean_loss, config.eval_samples));
        log::info!("step {step} dev accuracy {:.4} loss {:.4}", r.accuracy, r.mean_loss);
        Some(r.accuracy)
    };
    if let Some(acc) = evaluate_dev(&store, 0, &mut metrics) {
        best_acc = acc;
    }

    let (mut window_loss, mut window_correct, mut window_count) = (0.0, 0usize, 0usize);
    let mut steps_run = 0;
    for step in 1..=config.steps {
        let mut pick = noise.rng(&[domain::BATCH, step as u64]);
        let batch: Vec<&Prepared> =
            (0..config.batch_size).map(|_| &prepared[pick.random_range(0..prepared.len())]).collect();
        let draws: Vec<Draw<F>> = batch
            .iter()
            .enumerate()
            .map(|(k, p)| model.draw(&noise, &[phase::TRAIN, step as u64, k as u64], p.candidate_count()))
            .collect();
        let mut dropout =
            Dropout { rate: model.backbone.config.dropout_rate, rng: noise.rng(&[domain::DROPOUT, step as u64]) };
        let mut grads = Gradients::new(store.len());
        let (loss, scores) = {
            let mut g = Graph::new(&store);
            let fwd = model.forward(&mut g, &batch, &draws, ForwardOptions { zero_variance: false, dropout: Some(&mut dropout) });
            let (loss, scores) = model.loss(&mut g, &batch, &fwd);
            g.backward(loss, &mut grads);
            let scores: Vec<ScoreVector> =
                scores.iter().map(|&s| ScoreVector { scores: g.value(s).iter().map(|x| x.f64()).collect() }).collect();
            (g.scalar(loss).f64(), scores)
        };
        if !loss.is_finite() {
            return Err(Error::NonFinite { step, diagnostics: format!("loss {loss}; {}", group_norms(&store, &grads)) });
        }
        opt.step(&mut store, &grads, |f| config.learning_rate(f));
        if !store.all_finite() {
            return Err(Error::NonFinite { step, diagnostics: format!("non-finite parameter; {}", group_norms(&store, &grads)) });
        }
        steps_run = step;
        window_loss += loss;
        window_count += batch.len();
        window_correct += batch.iter().zip(&scores).filter(|(p, s)| predict(s) == p.gold).count();
        if step % config.log_every == 0 || step == config.steps {
            metrics.push(row(step, "train", window_correct as f64 / window_count as f64, window_loss / window_count as f64, 1));
            (window_loss, window_correct, window_count) = (0.0, 0, 0);
        }
        if step % config.eval_every == 0 || step == config.steps {
            if let Some(acc) = evaluate_dev(&store, step, &mut metrics) {
                if acc > best_acc {
                    best_acc = acc;
                    best_step = step;
                    best = store.clone();
                }
                if config.target_dev_accuracy > 0.0 && acc >= config.target_dev_accuracy {
                    break;
                }
            } else {
                best = store.clone();
                best_step = step;
            }
        }
    }
    if dev.is_empty() {
        best = store;
        best_step = steps_run;
        best_acc = f64::NAN;
    }
    Ok(TrainOutcome { best, best_step, best_dev_accuracy: best_acc, metrics, steps_run })
}
