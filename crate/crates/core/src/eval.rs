//! Accuracy and per-instance scores over a dataset.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::ScriptInstance;
use crate::error::Result;
use crate::model::{phase, Draw, Model, Prepared};
use crate::noise::NoiseSource;
use crate::scoring::predict;
use crate::tensor::{ParamStore, Real};
use crate::vocab::Vocabulary;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    /// Forward passes per instance; 0 scores with every Gaussian's mean.
    pub samples: usize,
    /// Force every variance down to the sampling floor.
    pub zero_variance: bool,
    /// Use all-zero draws instead of sampled ones.
    pub zero_noise: bool,
    pub seed: u64,
    /// Distinguishes repeated evaluations under one seed.
    pub repeat: u64,
    pub chunk_size: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { samples: 1, zero_variance: false, zero_noise: false, seed: 29, repeat: 0, chunk_size: 16 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct InstanceRecord {
    pub index: usize,
    pub gold: usize,
    pub prediction: usize,
    pub loss: f64,
    pub scores: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub mean_loss: f64,
    pub count: usize,
    pub records: Vec<InstanceRecord>,
}

pub fn prepare_all(model: &Model, vocab: &Vocabulary, dataset: &[ScriptInstance]) -> Result<Vec<Prepared>> {
    dataset.iter().map(|i| model.prepare(vocab, i)).collect()
}

pub fn evaluate<F: Real>(
    model: &Model,
    store: &ParamStore<F>,
    vocab: &Vocabulary,
    dataset: &[ScriptInstance],
    options: &EvalOptions,
) -> Result<EvalReport> {
    let prepared = prepare_all(model, vocab, dataset)?;
    Ok(evaluate_prepared(model, store, &prepared, options))
}

pub fn evaluate_prepared<F: Real>(
    model: &Model,
    store: &ParamStore<F>,
    prepared: &[Prepared],
    options: &EvalOptions,
) -> EvalReport {
    let noise = NoiseSource::new(options.seed);
    let chunk = options.chunk_size.max(1);
    let records: Vec<InstanceRecord> = prepared
        .par_chunks(chunk)
        .enumerate()
        .flat_map_iter(|(c, part)| {
            let base = c * chunk;
            let refs: Vec<&Prepared> = part.iter().collect();
            let draw = |i: usize, s: usize| -> Draw<F> {
                let m = part[i].candidate_count();
                if options.zero_noise {
                    model.zero_draw(m)
                } else {
                    model.draw(&noise, &[phase::EVAL, options.repeat, (base + i) as u64, s as u64], m)
                }
            };
            let out = model.pooled_scores(store, &refs, draw, options.samples, options.zero_variance);
            out.into_iter()
                .enumerate()
                .map(|(i, o)| InstanceRecord {
                    index: base + i,
                    gold: part[i].gold,
                    prediction: predict(&o.scores),
                    loss: o.loss,
                    scores: o.scores.scores,
                })
                .collect::<Vec<_>>()
        })
        .collect();
    let count = records.len();
    let correct = records.iter().filter(|r| r.prediction == r.gold).count();
    let total_loss: f64 = records.iter().map(|r| r.loss).sum();
    EvalReport {
        accuracy: if count == 0 { 0.0 } else { correct as f64 / count as f64 },
        mean_loss: if count == 0 { 0.0 } else { total_loss / count as f64 },
        count,
        records,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::fixture;
    use crate::model::AblationFlags;

    #[test]
    fn mean_only_equals_single_zero_draw() {
        let f = fixture(AblationFlags::default(), 11);
        let a = evaluate(&f.model, &f.store, &f.vocab, &f.corpus, &EvalOptions { samples: 0, ..Default::default() }).unwrap();
        let b = evaluate(&f.model, &f.store, &f.vocab, &f.corpus, &EvalOptions { samples: 1, zero_noise: true, ..Default::default() })
            .unwrap();
        assert_eq!(a, b);
        assert_eq!(a.count, f.corpus.len());
    }

    #[test]
    fn chunking_and_repeats() {
        let f = fixture(AblationFlags::default(), 12);
        let base = EvalOptions { samples: 3, ..Default::default() };
        let a = evaluate(&f.model, &f.store, &f.vocab, &f.corpus, &base).unwrap();
        let b = evaluate(&f.model, &f.store, &f.vocab, &f.corpus, &EvalOptions { chunk_size: 1, ..base.clone() }).unwrap();
        for (x, y) in a.records.iter().zip(&b.records) {
            for (u, v) in x.scores.iter().zip(&y.scores) {
                assert!((u - v).abs() < 1e-12);
            }
        }
        let c = evaluate(&f.model, &f.store, &f.vocab, &f.corpus, &EvalOptions { repeat: 1, ..base }).unwrap();
        assert_ne!(a.records[0].scores, c.records[0].scores);
    }

    #[test]
    fn floored_variances_make_sample_count_irrelevant() {
        let f = fixture(AblationFlags::default(), 13);
        let acc: Vec<f64> = [1, 4, 8]
            .iter()
            .map(|&n| {
                let o = EvalOptions { samples: n, zero_variance: true, ..Default::default() };
                evaluate(&f.model, &f.store, &f.vocab, &f.corpus, &o).unwrap().accuracy
            })
            .collect();
        assert_eq!(acc[0], acc[1]);
        assert_eq!(acc[0], acc[2]);
    }
}
