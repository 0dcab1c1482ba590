//! Central finite-difference verification of analytic gradients.

use std::collections::BTreeMap;

use rand::Rng;
use serde::Serialize;

use crate::backbone::{Backbone, BackboneConfig};
use crate::data::{Event, ScriptInstance};
use crate::error::{Error, Result};
use crate::model::{AblationFlags, Draw, ForwardOptions, Model, ModelConfig, Prepared};
use crate::noise::{domain, NoiseSource};
use crate::tensor::{Family, Gradients, Graph, ParamStore, Var};
use crate::vocab::Vocabulary;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckSettings {
    pub step: f64,
    pub tolerance: f64,
    pub samples_per_family: usize,
    pub seed: u64,
    /// Smallest denominator of the relative error.
    pub abs_floor: f64,
}

impl Default for CheckSettings {
    fn default() -> Self {
        Self { step: 1e-4, tolerance: 1e-3, samples_per_family: 10, seed: 0, abs_floor: 1e-7 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EntryCheck {
    pub family: Family,
    pub parameter: String,
    pub row: usize,
    pub col: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub relative_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FamilyCheck {
    pub family: Family,
    pub checked: usize,
    pub max_relative_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub families: Vec<FamilyCheck>,
    pub failures: Vec<EntryCheck>,
    pub entries: Vec<EntryCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.families.iter().all(|f| f.checked > 0)
    }

    pub fn max_relative_error(&self) -> f64 {
        self.entries.iter().map(|e| e.relative_error).fold(0.0, f64::max)
    }

    pub fn summary(&self) -> String {
        let mut out = String::new();
        for f in &self.families {
            out.push_str(&format!("{:<22} checked {:>3}  max rel err {:.3e}\n", f.family.name(), f.checked, f.max_relative_error));
        }
        for e in &self.failures {
            out.push_str(&format!(
                "FAILED {} [{}, {}] ({}): analytic {:.6e} numeric {:.6e} rel {:.3e}\n",
                e.parameter,
                e.row,
                e.col,
                e.family.name(),
                e.analytic,
                e.numeric,
                e.relative_error
            ));
        }
        out
    }
}

fn evaluate(store: &ParamStore<f64>, loss: &dyn Fn(&mut Graph<'_, f64>) -> Var) -> f64 {
    let mut g = Graph::new(store);
    let l = loss(&mut g);
    g.scalar(l)
}

/// Compares analytic and central-difference gradients on sampled scalar
/// entries of every requested family. Half the samples come from entries
/// with a nonzero analytic gradient, the rest uniformly from the family.
/// `corrupt` scales one family's analytic gradient by `1 + factor` first.
pub fn check_sampled(
    store: &mut ParamStore<f64>,
    loss: &dyn Fn(&mut Graph<'_, f64>) -> Var,
    families: &[Family],
    settings: &CheckSettings,
    corrupt: Option<(Family, f64)>,
) -> GradCheckReport {
    let mut grads = Gradients::new(store.len());
    {
        let mut g = Graph::new(store);
        let l = loss(&mut g);
        g.backward(l, &mut grads);
    }
    let mut rng = NoiseSource::new(settings.seed).rng(&[domain::SELECTION]);
    let mut entries = Vec::new();
    let mut summaries = Vec::new();
    for &family in families {
        let mut all = Vec::new();
        let mut nonzero = Vec::new();
        for (id, p) in store.iter().filter(|(_, p)| p.family == family) {
            for ((r, c), _) in p.value.indexed_iter() {
                all.push((id, r, c));
                if grads.get(id).is_some_and(|gr| gr[[r, c]] != 0.0) {
                    nonzero.push((id, r, c));
                }
            }
        }
        let mut picked = Vec::new();
        if !all.is_empty() {
            let from_nonzero = if nonzero.is_empty() { 0 } else { settings.samples_per_family.div_ceil(2) };
            for k in 0..settings.samples_per_family {
                let pool = if k < from_nonzero { &nonzero } else { &all };
                picked.push(pool[rng.random_range(0..pool.len())]);
            }
        }
        let mut max_rel: f64 = 0.0;
        for (id, r, c) in picked {
            let mut analytic = grads.get(id).map_or(0.0, |gr| gr[[r, c]]);
            if let Some((f, factor)) = corrupt {
                if f == family {
                    analytic *= 1.0 + factor;
                }
            }
            let original = store.value(id)[[r, c]];
            store.value_mut(id)[[r, c]] = original + settings.step;
            let plus = evaluate(store, loss);
            store.value_mut(id)[[r, c]] = original - settings.step;
            let minus = evaluate(store, loss);
            store.value_mut(id)[[r, c]] = original;
            let numeric = (plus - minus) / (2.0 * settings.step);
            let denom = analytic.abs().max(numeric.abs()).max(settings.abs_floor);
            let relative_error = (analytic - numeric).abs() / denom;
            max_rel = max_rel.max(relative_error);
            entries.push(EntryCheck {
                family,
                parameter: store.get(id).name.clone(),
                row: r,
                col: c,
                analytic,
                numeric,
                relative_error,
            });
        }
        let checked = entries.iter().filter(|e| e.family == family).count();
        summaries.push(FamilyCheck { family, checked, max_relative_error: max_rel });
    }
    let failures = entries.iter().filter(|e| !(e.relative_error < settings.tolerance)).cloned().collect();
    GradCheckReport { tolerance: settings.tolerance, families: summaries, failures, entries }
}

/// Families the full model exposes under the given flags.
pub fn model_families(store: &ParamStore<f64>) -> Vec<Family> {
    let present: BTreeMap<&str, Family> = store.iter().map(|(_, p)| (p.family.name(), p.family)).collect();
    Family::ALL.iter().copied().filter(|f| present.contains_key(f.name())).collect()
}

/// Tiny desk fixture: 20-token vocabulary, `d = 8`, one encoder layer and
/// two-event chains.
pub struct TinyFixture {
    pub vocab: Vocabulary,
    pub instances: Vec<ScriptInstance>,
    pub store: ParamStore<f64>,
    pub model: Model,
}

pub fn tiny_fixture(seed: u64, flags: AblationFlags) -> Result<TinyFixture> {
    let words = ["cook", "eat", "pay", "leave", "bob", "ann", "food", "bill", "home"];
    let vocab = Vocabulary::build(words);
    debug_assert_eq!(vocab.len(), 20);
    let e = |s: &str, v: &str, o: &str, p: &str| Event::new(s, v, o, p);
    let instances = vec![
        ScriptInstance::new(
            vec![e("bob", "cook", "food", "NULL")?, e("bob", "eat", "food", "ann")?],
            vec![e("bob", "pay", "bill", "NULL")?, e("ann", "leave", "home", "NULL")?, e("bob", "cook", "NULL", "NULL")?],
            0,
        )?,
        ScriptInstance::new(
            vec![e("ann", "eat", "NULL", "NULL")?, e("ann", "pay", "bill", "bob")?],
            vec![e("ann", "cook", "food", "NULL")?, e("ann", "leave", "home", "NULL")?, e("bob", "eat", "bill", "home")?],
            1,
        )?,
    ];
    let bcfg = BackboneConfig {
        hidden_size: 8,
        layer_count: 1,
        head_count: 2,
        feed_forward_size: 16,
        max_sequence_length: 24,
        dropout_rate: 0.0,
        tie_head: false,
    };
    let noise = NoiseSource::new(seed);
    let mut store = ParamStore::new();
    let backbone = Backbone::register(&mut store, &bcfg, vocab.len(), &mut noise.rng(&[domain::INIT, 0]))?;
    let config = ModelConfig { flags, prompt_log_variance_init: -1.0, ..ModelConfig::default() };
    let model = Model::new(config, &vocab, backbone, &mut store, seed)?;
    // widen the small initialization so every path carries signal
    let mut rng = noise.rng(&[domain::INIT, 2]);
    for (_, p) in store.iter_mut() {
        if !p.name.ends_with(".bias") && !p.name.ends_with(".gain") {
            p.value.mapv_inplace(|x| x * 15.0);
        } else {
            p.value.mapv_inplace(|x| x + rng.random_range(-0.2..0.2));
        }
    }
    Ok(TinyFixture { vocab, instances, store, model })
}

/// Loss of the whole fixture batch under fixed draws.
pub fn fixture_loss<'s>(
    model: &'s Model,
    prepared: &'s [Prepared],
    draws: &'s [Draw<f64>],
) -> impl Fn(&mut Graph<'_, f64>) -> Var + 's {
    move |g: &mut Graph<'_, f64>| {
        let refs: Vec<&Prepared> = prepared.iter().collect();
        let fwd = model.forward(g, &refs, draws, ForwardOptions::default());
        model.loss(g, &refs, &fwd).0
    }
}

/// Checks the full training loss of the tiny fixture, with sampled noise,
/// across every parameter family.
pub fn gradient_check(seed: u64, settings: &CheckSettings, corrupt: Option<(Family, f64)>) -> Result<GradCheckReport> {
    let mut fx = tiny_fixture(seed, AblationFlags::default())?;
    let prepared = fx
        .instances
        .iter()
        .map(|i| fx.model.prepare(&fx.vocab, i))
        .collect::<Result<Vec<_>>>()?;
    let noise = NoiseSource::new(seed);
    let draws: Vec<Draw<f64>> =
        prepared.iter().enumerate().map(|(i, p)| fx.model.draw(&noise, &[i as u64], p.candidate_count())).collect();
    let families = model_families(&fx.store);
    let loss = fixture_loss(&fx.model, &prepared, &draws);
    let report = check_sampled(&mut fx.store, &loss, &families, settings, corrupt);
    if report.entries.iter().any(|e| !e.numeric.is_finite()) {
        return Err(Error::GradientCheck("non-finite finite-difference estimate".into()));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_fixture_has_twenty_tokens_and_all_families() {
        let fx = tiny_fixture(1, AblationFlags::default()).unwrap();
        assert_eq!(fx.vocab.len(), 20);
        let fams = model_families(&fx.store);
        for f in [
            Family::Embeddings,
            Family::Encoder,
            Family::MlmHead,
            Family::AttnMean,
            Family::AttnVariance,
            Family::VerbalizerProjection,
            Family::LabelTokens,
        ] {
            assert!(fams.contains(&f), "{f:?}");
        }
    }

    #[test]
    fn full_model_gradients_pass() {
        let report = gradient_check(3, &CheckSettings::default(), None).unwrap();
        assert!(report.passed(), "{}", report.summary());
        assert!(report.entries.len() >= 70);
    }

    #[test]
    fn corrupted_gradient_is_named() {
        let report = gradient_check(3, &CheckSettings::default(), Some((Family::AttnVariance, 0.1))).unwrap();
        assert!(!report.passed());
        assert!(report.failures.iter().all(|f| f.family == Family::AttnVariance));
        assert!(report.failures[0].parameter.starts_with("estimator.variance"));
        assert!(report.summary().contains("estimator.variance"));
    }

    #[test]
    fn stationary_point_has_vanishing_gradients() {
        // identical candidates and no noise: every score is 1/m whatever the
        // parameters, so the loss is flat
        let mut fx = tiny_fixture(5, AblationFlags::default()).unwrap();
        for inst in &mut fx.instances {
            let c = inst.candidates[0].clone();
            inst.candidates = vec![c; 3];
        }
        let prepared: Vec<Prepared> = fx.instances.iter().map(|i| fx.model.prepare(&fx.vocab, i).unwrap()).collect();
        let draws = vec![Draw::default(); prepared.len()];
        let families = model_families(&fx.store);
        let loss = fixture_loss(&fx.model, &prepared, &draws);
        let value = evaluate(&fx.store, &loss);
        assert!((value - 2.0 * 3f64.ln()).abs() < 1e-12);
        let report = check_sampled(&mut fx.store, &loss, &families, &CheckSettings::default(), None);
        assert!(report.passed(), "{}", report.summary());
        assert!(report.entries.iter().all(|e| e.analytic.abs() < 1e-10 && e.numeric.abs() < 1e-8));
    }
}
