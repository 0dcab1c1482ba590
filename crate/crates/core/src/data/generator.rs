//! Seeded synthetic script corpora.
//!
//! Each scenario owns a cyclic verb sequence and an argument vocabulary. A
//! chain walks the verb cycle of one scenario with a single protagonist as
//! subject; the gold candidate is the next verb of the cycle. Distractors are
//! either events from other scenarios or near-misses that keep the gold verb
//! but swap in objects from another scenario.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Event, ScriptInstance, NULL_ARGUMENT};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub scenario_count: usize,
    /// Distinct verbs and distinct argument tokens per scenario.
    pub vocab_per_scenario: usize,
    pub chain_length: usize,
    pub candidate_count: usize,
    pub null_argument_rate: f64,
    /// Probability that a distractor is an argument-swapped near-miss of the gold event.
    pub distractor_overlap_rate: f64,
    pub instance_count: usize,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            scenario_count: 6,
            vocab_per_scenario: 12,
            chain_length: 8,
            candidate_count: 5,
            null_argument_rate: 0.2,
            distractor_overlap_rate: 0.3,
            instance_count: 20_000,
            seed: 17,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.scenario_count < 2 {
            return bad("scenario_count must be at least 2");
        }
        if self.vocab_per_scenario < 3 {
            return bad("vocab_per_scenario must be at least 3");
        }
        if self.chain_length < 2 {
            return bad("chain_length must be at least 2");
        }
        if self.candidate_count < 2 {
            return bad("candidate_count must be at least 2");
        }
        if self.instance_count == 0 {
            return bad("instance_count must be positive");
        }
        for (name, p) in [
            ("null_argument_rate", self.null_argument_rate),
            ("distractor_overlap_rate", self.distractor_overlap_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn verb_token(scenario: usize, i: usize) -> String {
        format!("v{scenario}_{i:02}")
    }

    pub fn argument_token(scenario: usize, i: usize) -> String {
        format!("a{scenario}_{i:02}")
    }

    /// Every surface token the generator can emit, in a fixed order.
    pub fn inventory(&self) -> Vec<String> {
        let mut out = Vec::with_capacity(2 * self.scenario_count * self.vocab_per_scenario);
        for s in 0..self.scenario_count {
            for i in 0..self.vocab_per_scenario {
                out.push(Self::verb_token(s, i));
            }
            for i in 0..self.vocab_per_scenario {
                out.push(Self::argument_token(s, i));
            }
        }
        out
    }
}

/// A generated instance plus the scenario each event was drawn from. The
/// scenario tags are bookkeeping for tests and never reach the model.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedInstance {
    pub instance: ScriptInstance,
    pub chain_scenario: usize,
    pub candidate_scenarios: Vec<usize>,
}

struct Sampler<'c> {
    config: &'c GeneratorConfig,
    rng: ChaCha8Rng,
}

impl Sampler<'_> {
    fn argument(&mut self, scenario: usize) -> String {
        let i = self.rng.random_range(0..self.config.vocab_per_scenario);
        GeneratorConfig::argument_token(scenario, i)
    }

    fn maybe_null(&mut self, scenario: usize) -> String {
        if self.rng.random_bool(self.config.null_argument_rate) {
            NULL_ARGUMENT.to_string()
        } else {
            self.argument(scenario)
        }
    }

    fn other_scenario(&mut self, scenario: usize) -> usize {
        let offset = self.rng.random_range(1..self.config.scenario_count);
        (scenario + offset) % self.config.scenario_count
    }

    fn event(&mut self, protagonist: &str, scenario: usize, verb: usize) -> Event {
        Event {
            subject: protagonist.to_string(),
            verb: GeneratorConfig::verb_token(scenario, verb),
            object: self.maybe_null(scenario),
            indirect_object: self.maybe_null(scenario),
        }
    }

    fn instance(&mut self) -> GeneratedInstance {
        let cfg = self.config;
        let scenario = self.rng.random_range(0..cfg.scenario_count);
        let protagonist = self.argument(scenario);
        let cycle = cfg.vocab_per_scenario;
        let mut verb = self.rng.random_range(0..cycle);
        let mut chain = Vec::with_capacity(cfg.chain_length);
        for step in 0..cfg.chain_length {
            if step > 0 {
                verb = (verb + if self.rng.random_bool(0.2) { 2 } else { 1 }) % cycle;
            }
            chain.push(self.event(&protagonist, scenario, verb));
        }
        let gold_event = self.event(&protagonist, scenario, (verb + 1) % cycle);

        let mut candidates = vec![gold_event.clone()];
        let mut scenarios = vec![scenario];
        while candidates.len() < cfg.candidate_count {
            let other = self.other_scenario(scenario);
            let distractor = if self.rng.random_bool(cfg.distractor_overlap_rate) {
                Event {
                    subject: protagonist.clone(),
                    verb: gold_event.verb.clone(),
                    object: self.argument(other),
                    indirect_object: self.maybe_null(other),
                }
            } else {
                let v = self.rng.random_range(0..cycle);
                self.event(&protagonist, other, v)
            };
            if !candidates.contains(&distractor) {
                candidates.push(distractor);
                scenarios.push(other);
            }
        }

        let gold = self.rng.random_range(0..cfg.candidate_count);
        candidates.swap(0, gold);
        scenarios.swap(0, gold);
        GeneratedInstance {
            instance: ScriptInstance { chain, candidates, gold },
            chain_scenario: scenario,
            candidate_scenarios: scenarios,
        }
    }
}

/// Generates `instance_count` instances with their scenario provenance.
pub fn generate_with_provenance(config: &GeneratorConfig) -> Result<Vec<GeneratedInstance>> {
    config.validate()?;
    let mut sampler = Sampler { config, rng: ChaCha8Rng::seed_from_u64(config.seed) };
    Ok((0..config.instance_count).map(|_| sampler.instance()).collect())
}

pub fn generate_corpus(config: &GeneratorConfig) -> Result<Vec<ScriptInstance>> {
    Ok(generate_with_provenance(config)?.into_iter().map(|g| g.instance).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::serialize_instance;

    fn small(count: usize) -> GeneratorConfig {
        GeneratorConfig { instance_count: count, ..GeneratorConfig::default() }
    }

    #[test]
    fn same_seed_gives_identical_corpus() {
        let a: Vec<String> = generate_corpus(&small(200)).unwrap().iter().map(serialize_instance).collect();
        let b: Vec<String> = generate_corpus(&small(200)).unwrap().iter().map(serialize_instance).collect();
        assert_eq!(a.join("\n"), b.join("\n"));
        let c = generate_corpus(&GeneratorConfig { seed: 18, ..small(200) }).unwrap();
        assert_ne!(a[0], serialize_instance(&c[0]));
    }

    #[test]
    fn gold_indices_are_uniform() {
        let cfg = small(10_000);
        let corpus = generate_corpus(&cfg).unwrap();
        let mut counts = [0usize; 5];
        for inst in &corpus {
            counts[inst.gold] += 1;
        }
        // binomial(10000, 0.2): mean 2000, sd 40
        let (mean, sd) = (2000.0, (10_000.0f64 * 0.2 * 0.8).sqrt());
        for c in counts {
            assert!((c as f64 - mean).abs() <= 3.0 * sd, "{counts:?}");
        }
    }

    #[test]
    fn zero_null_rate_emits_no_null() {
        let cfg = GeneratorConfig { null_argument_rate: 0.0, ..small(500) };
        for inst in generate_corpus(&cfg).unwrap() {
            for e in inst.chain.iter().chain(&inst.candidates) {
                assert!(e.fields().iter().all(|f| *f != NULL_ARGUMENT));
            }
        }
    }

    #[test]
    fn provenance_gold_shares_scenario() {
        for g in generate_with_provenance(&small(1000)).unwrap() {
            let inst = &g.instance;
            assert_eq!(g.candidate_scenarios[inst.gold], g.chain_scenario);
            let off = g.candidate_scenarios.iter().filter(|&&s| s != g.chain_scenario).count();
            assert!(off >= 1);
            assert_eq!(inst.chain.len(), 8);
            assert_eq!(inst.candidates.len(), 5);
            inst.validate().unwrap();
            for (i, a) in inst.candidates.iter().enumerate() {
                for b in &inst.candidates[i + 1..] {
                    assert_ne!(a, b);
                }
            }
        }
    }

    #[test]
    fn rejects_single_scenario() {
        let cfg = GeneratorConfig { scenario_count: 1, ..small(10) };
        assert!(matches!(generate_corpus(&cfg), Err(Error::Config(_))));
        let cfg = GeneratorConfig { candidate_count: 1, ..small(10) };
        assert!(generate_corpus(&cfg).is_err());
    }

    #[test]
    fn inventory_covers_generated_tokens() {
        let cfg = small(300);
        let inv: std::collections::HashSet<String> = cfg.inventory().into_iter().collect();
        for inst in generate_corpus(&cfg).unwrap() {
            for e in inst.chain.iter().chain(&inst.candidates) {
                for f in e.fields() {
                    assert!(f == NULL_ARGUMENT || inv.contains(f), "{f}");
                }
            }
        }
    }
}
