//! Masked-token pretraining of the backbone on chain text.

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Backbone, BackboneConfig, Dropout};
use crate::data::{event_to_tokens, ScriptInstance};
use crate::error::{Error, Result};
use crate::noise::{domain, NoiseSource};
use crate::optim::{AdamW, AdamWConfig};
use crate::tensor::{Block, Gradients, Graph, ParamStore, Real, Var};
use crate::vocab::{Vocabulary, CLS, MASK, SEP};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub mask_probability: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 1500,
            batch_size: 16,
            learning_rate: 1e-3,
            weight_decay: 1e-8,
            mask_probability: 0.15,
            seed: 7,
        }
    }
}

pub struct PretrainOutcome<F> {
    pub store: ParamStore<F>,
    pub backbone: Backbone,
    /// `(step, masked cross-entropy)` for every step.
    pub losses: Vec<(usize, f64)>,
}

/// `[CLS] chain tokens [SEP]`
pub fn sequence_for(vocab: &Vocabulary, instance: &ScriptInstance) -> Vec<usize> {
    let mut ids = Vec::with_capacity(2 + 4 * instance.chain.len());
    ids.push(CLS);
    for e in &instance.chain {
        ids.extend(event_to_tokens(e).iter().map(|t| vocab.id(t)));
    }
    ids.push(SEP);
    ids
}

struct Masked {
    input: Vec<usize>,
    positions: Vec<usize>,
    targets: Vec<usize>,
}

/// Masks every non-special position with probability `p`; when the draw
/// masks nothing, one position is masked uniformly.
fn mask_sequence<R: Rng>(ids: &[usize], p: f64, rng: &mut R) -> Masked {
    let candidates: Vec<usize> = (0..ids.len()).filter(|&i| ids[i] != CLS && ids[i] != SEP).collect();
    let mut positions: Vec<usize> = candidates.iter().copied().filter(|_| rng.random_bool(p)).collect();
    if positions.is_empty() {
        positions.push(*candidates.choose(rng).expect("sequence has content tokens"));
    }
    let mut input = ids.to_vec();
    let targets = positions.iter().map(|&i| ids[i]).collect();
    for &i in &positions {
        input[i] = MASK;
    }
    Masked { input, positions, targets }
}

fn batch_loss<F: Real>(
    g: &mut Graph<'_, F>,
    backbone: &Backbone,
    batch: &[Masked],
    dropout: Option<&mut Dropout>,
) -> Var {
    let mut ids = Vec::new();
    let mut positions = Vec::new();
    let mut blocks = Vec::with_capacity(batch.len());
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for m in batch {
        let start = ids.len();
        ids.extend_from_slice(&m.input);
        positions.extend(0..m.input.len());
        blocks.push(Block::square(start..ids.len()));
        rows.extend(m.positions.iter().map(|&p| start + p));
        targets.extend_from_slice(&m.targets);
    }
    let x = backbone.token_rows(g, &ids);
    let h = backbone.encode_graph(g, x, &positions, &blocks, dropout);
    let picked = g.gather(h, &rows);
    let logits = backbone.head_graph(g, picked);
    g.cross_entropy(logits, &targets)
}

fn sequences(vocab: &Vocabulary, corpus: &[ScriptInstance], max_len: usize) -> Result<Vec<Vec<usize>>> {
    corpus
        .iter()
        .map(|inst| {
            let s = sequence_for(vocab, inst);
            if s.len() > max_len {
                Err(Error::SequenceTooLong { len: s.len(), max: max_len })
            } else {
                Ok(s)
            }
        })
        .collect()
}

pub fn pretrain<F: Real>(
    corpus: &[ScriptInstance],
    vocab: &Vocabulary,
    backbone_config: &BackboneConfig,
    config: &PretrainConfig,
) -> Result<PretrainOutcome<F>> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if config.mask_probability <= 0.0 {
        return Err(Error::NoMaskedPositions);
    }
    if config.mask_probability > 1.0 || config.batch_size == 0 {
        return Err(Error::Config("mask_probability must lie in (0, 1] and batch_size be positive".into()));
    }
    let noise = NoiseSource::new(config.seed);
    let mut store = ParamStore::<F>::new();
    let backbone = Backbone::register(&mut store, backbone_config, vocab.len(), &mut noise.rng(&[domain::INIT]))?;
    let seqs = sequences(vocab, corpus, backbone_config.max_sequence_length)?;
    let mut opt = AdamW::new(
        AdamWConfig { weight_decay: config.weight_decay, ..AdamWConfig::default() },
        store.len(),
    );
    let mut losses = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let mut pick = noise.rng(&[domain::BATCH, step as u64]);
        let mut mask_rng = noise.rng(&[domain::MASKING, step as u64]);
        let batch: Vec<Masked> = (0..config.batch_size)
            .map(|_| {
                let s = &seqs[pick.random_range(0..seqs.len())];
                mask_sequence(s, config.mask_probability, &mut mask_rng)
            })
            .collect();
        let mut dropout =
            Dropout { rate: backbone_config.dropout_rate, rng: noise.rng(&[domain::DROPOUT, step as u64]) };
        let mut grads = Gradients::new(store.len());
        let loss = {
            let mut g = Graph::new(&store);
            let loss = batch_loss(&mut g, &backbone, &batch, Some(&mut dropout));
            g.backward(loss, &mut grads);
            g.scalar(loss).f64()
        };
        if !loss.is_finite() {
            return Err(Error::NonFinite { step, diagnostics: format!("masked LM loss {loss}") });
        }
        opt.step(&mut store, &grads, |_| Some(config.learning_rate));
        if !store.all_finite() {
            return Err(Error::NonFinite { step, diagnostics: "non-finite backbone parameter".into() });
        }
        losses.push((step, loss));
        if step % 100 == 0 {
            log::info!("pretrain step {step} loss {loss:.4}");
        }
    }
    Ok(PretrainOutcome { store, backbone, losses })
}

/// Mean masked cross-entropy over `corpus` with masks drawn from `seed`.
pub fn masked_lm_loss<F: Real>(
    store: &ParamStore<F>,
    backbone: &Backbone,
    vocab: &Vocabulary,
    corpus: &[ScriptInstance],
    mask_probability: f64,
    seed: u64,
) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if mask_probability <= 0.0 {
        return Err(Error::NoMaskedPositions);
    }
    let seqs = sequences(vocab, corpus, backbone.config.max_sequence_length)?;
    let mut rng = NoiseSource::new(seed).rng(&[domain::MASKING]);
    let masked: Vec<Masked> = seqs.iter().map(|s| mask_sequence(s, mask_probability, &mut rng)).collect();
    let (mut total, mut count) = (0.0, 0usize);
    for chunk in masked.chunks(32) {
        let n: usize = chunk.iter().map(|m| m.targets.len()).sum();
        let mut g = Graph::new(store);
        let loss = batch_loss(&mut g, backbone, chunk, None);
        total += g.scalar(loss).f64() * n as f64;
        count += n;
    }
    Ok(total / count as f64)
}
