//! Cloze patterns and the attention-based prompt estimator.
//!
//! For every candidate, each of its four arguments queries the chain's
//! argument embeddings; one attention map yields the prompt token's mean and a
//! second, independently parameterized one yields its log-variance.

use ndarray::{Array2, ArrayView2, Axis};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{lookup, Linear};
use crate::data::{event_to_tokens, Event};
use crate::error::{Error, Result};
use crate::gaussian::GaussianEmbedding;
use crate::tensor::{Block, Family, Graph, ParamStore, Real, Var};
use crate::vocab::{Vocabulary, CLS, MASK, PAD, SEP};

/// One prompt token per argument role.
pub const PROMPT_SLOTS: usize = 4;

/// Token layout `[CLS] chain [t1..t4] [MASK] candidate [SEP]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatternSequence {
    /// Prompt slots hold [`PAD`] placeholders unless filled with fixed words.
    pub token_ids: Vec<usize>,
    pub prompt_slot_positions: [usize; PROMPT_SLOTS],
    pub mask_position: usize,
    pub candidate_index: usize,
}

impl PatternSequence {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    /// Tokens before the first prompt slot: `[CLS]` and the chain.
    pub fn prefix(&self) -> &[usize] {
        &self.token_ids[..self.prompt_slot_positions[0]]
    }

    /// Tokens after the last prompt slot: `[MASK]`, candidate, `[SEP]`.
    pub fn suffix(&self) -> &[usize] {
        &self.token_ids[self.mask_position..]
    }

    /// Writes fixed vocabulary words into the prompt slots.
    pub fn with_slot_tokens(mut self, ids: [usize; PROMPT_SLOTS]) -> Self {
        for (pos, id) in self.prompt_slot_positions.iter().zip(ids) {
            self.token_ids[*pos] = id;
        }
        self
    }
}

pub fn event_ids(vocab: &Vocabulary, event: &Event) -> [usize; 4] {
    event_to_tokens(event).map(|t| vocab.id(t))
}

/// Argument ids of the chain, event-major, four per event.
pub fn chain_argument_ids(vocab: &Vocabulary, chain: &[Event]) -> Vec<usize> {
    chain.iter().flat_map(|e| event_ids(vocab, e)).collect()
}

pub fn build_pattern(
    vocab: &Vocabulary,
    chain: &[Event],
    candidate: &Event,
    candidate_index: usize,
    max_sequence_length: usize,
) -> Result<PatternSequence> {
    let mut ids = Vec::with_capacity(4 * chain.len() + 11);
    ids.push(CLS);
    ids.extend(chain_argument_ids(vocab, chain));
    let first = ids.len();
    ids.extend([PAD; PROMPT_SLOTS]);
    let mask_position = ids.len();
    ids.push(MASK);
    ids.extend(event_ids(vocab, candidate));
    ids.push(SEP);
    if ids.len() > max_sequence_length {
        return Err(Error::SequenceTooLong { len: ids.len(), max: max_sequence_length });
    }
    Ok(PatternSequence {
        token_ids: ids,
        prompt_slot_positions: std::array::from_fn(|i| first + i),
        mask_position,
        candidate_index,
    })
}

/// Concatenated argument embeddings of an `n`-event chain, `4n x d`.
#[derive(Clone, Debug, PartialEq)]
pub struct ChainArgumentMatrix<F> {
    rows: Array2<F>,
}

impl<F: Real> ChainArgumentMatrix<F> {
    pub fn new(rows: Array2<F>) -> Result<Self> {
        if rows.nrows() == 0 || rows.nrows() % 4 != 0 {
            return Err(Error::InvalidInstance(format!(
                "chain argument matrix needs 4 rows per event, got {}",
                rows.nrows()
            )));
        }
        Ok(Self { rows })
    }

    pub fn rows(&self) -> ArrayView2<'_, F> {
        self.rows.view()
    }

    pub fn event_count(&self) -> usize {
        self.rows.nrows() / 4
    }
}

/// Single-head scaled dot-product attention with query, key, value and output
/// projections, all with biases.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
}

impl AttentionMap {
    fn register<F: Real>(store: &mut ParamStore<F>, rng: &mut ChaCha8Rng, name: &str, family: Family, d: usize) -> Self {
        Self {
            query: Linear::register(store, rng, &format!("{name}.query"), family, d, d),
            key: Linear::register(store, rng, &format!("{name}.key"), family, d, d),
            value: Linear::register(store, rng, &format!("{name}.value"), family, d, d),
            output: Linear::register(store, rng, &format!("{name}.output"), family, d, d),
        }
    }

    fn resolve<F: Real>(store: &ParamStore<F>, name: &str) -> Result<Self> {
        Ok(Self {
            query: Linear::resolve(store, &format!("{name}.query"))?,
            key: Linear::resolve(store, &format!("{name}.key"))?,
            value: Linear::resolve(store, &format!("{name}.value"))?,
            output: Linear::resolve(store, &format!("{name}.output"))?,
        })
    }

    /// Every query row attends over all key rows.
    pub fn forward<F: Real>(&self, g: &mut Graph<'_, F>, queries: Var, keys: Var) -> Var {
        let q = self.query.forward(g, queries);
        let k = self.key.forward(g, keys);
        let v = self.value.forward(g, keys);
        let (nq, nk) = (g.shape(q).0, g.shape(k).0);
        let a = g.attention(q, k, v, 1, &[Block { queries: 0..nq, keys: 0..nk }]);
        self.output.forward(g, a)
    }
}

/// The coupled mean and variance attention maps. One pair is shared by all
/// four prompt slots; the querying argument tells the slots apart.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptEstimator {
    pub mean: AttentionMap,
    pub variance: AttentionMap,
}

impl PromptEstimator {
    pub fn register<F: Real>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
        d: usize,
        log_variance_init: f64,
    ) -> Self {
        let mean = AttentionMap::register(store, rng, "estimator.mean", Family::AttnMean, d);
        let variance = AttentionMap::register(store, rng, "estimator.variance", Family::AttnVariance, d);
        store.value_mut(variance.output.bias).fill(F::lit(log_variance_init));
        Self { mean, variance }
    }

    pub fn resolve<F: Real>(store: &ParamStore<F>) -> Result<Self> {
        lookup(store, "estimator.mean.query.weight")?;
        Ok(Self {
            mean: AttentionMap::resolve(store, "estimator.mean")?,
            variance: AttentionMap::resolve(store, "estimator.variance")?,
        })
    }

    /// Returns `(mean, variance)`, each `rows(queries) x d`.
    pub fn estimate_graph<F: Real>(&self, g: &mut Graph<'_, F>, queries: Var, chain_args: Var) -> (Var, Var) {
        let mean = self.mean.forward(g, queries, chain_args);
        let log_var = self.variance.forward(g, queries, chain_args);
        (mean, g.exp(log_var))
    }

    /// Prompt Gaussians for the candidate arguments (rows in subject, verb,
    /// object, indirect-object order) over the chain's argument matrix.
    pub fn estimate<F: Real>(
        &self,
        store: &ParamStore<F>,
        candidate_args: ArrayView2<'_, F>,
        chain: &ChainArgumentMatrix<F>,
    ) -> Vec<GaussianEmbedding<F>> {
        let mut g = Graph::new(store);
        let q = g.constant(candidate_args.to_owned());
        let e = g.constant(chain.rows().to_owned());
        let (mean, var) = self.estimate_graph(&mut g, q, e);
        g.value(mean)
            .axis_iter(Axis(0))
            .zip(g.value(var).axis_iter(Axis(0)))
            .map(|(m, v)| GaussianEmbedding::new(m.to_owned(), v.to_owned()))
            .collect()
    }
}
