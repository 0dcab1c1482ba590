//! Small pre-norm transformer encoder with a masked-language-model head.

mod pretrain;

pub use pretrain::{masked_lm_loss, pretrain, sequence_for, PretrainConfig, PretrainOutcome};

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Block, Family, Graph, ParamId, ParamStore, Real, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub hidden_size: usize,
    pub layer_count: usize,
    pub head_count: usize,
    pub feed_forward_size: usize,
    pub max_sequence_length: usize,
    pub dropout_rate: f64,
    /// Reuse the token embedding table as the MLM output projection.
    pub tie_head: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            hidden_size: 128,
            layer_count: 4,
            head_count: 4,
            feed_forward_size: 256,
            max_sequence_length: 64,
            dropout_rate: 0.0,
            tie_head: false,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.hidden_size == 0
            || self.layer_count == 0
            || self.head_count == 0
            || self.feed_forward_size == 0
            || self.max_sequence_length == 0
        {
            return fail("backbone sizes must be positive".into());
        }
        if self.hidden_size % self.head_count != 0 {
            return fail(format!(
                "hidden_size {} is not divisible by head_count {}",
                self.hidden_size, self.head_count
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return fail("dropout_rate must lie in [0, 1)".into());
        }
        Ok(())
    }
}

pub(crate) fn random_matrix<F: Real>(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Array2<F> {
    let normal = Normal::new(0.0, std).expect("valid std");
    Array2::from_shape_simple_fn((rows, cols), || F::lit(normal.sample(rng)))
}

/// Inverted dropout with masks drawn from a dedicated stream.
pub struct Dropout {
    pub rate: f64,
    pub rng: ChaCha8Rng,
}

impl Dropout {
    fn apply<F: Real>(&mut self, g: &mut Graph<'_, F>, x: Var) -> Var {
        if self.rate <= 0.0 {
            return x;
        }
        let keep = F::lit(1.0 / (1.0 - self.rate));
        let (r, c) = g.shape(x);
        let rate = self.rate;
        let rng = &mut self.rng;
        let mask = Array2::from_shape_simple_fn((r, c), || {
            if rng.random_bool(rate) {
                F::zero()
            } else {
                keep
            }
        });
        let m = g.constant(mask);
        g.mul(x, m)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub(crate) fn register<F: Real>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
        name: &str,
        family: Family,
        fan_in: usize,
        fan_out: usize,
    ) -> Self {
        Self {
            weight: store.add(format!("{name}.weight"), family, random_matrix(rng, fan_in, fan_out, INIT_STD)),
            bias: store.add(format!("{name}.bias"), family, Array2::zeros((1, fan_out))),
        }
    }

    pub(crate) fn resolve<F: Real>(store: &ParamStore<F>, name: &str) -> Result<Self> {
        Ok(Self {
            weight: lookup(store, &format!("{name}.weight"))?,
            bias: lookup(store, &format!("{name}.bias"))?,
        })
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<'_, F>, x: Var) -> Var {
        let (w, b) = (g.param(self.weight), g.param(self.bias));
        g.linear(x, w, b)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl Norm {
    fn register<F: Real>(store: &mut ParamStore<F>, name: &str, family: Family, width: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), family, Array2::ones((1, width))),
            bias: store.add(format!("{name}.bias"), family, Array2::zeros((1, width))),
        }
    }

    fn resolve<F: Real>(store: &ParamStore<F>, name: &str) -> Result<Self> {
        Ok(Self { gain: lookup(store, &format!("{name}.gain"))?, bias: lookup(store, &format!("{name}.bias"))? })
    }

    fn forward<F: Real>(&self, g: &mut Graph<'_, F>, x: Var) -> Var {
        let n = g.layer_norm(x, LAYER_NORM_EPS);
        let (gain, bias) = (g.param(self.gain), g.param(self.bias));
        let n = g.mul_row(n, gain);
        g.add_row(n, bias)
    }
}

pub(crate) fn lookup<F: Real>(store: &ParamStore<F>, name: &str) -> Result<ParamId> {
    store.id(name).ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub attn_norm: Norm,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub ffn_norm: Norm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
}

/// Parameter handles of the backbone inside a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub vocab_size: usize,
    pub token_embedding: ParamId,
    pub position_embedding: ParamId,
    pub layers: Vec<LayerParams>,
    pub final_norm: Norm,
    /// `None` when the head is tied to the token embedding table.
    pub head_weight: Option<ParamId>,
    pub head_bias: ParamId,
}

impl Backbone {
    pub fn register<F: Real>(
        store: &mut ParamStore<F>,
        config: &BackboneConfig,
        vocab_size: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.hidden_size;
        let token_embedding =
            store.add("backbone.token_embedding", Family::Embeddings, random_matrix(rng, vocab_size, d, INIT_STD));
        let position_embedding = store.add(
            "backbone.position_embedding",
            Family::Embeddings,
            random_matrix(rng, config.max_sequence_length, d, INIT_STD),
        );
        let enc = Family::Encoder;
        let layers = (0..config.layer_count)
            .map(|l| {
                let p = format!("backbone.layers.{l}");
                LayerParams {
                    attn_norm: Norm::register(store, &format!("{p}.attn_norm"), enc, d),
                    query: Linear::register(store, rng, &format!("{p}.attn.query"), enc, d, d),
                    key: Linear::register(store, rng, &format!("{p}.attn.key"), enc, d, d),
                    value: Linear::register(store, rng, &format!("{p}.attn.value"), enc, d, d),
                    output: Linear::register(store, rng, &format!("{p}.attn.output"), enc, d, d),
                    ffn_norm: Norm::register(store, &format!("{p}.ffn_norm"), enc, d),
                    ffn_in: Linear::register(store, rng, &format!("{p}.ffn.in"), enc, d, config.feed_forward_size),
                    ffn_out: Linear::register(store, rng, &format!("{p}.ffn.out"), enc, config.feed_forward_size, d),
                }
            })
            .collect();
        let final_norm = Norm::register(store, "backbone.final_norm", enc, d);
        let head_weight = (!config.tie_head).then(|| {
            store.add("backbone.mlm_head.weight", Family::MlmHead, random_matrix(rng, d, vocab_size, INIT_STD))
        });
        let head_bias = store.add("backbone.mlm_head.bias", Family::MlmHead, Array2::zeros((1, vocab_size)));
        Ok(Self {
            config: config.clone(),
            vocab_size,
            token_embedding,
            position_embedding,
            layers,
            final_norm,
            head_weight,
            head_bias,
        })
    }

    /// Re-attaches to tensors previously registered under the standard names.
    pub fn resolve<F: Real>(store: &ParamStore<F>, config: &BackboneConfig) -> Result<Self> {
        config.validate()?;
        let token_embedding = lookup(store, "backbone.token_embedding")?;
        let vocab_size = store.value(token_embedding).nrows();
        let layers = (0..config.layer_count)
            .map(|l| {
                let p = format!("backbone.layers.{l}");
                Ok(LayerParams {
                    attn_norm: Norm::resolve(store, &format!("{p}.attn_norm"))?,
                    query: Linear::resolve(store, &format!("{p}.attn.query"))?,
                    key: Linear::resolve(store, &format!("{p}.attn.key"))?,
                    value: Linear::resolve(store, &format!("{p}.attn.value"))?,
                    output: Linear::resolve(store, &format!("{p}.attn.output"))?,
                    ffn_norm: Norm::resolve(store, &format!("{p}.ffn_norm"))?,
                    ffn_in: Linear::resolve(store, &format!("{p}.ffn.in"))?,
                    ffn_out: Linear::resolve(store, &format!("{p}.ffn.out"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let head_weight = if config.tie_head { None } else { Some(lookup(store, "backbone.mlm_head.weight")?) };
        Ok(Self {
            config: config.clone(),
            vocab_size,
            token_embedding,
            position_embedding: lookup(store, "backbone.position_embedding")?,
            layers,
            final_norm: Norm::resolve(store, "backbone.final_norm")?,
            head_weight,
            head_bias: lookup(store, "backbone.mlm_head.bias")?,
        })
    }

    pub fn hidden_size(&self) -> usize {
        self.config.hidden_size
    }

    /// Token-table rows, without position information.
    pub fn token_rows<F: Real>(&self, g: &mut Graph<'_, F>, ids: &[usize]) -> Var {
        let table = g.param(self.token_embedding);
        g.gather(table, ids)
    }

    /// Adds position embeddings (`positions[r]` for row `r`) and runs the
    /// encoder stack; each block is one independent sequence.
    pub fn encode_graph<F: Real>(
        &self,
        g: &mut Graph<'_, F>,
        input: Var,
        positions: &[usize],
        blocks: &[Block],
        mut dropout: Option<&mut Dropout>,
    ) -> Var {
        let table = g.param(self.position_embedding);
        let pos = g.gather(table, positions);
        let mut x = g.add(input, pos);
        for layer in &self.layers {
            let h = layer.attn_norm.forward(g, x);
            let q = layer.query.forward(g, h);
            let k = layer.key.forward(g, h);
            let v = layer.value.forward(g, h);
            let a = g.attention(q, k, v, self.config.head_count, blocks);
            let mut a = layer.output.forward(g, a);
            if let Some(d) = dropout.as_deref_mut() {
                a = d.apply(g, a);
            }
            x = g.add(x, a);
            let h = layer.ffn_norm.forward(g, x);
            let f = layer.ffn_in.forward(g, h);
            let f = g.gelu(f);
            let mut f = layer.ffn_out.forward(g, f);
            if let Some(d) = dropout.as_deref_mut() {
                f = d.apply(g, f);
            }
            x = g.add(x, f);
        }
        self.final_norm.forward(g, x)
    }

    /// MLM head: `d -> |V|` linear map with bias.
    pub fn head_graph<F: Real>(&self, g: &mut Graph<'_, F>, hidden: Var) -> Var {
        let bias = g.param(self.head_bias);
        let projected = match self.head_weight {
            Some(w) => {
                let w = g.param(w);
                g.matmul(hidden, w)
            }
            None => {
                let table = g.param(self.token_embedding);
                g.matmul_t(hidden, table)
            }
        };
        g.add_row(projected, bias)
    }

    /// Token embedding rows for `ids` (no position embeddings).
    pub fn embed<F: Real>(&self, store: &ParamStore<F>, ids: &[usize]) -> Result<Array2<F>> {
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.vocab_size) {
            return Err(Error::UnknownTokenId(bad));
        }
        let mut g = Graph::new(store);
        let rows = self.token_rows(&mut g, ids);
        Ok(g.value(rows).to_owned())
    }

    /// Contextual states for one sequence. Rows flagged `false` in
    /// `real_token_mask` are padding: they are excluded from attention and
    /// come back as zero rows. Real rows keep their original positions.
    pub fn encode<F: Real>(
        &self,
        store: &ParamStore<F>,
        input_rows: ArrayView2<'_, F>,
        real_token_mask: &[bool],
    ) -> Result<Array2<F>> {
        let len = input_rows.nrows();
        assert_eq!(len, real_token_mask.len(), "mask length must match input rows");
        if len > self.config.max_sequence_length {
            return Err(Error::SequenceTooLong { len, max: self.config.max_sequence_length });
        }
        let real: Vec<usize> = (0..len).filter(|&i| real_token_mask[i]).collect();
        if real.is_empty() {
            return Err(Error::AllPadding);
        }
        let mut compact = Array2::zeros((real.len(), input_rows.ncols()));
        for (r, &i) in real.iter().enumerate() {
            compact.row_mut(r).assign(&input_rows.row(i));
        }
        let mut g = Graph::new(store);
        let x = g.constant(compact);
        let h = self.encode_graph(&mut g, x, &real, &[Block::square(0..real.len())], None);
        let mut out = Array2::zeros(input_rows.dim());
        for (r, &i) in real.iter().enumerate() {
            out.row_mut(i).assign(&g.value(h).row(r));
        }
        Ok(out)
    }

    pub fn mlm_logits<F: Real>(&self, store: &ParamStore<F>, state_row: ArrayView1<'_, F>) -> Array1<F> {
        let mut g = Graph::new(store);
        let x = g.constant(state_row.to_owned().insert_axis(ndarray::Axis(0)));
        let logits = self.head_graph(&mut g, x);
        g.value(logits).row(0).to_owned()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn tiny() -> (ParamStore<f64>, Backbone) {
        let cfg = BackboneConfig {
            hidden_size: 8,
            layer_count: 2,
            head_count: 2,
            feed_forward_size: 16,
            max_sequence_length: 12,
            dropout_rate: 0.0,
            tie_head: false,
        };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let bb = Backbone::register(&mut store, &cfg, 20, &mut rng).unwrap();
        // larger weights so the checks are not dominated by the residual path
        for (_, p) in store.iter_mut() {
            if p.name.ends_with("weight") {
                p.value.mapv_inplace(|x| x * 15.0);
            }
        }
        (store, bb)
    }

    #[test]
    fn embed_shapes_and_duplicates() {
        let (store, bb) = tiny();
        let e = bb.embed(&store, &[7, 7, 3]).unwrap();
        assert_eq!(e.dim(), (3, 8));
        assert_eq!(e.row(0), e.row(1));
        assert!(matches!(bb.embed(&store, &[20]), Err(Error::UnknownTokenId(20))));
    }

    #[test]
    fn encode_rejects_degenerate_input() {
        let (store, bb) = tiny();
        let rows = bb.embed(&store, &[1, 2]).unwrap();
        assert!(matches!(bb.encode(&store, rows.view(), &[false, false]), Err(Error::AllPadding)));
        let long = bb.embed(&store, &[1; 13]).unwrap();
        assert!(matches!(bb.encode(&store, long.view(), &[true; 13]), Err(Error::SequenceTooLong { .. })));
    }

    #[test]
    fn padding_rows_do_not_leak() {
        let (store, bb) = tiny();
        let rows = bb.embed(&store, &[1, 9, 10, 11, 0, 0]).unwrap();
        let mask = [true, true, true, true, false, false];
        let out = bb.encode(&store, rows.view(), &mask).unwrap();
        let mut swapped = rows.clone();
        swapped.row_mut(4).assign(&rows.row(5));
        swapped.row_mut(5).fill(3.0);
        let out2 = bb.encode(&store, swapped.view(), &mask).unwrap();
        assert_eq!(out.slice(ndarray::s![0..4, ..]), out2.slice(ndarray::s![0..4, ..]));
        assert!(out.row(4).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn single_real_token_matches_length_one_pass() {
        let (store, bb) = tiny();
        let rows = bb.embed(&store, &[9, 0, 0, 0]).unwrap();
        let padded = bb.encode(&store, rows.view(), &[true, false, false, false]).unwrap();
        let single = bb.encode(&store, rows.slice(ndarray::s![0..1, ..]), &[true]).unwrap();
        for (a, b) in padded.row(0).iter().zip(single.row(0).iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        // and the sequence context actually matters when the rows are real
        let full = bb.encode(&store, rows.view(), &[true; 4]).unwrap();
        assert!(full.row(0).iter().zip(single.row(0).iter()).any(|(a, b)| (a - b).abs() > 1e-9));
    }

    #[test]
    fn head_shape_and_zero_input() {
        let (mut store, bb) = tiny();
        let zero = Array1::zeros(8);
        let logits = bb.mlm_logits(&store, zero.view());
        assert_eq!(logits.len(), 20);
        assert!(logits.iter().all(|&x| x == 0.0));
        store.value_mut(bb.head_bias)[[0, 3]] = 0.5;
        let row = Array1::from_shape_fn(8, |i| i as f64 * 0.1);
        let logits = bb.mlm_logits(&store, row.view());
        let max = logits.iter().cloned().fold(f64::MIN, f64::max);
        let total: f64 = logits.iter().map(|x| (x - max).exp()).sum();
        let sum: f64 = logits.iter().map(|x| (x - max).exp() / total).sum();
        assert!((sum - 1.0).abs() < 1e-6);
    }

    #[test]
    fn tied_head_uses_embedding_table() {
        let cfg = BackboneConfig { hidden_size: 8, head_count: 2, tie_head: true, ..BackboneConfig::default() };
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let bb = Backbone::register(&mut store, &cfg, 15, &mut rng).unwrap();
        assert!(bb.head_weight.is_none());
        let row = store.value(bb.token_embedding).row(4).to_owned();
        let logits = bb.mlm_logits(&store, row.view());
        let expected: f64 = row.iter().map(|x| x * x).sum();
        assert!((logits[4] - expected).abs() < 1e-12);
        assert_eq!(Backbone::resolve(&store, &cfg).unwrap(), bb);
    }

    #[test]
    fn rejects_indivisible_heads() {
        let cfg = BackboneConfig { hidden_size: 10, head_count: 4, ..BackboneConfig::default() };
        assert!(cfg.validate().is_err());
    }
}
