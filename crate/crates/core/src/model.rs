//! The full scoring pipeline: pattern, Gaussian prompts, encoder, label
//! distribution and divergence scores, for a batch of script instances.

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::backbone::{random_matrix, Backbone, Dropout, INIT_STD};
use crate::data::ScriptInstance;
use crate::error::{Error, Result};
use crate::gaussian::{sample_graph, VARIANCE_FLOOR};
use crate::noise::{domain, NoiseSource};
use crate::prompt::{build_pattern, PromptEstimator, PROMPT_SLOTS};
use crate::scoring::{
    instance_loss, loss_graph, score_candidates, score_graph, softmax, CandidateDistribution, ScoreVector,
    SignConvention,
};
use crate::tensor::{Block, Family, Graph, ParamId, ParamStore, Real, Var};
use crate::verbalizer::{aggregate_graph, Aggregation, SigmaReading, VerbalizerParams};
use crate::vocab::Vocabulary;

/// Variant switches; all `false` is the full model.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationFlags {
    /// Prompt tokens use their mean only.
    pub no_pe_variance: bool,
    /// The label representation uses the aggregated mean only.
    pub no_ve_variance: bool,
    /// Prompt Gaussians are free parameters shared by every instance.
    pub static_prompt: bool,
    /// Label Gaussians are summed without uncertainty weights.
    pub plain_sum_aggregation: bool,
    pub single_label_token: bool,
    /// Fixed prompt words and a one-hot label distribution on a fixed word.
    pub manual_pvp: bool,
    /// Free prompt vectors and a one-hot label distribution on a fixed word.
    pub learnable_prompt_lr: bool,
}

impl AblationFlags {
    pub const NAMES: [&'static str; 7] = [
        "no_pe_variance",
        "no_ve_variance",
        "static_prompt",
        "plain_sum_aggregation",
        "single_label_token",
        "manual_pvp",
        "learnable_prompt_lr",
    ];

    fn values(&self) -> [bool; 7] {
        [
            self.no_pe_variance,
            self.no_ve_variance,
            self.static_prompt,
            self.plain_sum_aggregation,
            self.single_label_token,
            self.manual_pvp,
            self.learnable_prompt_lr,
        ]
    }

    pub fn set(&mut self, name: &str, value: bool) -> Result<()> {
        let slot = match name {
            "no_pe_variance" => &mut self.no_pe_variance,
            "no_ve_variance" => &mut self.no_ve_variance,
            "static_prompt" => &mut self.static_prompt,
            "plain_sum_aggregation" => &mut self.plain_sum_aggregation,
            "single_label_token" => &mut self.single_label_token,
            "manual_pvp" => &mut self.manual_pvp,
            "learnable_prompt_lr" => &mut self.learnable_prompt_lr,
            other => return Err(Error::Config(format!("unknown ablation flag {other:?}"))),
        };
        *slot = value;
        Ok(())
    }

    /// `full`, or the active flags joined with `+`.
    pub fn label(&self) -> String {
        let on: Vec<&str> = Self::NAMES.iter().zip(self.values()).filter(|(_, v)| *v).map(|(n, _)| *n).collect();
        if on.is_empty() {
            "full".into()
        } else {
            on.join("+")
        }
    }

    pub fn validate(&self) -> Result<()> {
        let prompt_modes = [self.static_prompt, self.manual_pvp, self.learnable_prompt_lr];
        if prompt_modes.iter().filter(|&&b| b).count() > 1 {
            return Err(Error::Config(
                "static_prompt, manual_pvp and learnable_prompt_lr are mutually exclusive".into(),
            ));
        }
        Ok(())
    }
}

/// The full model followed by its six ablations, in reporting order.
pub fn ablation_variants() -> Vec<AblationFlags> {
    let both = AblationFlags { no_pe_variance: true, no_ve_variance: true, ..Default::default() };
    let mut out = vec![AblationFlags::default()];
    for name in ["no_pe_variance", "no_ve_variance"] {
        let mut f = AblationFlags::default();
        f.set(name, true).expect("known flag");
        out.push(f);
    }
    out.push(both);
    for name in ["static_prompt", "plain_sum_aggregation", "single_label_token"] {
        let mut f = AblationFlags::default();
        f.set(name, true).expect("known flag");
        out.push(f);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub label_tokens: usize,
    pub lambda: f64,
    pub sigma_reading: SigmaReading,
    pub sign: SignConvention,
    pub flags: AblationFlags,
    pub manual_prompt: [String; PROMPT_SLOTS],
    pub label_word: String,
    /// Initial bias of the prompt log-variance output.
    pub prompt_log_variance_init: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            label_tokens: 3,
            lambda: 1.0,
            sigma_reading: SigmaReading::StdDev,
            sign: SignConvention::Negated,
            flags: AblationFlags::default(),
            manual_prompt: ["the", "next", "event", "is"].map(String::from),
            label_word: "then".into(),
            prompt_log_variance_init: -6.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.flags.validate()?;
        if self.label_tokens == 0 {
            return Err(Error::Config("label_tokens must be at least 1".into()));
        }
        if !(self.lambda > 0.0) {
            return Err(Error::Config("lambda must be positive".into()));
        }
        Ok(())
    }

    pub fn effective_label_tokens(&self) -> usize {
        if self.flags.single_label_token {
            1
        } else {
            self.label_tokens
        }
    }

    pub fn aggregation(&self) -> Aggregation {
        if self.flags.plain_sum_aggregation {
            Aggregation::PlainSum
        } else {
            Aggregation::UncertaintyAware { lambda: self.lambda, reading: self.sigma_reading }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum PromptSource {
    Estimated(PromptEstimator),
    Static { mean: ParamId, log_variance: ParamId },
    Learnable(ParamId),
    Manual([usize; PROMPT_SLOTS]),
}

#[derive(Clone, Debug, PartialEq)]
pub enum LabelSource {
    Gaussian(VerbalizerParams),
    OneHot(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub backbone: Backbone,
    pub prompt: PromptSource,
    pub label: LabelSource,
}

/// Token ids of one instance, split around the prompt slots.
#[derive(Clone, Debug, PartialEq)]
pub struct Prepared {
    /// `[CLS]` followed by the chain's argument tokens.
    pub prefix: Vec<usize>,
    /// `[MASK]`, the candidate's four tokens, `[SEP]`, per candidate.
    pub suffixes: Vec<Vec<usize>>,
    pub gold: usize,
}

impl Prepared {
    pub fn candidate_count(&self) -> usize {
        self.suffixes.len()
    }

    pub fn sequence_len(&self) -> usize {
        self.prefix.len() + PROMPT_SLOTS + self.suffixes[0].len()
    }

    pub fn mask_position(&self) -> usize {
        self.prefix.len() + PROMPT_SLOTS
    }
}

/// Standard normal draws for one forward pass of one instance. `None` means
/// the corresponding mean is used as is.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Draw<F> {
    /// `4m x d`, candidate-major.
    pub prompt: Option<Array2<F>>,
    /// `1 x |V|`.
    pub label: Option<Array2<F>>,
}

/// How the label side of a forward pass came out.
#[derive(Clone, Copy, Debug)]
pub enum LabelOut {
    /// Sampled label representation `v_v` (`1 x |V|`) before the softmax.
    Logits(Var),
    OneHot(usize),
}

pub struct Forward {
    /// `[MASK]` logits per instance, `m x |V|`.
    pub mask_logits: Vec<Var>,
    pub labels: Vec<LabelOut>,
}

#[derive(Default)]
pub struct ForwardOptions<'a> {
    /// Replace every prompt and label variance by the sampling floor.
    pub zero_variance: bool,
    pub dropout: Option<&'a mut Dropout>,
}

/// Noise path phases.
pub mod phase {
    pub const TRAIN: u64 = 0;
    pub const EVAL: u64 = 1;
}

fn to_matrix<F: Real>(rows: usize, cols: usize, values: Vec<f64>) -> Array2<F> {
    Array2::from_shape_vec((rows, cols), values.into_iter().map(F::lit).collect()).expect("noise shape")
}

impl Model {
    /// Registers every non-backbone parameter the configuration needs.
    pub fn new<F: Real>(
        config: ModelConfig,
        vocab: &Vocabulary,
        backbone: Backbone,
        store: &mut ParamStore<F>,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        if backbone.vocab_size != vocab.len() {
            return Err(Error::VocabularyMismatch {
                expected: format!("{} tokens", backbone.vocab_size),
                found: format!("{} tokens", vocab.len()),
            });
        }
        let d = backbone.hidden_size();
        let mut rng = NoiseSource::new(seed).rng(&[domain::INIT, 1]);
        let flags = &config.flags;
        let fixed_word = |w: &str| {
            vocab.get(w).ok_or_else(|| Error::Config(format!("word {w:?} is not in the vocabulary")))
        };
        let prompt = if flags.manual_pvp {
            let mut ids = [0; PROMPT_SLOTS];
            for (slot, w) in ids.iter_mut().zip(&config.manual_prompt) {
                *slot = fixed_word(w)?;
            }
            PromptSource::Manual(ids)
        } else if flags.learnable_prompt_lr {
            PromptSource::Learnable(store.add(
                "prompt.learnable",
                Family::LearnablePrompt,
                random_matrix(&mut rng, PROMPT_SLOTS, d, INIT_STD),
            ))
        } else if flags.static_prompt {
            let mean = store.add("prompt.static.mean", Family::StaticPrompt, random_matrix(&mut rng, PROMPT_SLOTS, d, INIT_STD));
            let log_variance = store.add(
                "prompt.static.log_variance",
                Family::StaticPrompt,
                Array2::from_elem((PROMPT_SLOTS, d), F::lit(config.prompt_log_variance_init)),
            );
            PromptSource::Static { mean, log_variance }
        } else {
            PromptSource::Estimated(PromptEstimator::register(store, &mut rng, d, config.prompt_log_variance_init))
        };
        let label = if flags.manual_pvp || flags.learnable_prompt_lr {
            LabelSource::OneHot(fixed_word(&config.label_word)?)
        } else {
            LabelSource::Gaussian(VerbalizerParams::register(store, &mut rng, config.effective_label_tokens(), d)?)
        };
        Ok(Self { config, backbone, prompt, label })
    }

    /// Re-attaches to a store that already holds every parameter.
    pub fn resolve<F: Real>(config: ModelConfig, vocab: &Vocabulary, backbone: Backbone, store: &ParamStore<F>) -> Result<Self> {
        let mut scratch = ParamStore::<F>::new();
        let fresh = Self::new(config, vocab, backbone, &mut scratch, 0)?;
        let rebind = |id: ParamId| -> Result<ParamId> {
            let name = &scratch.get(id).name;
            let found = store.id(name).ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            if store.value(found).dim() != scratch.value(id).dim() {
                return Err(Error::Checkpoint(format!("tensor {name} has the wrong shape")));
            }
            Ok(found)
        };
        let prompt = match fresh.prompt {
            PromptSource::Estimated(_) => PromptSource::Estimated(PromptEstimator::resolve(store)?),
            PromptSource::Static { mean, log_variance } => {
                PromptSource::Static { mean: rebind(mean)?, log_variance: rebind(log_variance)? }
            }
            PromptSource::Learnable(p) => PromptSource::Learnable(rebind(p)?),
            manual => manual,
        };
        let label = match fresh.label {
            LabelSource::Gaussian(_) => {
                let v = VerbalizerParams::resolve(store)?;
                if v.label_count(store) != fresh.config.effective_label_tokens() {
                    return Err(Error::Checkpoint("label token count differs from the configuration".into()));
                }
                LabelSource::Gaussian(v)
            }
            one_hot => one_hot,
        };
        Ok(Self { config: fresh.config, backbone: fresh.backbone, prompt, label })
    }

    pub fn prepare(&self, vocab: &Vocabulary, instance: &ScriptInstance) -> Result<Prepared> {
        instance.validate()?;
        let max = self.backbone.config.max_sequence_length;
        let patterns = instance
            .candidates
            .iter()
            .enumerate()
            .map(|(j, c)| build_pattern(vocab, &instance.chain, c, j, max))
            .collect::<Result<Vec<_>>>()?;
        Ok(Prepared {
            prefix: patterns[0].prefix().to_vec(),
            suffixes: patterns.iter().map(|p| p.suffix().to_vec()).collect(),
            gold: instance.gold,
        })
    }

    fn prompt_has_variance(&self) -> bool {
        !self.config.flags.no_pe_variance
            && matches!(self.prompt, PromptSource::Estimated(_) | PromptSource::Static { .. })
    }

    fn label_has_variance(&self) -> bool {
        !self.config.flags.no_ve_variance && matches!(self.label, LabelSource::Gaussian(_))
    }

    /// Draws for one instance with `m` candidates, addressed by `path`.
    /// Components the configuration keeps deterministic come back `None`.
    pub fn draw<F: Real>(&self, noise: &NoiseSource, path: &[u64], m: usize) -> Draw<F> {
        let d = self.backbone.hidden_size();
        let v = self.backbone.vocab_size;
        let prompt = self.prompt_has_variance().then(|| {
            let mut values = Vec::with_capacity(m * PROMPT_SLOTS * d);
            for j in 0..m {
                let key: Vec<u64> = [&[domain::PROMPT], path, &[j as u64]].concat();
                values.extend(noise.normals(&key, PROMPT_SLOTS * d));
            }
            to_matrix(m * PROMPT_SLOTS, d, values)
        });
        let label = self.label_has_variance().then(|| {
            let key: Vec<u64> = [&[domain::LABEL], path].concat();
            to_matrix(1, v, noise.normals(&key, v))
        });
        Draw { prompt, label }
    }

    /// All-zero draws shaped like [`Model::draw`].
    pub fn zero_draw<F: Real>(&self, m: usize) -> Draw<F> {
        let d = self.backbone.hidden_size();
        Draw {
            prompt: self.prompt_has_variance().then(|| Array2::zeros((m * PROMPT_SLOTS, d))),
            label: self.label_has_variance().then(|| Array2::zeros((1, self.backbone.vocab_size))),
        }
    }

    /// Prompt rows (`4m x d`) for every instance of the batch.
    fn prompt_rows<F: Real>(&self, g: &mut Graph<'_, F>, batch: &[&Prepared], draws: &[Draw<F>], zero_variance: bool) -> Vec<Var> {
        let floor = |g: &mut Graph<'_, F>, v: Var| {
            let shape = g.shape(v);
            g.constant(Array2::from_elem(shape, F::lit(VARIANCE_FLOOR)))
        };
        match &self.prompt {
            PromptSource::Manual(ids) => {
                let rows = self.backbone.token_rows(g, ids);
                batch.iter().map(|p| g.concat_rows(&vec![rows; p.candidate_count()])).collect()
            }
            PromptSource::Learnable(id) => {
                let rows = g.param(*id);
                batch.iter().map(|p| g.concat_rows(&vec![rows; p.candidate_count()])).collect()
            }
            PromptSource::Static { mean, log_variance } => {
                let mean = g.param(*mean);
                let lv = g.param(*log_variance);
                let var = g.exp(lv);
                batch
                    .iter()
                    .zip(draws)
                    .map(|(p, draw)| {
                        let m = g.concat_rows(&vec![mean; p.candidate_count()]);
                        let mut v = g.concat_rows(&vec![var; p.candidate_count()]);
                        if zero_variance {
                            v = floor(g, v);
                        }
                        sample_graph(g, m, v, draw.prompt.as_ref())
                    })
                    .collect()
            }
            PromptSource::Estimated(est) => {
                // one attention call over the whole batch, block-diagonal
                // between each instance's candidate arguments and its chain
                let mut query_ids = Vec::new();
                let mut key_ids = Vec::new();
                let mut blocks = Vec::with_capacity(batch.len());
                for p in batch {
                    let (q0, k0) = (query_ids.len(), key_ids.len());
                    for s in &p.suffixes {
                        query_ids.extend_from_slice(&s[1..1 + PROMPT_SLOTS]);
                    }
                    key_ids.extend_from_slice(&p.prefix[1..]);
                    blocks.push(Block { queries: q0..query_ids.len(), keys: k0..key_ids.len() });
                }
                let queries = self.backbone.token_rows(g, &query_ids);
                let keys = self.backbone.token_rows(g, &key_ids);
                let mean = est_forward(g, &est.mean, queries, keys, &blocks);
                let log_var = est_forward(g, &est.variance, queries, keys, &blocks);
                let var = g.exp(log_var);
                batch
                    .iter()
                    .zip(draws)
                    .zip(&blocks)
                    .map(|((_, draw), b)| {
                        let m = g.slice_rows(mean, b.queries.start, b.queries.len());
                        let mut v = g.slice_rows(var, b.queries.start, b.queries.len());
                        if zero_variance {
                            v = floor(g, v);
                        }
                        sample_graph(g, m, v, draw.prompt.as_ref())
                    })
                    .collect()
            }
        }
    }

    /// Aggregated label Gaussian `(mean, variance)`, each `1 x |V|`.
    pub fn label_gaussian_graph<F: Real>(&self, g: &mut Graph<'_, F>) -> Option<(Var, Var)> {
        match &self.label {
            LabelSource::OneHot(_) => None,
            LabelSource::Gaussian(vp) => {
                let tokens = vp.tokens_graph(g);
                let (mean, var) = vp.gaussians_graph(g, &self.backbone, tokens);
                Some(aggregate_graph(g, mean, var, self.config.aggregation()))
            }
        }
    }

    pub fn forward<F: Real>(
        &self,
        g: &mut Graph<'_, F>,
        batch: &[&Prepared],
        draws: &[Draw<F>],
        options: ForwardOptions<'_>,
    ) -> Forward {
        assert_eq!(batch.len(), draws.len(), "one draw per instance");
        let prompts = self.prompt_rows(g, batch, draws, options.zero_variance);
        let mut parts = Vec::new();
        let mut positions = Vec::new();
        let mut blocks = Vec::new();
        let mut mask_rows = Vec::new();
        let mut row = 0;
        for (p, &prompt) in batch.iter().zip(&prompts) {
            let len = p.sequence_len();
            let prefix = self.backbone.token_rows(g, &p.prefix);
            for (j, suffix) in p.suffixes.iter().enumerate() {
                parts.push(prefix);
                parts.push(g.slice_rows(prompt, j * PROMPT_SLOTS, PROMPT_SLOTS));
                parts.push(self.backbone.token_rows(g, suffix));
                positions.extend(0..len);
                blocks.push(Block::square(row..row + len));
                mask_rows.push(row + p.mask_position());
                row += len;
            }
        }
        let input = g.concat_rows(&parts);
        let hidden = self.backbone.encode_graph(g, input, &positions, &blocks, options.dropout);
        let at_mask = g.gather(hidden, &mask_rows);
        let logits = self.backbone.head_graph(g, at_mask);
        let mut mask_logits = Vec::with_capacity(batch.len());
        let mut start = 0;
        for p in batch {
            mask_logits.push(g.slice_rows(logits, start, p.candidate_count()));
            start += p.candidate_count();
        }
        let labels = match (&self.label, self.label_gaussian_graph(g)) {
            (LabelSource::OneHot(id), _) => vec![LabelOut::OneHot(*id); batch.len()],
            (_, Some((mean, var))) => {
                let var = if options.zero_variance {
                    g.constant(Array2::from_elem((1, self.backbone.vocab_size), F::lit(VARIANCE_FLOOR)))
                } else {
                    var
                };
                draws.iter().map(|d| LabelOut::Logits(sample_graph(g, mean, var, d.label.as_ref()))).collect()
            }
            (LabelSource::Gaussian(_), None) => unreachable!("gaussian label source always yields a Gaussian"),
        };
        Forward { mask_logits, labels }
    }

    fn label_row<F: Real>(&self, g: &mut Graph<'_, F>, label: LabelOut) -> Var {
        match label {
            LabelOut::Logits(v) => g.softmax_rows(v),
            LabelOut::OneHot(id) => {
                let mut row = Array2::zeros((1, self.backbone.vocab_size));
                row[[0, id]] = F::one();
                g.constant(row)
            }
        }
    }

    /// Summed per-instance loss of a batch plus each instance's scores.
    pub fn loss<F: Real>(&self, g: &mut Graph<'_, F>, batch: &[&Prepared], forward: &Forward) -> (Var, Vec<Var>) {
        let mut total = None;
        let mut scores = Vec::with_capacity(batch.len());
        for ((p, &logits), &label) in batch.iter().zip(&forward.mask_logits).zip(&forward.labels) {
            let cand = g.softmax_rows(logits);
            let pv = self.label_row(g, label);
            let s = score_graph(g, cand, pv, self.config.sign);
            let l = loss_graph(g, s, p.gold);
            total = Some(match total {
                None => l,
                Some(t) => g.add(t, l),
            });
            scores.push(s);
        }
        (total.expect("non-empty batch"), scores)
    }

    /// Scores from `samples` forward passes whose `[MASK]` logits and label
    /// representations are mean-pooled before their softmaxes. Zero samples
    /// use every Gaussian's mean.
    pub fn pooled_scores<F: Real>(
        &self,
        store: &ParamStore<F>,
        batch: &[&Prepared],
        draws: impl Fn(usize, usize) -> Draw<F>,
        samples: usize,
        zero_variance: bool,
    ) -> Vec<PooledOutput> {
        let passes = samples.max(1);
        let v = self.backbone.vocab_size;
        let mut logit_acc: Vec<Array2<f64>> = batch.iter().map(|p| Array2::zeros((p.candidate_count(), v))).collect();
        let mut label_acc: Vec<Array2<f64>> = batch.iter().map(|_| Array2::zeros((1, v))).collect();
        for s in 0..passes {
            let d: Vec<Draw<F>> =
                (0..batch.len()).map(|i| if samples == 0 { Draw::default() } else { draws(i, s) }).collect();
            let mut g = Graph::new(store);
            let fwd = self.forward(&mut g, batch, &d, ForwardOptions { zero_variance, dropout: None });
            for i in 0..batch.len() {
                logit_acc[i].zip_mut_with(&g.value(fwd.mask_logits[i]), |a, &b| *a += b.f64());
                if let LabelOut::Logits(l) = fwd.labels[i] {
                    label_acc[i].zip_mut_with(&g.value(l), |a, &b| *a += b.f64());
                }
            }
        }
        let n = passes as f64;
        batch
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let distributions: Vec<CandidateDistribution> = logit_acc[i]
                    .axis_iter(Axis(0))
                    .map(|r| CandidateDistribution { probabilities: softmax(&r.mapv(|x| x / n).to_vec()) })
                    .collect();
                let label = match &self.label {
                    LabelSource::OneHot(id) => {
                        let mut row = vec![0.0; v];
                        row[*id] = 1.0;
                        row
                    }
                    LabelSource::Gaussian(_) => softmax(&label_acc[i].row(0).mapv(|x| x / n).to_vec()),
                };
                let scores = score_candidates(&distributions, &label, self.config.sign);
                let loss = instance_loss(&scores, p.gold).expect("gold validated at preparation");
                PooledOutput { distributions, label, scores, loss }
            })
            .collect()
    }

    /// `[MASK]` distribution of candidate `j` under explicit draws.
    pub fn candidate_distribution<F: Real>(
        &self,
        store: &ParamStore<F>,
        prepared: &Prepared,
        j: usize,
        draw: &Draw<F>,
    ) -> CandidateDistribution {
        let mut g = Graph::new(store);
        let fwd = self.forward(&mut g, &[prepared], std::slice::from_ref(draw), ForwardOptions::default());
        let probs = g.softmax_rows(fwd.mask_logits[0]);
        CandidateDistribution { probabilities: g.value(probs).row(j).iter().map(|x| x.f64()).collect() }
    }
}

fn est_forward<F: Real>(g: &mut Graph<'_, F>, map: &crate::prompt::AttentionMap, queries: Var, keys: Var, blocks: &[Block]) -> Var {
    let q = map.query.forward(g, queries);
    let k = map.key.forward(g, keys);
    let v = map.value.forward(g, keys);
    let a = g.attention(q, k, v, 1, blocks);
    map.output.forward(g, a)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PooledOutput {
    pub distributions: Vec<CandidateDistribution>,
    pub label: Vec<f64>,
    pub scores: ScoreVector,
    pub loss: f64,
}
