use std::collections::BTreeMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

/// Parameter families, used for gradient verification reports and to route
/// parameters to their optimizer group.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Embeddings,
    Encoder,
    MlmHead,
    AttnMean,
    AttnVariance,
    VerbalizerProjection,
    LabelTokens,
    StaticPrompt,
    LearnablePrompt,
}

impl Family {
    pub const ALL: [Family; 9] = [
        Family::Embeddings,
        Family::Encoder,
        Family::MlmHead,
        Family::AttnMean,
        Family::AttnVariance,
        Family::VerbalizerProjection,
        Family::LabelTokens,
        Family::StaticPrompt,
        Family::LearnablePrompt,
    ];

    pub fn group(self) -> Group {
        match self {
            Family::Embeddings | Family::Encoder | Family::MlmHead => Group::Backbone,
            _ => Group::Head,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Family::Embeddings => "embeddings",
            Family::Encoder => "encoder",
            Family::MlmHead => "mlm_head",
            Family::AttnMean => "attn_mean",
            Family::AttnVariance => "attn_variance",
            Family::VerbalizerProjection => "verbalizer_projection",
            Family::LabelTokens => "label_tokens",
            Family::StaticPrompt => "static_prompt",
            Family::LearnablePrompt => "learnable_prompt",
        }
    }
}

/// Optimizer parameter groups: the pretrained backbone is fine-tuned at a lower
/// rate than the freshly initialized estimators.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Group {
    Backbone,
    Head,
}

#[derive(Clone, Debug)]
pub struct Param<F> {
    pub name: String,
    pub family: Family,
    pub value: Array2<F>,
}

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<F> {
    params: Vec<Param<F>>,
    index: BTreeMap<String, ParamId>,
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        Self { params: Vec::new(), index: BTreeMap::new() }
    }

    /// Registers a tensor. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, family: Family, value: Array2<F>) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter name {name}");
        let id = ParamId(self.params.len());
        self.index.insert(name.clone(), id);
        self.params.push(Param { name, family, value });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<F> {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Array2<F> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Array2<F> {
        &mut self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<F>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Param<F>)> {
        self.params.iter_mut().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn element_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.iter().all(|x| x.is_finite()))
    }

    /// Converts every tensor to another element type.
    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    family: p.family,
                    value: p.value.mapv(|x| G::lit(x.f64())),
                })
                .collect(),
            index: self.index.clone(),
        }
    }
}

/// Per-parameter gradient buffers, lazily allocated.
#[derive(Clone, Debug)]
pub struct Gradients<F> {
    grads: Vec<Option<Array2<F>>>,
}

impl<F: Real> Gradients<F> {
    pub fn new(param_count: usize) -> Self {
        Self { grads: vec![None; param_count] }
    }

    pub fn get(&self, id: ParamId) -> Option<&Array2<F>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn get_mut(&mut self, id: ParamId) -> Option<&mut Array2<F>> {
        self.grads.get_mut(id.0).and_then(|g| g.as_mut())
    }

    pub fn accumulate(&mut self, id: ParamId, grad: &Array2<F>) {
        match &mut self.grads[id.0] {
            Some(existing) => *existing += grad,
            slot @ None => *slot = Some(grad.clone()),
        }
    }

    pub(crate) fn accumulate_owned(&mut self, id: ParamId, grad: Array2<F>) {
        match &mut self.grads[id.0] {
            Some(existing) => *existing += &grad,
            slot @ None => *slot = Some(grad),
        }
    }

    /// Adds every buffer of `other` into `self`.
    pub fn merge(&mut self, other: Gradients<F>) {
        for (i, g) in other.grads.into_iter().enumerate() {
            if let Some(g) = g {
                self.accumulate_owned(ParamId(i), g);
            }
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Array2<F>)> {
        self.grads.iter().enumerate().filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }
}
