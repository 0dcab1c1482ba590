//! Gaussian label tokens lifted into vocabulary space and their
//! uncertainty-weighted aggregation.

use ndarray::{Array2, ArrayView1, Axis};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{lookup, random_matrix, Backbone, Linear, INIT_STD};
use crate::error::{Error, Result};
use crate::gaussian::{GaussianEmbedding, VARIANCE_FLOOR};
use crate::tensor::{Family, Graph, ParamId, ParamStore, Real, Var};

/// A Gaussian over vocabulary logits, width `|V|`.
pub type LabelGaussian<F> = GaussianEmbedding<F>;

/// Which spread statistic drives the aggregation weights.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaReading {
    #[default]
    StdDev,
    Variance,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Aggregation {
    /// Weights `exp(-lambda * sigma)` per component.
    UncertaintyAware { lambda: f64, reading: SigmaReading },
    /// Unweighted sums of means and variances.
    PlainSum,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VerbalizerParams {
    /// `l x d`, one row per label token.
    pub label_tokens: ParamId,
    pub mean_proj: Linear,
    pub variance_proj: Linear,
}

impl VerbalizerParams {
    pub fn register<F: Real>(store: &mut ParamStore<F>, rng: &mut ChaCha8Rng, label_count: usize, d: usize) -> Result<Self> {
        if label_count == 0 {
            return Err(Error::Config("at least one label token is required".into()));
        }
        let fam = Family::VerbalizerProjection;
        Ok(Self {
            label_tokens: store.add(
                "verbalizer.label_tokens",
                Family::LabelTokens,
                random_matrix(rng, label_count, d, INIT_STD),
            ),
            mean_proj: Linear::register(store, rng, "verbalizer.mean_proj", fam, d, d),
            variance_proj: Linear::register(store, rng, "verbalizer.variance_proj", fam, d, d),
        })
    }

    pub fn resolve<F: Real>(store: &ParamStore<F>) -> Result<Self> {
        Ok(Self {
            label_tokens: lookup(store, "verbalizer.label_tokens")?,
            mean_proj: Linear::resolve(store, "verbalizer.mean_proj")?,
            variance_proj: Linear::resolve(store, "verbalizer.variance_proj")?,
        })
    }

    pub fn label_count<F: Real>(&self, store: &ParamStore<F>) -> usize {
        store.value(self.label_tokens).nrows()
    }

    /// Per-token `(mean, variance)` for the rows of `tokens` (`l x d`), each
    /// `l x |V|`.
    pub fn gaussians_graph<F: Real>(&self, g: &mut Graph<'_, F>, backbone: &Backbone, tokens: Var) -> (Var, Var) {
        let h = self.mean_proj.forward(g, tokens);
        let h = g.relu(h);
        let mean = backbone.head_graph(g, h);
        let s = self.variance_proj.forward(g, tokens);
        let s = g.relu(s);
        let s = backbone.head_graph(g, s);
        (mean, g.exp(s))
    }

    pub fn tokens_graph<F: Real>(&self, g: &mut Graph<'_, F>) -> Var {
        g.param(self.label_tokens)
    }
}

/// Collapses `l x |V|` means and variances into one `1 x |V|` Gaussian.
/// Rows are summed in ascending token order.
pub fn aggregate_graph<F: Real>(g: &mut Graph<'_, F>, mean: Var, variance: Var, aggregation: Aggregation) -> (Var, Var) {
    match aggregation {
        Aggregation::PlainSum => (g.sum_rows(mean), g.sum_rows(variance)),
        Aggregation::UncertaintyAware { lambda, reading } => {
            let sigma = match reading {
                SigmaReading::StdDev => g.sqrt_floor(variance, VARIANCE_FLOOR),
                SigmaReading::Variance => variance,
            };
            let neg = g.scale(sigma, -lambda);
            let kappa = g.exp(neg);
            let weighted = g.mul(kappa, mean);
            let kk = g.mul(kappa, kappa);
            let spread = g.mul(kk, variance);
            (g.sum_rows(weighted), g.sum_rows(spread))
        }
    }
}

/// `softmax(mean + noise * sqrt(variance))` over a `1 x |V|` Gaussian; the
/// mean alone without noise.
pub fn label_distribution_graph<F: Real>(g: &mut Graph<'_, F>, mean: Var, variance: Var, noise: Option<&Array2<F>>) -> Var {
    let v = crate::gaussian::sample_graph(g, mean, variance, noise);
    g.softmax_rows(v)
}

fn rows_to_gaussians<F: Real>(g: &Graph<'_, F>, mean: Var, variance: Var) -> Vec<LabelGaussian<F>> {
    g.value(mean)
        .axis_iter(Axis(0))
        .zip(g.value(variance).axis_iter(Axis(0)))
        .map(|(m, v)| GaussianEmbedding::new(m.to_owned(), v.to_owned()))
        .collect()
}

/// Label Gaussian of a single label vector `v` (width `d`).
pub fn estimate_label_gaussian<F: Real>(
    store: &ParamStore<F>,
    backbone: &Backbone,
    params: &VerbalizerParams,
    v: ArrayView1<'_, F>,
) -> LabelGaussian<F> {
    let mut g = Graph::new(store);
    let x = g.constant(v.to_owned().insert_axis(Axis(0)));
    let (mean, var) = params.gaussians_graph(&mut g, backbone, x);
    rows_to_gaussians(&g, mean, var).remove(0)
}

fn stack<F: Real>(gaussians: &[LabelGaussian<F>]) -> (Array2<F>, Array2<F>) {
    assert!(!gaussians.is_empty(), "aggregation needs at least one label Gaussian");
    let width = gaussians[0].dim();
    let mut mean = Array2::zeros((gaussians.len(), width));
    let mut var = Array2::zeros((gaussians.len(), width));
    for (i, gs) in gaussians.iter().enumerate() {
        mean.row_mut(i).assign(&gs.mean);
        var.row_mut(i).assign(&gs.variance);
    }
    (mean, var)
}

pub fn aggregate<F: Real>(gaussians: &[LabelGaussian<F>], aggregation: Aggregation) -> LabelGaussian<F> {
    let (mean, var) = stack(gaussians);
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let (m, v) = (g.constant(mean), g.constant(var));
    let (m, v) = aggregate_graph(&mut g, m, v, aggregation);
    rows_to_gaussians(&g, m, v).remove(0)
}

/// Label distribution `p_v` from an aggregated Gaussian and explicit noise.
pub fn sample_label<F: Real>(gaussian: &LabelGaussian<F>, noise: &[F]) -> Vec<F> {
    assert_eq!(noise.len(), gaussian.dim(), "noise width must match the vocabulary");
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let m = g.constant(gaussian.mean.clone().insert_axis(Axis(0)));
    let v = g.constant(gaussian.variance.clone().insert_axis(Axis(0)));
    let eps = Array2::from_shape_vec((1, noise.len()), noise.to_vec()).expect("row shape");
    let p = label_distribution_graph(&mut g, m, v, Some(&eps));
    g.value(p).iter().copied().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::noise::NoiseSource;
    use ndarray::{array, Array1};
    use proptest::prelude::*;

    const AWARE: Aggregation = Aggregation::UncertaintyAware { lambda: 1.0, reading: SigmaReading::StdDev };

    fn setup(vocab: usize, d: usize, l: usize) -> (ParamStore<f64>, Backbone, VerbalizerParams) {
        let cfg = BackboneConfig { hidden_size: d, layer_count: 1, head_count: 2, feed_forward_size: 2 * d, ..Default::default() };
        let mut store = ParamStore::new();
        let mut rng = NoiseSource::new(2).rng(&[0]);
        let bb = Backbone::register(&mut store, &cfg, vocab, &mut rng).unwrap();
        let vp = VerbalizerParams::register(&mut store, &mut rng, l, d).unwrap();
        (store, bb, vp)
    }

    #[test]
    fn zero_vector_with_zero_projections() {
        let (mut store, bb, vp) = setup(12, 8, 3);
        for id in [vp.mean_proj.weight, vp.mean_proj.bias, vp.variance_proj.weight, vp.variance_proj.bias] {
            store.value_mut(id).fill(0.0);
        }
        let g = estimate_label_gaussian(&store, &bb, &vp, Array1::zeros(8).view());
        assert_eq!(g.dim(), 12);
        assert!(g.mean.iter().all(|&x| x == 0.0));
        assert!(g.variance.iter().all(|&x| x == 1.0));
    }

    #[test]
    fn random_label_vectors_have_positive_variance() {
        let (store, bb, vp) = setup(15, 8, 3);
        let v = Array1::from(NoiseSource::new(3).normals(&[1], 8));
        let g = estimate_label_gaussian(&store, &bb, &vp, v.view());
        assert_eq!(g.variance.len(), 15);
        assert!(g.variance.iter().all(|&x| x > 0.0));
    }

    #[test]
    fn hand_evaluated_half_weight_case() {
        let a = GaussianEmbedding::new(array![1.0], array![0.0]);
        let b = GaussianEmbedding::new(array![1.0], array![0.6931f64 * 0.6931]);
        let out = aggregate(&[a, b], AWARE);
        assert!((out.mean[0] - 1.5).abs() < 1e-4, "{}", out.mean[0]);
        assert!((out.variance[0] - 0.1201).abs() < 1e-4, "{}", out.variance[0]);
    }

    #[test]
    fn single_low_variance_token_is_near_identity() {
        let a = GaussianEmbedding::new(array![0.4f64, -2.0], array![0.0, 1e-20]);
        let out = aggregate(std::slice::from_ref(&a), AWARE);
        for i in 0..2 {
            assert!((out.mean[i] - a.mean[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn identical_spreads_share_one_weight() {
        let gs: Vec<_> = (0..3)
            .map(|i| GaussianEmbedding::new(array![i as f64, -1.0 + i as f64], array![0.25, 4.0]))
            .collect();
        let out = aggregate(&gs, AWARE);
        let kappa = [(-0.5f64).exp(), (-2.0f64).exp()];
        assert!((out.mean[0] - kappa[0] * 3.0).abs() < 1e-12);
        assert!((out.mean[1] - kappa[1] * 0.0).abs() < 1e-12);
    }

    #[test]
    fn plain_sum_ignores_spread() {
        let gs = [
            GaussianEmbedding::new(array![1.0, 2.0], array![0.5, 3.0]),
            GaussianEmbedding::new(array![-4.0, 0.5], array![1.0, 0.1]),
        ];
        let out = aggregate(&gs, Aggregation::PlainSum);
        assert_eq!(out.mean, array![-3.0, 2.5]);
        assert_eq!(out.variance, array![1.5, 3.1]);
    }

    #[test]
    fn variance_reading_uses_raw_variance() {
        let gs = [GaussianEmbedding::new(array![2.0], array![4.0])];
        let out = aggregate(&gs, Aggregation::UncertaintyAware { lambda: 0.5, reading: SigmaReading::Variance });
        assert!((out.mean[0] - 2.0 * (-2.0f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn softmax_hand_case() {
        let g = GaussianEmbedding::new(array![2.0, 0.0, 0.0], array![0.0, 0.0, 0.0]);
        let p = sample_label(&g, &[0.3, -1.0, 2.0]);
        let z = 2f64.exp() + 2.0;
        let expected = [2f64.exp() / z, 1.0 / z, 1.0 / z];
        for (a, b) in p.iter().zip(expected) {
            assert!((a - b).abs() < 1e-6);
        }
        assert!((expected[0] - 0.7870).abs() < 1e-4 && (expected[1] - 0.1065).abs() < 1e-4);
    }

    #[test]
    fn zero_mean_zero_noise_is_uniform() {
        let g = GaussianEmbedding::<f64>::new(Array1::zeros(7), Array1::ones(7));
        let p = sample_label(&g, &[0.0; 7]);
        assert!(p.iter().all(|&x| (x - 1.0 / 7.0).abs() < 1e-15));
    }

    proptest! {
        #[test]
        fn kappa_in_unit_interval_and_decreasing(
            var in prop::collection::vec(0.0f64..50.0, 1..20),
            lambda in 0.01f64..5.0,
        ) {
            let n = var.len();
            let g = GaussianEmbedding::new(Array1::ones(n), Array1::from(var.clone()));
            let out = aggregate(std::slice::from_ref(&g), Aggregation::UncertaintyAware { lambda, reading: SigmaReading::StdDev });
            // with unit means the aggregated mean is kappa itself
            for i in 0..n {
                prop_assert!(out.mean[i] > 0.0 && out.mean[i] <= 1.0);
            }
            let mut wider = g.clone();
            wider.variance[0] += 1.0;
            let out2 = aggregate(&[wider], Aggregation::UncertaintyAware { lambda, reading: SigmaReading::StdDev });
            prop_assert!(out2.mean[0] < out.mean[0]);
        }

        #[test]
        fn label_distribution_is_shift_invariant(
            mean in prop::collection::vec(-5.0f64..5.0, 2..30),
            shift in -20.0f64..20.0,
        ) {
            let n = mean.len();
            let noise = NoiseSource::new(n as u64).normals(&[0], n);
            let var = Array1::from_elem(n, 0.3);
            let p = sample_label(&GaussianEmbedding::new(Array1::from(mean.clone()), var.clone()), &noise);
            let shifted = Array1::from(mean).mapv(|x| x + shift);
            let q = sample_label(&GaussianEmbedding::new(shifted, var), &noise);
            let sum: f64 = p.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-6);
            for (a, b) in p.iter().zip(&q) {
                prop_assert!(*a >= 0.0);
                prop_assert!((a - b).abs() < 1e-9);
            }
        }
    }
}
