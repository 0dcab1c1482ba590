//! Diagonal Gaussian embeddings and reparameterized sampling.

use ndarray::{Array1, Array2};

use crate::tensor::{Graph, Real, Var};

/// Variances are clamped to at least this value before taking square roots.
pub const VARIANCE_FLOOR: f64 = f64::EPSILON;

/// A diagonal Gaussian `N(mean, diag(variance))`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianEmbedding<F> {
    pub mean: Array1<F>,
    pub variance: Array1<F>,
}

impl<F: Real> GaussianEmbedding<F> {
    pub fn new(mean: Array1<F>, variance: Array1<F>) -> Self {
        assert_eq!(mean.len(), variance.len(), "mean and variance widths differ");
        Self { mean, variance }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Elementwise standard deviation, `sqrt(max(variance, floor))`.
    pub fn std_dev(&self) -> Array1<F> {
        let floor = F::lit(VARIANCE_FLOOR);
        self.variance.mapv(|v| v.max(floor).sqrt())
    }

    /// Reparameterized draw `mean + noise * std_dev`.
    pub fn sample(&self, noise: &[F]) -> Array1<F> {
        assert_eq!(noise.len(), self.dim(), "noise width must match the embedding");
        let std = self.std_dev();
        Array1::from_shape_fn(self.dim(), |i| self.mean[i] + noise[i] * std[i])
    }
}

/// Reparameterized draw `mean + noise * sqrt(max(variance, floor))` inside a
/// graph. Without noise the mean itself is returned.
pub fn sample_graph<F: Real>(g: &mut Graph<'_, F>, mean: Var, variance: Var, noise: Option<&Array2<F>>) -> Var {
    match noise {
        None => mean,
        Some(eps) => {
            debug_assert_eq!(eps.dim(), g.shape(mean));
            let std = g.sqrt_floor(variance, VARIANCE_FLOOR);
            let eps = g.constant(eps.clone());
            let scaled = g.mul(eps, std);
            g.add(mean, scaled)
        }
    }
}
