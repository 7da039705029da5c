use rand::Rng;

use super::arch::LayerSpec;
use super::layers::{Activation, Dense, LayerNorm};
use super::tensor::{Real, Tensor};
use super::NnError;

#[derive(Debug, Clone)]
pub enum Layer<T: Real = f32> {
    Dense(Dense<T>),
    /// Affine layer norm or parameter-free normalization.
    Norm(LayerNorm<T>),
}

impl<T: Real> Layer<T> {
    fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        match self {
            Layer::Dense(l) => l.forward(x),
            Layer::Norm(l) => l.forward(x),
        }
    }

    fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        match self {
            Layer::Dense(l) => l.infer(x),
            Layer::Norm(l) => l.infer(x),
        }
    }

    pub fn parameter_count(&self) -> usize {
        match self {
            Layer::Dense(l) => l.parameter_count(),
            Layer::Norm(l) => l.parameter_count(),
        }
    }

    pub fn spec(&self) -> LayerSpec {
        match self {
            Layer::Dense(l) => LayerSpec::Dense {
                in_features: l.in_features() as u64,
                out_features: l.out_features() as u64,
                activation: l.activation(),
            },
            Layer::Norm(l) if l.is_affine() => LayerSpec::LayerNorm { size: l.size() as u64 },
            Layer::Norm(l) => LayerSpec::Normalize { size: l.size() as u64 },
        }
    }
}

/// A named parameter tensor borrowed mutably for an optimizer step.
pub struct ParamMut<'a, T> {
    pub name: String,
    pub values: &'a mut [T],
}

/// Sequential stack of dense and normalization layers.
#[derive(Debug, Clone)]
pub struct Mlp<T: Real = f32> {
    name: String,
    layers: Vec<Layer<T>>,
}

impl<T: Real> Mlp<T> {
    pub fn new(name: impl Into<String>) -> Self {
        Mlp { name: name.into(), layers: Vec::new() }
    }

    /// Builds a dense stack `sizes[0] -> sizes[1] -> ...`; hidden layers use
    /// `hidden`, the last layer uses `output`.
    pub fn dense_stack(
        name: impl Into<String>,
        sizes: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut impl Rng,
    ) -> Self {
        let mut net = Mlp::new(name);
        for (i, pair) in sizes.windows(2).enumerate() {
            let act = if i + 2 == sizes.len() { output } else { hidden };
            net = net.dense(pair[0], pair[1], act, rng);
        }
        net
    }

    fn next_label(&self) -> String {
        format!("{}.{}", self.name, self.layers.len())
    }

    pub fn dense(
        mut self,
        in_features: usize,
        out_features: usize,
        activation: Activation,
        rng: &mut impl Rng,
    ) -> Self {
        let label = self.next_label();
        self.layers
            .push(Layer::Dense(Dense::new(label, in_features, out_features, activation, rng)));
        self
    }

    pub fn layer_norm(mut self, size: usize, epsilon: f64) -> Self {
        let label = self.next_label();
        self.layers.push(Layer::Norm(LayerNorm::new(label, size, epsilon)));
        self
    }

    pub fn normalize(mut self, size: usize, epsilon: f64) -> Self {
        let label = self.next_label();
        self.layers.push(Layer::Norm(LayerNorm::parameter_free(label, size, epsilon)));
        self
    }

    pub fn push(&mut self, layer: Layer<T>) {
        self.layers.push(layer);
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<T>] {
        &mut self.layers
    }

    pub fn input_size(&self) -> Option<usize> {
        self.layers.first().map(|l| match l {
            Layer::Dense(d) => d.in_features(),
            Layer::Norm(n) => n.size(),
        })
    }

    pub fn output_size(&self) -> Option<usize> {
        self.layers.last().map(|l| match l {
            Layer::Dense(d) => d.out_features(),
            Layer::Norm(n) => n.size(),
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(Layer::parameter_count).sum()
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(Layer::spec).collect()
    }

    pub fn forward(&mut self, input: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        let mut x = input.clone();
        for layer in &mut self.layers {
            x = layer.forward(&x)?;
        }
        Ok(x)
    }

    pub fn infer(&self, input: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        let mut x = input.clone();
        for layer in &self.layers {
            x = layer.infer(&x)?;
        }
        Ok(x)
    }

    /// Back-propagates through the cached forward pass. Returns the input
    /// gradient and one gradient buffer per parameter tensor, in the order of
    /// [`Mlp::params_mut`].
    pub fn backward(&self, upstream: &Tensor<T>) -> Result<(Tensor<T>, Vec<Vec<T>>), NnError> {
        let mut grad = upstream.clone();
        let mut per_layer: Vec<Vec<Vec<T>>> = Vec::with_capacity(self.layers.len());
        for layer in self.layers.iter().rev() {
            match layer {
                Layer::Dense(l) => {
                    let g = l.backward(&grad)?;
                    per_layer.push(vec![g.weights.into_data(), g.bias.into_data()]);
                    grad = g.input;
                }
                Layer::Norm(l) => {
                    let g = l.backward(&grad)?;
                    if l.is_affine() {
                        per_layer.push(vec![g.gain.into_data(), g.offset.into_data()]);
                    } else {
                        per_layer.push(Vec::new());
                    }
                    grad = g.input;
                }
            }
        }
        let grads = per_layer.into_iter().rev().flatten().collect();
        Ok((grad, grads))
    }

    pub fn params_mut(&mut self) -> Vec<ParamMut<'_, T>> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::Dense(l) => {
                    let label = l.label().to_string();
                    let (w, b) = l.params_mut();
                    out.push(ParamMut { name: format!("{label}.weight"), values: w });
                    out.push(ParamMut { name: format!("{label}.bias"), values: b });
                }
                Layer::Norm(l) if l.is_affine() => {
                    let label = l.label().to_string();
                    let (g, o) = l.params_mut();
                    out.push(ParamMut { name: format!("{label}.gain"), values: g });
                    out.push(ParamMut { name: format!("{label}.offset"), values: o });
                }
                Layer::Norm(_) => {}
            }
        }
        out
    }

    /// Flat copy of every parameter, in [`Mlp::params_mut`] order.
    pub fn flat_params(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.parameter_count());
        for layer in &self.layers {
            match layer {
                Layer::Dense(l) => {
                    out.extend_from_slice(l.weights().data());
                    out.extend_from_slice(l.bias().data());
                }
                Layer::Norm(l) => {
                    out.extend_from_slice(l.gain().data());
                    out.extend_from_slice(l.offset().data());
                }
            }
        }
        out
    }

    pub fn clear_cache(&mut self) {
        for layer in &mut self.layers {
            match layer {
                Layer::Dense(l) => l.clear_cache(),
                Layer::Norm(l) => l.clear_cache(),
            }
        }
    }

    pub fn cast<U: Real>(&self) -> Mlp<U> {
        Mlp {
            name: self.name.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| match l {
                    Layer::Dense(d) => Layer::Dense(d.cast()),
                    Layer::Norm(n) => Layer::Norm(n.cast()),
                })
                .collect(),
        }
    }
}

/// Rescales all gradient buffers so their joint L2 norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_global_norm<T: Real>(grads: &mut [Vec<T>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .map(|g| {
            let v = g.as_f64();
            v * v
        })
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        let scale = T::of(max_norm / norm);
        grads.iter_mut().flatten().for_each(|g| *g *= scale);
    }
    norm
}

/// Adds `src` into `dst` element-wise, buffer by buffer.
pub fn accumulate<T: Real>(dst: &mut [Vec<T>], src: &[Vec<T>]) {
    for (d, s) in dst.iter_mut().zip(src) {
        for (a, &b) in d.iter_mut().zip(s) {
            *a += b;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn forward_is_bit_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut net =
            Mlp::<f32>::dense_stack("n", &[6, 5, 4], Activation::Tanh, Activation::None, &mut rng)
                .layer_norm(4, 1e-6);
        let x = Tensor::matrix(2, 6, (0..12).map(|v| v as f32 * 0.1 - 0.4).collect()).unwrap();
        let a = net.infer(&x).unwrap();
        let b = net.forward(&x).unwrap();
        let c = net.infer(&x).unwrap();
        assert_eq!(a.data(), b.data());
        assert_eq!(a.data(), c.data());
    }

    #[test]
    fn params_and_grads_line_up() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut net = Mlp::<f64>::new("n")
            .dense(3, 4, Activation::Relu, &mut rng)
            .normalize(4, 1e-6)
            .dense(4, 2, Activation::None, &mut rng)
            .layer_norm(2, 1e-6);
        let x = Tensor::vector(vec![0.1, 0.2, -0.3]);
        net.forward(&x).unwrap();
        let (_, grads) = net.backward(&Tensor::vector(vec![1.0, -1.0])).unwrap();
        let params = net.params_mut();
        assert_eq!(params.len(), grads.len());
        for (p, g) in params.iter().zip(&grads) {
            assert_eq!(p.values.len(), g.len(), "{}", p.name);
        }
        assert_eq!(params[0].name, "n.0.weight");
        assert_eq!(params.last().unwrap().name, "n.3.offset");
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut g = vec![vec![3.0f64, 0.0], vec![4.0]];
        let before = clip_global_norm(&mut g, 1.0);
        assert!((before - 5.0).abs() < 1e-12);
        let after: f64 = g.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
        assert!((after - 1.0).abs() < 1e-12);
    }
}
