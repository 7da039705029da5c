use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::{matmul, Real, Tensor, View};
use super::NnError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    None,
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    pub fn apply<T: Real>(self, x: T) -> T {
        match self {
            Activation::None => x,
            Activation::Relu => x.max(T::zero()),
            Activation::Tanh => x.tanh(),
        }
    }

    /// d(activation)/d(pre) given both the pre- and post-activation value.
    #[inline]
    fn derivative<T: Real>(self, pre: T, post: T) -> T {
        match self {
            Activation::None => T::one(),
            Activation::Relu => {
                if pre > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Tanh => T::one() - post * post,
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            Activation::None => 0,
            Activation::Relu => 1,
            Activation::Tanh => 2,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Activation::None),
            1 => Some(Activation::Relu),
            2 => Some(Activation::Tanh),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
struct DenseCache<T> {
    input: Vec<T>,
    pre: Vec<T>,
    post: Vec<T>,
    input_shape: Vec<usize>,
}

/// Fully connected layer `activation(W x + b)` over the trailing dimension.
#[derive(Debug, Clone)]
pub struct Dense<T: Real = f32> {
    label: String,
    in_features: usize,
    out_features: usize,
    weights: Tensor<T>,
    bias: Tensor<T>,
    activation: Activation,
    cache: Option<DenseCache<T>>,
}

/// Gradients of a dense layer for one backward pass.
#[derive(Debug, Clone)]
pub struct DenseGrads<T: Real = f32> {
    pub input: Tensor<T>,
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Real> Dense<T> {
    /// Uniform init in `[-sqrt(1/in), sqrt(1/in)]` for weights and bias.
    pub fn new(
        label: impl Into<String>,
        in_features: usize,
        out_features: usize,
        activation: Activation,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = (1.0 / in_features as f64).sqrt();
        let mut draw = |n: usize| -> Vec<T> {
            (0..n).map(|_| T::of(rng.random_range(-bound..=bound))).collect()
        };
        let weights = draw(in_features * out_features);
        let bias = draw(out_features);
        Dense {
            label: label.into(),
            in_features,
            out_features,
            weights: Tensor::new(vec![out_features, in_features], weights).expect("sized"),
            bias: Tensor::vector(bias),
            activation,
            cache: None,
        }
    }

    pub fn from_parts(
        label: impl Into<String>,
        weights: Tensor<T>,
        bias: Tensor<T>,
        activation: Activation,
    ) -> Result<Self, NnError> {
        let label = label.into();
        let (out_features, in_features) = match weights.shape() {
            [o, i] => (*o, *i),
            s => return Err(NnError::Shape(format!("{label}: weights must be 2-D, got {s:?}"))),
        };
        if bias.len() != out_features {
            return Err(NnError::Shape(format!(
                "{label}: bias has {} values for {} outputs",
                bias.len(),
                out_features
            )));
        }
        let bias = bias.reshape(vec![out_features])?;
        Ok(Dense { label, in_features, out_features, weights, bias, activation, cache: None })
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn in_features(&self) -> usize {
        self.in_features
    }

    pub fn out_features(&self) -> usize {
        self.out_features
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn weights(&self) -> &Tensor<T> {
        &self.weights
    }

    pub fn bias(&self) -> &Tensor<T> {
        &self.bias
    }

    pub fn weights_mut(&mut self) -> &mut Tensor<T> {
        &mut self.weights
    }

    pub fn bias_mut(&mut self) -> &mut Tensor<T> {
        &mut self.bias
    }

    pub fn parameter_count(&self) -> usize {
        self.in_features * self.out_features + self.out_features
    }

    /// Mutable weights and bias at once.
    pub fn params_mut(&mut self) -> (&mut [T], &mut [T]) {
        (self.weights.data_mut(), self.bias.data_mut())
    }

    fn check_input(&self, input: &Tensor<T>) -> Result<(), NnError> {
        if input.trailing() != self.in_features {
            return Err(NnError::Dimension {
                layer: self.label.clone(),
                expected: self.in_features,
                got: input.trailing(),
            });
        }
        Ok(())
    }

    fn compute(&self, input: &Tensor<T>) -> (Vec<T>, Vec<T>, Vec<usize>) {
        let rows = input.rows();
        let mut pre = Vec::with_capacity(rows * self.out_features);
        for _ in 0..rows {
            pre.extend_from_slice(self.bias.data());
        }
        matmul(
            View::row_major(input.data(), rows, self.in_features),
            View::transposed(self.weights.data(), self.out_features, self.in_features),
            T::one(),
            &mut pre,
        );
        let post = pre.iter().map(|&v| self.activation.apply(v)).collect();
        let mut shape = input.shape().to_vec();
        *shape.last_mut().expect("non-empty shape") = self.out_features;
        (pre, post, shape)
    }

    /// Forward pass that keeps the activations needed by [`Dense::backward`].
    pub fn forward(&mut self, input: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        self.check_input(input)?;
        let (pre, post, shape) = self.compute(input);
        let out = Tensor::new(shape, post.clone())?;
        self.cache = Some(DenseCache {
            input: input.data().to_vec(),
            pre,
            post,
            input_shape: input.shape().to_vec(),
        });
        Ok(out)
    }

    /// Forward pass without caching; safe to call on shared parameters.
    pub fn infer(&self, input: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        self.check_input(input)?;
        let (_, post, shape) = self.compute(input);
        Tensor::new(shape, post)
    }

    pub fn backward(&self, upstream: &Tensor<T>) -> Result<DenseGrads<T>, NnError> {
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| NnError::MissingCache(self.label.clone()))?;
        if upstream.len() != cache.pre.len() || upstream.trailing() != self.out_features {
            return Err(NnError::Dimension {
                layer: self.label.clone(),
                expected: cache.pre.len(),
                got: upstream.len(),
            });
        }
        let rows = cache.pre.len() / self.out_features;
        let delta: Vec<T> = upstream
            .data()
            .iter()
            .zip(cache.pre.iter().zip(&cache.post))
            .map(|(&g, (&pre, &post))| g * self.activation.derivative(pre, post))
            .collect();

        let mut bias_grad = vec![T::zero(); self.out_features];
        for row in delta.chunks_exact(self.out_features) {
            for (b, &d) in bias_grad.iter_mut().zip(row) {
                *b += d;
            }
        }
        let mut weight_grad = vec![T::zero(); self.out_features * self.in_features];
        matmul(
            View::transposed(&delta, rows, self.out_features),
            View::row_major(&cache.input, rows, self.in_features),
            T::zero(),
            &mut weight_grad,
        );
        let mut input_grad = vec![T::zero(); rows * self.in_features];
        matmul(
            View::row_major(&delta, rows, self.out_features),
            View::row_major(self.weights.data(), self.out_features, self.in_features),
            T::zero(),
            &mut input_grad,
        );
        Ok(DenseGrads {
            input: Tensor::new(cache.input_shape.clone(), input_grad)?,
            weights: Tensor::new(vec![self.out_features, self.in_features], weight_grad)?,
            bias: Tensor::vector(bias_grad),
        })
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }

    pub fn cast<U: Real>(&self) -> Dense<U> {
        Dense {
            label: self.label.clone(),
            in_features: self.in_features,
            out_features: self.out_features,
            weights: self.weights.cast(),
            bias: self.bias.cast(),
            activation: self.activation,
            cache: None,
        }
    }
}

#[derive(Debug, Clone)]
struct NormCache<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
    shape: Vec<usize>,
}

/// Mean/variance normalization over the trailing dimension.
///
/// With `affine` the output is `gain * xhat + offset` (a layer norm); without
/// it the layer is parameter-free.
#[derive(Debug, Clone)]
pub struct LayerNorm<T: Real = f32> {
    label: String,
    size: usize,
    gain: Tensor<T>,
    offset: Tensor<T>,
    epsilon: T,
    affine: bool,
    cache: Option<NormCache<T>>,
}

#[derive(Debug, Clone)]
pub struct NormGrads<T: Real = f32> {
    pub input: Tensor<T>,
    /// Empty for parameter-free normalization.
    pub gain: Tensor<T>,
    pub offset: Tensor<T>,
}

impl<T: Real> LayerNorm<T> {
    pub fn new(label: impl Into<String>, size: usize, epsilon: f64) -> Self {
        LayerNorm {
            label: label.into(),
            size,
            gain: Tensor::vector(vec![T::one(); size]),
            offset: Tensor::vector(vec![T::zero(); size]),
            epsilon: T::of(epsilon),
            affine: true,
            cache: None,
        }
    }

    pub fn parameter_free(label: impl Into<String>, size: usize, epsilon: f64) -> Self {
        LayerNorm {
            label: label.into(),
            size,
            gain: Tensor::vector(Vec::new()),
            offset: Tensor::vector(Vec::new()),
            epsilon: T::of(epsilon),
            affine: false,
            cache: None,
        }
    }

    pub fn from_parts(
        label: impl Into<String>,
        gain: Tensor<T>,
        offset: Tensor<T>,
        epsilon: T,
    ) -> Result<Self, NnError> {
        let label = label.into();
        if gain.len() != offset.len() {
            return Err(NnError::Shape(format!("{label}: gain/offset length mismatch")));
        }
        Ok(LayerNorm {
            label,
            size: gain.len(),
            gain,
            offset,
            epsilon,
            affine: true,
            cache: None,
        })
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn epsilon(&self) -> T {
        self.epsilon
    }

    pub fn is_affine(&self) -> bool {
        self.affine
    }

    pub fn gain(&self) -> &Tensor<T> {
        &self.gain
    }

    pub fn offset(&self) -> &Tensor<T> {
        &self.offset
    }

    pub fn gain_mut(&mut self) -> &mut Tensor<T> {
        &mut self.gain
    }

    pub fn offset_mut(&mut self) -> &mut Tensor<T> {
        &mut self.offset
    }

    /// Mutable gain and offset at once.
    pub fn params_mut(&mut self) -> (&mut [T], &mut [T]) {
        (self.gain.data_mut(), self.offset.data_mut())
    }

    pub fn parameter_count(&self) -> usize {
        if self.affine {
            2 * self.size
        } else {
            0
        }
    }

    fn compute(&self, input: &Tensor<T>) -> Result<(Vec<T>, Vec<T>, Vec<T>), NnError> {
        if input.trailing() != self.size {
            return Err(NnError::Dimension {
                layer: self.label.clone(),
                expected: self.size,
                got: input.trailing(),
            });
        }
        let n = T::of(self.size as f64);
        let mut xhat = Vec::with_capacity(input.len());
        let mut inv_std = Vec::with_capacity(input.rows());
        for row in input.data().chunks_exact(self.size) {
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let inv = T::one() / (var + self.epsilon).sqrt();
            inv_std.push(inv);
            xhat.extend(row.iter().map(|&v| (v - mean) * inv));
        }
        let out = if self.affine {
            xhat.chunks_exact(self.size)
                .flat_map(|row| {
                    row.iter()
                        .zip(self.gain.data().iter().zip(self.offset.data()))
                        .map(|(&x, (&g, &o))| g * x + o)
                })
                .collect()
        } else {
            xhat.clone()
        };
        Ok((xhat, inv_std, out))
    }

    pub fn forward(&mut self, input: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        let (xhat, inv_std, out) = self.compute(input)?;
        self.cache = Some(NormCache { xhat, inv_std, shape: input.shape().to_vec() });
        Tensor::new(input.shape().to_vec(), out)
    }

    pub fn infer(&self, input: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        let (_, _, out) = self.compute(input)?;
        Tensor::new(input.shape().to_vec(), out)
    }

    pub fn backward(&self, upstream: &Tensor<T>) -> Result<NormGrads<T>, NnError> {
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| NnError::MissingCache(self.label.clone()))?;
        if upstream.len() != cache.xhat.len() {
            return Err(NnError::Dimension {
                layer: self.label.clone(),
                expected: cache.xhat.len(),
                got: upstream.len(),
            });
        }
        let size = self.size;
        let n = T::of(size as f64);
        let mut gain_grad = vec![T::zero(); if self.affine { size } else { 0 }];
        let mut offset_grad = gain_grad.clone();
        let mut input_grad = Vec::with_capacity(upstream.len());
        let mut dxhat = vec![T::zero(); size];
        for ((g_row, x_row), &inv) in upstream
            .data()
            .chunks_exact(size)
            .zip(cache.xhat.chunks_exact(size))
            .zip(&cache.inv_std)
        {
            if self.affine {
                for j in 0..size {
                    gain_grad[j] += g_row[j] * x_row[j];
                    offset_grad[j] += g_row[j];
                    dxhat[j] = g_row[j] * self.gain.data()[j];
                }
            } else {
                dxhat.copy_from_slice(g_row);
            }
            let sum_d = dxhat.iter().copied().sum::<T>();
            let sum_dx = dxhat.iter().zip(x_row).map(|(&d, &x)| d * x).sum::<T>();
            input_grad.extend(
                dxhat
                    .iter()
                    .zip(x_row)
                    .map(|(&d, &x)| inv / n * (n * d - sum_d - x * sum_dx)),
            );
        }
        Ok(NormGrads {
            input: Tensor::new(cache.shape.clone(), input_grad)?,
            gain: Tensor::vector(gain_grad),
            offset: Tensor::vector(offset_grad),
        })
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }

    pub fn cast<U: Real>(&self) -> LayerNorm<U> {
        LayerNorm {
            label: self.label.clone(),
            size: self.size,
            gain: self.gain.cast(),
            offset: self.offset.cast(),
            epsilon: U::of(self.epsilon.as_f64()),
            affine: self.affine,
            cache: None,
        }
    }
}
