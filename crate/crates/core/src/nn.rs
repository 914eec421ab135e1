//! Dense feed-forward networks with analytic gradients.
//!
//! Hidden layers use a rectifier, the output is either the identity or
//! `tanh`. Everything is `f64` and evaluated batch-first (`rows = samples`).

use std::io::{Read, Write};

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

const FORMAT_NAME: &str = "hirl-mlp";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("architecture mismatch between networks")]
    ArchitectureMismatch,
    #[error("non-finite gradient rejected")]
    NonFinite,
    #[error("invalid parameter file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputActivation {
    Identity,
    Tanh,
}

/// One affine layer, `y = x · W + b` with `W` stored as `(inputs, outputs)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weights: Array2::zeros((inputs, outputs)),
            bias: Array1::zeros(outputs),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    sizes: Vec<usize>,
    layers: Vec<Dense>,
    output: OutputActivation,
}

/// Gradients share the parameter layout of the network they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Dense>,
}

impl Gradients {
    pub fn zeros_like(net: &Mlp) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| Dense::zeros(l.weights.nrows(), l.weights.ncols()))
                .collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| {
            l.weights.iter().all(|v| v.is_finite()) && l.bias.iter().all(|v| v.is_finite())
        })
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend(l.weights.iter().copied());
            out.extend(l.bias.iter().copied());
        }
        out
    }
}

/// Activations retained by a forward pass for the matching backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    // layer inputs, one per layer, followed by the network output
    values: Vec<Array2<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &Array2<f64> {
        self.values.last().expect("cache always holds the output")
    }
}

impl Mlp {
    /// Uniform fan-in initialization, `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], output: OutputActivation, rng: &mut R) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs at least input and output sizes");
        assert!(sizes.iter().all(|&s| s > 0), "layer sizes must be positive");
        let layers = sizes
            .windows(2)
            .map(|w| {
                let bound = 1.0 / (w[0] as f64).sqrt();
                Dense {
                    weights: Array2::from_shape_fn((w[0], w[1]), |_| rng.random_range(-bound..bound)),
                    bias: Array1::from_shape_fn(w[1], |_| rng.random_range(-bound..bound)),
                }
            })
            .collect();
        Self {
            sizes: sizes.to_vec(),
            layers,
            output,
        }
    }

    pub fn zeros(sizes: &[usize], output: OutputActivation) -> Self {
        assert!(sizes.len() >= 2);
        Self {
            sizes: sizes.to_vec(),
            layers: sizes.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect(),
            output,
        }
    }

    /// Builds a network from explicit layers. Shapes must chain.
    pub fn from_layers(layers: Vec<Dense>, output: OutputActivation) -> Result<Self, NnError> {
        if layers.is_empty() {
            return Err(NnError::Format("no layers".into()));
        }
        let mut sizes = vec![layers[0].weights.nrows()];
        for l in &layers {
            let last = *sizes.last().unwrap();
            if l.weights.nrows() != last {
                return Err(NnError::ShapeMismatch {
                    expected: last,
                    got: l.weights.nrows(),
                });
            }
            if l.bias.len() != l.weights.ncols() {
                return Err(NnError::ShapeMismatch {
                    expected: l.weights.ncols(),
                    got: l.bias.len(),
                });
            }
            sizes.push(l.weights.ncols());
        }
        Ok(Self {
            sizes,
            layers,
            output,
        })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_len(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_len(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn output_activation(&self) -> OutputActivation {
        self.output
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    fn same_architecture(&self, other: &Mlp) -> bool {
        self.sizes == other.sizes && self.output == other.output
    }

    fn check_input(&self, cols: usize) -> Result<(), NnError> {
        if cols != self.input_len() {
            return Err(NnError::ShapeMismatch {
                expected: self.input_len(),
                got: cols,
            });
        }
        Ok(())
    }

    /// Batched forward pass keeping every intermediate activation.
    pub fn forward_cached(&self, input: &Array2<f64>) -> Result<ForwardCache, NnError> {
        self.check_input(input.ncols())?;
        let mut values = Vec::with_capacity(self.layers.len() + 1);
        values.push(input.clone());
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = values[i].dot(&layer.weights);
            z += &layer.bias;
            if i < last {
                z.mapv_inplace(|v| v.max(0.0));
            } else if self.output == OutputActivation::Tanh {
                z.mapv_inplace(f64::tanh);
            }
            values.push(z);
        }
        Ok(ForwardCache { values })
    }

    /// Batched forward pass without retaining activations.
    pub fn predict(&self, input: &Array2<f64>) -> Result<Array2<f64>, NnError> {
        self.check_input(input.ncols())?;
        let last = self.layers.len() - 1;
        let mut x = input.dot(&self.layers[0].weights);
        x += &self.layers[0].bias;
        for (i, layer) in self.layers.iter().enumerate() {
            if i > 0 {
                x = x.dot(&layer.weights);
                x += &layer.bias;
            }
            if i < last {
                x.mapv_inplace(|v| v.max(0.0));
            } else if self.output == OutputActivation::Tanh {
                x.mapv_inplace(f64::tanh);
            }
        }
        Ok(x)
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>, NnError> {
        self.check_input(input.len())?;
        let x = Array2::from_shape_vec((1, input.len()), input.to_vec()).expect("row vector");
        Ok(self.predict(&x)?.into_raw_vec_and_offset().0)
    }

    /// Backpropagates `upstream = dLoss/dOutput` through a cached pass.
    ///
    /// Returns parameter gradients summed over the batch and the gradient
    /// with respect to the batch input.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        upstream: &Array2<f64>,
    ) -> Result<(Gradients, Array2<f64>), NnError> {
        let out = cache.output();
        if upstream.dim() != out.dim() {
            return Err(NnError::ShapeMismatch {
                expected: out.ncols(),
                got: upstream.ncols(),
            });
        }
        let mut delta = upstream.clone();
        if self.output == OutputActivation::Tanh {
            delta.zip_mut_with(out, |d, &y| *d *= 1.0 - y * y);
        }
        let mut grads: Vec<Dense> = Vec::with_capacity(self.layers.len());
        for i in (0..self.layers.len()).rev() {
            let input = &cache.values[i];
            let weights_grad = input.t().dot(&delta);
            let bias_grad = delta.sum_axis(Axis(0));
            let mut prev = delta.dot(&self.layers[i].weights.t());
            if i > 0 {
                // rectifier derivative from the post-activation value
                prev.zip_mut_with(input, |d, &a| {
                    if a <= 0.0 {
                        *d = 0.0;
                    }
                });
            }
            grads.push(Dense {
                weights: weights_grad,
                bias: bias_grad,
            });
            delta = prev;
        }
        grads.reverse();
        Ok((Gradients { layers: grads }, delta))
    }

    /// Single-sample convenience wrapper around [`Mlp::backward`].
    pub fn backward_single(
        &self,
        input: &[f64],
        upstream: &[f64],
    ) -> Result<(Gradients, Vec<f64>), NnError> {
        self.check_input(input.len())?;
        if upstream.len() != self.output_len() {
            return Err(NnError::ShapeMismatch {
                expected: self.output_len(),
                got: upstream.len(),
            });
        }
        let x = Array2::from_shape_vec((1, input.len()), input.to_vec()).expect("row vector");
        let cache = self.forward_cached(&x)?;
        let up = Array2::from_shape_vec((1, upstream.len()), upstream.to_vec()).expect("row");
        let (g, dx) = self.backward(&cache, &up)?;
        Ok((g, dx.into_raw_vec_and_offset().0))
    }

    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend(l.weights.iter().copied());
            out.extend(l.bias.iter().copied());
        }
        out
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) -> Result<(), NnError> {
        if flat.len() != self.param_count() {
            return Err(NnError::ShapeMismatch {
                expected: self.param_count(),
                got: flat.len(),
            });
        }
        let mut it = flat.iter().copied();
        for l in &mut self.layers {
            for w in l.weights.iter_mut() {
                *w = it.next().unwrap();
            }
            for b in l.bias.iter_mut() {
                *b = it.next().unwrap();
            }
        }
        Ok(())
    }

    /// `target ← tau·online + (1 − tau)·target`, elementwise.
    pub fn polyak_from(&mut self, online: &Mlp, tau: f64) -> Result<(), NnError> {
        if !self.same_architecture(online) {
            return Err(NnError::ArchitectureMismatch);
        }
        for (t, o) in self.layers.iter_mut().zip(&online.layers) {
            t.weights.zip_mut_with(&o.weights, |a, &b| *a = tau * b + (1.0 - tau) * *a);
            t.bias.zip_mut_with(&o.bias, |a, &b| *a = tau * b + (1.0 - tau) * *a);
        }
        Ok(())
    }

    pub fn copy_from(&mut self, online: &Mlp) -> Result<(), NnError> {
        if !self.same_architecture(online) {
            return Err(NnError::ArchitectureMismatch);
        }
        for (t, o) in self.layers.iter_mut().zip(&online.layers) {
            t.weights.assign(&o.weights);
            t.bias.assign(&o.bias);
        }
        Ok(())
    }

    /// Writes `u32 LE header length`, a JSON header, then the parameters as
    /// little-endian `f64` in layer order (weights row-major, then bias).
    pub fn save<W: Write>(&self, mut w: W) -> Result<(), NnError> {
        let header = FileHeader {
            format: FORMAT_NAME.to_string(),
            version: FORMAT_VERSION,
            sizes: self.sizes.clone(),
            output: self.output,
            count: self.param_count(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| NnError::Format(e.to_string()))?;
        w.write_all(&(json.len() as u32).to_le_bytes())?;
        w.write_all(&json)?;
        for v in self.params_flat() {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn load<R: Read>(mut r: R) -> Result<Self, NnError> {
        let mut len = [0u8; 4];
        r.read_exact(&mut len)?;
        let mut json = vec![0u8; u32::from_le_bytes(len) as usize];
        r.read_exact(&mut json)?;
        let header: FileHeader =
            serde_json::from_slice(&json).map_err(|e| NnError::Format(e.to_string()))?;
        if header.format != FORMAT_NAME {
            return Err(NnError::Format(format!("unknown format {:?}", header.format)));
        }
        if header.version != FORMAT_VERSION {
            return Err(NnError::Format(format!(
                "unsupported version {} (expected {FORMAT_VERSION})",
                header.version
            )));
        }
        if header.sizes.len() < 2 || header.sizes.contains(&0) {
            return Err(NnError::Format("invalid layer sizes".into()));
        }
        let mut net = Mlp::zeros(&header.sizes, header.output);
        if header.count != net.param_count() {
            return Err(NnError::Format("parameter count does not match sizes".into()));
        }
        let mut flat = Vec::with_capacity(header.count);
        let mut buf = [0u8; 8];
        for _ in 0..header.count {
            r.read_exact(&mut buf)?;
            flat.push(f64::from_le_bytes(buf));
        }
        net.set_params_flat(&flat)?;
        Ok(net)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct FileHeader {
    format: String,
    version: u32,
    sizes: Vec<usize>,
    output: OutputActivation,
    count: usize,
}

/// Adaptive-moment optimizer with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Gradients,
    second: Gradients,
}

impl Adam {
    pub fn new(net: &Mlp, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: Gradients::zeros_like(net),
            second: Gradients::zeros_like(net),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Descends along `grads`. Non-finite gradients leave the network and the
    /// optimizer state untouched.
    pub fn step(&mut self, net: &mut Mlp, grads: &Gradients) -> Result<(), NnError> {
        if grads.layers.len() != net.layers.len()
            || grads
                .layers
                .iter()
                .zip(&net.layers)
                .any(|(g, l)| g.weights.dim() != l.weights.dim() || g.bias.dim() != l.bias.dim())
        {
            return Err(NnError::ArchitectureMismatch);
        }
        if !grads.is_finite() {
            return Err(NnError::NonFinite);
        }
        self.step += 1;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let lr = self.lr;
        let update = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        };
        for (((layer, g), m), v) in net
            .layers
            .iter_mut()
            .zip(&grads.layers)
            .zip(&mut self.first.layers)
            .zip(&mut self.second.layers)
        {
            ndarray::Zip::from(&mut layer.weights)
                .and(&g.weights)
                .and(&mut m.weights)
                .and(&mut v.weights)
                .for_each(|p, &g, m, v| update(p, g, m, v));
            ndarray::Zip::from(&mut layer.bias)
                .and(&g.bias)
                .and(&mut m.bias)
                .and(&mut v.bias)
                .for_each(|p, &g, m, v| update(p, g, m, v));
        }
        Ok(())
    }
}

/// Stacks equally sized rows into a batch matrix.
pub fn stack_rows<'a, I>(rows: I, width: usize) -> Array2<f64>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let mut data = Vec::new();
    let mut n = 0;
    for r in rows {
        debug_assert_eq!(r.len(), width);
        data.extend_from_slice(r);
        n += 1;
    }
    Array2::from_shape_vec((n, width), data).expect("rows share a width")
}
