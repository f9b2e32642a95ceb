//! Minimal dense network core.
//!
//! A [`MlpModel`] is a stack of affine layers with `tanh` on every hidden
//! layer and a linear output. Gradients are derived by hand (reverse-mode
//! chain rule over the cached activations) and can be checked against
//! central finite differences with [`grad_check`].
//!
//! Batches are row-major `(samples, features)` matrices. Batch losses are
//! the mean over rows.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::Rng;

use crate::error::{Error, Result};

/// Layered dense network. Weight `i` has shape `(dims[i], dims[i + 1])`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    dims: Vec<usize>,
    weights: Vec<Array2<f64>>,
    biases: Vec<Array1<f64>>,
}

/// Gradient buffers with the same layout as the parameters of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

/// Activations saved by a forward pass; `acts[0]` is the input, the last
/// entry is the logits.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    acts: Vec<Array2<f64>>,
}

impl ForwardCache {
    pub fn logits(&self) -> &Array2<f64> {
        self.acts.last().expect("cache always holds the input")
    }
}

impl MlpModel {
    /// Network with every parameter set to zero.
    pub fn zeros(dims: &[usize]) -> Result<Self> {
        validate_dims(dims)?;
        let weights = dims
            .windows(2)
            .map(|w| Array2::zeros((w[0], w[1])))
            .collect();
        let biases = dims[1..].iter().map(|&n| Array1::zeros(n)).collect();
        Ok(Self {
            dims: dims.to_vec(),
            weights,
            biases,
        })
    }

    /// Glorot-uniform weights in `±sqrt(6 / (fan_in + fan_out))`, zero biases.
    pub fn init<R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> Result<Self> {
        let mut model = Self::zeros(dims)?;
        for w in &mut model.weights {
            let (fan_in, fan_out) = w.dim();
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            w.mapv_inplace(|_| rng.random_range(-limit..limit));
        }
        Ok(model)
    }

    /// Builds a model from explicit parameters, checking that shapes chain.
    pub fn from_parts(weights: Vec<Array2<f64>>, biases: Vec<Array1<f64>>) -> Result<Self> {
        if weights.is_empty() || weights.len() != biases.len() {
            return Err(Error::invalid("need one bias per weight matrix"));
        }
        let mut dims = vec![weights[0].nrows()];
        for (w, b) in weights.iter().zip(&biases) {
            let last = *dims.last().unwrap();
            if w.nrows() != last {
                return Err(Error::Shape {
                    expected: last,
                    got: w.nrows(),
                });
            }
            if b.len() != w.ncols() {
                return Err(Error::Shape {
                    expected: w.ncols(),
                    got: b.len(),
                });
            }
            dims.push(w.ncols());
        }
        validate_dims(&dims)?;
        Ok(Self {
            dims,
            weights,
            biases,
        })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[Array2<f64>] {
        &self.weights
    }

    pub fn biases(&self) -> &[Array1<f64>] {
        &self.biases
    }

    pub fn num_params(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>()
            + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.iter().all(|v| v.is_finite()))
            && self.biases.iter().all(|b| b.iter().all(|v| v.is_finite()))
    }

    /// Visits every parameter in a fixed order (weights row-major, then bias,
    /// layer by layer).
    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| w.iter_mut().chain(b.iter_mut()))
    }

    /// Logits for a single input vector.
    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        let x = ArrayView2::from_shape((1, input.len()), input)
            .map_err(|_| Error::invalid("input view"))?;
        Ok(self.forward_batch(x)?.into_raw_vec_and_offset().0)
    }

    /// Logits for a batch of inputs.
    pub fn forward_batch(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check_input(x.ncols())?;
        let last = self.num_layers() - 1;
        let mut h = x.to_owned();
        for (i, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            h = affine(h.view(), w, b);
            if i < last {
                h.mapv_inplace(f64::tanh);
            }
        }
        Ok(h)
    }

    /// Forward pass keeping every activation for [`MlpModel::backward_cached`].
    pub fn forward_cached(&self, x: ArrayView2<'_, f64>) -> Result<ForwardCache> {
        self.check_input(x.ncols())?;
        let last = self.num_layers() - 1;
        let mut acts = Vec::with_capacity(self.num_layers() + 1);
        acts.push(x.to_owned());
        for (i, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut h = affine(acts[i].view(), w, b);
            if i < last {
                h.mapv_inplace(f64::tanh);
            }
            acts.push(h);
        }
        Ok(ForwardCache { acts })
    }

    /// Backpropagates `grad_out` (gradient of the loss w.r.t. the logits)
    /// through the cached pass, accumulating into `grads`. Returns the
    /// gradient w.r.t. the input batch.
    pub fn backward_cached(
        &self,
        cache: &ForwardCache,
        grad_out: ArrayView2<'_, f64>,
        grads: &mut MlpGrads,
    ) -> Result<Array2<f64>> {
        let logits = cache.logits();
        if grad_out.dim() != logits.dim() {
            return Err(Error::Shape {
                expected: logits.len(),
                got: grad_out.len(),
            });
        }
        let mut delta = grad_out.to_owned();
        for i in (0..self.num_layers()).rev() {
            let input = &cache.acts[i];
            grads.weights[i] += &input.t().dot(&delta);
            grads.biases[i] += &delta.sum_axis(Axis(0));
            let mut upstream = delta.dot(&self.weights[i].t());
            if i > 0 {
                // tanh'(u) = 1 - tanh(u)^2, and acts[i] already holds tanh(u).
                Zip::from(&mut upstream)
                    .and(input)
                    .for_each(|g, &a| *g *= 1.0 - a * a);
            }
            delta = upstream;
        }
        Ok(delta)
    }

    fn check_input(&self, got: usize) -> Result<()> {
        if got != self.input_dim() {
            return Err(Error::Shape {
                expected: self.input_dim(),
                got,
            });
        }
        Ok(())
    }
}

fn validate_dims(dims: &[usize]) -> Result<()> {
    if dims.len() < 2 {
        return Err(Error::invalid("a network needs at least input and output dims"));
    }
    if dims.contains(&0) {
        return Err(Error::invalid("layer dims must be positive"));
    }
    Ok(())
}

fn affine(x: ArrayView2<'_, f64>, w: &Array2<f64>, b: &Array1<f64>) -> Array2<f64> {
    let mut h = x.dot(w);
    h += b;
    h
}

impl MlpGrads {
    pub fn zeros_like(model: &MlpModel) -> Self {
        Self {
            weights: model.weights.iter().map(|w| Array2::zeros(w.dim())).collect(),
            biases: model.biases.iter().map(|b| Array1::zeros(b.len())).collect(),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| w.iter().chain(b.iter()))
    }

    pub fn scale(&mut self, factor: f64) {
        for w in &mut self.weights {
            *w *= factor;
        }
        for b in &mut self.biases {
            *b *= factor;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(|v| v.is_finite())
    }

    fn matches(&self, model: &MlpModel) -> bool {
        self.weights.len() == model.weights.len()
            && self
                .weights
                .iter()
                .zip(&model.weights)
                .all(|(g, w)| g.dim() == w.dim())
            && self
                .biases
                .iter()
                .zip(&model.biases)
                .all(|(g, b)| g.len() == b.len())
    }
}

fn softmax_row(logits: ArrayView1<'_, f64>) -> Array1<f64> {
    let max = logits.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let mut p = logits.mapv(|v| (v - max).exp());
    let total = p.sum();
    p /= total;
    p
}

/// Softmax cross-entropy of one logit vector and its gradient w.r.t. the
/// logits: `softmax(logits) - onehot(target)`.
pub fn cross_entropy_with_grad(logits: &[f64], target: usize) -> Result<(f64, Vec<f64>)> {
    if target >= logits.len() {
        return Err(Error::Index {
            index: target,
            len: logits.len(),
        });
    }
    let p = softmax_row(ArrayView1::from(logits));
    let loss = log_sum_exp(logits) - logits[target];
    let mut grad = p.to_vec();
    grad[target] -= 1.0;
    Ok((loss.max(0.0), grad))
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    max + v.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

/// Per-row cross-entropy losses and the per-row (unscaled) logit gradients.
pub fn cross_entropy_rows(
    logits: ArrayView2<'_, f64>,
    targets: &[usize],
) -> Result<(Vec<f64>, Array2<f64>)> {
    if logits.nrows() != targets.len() {
        return Err(Error::Shape {
            expected: logits.nrows(),
            got: targets.len(),
        });
    }
    let classes = logits.ncols();
    let mut losses = Vec::with_capacity(targets.len());
    let mut grad = Array2::zeros(logits.dim());
    for ((row, mut g), &t) in logits.outer_iter().zip(grad.outer_iter_mut()).zip(targets) {
        if t >= classes {
            return Err(Error::Index {
                index: t,
                len: classes,
            });
        }
        let row = row.as_standard_layout();
        let slice = row.as_slice().expect("standard layout");
        losses.push((log_sum_exp(slice) - slice[t]).max(0.0));
        g.assign(&softmax_row(row.view()));
        g[t] -= 1.0;
    }
    Ok((losses, grad))
}

/// Mean cross-entropy over a batch and the gradient of that mean w.r.t.
/// every parameter.
pub fn batch_loss_and_grad(
    model: &MlpModel,
    x: ArrayView2<'_, f64>,
    targets: &[usize],
) -> Result<(f64, MlpGrads)> {
    let n = targets.len();
    if n == 0 {
        return Err(Error::invalid("empty batch"));
    }
    let cache = model.forward_cached(x)?;
    let (losses, mut grad) = cross_entropy_rows(cache.logits().view(), targets)?;
    grad /= n as f64;
    let mut grads = MlpGrads::zeros_like(model);
    model.backward_cached(&cache, grad.view(), &mut grads)?;
    Ok((losses.iter().sum::<f64>() / n as f64, grads))
}

/// Cross-entropy gradient of a single (input, target) pair.
pub fn backward(model: &MlpModel, input: &[f64], target: usize) -> Result<MlpGrads> {
    let x = ArrayView2::from_shape((1, input.len()), input)
        .map_err(|_| Error::invalid("input view"))?;
    Ok(batch_loss_and_grad(model, x, &[target])?.1)
}

fn single_loss(model: &MlpModel, input: &[f64], target: usize) -> Result<f64> {
    let logits = model.forward(input)?;
    Ok(cross_entropy_with_grad(&logits, target)?.0)
}

/// Largest relative disagreement between the analytic gradient and a
/// central finite difference with step `eps`, over every parameter.
pub fn grad_check(model: &MlpModel, input: &[f64], target: usize, eps: f64) -> Result<f64> {
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::invalid(format!("finite-difference step {eps} not in (0, 1e-2]")));
    }
    let analytic: Vec<f64> = backward(model, input, target)?.iter().copied().collect();
    let mut probe = model.clone();
    let mut worst = 0.0_f64;
    for (k, &a) in analytic.iter().enumerate() {
        let original = *probe.params_mut().nth(k).unwrap();
        *probe.params_mut().nth(k).unwrap() = original + eps;
        let plus = single_loss(&probe, input, target)?;
        *probe.params_mut().nth(k).unwrap() = original - eps;
        let minus = single_loss(&probe, input, target)?;
        *probe.params_mut().nth(k).unwrap() = original;
        let numeric = (plus - minus) / (2.0 * eps);
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimKind {
    Sgd,
    Adam,
}

/// SGD or Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct OptimState {
    pub kind: OptimKind,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step_count: u64,
    moments: Option<(MlpGrads, MlpGrads)>,
}

impl OptimState {
    pub fn sgd(learning_rate: f64, weight_decay: f64) -> Self {
        Self::new(OptimKind::Sgd, learning_rate, weight_decay)
    }

    pub fn adam(learning_rate: f64, weight_decay: f64) -> Self {
        Self::new(OptimKind::Adam, learning_rate, weight_decay)
    }

    pub fn new(kind: OptimKind, learning_rate: f64, weight_decay: f64) -> Self {
        Self {
            kind,
            learning_rate,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step_count: 0,
            moments: None,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Applies one update. Non-finite gradients are rejected before any
    /// parameter is touched.
    pub fn step(&mut self, model: &mut MlpModel, grads: &MlpGrads) -> Result<()> {
        if !grads.matches(model) {
            return Err(Error::invalid("gradient buffers do not match the model"));
        }
        if !grads.is_finite() {
            return Err(Error::NonFinite("gradients"));
        }
        let lr = self.learning_rate;
        let decay = 1.0 - lr * self.weight_decay;
        match self.kind {
            OptimKind::Sgd => {
                for (p, g) in model.params_mut().zip(grads.iter()) {
                    *p = *p * decay - lr * g;
                }
            }
            OptimKind::Adam => {
                let (m, v) = self
                    .moments
                    .get_or_insert_with(|| (MlpGrads::zeros_like(model), MlpGrads::zeros_like(model)));
                let t = (self.step_count + 1) as i32;
                let (b1, b2) = (self.beta1, self.beta2);
                let c1 = 1.0 - b1.powi(t);
                let c2 = 1.0 - b2.powi(t);
                let ms = m
                    .weights
                    .iter_mut()
                    .zip(m.biases.iter_mut())
                    .flat_map(|(w, b)| w.iter_mut().chain(b.iter_mut()));
                let vs = v
                    .weights
                    .iter_mut()
                    .zip(v.biases.iter_mut())
                    .flat_map(|(w, b)| w.iter_mut().chain(b.iter_mut()));
                for (((p, g), mk), vk) in model.params_mut().zip(grads.iter()).zip(ms).zip(vs) {
                    *mk = b1 * *mk + (1.0 - b1) * g;
                    *vk = b2 * *vk + (1.0 - b2) * g * g;
                    let m_hat = *mk / c1;
                    let v_hat = *vk / c2;
                    *p = *p * decay - lr * m_hat / (v_hat.sqrt() + self.epsilon);
                }
            }
        }
        self.step_count += 1;
        if !model.is_finite() {
            return Err(Error::NonFinite("parameters after update"));
        }
        Ok(())
    }
}

/// Index of the largest logit in each row; ties go to the lowest index.
pub fn argmax_rows(logits: ArrayView2<'_, f64>) -> Vec<usize> {
    logits
        .outer_iter()
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}
