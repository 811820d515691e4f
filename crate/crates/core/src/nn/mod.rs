//! Feed-forward networks with hand-derived backpropagation.
//!
//! Parameters live in a single flat vector laid out layer by layer as
//! (row-major weight matrix, bias vector), which keeps Adam, Polyak
//! averaging, and checkpointing oblivious to the architecture. Forward
//! passes return a cache borrowing the parameters they were computed
//! with, so a stale cache is unrepresentable.
//!
//! Batched and single-sample entry points share one code path: a single
//! sample is a batch of one.

pub mod checkpoint;

use rand::distributions::{Distribution, Uniform};
use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Activation applied between hidden layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum HiddenActivation {
    Relu,
}

/// Activation applied to the final layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum OutputActivation {
    Identity,
    Tanh,
}

/// Width of the default hidden layers.
pub const DEFAULT_HIDDEN_WIDTH: usize = 256;

/// Default hidden stack: four fully-connected layers of width 256
/// counting the output projection, i.e. three hidden layers.
pub fn default_hidden_dims() -> Vec<usize> {
    vec![
        DEFAULT_HIDDEN_WIDTH,
        DEFAULT_HIDDEN_WIDTH,
        DEFAULT_HIDDEN_WIDTH,
    ]
}

/// Architecture description: layer sizes from input to output plus the
/// activation pair.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct MlpSpec {
    layer_sizes: Vec<usize>,
    hidden_activation: HiddenActivation,
    output_activation: OutputActivation,
}

impl MlpSpec {
    pub fn new(layer_sizes: Vec<usize>, output_activation: OutputActivation) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::config(format!(
                "an MLP needs at least 2 layer sizes, got {}",
                layer_sizes.len()
            )));
        }
        if layer_sizes.iter().any(|&n| n == 0) {
            return Err(Error::config("all layer sizes must be >= 1"));
        }
        Ok(Self {
            layer_sizes,
            hidden_activation: HiddenActivation::Relu,
            output_activation,
        })
    }

    /// Tanh-squashed network mapping observations to actions.
    pub fn policy(input_dim: usize, action_dim: usize, hidden: &[usize]) -> Result<Self> {
        let mut sizes = Vec::with_capacity(hidden.len() + 2);
        sizes.push(input_dim);
        sizes.extend_from_slice(hidden);
        sizes.push(action_dim);
        Self::new(sizes, OutputActivation::Tanh)
    }

    /// Scalar-valued network for Q estimates.
    pub fn value(input_dim: usize, hidden: &[usize]) -> Result<Self> {
        let mut sizes = Vec::with_capacity(hidden.len() + 2);
        sizes.push(input_dim);
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        Self::new(sizes, OutputActivation::Identity)
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn hidden_activation(&self) -> HiddenActivation {
        self.hidden_activation
    }

    pub fn output_activation(&self) -> OutputActivation {
        self.output_activation
    }

    /// Number of affine layers.
    pub fn num_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    /// Total parameter count: sum of in*out + out over the layers.
    pub fn param_count(&self) -> usize {
        self.layer_sizes
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    /// (weight offset, bias offset, in_dim, out_dim) for layer `l`.
    fn layer_offsets(&self, layer: usize) -> (usize, usize, usize, usize) {
        let mut offset = 0;
        for l in 0..layer {
            let (nin, nout) = (self.layer_sizes[l], self.layer_sizes[l + 1]);
            offset += nin * nout + nout;
        }
        let (nin, nout) = (self.layer_sizes[layer], self.layer_sizes[layer + 1]);
        (offset, offset + nin * nout, nin, nout)
    }
}

/// Flat parameter storage aligned with an [`MlpSpec`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterVector<F> {
    values: Vec<F>,
}

impl<F: Real> ParameterVector<F> {
    pub fn zeros(spec: &MlpSpec) -> Self {
        Self {
            values: vec![F::zero(); spec.param_count()],
        }
    }

    /// Fan-in scaled uniform init: weights in [-1/sqrt(nin), 1/sqrt(nin)],
    /// biases zero. Draw order is layer-major, rows first, which freezes
    /// the stream layout for reproducibility.
    pub fn init<R: Rng + ?Sized>(spec: &MlpSpec, rng: &mut R) -> Self {
        let mut values = vec![F::zero(); spec.param_count()];
        for l in 0..spec.num_layers() {
            let (w_off, _b_off, nin, nout) = spec.layer_offsets(l);
            let bound = 1.0 / (nin as f64).sqrt();
            let dist = Uniform::new(-bound, bound);
            for w in values[w_off..w_off + nin * nout].iter_mut() {
                *w = F::from_f64(dist.sample(rng));
            }
        }
        Self { values }
    }

    pub fn from_values(spec: &MlpSpec, values: Vec<F>) -> Result<Self> {
        if values.len() != spec.param_count() {
            return Err(Error::config(format!(
                "parameter vector of length {} does not match spec ({} parameters)",
                values.len(),
                spec.param_count()
            )));
        }
        if let Some(ix) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::numeric(format!(
                "non-finite parameter at index {ix}"
            )));
        }
        Ok(Self { values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[F] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [F] {
        &mut self.values
    }
}

/// Flat gradient storage aligned element-for-element with a
/// [`ParameterVector`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<F> {
    values: Vec<F>,
}

impl<F: Real> Gradients<F> {
    pub fn zeros(spec: &MlpSpec) -> Self {
        Self {
            values: vec![F::zero(); spec.param_count()],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[F] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [F] {
        &mut self.values
    }

    pub fn scale(&mut self, factor: F) {
        for g in &mut self.values {
            *g *= factor;
        }
    }

    pub fn add_scaled(&mut self, other: &Gradients<F>, factor: F) {
        assert_eq!(self.values.len(), other.values.len());
        for (g, o) in self.values.iter_mut().zip(&other.values) {
            *g = o.mul_add(factor, *g);
        }
    }
}

/// Activations recorded by a forward pass.
///
/// `post[0]` is the input batch; `post[l]` the post-activation output of
/// layer `l - 1`. Borrowing the spec and parameters ties the cache to the
/// forward call that produced it.
pub struct ForwardCache<'a, F> {
    spec: &'a MlpSpec,
    params: &'a ParameterVector<F>,
    batch: usize,
    post: Vec<Vec<F>>,
}

impl<F: Real> ForwardCache<'_, F> {
    pub fn batch(&self) -> usize {
        self.batch
    }

    /// Post-activation outputs of the final layer, batch-major.
    pub fn output(&self) -> &[F] {
        self.post.last().unwrap()
    }
}

#[inline]
fn dot<F: Real>(a: &[F], b: &[F]) -> F {
    debug_assert_eq!(a.len(), b.len());
    let mut lanes = [F::zero(); 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (xs, ys) in (&mut ca).zip(&mut cb) {
        lanes[0] = xs[0].mul_add(ys[0], lanes[0]);
        lanes[1] = xs[1].mul_add(ys[1], lanes[1]);
        lanes[2] = xs[2].mul_add(ys[2], lanes[2]);
        lanes[3] = xs[3].mul_add(ys[3], lanes[3]);
    }
    let mut acc = (lanes[0] + lanes[2]) + (lanes[1] + lanes[3]);
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        acc = x.mul_add(*y, acc);
    }
    acc
}

#[inline]
fn apply_hidden<F: Real>(z: F) -> F {
    // ReLU.
    if z > F::zero() {
        z
    } else {
        F::zero()
    }
}

#[inline]
fn apply_output<F: Real>(activation: OutputActivation, z: F) -> F {
    match activation {
        OutputActivation::Identity => z,
        OutputActivation::Tanh => z.tanh(),
    }
}

fn affine_forward<F: Real>(
    weights: &[F],
    biases: &[F],
    nin: usize,
    nout: usize,
    inputs: &[F],
    batch: usize,
    out: &mut [F],
    output_layer: Option<OutputActivation>,
) {
    for b in 0..batch {
        let x = &inputs[b * nin..(b + 1) * nin];
        let y = &mut out[b * nout..(b + 1) * nout];
        for o in 0..nout {
            let z = biases[o] + dot(&weights[o * nin..(o + 1) * nin], x);
            y[o] = match output_layer {
                Some(act) => apply_output(act, z),
                None => apply_hidden(z),
            };
        }
    }
}

fn check_finite<F: Real>(values: &[F], what: &str) -> Result<()> {
    if let Some(ix) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::numeric(format!("non-finite {what} at index {ix}")));
    }
    Ok(())
}

/// Runs a batch of inputs (batch-major, `batch * input_dim` scalars)
/// through the network, returning outputs and the cache needed by
/// [`mlp_backward`].
pub fn mlp_forward_batch<'a, F: Real>(
    spec: &'a MlpSpec,
    params: &'a ParameterVector<F>,
    inputs: &[F],
) -> Result<(Vec<F>, ForwardCache<'a, F>)> {
    let nin = spec.input_dim();
    if params.len() != spec.param_count() {
        return Err(Error::config(format!(
            "parameter vector of length {} does not match spec ({} parameters)",
            params.len(),
            spec.param_count()
        )));
    }
    if inputs.is_empty() || inputs.len() % nin != 0 {
        return Err(Error::config(format!(
            "input of length {} is not a whole number of rows of dimension {nin}",
            inputs.len()
        )));
    }
    check_finite(inputs, "input")?;
    let batch = inputs.len() / nin;

    let mut post: Vec<Vec<F>> = Vec::with_capacity(spec.num_layers() + 1);
    post.push(inputs.to_vec());
    for l in 0..spec.num_layers() {
        let (w_off, b_off, lin, lout) = spec.layer_offsets(l);
        let weights = &params.as_slice()[w_off..w_off + lin * lout];
        let biases = &params.as_slice()[b_off..b_off + lout];
        let mut out = vec![F::zero(); batch * lout];
        let output_layer = (l + 1 == spec.num_layers()).then_some(spec.output_activation());
        affine_forward(
            weights,
            biases,
            lin,
            lout,
            &post[l],
            batch,
            &mut out,
            output_layer,
        );
        post.push(out);
    }

    let output = post.last().unwrap().clone();
    Ok((
        output,
        ForwardCache {
            spec,
            params,
            batch,
            post,
        },
    ))
}

/// Single-sample forward pass; a batch of one.
pub fn mlp_forward<'a, F: Real>(
    spec: &'a MlpSpec,
    params: &'a ParameterVector<F>,
    input: &[F],
) -> Result<(Vec<F>, ForwardCache<'a, F>)> {
    if input.len() != spec.input_dim() {
        return Err(Error::config(format!(
            "input of length {} does not match input dim {}",
            input.len(),
            spec.input_dim()
        )));
    }
    mlp_forward_batch(spec, params, input)
}

/// Forward evaluation without building a cache; for action selection and
/// rollouts.
pub fn mlp_eval<F: Real>(spec: &MlpSpec, params: &ParameterVector<F>, input: &[F]) -> Result<Vec<F>> {
    if input.len() != spec.input_dim() {
        return Err(Error::config(format!(
            "input of length {} does not match input dim {}",
            input.len(),
            spec.input_dim()
        )));
    }
    if params.len() != spec.param_count() {
        return Err(Error::config("parameters inconsistent with spec"));
    }
    check_finite(input, "input")?;
    let mut cur = input.to_vec();
    for l in 0..spec.num_layers() {
        let (w_off, b_off, lin, lout) = spec.layer_offsets(l);
        let weights = &params.as_slice()[w_off..w_off + lin * lout];
        let biases = &params.as_slice()[b_off..b_off + lout];
        let mut out = vec![F::zero(); lout];
        let output_layer = (l + 1 == spec.num_layers()).then_some(spec.output_activation());
        affine_forward(weights, biases, lin, lout, &cur, 1, &mut out, output_layer);
        cur = out;
    }
    Ok(cur)
}

/// Backpropagates `upstream` (the gradient of some scalar objective with
/// respect to the network output, batch-major) through a cached forward
/// pass.
///
/// Returns gradients with respect to the parameters (summed over the
/// batch) and with respect to the inputs (batch-major).
pub fn mlp_backward<F: Real>(
    cache: &ForwardCache<'_, F>,
    upstream: &[F],
) -> Result<(Gradients<F>, Vec<F>)> {
    let spec = cache.spec;
    let nout = spec.output_dim();
    if upstream.len() != cache.batch * nout {
        return Err(Error::usage(format!(
            "upstream of length {} does not match batch {} x output dim {nout}",
            upstream.len(),
            cache.batch
        )));
    }

    let mut grads = Gradients::zeros(spec);
    let batch = cache.batch;

    // Output-layer activation derivative from post-activation values:
    // identity -> 1, tanh -> 1 - y^2.
    let out_post = cache.post.last().unwrap();
    let mut delta: Vec<F> = match spec.output_activation() {
        OutputActivation::Identity => upstream.to_vec(),
        OutputActivation::Tanh => upstream
            .iter()
            .zip(out_post)
            .map(|(&u, &y)| u * (F::one() - y * y))
            .collect(),
    };

    for l in (0..spec.num_layers()).rev() {
        let (w_off, b_off, lin, lout) = spec.layer_offsets(l);
        let weights = &cache.params.as_slice()[w_off..w_off + lin * lout];
        let inputs = &cache.post[l];
        let mut delta_prev = vec![F::zero(); batch * lin];

        {
            let gslice = grads.as_mut_slice();
            for b in 0..batch {
                let d = &delta[b * lout..(b + 1) * lout];
                let x = &inputs[b * lin..(b + 1) * lin];
                let dx = &mut delta_prev[b * lin..(b + 1) * lin];
                for o in 0..lout {
                    let d_o = d[o];
                    gslice[b_off + o] += d_o;
                    let grow = &mut gslice[w_off + o * lin..w_off + (o + 1) * lin];
                    let wrow = &weights[o * lin..(o + 1) * lin];
                    for i in 0..lin {
                        grow[i] = d_o.mul_add(x[i], grow[i]);
                        dx[i] = wrow[i].mul_add(d_o, dx[i]);
                    }
                }
            }
        }

        if l > 0 {
            // Chain through the hidden ReLU that produced this layer's input.
            for (dp, &y) in delta_prev.iter_mut().zip(cache.post[l].iter()) {
                if y <= F::zero() {
                    *dp = F::zero();
                }
            }
        }
        delta = delta_prev;
    }

    Ok((grads, delta))
}

/// Adam optimizer state for one parameter vector.
#[derive(Debug, Clone)]
pub struct AdamState<F> {
    first_moment: Vec<F>,
    second_moment: Vec<F>,
    step_count: u64,
    learning_rate: F,
    beta1: F,
    beta2: F,
    epsilon: F,
}

impl<F: Real> AdamState<F> {
    pub fn new(param_len: usize, learning_rate: F) -> Self {
        Self {
            first_moment: vec![F::zero(); param_len],
            second_moment: vec![F::zero(); param_len],
            step_count: 0,
            learning_rate,
            beta1: F::from_f64(0.9),
            beta2: F::from_f64(0.999),
            epsilon: F::from_f64(1e-8),
        }
    }

    pub fn with_betas(mut self, beta1: F, beta2: F, epsilon: F) -> Self {
        self.beta1 = beta1;
        self.beta2 = beta2;
        self.epsilon = epsilon;
        self
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn learning_rate(&self) -> F {
        self.learning_rate
    }
}

/// One Adam update with bias correction; increments the step count.
pub fn adam_step<F: Real>(
    params: &mut ParameterVector<F>,
    grads: &Gradients<F>,
    state: &mut AdamState<F>,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first_moment.len() {
        return Err(Error::config(format!(
            "adam: mismatched lengths (params {}, grads {}, state {})",
            params.len(),
            grads.len(),
            state.first_moment.len()
        )));
    }
    if let Some(ix) = grads.as_slice().iter().position(|g| !g.is_finite()) {
        return Err(Error::numeric(format!(
            "non-finite gradient at index {ix}"
        )));
    }

    state.step_count += 1;
    let t = state.step_count as i32;
    let one = F::one();
    let bc1 = one - state.beta1.powi(t);
    let bc2 = one - state.beta2.powi(t);
    let (b1, b2) = (state.beta1, state.beta2);
    let (lr, eps) = (state.learning_rate, state.epsilon);

    for (((p, &g), m), v) in params
        .as_mut_slice()
        .iter_mut()
        .zip(grads.as_slice())
        .zip(&mut state.first_moment)
        .zip(&mut state.second_moment)
    {
        *m = b1 * *m + (one - b1) * g;
        *v = b2 * *v + (one - b2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// Exponential moving average toward the online parameters:
/// `target <- rate * target + (1 - rate) * online`.
///
/// `rate = 1` and `rate = 0` short-circuit so they are bitwise exact.
pub fn polyak_update<F: Real>(
    target: &mut ParameterVector<F>,
    online: &ParameterVector<F>,
    rate: F,
) -> Result<()> {
    if target.len() != online.len() {
        return Err(Error::config(format!(
            "polyak: mismatched lengths ({} vs {})",
            target.len(),
            online.len()
        )));
    }
    if rate == F::one() {
        return Ok(());
    }
    if rate == F::zero() {
        target.as_mut_slice().copy_from_slice(online.as_slice());
        return Ok(());
    }
    let keep = rate;
    let mix = F::one() - rate;
    for (t, &o) in target.as_mut_slice().iter_mut().zip(online.as_slice()) {
        *t = keep * *t + mix * o;
    }
    Ok(())
}
