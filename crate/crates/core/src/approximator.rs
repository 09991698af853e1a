//! Minimal feed-forward function approximators.
//!
//! A [`ParamSet`] is a flat parameter store for one network: tanh hidden
//! layers, identity output, plus a head that interprets the output
//! (diagonal-Gaussian policy, categorical policy, or scalar value). Gradients
//! are computed by hand-rolled reverse mode through the loss forms this crate
//! actually uses (see [`BatchLoss`]), and applied with a bias-corrected Adam
//! step.
//!
//! Flat parameter layout, used by gradients, optimizer moments and
//! checkpoints alike: all layer weights (row-major `[out][in]`, layers in
//! order), then all biases (layers in order), then `log_std` for Gaussian
//! heads.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// How the final layer's output is interpreted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    /// Output is the mean of a diagonal Gaussian; `log_std` is a separate
    /// state-independent parameter vector.
    Gaussian,
    /// Output is a logit vector (at least two entries).
    Categorical,
    /// Output is a single value estimate.
    Scalar,
}

impl HeadKind {
    pub fn name(self) -> &'static str {
        match self {
            HeadKind::Gaussian => "gaussian",
            HeadKind::Categorical => "categorical",
            HeadKind::Scalar => "scalar",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "gaussian" => Some(HeadKind::Gaussian),
            "categorical" => Some(HeadKind::Categorical),
            "scalar" => Some(HeadKind::Scalar),
            _ => None,
        }
    }
}

/// Flat parameter store for one feed-forward network.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T> {
    layer_shapes: Vec<(usize, usize)>,
    weights: Vec<T>,
    biases: Vec<T>,
    head_kind: HeadKind,
    log_std: Vec<T>,
}

impl<T: Scalar> ParamSet<T> {
    /// All-zero network with the given layer shapes.
    pub fn zeros(layer_shapes: &[(usize, usize)], head_kind: HeadKind) -> Result<Self> {
        let n_weights: usize = layer_shapes.iter().map(|(i, o)| i * o).sum();
        let n_biases: usize = layer_shapes.iter().map(|(_, o)| o).sum();
        let out_dim = layer_shapes.last().map(|(_, o)| *o).unwrap_or(0);
        let log_std = match head_kind {
            HeadKind::Gaussian => vec![T::zero(); out_dim],
            _ => Vec::new(),
        };
        let ps = Self {
            layer_shapes: layer_shapes.to_vec(),
            weights: vec![T::zero(); n_weights],
            biases: vec![T::zero(); n_biases],
            head_kind,
            log_std,
        };
        ps.validate()?;
        Ok(ps)
    }

    /// Network with uniform `±sqrt(6/(in+out))` weight init, zero biases and
    /// zero `log_std`. The final layer's weights are multiplied by
    /// `final_scale` (policies use 0.01 to start near-zero).
    pub fn init<R: Rng>(
        layer_shapes: &[(usize, usize)],
        head_kind: HeadKind,
        final_scale: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let mut ps = Self::zeros(layer_shapes, head_kind)?;
        let mut offset = 0;
        let n_layers = layer_shapes.len();
        for (l, &(in_dim, out_dim)) in layer_shapes.iter().enumerate() {
            let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
            let scale = if l + 1 == n_layers { final_scale } else { 1.0 };
            for w in &mut ps.weights[offset..offset + in_dim * out_dim] {
                let u: f64 = rng.random();
                *w = T::of((2.0 * u - 1.0) * bound * scale);
            }
            offset += in_dim * out_dim;
        }
        Ok(ps)
    }

    pub fn layer_shapes(&self) -> &[(usize, usize)] {
        &self.layer_shapes
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    pub fn biases(&self) -> &[T] {
        &self.biases
    }

    pub fn log_std(&self) -> &[T] {
        &self.log_std
    }

    pub fn head_kind(&self) -> HeadKind {
        self.head_kind
    }

    pub fn input_dim(&self) -> usize {
        self.layer_shapes.first().map(|(i, _)| *i).unwrap_or(0)
    }

    pub fn output_dim(&self) -> usize {
        self.layer_shapes.last().map(|(_, o)| *o).unwrap_or(0)
    }

    /// Total parameter count (weights + biases + log_std).
    pub fn param_count(&self) -> usize {
        self.weights.len() + self.biases.len() + self.log_std.len()
    }

    /// Parameters in flat layout.
    pub fn flat_params(&self) -> Vec<T> {
        let mut v = Vec::with_capacity(self.param_count());
        v.extend_from_slice(&self.weights);
        v.extend_from_slice(&self.biases);
        v.extend_from_slice(&self.log_std);
        v
    }

    /// Overwrite parameters from flat layout.
    pub fn set_flat_params(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::Dimension(format!(
                "flat parameter vector has {} entries, expected {}",
                flat.len(),
                self.param_count()
            )));
        }
        let (w, rest) = flat.split_at(self.weights.len());
        let (b, s) = rest.split_at(self.biases.len());
        self.weights.copy_from_slice(w);
        self.biases.copy_from_slice(b);
        self.log_std.copy_from_slice(s);
        Ok(())
    }

    /// Rebuild from raw parts (checkpoint loading).
    pub fn from_parts(
        layer_shapes: Vec<(usize, usize)>,
        weights: Vec<T>,
        biases: Vec<T>,
        head_kind: HeadKind,
        log_std: Vec<T>,
    ) -> Result<Self> {
        let ps = Self {
            layer_shapes,
            weights,
            biases,
            head_kind,
            log_std,
        };
        ps.validate()?;
        Ok(ps)
    }

    /// Check the structural invariants: weight/bias counts match the layer
    /// shapes, consecutive layers chain, categorical heads have at least two
    /// outputs, scalar heads exactly one, and every value is finite.
    pub fn validate(&self) -> Result<()> {
        if self.layer_shapes.is_empty() {
            return Err(Error::Contract("network needs at least one layer".into()));
        }
        for w in self.layer_shapes.windows(2) {
            if w[0].1 != w[1].0 {
                return Err(Error::Dimension(format!(
                    "layer output {} does not feed layer input {}",
                    w[0].1, w[1].0
                )));
            }
        }
        let n_weights: usize = self.layer_shapes.iter().map(|(i, o)| i * o).sum();
        let n_biases: usize = self.layer_shapes.iter().map(|(_, o)| o).sum();
        if self.weights.len() != n_weights || self.biases.len() != n_biases {
            return Err(Error::Dimension(format!(
                "have {} weights / {} biases, shapes require {} / {}",
                self.weights.len(),
                self.biases.len(),
                n_weights,
                n_biases
            )));
        }
        match self.head_kind {
            HeadKind::Categorical => {
                if self.output_dim() < 2 {
                    return Err(Error::Contract(
                        "categorical head needs output dim >= 2".into(),
                    ));
                }
                if !self.log_std.is_empty() {
                    return Err(Error::Contract("categorical head carries no log_std".into()));
                }
            }
            HeadKind::Scalar => {
                if self.output_dim() != 1 {
                    return Err(Error::Contract("scalar head needs output dim 1".into()));
                }
                if !self.log_std.is_empty() {
                    return Err(Error::Contract("scalar head carries no log_std".into()));
                }
            }
            HeadKind::Gaussian => {
                if self.log_std.len() != self.output_dim() {
                    return Err(Error::Dimension(format!(
                        "log_std has {} entries, output dim is {}",
                        self.log_std.len(),
                        self.output_dim()
                    )));
                }
            }
        }
        let finite = self.weights.iter().chain(&self.biases).chain(&self.log_std);
        for v in finite {
            if !v.is_finite() {
                return Err(Error::NonFinite("parameter".into()));
            }
        }
        Ok(())
    }

    fn layer_weight_offset(&self, layer: usize) -> usize {
        self.layer_shapes[..layer].iter().map(|(i, o)| i * o).sum()
    }

    fn layer_bias_offset(&self, layer: usize) -> usize {
        self.layer_shapes[..layer].iter().map(|(_, o)| o).sum()
    }
}

/// Post-activation values per layer, kept for the backward pass.
/// `activations[0]` is the input, the last entry is the network output.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    pub activations: Vec<Vec<T>>,
}

/// Evaluate the network: tanh on hidden layers, identity on the output.
pub fn forward<T: Scalar>(params: &ParamSet<T>, input: &[T]) -> Result<Vec<T>> {
    let mut cache = forward_cached(params, input)?;
    Ok(cache.activations.pop().expect("output layer"))
}

/// Like [`forward`] but keeps all intermediate activations.
pub fn forward_cached<T: Scalar>(params: &ParamSet<T>, input: &[T]) -> Result<ForwardCache<T>> {
    if input.len() != params.input_dim() {
        return Err(Error::Dimension(format!(
            "input has {} entries, network expects {}",
            input.len(),
            params.input_dim()
        )));
    }
    let n_layers = params.layer_shapes.len();
    let mut activations = Vec::with_capacity(n_layers + 1);
    activations.push(input.to_vec());
    for (l, &(in_dim, out_dim)) in params.layer_shapes.iter().enumerate() {
        let w = &params.weights[params.layer_weight_offset(l)..];
        let b = &params.biases[params.layer_bias_offset(l)..];
        let x = activations.last().expect("nonempty");
        let mut y = vec![T::zero(); out_dim];
        for o in 0..out_dim {
            let row = &w[o * in_dim..(o + 1) * in_dim];
            let mut acc = b[o];
            for (wi, xi) in row.iter().zip(x.iter()) {
                acc = acc + *wi * *xi;
            }
            y[o] = if l + 1 < n_layers { acc.tanh() } else { acc };
        }
        activations.push(y);
    }
    Ok(ForwardCache { activations })
}

/// Gradient accumulator congruent with a [`ParamSet`].
#[derive(Debug, Clone)]
pub struct GradBuf<T> {
    pub d_weights: Vec<T>,
    pub d_biases: Vec<T>,
    pub d_log_std: Vec<T>,
}

impl<T: Scalar> GradBuf<T> {
    pub fn zeros_like(params: &ParamSet<T>) -> Self {
        Self {
            d_weights: vec![T::zero(); params.weights.len()],
            d_biases: vec![T::zero(); params.biases.len()],
            d_log_std: vec![T::zero(); params.log_std.len()],
        }
    }

    pub fn into_flat(self) -> Vec<T> {
        let mut v = self.d_weights;
        v.extend_from_slice(&self.d_biases);
        v.extend_from_slice(&self.d_log_std);
        v
    }
}

/// Accumulate `dL/dparams` for one sample given `dL/doutput`.
pub fn backprop<T: Scalar>(
    params: &ParamSet<T>,
    cache: &ForwardCache<T>,
    d_output: &[T],
    grad: &mut GradBuf<T>,
) {
    debug_assert_eq!(d_output.len(), params.output_dim());
    let n_layers = params.layer_shapes.len();
    let mut delta = d_output.to_vec();
    for l in (0..n_layers).rev() {
        let (in_dim, out_dim) = params.layer_shapes[l];
        let w_off = params.layer_weight_offset(l);
        let b_off = params.layer_bias_offset(l);
        let x = &cache.activations[l];
        for o in 0..out_dim {
            let d = delta[o];
            grad.d_biases[b_off + o] += d;
            let row = &mut grad.d_weights[w_off + o * in_dim..w_off + (o + 1) * in_dim];
            for (g, xi) in row.iter_mut().zip(x.iter()) {
                *g += d * *xi;
            }
        }
        if l > 0 {
            let mut d_prev = vec![T::zero(); in_dim];
            for o in 0..out_dim {
                let d = delta[o];
                let row = &params.weights[w_off + o * in_dim..w_off + (o + 1) * in_dim];
                for (dp, wi) in d_prev.iter_mut().zip(row.iter()) {
                    *dp += d * *wi;
                }
            }
            // x here is tanh(z) of the previous layer, so tanh' = 1 - x^2.
            for (dp, xi) in d_prev.iter_mut().zip(x.iter()) {
                *dp *= T::one() - *xi * *xi;
            }
            delta = d_prev;
        }
    }
}

const LN_2PI: f64 = 1.8378770664093453;

/// Exact diagonal-Gaussian log density.
pub fn gaussian_log_prob<T: Scalar>(mean: &[T], log_std: &[T], action: &[T]) -> T {
    let half = T::of(0.5);
    let ln_2pi = T::of(LN_2PI);
    let mut lp = T::zero();
    for ((m, ls), a) in mean.iter().zip(log_std.iter()).zip(action.iter()) {
        let z = (*a - *m) * (-*ls).exp();
        lp = lp - half * z * z - *ls - half * ln_2pi;
    }
    lp
}

/// Sample `action = mean + exp(log_std) * z`, `z` standard normal, and return
/// the exact log density at the sampled action.
pub fn sample_gaussian<T: Scalar, R: Rng>(
    params: &ParamSet<T>,
    state: &[T],
    rng: &mut R,
) -> Result<(Vec<T>, T)> {
    if params.head_kind != HeadKind::Gaussian {
        return Err(Error::Contract("sample_gaussian needs a gaussian head".into()));
    }
    let mean = forward(params, state)?;
    if mean.iter().any(|m| !m.is_finite()) {
        return Err(Error::NonFinite("policy mean".into()));
    }
    let mut action = Vec::with_capacity(mean.len());
    for (m, ls) in mean.iter().zip(params.log_std.iter()) {
        let z: f64 = StandardNormal.sample(rng);
        action.push(*m + ls.exp() * T::of(z));
    }
    let lp = gaussian_log_prob(&mean, &params.log_std, &action);
    Ok((action, lp))
}

/// Log density of `action` under the policy at `state` (ratio recomputation).
pub fn log_prob_gaussian<T: Scalar>(params: &ParamSet<T>, state: &[T], action: &[T]) -> Result<T> {
    if params.head_kind != HeadKind::Gaussian {
        return Err(Error::Contract("log_prob_gaussian needs a gaussian head".into()));
    }
    let mean = forward(params, state)?;
    Ok(gaussian_log_prob(&mean, &params.log_std, action))
}

/// Deterministic action for evaluation: the Gaussian mean.
pub fn mean_action<T: Scalar>(params: &ParamSet<T>, state: &[T]) -> Result<Vec<T>> {
    if params.head_kind != HeadKind::Gaussian {
        return Err(Error::Contract("mean_action needs a gaussian head".into()));
    }
    forward(params, state)
}

/// Numerically stable log-softmax.
pub fn log_softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let max = logits
        .iter()
        .fold(T::neg_infinity(), |a, &b| if b > a { b } else { a });
    let sum_exp: T = logits.iter().map(|&l| (l - max).exp()).sum();
    let log_z = max + sum_exp.ln();
    logits.iter().map(|&l| l - log_z).collect()
}

/// Sample (or argmax, ties toward the lower index) from the categorical head.
pub fn sample_categorical<T: Scalar, R: Rng>(
    params: &ParamSet<T>,
    obs: &[T],
    rng: &mut R,
    deterministic: bool,
) -> Result<(usize, T)> {
    if params.head_kind != HeadKind::Categorical {
        return Err(Error::Contract(
            "sample_categorical needs a categorical head".into(),
        ));
    }
    let logits = forward(params, obs)?;
    let log_probs = log_softmax(&logits);
    let idx = if deterministic {
        let mut best = 0;
        for (i, lp) in log_probs.iter().enumerate().skip(1) {
            if *lp > log_probs[best] {
                best = i;
            }
        }
        best
    } else {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut chosen = log_probs.len() - 1;
        for (i, lp) in log_probs.iter().enumerate() {
            acc += lp.exp().to_f64_lossy();
            if u < acc {
                chosen = i;
                break;
            }
        }
        chosen
    };
    Ok((idx, log_probs[idx]))
}

/// Per-sample loss value and gradient with respect to the network output
/// (and `log_std` for Gaussian heads).
#[derive(Debug, Clone)]
pub struct SampleLoss<T> {
    pub loss: T,
    pub d_output: Vec<T>,
    /// Empty unless the loss touches `log_std`.
    pub d_log_std: Vec<T>,
}

/// A differentiable scalar loss over a batch, composed of forward passes of
/// one network plus a per-sample head loss. The PPO losses implement this.
pub trait BatchLoss<T: Scalar> {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Network input for sample `i`.
    fn input(&self, i: usize) -> &[T];

    /// Loss contribution of sample `i` (already scaled so contributions sum
    /// to the batch loss) and its gradient with respect to the network
    /// output at that sample.
    fn sample_loss(&self, i: usize, output: &[T], log_std: &[T]) -> SampleLoss<T>;
}

/// Batch loss value only (no gradient); the finite-difference oracles in the
/// tests evaluate this at perturbed parameters.
pub fn loss_value<T: Scalar, L: BatchLoss<T>>(params: &ParamSet<T>, loss: &L) -> Result<T> {
    let mut total = T::zero();
    for i in 0..loss.len() {
        let out = forward(params, loss.input(i))?;
        total += loss.sample_loss(i, &out, &params.log_std).loss;
    }
    Ok(total)
}

/// Batch loss and its gradient in flat parameter layout, by reverse mode.
pub fn grad<T: Scalar, L: BatchLoss<T>>(params: &ParamSet<T>, loss: &L) -> Result<(T, Vec<T>)> {
    let mut gbuf = GradBuf::zeros_like(params);
    let mut total = T::zero();
    for i in 0..loss.len() {
        let cache = forward_cached(params, loss.input(i))?;
        let out = cache.activations.last().expect("output");
        let sl = loss.sample_loss(i, out, &params.log_std);
        total += sl.loss;
        backprop(params, &cache, &sl.d_output, &mut gbuf);
        for (g, d) in gbuf.d_log_std.iter_mut().zip(sl.d_log_std.iter()) {
            *g += *d;
        }
    }
    if !total.is_finite() {
        return Err(Error::NonFinite("batch loss".into()));
    }
    Ok((total, gbuf.into_flat()))
}

/// Adam optimizer state congruent with one [`ParamSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct OptState<T> {
    pub first_moment: Vec<T>,
    pub second_moment: Vec<T>,
    pub step_count: u64,
    pub learning_rate: T,
    pub beta1: T,
    pub beta2: T,
    pub epsilon_num: T,
}

impl<T: Scalar> OptState<T> {
    pub fn new(param_count: usize, learning_rate: T) -> Self {
        Self {
            first_moment: vec![T::zero(); param_count],
            second_moment: vec![T::zero(); param_count],
            step_count: 0,
            learning_rate,
            beta1: T::of(0.9),
            beta2: T::of(0.999),
            epsilon_num: T::of(1e-8),
        }
    }
}

/// In-place bias-corrected Adam update.
pub fn adam_step<T: Scalar>(
    params: &mut ParamSet<T>,
    grads: &[T],
    opt: &mut OptState<T>,
) -> Result<()> {
    let n = params.param_count();
    if grads.len() != n || opt.first_moment.len() != n || opt.second_moment.len() != n {
        return Err(Error::Dimension(format!(
            "adam_step: params {}, grads {}, moments {}/{}",
            n,
            grads.len(),
            opt.first_moment.len(),
            opt.second_moment.len()
        )));
    }
    opt.step_count += 1;
    let t = opt.step_count as i32;
    let one = T::one();
    let bc1 = one - opt.beta1.powi(t);
    let bc2 = one - opt.beta2.powi(t);
    let w_len = params.weights.len();
    let b_len = params.biases.len();
    for (k, g) in grads.iter().enumerate() {
        let m = opt.beta1 * opt.first_moment[k] + (one - opt.beta1) * *g;
        let v = opt.beta2 * opt.second_moment[k] + (one - opt.beta2) * *g * *g;
        opt.first_moment[k] = m;
        opt.second_moment[k] = v;
        let step = opt.learning_rate * (m / bc1) / ((v / bc2).sqrt() + opt.epsilon_num);
        let p = if k < w_len {
            &mut params.weights[k]
        } else if k < w_len + b_len {
            &mut params.biases[k - w_len]
        } else {
            &mut params.log_std[k - w_len - b_len]
        };
        *p = *p - step;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn zero_network_maps_everything_to_zero() {
        let ps = ParamSet::<f64>::zeros(&[(3, 8), (8, 2)], HeadKind::Gaussian).unwrap();
        let out = forward(&ps, &[0.3, -1.0, 5.0]).unwrap();
        assert_eq!(out, vec![0.0, 0.0]);
    }

    #[test]
    fn single_linear_layer_by_hand() {
        // W = [[2]], b = [1], input [3] -> [7]
        let mut ps = ParamSet::<f64>::zeros(&[(1, 1)], HeadKind::Scalar).unwrap();
        ps.set_flat_params(&[2.0, 1.0]).unwrap();
        assert_eq!(forward(&ps, &[3.0]).unwrap(), vec![7.0]);
    }

    /// Straight-line re-implementation of the two-layer forward pass,
    /// independent of the cache/offset machinery.
    fn oracle_forward_2layer(ps: &ParamSet<f64>, x: &[f64]) -> Vec<f64> {
        let (in0, out0) = ps.layer_shapes()[0];
        let (_, out1) = ps.layer_shapes()[1];
        let w = ps.weights();
        let b = ps.biases();
        let mut h = vec![0.0; out0];
        for o in 0..out0 {
            let mut acc = b[o];
            for i in 0..in0 {
                acc += w[o * in0 + i] * x[i];
            }
            h[o] = acc.tanh();
        }
        let w1 = &w[in0 * out0..];
        let b1 = &b[out0..];
        let mut y = vec![0.0; out1];
        for o in 0..out1 {
            let mut acc = b1[o];
            for (i, hv) in h.iter().enumerate() {
                acc += w1[o * out0 + i] * hv;
            }
            y[o] = acc;
        }
        y
    }

    #[test]
    fn forward_matches_scalar_oracle() {
        let mut r = rng(11);
        let ps = ParamSet::<f64>::init(&[(4, 7), (7, 3)], HeadKind::Gaussian, 1.0, &mut r).unwrap();
        let x = [0.2, -0.8, 1.4, 0.05];
        let got = forward(&ps, &x).unwrap();
        let want = oracle_forward_2layer(&ps, &x);
        for (g, w) in got.iter().zip(want.iter()) {
            assert_abs_diff_eq!(g, w, epsilon = 1e-12);
        }
    }

    #[test]
    fn forward_rejects_wrong_input_dim() {
        let ps = ParamSet::<f64>::zeros(&[(3, 2)], HeadKind::Categorical).unwrap();
        assert!(matches!(forward(&ps, &[1.0]), Err(Error::Dimension(_))));
    }

    #[test]
    fn gaussian_sample_collapses_to_mean_at_tiny_std() {
        let mut ps = ParamSet::<f64>::zeros(&[(2, 3)], HeadKind::Gaussian).unwrap();
        let mut flat = ps.flat_params();
        // log_std = -20 for every output dim
        let n = flat.len();
        for v in flat[n - 3..].iter_mut() {
            *v = -20.0;
        }
        flat[0] = 0.7; // one nonzero weight so the mean is not all zero
        ps.set_flat_params(&flat).unwrap();
        let mean = forward(&ps, &[1.0, -1.0]).unwrap();
        let (action, _) = sample_gaussian(&ps, &[1.0, -1.0], &mut rng(3)).unwrap();
        for (a, m) in action.iter().zip(mean.iter()) {
            assert_abs_diff_eq!(a, m, epsilon = 1e-8);
        }
    }

    #[test]
    fn gaussian_log_prob_standard_normal_at_zero() {
        // mean 0, log_std 0, action 0 -> -0.5 ln(2 pi) per dimension
        let lp = gaussian_log_prob(&[0.0, 0.0], &[0.0, 0.0], &[0.0, 0.0]);
        assert_abs_diff_eq!(lp, -LN_2PI, epsilon = 1e-14);
    }

    #[test]
    fn gaussian_sampling_is_deterministic_per_seed() {
        let mut r = rng(42);
        let ps = ParamSet::<f64>::init(&[(2, 4), (4, 2)], HeadKind::Gaussian, 0.01, &mut r).unwrap();
        let s = [0.1, 0.9];
        let (a1, lp1) = sample_gaussian(&ps, &s, &mut rng(5)).unwrap();
        let (a2, lp2) = sample_gaussian(&ps, &s, &mut rng(5)).unwrap();
        assert_eq!(a1, a2);
        assert_eq!(lp1.to_bits(), lp2.to_bits());
    }

    #[test]
    fn categorical_tie_breaks_to_lower_index() {
        let ps = ParamSet::<f64>::zeros(&[(2, 2)], HeadKind::Categorical).unwrap();
        let (idx, _) = sample_categorical(&ps, &[0.5, 0.5], &mut rng(0), true).unwrap();
        assert_eq!(idx, 0);
    }

    #[test]
    fn categorical_strong_logit_wins() {
        // logits [0, 10] via a bias-only network
        let mut ps = ParamSet::<f64>::zeros(&[(1, 2)], HeadKind::Categorical).unwrap();
        let mut flat = ps.flat_params();
        flat[3] = 10.0; // bias of output 1 (layout: w00 w10, b0 b1)
        ps.set_flat_params(&flat).unwrap();
        let (idx, lp) = sample_categorical(&ps, &[0.0], &mut rng(0), true).unwrap();
        assert_eq!(idx, 1);
        assert_abs_diff_eq!(lp, -(1.0 + (-10.0f64).exp()).ln(), epsilon = 1e-12);
    }

    #[test]
    fn categorical_frequencies_match_softmax() {
        // logits [ln 3, 0] -> p0 = 3/4
        let mut ps = ParamSet::<f64>::zeros(&[(1, 2)], HeadKind::Categorical).unwrap();
        let mut flat = ps.flat_params();
        flat[2] = 3.0f64.ln();
        ps.set_flat_params(&flat).unwrap();
        let mut r = rng(77);
        let n = 100_000;
        let mut zero_count = 0u32;
        for _ in 0..n {
            let (idx, _) = sample_categorical(&ps, &[0.0], &mut r, false).unwrap();
            if idx == 0 {
                zero_count += 1;
            }
        }
        let frac = f64::from(zero_count) / f64::from(n);
        assert!((frac - 0.75).abs() < 0.01, "p0 = {frac}");
    }

    #[test]
    fn softmax_sums_to_one() {
        let lps: Vec<f64> = log_softmax(&[3.0, -2.0, 0.5, 100.0]);
        let total: f64 = lps.iter().map(|l| l.exp()).sum();
        assert_abs_diff_eq!(total, 1.0, epsilon = 1e-12);
    }

    /// L = 1/2 ||forward(x)||^2 (linear net): dL/dW = y x^T, dL/db = y.
    struct HalfSquaredNorm {
        inputs: Vec<Vec<f64>>,
    }

    impl BatchLoss<f64> for HalfSquaredNorm {
        fn len(&self) -> usize {
            self.inputs.len()
        }
        fn input(&self, i: usize) -> &[f64] {
            &self.inputs[i]
        }
        fn sample_loss(&self, _i: usize, output: &[f64], _log_std: &[f64]) -> SampleLoss<f64> {
            let loss = 0.5 * output.iter().map(|y| y * y).sum::<f64>();
            SampleLoss {
                loss,
                d_output: output.to_vec(),
                d_log_std: Vec::new(),
            }
        }
    }

    struct ConstantLoss {
        inputs: Vec<Vec<f64>>,
    }

    impl BatchLoss<f64> for ConstantLoss {
        fn len(&self) -> usize {
            self.inputs.len()
        }
        fn input(&self, i: usize) -> &[f64] {
            &self.inputs[i]
        }
        fn sample_loss(&self, _i: usize, output: &[f64], _log_std: &[f64]) -> SampleLoss<f64> {
            SampleLoss {
                loss: 4.25,
                d_output: vec![0.0; output.len()],
                d_log_std: Vec::new(),
            }
        }
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let mut r = rng(1);
        let ps = ParamSet::<f64>::init(&[(2, 5), (5, 2)], HeadKind::Gaussian, 1.0, &mut r).unwrap();
        let loss = ConstantLoss {
            inputs: vec![vec![0.4, -0.2]],
        };
        let (v, g) = grad(&ps, &loss).unwrap();
        assert_abs_diff_eq!(v, 4.25, epsilon = 1e-15);
        assert!(g.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn squared_norm_gradient_is_outer_product() {
        // single linear layer, 2 -> 2
        let mut ps = ParamSet::<f64>::zeros(&[(2, 2)], HeadKind::Categorical).unwrap();
        ps.set_flat_params(&[1.0, -0.5, 0.25, 2.0, 0.1, -0.3]).unwrap();
        let x = vec![0.8, -1.2];
        let y = forward(&ps, &x).unwrap();
        let loss = HalfSquaredNorm {
            inputs: vec![x.clone()],
        };
        let (v, g) = grad(&ps, &loss).unwrap();
        assert_abs_diff_eq!(v, 0.5 * (y[0] * y[0] + y[1] * y[1]), epsilon = 1e-14);
        // layout: w00 w01 w10 w11 b0 b1 with w[o][i]
        let want = [
            y[0] * x[0],
            y[0] * x[1],
            y[1] * x[0],
            y[1] * x[1],
            y[0],
            y[1],
        ];
        for (gi, wi) in g.iter().zip(want.iter()) {
            assert_abs_diff_eq!(gi, wi, epsilon = 1e-13);
        }
    }

    #[test]
    fn adam_zero_gradient_leaves_params_unchanged() {
        let mut r = rng(2);
        let mut ps = ParamSet::<f64>::init(&[(2, 3)], HeadKind::Categorical, 1.0, &mut r).unwrap();
        let before = ps.flat_params();
        let mut opt = OptState::new(ps.param_count(), 0.1);
        // seed the moments so decay is observable
        opt.first_moment[0] = 1.0;
        opt.second_moment[0] = 1.0;
        let zeros = vec![0.0; ps.param_count()];
        adam_step(&mut ps, &zeros, &mut opt).unwrap();
        // 0 / (sqrt(v)+eps) is not zero when v > 0; only params with zero
        // moments are exactly unchanged.
        assert_eq!(opt.step_count, 1);
        assert_abs_diff_eq!(opt.first_moment[0], 0.9, epsilon = 1e-15);
        assert_abs_diff_eq!(opt.second_moment[0], 0.999, epsilon = 1e-15);
        for (p, b) in ps.flat_params().iter().zip(before.iter()).skip(1) {
            assert_eq!(p.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn adam_first_step_magnitude_is_learning_rate() {
        let mut ps = ParamSet::<f64>::zeros(&[(1, 2)], HeadKind::Categorical).unwrap();
        let before = ps.flat_params();
        let mut opt = OptState::new(ps.param_count(), 0.1);
        let ones = vec![1.0; ps.param_count()];
        adam_step(&mut ps, &ones, &mut opt).unwrap();
        for (p, b) in ps.flat_params().iter().zip(before.iter()) {
            // bias-corrected first step is lr * 1 / (1 + eps)
            assert_abs_diff_eq!(b - p, 0.1, epsilon = 1e-8);
        }
    }

    /// Scalar Adam reference: one parameter, followed for two steps.
    #[test]
    fn adam_matches_scalar_reference_over_two_steps() {
        let mut ps = ParamSet::<f64>::zeros(&[(1, 1)], HeadKind::Scalar).unwrap();
        ps.set_flat_params(&[0.5, -0.25]).unwrap();
        let mut opt = OptState::new(2, 0.05);
        let grads = [[0.3, -1.1], [-0.4, 0.9]];

        // independent scalar re-implementation
        let (b1, b2, eps, lr) = (0.9f64, 0.999f64, 1e-8, 0.05);
        let mut want = [0.5, -0.25];
        let mut m = [0.0; 2];
        let mut v = [0.0; 2];
        for (t, g) in grads.iter().enumerate() {
            for k in 0..2 {
                m[k] = b1 * m[k] + (1.0 - b1) * g[k];
                v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
                let mh = m[k] / (1.0 - b1.powi(t as i32 + 1));
                let vh = v[k] / (1.0 - b2.powi(t as i32 + 1));
                want[k] -= lr * mh / (vh.sqrt() + eps);
            }
        }

        for g in &grads {
            adam_step(&mut ps, g, &mut opt).unwrap();
        }
        for (p, w) in ps.flat_params().iter().zip(want.iter()) {
            assert_abs_diff_eq!(p, w, epsilon = 1e-12);
        }
    }

    #[test]
    fn init_respects_glorot_bound_and_final_scale() {
        let mut r = rng(9);
        let ps = ParamSet::<f64>::init(&[(4, 64), (64, 64), (64, 1)], HeadKind::Gaussian, 0.01, &mut r)
            .unwrap();
        let bound0 = (6.0 / 68.0f64).sqrt();
        for w in &ps.weights()[..256] {
            assert!(w.abs() <= bound0);
        }
        let final_bound = (6.0 / 65.0f64).sqrt() * 0.01;
        let final_w = &ps.weights()[256 + 4096..];
        assert_eq!(final_w.len(), 64);
        for w in final_w {
            assert!(w.abs() <= final_bound);
        }
        assert!(ps.biases().iter().all(|b| *b == 0.0));
        assert_eq!(ps.log_std(), &[0.0]);
    }

    #[test]
    fn paramset_validation_catches_bad_shapes() {
        assert!(ParamSet::<f64>::zeros(&[(2, 3), (4, 1)], HeadKind::Scalar).is_err());
        assert!(ParamSet::<f64>::zeros(&[(2, 1)], HeadKind::Categorical).is_err());
        assert!(ParamSet::<f64>::zeros(&[(2, 3)], HeadKind::Scalar).is_err());
        assert!(ParamSet::<f64>::zeros(&[(2, 1)], HeadKind::Scalar).is_ok());
    }
}
