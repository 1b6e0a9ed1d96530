//! Small dense binary classifiers trained from scratch.
//!
//! A model is a stack of dense layers stored in a [`ParameterSet`] as
//! `(denseN, weight)` / `(denseN, bias)` pairs, weights shaped `(out, in)`.
//! Hidden layers use ReLU; the single output unit goes through a sigmoid.
//! Logistic regression is the one-layer special case.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::param::{LayerKind, LayerTensor, ParameterSet};
use crate::rng::RngStream;

/// Lower/upper clamp applied to probabilities before taking logs.
pub const PROB_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Logistic,
    Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub arch: Arch,
    pub input_dim: usize,
    #[serde(default)]
    pub hidden_dims: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
}

impl ModelSpec {
    pub fn logistic(input_dim: usize) -> Self {
        Self {
            arch: Arch::Logistic,
            input_dim,
            hidden_dims: Vec::new(),
            activation: Activation::Relu,
        }
    }

    pub fn mlp(input_dim: usize, hidden_dims: Vec<usize>) -> Self {
        Self {
            arch: Arch::Mlp,
            input_dim,
            hidden_dims,
            activation: Activation::Relu,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::Config("input_dim must be positive".into()));
        }
        if self.hidden_dims.contains(&0) {
            return Err(Error::Config("hidden dims must be positive".into()));
        }
        match self.arch {
            Arch::Logistic if !self.hidden_dims.is_empty() => Err(Error::Config(
                "logistic model must not have hidden layers".into(),
            )),
            Arch::Mlp if self.hidden_dims.is_empty() => {
                Err(Error::Config("mlp needs at least one hidden layer".into()))
            }
            _ => Ok(()),
        }
    }

    /// `(out, in)` of every dense layer, input to output.
    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 1);
        let mut fan_in = self.input_dim;
        for &h in &self.hidden_dims {
            dims.push((h, fan_in));
            fan_in = h;
        }
        dims.push((1, fan_in));
        dims
    }
}

/// Weights uniform on `[-1/sqrt(fan_in), 1/sqrt(fan_in))`, biases zero.
pub fn init_params(spec: &ModelSpec, stream: RngStream) -> Result<ParameterSet> {
    spec.validate()?;
    let mut rng = stream.rng();
    let mut layers = Vec::new();
    for (i, (out, fan_in)) in spec.layer_dims().into_iter().enumerate() {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w: Vec<f64> = (0..out * fan_in)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        let id = format!("dense{i}");
        layers.push(LayerTensor::new(
            &id,
            LayerKind::Weight,
            vec![out, fan_in],
            w,
        )?);
        layers.push(LayerTensor::new(
            &id,
            LayerKind::Bias,
            vec![out],
            vec![0.0; out],
        )?);
    }
    ParameterSet::new(layers)
}

struct Dense<'a> {
    w: &'a [f64],
    b: &'a [f64],
    out: usize,
    inp: usize,
}

impl Dense<'_> {
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.out)
            .map(|o| {
                let row = &self.w[o * self.inp..(o + 1) * self.inp];
                row.iter().zip(x).map(|(w, x)| w * x).sum::<f64>() + self.b[o]
            })
            .collect()
    }
}

fn dense_stack(params: &ParameterSet) -> Result<Vec<Dense<'_>>> {
    let layers = params.layers();
    if layers.is_empty() || !layers.len().is_multiple_of(2) {
        return Err(Error::Congruence(
            "model parameters must be weight/bias pairs".into(),
        ));
    }
    let mut stack = Vec::with_capacity(layers.len() / 2);
    for pair in layers.chunks(2) {
        let (w, b) = (&pair[0], &pair[1]);
        let ok = w.kind == LayerKind::Weight
            && b.kind == LayerKind::Bias
            && w.shape.len() == 2
            && b.shape == [w.shape[0]];
        if !ok {
            return Err(Error::Congruence(format!(
                "layer {} is not a dense weight/bias pair",
                w.layer_id
            )));
        }
        if let Some(prev) = stack.last() {
            let prev: &Dense = prev;
            if prev.out != w.shape[1] {
                return Err(Error::Congruence(format!(
                    "layer {} expects {} inputs, previous layer emits {}",
                    w.layer_id, w.shape[1], prev.out
                )));
            }
        }
        stack.push(Dense {
            w: &w.values,
            b: &b.values,
            out: w.shape[0],
            inp: w.shape[1],
        });
    }
    if stack.last().map(|d| d.out) != Some(1) {
        return Err(Error::Congruence("output layer must have one unit".into()));
    }
    Ok(stack)
}

fn relu(v: &mut [f64]) {
    for x in v {
        *x = x.max(0.0);
    }
}

/// Numerically stable logistic function.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Pre-activations of every layer for one input.
fn pre_activations(stack: &[Dense], x: &[f64]) -> Result<Vec<Vec<f64>>> {
    if x.len() != stack[0].inp {
        return Err(Error::Data(format!(
            "feature vector has {} entries, model expects {}",
            x.len(),
            stack[0].inp
        )));
    }
    let mut zs = Vec::with_capacity(stack.len());
    let mut a = x.to_vec();
    for (j, layer) in stack.iter().enumerate() {
        let z = layer.apply(&a);
        if j + 1 < stack.len() {
            a = z.clone();
            relu(&mut a);
        }
        zs.push(z);
    }
    Ok(zs)
}

pub fn logit(params: &ParameterSet, x: &[f64]) -> Result<f64> {
    let stack = dense_stack(params)?;
    let zs = pre_activations(&stack, x)?;
    Ok(zs[zs.len() - 1][0])
}

/// Predicted probability of the positive class.
pub fn forward(params: &ParameterSet, x: &[f64]) -> Result<f64> {
    logit(params, x).map(sigmoid)
}

/// Per-class loss weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub neg: f64,
    pub pos: f64,
}

impl Default for ClassWeights {
    fn default() -> Self {
        Self { neg: 1.0, pos: 1.0 }
    }
}

impl ClassWeights {
    /// Inverse class frequency, normalized so `neg + pos = 2`. Falls back to
    /// unit weights when a class is absent.
    pub fn inverse_frequency<'a>(samples: impl IntoIterator<Item = &'a Sample>) -> Self {
        let (mut n_pos, mut n) = (0usize, 0usize);
        for s in samples {
            n += 1;
            n_pos += usize::from(s.label == 1);
        }
        let n_neg = n - n_pos;
        if n_pos == 0 || n_neg == 0 {
            return Self::default();
        }
        Self {
            neg: 2.0 * n_pos as f64 / n as f64,
            pos: 2.0 * n_neg as f64 / n as f64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub class_weights: ClassWeights,
    /// Proximal coefficient; zero gives the plain weighted loss.
    pub prox_mu: f64,
}

impl LossConfig {
    pub fn weighted(class_weights: ClassWeights) -> Self {
        Self {
            class_weights,
            prox_mu: 0.0,
        }
    }
}

/// Class-weighted binary cross-entropy of a single prediction.
pub fn weighted_bce(p: f64, label: u8, w: ClassWeights) -> f64 {
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    if label == 1 {
        -w.pos * p.ln()
    } else {
        -w.neg * (1.0 - p).ln()
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// [`weighted_bce`] of `sigmoid(z)` evaluated from the logit, so that
/// `-ln(1 − p)` keeps full precision when `p` is close to 1. The probability
/// clamp becomes a clamp of the negative log-likelihood.
pub fn weighted_bce_logit(z: f64, label: u8, w: ClassWeights) -> f64 {
    let nll = if label == 1 {
        softplus(-z)
    } else {
        softplus(z)
    };
    let (lo, hi) = nll_bounds();
    let weight = if label == 1 { w.pos } else { w.neg };
    weight * nll.clamp(lo, hi)
}

fn nll_bounds() -> (f64, f64) {
    (-(-PROB_EPS).ln_1p(), -PROB_EPS.ln())
}

/// Derivative of [`weighted_bce_logit`] with respect to the logit. Zero where
/// the clamp is active.
fn weighted_bce_dlogit(z: f64, label: u8, w: ClassWeights) -> f64 {
    let nll = if label == 1 {
        softplus(-z)
    } else {
        softplus(z)
    };
    let (lo, hi) = nll_bounds();
    if nll <= lo || nll >= hi {
        return 0.0;
    }
    if label == 1 {
        -w.pos * sigmoid(-z)
    } else {
        w.neg * sigmoid(z)
    }
}

/// Mean class-weighted BCE over `batch` plus `(mu/2)·||params − anchor||²`,
/// with its exact gradient. `anchor` must be given exactly when `mu > 0`.
pub fn loss_and_grad(
    params: &ParameterSet,
    batch: &[&Sample],
    cfg: &LossConfig,
    anchor: Option<&ParameterSet>,
) -> Result<(f64, ParameterSet)> {
    if batch.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    let prox_anchor = match (cfg.prox_mu > 0.0, anchor) {
        (true, Some(a)) => {
            params.check_congruent(a)?;
            Some(a)
        }
        (false, None) => None,
        (true, None) => {
            return Err(Error::Config(
                "proximal term requested without an anchor model".into(),
            ))
        }
        (false, Some(_)) => {
            return Err(Error::Config("anchor model given but prox_mu is 0".into()))
        }
    };
    if cfg.prox_mu < 0.0 || !cfg.prox_mu.is_finite() {
        return Err(Error::Config(format!(
            "prox_mu must be >= 0, got {}",
            cfg.prox_mu
        )));
    }

    let stack = dense_stack(params)?;
    let mut grads: Vec<Vec<f64>> = params
        .layers()
        .iter()
        .map(|l| vec![0.0; l.values.len()])
        .collect();
    let inv_n = 1.0 / batch.len() as f64;
    let mut loss = 0.0;

    for sample in batch {
        let zs = pre_activations(&stack, &sample.features)?;
        let z = zs[zs.len() - 1][0];
        loss += weighted_bce_logit(z, sample.label, cfg.class_weights);

        let mut delta = vec![weighted_bce_dlogit(z, sample.label, cfg.class_weights) * inv_n];
        for j in (0..stack.len()).rev() {
            let layer = &stack[j];
            let input: Vec<f64> = if j == 0 {
                sample.features.clone()
            } else {
                zs[j - 1].iter().map(|z| z.max(0.0)).collect()
            };
            let (gw, rest) = grads[2 * j..].split_at_mut(1);
            let gw = &mut gw[0];
            let gb = &mut rest[0];
            for o in 0..layer.out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                gb[o] += d;
                let row = &mut gw[o * layer.inp..(o + 1) * layer.inp];
                for (g, a) in row.iter_mut().zip(&input) {
                    *g += d * a;
                }
            }
            if j > 0 {
                let prev_z = &zs[j - 1];
                delta = (0..layer.inp)
                    .map(|k| {
                        if prev_z[k] <= 0.0 {
                            return 0.0;
                        }
                        (0..layer.out)
                            .map(|o| layer.w[o * layer.inp + k] * delta[o])
                            .sum()
                    })
                    .collect();
            }
        }
    }
    loss *= inv_n;

    let mut grad = params.new_zeroed();
    for (l, g) in grad.layers_mut().iter_mut().zip(grads) {
        l.values = g;
    }
    if let Some(anchor) = prox_anchor {
        let d = params.l2_distance(anchor)?;
        loss += 0.5 * cfg.prox_mu * d * d;
        let pairs = params.layers().iter().zip(anchor.layers());
        for (g, (p, a)) in grad.layers_mut().iter_mut().zip(pairs) {
            for ((gv, pv), av) in g.values.iter_mut().zip(&p.values).zip(&a.values) {
                *gv += cfg.prox_mu * (pv - av);
            }
        }
    }
    if !loss.is_finite() {
        return Err(Error::Numeric("loss".into()));
    }
    grad.ensure_finite("gradient")?;
    Ok((loss, grad))
}

/// Sum (not mean) of per-sample class-weighted cross-entropy; no proximal term.
pub fn eval_loss(params: &ParameterSet, split: &[&Sample], cfg: &LossConfig) -> Result<f64> {
    if split.is_empty() {
        return Err(Error::Data("cannot evaluate loss on an empty split".into()));
    }
    let stack = dense_stack(params)?;
    let mut total = 0.0;
    for s in split {
        let zs = pre_activations(&stack, &s.features)?;
        total += weighted_bce_logit(zs[zs.len() - 1][0], s.label, cfg.class_weights);
    }
    Ok(total)
}

/// SGD hyperparameters. Defaults are the recipe used for every method:
/// lr 0.1, momentum 0.9, weight decay 1e-4, lr halved every 2 epochs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    #[serde(default = "defaults::lr0")]
    pub lr0: f64,
    #[serde(default = "defaults::momentum")]
    pub momentum: f64,
    #[serde(default = "defaults::weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "defaults::halve_every")]
    pub halve_every: u32,
}

mod defaults {
    pub fn lr0() -> f64 {
        0.1
    }
    pub fn momentum() -> f64 {
        0.9
    }
    pub fn weight_decay() -> f64 {
        1e-4
    }
    pub fn halve_every() -> u32 {
        2
    }
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr0: defaults::lr0(),
            momentum: defaults::momentum(),
            weight_decay: defaults::weight_decay(),
            halve_every: defaults::halve_every(),
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let finite = [self.lr0, self.momentum, self.weight_decay]
            .iter()
            .all(|v| v.is_finite() && *v >= 0.0);
        if !finite {
            return Err(Error::Config(
                "lr0, momentum and weight_decay must be finite and >= 0".into(),
            ));
        }
        if self.halve_every == 0 {
            return Err(Error::Config("halve_every must be positive".into()));
        }
        Ok(())
    }

    /// Learning rate at a global epoch: `lr0 · 0.5^floor(epoch / halve_every)`.
    pub fn lr_at(&self, epoch: u32) -> f64 {
        self.lr0 * 0.5f64.powi((epoch / self.halve_every) as i32)
    }
}

/// SGD state carried between steps.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    pub velocity: ParameterSet,
}

impl OptimizerState {
    /// Zero velocity congruent to `params`.
    pub fn new(config: OptimizerConfig, params: &ParameterSet) -> Self {
        Self {
            config,
            velocity: params.new_zeroed(),
        }
    }
}

/// One momentum SGD step with L2 weight decay added to the gradient:
/// `g = grad + wd·θ; v = m·v + g; θ = θ − lr(epoch)·v`.
pub fn sgd_step(
    params: &ParameterSet,
    grad: &ParameterSet,
    opt: &mut OptimizerState,
    global_epoch: u32,
) -> Result<ParameterSet> {
    params.check_congruent(grad)?;
    params.check_congruent(&opt.velocity)?;
    let cfg = opt.config;
    let lr = cfg.lr_at(global_epoch);

    let mut g = grad.clone();
    if cfg.weight_decay != 0.0 {
        g.axpy_assign(cfg.weight_decay, params)?;
    }
    let mut v = opt.velocity.scaled(cfg.momentum)?;
    v.axpy_assign(1.0, &g)?;
    let next = params.axpy(-lr, &v)?;
    opt.velocity = v;
    Ok(next)
}

/// One pass over `split` in shuffled mini-batches. Returns the updated
/// parameters and the mean of the per-batch losses.
#[allow(clippy::too_many_arguments)]
pub fn local_train_epoch(
    params: &ParameterSet,
    split: &[&Sample],
    cfg: &LossConfig,
    anchor: Option<&ParameterSet>,
    opt: &mut OptimizerState,
    global_epoch: u32,
    batch_size: usize,
    stream: RngStream,
) -> Result<(ParameterSet, f64)> {
    if split.is_empty() {
        return Err(Error::Data("empty training split".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let mut order: Vec<usize> = (0..split.len()).collect();
    order.shuffle(&mut stream.rng());

    let mut current = params.clone();
    let mut loss_sum = 0.0;
    let mut batches = 0usize;
    let mut batch = Vec::with_capacity(batch_size.min(split.len()));
    for chunk in order.chunks(batch_size) {
        batch.clear();
        batch.extend(chunk.iter().map(|&i| split[i]));
        let (loss, grad) = loss_and_grad(&current, &batch, cfg, anchor)?;
        current = sgd_step(&current, &grad, opt, global_epoch)?;
        loss_sum += loss;
        batches += 1;
    }
    Ok((current, loss_sum / batches as f64))
}
