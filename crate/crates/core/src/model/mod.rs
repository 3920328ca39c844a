//! Small multi-branch segmenter: a shared convolutional trunk followed by
//! two 1×1×1 heads, one per gating branch. Forward and backward passes are
//! hand-written so gradients can be checked against finite differences.

pub mod checkpoint;
pub mod conv;
pub mod gradcheck;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gating::{Branch, BRANCHES};
use crate::rng;
use crate::scalar::{sigmoid, Real};
use crate::volume::Volume;

pub use conv::{Conv3d, FeatureMap};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrunkLayer {
    pub out_channels: usize,
    pub kernel: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegmenterConfig {
    /// CT, PET and distance map for the early-fusion input.
    pub in_channels: usize,
    pub trunk: Vec<TrunkLayer>,
    pub seed: u64,
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            trunk: vec![TrunkLayer { out_channels: 8, kernel: 3 }; 2],
            seed: 0,
        }
    }
}

impl SegmenterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(Error::InvalidArgument("in_channels must be >= 1".into()));
        }
        if self.trunk.is_empty() {
            return Err(Error::InvalidArgument("at least one trunk layer is required".into()));
        }
        for (i, l) in self.trunk.iter().enumerate() {
            if l.out_channels == 0 || l.kernel % 2 == 0 {
                return Err(Error::InvalidArgument(format!(
                    "trunk layer {i}: need >= 1 channel and an odd kernel, got {l:?}"
                )));
            }
        }
        Ok(())
    }

    pub fn trunk_width(&self) -> usize {
        self.trunk.last().map(|l| l.out_channels).unwrap_or(0)
    }
}

/// Trainable parameters. The same type doubles as a gradient container.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmenterParams<T> {
    pub config: SegmenterConfig,
    pub trunk: Vec<Conv3d<T>>,
    pub heads: [Conv3d<T>; 2],
}

impl<T: Real> SegmenterParams<T> {
    pub fn zeros(config: &SegmenterConfig) -> Result<Self> {
        config.validate()?;
        let mut in_c = config.in_channels;
        let trunk = config
            .trunk
            .iter()
            .map(|l| {
                let conv = Conv3d::zeros(in_c, l.out_channels, l.kernel);
                in_c = l.out_channels;
                conv
            })
            .collect();
        let heads = [Conv3d::zeros(in_c, 1, 1), Conv3d::zeros(in_c, 1, 1)];
        Ok(Self { config: config.clone(), trunk, heads })
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.config).expect("config validated at construction")
    }

    pub fn head(&self, b: Branch) -> &Conv3d<T> {
        &self.heads[b as usize]
    }

    fn layers(&self) -> impl Iterator<Item = &Conv3d<T>> {
        self.trunk.iter().chain(self.heads.iter())
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut Conv3d<T>> {
        self.trunk.iter_mut().chain(self.heads.iter_mut())
    }

    /// Names of the tensors in [`Self::tensors`] order.
    pub fn tensor_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for i in 0..self.trunk.len() {
            names.push(format!("trunk.{i}.weight"));
            names.push(format!("trunk.{i}.bias"));
        }
        for head in ["head_proximal", "head_distal"] {
            names.push(format!("{head}.weight"));
            names.push(format!("{head}.bias"));
        }
        names
    }

    /// Shapes of the tensors in [`Self::tensors`] order.
    pub fn tensor_shapes(&self) -> Vec<Vec<usize>> {
        self.layers()
            .flat_map(|l| {
                let k = l.kernel;
                [vec![l.out_channels, l.in_channels, k, k, k], vec![l.out_channels]]
            })
            .collect()
    }

    /// Every parameter tensor in a fixed order: per layer weight then bias,
    /// trunk first, then the proximal and distal heads.
    pub fn tensors(&self) -> Vec<&[T]> {
        self.layers().flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()]).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        self.layers_mut().flat_map(|l| [l.weight.as_mut_slice(), l.bias.as_mut_slice()]).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += *y;
            }
        }
    }

    pub fn scale(&mut self, factor: T) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|x| *x *= factor);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|x| x.is_finite()))
    }

    pub fn cast<U: Real>(&self) -> SegmenterParams<U> {
        let conv = |c: &Conv3d<T>| Conv3d {
            in_channels: c.in_channels,
            out_channels: c.out_channels,
            kernel: c.kernel,
            weight: c.weight.iter().map(|v| U::lit(v.widen())).collect(),
            bias: c.bias.iter().map(|v| U::lit(v.widen())).collect(),
        };
        SegmenterParams {
            config: self.config.clone(),
            trunk: self.trunk.iter().map(conv).collect(),
            heads: [conv(&self.heads[0]), conv(&self.heads[1])],
        }
    }
}

/// Deterministic Glorot-uniform initialisation from `config.seed`; biases
/// start at zero.
pub fn init_params<T: Real>(config: &SegmenterConfig) -> Result<SegmenterParams<T>> {
    let mut params = SegmenterParams::zeros(config)?;
    let mut rng = rng::stream(config.seed, rng::domain::PARAM_INIT, 0);
    for layer in params.layers_mut() {
        let taps = layer.taps();
        let fan_in = (layer.in_channels * taps) as f64;
        let fan_out = (layer.out_channels * taps) as f64;
        let a = (6.0 / (fan_in + fan_out)).sqrt();
        for w in layer.weight.iter_mut() {
            *w = T::lit(rng.random_range(-a..a));
        }
    }
    Ok(params)
}

/// Per-branch logits and probabilities on the input grid.
#[derive(Clone, Debug)]
pub struct BranchOutputs<T> {
    pub logits: [Volume<T>; 2],
    pub probs: [Volume<T>; 2],
}

impl<T: Real> BranchOutputs<T> {
    pub fn prob(&self, b: Branch) -> &Volume<T> {
        &self.probs[b as usize]
    }
}

/// Trunk activations kept for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache<T> {
    /// Post-ReLU output of every trunk layer.
    activations: Vec<FeatureMap<T>>,
}

fn relu_in_place<T: Real>(m: &mut FeatureMap<T>) {
    m.data_mut().iter_mut().for_each(|v| {
        if *v < T::zero() {
            *v = T::zero()
        }
    });
}

fn check_input<T: Real>(params: &SegmenterParams<T>, input: &FeatureMap<T>) -> Result<()> {
    if input.channels() != params.config.in_channels {
        return Err(Error::ShapeMismatch(format!(
            "model expects {} input channels, got {}",
            params.config.in_channels,
            input.channels()
        )));
    }
    Ok(())
}

fn heads_forward<T: Real>(params: &SegmenterParams<T>, features: &FeatureMap<T>) -> Result<BranchOutputs<T>> {
    let mut logits = Vec::with_capacity(2);
    let mut probs = Vec::with_capacity(2);
    for b in BRANCHES {
        let z = params.head(b).forward(features)?.channel_volume(0);
        probs.push(z.map(sigmoid));
        logits.push(z);
    }
    let [lp, ld]: [Volume<T>; 2] = logits.try_into().unwrap();
    let [pp, pd]: [Volume<T>; 2] = probs.try_into().unwrap();
    Ok(BranchOutputs { logits: [lp, ld], probs: [pp, pd] })
}

/// Forward pass without keeping intermediate activations.
pub fn forward<T: Real>(params: &SegmenterParams<T>, input: &FeatureMap<T>) -> Result<BranchOutputs<T>> {
    check_input(params, input)?;
    let mut h = params.trunk[0].forward(input)?;
    relu_in_place(&mut h);
    for layer in &params.trunk[1..] {
        h = layer.forward(&h)?;
        relu_in_place(&mut h);
    }
    heads_forward(params, &h)
}

pub fn forward_cached<T: Real>(
    params: &SegmenterParams<T>,
    input: &FeatureMap<T>,
) -> Result<(BranchOutputs<T>, ForwardCache<T>)> {
    check_input(params, input)?;
    let mut activations: Vec<FeatureMap<T>> = Vec::with_capacity(params.trunk.len());
    for layer in &params.trunk {
        let mut h = layer.forward(activations.last().unwrap_or(input))?;
        relu_in_place(&mut h);
        activations.push(h);
    }
    let out = heads_forward(params, activations.last().unwrap())?;
    Ok((out, ForwardCache { activations }))
}

/// Backpropagate per-branch logit gradients to every parameter. The trunk
/// gradient is the sum of the contributions arriving from both heads.
pub fn backward<T: Real>(
    params: &SegmenterParams<T>,
    input: &FeatureMap<T>,
    cache: &ForwardCache<T>,
    grad_logits: [&Volume<T>; 2],
) -> Result<SegmenterParams<T>> {
    check_input(params, input)?;
    let last = cache.activations.last().ok_or_else(|| Error::ShapeMismatch("empty forward cache".into()))?;
    for g in grad_logits {
        g.grid().ensure_same(last.grid(), "logit gradient vs activations")?;
    }
    let mut grads = params.zeros_like();
    let mut grad_h = FeatureMap::zeros(*last.grid(), last.channels());
    for b in BRANCHES {
        let g = FeatureMap::from_channels(&[grad_logits[b as usize]])?;
        grads.heads[b as usize] = params.head(b).backward_params(last, &g);
        let contribution = params.head(b).backward_input(&g);
        for (acc, v) in grad_h.data_mut().iter_mut().zip(contribution.data()) {
            *acc += *v;
        }
    }
    for (i, layer) in params.trunk.iter().enumerate().rev() {
        // ReLU gate: pass gradient only where the activation was positive
        for (g, &a) in grad_h.data_mut().iter_mut().zip(cache.activations[i].data()) {
            if a <= T::zero() {
                *g = T::zero();
            }
        }
        let layer_input = if i == 0 { input } else { &cache.activations[i - 1] };
        grads.trunk[i] = layer.backward_params(layer_input, &grad_h);
        if i > 0 {
            grad_h = layer.backward_input(&grad_h);
        }
    }
    Ok(grads)
}

/// Classical momentum: `v <- momentum * v + g`, `θ <- θ - lr * v`.
#[derive(Clone, Debug)]
pub struct MomentumSgd<T> {
    lr: f64,
    momentum: f64,
    velocity: Option<Vec<Vec<T>>>,
}

impl<T: Real> MomentumSgd<T> {
    pub fn new(lr: f64, momentum: f64) -> Result<Self> {
        if !(lr > 0.0) || !lr.is_finite() {
            return Err(Error::InvalidArgument(format!("learning rate must be positive, got {lr}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::InvalidArgument(format!("momentum must be in [0, 1), got {momentum}")));
        }
        Ok(Self { lr, momentum, velocity: None })
    }

    pub fn step(&mut self, params: &mut SegmenterParams<T>, grads: &SegmenterParams<T>) -> Result<()> {
        if !grads.is_finite() {
            return Err(Error::NonFinite("gradient".into()));
        }
        let velocity = self
            .velocity
            .get_or_insert_with(|| grads.tensors().iter().map(|t| vec![T::zero(); t.len()]).collect());
        let (lr, mu) = (T::lit(self.lr), T::lit(self.momentum));
        for ((p, g), v) in params.tensors_mut().into_iter().zip(grads.tensors()).zip(velocity.iter_mut()) {
            for ((p, &g), v) in p.iter_mut().zip(g).zip(v.iter_mut()) {
                *v = mu * *v + g;
                *p -= lr * *v;
            }
        }
        Ok(())
    }
}
