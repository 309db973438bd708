//! Dense feed-forward networks with exact parameter gradients.
//!
//! A [`Model`] is a stack of affine layers, each optionally followed by a ReLU,
//! whose parameters live in one flat `Vec<f64>`. Per layer the weights come
//! first (`out_dim × in_dim`, row-major) followed by the `out_dim` biases.
//!
//! Gradients are computed in reverse mode: [`Model::vjp_params`] returns
//! `∂(cᵀ f_θ(x))/∂θ` for a cotangent `c` in logit space, which is all the
//! conformal objective needs because every loss term is a scalar function of
//! the logits.

use std::fs;
use std::path::Path;

use rand::Rng;

use crate::conformal::{score_cotangent, ScoreKind};
use crate::container::{Reader, Writer};
use crate::error::{Error, Result};
use crate::rng;

const CHECKPOINT_MAGIC: &[u8; 4] = b"CRML";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    None,
    Relu,
}

impl Activation {
    fn code(self) -> u32 {
        match self {
            Activation::None => 0,
            Activation::Relu => 1,
        }
    }

    fn from_code(code: u32) -> Result<Self> {
        match code {
            0 => Ok(Activation::None),
            1 => Ok(Activation::Relu),
            c => Err(Error::Malformed(format!("unknown activation code {c}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn new(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        LayerSpec {
            in_dim,
            out_dim,
            activation,
        }
    }

    fn param_count(&self) -> usize {
        self.in_dim * self.out_dim + self.out_dim
    }
}

/// A labelled input.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub x: Vec<f64>,
    pub y: usize,
}

impl Example {
    pub fn new(x: Vec<f64>, y: usize) -> Self {
        Example { x, y }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    layers: Vec<LayerSpec>,
    params: Vec<f64>,
}

/// Number of parameters a topology needs.
pub fn param_count(layers: &[LayerSpec]) -> usize {
    layers.iter().map(LayerSpec::param_count).sum()
}

fn check_topology(layers: &[LayerSpec]) -> Result<()> {
    if layers.is_empty() {
        return Err(Error::InvalidArgument("model needs at least one layer".into()));
    }
    for (i, l) in layers.iter().enumerate() {
        if l.in_dim == 0 || l.out_dim == 0 {
            return Err(Error::InvalidArgument(format!("layer {i} has a zero dimension")));
        }
    }
    for w in layers.windows(2) {
        if w[0].out_dim != w[1].in_dim {
            return Err(Error::DimensionMismatch {
                what: "consecutive layers",
                expected: w[0].out_dim,
                actual: w[1].in_dim,
            });
        }
    }
    Ok(())
}

impl Model {
    pub fn new(layers: Vec<LayerSpec>, params: Vec<f64>) -> Result<Self> {
        check_topology(&layers)?;
        let expected = param_count(&layers);
        if params.len() != expected {
            return Err(Error::ParamCountMismatch {
                expected,
                actual: params.len(),
            });
        }
        Ok(Model { layers, params })
    }

    pub fn zeros(layers: Vec<LayerSpec>) -> Result<Self> {
        let n = param_count(&layers);
        Model::new(layers, vec![0.0; n])
    }

    /// Uniform initialization in `±1/√fan_in`, weights and biases alike.
    pub fn init(layers: Vec<LayerSpec>, seed: u64) -> Result<Self> {
        check_topology(&layers)?;
        let mut rng = rng::stream(seed, "init", 0);
        let mut params = Vec::with_capacity(param_count(&layers));
        for l in &layers {
            let bound = 1.0 / (l.in_dim as f64).sqrt();
            for _ in 0..l.param_count() {
                params.push(rng.gen_range(-bound..bound));
            }
        }
        Model::new(layers, params)
    }

    /// Topology of a single dense layer.
    pub fn linear_topology(in_dim: usize, out_dim: usize) -> Vec<LayerSpec> {
        vec![LayerSpec::new(in_dim, out_dim, Activation::None)]
    }

    /// Topology of a ReLU MLP with the given hidden widths and a linear head.
    pub fn mlp_topology(in_dim: usize, hidden: &[usize], out_dim: usize) -> Vec<LayerSpec> {
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut prev = in_dim;
        for &h in hidden {
            layers.push(LayerSpec::new(prev, h, Activation::Relu));
            prev = h;
        }
        layers.push(LayerSpec::new(prev, out_dim, Activation::None));
        layers
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn num_classes(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                what: "model input",
                expected: self.input_dim(),
                actual: x.len(),
            });
        }
        Ok(())
    }

    /// Logits `f_θ(x)`.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut a = x.to_vec();
        let mut offset = 0;
        for l in &self.layers {
            a = affine(l, &self.params[offset..offset + l.param_count()], &a);
            offset += l.param_count();
        }
        Ok(a)
    }

    /// Smallest `|pre-activation|` over all ReLU units at `x`; infinite when the
    /// model has none. The logits are differentiable in `θ` wherever this is
    /// non-zero.
    pub fn relu_margin(&self, x: &[f64]) -> Result<f64> {
        self.check_input(x)?;
        let mut a = x.to_vec();
        let mut offset = 0;
        let mut margin = f64::INFINITY;
        for l in &self.layers {
            let block = &self.params[offset..offset + l.param_count()];
            offset += l.param_count();
            let linear = LayerSpec::new(l.in_dim, l.out_dim, Activation::None);
            let z = affine(&linear, block, &a);
            if l.activation == Activation::Relu {
                margin = z.iter().fold(margin, |m, v| m.min(v.abs()));
                a = z.into_iter().map(|v| v.max(0.0)).collect();
            } else {
                a = z;
            }
        }
        Ok(margin)
    }

    /// Forward pass keeping each layer's input for the backward sweep.
    fn forward_trace(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.to_vec());
        let mut offset = 0;
        for l in &self.layers {
            let next = affine(l, &self.params[offset..offset + l.param_count()], &acts[acts.len() - 1]);
            offset += l.param_count();
            acts.push(next);
        }
        acts
    }

    /// `∂(cotangentᵀ f_θ(x))/∂θ`.
    pub fn vjp_params(&self, x: &[f64], cotangent: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.param_count()];
        self.vjp_params_acc(x, cotangent, 1.0, &mut out)?;
        Ok(out)
    }

    /// Adds `scale · ∂(cotangentᵀ f_θ(x))/∂θ` into `out`.
    pub fn vjp_params_acc(
        &self,
        x: &[f64],
        cotangent: &[f64],
        scale: f64,
        out: &mut [f64],
    ) -> Result<()> {
        self.check_input(x)?;
        if cotangent.len() != self.num_classes() {
            return Err(Error::DimensionMismatch {
                what: "cotangent",
                expected: self.num_classes(),
                actual: cotangent.len(),
            });
        }
        if out.len() != self.param_count() {
            return Err(Error::DimensionMismatch {
                what: "gradient buffer",
                expected: self.param_count(),
                actual: out.len(),
            });
        }
        let acts = self.forward_trace(x);
        let mut g: Vec<f64> = cotangent.iter().map(|c| c * scale).collect();
        let mut offset = self.param_count();
        for (li, l) in self.layers.iter().enumerate().rev() {
            offset -= l.param_count();
            let out_act = &acts[li + 1];
            if l.activation == Activation::Relu {
                // relu'(0) = 0
                for (gi, &a) in g.iter_mut().zip(out_act) {
                    if a <= 0.0 {
                        *gi = 0.0;
                    }
                }
            }
            let input = &acts[li];
            let block = &mut out[offset..offset + l.param_count()];
            let (w_grad, b_grad) = block.split_at_mut(l.in_dim * l.out_dim);
            for (o, &go) in g.iter().enumerate() {
                if go == 0.0 {
                    continue;
                }
                let row = &mut w_grad[o * l.in_dim..(o + 1) * l.in_dim];
                for (r, &xi) in row.iter_mut().zip(input) {
                    *r += go * xi;
                }
                b_grad[o] += go;
            }
            if li > 0 {
                let w = &self.params[offset..offset + l.in_dim * l.out_dim];
                let mut g_in = vec![0.0; l.in_dim];
                for (o, &go) in g.iter().enumerate() {
                    if go == 0.0 {
                        continue;
                    }
                    for (gi, &wv) in g_in.iter_mut().zip(&w[o * l.in_dim..(o + 1) * l.in_dim]) {
                        *gi += go * wv;
                    }
                }
                g = g_in;
            }
        }
        Ok(())
    }

    /// `∂E_θ(x, y)/∂θ` for the given score kind.
    pub fn score_grad(&self, ex: &Example, kind: ScoreKind) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.param_count()];
        self.score_grad_acc(ex, kind, 1.0, &mut out)?;
        Ok(out)
    }

    /// Adds `scale · ∂E_θ(x, y)/∂θ` into `out`.
    pub fn score_grad_acc(
        &self,
        ex: &Example,
        kind: ScoreKind,
        scale: f64,
        out: &mut [f64],
    ) -> Result<()> {
        let logits = self.forward(&ex.x)?;
        let k = logits.len();
        if ex.y >= k {
            return Err(Error::LabelOutOfRange {
                label: ex.y,
                num_classes: k,
            });
        }
        let mut weights = vec![0.0; k];
        weights[ex.y] = 1.0;
        let cot = score_cotangent(&logits, &weights, kind);
        self.vjp_params_acc(&ex.x, &cot, scale, out)
    }

    /// Writes the checkpoint file.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = Writer::new(CHECKPOINT_MAGIC);
        w.u32(self.layers.len() as u32);
        for l in &self.layers {
            w.u32(l.in_dim as u32);
            w.u32(l.out_dim as u32);
            w.u32(l.activation.code());
        }
        w.u64(self.params.len() as u64);
        w.f64s(&self.params);
        w.finish(path.as_ref())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let buf = fs::read(path)?;
        Self::from_bytes(&buf)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::open(buf, CHECKPOINT_MAGIC)?;
        let n_layers = r.u32("layer count")? as usize;
        // Each layer header is 12 bytes; reject absurd counts before allocating.
        if n_layers.saturating_mul(12) > r.remaining() {
            return Err(Error::Malformed("truncated while reading layer table".into()));
        }
        let mut layers = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let in_dim = r.u32("layer input dim")? as usize;
            let out_dim = r.u32("layer output dim")? as usize;
            let act = Activation::from_code(r.u32("activation code")?)?;
            layers.push(LayerSpec::new(in_dim, out_dim, act));
        }
        let declared = r.u64("parameter count")? as usize;
        check_topology(&layers).map_err(|e| Error::Malformed(e.to_string()))?;
        let expected = param_count(&layers);
        if declared != expected {
            return Err(Error::ParamCountMismatch {
                expected,
                actual: declared,
            });
        }
        let params = r.f64s(declared, "parameters")?;
        r.expect_end()?;
        Model::new(layers, params)
    }
}

fn affine(l: &LayerSpec, block: &[f64], input: &[f64]) -> Vec<f64> {
    let (w, b) = block.split_at(l.in_dim * l.out_dim);
    let mut out = b.to_vec();
    for (o, z) in out.iter_mut().enumerate() {
        let row = &w[o * l.in_dim..(o + 1) * l.in_dim];
        *z += row.iter().zip(input).map(|(a, b)| a * b).sum::<f64>();
        if l.activation == Activation::Relu && *z < 0.0 {
            *z = 0.0;
        }
    }
    out
}
