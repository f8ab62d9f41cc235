//! Dense networks with explicit backpropagation, Adam and soft updates.
//!
//! Inputs are row-major batches: a `(batch, in)` matrix maps to
//! `(batch, out)`. Layer weights are stored `(in, out)` so a layer is
//! `x.dot(w) + b`.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, z: &mut Array2<f64>) {
        match self {
            Activation::Relu => z.mapv_inplace(|v| v.max(0.0)),
            Activation::Tanh => z.mapv_inplace(f64::tanh),
            Activation::Identity => {}
        }
    }

    /// Multiplies `grad` by the derivative, expressed through the
    /// activation output `y`. ReLU's derivative at 0 is taken as 0.
    fn backprop(self, grad: &mut Array2<f64>, y: &Array2<f64>) {
        match self {
            Activation::Relu => Zip::from(grad).and(y).for_each(|g, &y| {
                if y <= 0.0 {
                    *g = 0.0
                }
            }),
            Activation::Tanh => Zip::from(grad).and(y).for_each(|g, &y| *g *= 1.0 - y * y),
            Activation::Identity => {}
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    /// Input, hidden..., output widths.
    pub dims: Vec<usize>,
    pub hidden_activation: Activation,
    pub output_activation: Activation,
}

impl MlpSpec {
    pub fn new(input: usize, hidden: &[usize], output: usize, output_activation: Activation) -> Self {
        let mut dims = vec![input];
        dims.extend_from_slice(hidden);
        dims.push(output);
        Self {
            dims,
            hidden_activation: Activation::Relu,
            output_activation,
        }
    }

    pub fn param_count(&self) -> usize {
        self.dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    fn validate(&self) -> Result<()> {
        if self.dims.len() < 2 || self.dims.contains(&0) {
            return Err(Error::InvalidArgument(format!("bad layer widths {:?}", self.dims)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

/// Gradients (or any per-parameter quantity) shaped like a network.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub layers: Vec<Layer>,
}

impl Grads {
    pub fn zeros_like(net: &Mlp) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| Layer {
                    w: Array2::zeros(l.w.raw_dim()),
                    b: Array1::zeros(l.b.raw_dim()),
                })
                .collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.w.iter().chain(l.b.iter()).all(|v| v.is_finite()))
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Grads, scale: f64) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.w.scaled_add(scale, &b.w);
            a.b.scaled_add(scale, &b.b);
        }
    }
}

#[derive(Debug, Clone)]
struct ForwardCache {
    /// Layer inputs followed by the network output.
    activations: Vec<Array2<f64>>,
}

#[derive(Debug, Clone)]
pub struct Mlp {
    spec: MlpSpec,
    pub layers: Vec<Layer>,
    cache: Option<ForwardCache>,
}

impl PartialEq for Mlp {
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec && self.layers == other.layers
    }
}

impl Mlp {
    /// Uniform `±1/sqrt(fan_in)` initialization; the last layer is further
    /// multiplied by `final_scale`.
    pub fn new(spec: MlpSpec, final_scale: f64, rng: &mut Rng) -> Result<Self> {
        spec.validate()?;
        let n = spec.dims.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let (fan_in, fan_out) = (spec.dims[i], spec.dims[i + 1]);
                let bound = 1.0 / (fan_in as f64).sqrt() * if i + 1 == n { final_scale } else { 1.0 };
                let mut draw = || rng.random_range(-1.0..=1.0) * bound;
                Layer {
                    w: Array2::from_shape_simple_fn((fan_in, fan_out), &mut draw),
                    b: Array1::from_shape_simple_fn(fan_out, &mut draw),
                }
            })
            .collect();
        Ok(Self {
            spec,
            layers,
            cache: None,
        })
    }

    pub fn zeros(spec: MlpSpec) -> Result<Self> {
        spec.validate()?;
        let layers = spec
            .dims
            .windows(2)
            .map(|w| Layer {
                w: Array2::zeros((w[0], w[1])),
                b: Array1::zeros(w[1]),
            })
            .collect();
        Ok(Self {
            spec,
            layers,
            cache: None,
        })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn input_dim(&self) -> usize {
        self.spec.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.spec.dims.last().expect("validated")
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    fn check_input(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(Error::InvalidArgument(format!(
                "input width {} but network expects {}",
                x.ncols(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    fn run(&self, x: ArrayView2<f64>, mut keep: Option<&mut Vec<Array2<f64>>>) -> Array2<f64> {
        let n = self.layers.len();
        let mut h = x.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = h.dot(&layer.w);
            z += &layer.b;
            let act = if i + 1 == n {
                self.spec.output_activation
            } else {
                self.spec.hidden_activation
            };
            act.apply(&mut z);
            if let Some(keep) = keep.as_deref_mut() {
                keep.push(std::mem::replace(&mut h, z));
            } else {
                h = z;
            }
        }
        if let Some(keep) = keep {
            keep.push(h.clone());
        }
        h
    }

    /// Forward pass without touching the backward cache.
    pub fn predict(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(&x)?;
        Ok(self.run(x, None))
    }

    /// Forward pass that records what [`Mlp::backward`] needs.
    pub fn forward(&mut self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(&x)?;
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        let out = self.run(x, Some(&mut activations));
        self.cache = Some(ForwardCache { activations });
        Ok(out)
    }

    /// Reverse-mode pass for the last [`Mlp::forward`]: parameter gradients
    /// of `sum(grad_out * output)` and the gradient with respect to the
    /// input.
    pub fn backward(&self, grad_out: ArrayView2<f64>) -> Result<(Grads, Array2<f64>)> {
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::InvalidState("backward called before forward".into()))?;
        let acts = &cache.activations;
        let n = self.layers.len();
        if grad_out.dim() != acts[n].dim() {
            return Err(Error::InvalidArgument(format!(
                "output gradient shape {:?} does not match output {:?}",
                grad_out.dim(),
                acts[n].dim()
            )));
        }
        let mut delta = grad_out.to_owned();
        self.spec.output_activation.backprop(&mut delta, &acts[n]);
        let mut grads = Vec::with_capacity(n);
        for i in (0..n).rev() {
            let layer = &self.layers[i];
            grads.push(Layer {
                w: acts[i].t().dot(&delta),
                b: delta.sum_axis(Axis(0)),
            });
            let mut prev = delta.dot(&layer.w.t());
            if i > 0 {
                self.spec.hidden_activation.backprop(&mut prev, &acts[i]);
            }
            delta = prev;
        }
        grads.reverse();
        Ok((Grads { layers: grads }, delta))
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.w.iter().chain(l.b.iter()).all(|v| v.is_finite()))
    }

    /// `self <- tau * online + (1 - tau) * self`.
    pub fn soft_update(&mut self, online: &Mlp, tau: f64) -> Result<()> {
        if self.spec != online.spec {
            return Err(Error::InvalidArgument("soft update between different architectures".into()));
        }
        if !(0.0..=1.0).contains(&tau) {
            return Err(Error::InvalidArgument(format!("tau {tau} outside [0, 1]")));
        }
        for (t, o) in self.layers.iter_mut().zip(&online.layers) {
            Zip::from(&mut t.w).and(&o.w).for_each(|t, &o| *t = tau * o + (1.0 - tau) * *t);
            Zip::from(&mut t.b).and(&o.b).for_each(|t, &o| *t = tau * o + (1.0 - tau) * *t);
        }
        Ok(())
    }

    /// Parameters in layer order, weights (row-major) before biases.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend(l.w.iter());
            out.extend(l.b.iter());
        }
        out
    }

    pub fn set_flat_params(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.param_count() {
            return Err(Error::CheckpointIncompatible(format!(
                "{} parameters supplied, network has {}",
                values.len(),
                self.param_count()
            )));
        }
        let mut it = values.iter().copied();
        for l in &mut self.layers {
            l.w.iter_mut().chain(l.b.iter_mut()).for_each(|p| *p = it.next().expect("length checked"));
        }
        self.cache = None;
        Ok(())
    }

    /// Little-endian float64 parameters.
    pub fn write_params(&self, mut out: impl Write) -> Result<()> {
        let bytes: Vec<u8> = self.flat_params().iter().flat_map(|v| v.to_le_bytes()).collect();
        out.write_all(&bytes)?;
        Ok(())
    }

    pub fn read_params(&mut self, mut input: impl Read) -> Result<()> {
        let mut bytes = Vec::new();
        input.read_to_end(&mut bytes)?;
        if bytes.len() % 8 != 0 {
            return Err(Error::CheckpointIncompatible("parameter file is not a whole number of float64s".into()));
        }
        let values: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        self.set_flat_params(&values)
    }

    /// Writes `<name>.json` (architecture and step) and `<name>.bin`.
    pub fn save(&self, dir: &Path, name: &str, step: u64) -> Result<()> {
        let manifest = NetManifest {
            spec: self.spec.clone(),
            step,
            param_count: self.param_count(),
            byte_order: "little_endian_f64".into(),
        };
        std::fs::write(dir.join(format!("{name}.json")), serde_json::to_string_pretty(&manifest)? + "\n")?;
        self.write_params(std::fs::File::create(dir.join(format!("{name}.bin")))?)
    }

    pub fn load(dir: &Path, name: &str) -> Result<(Self, u64)> {
        let manifest: NetManifest = serde_json::from_slice(&std::fs::read(dir.join(format!("{name}.json")))?)?;
        let mut net = Mlp::zeros(manifest.spec)?;
        net.read_params(std::fs::File::open(dir.join(format!("{name}.bin")))?)?;
        Ok((net, manifest.step))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetManifest {
    pub spec: MlpSpec,
    pub step: u64,
    pub param_count: usize,
    pub byte_order: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    m: Grads,
    v: Grads,
    pub step: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, net: &Mlp) -> Self {
        Self {
            config,
            m: Grads::zeros_like(net),
            v: Grads::zeros_like(net),
            step: 0,
        }
    }

    /// One bias-corrected step descending `grads`. Parameters are left
    /// untouched if any gradient is non-finite.
    pub fn step(&mut self, net: &mut Mlp, grads: &Grads) -> Result<()> {
        if grads.layers.len() != net.layers.len() {
            return Err(Error::InvalidArgument("gradient does not match network".into()));
        }
        if !grads.is_finite() {
            return Err(Error::OptimizerDiverged);
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        let update = |p: &mut f64, m: &mut f64, v: &mut f64, g: f64| {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
        };
        for (((layer, g), m), v) in net
            .layers
            .iter_mut()
            .zip(&grads.layers)
            .zip(&mut self.m.layers)
            .zip(&mut self.v.layers)
        {
            Zip::from(&mut layer.w)
                .and(&mut m.w)
                .and(&mut v.w)
                .and(&g.w)
                .for_each(|p, m, v, &g| update(p, m, v, g));
            Zip::from(&mut layer.b)
                .and(&mut m.b)
                .and(&mut v.b)
                .and(&g.b)
                .for_each(|p, m, v, &g| update(p, m, v, g));
        }
        Ok(())
    }
}
