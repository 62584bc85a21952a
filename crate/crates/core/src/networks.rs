//! Encoder and decoder networks between `ℝ^f` states and `ℂ^c` latents.
//!
//! Latents travel as `2c` interleaved real channels. A variational encoder
//! emits `3c` outputs: the `2c` mean channels followed by one log-variance
//! per complex component.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::LatentState;
use crate::tensor::{relu, DenseTensor, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArchKind {
    /// A single affine layer each way.
    Linear,
    /// Four fully-connected layers each way, ReLU and dropout between them.
    Mlp4,
}

fn default_hidden() -> Vec<usize> {
    vec![64, 32, 16]
}

fn default_dropout() -> f64 {
    0.1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchitectureSpec {
    pub input_dim: usize,
    pub latent_dim: usize,
    pub kind: ArchKind,
    /// Encoder hidden widths, outermost first; the decoder mirrors them.
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
}

impl ArchitectureSpec {
    pub fn linear(input_dim: usize, latent_dim: usize) -> Self {
        Self {
            input_dim,
            latent_dim,
            kind: ArchKind::Linear,
            hidden: default_hidden(),
            dropout: 0.0,
        }
    }

    pub fn mlp4(input_dim: usize, latent_dim: usize) -> Self {
        Self {
            input_dim,
            latent_dim,
            kind: ArchKind::Mlp4,
            hidden: default_hidden(),
            dropout: default_dropout(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.latent_dim == 0 {
            return Err(Error::Configuration("input and latent dimensions must be positive".into()));
        }
        // c complex latents against f real inputs; c = f is allowed so the
        // two-dimensional linear system can use two latents.
        if self.latent_dim > self.input_dim {
            return Err(Error::Configuration(format!(
                "latent_dim {} exceeds input_dim {}",
                self.latent_dim, self.input_dim
            )));
        }
        if self.kind == ArchKind::Mlp4 {
            if self.hidden.len() != 3 || self.hidden.contains(&0) {
                return Err(Error::Configuration(format!(
                    "mlp4 needs three positive hidden widths, got {:?}",
                    self.hidden
                )));
            }
            if !(0.0..1.0).contains(&self.dropout) {
                return Err(Error::Configuration(format!("dropout {} not in [0, 1)", self.dropout)));
            }
        }
        Ok(())
    }

    fn encoder_dims(&self, variational: bool) -> Vec<usize> {
        let out = if variational { 3 } else { 2 } * self.latent_dim;
        match self.kind {
            ArchKind::Linear => vec![self.input_dim, out],
            ArchKind::Mlp4 => {
                let mut d = vec![self.input_dim];
                d.extend(&self.hidden);
                d.push(out);
                d
            }
        }
    }

    fn decoder_dims(&self) -> Vec<usize> {
        match self.kind {
            ArchKind::Linear => vec![2 * self.latent_dim, self.input_dim],
            ArchKind::Mlp4 => {
                let mut d = vec![2 * self.latent_dim];
                d.extend(self.hidden.iter().rev());
                d.push(self.input_dim);
                d
            }
        }
    }

    fn dropout_rate(&self) -> f64 {
        match self.kind {
            ArchKind::Linear => 0.0,
            ArchKind::Mlp4 => self.dropout,
        }
    }
}

/// Affine layer `x·W + b` with `W` stored `in × out`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weight: DenseTensor,
    pub bias: DenseTensor,
}

impl Layer {
    fn init<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let a = 1.0 / (fan_in as f64).sqrt();
        let w = (0..fan_in * fan_out).map(|_| rng.random_range(-a..a)).collect();
        Self {
            weight: DenseTensor::from_raw(fan_in, fan_out, w),
            bias: DenseTensor::zeros(1, fan_out),
        }
    }
}

/// Stack of affine layers; hidden layers are followed by ReLU then dropout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Layer>,
    pub dropout: f64,
}

impl Mlp {
    fn init<R: Rng + ?Sized>(dims: &[usize], dropout: f64, rng: &mut R) -> Self {
        Self {
            layers: dims.windows(2).map(|w| Layer::init(w[0], w[1], rng)).collect(),
            dropout,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().weight.cols()
    }

    /// Inference pass over the rows of `x`.
    pub fn forward(&self, x: &DenseTensor) -> Result<DenseTensor> {
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = h.matmul(&layer.weight)?.add_row(&layer.bias)?;
            if i < last {
                h = relu(&h);
            }
        }
        Ok(h)
    }

    /// Training pass; `vars` holds `(weight, bias)` leaves per layer and
    /// dropout is active only when `rng` is given.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        vars: &[(Var, Var)],
        x: Var,
        mut rng: Option<&mut dyn RngCore>,
    ) -> Result<Var> {
        let mut h = x;
        let last = vars.len() - 1;
        for (i, &(w, b)) in vars.iter().enumerate() {
            h = tape.matmul(h, w)?;
            h = tape.add_row(h, b)?;
            if i < last {
                h = tape.relu(h);
                if let Some(r) = rng.as_deref_mut() {
                    h = tape.dropout(h, self.dropout, r, true)?;
                }
            }
        }
        Ok(h)
    }

    pub fn tensors(&self) -> impl Iterator<Item = &DenseTensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias])
    }

    fn tensors_mut(&mut self) -> impl Iterator<Item = &mut DenseTensor> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias])
    }

    pub fn bind(&self, tape: &mut Tape) -> Vec<(Var, Var)> {
        self.layers
            .iter()
            .map(|l| (tape.leaf(l.weight.clone()), tape.leaf(l.bias.clone())))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub net: Mlp,
    pub latent_dim: usize,
    pub variational: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderParams {
    pub net: Mlp,
    /// Log of the isotropic Gaussian noise variance of `p(x | z)`; present
    /// only for the probabilistic decoder.
    pub log_noise_var: Option<f64>,
}

impl EncoderParams {
    pub fn tensors(&self) -> impl Iterator<Item = &DenseTensor> {
        self.net.tensors()
    }

    pub(crate) fn tensors_mut(&mut self) -> impl Iterator<Item = &mut DenseTensor> {
        self.net.tensors_mut()
    }

    /// Raw head outputs for a batch of states (`n × 2c` or `n × 3c`).
    pub fn forward(&self, x: &DenseTensor) -> Result<DenseTensor> {
        if x.cols() != self.net.input_dim() {
            return Err(Error::Dimension(format!(
                "state has {} entries, encoder expects {}",
                x.cols(),
                self.net.input_dim()
            )));
        }
        if !x.all_finite() {
            return Err(Error::Numeric("encoder input contains non-finite values".into()));
        }
        self.net.forward(x)
    }
}

impl DecoderParams {
    pub fn tensors(&self) -> impl Iterator<Item = &DenseTensor> {
        self.net.tensors()
    }

    pub(crate) fn tensors_mut(&mut self) -> impl Iterator<Item = &mut DenseTensor> {
        self.net.tensors_mut()
    }

    pub fn noise_variance(&self) -> Option<f64> {
        self.log_noise_var.map(f64::exp)
    }

    /// Decodes a batch of latent channel rows (`n × 2c`).
    pub fn forward(&self, z: &DenseTensor) -> Result<DenseTensor> {
        if z.cols() != self.net.input_dim() {
            return Err(Error::Dimension(format!(
                "latent has {} channels, decoder expects {}",
                z.cols(),
                self.net.input_dim()
            )));
        }
        if !z.all_finite() {
            return Err(Error::Numeric("decoder input contains non-finite values".into()));
        }
        self.net.forward(z)
    }
}

fn state_row(x: &[f64]) -> DenseTensor {
    DenseTensor::row(x.to_vec())
}

/// Deterministic encoding of a single state. For a variational encoder this
/// is the posterior mean.
pub fn encode(x: &[f64], params: &EncoderParams) -> Result<LatentState> {
    let out = params.forward(&state_row(x))?;
    LatentState::from_channels(&out.data()[..2 * params.latent_dim])
}

/// Posterior mean and complex variance `exp(log-variance head)`.
pub fn encode_variational(x: &[f64], params: &EncoderParams) -> Result<(LatentState, Vec<f64>)> {
    if !params.variational {
        return Err(Error::Configuration("encoder has no variance head".into()));
    }
    let out = params.forward(&state_row(x))?;
    let c = params.latent_dim;
    let mean = LatentState::from_channels(&out.data()[..2 * c])?;
    let var = out.data()[2 * c..3 * c].iter().map(|v| v.exp()).collect();
    Ok((mean, var))
}

/// Reconstruction (the mean of `p(x | z)` for a probabilistic decoder).
pub fn decode(z: &LatentState, params: &DecoderParams) -> Result<Vec<f64>> {
    Ok(params.forward(&state_row(&z.to_channels()))?.into_data())
}

/// Fresh parameters: weights `U(−1/√fan_in, 1/√fan_in)`, zero biases, zero
/// log noise variance. Encoder and decoder draw from separate streams of a
/// generator seeded with `seed`.
pub fn init_params(spec: &ArchitectureSpec, variational: bool, seed: u64) -> Result<(EncoderParams, DecoderParams)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let enc = Mlp::init(&spec.encoder_dims(variational), spec.dropout_rate(), &mut rng);
    rng.set_stream(2);
    let dec = Mlp::init(&spec.decoder_dims(), spec.dropout_rate(), &mut rng);
    Ok((
        EncoderParams {
            net: enc,
            latent_dim: spec.latent_dim,
            variational,
        },
        DecoderParams {
            net: dec,
            log_noise_var: variational.then_some(0.0),
        },
    ))
}
