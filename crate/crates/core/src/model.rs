//! A complete reduced-order model: encoder, decoder and latent spectrum,
//! plus the flat parameter-block view used by the optimizer and the
//! versioned JSON checkpoint format.

use std::fs;
use std::path::Path;

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::{spectrum_on_tape, DecayParam, SpectrumParams};
use crate::networks::{init_params, ArchitectureSpec, DecoderParams, EncoderParams};
use crate::optimize::AdamState;
use crate::tensor::{DenseTensor, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Deterministic,
    Probabilistic,
}

impl Variant {
    pub fn is_probabilistic(self) -> bool {
        self == Variant::Probabilistic
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub arch: ArchitectureSpec,
    pub variant: Variant,
    pub encoder: EncoderParams,
    pub decoder: DecoderParams,
    pub spectrum: SpectrumParams,
}

/// Tape leaves for every parameter block of a [`Model`].
pub struct BoundModel {
    pub encoder: Vec<(Var, Var)>,
    pub decoder: Vec<(Var, Var)>,
    pub log_noise_var: Option<Var>,
    pub decay_raw: Var,
    pub freq: Var,
    /// `Re λ` as a `1 × c` node (after the positivity map if any).
    pub decay: Var,
}

impl BoundModel {
    /// Leaves in [`Model::blocks`] order.
    pub fn leaves(&self) -> Vec<Var> {
        let mut v: Vec<Var> = self.encoder.iter().chain(&self.decoder).flat_map(|&(w, b)| [w, b]).collect();
        v.extend(self.log_noise_var);
        v.push(self.decay_raw);
        v.push(self.freq);
        v
    }
}

impl Model {
    /// Fresh model. The probabilistic variant uses the softplus decay
    /// parameterization and a variational encoder.
    pub fn init(arch: &ArchitectureSpec, variant: Variant, seed: u64) -> Result<Self> {
        let prob = variant.is_probabilistic();
        let (encoder, decoder) = init_params(arch, prob, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(3);
        let param = if prob { DecayParam::Softplus } else { DecayParam::Raw };
        Ok(Self {
            arch: arch.clone(),
            variant,
            encoder,
            decoder,
            spectrum: SpectrumParams::init(arch.latent_dim, param, &mut rng),
        })
    }

    pub fn lambda(&self) -> Vec<Complex64> {
        self.spectrum.lambda()
    }

    pub fn block_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for (side, net) in [("encoder", &self.encoder.net), ("decoder", &self.decoder.net)] {
            for i in 0..net.layers.len() {
                names.push(format!("{side}.{i}.weight"));
                names.push(format!("{side}.{i}.bias"));
            }
        }
        if self.decoder.log_noise_var.is_some() {
            names.push("decoder.log_noise_var".into());
        }
        names.push("spectrum.decay".into());
        names.push("spectrum.freq".into());
        names
    }

    /// Every trainable quantity as a tensor, in a fixed order.
    pub fn blocks(&self) -> Vec<DenseTensor> {
        let mut out: Vec<DenseTensor> = self.encoder.tensors().chain(self.decoder.tensors()).cloned().collect();
        if let Some(l) = self.decoder.log_noise_var {
            out.push(DenseTensor::scalar(l));
        }
        out.push(DenseTensor::row(self.spectrum.decay_raw.clone()));
        out.push(DenseTensor::row(self.spectrum.freq.clone()));
        out
    }

    /// Inverse of [`Model::blocks`].
    pub fn set_blocks(&mut self, blocks: &[DenseTensor]) -> Result<()> {
        let current = self.blocks();
        if blocks.len() != current.len() {
            return Err(Error::Dimension(format!(
                "expected {} parameter blocks, got {}",
                current.len(),
                blocks.len()
            )));
        }
        for ((name, a), b) in self.block_names().iter().zip(&current).zip(blocks) {
            if a.shape() != b.shape() {
                return Err(Error::Dimension(format!(
                    "block {name}: expected {:?}, got {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
        }
        let mut it = blocks.iter();
        for t in self.encoder.tensors_mut().chain(self.decoder.tensors_mut()) {
            t.data_mut().copy_from_slice(it.next().unwrap().data());
        }
        if let Some(l) = self.decoder.log_noise_var.as_mut() {
            *l = it.next().unwrap().item();
        }
        self.spectrum.decay_raw = it.next().unwrap().data().to_vec();
        self.spectrum.freq = it.next().unwrap().data().to_vec();
        Ok(())
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundModel {
        let encoder = self.encoder.net.bind(tape);
        let decoder = self.decoder.net.bind(tape);
        let log_noise_var = self.decoder.log_noise_var.map(|l| tape.leaf(DenseTensor::scalar(l)));
        let decay_raw = tape.leaf(DenseTensor::row(self.spectrum.decay_raw.clone()));
        let freq = tape.leaf(DenseTensor::row(self.spectrum.freq.clone()));
        let decay = spectrum_on_tape(tape, self.spectrum.param, decay_raw);
        BoundModel {
            encoder,
            decoder,
            log_noise_var,
            decay_raw,
            freq,
            decay,
        }
    }

    /// Structural consistency between the architecture and the stored
    /// arrays; run on every loaded checkpoint.
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        let reference = Model::init(&self.arch, self.variant, 0)?;
        let shapes = |m: &Model| m.blocks().iter().map(|b| b.shape().to_vec()).collect::<Vec<_>>();
        if shapes(self) != shapes(&reference) || self.spectrum.param != reference.spectrum.param {
            return Err(Error::Configuration(
                "stored parameters do not match the architecture".into(),
            ));
        }
        if self.blocks().iter().any(|b| !b.all_finite()) {
            return Err(Error::Numeric("model contains non-finite parameters".into()));
        }
        Ok(())
    }
}

pub const CHECKPOINT_FORMAT: &str = "tsrom-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to resume training bit-exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config_digest: String,
    pub iteration: usize,
    pub model: Model,
    pub adam: Option<AdamState>,
}

impl Checkpoint {
    pub fn new(config_digest: &str, iteration: usize, model: Model, adam: Option<AdamState>) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config_digest: config_digest.into(),
            iteration,
            model,
            adam,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str, path: &Path) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text).map_err(|e| Error::format(path, e.to_string()))?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::format(
                path,
                format!("unsupported checkpoint {} v{}", ck.format, ck.version),
            ));
        }
        ck.model.validate()?;
        Ok(ck)
    }

    /// Writes through a temporary sibling and a rename so readers never see
    /// a partial file.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, path)
    }
}

/// Writes through a sibling temporary file and a rename, so readers never
/// see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
