//! Run configuration: one TOML file describes an experiment end to end
//! (data generator, model, training).
//!
//! ```toml
//! experiment = "multiscale"
//! variant = "deterministic"
//! seed = 0
//!
//! [multiscale]        # generator section; defaults apply when absent
//! n_series = 40
//!
//! [model]
//! kind = "linear"
//! latent_dim = 2
//!
//! [train]
//! iterations = 5000
//! learning_rate = 1e-3
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datagen::{
    config_digest, gen_hidden_multiscale, gen_ks, gen_linear_ode, Dataset, KsConfig, LinearOdeConfig, MultiscaleConfig,
};
use crate::error::{Error, Result};
use crate::model::Variant;
use crate::networks::{ArchKind, ArchitectureSpec};
use crate::optimize::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    LinearOde,
    Multiscale,
    Ks,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Experiment::LinearOde => "linear-ode",
            Experiment::Multiscale => "multiscale",
            Experiment::Ks => "ks",
        }
    }
}

/// Architecture without the input width, which comes from the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub kind: ArchKind,
    pub latent_dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dropout: Option<f64>,
}

fn deterministic() -> Variant {
    Variant::Deterministic
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub experiment: Experiment,
    #[serde(default = "deterministic")]
    pub variant: Variant,
    /// Training seed.
    #[serde(default)]
    pub seed: u64,
    /// Generator seed; the training seed when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_seed: Option<u64>,
    #[serde(default, rename = "linear-ode", skip_serializing_if = "Option::is_none")]
    pub linear_ode: Option<LinearOdeConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub multiscale: Option<MultiscaleConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ks: Option<KsConfig>,
    pub model: ModelSection,
    pub train: TrainConfig,
}

impl RunConfig {
    /// Parses and validates; errors name the offending line or field.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Configuration(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Configuration(msg) => Error::Configuration(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let present = [
            (Experiment::LinearOde, self.linear_ode.is_some()),
            (Experiment::Multiscale, self.multiscale.is_some()),
            (Experiment::Ks, self.ks.is_some()),
        ];
        if let Some((other, _)) = present.iter().find(|(e, p)| *p && *e != self.experiment) {
            return Err(Error::Configuration(format!(
                "section [{}] does not belong to experiment `{}`",
                other.name(),
                self.experiment.name()
            )));
        }
        self.arch(self.input_dim())?;
        self.train.validate()
    }

    pub fn data_seed(&self) -> u64 {
        self.data_seed.unwrap_or(self.seed)
    }

    fn linear_ode(&self) -> LinearOdeConfig {
        self.linear_ode.clone().unwrap_or_default()
    }

    fn multiscale(&self) -> MultiscaleConfig {
        self.multiscale.clone().unwrap_or_default()
    }

    fn ks(&self) -> KsConfig {
        self.ks.clone().unwrap_or_default()
    }

    /// State dimension of the configured generator.
    pub fn input_dim(&self) -> usize {
        match self.experiment {
            Experiment::LinearOde => self.linear_ode().matrix.len(),
            Experiment::Multiscale => self.multiscale().dim,
            Experiment::Ks => self.ks().grid,
        }
    }

    pub fn arch(&self, input_dim: usize) -> Result<ArchitectureSpec> {
        let mut spec = match self.model.kind {
            ArchKind::Linear => ArchitectureSpec::linear(input_dim, self.model.latent_dim),
            ArchKind::Mlp4 => ArchitectureSpec::mlp4(input_dim, self.model.latent_dim),
        };
        if let Some(h) = &self.model.hidden {
            spec.hidden = h.clone();
        }
        if let Some(d) = self.model.dropout {
            spec.dropout = d;
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn generate(&self) -> Result<Dataset> {
        let seed = self.data_seed();
        match self.experiment {
            Experiment::LinearOde => gen_linear_ode(&self.linear_ode(), seed),
            Experiment::Multiscale => gen_hidden_multiscale(&self.multiscale(), seed),
            Experiment::Ks => gen_ks(&self.ks(), seed),
        }
    }

    /// Digest the generator records in a dataset built from this config.
    pub fn generator_digest(&self) -> String {
        match self.experiment {
            Experiment::LinearOde => config_digest(&self.linear_ode()),
            Experiment::Multiscale => config_digest(&self.multiscale()),
            Experiment::Ks => config_digest(&self.ks()),
        }
    }

    /// Digest of the whole run configuration.
    pub fn digest(&self) -> String {
        config_digest(self)
    }

    /// Refuses datasets produced by a different generator configuration.
    pub fn check_dataset(&self, ds: &Dataset) -> Result<()> {
        let m = &ds.manifest;
        let want = format!("{}:{}:{}", self.experiment.name(), self.generator_digest(), self.data_seed());
        let found = format!("{}:{}:{}", m.generator, m.config_digest, m.seed);
        if want != found {
            return Err(Error::DigestMismatch { expected: want, found });
        }
        Ok(())
    }
}
