//! Generative model variants and their objectives.
//!
//! [`Model`] bundles the parameter store with whichever sub-models the
//! variant needs: an [`AgentModel`] for all VRNN-style variants, a
//! [`MacroModel`] for the hierarchical variant and a [`VraeMi`] for the
//! trajectory-latent baseline. Parameter names are prefixed `agent.`,
//! `macro.` or `vrae.` so training can give each part its own optimizer.

pub mod agent;
mod batch;
pub mod checkpoint;
pub mod gaussian;
pub mod macro_model;
pub mod vrae;

pub use agent::{normal_noise, AgentModel, AgentState, ElboTerms};
pub use batch::{labels_tensor, states_tensor};
pub use checkpoint::{read_manifest, Manifest, ModelCheckpoint, OptimizerSnapshot, TrainingState};
pub use gaussian::{gaussian_log_density, gumbel_softmax, kl_diag_gaussian, reparam_sample, GaussianParams};
pub use macro_model::{MacroModel, MacroState};
pub use vrae::{LatentPosterior, VraeMi, VraeTerms};

use crate::dataset::{Domain, NormStats};
use crate::nn::{ParamBuilder, Params, TensorData};
use candle_core::DType;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fmt;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("the hierarchical model needs macro-intents")]
    MissingMacroIntents,
    #[error("non-finite {quantity} at timestep {step}")]
    NonFinite { step: usize, quantity: &'static str },
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    RnnGauss,
    VrnnSingle,
    VrnnIndep,
    VrnnMixed,
    VraeMi,
    Hierarchical,
}

impl Variant {
    pub const ALL: [Variant; 6] =
        [Variant::RnnGauss, Variant::VrnnSingle, Variant::VrnnIndep, Variant::VrnnMixed, Variant::VraeMi, Variant::Hierarchical];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::RnnGauss => "rnn-gauss",
            Variant::VrnnSingle => "vrnn-single",
            Variant::VrnnIndep => "vrnn-indep",
            Variant::VrnnMixed => "vrnn-mixed",
            Variant::VraeMi => "vrae-mi",
            Variant::Hierarchical => "hierarchical",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Variant::ALL.into_iter().find(|v| v.as_str() == s).ok_or_else(|| format!("unknown variant `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VraeLatent {
    Categorical,
    Gaussian,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub domain: Domain,
    pub agents: usize,
    pub dim: usize,
    /// Per-head latent size; the category count for a categorical VRAE-mi
    /// latent; ignored by rnn-gauss.
    pub latent_dim: usize,
    pub rnn_width: usize,
    pub rnn_layers: usize,
    pub mlp_width: usize,
    pub macro_categories: usize,
    pub macro_width: usize,
    pub lambda_mi: f64,
    pub gumbel_tau: f64,
    pub vrae_latent: VraeLatent,
}

impl ModelConfig {
    /// Full-size defaults for a variant on a domain.
    pub fn new(variant: Variant, domain: Domain) -> Self {
        let (_, agents, dim) = domain.default_shape();
        let (rnn_width, latent_dim) = match variant {
            Variant::RnnGauss => (900, 0),
            Variant::VrnnSingle => (900, 80),
            Variant::VrnnIndep => (250, 16),
            Variant::VrnnMixed => (600, 16),
            Variant::VraeMi => (200, 8),
            Variant::Hierarchical => (200, 16),
        };
        let macro_categories = match (variant, domain) {
            (Variant::Hierarchical, Domain::Basketball) => 90,
            (Variant::Hierarchical, Domain::Boids) => 2,
            _ => 0,
        };
        Self {
            variant,
            domain,
            agents,
            dim,
            latent_dim,
            rnn_width,
            rnn_layers: 2,
            mlp_width: 200,
            macro_categories,
            macro_width: 200,
            lambda_mi: 1.0,
            gumbel_tau: 1.0,
            vrae_latent: VraeLatent::Categorical,
        }
    }

    pub fn is_hierarchical(&self) -> bool {
        self.variant == Variant::Hierarchical
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.agents == 0 || self.dim == 0 {
            return bad("agents and dim must be positive");
        }
        if self.rnn_width == 0 || self.rnn_layers == 0 || self.mlp_width == 0 {
            return bad("widths and layer counts must be positive");
        }
        if self.variant != Variant::RnnGauss && self.latent_dim == 0 {
            return bad("latent_dim must be positive");
        }
        if self.is_hierarchical() && (self.macro_categories < 2 || self.macro_width == 0) {
            return bad("the hierarchical model needs at least 2 macro categories and a positive macro width");
        }
        if !self.is_hierarchical() && self.macro_categories != 0 {
            return bad("macro_categories applies to the hierarchical model only");
        }
        if self.variant == Variant::VraeMi {
            if self.vrae_latent == VraeLatent::Categorical && self.latent_dim < 2 {
                return bad("a categorical latent needs at least 2 categories");
            }
            if !(self.gumbel_tau > 0.0) || !self.lambda_mi.is_finite() || self.lambda_mi < 0.0 {
                return bad("gumbel_tau must be positive and lambda_mi finite and non-negative");
            }
        }
        Ok(())
    }
}

/// Parameters plus the sub-models they feed.
#[derive(Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub norm: NormStats,
    params: Params,
    dtype: DType,
    agent: Option<AgentModel>,
    macro_model: Option<MacroModel>,
    vrae: Option<VraeMi>,
}

impl Model {
    fn construct(config: &ModelConfig, norm: NormStats, mut pb: ParamBuilder) -> Result<Self> {
        config.validate()?;
        norm.validate(config.dim).map_err(|e| ModelError::Config(e.to_string()))?;
        let dtype = pb.dtype();
        let (agent, macro_model, vrae) = match config.variant {
            Variant::VraeMi => (None, None, Some(VraeMi::new(config, &mut pb)?)),
            Variant::Hierarchical => {
                let a = AgentModel::new(config, &mut pb)?;
                (Some(a), Some(MacroModel::new(config, &mut pb)?), None)
            }
            _ => (Some(AgentModel::new(config, &mut pb)?), None, None),
        };
        Ok(Self { config: config.clone(), norm, params: pb.finish(), dtype, agent, macro_model, vrae })
    }

    /// Freshly initialized model; equal seeds give equal parameters.
    pub fn build(config: &ModelConfig, norm: NormStats, seed: u64, dtype: DType) -> Result<Self> {
        Self::construct(config, norm, ParamBuilder::new(dtype, seed))
    }

    pub fn from_checkpoint(ckpt: &ModelCheckpoint, dtype: DType) -> Result<Self> {
        let source: HashMap<String, TensorData> = ckpt.params.iter().cloned().collect();
        let model = Self::construct(&ckpt.config, ckpt.norm.clone(), ParamBuilder::from_source(dtype, &source))?;
        if model.params.len() != source.len() {
            return Err(ModelError::Checkpoint(format!(
                "checkpoint holds {} tensors, the configuration uses {}",
                source.len(),
                model.params.len()
            )));
        }
        Ok(model)
    }

    pub fn checkpoint(&self) -> Result<ModelCheckpoint> {
        Ok(ModelCheckpoint { config: self.config.clone(), norm: self.norm.clone(), params: self.params.export()?, training: None })
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn agent(&self) -> Option<&AgentModel> {
        self.agent.as_ref()
    }

    pub fn macro_model(&self) -> Option<&MacroModel> {
        self.macro_model.as_ref()
    }

    pub fn vrae(&self) -> Option<&VraeMi> {
        self.vrae.as_ref()
    }

    pub fn set_gumbel_tau(&mut self, tau: f64) -> Result<()> {
        if !(tau > 0.0) {
            return Err(ModelError::Config("gumbel_tau must be positive".into()));
        }
        self.config.gumbel_tau = tau;
        if let Some(v) = &mut self.vrae {
            v.set_tau(tau);
        }
        Ok(())
    }
}

/// Initialized checkpoint for `config`.
pub fn build_model(config: &ModelConfig, norm: NormStats, seed: u64) -> Result<ModelCheckpoint> {
    Model::build(config, norm, seed, DType::F32)?.checkpoint()
}
