use std::fmt;
use std::str::FromStr;

use crate::config_text::{apply_entries, bool_value, parse_entries, render, value, ConfigKeys};
use crate::diffusion::DiffusionConfig;
use crate::error::{Error, Result};
use crate::fusion::DEFAULT_WINDOW;
use crate::protein_io::{FeatureConfig, GraphConfig};

/// How the two stacks exchange information.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Coupling {
    /// Learnable `beta` (kernel or free logit) and `gamma` logits.
    Learned,
    /// Constant rates; no diffusion parameters are registered.
    Fixed { beta: f64, gamma: f64 },
    /// Diffusion skipped entirely: attention is only row-normalised and the GNN sees `S~`.
    Bypass,
}

impl fmt::Display for Coupling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Coupling::Learned => write!(f, "learned"),
            Coupling::Bypass => write!(f, "bypass"),
            Coupling::Fixed { beta, gamma } => write!(f, "fixed({beta},{gamma})"),
        }
    }
}

impl FromStr for Coupling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidConfig(format!("coupling {s:?}: expected learned, bypass or fixed(beta,gamma)"));
        match s {
            "learned" => Ok(Coupling::Learned),
            "bypass" => Ok(Coupling::Bypass),
            _ => {
                let inner = s.strip_prefix("fixed(").and_then(|r| r.strip_suffix(')')).ok_or_else(bad)?;
                let (b, g) = inner.split_once(',').ok_or_else(bad)?;
                Ok(Coupling::Fixed { beta: b.trim().parse().map_err(|_| bad())?, gamma: g.trim().parse().map_err(|_| bad())? })
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub d: usize,
    pub heads: usize,
    pub gnn_layers: usize,
    pub tr_layers: usize,
    pub d_ffn: usize,
    pub diffusion: DiffusionConfig,
    pub coupling: Coupling,
    /// Half-width of the local fusion window.
    pub window: usize,
    pub dropout: f64,
    /// L2 penalty on weight matrices.
    pub lambda: f64,
    pub seed: u64,
    pub features: FeatureConfig,
    pub graph: GraphConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 32,
            heads: 2,
            gnn_layers: 2,
            tr_layers: 2,
            d_ffn: 128,
            diffusion: DiffusionConfig::default(),
            coupling: Coupling::Learned,
            window: DEFAULT_WINDOW,
            dropout: 0.1,
            lambda: 0.0,
            seed: 0,
            features: FeatureConfig::default(),
            graph: GraphConfig::default(),
        }
    }
}

impl ModelConfig {
    /// Number of layers at which the stacks exchange diffused artifacts.
    pub fn couplings(&self) -> usize {
        self.gnn_layers.min(self.tr_layers)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return bad(format!("width {} must be a positive multiple of heads {}", self.d, self.heads));
        }
        if self.d_ffn == 0 {
            return bad("d_ffn must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} must lie in [0, 1)", self.dropout));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return bad(format!("lambda {} must be finite and >= 0", self.lambda));
        }
        if let Coupling::Fixed { beta, gamma } = self.coupling {
            if !(0.0..1.0).contains(&beta) || !(0.0..1.0).contains(&gamma) {
                return bad(format!("fixed rates ({beta}, {gamma}) must lie in [0, 1)"));
            }
        }
        let f = &self.features;
        if f.aa_dim == 0 || f.coord_dim == 0 || f.edge_dim == 0 || f.rbf_count == 0 || f.angle_count == 0 {
            return bad("feature widths must be positive".into());
        }
        if !(self.graph.cutoff > 0.0) || !(self.graph.sigma > 0.0) {
            return bad("graph cutoff and sigma must be positive".into());
        }
        self.diffusion.validate()
    }

    pub fn to_text(&self) -> String {
        render(&self.entries())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        apply_entries(&parse_entries(text)?, &mut [&mut cfg])?;
        cfg.validate()?;
        Ok(cfg)
    }
}

impl ConfigKeys for ModelConfig {
    fn set(&mut self, key: &str, v: &str) -> Result<bool> {
        let df = &mut self.diffusion;
        let f = &mut self.features;
        match key {
            "model.d" => self.d = value(key, v)?,
            "model.heads" => self.heads = value(key, v)?,
            "model.gnn_layers" => self.gnn_layers = value(key, v)?,
            "model.tr_layers" => self.tr_layers = value(key, v)?,
            "model.d_ffn" => self.d_ffn = value(key, v)?,
            "model.coupling" => self.coupling = v.parse()?,
            "model.window" => self.window = value(key, v)?,
            "model.dropout" => self.dropout = value(key, v)?,
            "model.lambda" => self.lambda = value(key, v)?,
            "model.seed" => self.seed = value(key, v)?,
            "diffusion.steps" => df.steps = value(key, v)?,
            "diffusion.beta_init" => df.beta_init = value(key, v)?,
            "diffusion.gamma_init" => df.gamma_init = value(key, v)?,
            "diffusion.tau" => df.tau = value(key, v)?,
            "diffusion.eps_nbr" => df.eps_nbr = value(key, v)?,
            "diffusion.k_max" => df.k_max = value(key, v)?,
            "diffusion.kernel" => df.kernel_enabled = bool_value(key, v)?,
            "diffusion.self_loops" => df.self_loops = bool_value(key, v)?,
            "features.aa_dim" => f.aa_dim = value(key, v)?,
            "features.coord_dim" => f.coord_dim = value(key, v)?,
            "features.edge_dim" => f.edge_dim = value(key, v)?,
            "features.rbf_count" => f.rbf_count = value(key, v)?,
            "features.rbf_max" => f.rbf_max = value(key, v)?,
            "features.rbf_gamma" => f.rbf_gamma = value(key, v)?,
            "features.angle_count" => f.angle_count = value(key, v)?,
            "features.angle_gamma" => f.angle_gamma = value(key, v)?,
            "graph.cutoff" => self.graph.cutoff = value(key, v)?,
            "graph.sigma" => self.graph.sigma = value(key, v)?,
            "graph.self_loops" => self.graph.self_loops = bool_value(key, v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn entries(&self) -> Vec<(String, String)> {
        let df = &self.diffusion;
        let f = &self.features;
        [
            ("model.d", self.d.to_string()),
            ("model.heads", self.heads.to_string()),
            ("model.gnn_layers", self.gnn_layers.to_string()),
            ("model.tr_layers", self.tr_layers.to_string()),
            ("model.d_ffn", self.d_ffn.to_string()),
            ("model.coupling", self.coupling.to_string()),
            ("model.window", self.window.to_string()),
            ("model.dropout", self.dropout.to_string()),
            ("model.lambda", self.lambda.to_string()),
            ("model.seed", self.seed.to_string()),
            ("diffusion.steps", df.steps.to_string()),
            ("diffusion.beta_init", df.beta_init.to_string()),
            ("diffusion.gamma_init", df.gamma_init.to_string()),
            ("diffusion.tau", df.tau.to_string()),
            ("diffusion.eps_nbr", df.eps_nbr.to_string()),
            ("diffusion.k_max", df.k_max.to_string()),
            ("diffusion.kernel", df.kernel_enabled.to_string()),
            ("diffusion.self_loops", df.self_loops.to_string()),
            ("features.aa_dim", f.aa_dim.to_string()),
            ("features.coord_dim", f.coord_dim.to_string()),
            ("features.edge_dim", f.edge_dim.to_string()),
            ("features.rbf_count", f.rbf_count.to_string()),
            ("features.rbf_max", f.rbf_max.to_string()),
            ("features.rbf_gamma", f.rbf_gamma.to_string()),
            ("features.angle_count", f.angle_count.to_string()),
            ("features.angle_gamma", f.angle_gamma.to_string()),
            ("graph.cutoff", self.graph.cutoff.to_string()),
            ("graph.sigma", self.graph.sigma.to_string()),
            ("graph.self_loops", self.graph.self_loops.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }
}
