use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Where the context vector `t_B` comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ContextSpec {
    /// No type head: the plain CaRE scorer.
    None,
    /// Precomputed vectors from a context cache (masked LM or typer).
    Cached { provider: String, dim: usize },
    /// `t_B = [h; r]`, recomputed from the live encodings.
    Concat,
    /// `t_B = h + r`, recomputed from the live encodings.
    Add,
}

impl ContextSpec {
    pub fn has_type_head(&self) -> bool {
        !matches!(self, ContextSpec::None)
    }

    pub fn provider_id(&self) -> &str {
        match self {
            ContextSpec::None => "none",
            ContextSpec::Cached { provider, .. } => provider,
            ContextSpec::Concat => "concat",
            ContextSpec::Add => "add",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TypeScoreVariant {
    Euclid,
    Dot,
}

impl std::str::FromStr for TypeScoreVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euclid" => Ok(TypeScoreVariant::Euclid),
            "dot" => Ok(TypeScoreVariant::Dot),
            other => Err(Error::Config(format!("unknown type score `{other}`"))),
        }
    }
}

/// How NP embeddings are initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NpInit {
    Random,
    /// Copy LM phrase vectors; `d_e` must equal their dimension.
    Lm,
    /// Copy LM phrase vectors and learn a projection down to `d_e`.
    LmProjected,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WordInit {
    Random,
    Lm,
}

/// Architecture and scoring hyperparameters, stored in `config.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_e: usize,
    pub d_r: usize,
    pub d_w: usize,
    pub gru_hidden: usize,
    /// Width of the 2-d reshape of each encoding; it must divide `d_e` and
    /// `d_r`.
    pub reshape_width: usize,
    pub conv_channels: usize,
    pub kernel_size: usize,
    pub input_dropout: f64,
    pub feature_dropout: f64,
    pub hidden_dropout: f64,
    pub bn_eps: f64,
    pub bn_momentum: f64,
    pub type_dim: usize,
    pub gamma: f64,
    pub type_score_variant: TypeScoreVariant,
    pub context: ContextSpec,
    pub np_init: NpInit,
    pub word_init: WordInit,
    #[serde(default)]
    pub init_vectors: Option<PathBuf>,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_e: 300,
            d_r: 300,
            d_w: 300,
            gru_hidden: 150,
            reshape_width: 20,
            conv_channels: 32,
            kernel_size: 3,
            input_dropout: 0.2,
            feature_dropout: 0.3,
            hidden_dropout: 0.2,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
            type_dim: 300,
            gamma: 5.0,
            type_score_variant: TypeScoreVariant::Euclid,
            context: ContextSpec::Cached {
                provider: "mlm-base".into(),
                dim: 768,
            },
            np_init: NpInit::Random,
            word_init: WordInit::Random,
            init_vectors: None,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// A small configuration for tests and examples: `d_e = d_r = 8`,
    /// `d_τ = 4`, reshaped to `2 × 4`.
    pub fn toy(context: ContextSpec) -> Self {
        ModelConfig {
            d_e: 8,
            d_r: 8,
            d_w: 6,
            gru_hidden: 5,
            reshape_width: 4,
            conv_channels: 3,
            kernel_size: 3,
            type_dim: 4,
            context,
            ..ModelConfig::default()
        }
    }

    /// Same config with every dropout rate set to zero.
    pub fn without_dropout(mut self) -> Self {
        self.input_dropout = 0.0;
        self.feature_dropout = 0.0;
        self.hidden_dropout = 0.0;
        self
    }

    /// Dimension of the context vector `t_B`, if there is a type head.
    pub fn context_dim(&self) -> Option<usize> {
        match &self.context {
            ContextSpec::None => None,
            ContextSpec::Cached { dim, .. } => Some(*dim),
            ContextSpec::Concat => Some(self.d_e + self.d_r),
            ContextSpec::Add => Some(self.d_e),
        }
    }

    pub fn image_height(&self) -> usize {
        (self.d_e + self.d_r) / self.reshape_width
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        for (name, v) in [
            ("d_e", self.d_e),
            ("d_r", self.d_r),
            ("d_w", self.d_w),
            ("gru_hidden", self.gru_hidden),
            ("reshape_width", self.reshape_width),
            ("conv_channels", self.conv_channels),
            ("kernel_size", self.kernel_size),
            ("type_dim", self.type_dim),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.d_e % self.reshape_width != 0 || self.d_r % self.reshape_width != 0 {
            return bad(format!(
                "reshape_width {} must divide d_e {} and d_r {}",
                self.reshape_width, self.d_e, self.d_r
            ));
        }
        if self.kernel_size > self.reshape_width || self.kernel_size > self.image_height() {
            return bad(format!("kernel {} larger than the stacked image", self.kernel_size));
        }
        for (name, p) in [
            ("input_dropout", self.input_dropout),
            ("feature_dropout", self.feature_dropout),
            ("hidden_dropout", self.hidden_dropout),
        ] {
            if !(0.0..1.0).contains(&p) {
                return bad(format!("{name} must lie in [0, 1)"));
            }
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return bad("gamma must be a nonnegative number".into());
        }
        if matches!(self.context, ContextSpec::Add) && self.d_e != self.d_r {
            return bad("additive context needs d_e = d_r".into());
        }
        Ok(())
    }
}
