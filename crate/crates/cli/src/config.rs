//! Flag and config-file settings. Every flag has a same-named key in the
//! config file (snake_case); a flag given on the command line wins.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, ValueEnum};
use serde::Deserialize;

use roundattn::{ModelConfig, SelectionPolicy, Strategy};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyArg {
    Fixed,
    Top,
    Adaptive,
    All,
    Token,
    /// Full history, no selection. Only meaningful in `--policies`.
    Baseline,
}

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Settings {
    /// Number of transformer layers.
    #[arg(long)]
    pub model_layers: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub d_model: Option<usize>,
    /// Weight seed, recorded in every report (default 42).
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub strategy: Option<StrategyArg>,
    /// Mass threshold for `fixed`.
    #[arg(long)]
    pub v: Option<f64>,
    /// Kept fraction for `top`.
    #[arg(long)]
    pub fraction: Option<f64>,
    /// Std multiplier for `adaptive`.
    #[arg(long)]
    pub kappa: Option<f64>,
    #[arg(long)]
    pub min_rounds: Option<usize>,
    /// Number of lower (full-history) layers.
    #[arg(long)]
    pub lw: Option<usize>,
    /// Directory of conversations to calibrate the lower-layer count on.
    #[arg(long)]
    pub calibrate: Option<PathBuf>,
    /// Use the absolute-threshold watershed criterion with this tau.
    #[arg(long)]
    pub tau: Option<f64>,
    /// Turns without selection before a round is dropped; 0 disables.
    #[arg(long)]
    pub drop_window: Option<usize>,
    #[arg(long)]
    pub drop_protect: Option<usize>,
    #[arg(long)]
    pub max_decode: Option<usize>,
    /// Store generated answers as history instead of recorded ones.
    #[arg(long)]
    #[serde(default)]
    pub no_teacher_forcing: bool,
    /// Policies for `compare`, comma separated.
    #[arg(long, value_enum, value_delimiter = ',')]
    #[serde(default)]
    pub policies: Vec<StrategyArg>,
    /// Kept rounds K for `memory`.
    #[arg(long)]
    pub k: Option<usize>,
    /// Total rounds T for `memory`.
    #[arg(long)]
    pub t: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub seq_len: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    /// Output directory; reports go to stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

macro_rules! overlay {
    ($dst:ident, $src:ident; $($f:ident),*) => {
        $( if $dst.$f.is_none() { $dst.$f = $src.$f.clone(); } )*
    };
}

impl Settings {
    /// Fills every unset flag from `file`.
    pub fn with_file(mut self, file: Settings) -> Self {
        overlay!(self, file; model_layers, heads, d_model, seed, strategy, v, fraction, kappa,
            min_rounds, lw, calibrate, tau, drop_window, drop_protect, max_decode, k, t, batch,
            seq_len, hidden, out);
        self.no_teacher_forcing |= file.no_teacher_forcing;
        if self.policies.is_empty() {
            self.policies = file.policies;
        }
        self
    }

    pub fn load(flags: Settings, path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(flags);
        };
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let file: Settings =
            toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        Ok(flags.with_file(file))
    }

    pub fn model(&self) -> ModelConfig {
        let d = ModelConfig::default();
        ModelConfig {
            num_layers: self.model_layers.unwrap_or(d.num_layers),
            num_heads: self.heads.unwrap_or(d.num_heads),
            d_model: self.d_model.unwrap_or(d.d_model),
            seed: self.seed.unwrap_or(d.seed),
            ..d
        }
    }

    pub fn strategy(&self, arg: StrategyArg) -> Option<Strategy> {
        Some(match arg {
            StrategyArg::Fixed => Strategy::Fixed {
                v: self.v.unwrap_or(0.1),
            },
            StrategyArg::Top => Strategy::TopPercent {
                fraction: self.fraction.unwrap_or(0.1),
            },
            StrategyArg::Adaptive => Strategy::Adaptive {
                kappa: self.kappa.unwrap_or(1.0),
            },
            StrategyArg::All => Strategy::All,
            StrategyArg::Token => Strategy::TokenBaseline,
            StrategyArg::Baseline => return None,
        })
    }

    pub fn policy(&self, arg: StrategyArg) -> anyhow::Result<Option<SelectionPolicy>> {
        let Some(s) = self.strategy(arg) else {
            return Ok(None);
        };
        Ok(Some(
            SelectionPolicy::new(s)?.with_min_rounds(self.min_rounds.unwrap_or(1))?,
        ))
    }

    pub fn main_policy(&self) -> anyhow::Result<SelectionPolicy> {
        match self.policy(self.strategy.unwrap_or(StrategyArg::Top))? {
            Some(p) => Ok(p),
            None => bail!("--strategy baseline is only valid in --policies"),
        }
    }
}
