//! Run configuration: a flat set of keys merged from built-in defaults, an
//! optional `key = value` file and command-line overrides, in increasing
//! order of precedence.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use g2sf::bank::CoresetParams;
use g2sf::eval::EvalConfig;
use g2sf::features::{AnomalyKind, SynthConfig};
use g2sf::losses::LossConfig;
use g2sf::lspn::LspnConfig;
use g2sf::scoring::Aggregation;
use g2sf::synthesis::SynthesisConfig;
use g2sf::trainer::TrainConfig;

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// `[H, W]` of the feature grid.
    pub grid: [usize; 2],
    /// `[D_pc, D_rgb]`
    pub dims: [usize; 2],
    pub n_train: usize,
    pub n_test: usize,
    pub anomaly_modes: Vec<AnomalyKind>,

    pub coreset_fraction: f64,

    pub n_aug: usize,
    pub strength: f64,

    pub k: usize,
    pub eta0: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub mu: f64,
    pub l1_weight: f64,

    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub sigma_lr: f64,
    pub weight_decay: f64,
    pub dropout: f64,
    pub eval_every: usize,

    pub aggregation: String,
    pub blur_sigma: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let data = SynthConfig::default();
        let loss = LossConfig::default();
        let train = TrainConfig::desk();
        let eval = EvalConfig::default();
        let synth = SynthesisConfig::default();
        Self {
            seed: 0,
            grid: [data.grid.0, data.grid.1],
            dims: [data.dims.0, data.dims.1],
            n_train: data.n_train,
            n_test: data.n_test,
            anomaly_modes: data.anomaly_modes,
            coreset_fraction: CoresetParams::default().fraction,
            n_aug: synth.n_aug,
            strength: synth.strength,
            k: loss.k,
            eta0: loss.eta0,
            alpha: loss.alpha,
            beta: loss.beta,
            gamma: loss.gamma,
            mu: loss.mu,
            l1_weight: loss.l1_weight,
            epochs: train.epochs,
            batch_size: train.batch_size,
            lr: train.lr,
            sigma_lr: train.sigma_lr,
            weight_decay: train.weight_decay,
            dropout: train.dropout,
            eval_every: train.eval_every,
            aggregation: eval.aggregation.as_str().to_string(),
            blur_sigma: eval.blur_sigma,
        }
    }
}

/// Keys each stage depends on; a change to any of them makes the stage's
/// output differ.
pub fn stage_keys(stage: &str) -> &'static [&'static str] {
    match stage {
        "gen" => &["seed", "grid", "dims", "n_train", "n_test", "anomaly_modes"],
        "bank" => &["seed", "coreset_fraction"],
        "synth" => &["seed", "n_aug", "strength", "anomaly_modes"],
        "train" => &[
            "seed",
            "k",
            "eta0",
            "alpha",
            "beta",
            "gamma",
            "mu",
            "l1_weight",
            "epochs",
            "batch_size",
            "lr",
            "sigma_lr",
            "weight_decay",
            "dropout",
            "eval_every",
        ],
        "score" => &["k", "aggregation", "blur_sigma"],
        "ablate" => &["k", "blur_sigma"],
        _ => &[],
    }
}

/// Parses one override value: TOML syntax when it parses, else a bare string.
fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

impl RunConfig {
    /// Merges, in increasing precedence, the defaults, `inherited` values
    /// (recorded by earlier stages of the run), the optional file and
    /// `overrides` (`key`, raw value).
    pub fn load(
        inherited: &Map<String, Value>,
        file: Option<&Path>,
        overrides: &[(String, String)],
    ) -> CliResult<Self> {
        let mut table = match toml::Table::try_from(Self::default()) {
            Ok(t) => t,
            Err(e) => return Err(CliError::config(e.to_string())),
        };
        for (k, v) in inherited {
            let v = toml::Value::try_from(v).map_err(|e| CliError::config(format!("recorded `{k}`: {e}")))?;
            Self::set(&mut table, k, v)?;
        }
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
            let file_table: toml::Table =
                text.parse().map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
            for (k, v) in file_table {
                Self::set(&mut table, &k, v)?;
            }
        }
        for (k, raw) in overrides {
            Self::set(&mut table, k, parse_value(raw))?;
        }
        let cfg: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(table: &mut toml::Table, key: &str, value: toml::Value) -> CliResult<()> {
        let slot = table.get_mut(key).ok_or_else(|| CliError::config(format!("unknown configuration key `{key}`")))?;
        // Integers are accepted where reals are expected.
        *slot = match (&*slot, value) {
            (toml::Value::Float(_), toml::Value::Integer(i)) => toml::Value::Float(i as f64),
            (_, v) => v,
        };
        Ok(())
    }

    pub fn validate(&self) -> CliResult<()> {
        self.data().validate()?;
        self.loss(1.0).validate()?;
        self.train(false).validate()?;
        self.model().validate()?;
        self.aggregation()?;
        if !(self.coreset_fraction > 0.0 && self.coreset_fraction <= 1.0) {
            return Err(CliError::config("coreset_fraction must lie in (0, 1]"));
        }
        if !(self.strength > 0.0 && self.strength.is_finite()) {
            return Err(CliError::config("strength must be positive"));
        }
        if !(self.blur_sigma >= 0.0 && self.blur_sigma.is_finite()) {
            return Err(CliError::config("blur_sigma must be nonnegative"));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Value {
        serde_json::to_value(self).expect("plain data")
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        sha256_hex(self.to_json().to_string().as_bytes())
    }

    /// The subset of keys `stage` depends on.
    pub fn section(&self, stage: &str) -> Value {
        let all = self.to_json();
        let mut out = Map::new();
        for key in stage_keys(stage) {
            out.insert((*key).to_string(), all[*key].clone());
        }
        Value::Object(out)
    }

    pub fn data(&self) -> SynthConfig {
        SynthConfig {
            grid: (self.grid[0], self.grid[1]),
            dims: (self.dims[0], self.dims[1]),
            n_train: self.n_train,
            n_test: self.n_test,
            anomaly_modes: self.anomaly_modes.clone(),
            ..SynthConfig::default()
        }
    }

    pub fn coreset(&self) -> CoresetParams {
        CoresetParams { fraction: self.coreset_fraction, seed: self.seed, ..CoresetParams::default() }
    }

    pub fn synthesis(&self) -> SynthesisConfig {
        SynthesisConfig {
            n_aug: self.n_aug,
            strength: self.strength,
            modes: self.anomaly_modes.clone(),
            ..SynthesisConfig::default()
        }
    }

    pub fn loss(&self, m0: f64) -> LossConfig {
        LossConfig {
            alpha: self.alpha,
            beta: self.beta,
            gamma: self.gamma,
            mu: self.mu,
            k: self.k,
            eta0: self.eta0,
            m0,
            l1_weight: self.l1_weight,
        }
    }

    pub fn train(&self, deterministic: bool) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            weight_decay: self.weight_decay,
            sigma_lr: self.sigma_lr,
            dropout: self.dropout,
            seed: self.seed,
            eval_every: self.eval_every,
            deterministic,
        }
    }

    pub fn model(&self) -> LspnConfig {
        LspnConfig { dropout: self.dropout, ..LspnConfig::desk(self.dims[0], self.dims[1]) }
    }

    pub fn aggregation(&self) -> CliResult<Aggregation> {
        Aggregation::parse(&self.aggregation)
            .ok_or_else(|| CliError::config(format!("unknown aggregation `{}`", self.aggregation)))
    }

    pub fn eval(&self) -> CliResult<EvalConfig> {
        Ok(EvalConfig { k: self.k, aggregation: self.aggregation()?, blur_sigma: self.blur_sigma })
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
