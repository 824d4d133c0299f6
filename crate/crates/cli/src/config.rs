use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sprt_core::pipeline::{InversionConfig, TrainConfig};
use sprt_core::prior::PriorConfig;
use sprt_core::splatter::RenderSettings;
use sprt_core::synthgen::ToySpec;
use sprt_core::{Error, Result};

/// Held-out split used by `eval`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Fraction of each identity's expressions (the last ones) held out as
    /// the test split.
    pub holdout_fraction: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { holdout_fraction: 0.25 }
    }
}

/// Everything a run can configure.
///
/// Tables given in a config file are merged key by key over
/// [`RunConfig::default`], so a file only needs the values it changes.
/// `sprt show-config` prints the effective tree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seed of the prior's weight initialization.
    pub seed: u64,
    pub prior: PriorConfig,
    pub train: TrainConfig,
    pub inversion: InversionConfig,
    pub dataset: ToySpec,
    pub render: RenderSettings,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            prior: PriorConfig::default(),
            train: TrainConfig::desk(),
            inversion: InversionConfig::default(),
            dataset: ToySpec::default(),
            render: RenderSettings::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_table() && v.is_table() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let over: toml::Value = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut base = toml::Value::try_from(RunConfig::default()).map_err(|e| Error::InvalidState(e.to_string()))?;
        merge(&mut base, over);
        let cfg: RunConfig = base.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.prior.validate()?;
        self.train.validate()?;
        self.inversion.validate()?;
        self.dataset.validate()?;
        self.render.validate()?;
        if !(0.0..=1.0).contains(&self.eval.holdout_fraction) {
            return Err(Error::Config("eval.holdout_fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Applies `--seed` to every seeded stage.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.train.seed = seed;
        self.dataset.seed = seed;
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn partial_tables_merge_over_defaults() {
        let c = RunConfig::from_toml("[train]\niterations = 7\n[dataset]\nidentities = 3\n").unwrap();
        assert_eq!(c.train.iterations, 7);
        assert_eq!(c.train.lr, TrainConfig::desk().lr);
        assert_eq!(c.dataset.identities, 3);
        assert_eq!(c.dataset.expressions, ToySpec::default().expressions);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for text in ["bogus = 1\n", "[train]\nlearning_rate = 1.0\n", "[prior.output_scales]\nfoo = 2\n", "[nope]\n"] {
            assert!(matches!(RunConfig::from_toml(text), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn printed_config_parses_back() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(RunConfig::from_toml("[train]\ngamma = 1.5\n").is_err());
        assert!(RunConfig::from_toml("[inversion]\nscale_factor = 0\n").is_err());
    }
}
