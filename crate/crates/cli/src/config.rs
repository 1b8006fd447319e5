use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use csunfold::ablation::Suite;
use csunfold::training::TrainConfig;
use csunfold::unfolding::{Coupling, LambdaMode};
use serde::{Deserialize, Serialize};

/// Environment variable naming the default dataset directory.
pub const DATA_ENV: &str = "CSUNFOLD_DATA";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub root: Option<PathBuf>,
    /// Train and validation fractions.
    pub split: Vec<f64>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            root: None,
            split: vec![0.8, 0.2],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub suites: Vec<Suite>,
    pub ratios: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            suites: Suite::ALL.to_vec(),
            ratios: vec![0.25],
            seeds: vec![0, 1, 2],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReportConfig {
    pub title: String,
    pub plot_width: u32,
    pub plot_height: u32,
}

impl Default for ReportConfig {
    fn default() -> Self {
        ReportConfig {
            title: "Reconstruction report".into(),
            plot_width: 640,
            plot_height: 420,
        }
    }
}

/// Everything a subcommand needs, read from a TOML file with one table per
/// section and then overridden by flags.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub train: TrainConfig,
    pub ablation: AblationConfig,
    pub report: ReportConfig,
}

/// Flag values that take precedence over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub data: Option<PathBuf>,
    pub ratio: Option<f64>,
    pub modules: Option<usize>,
    pub seed: Option<u64>,
    pub lambda_mode: Option<LambdaMode>,
    pub coupling: Option<Coupling>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("malformed config {}", path.display()))
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(d) = &o.data {
            self.data.root = Some(d.clone());
        }
        if let Some(r) = o.ratio {
            self.train.ratio = r;
        }
        if let Some(k) = o.modules {
            self.train.modules = k;
        }
        if let Some(s) = o.seed {
            self.train.seed = s;
        }
        if let Some(l) = o.lambda_mode {
            self.train.lambda_mode = l;
        }
        if let Some(c) = o.coupling {
            self.train.coupling = c;
        }
        if self.data.root.is_none() {
            self.data.root = std::env::var_os(DATA_ENV).map(PathBuf::from);
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        let sum: f64 = self.data.split.iter().sum();
        if self.data.split.len() != 2 || (sum - 1.0).abs() > 1e-9 || self.data.split.iter().any(|f| *f <= 0.0) {
            bail!("data.split must be two positive fractions summing to 1, got {:?}", self.data.split);
        }
        if self.ablation.ratios.iter().any(|r| !(*r > 0.0 && *r <= 1.0)) {
            bail!("ablation ratios must lie in (0, 1]");
        }
        Ok(())
    }

    /// Dataset directory, which must exist.
    pub fn data_root(&self) -> Result<&Path> {
        let root = self.data.root.as_deref().with_context(|| {
            format!("no dataset given: pass --data, set data.root in the config, or set {DATA_ENV}")
        })?;
        if !root.is_dir() {
            bail!("dataset directory {} does not exist", root.display());
        }
        Ok(root)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sections_parse_and_flags_win() {
        let text = "[data]\nsplit = [0.5, 0.5]\n\n[train]\nratio = 0.1\nmodules = 2\n\n[ablation]\nsuites = [\"loss\"]\n";
        let mut cfg: RunConfig = toml::from_str(text).unwrap();
        assert_eq!(cfg.train.modules, 2);
        assert_eq!(cfg.ablation.suites, [Suite::Loss]);
        cfg.apply(&Overrides {
            modules: Some(4),
            coupling: Some(Coupling::End2end),
            ..Overrides::default()
        });
        assert_eq!((cfg.train.modules, cfg.train.ratio), (4, 0.1));
        assert_eq!(cfg.train.coupling, Coupling::End2end);
        cfg.validate().unwrap();
        let echoed: RunConfig = toml::from_str(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(echoed, cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("[train]\nmodule = 3\n").is_err());
        assert!(toml::from_str::<RunConfig>("[plots]\n").is_err());
    }

    #[test]
    fn bad_split_is_rejected() {
        let mut cfg = RunConfig::default();
        cfg.data.split = vec![0.5, 0.4];
        assert!(cfg.validate().is_err());
    }
}
