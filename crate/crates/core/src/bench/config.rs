//! Bench configuration: a TOML file of dotted keys such as
//!
//! ```toml
//! attack.n = 50
//! attack.epsilon = 16
//! transform.theta = 0.4
//! transform.gamma = 0.3
//! color.tau = 5
//! color.b = "25,204"
//! bench.n_seeds = 20
//! ```
//!
//! `[transform]` and `[color]` are shorthands for `attack.transform` and
//! `attack.profile`. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attack::{AttackConfig, Scale};
use crate::channelsim::ChannelSimConfig;
use crate::colormap::ChannelProfile;
use crate::embedder::Variant;
use crate::error::{Error, Result};
use crate::transforms::TransformConfig;

/// Optional on-disk inputs. Without `views`, `target` and `mask`, scenarios
/// are synthesized.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Directory of adversary view images, read in file-name order.
    pub views: Option<PathBuf>,
    pub target: Option<PathBuf>,
    pub mask: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl Paths {
    /// All three inputs, or none of them.
    pub fn inputs(&self) -> Result<Option<(&Path, &Path, &Path)>> {
        match (&self.views, &self.target, &self.mask) {
            (Some(v), Some(t), Some(m)) => Ok(Some((v, t, m))),
            (None, None, None) => Ok(None),
            _ => Err(Error::Config("paths.views, paths.target and paths.mask must be set together".into())),
        }
    }
}

/// The model zoo: one seeded embedder per variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ZooSpec {
    pub seed: u64,
    pub variants: Vec<Variant>,
    /// Variants used as white-box substitutes; the rest are black-box only.
    pub substitutes: Vec<Variant>,
    /// Verification threshold per entry of `variants`; derived from the
    /// synthetic population when empty.
    pub thresholds: Vec<f64>,
    /// Identities used to derive thresholds.
    pub threshold_identities: usize,
}

impl Default for ZooSpec {
    fn default() -> Self {
        Self {
            seed: 1,
            variants: Variant::ALL.to_vec(),
            substitutes: Variant::ALL.to_vec(),
            thresholds: Vec::new(),
            threshold_identities: 100,
        }
    }
}

/// Experiment sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSpec {
    /// Adversary views per scenario.
    pub views: usize,
    /// Side of synthetic images.
    pub size: usize,
    /// Simulated captures per view.
    pub n_capture: usize,
    /// Scenarios per cell.
    pub n_seeds: usize,
    /// First scenario seed.
    pub seed: u64,
    /// Sub-tables emitted by `table`; `ablate` uses `attack.scale`.
    pub scales: Vec<Scale>,
}

impl Default for RunSpec {
    fn default() -> Self {
        Self {
            views: 5,
            size: 64,
            n_capture: 3,
            n_seeds: 20,
            seed: 0,
            scales: vec![Scale::Gray, Scale::Color],
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub paths: Paths,
    pub attack: AttackConfig,
    pub channel: ChannelSimConfig,
    pub zoo: ZooSpec,
    pub bench: RunSpec,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    #[serde(default)]
    paths: Paths,
    #[serde(default)]
    attack: Option<toml::Table>,
    #[serde(default)]
    transform: Option<TransformConfig>,
    #[serde(default)]
    color: Option<ChannelProfile>,
    #[serde(default)]
    channel: ChannelSimConfig,
    #[serde(default)]
    zoo: ZooSpec,
    #[serde(default)]
    bench: RunSpec,
}

impl BenchConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        let table = raw.attack.unwrap_or_default();
        if raw.transform.is_some() && table.contains_key("transform") {
            return Err(Error::Config("set either [transform] or attack.transform, not both".into()));
        }
        if raw.color.is_some() && table.contains_key("profile") {
            return Err(Error::Config("set either [color] or attack.profile, not both".into()));
        }
        let mut attack: AttackConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("attack: {}", e.message())))?;
        if let Some(t) = raw.transform {
            attack.transform = t;
        }
        if let Some(c) = raw.color {
            attack.profile = c;
        }
        let cfg = Self {
            paths: raw.paths,
            attack,
            channel: raw.channel,
            zoo: raw.zoo,
            bench: raw.bench,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// The full configuration as TOML; parsing it back gives an equal value.
    pub fn echo(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.attack.validate()?;
        self.channel.validate()?;
        self.paths.inputs()?;
        let zoo = &self.zoo;
        if zoo.variants.is_empty() {
            return Err(Error::Config("zoo.variants is empty".into()));
        }
        if zoo.substitutes.is_empty() || zoo.substitutes.iter().any(|s| !zoo.variants.contains(s)) {
            return Err(Error::Config("zoo.substitutes must be a nonempty subset of zoo.variants".into()));
        }
        if !zoo.thresholds.is_empty() {
            if zoo.thresholds.len() != zoo.variants.len() {
                return Err(Error::Config("zoo.thresholds needs one entry per variant".into()));
            }
            if zoo.thresholds.iter().any(|t| !(*t > -1.0 && *t < 1.0)) {
                return Err(Error::Config("thresholds must lie in (-1, 1)".into()));
            }
        }
        let b = &self.bench;
        if b.views == 0 || b.n_capture == 0 || b.n_seeds == 0 || b.size < 8 {
            return Err(Error::Config("bench.views, n_capture and n_seeds must be positive and size at least 8".into()));
        }
        if b.scales.is_empty() {
            return Err(Error::Config("bench.scales is empty".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attack::Mode;

    #[test]
    fn dotted_keys_and_shorthands() {
        let cfg = BenchConfig::from_toml(
            r#"
attack.n = 20
attack.epsilon = 8
attack.mu = 0.5
attack.mode = "res_aware"
attack.scale = "color"
transform.theta = 0.3
transform.gamma = 0.2
color.tau = 4
color.b = "30,200"
color.r = [60, 240]
channel.resolution_ratio = 4
zoo.variants = ["A", "B"]
zoo.substitutes = ["B"]
bench.n_seeds = 3
"#,
        )
        .unwrap();
        assert_eq!(cfg.attack.n, 20);
        assert_eq!(cfg.attack.epsilon, 8.0);
        assert_eq!(cfg.attack.mode, Mode::ResAware);
        assert_eq!(cfg.attack.scale, Scale::Color);
        assert_eq!(cfg.attack.transform.theta, 0.3);
        assert_eq!(cfg.attack.transform.gamma_range, [-0.2, 0.2]);
        assert_eq!(cfg.attack.transform.sim_copies, TransformConfig::default().sim_copies);
        assert_eq!(cfg.attack.profile.b, [30.0, 200.0]);
        assert_eq!(cfg.attack.profile.r, [60.0, 240.0]);
        assert_eq!(cfg.attack.profile.g, ChannelProfile::default().g);
        assert_eq!(cfg.attack.profile.tau, 4.0);
        assert_eq!(cfg.channel.resolution_ratio, 4);
        assert_eq!(cfg.zoo.substitutes, vec![Variant::B]);
        assert_eq!(cfg.bench.n_seeds, 3);
        assert_eq!(cfg.bench.n_capture, 3);
    }

    #[test]
    fn echo_round_trips() {
        let mut cfg = BenchConfig::default();
        cfg.attack.alpha = Some(0.5);
        cfg.zoo.thresholds = vec![0.3, 0.2, 0.4];
        cfg.paths.out = Some("out".into());
        assert_eq!(BenchConfig::from_toml(&cfg.echo()).unwrap(), cfg);
        let empty = BenchConfig::from_toml("").unwrap();
        assert_eq!(empty, BenchConfig::default());
        assert_eq!(BenchConfig::from_toml(&empty.echo()).unwrap(), empty);
    }

    #[test]
    fn rejects_bad_configs() {
        for text in [
            "attack.bogus = 1",
            "nonsense = 2",
            "attack.n = 0",
            "color.b = \"30\"",
            "color.b = \"x,200\"",
            "zoo.thresholds = [1.2, 0.1, 0.1]",
            "zoo.thresholds = [0.1]",
            "zoo.substitutes = [\"C\"]\nzoo.variants = [\"A\"]",
            "paths.views = \"v\"",
            "transform.theta = 0.4\nattack.transform.theta = 0.3",
            "bench.n_seeds = 0",
        ] {
            assert!(matches!(BenchConfig::from_toml(text), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn load_names_missing_path() {
        let err = BenchConfig::load("/nonexistent/c.toml").unwrap_err();
        assert!(err.to_string().contains("/nonexistent/c.toml"));
    }
}
