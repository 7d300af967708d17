//! Experiment manifests.
//!
//! ```toml
//! seed = 7
//!
//! [episode]
//! horizon = 20
//! simulations = 12
//!
//! [[domain]]
//! name = "cooking"
//! source = "builtin:cooking"
//!
//! [[algorithm]]
//! id = "mfvi-fwd"
//! config = { max_sweeps = 50 }
//! ```
//!
//! File sources are resolved relative to the manifest's directory.

use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};

use crate::episode::EpisodeConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainEntry {
    /// Instance label used in the output.
    pub name: String,
    /// `builtin:<name>` or a domain file.
    pub source: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlgorithmEntry {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<toml::Table>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    /// Base seed; the command line overrides it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Written into lock files; ignored on input.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub version: Option<String>,
    #[serde(default)]
    pub episode: EpisodeConfig,
    #[serde(rename = "domain")]
    pub domains: Vec<DomainEntry>,
    #[serde(rename = "algorithm")]
    pub algorithms: Vec<AlgorithmEntry>,
}

impl Manifest {
    pub fn parse(text: &str) -> anyhow::Result<Self> {
        let m: Manifest = toml::from_str(text)?;
        m.validate()?;
        Ok(m)
    }

    /// Loads a manifest and makes file sources absolute.
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut m = Self::parse(&text).with_context(|| format!("parsing {}", path.display()))?;
        let dir = path.parent().unwrap_or(Path::new("."));
        for d in &mut m.domains {
            if !d.source.starts_with("builtin:") {
                let p = PathBuf::from(&d.source);
                if p.is_relative() {
                    d.source = dir.join(p).to_string_lossy().into_owned();
                }
            }
        }
        Ok(m)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.episode.horizon == 0 || self.episode.simulations == 0 || self.episode.max_lookahead == 0 {
            anyhow::bail!("horizon, simulations and max_lookahead must be at least 1");
        }
        if self.domains.is_empty() || self.algorithms.is_empty() {
            anyhow::bail!("a manifest needs at least one domain and one algorithm");
        }
        let mut names: Vec<&str> = self.domains.iter().map(|d| d.name.as_str()).collect();
        names.sort_unstable();
        if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
            anyhow::bail!("duplicate domain name {:?}", w[0]);
        }
        let mut ids: Vec<&str> = self.algorithms.iter().map(|a| a.id.as_str()).collect();
        ids.sort_unstable();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            anyhow::bail!("duplicate algorithm {:?}", w[0]);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_the_documented_example() {
        let m = Manifest::parse(
            r#"
seed = 7
[episode]
horizon = 20
simulations = 12
[[domain]]
name = "cooking"
source = "builtin:cooking"
[[algorithm]]
id = "mfvi-fwd"
config = { max_sweeps = 50 }
"#,
        )
        .unwrap();
        assert_eq!(m.seed, Some(7));
        assert_eq!(m.episode.max_lookahead, 9);
        assert_eq!(m.algorithms[0].config.as_ref().unwrap()["max_sweeps"].as_integer(), Some(50));
    }

    #[test]
    fn rejects_duplicates_and_unknown_keys() {
        let dup = "[[domain]]\nname='a'\nsource='builtin:cooking'\n[[domain]]\nname='a'\nsource='builtin:cooking'\n[[algorithm]]\nid='random'\n";
        assert!(Manifest::parse(dup).is_err());
        assert!(Manifest::parse("bogus = 1\n[[domain]]\nname='a'\nsource='x'\n[[algorithm]]\nid='random'\n").is_err());
    }
}
