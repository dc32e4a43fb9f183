use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use phenoaudit::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReviewerEntry {
    pub id: String,
    /// Static bearer token.
    pub token: String,
}

/// Service configuration, normally read from TOML. Relative paths are
/// resolved against the directory of the config file by [`ServiceConfig::load`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceConfig {
    /// `host:port`; port 0 picks a free port.
    pub bind: String,
    pub packets: PathBuf,
    pub log: PathBuf,
    pub owner_token: String,
    /// Fans out into one queue-order stream per reviewer.
    #[serde(default)]
    pub seed: u64,
    /// Restricted token map; with `cases`, enables per-bin progress for
    /// the owner.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_map: Option<PathBuf>,
    /// Sampled discordant cases (`encounter_id,p,coded,direction,bin`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cases: Option<PathBuf>,
    #[serde(rename = "reviewer", default)]
    pub reviewers: Vec<ReviewerEntry>,
}

impl ServiceConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ServiceConfig = toml::from_str(text).map_err(|e| Error::validation("service config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("service config serializes")
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.packets);
        fix(&mut self.log);
        if let Some(p) = self.token_map.as_mut() {
            fix(p);
        }
        if let Some(p) = self.cases.as_mut() {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.reviewers.is_empty() {
            return Err(Error::validation("reviewer", "at least one reviewer is required"));
        }
        if self.owner_token.trim().is_empty() {
            return Err(Error::validation("owner_token", "must not be empty"));
        }
        let mut ids = BTreeSet::new();
        let mut tokens = BTreeSet::from([self.owner_token.as_str()]);
        for r in &self.reviewers {
            if r.id.trim().is_empty() || r.token.trim().is_empty() {
                return Err(Error::validation("reviewer", "id and token must not be empty"));
            }
            if !ids.insert(r.id.as_str()) {
                return Err(Error::validation("reviewer.id", format!("duplicate id {:?}", r.id)));
            }
            if !tokens.insert(r.token.as_str()) {
                return Err(Error::validation(
                    "reviewer.token",
                    format!("token of {:?} is already in use", r.id),
                ));
            }
        }
        if self.token_map.is_some() != self.cases.is_some() {
            return Err(Error::validation("token_map", "token_map and cases must be given together"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TEXT: &str = r#"
bind = "127.0.0.1:0"
packets = "audit/packets.jsonl"
log = "audit/judgments.jsonl"
owner_token = "owner"

[[reviewer]]
id = "r1"
token = "t1"
"#;

    #[test]
    fn parses_and_resolves() {
        let mut cfg = ServiceConfig::from_toml(TEXT).unwrap();
        assert_eq!(cfg.seed, 0);
        cfg.resolve_paths(Path::new("/runs/a"));
        assert_eq!(cfg.packets, Path::new("/runs/a/audit/packets.jsonl"));
        assert_eq!(ServiceConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn shared_tokens_are_rejected() {
        let text = TEXT.replace("token = \"t1\"", "token = \"owner\"");
        let err = ServiceConfig::from_toml(&text).unwrap_err().to_string();
        assert!(err.contains("already in use"), "{err}");
        assert!(ServiceConfig::from_toml(&TEXT.replace("[[reviewer]]\nid = \"r1\"\ntoken = \"t1\"", "")).is_err());
    }
}
