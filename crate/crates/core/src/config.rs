//! Runtime configuration: a TOML file plus `ONCOTWIN_*` environment overrides.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::extract::{BackendKind, LlmBackendSpec, PrivacyTier};
use crate::ingest::CommandOcr;

pub const ENV_PREFIX: &str = "ONCOTWIN_";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: String, source: std::io::Error },
    #[error("invalid config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid value for {var}: {message}")]
    Env { var: String, message: String },
    #[error("backends.{0}.endpoint is not configured")]
    MissingEndpoint(String),
    #[error(transparent)]
    Backend(#[from] crate::extract::BackendError),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub store: StoreConfig,
    pub ocr: OcrConfig,
    pub backends: BTreeMap<BackendKind, BackendConfig>,
    pub server: ServerConfig,
    pub kb: KbConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StoreConfig {
    pub path: PathBuf,
}

impl Default for StoreConfig {
    fn default() -> Self {
        StoreConfig {
            path: PathBuf::from("twin-store"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OcrConfig {
    /// argv template; `{input}` is replaced by the scanned file's path.
    pub command: Vec<String>,
    pub timeout_seconds: u64,
}

impl Default for OcrConfig {
    fn default() -> Self {
        OcrConfig {
            command: Vec::new(),
            timeout_seconds: 120,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub endpoint: Option<String>,
    pub model: Option<String>,
    pub privacy_tier: Option<PrivacyTier>,
    pub max_context_chars: Option<usize>,
    pub retries: Option<u32>,
    pub timeout_seconds: Option<u64>,
    pub min_interval_ms: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerConfig {
    pub bind: String,
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig {
            bind: "127.0.0.1:8765".into(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KbConfig {
    /// Knowledge-base file; the bundled table is used when unset.
    pub path: Option<PathBuf>,
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        Ok(toml::from_str(text)?)
    }

    /// Reads `path` (defaults when `None`) and applies the process environment.
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|source| ConfigError::Read {
                    path: p.display().to_string(),
                    source,
                })?;
                Config::from_toml(&text)?
            }
            None => Config::default(),
        };
        cfg.apply_env(std::env::vars())?;
        Ok(cfg)
    }

    /// Applies overrides such as `ONCOTWIN_STORE_PATH` or
    /// `ONCOTWIN_BACKENDS_LOCAL_ENDPOINT`. Unrecognized names are ignored
    /// with a warning.
    pub fn apply_env(&mut self, vars: impl IntoIterator<Item = (String, String)>) -> Result<(), ConfigError> {
        for (var, value) in vars {
            let Some(key) = var.strip_prefix(ENV_PREFIX) else {
                continue;
            };
            let key = key.to_ascii_lowercase();
            let bad = |message: String| ConfigError::Env {
                var: var.clone(),
                message,
            };
            match key.as_str() {
                "store_path" => self.store.path = PathBuf::from(value),
                "ocr_command" => self.ocr.command = value.split_whitespace().map(String::from).collect(),
                "ocr_timeout_seconds" => {
                    self.ocr.timeout_seconds = value.parse().map_err(|e| bad(format!("{e}")))?;
                }
                "server_bind" => self.server.bind = value,
                "kb_path" => self.kb.path = Some(PathBuf::from(value)),
                other => {
                    let Some(rest) = other.strip_prefix("backends_") else {
                        log::warn!("ignoring unknown setting {var}");
                        continue;
                    };
                    let Some((kind, field)) = rest.split_once('_') else {
                        log::warn!("ignoring unknown setting {var}");
                        continue;
                    };
                    let kind: BackendKind = serde_json::from_value(serde_json::Value::String(kind.into()))
                        .map_err(|_| bad(format!("unknown backend kind {kind:?}")))?;
                    let entry = self.backends.entry(kind).or_default();
                    match field {
                        "endpoint" => entry.endpoint = Some(value),
                        "model" => entry.model = Some(value),
                        "privacy_tier" => {
                            entry.privacy_tier = Some(
                                serde_json::from_value(serde_json::Value::String(value.clone()))
                                    .map_err(|_| bad(format!("expected phi_allowed or public_only, got {value:?}")))?,
                            );
                        }
                        "max_context_chars" => {
                            entry.max_context_chars = Some(value.parse().map_err(|e| bad(format!("{e}")))?);
                        }
                        _ => log::warn!("ignoring unknown setting {var}"),
                    }
                }
            }
        }
        Ok(())
    }

    /// Resolves a backend section into a validated spec. Cloud backends
    /// default to `public_only`; local and in-process mock backends to
    /// `phi_allowed`.
    pub fn backend_spec(&self, kind: BackendKind) -> Result<LlmBackendSpec, ConfigError> {
        let section = self.backends.get(&kind).cloned().unwrap_or_default();
        let name = kind.to_string();
        let endpoint = match (kind, section.endpoint) {
            (_, Some(e)) => e,
            (BackendKind::Mock, None) => "mock-replies".into(),
            (_, None) => return Err(ConfigError::MissingEndpoint(name)),
        };
        let spec = LlmBackendSpec {
            kind,
            endpoint,
            model_name: section.model.unwrap_or(name),
            max_context_chars: section.max_context_chars.unwrap_or(match kind {
                BackendKind::Local => 128_000,
                BackendKind::Cloud | BackendKind::Mock => 2_000_000,
            }),
            privacy_tier: self.privacy_tier(kind),
            retries: section.retries.unwrap_or(2),
            timeout_seconds: section.timeout_seconds.unwrap_or(300),
            min_interval_ms: section.min_interval_ms.unwrap_or(0),
        };
        spec.validate()?;
        Ok(spec)
    }

    /// The tier a backend runs at; resolvable even when its endpoint is not
    /// configured, so routing can be refused before anything else happens.
    pub fn privacy_tier(&self, kind: BackendKind) -> PrivacyTier {
        let configured = self.backends.get(&kind).and_then(|b| b.privacy_tier);
        configured.unwrap_or(match kind {
            BackendKind::Local | BackendKind::Mock => PrivacyTier::PhiAllowed,
            BackendKind::Cloud => PrivacyTier::PublicOnly,
        })
    }

    pub fn ocr_adapter(&self) -> CommandOcr {
        CommandOcr::new(self.ocr.command.clone(), Duration::from_secs(self.ocr.timeout_seconds))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"
[store]
path = "/var/lib/twins"

[ocr]
command = ["tesseract", "{input}", "stdout"]
timeout_seconds = 60

[backends.local]
endpoint = "http://127.0.0.1:11434/v1/extract"
model = "gemma"

[backends.cloud]
endpoint = "https://llm.example.org/v1/extract"
model = "large-context"
privacy_tier = "public_only"

[server]
bind = "127.0.0.1:9000"
"#;

    #[test]
    fn parses_documented_keys() {
        let c = Config::from_toml(SAMPLE).unwrap();
        assert_eq!(c.store.path, PathBuf::from("/var/lib/twins"));
        assert_eq!(c.ocr.command[1], "{input}");
        let local = c.backend_spec(BackendKind::Local).unwrap();
        assert_eq!(local.privacy_tier, PrivacyTier::PhiAllowed);
        assert_eq!(local.model_name, "gemma");
        let cloud = c.backend_spec(BackendKind::Cloud).unwrap();
        assert_eq!(cloud.privacy_tier, PrivacyTier::PublicOnly);
        assert_eq!(c.server.bind, "127.0.0.1:9000");
        assert!(c.kb.path.is_none());
    }

    #[test]
    fn defaults_bind_loopback() {
        let c = Config::default();
        assert!(c.server.bind.starts_with("127.0.0.1:"));
        assert!(matches!(
            c.backend_spec(BackendKind::Local),
            Err(ConfigError::MissingEndpoint(_))
        ));
        assert_eq!(
            c.backend_spec(BackendKind::Mock).unwrap().privacy_tier,
            PrivacyTier::PhiAllowed
        );
        assert_eq!(c.privacy_tier(BackendKind::Cloud), PrivacyTier::PublicOnly);
    }

    #[test]
    fn env_overrides() {
        let mut c = Config::from_toml(SAMPLE).unwrap();
        c.apply_env([
            ("ONCOTWIN_STORE_PATH".to_string(), "/tmp/s".to_string()),
            ("ONCOTWIN_BACKENDS_MOCK_ENDPOINT".into(), "/tmp/replies".into()),
            ("ONCOTWIN_BACKENDS_MOCK_PRIVACY_TIER".into(), "public_only".into()),
            ("ONCOTWIN_OCR_TIMEOUT_SECONDS".into(), "5".into()),
            ("HOME".into(), "/root".into()),
        ])
        .unwrap();
        assert_eq!(c.store.path, PathBuf::from("/tmp/s"));
        assert_eq!(c.ocr.timeout_seconds, 5);
        let mock = c.backend_spec(BackendKind::Mock).unwrap();
        assert_eq!(mock.endpoint, "/tmp/replies");
        assert_eq!(mock.privacy_tier, PrivacyTier::PublicOnly);

        let err = c
            .apply_env([("ONCOTWIN_BACKENDS_CLOUD_PRIVACY_TIER".to_string(), "open".to_string())])
            .unwrap_err();
        assert!(matches!(err, ConfigError::Env { .. }));
    }

    #[test]
    fn cloud_cannot_be_phi_allowed() {
        let mut c = Config::from_toml(SAMPLE).unwrap();
        c.backends.get_mut(&BackendKind::Cloud).unwrap().privacy_tier = Some(PrivacyTier::PhiAllowed);
        assert!(matches!(
            c.backend_spec(BackendKind::Cloud),
            Err(ConfigError::Backend(_))
        ));
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(Config::from_toml("[store]\npth = \"x\"").is_err());
    }
}
