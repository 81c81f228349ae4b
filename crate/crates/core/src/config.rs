//! Run configuration shared by every command.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Duration;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

use crate::association::AssociationConfig;
use crate::clients::{
    ClientError, HttpClient, LmClient, MockClient, MockConfig, ProcessClient, ReplayClient, TemplateId,
};
use crate::error::{Error, Result};
use crate::geometry::ObjectId;
use crate::ingest::DenoiseConfig;
use crate::localization::LocalizationConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Mode {
    /// Class-agnostic detections only.
    #[default]
    #[serde(rename = "cg")]
    ClassAgnostic,
    /// Detector mode: class hints for background classes merge into one node per class.
    #[serde(rename = "cg-d")]
    Detector,
}

impl FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "cg" => Ok(Mode::ClassAgnostic),
            "cg-d" => Ok(Mode::Detector),
            other => Err(format!("unknown mode `{other}` (expected cg or cg-d)")),
        }
    }
}

/// Where language-model requests go.
///
/// * `mock`: the built-in deterministic rules
/// * `endpoint=exec:<command line>`: a child process speaking the line protocol
/// * `endpoint=http://...` or `https://...`: an HTTP server speaking the same messages
/// * `endpoint=replay:<transcript.jsonl>`: answers from a recorded transcript
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum ClientSpec {
    #[default]
    Mock,
    Endpoint(String),
}

impl FromStr for ClientSpec {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s == "mock" {
            return Ok(ClientSpec::Mock);
        }
        match s.strip_prefix("endpoint=") {
            Some(uri) if !uri.is_empty() => Ok(ClientSpec::Endpoint(uri.to_string())),
            _ => Err(format!("unknown client `{s}` (expected mock or endpoint=<uri>)")),
        }
    }
}

impl fmt::Display for ClientSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ClientSpec::Mock => f.write_str("mock"),
            ClientSpec::Endpoint(uri) => write!(f, "endpoint={uri}"),
        }
    }
}

impl Serialize for ClientSpec {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ClientSpec {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Mode,
    pub association: AssociationConfig,
    pub dbscan: DenoiseConfig,
    pub clients: ClientSpec,
    /// Settings for `mock` clients; the run seed replaces `mock.seed`.
    pub mock: MockConfig,
    pub seed: u64,
    /// Not part of the digest.
    pub output_dir: Option<PathBuf>,
    pub base_object_id: ObjectId,
    pub views_per_object: usize,
    pub client_timeout_s: u64,
    pub localization: LocalizationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            mode: Mode::default(),
            association: AssociationConfig::default(),
            dbscan: DenoiseConfig::default(),
            clients: ClientSpec::default(),
            mock: MockConfig::default(),
            seed: 0,
            output_dir: None,
            base_object_id: 0,
            views_per_object: crate::scenegraph::DEFAULT_VIEWS,
            client_timeout_s: 120,
            localization: LocalizationConfig::default(),
        }
    }
}

impl RunConfig {
    /// Reads TOML (`.toml`) or JSON (anything else) and validates.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig = if path.extension().is_some_and(|e| e == "toml") {
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        } else {
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.association.validate()?;
        self.dbscan.validate()?;
        self.localization.validate()?;
        if self.views_per_object == 0 {
            return Err(Error::Config("views_per_object must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.mock.flip_probability) {
            return Err(Error::Config("mock.flip_probability must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Association settings with the detector-mode background classes filled in.
    pub fn effective_association(&self) -> AssociationConfig {
        let mut a = self.association.clone();
        if self.mode == Mode::Detector && a.background_classes.is_empty() {
            a.background_classes = AssociationConfig::detector_defaults().background_classes;
        }
        if self.mode == Mode::ClassAgnostic {
            a.background_classes.clear();
        }
        a
    }

    pub fn mock_config(&self) -> MockConfig {
        MockConfig {
            seed: self.seed,
            ..self.mock.clone()
        }
    }

    /// SHA-256 over the canonical JSON of the settings plus the hash of every prompt
    /// template. The output directory and client transport are left out, so a run replayed
    /// from a transcript carries the digest of the run that recorded it.
    pub fn digest(&self) -> String {
        let mut canonical = self.clone();
        canonical.output_dir = None;
        canonical.clients = ClientSpec::Mock;
        canonical.client_timeout_s = 0;
        canonical.association = self.effective_association();
        let value = serde_json::to_value(&canonical).expect("config serializes");
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&value).expect("value serializes"));
        for t in TemplateId::ALL {
            h.update(t.as_str().as_bytes());
            h.update(t.hash().as_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn connect(&self) -> std::result::Result<Box<dyn LmClient>, ClientError> {
        match &self.clients {
            ClientSpec::Mock => Ok(Box::new(MockClient::new(self.mock_config()))),
            ClientSpec::Endpoint(uri) => {
                if let Some(cmd) = uri.strip_prefix("exec:") {
                    let argv: Vec<String> = cmd.split_whitespace().map(String::from).collect();
                    Ok(Box::new(ProcessClient::spawn(&argv)?))
                } else if uri.starts_with("http://") || uri.starts_with("https://") {
                    Ok(Box::new(HttpClient::new(
                        uri.clone(),
                        Duration::from_secs(self.client_timeout_s),
                        1,
                    )))
                } else if let Some(path) = uri.strip_prefix("replay:") {
                    ReplayClient::from_file(Path::new(path))
                        .map(|c| Box::new(c) as Box<dyn LmClient>)
                        .map_err(|e| ClientError::Unavailable(e.to_string()))
                } else {
                    Err(ClientError::Unavailable(format!("unsupported endpoint `{uri}`")))
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digest_ignores_output_dir_and_transport() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.output_dir = Some("/tmp/x".into());
        assert_eq!(a.digest(), b.digest());
        b.clients = ClientSpec::Endpoint("replay:t.jsonl".into());
        assert_eq!(a.digest(), b.digest());
        b.association.delta_sim = 1.2;
        assert_ne!(a.digest(), b.digest());
        let mut c = a.clone();
        c.seed = 1;
        assert_ne!(a.digest(), c.digest());
    }

    #[test]
    fn toml_and_json_load() {
        let dir = tempfile::tempdir().unwrap();
        let t = dir.path().join("c.toml");
        std::fs::write(
            &t,
            "mode = \"cg-d\"\nseed = 4\nclients = \"mock\"\n[association]\ndelta_nn = 0.03\n",
        )
        .unwrap();
        let cfg = RunConfig::load(&t).unwrap();
        assert_eq!(cfg.mode, Mode::Detector);
        assert_eq!(cfg.association.delta_nn, 0.03);
        assert!(cfg.effective_association().background_classes.contains("wall"));
        let j = dir.path().join("c.json");
        std::fs::write(&j, r#"{"association": {"delta_sim": 3.0}}"#).unwrap();
        assert!(matches!(RunConfig::load(&j), Err(Error::Config(_))));
        std::fs::write(&j, r#"{"bogus": 1}"#).unwrap();
        assert!(matches!(RunConfig::load(&j), Err(Error::Config(_))));
    }

    #[test]
    fn client_specs() {
        assert_eq!("mock".parse::<ClientSpec>().unwrap(), ClientSpec::Mock);
        assert_eq!(
            "endpoint=http://h:1/x".parse::<ClientSpec>().unwrap(),
            ClientSpec::Endpoint("http://h:1/x".into())
        );
        assert!("gpt".parse::<ClientSpec>().is_err());
        let cfg = RunConfig {
            clients: ClientSpec::Endpoint("ftp://nowhere".into()),
            ..RunConfig::default()
        };
        assert!(matches!(cfg.connect(), Err(ClientError::Unavailable(_))));
    }
}
