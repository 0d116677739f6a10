//! JSON configuration files and credential files.
//!
//! Credentials are JSON objects with hex-encoded certificates and keys:
//! `roots.json` holds `{"roots": [cert, ...]}`, `vendor.json` holds
//! `{"signing_cert", "signing_key"}` and `verifier.json` holds
//! `{"cert", "key"}`. Relative paths inside a config file are resolved
//! against the directory containing it.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use ed25519_dalek::SigningKey;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::handshake::DEFAULT_MAX_AGE;
use crate::keyschedule::{Mode, Role};
use crate::pki::{
    Certificate, DemoPki, PkiError, TrustAnchors, VendorCredentials, VerifierCredentials,
};
use crate::record::RouteKey;
use crate::verify::{Policy, PolicyError};
use crate::wire::{CipherSuiteId, HttpMessage};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: {msg}")]
    Parse { path: PathBuf, msg: String },
    #[error("{path}: {source}")]
    Pki { path: PathBuf, source: PkiError },
    #[error("{path}: {source}")]
    Policy { path: PathBuf, source: PolicyError },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

fn read(path: &Path) -> Result<String, ConfigError> {
    fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_owned(),
        source,
    })
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, ConfigError> {
    serde_json::from_str(&read(path)?).map_err(|e| ConfigError::Parse {
        path: path.to_owned(),
        msg: e.to_string(),
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> io::Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(io::Error::other)?;
    text.push('\n');
    fs::write(path, text)
}

#[derive(Serialize, Deserialize)]
struct RootsFile {
    roots: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct VendorFile {
    signing_cert: String,
    signing_key: String,
}

#[derive(Serialize, Deserialize)]
struct VerifierFile {
    cert: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    key: Option<String>,
}

fn cert_from_hex(path: &Path, text: &str) -> Result<Certificate, ConfigError> {
    let bytes = hex::decode(text).map_err(|e| ConfigError::Parse {
        path: path.to_owned(),
        msg: e.to_string(),
    })?;
    Certificate::decode(&bytes).map_err(|source| ConfigError::Pki {
        path: path.to_owned(),
        source,
    })
}

fn key_from_hex(path: &Path, text: &str) -> Result<SigningKey, ConfigError> {
    let bytes: [u8; 32] = hex::decode(text)
        .ok()
        .and_then(|b| b.try_into().ok())
        .ok_or_else(|| ConfigError::Parse {
            path: path.to_owned(),
            msg: "signing key must be 32 bytes of hex".into(),
        })?;
    Ok(SigningKey::from_bytes(&bytes))
}

fn mismatch(path: &Path) -> ConfigError {
    ConfigError::Parse {
        path: path.to_owned(),
        msg: "key does not match certificate".into(),
    }
}

pub fn load_roots(path: &Path) -> Result<TrustAnchors, ConfigError> {
    let file: RootsFile = read_json(path)?;
    let certs = file
        .roots
        .iter()
        .map(|c| cert_from_hex(path, c))
        .collect::<Result<Vec<_>, _>>()?;
    TrustAnchors::new(certs).map_err(|source| ConfigError::Pki {
        path: path.to_owned(),
        source,
    })
}

pub fn load_vendor(path: &Path) -> Result<VendorCredentials, ConfigError> {
    let file: VendorFile = read_json(path)?;
    let signing_cert = cert_from_hex(path, &file.signing_cert)?;
    let signing_key = key_from_hex(path, &file.signing_key)?;
    if signing_key.verifying_key().to_bytes() != signing_cert.public_key {
        return Err(mismatch(path));
    }
    Ok(VendorCredentials {
        signing_cert,
        signing_key,
    })
}

pub fn load_verifier(path: &Path) -> Result<VerifierCredentials, ConfigError> {
    let file: VerifierFile = read_json(path)?;
    let cert = cert_from_hex(path, &file.cert)?;
    let key = key_from_hex(
        path,
        file.key.as_deref().ok_or_else(|| ConfigError::Parse {
            path: path.to_owned(),
            msg: "missing verifier key".into(),
        })?,
    )?;
    if key.verifying_key().to_bytes() != cert.public_key {
        return Err(mismatch(path));
    }
    Ok(VerifierCredentials { cert, key })
}

/// Reads only the certificate from a verifier credential file.
pub fn load_verifier_cert(path: &Path) -> Result<Certificate, ConfigError> {
    let file: VerifierFile = read_json(path)?;
    cert_from_hex(path, &file.cert)
}

pub fn load_policy(path: &Path) -> Result<Policy, ConfigError> {
    Policy::from_json(&read(path)?).map_err(|source| ConfigError::Policy {
        path: path.to_owned(),
        source,
    })
}

/// Writes `roots.json`, `vendor.json`, `verifier.json` and
/// `verifier_cert.json` into `dir`.
pub fn save_pki(dir: &Path, pki: &DemoPki) -> io::Result<()> {
    fs::create_dir_all(dir)?;
    let enc = |c: &Certificate| hex::encode(c.encode());
    write_json(
        &dir.join("roots.json"),
        &RootsFile {
            roots: vec![enc(&pki.vendor_root), enc(&pki.verifier_root)],
        },
    )?;
    write_json(
        &dir.join("vendor.json"),
        &VendorFile {
            signing_cert: enc(&pki.vendor.signing_cert),
            signing_key: hex::encode(pki.vendor.signing_key.to_bytes()),
        },
    )?;
    write_json(
        &dir.join("verifier.json"),
        &VerifierFile {
            cert: enc(&pki.verifier.cert),
            key: Some(hex::encode(pki.verifier.key.to_bytes())),
        },
    )?;
    write_json(
        &dir.join("verifier_cert.json"),
        &VerifierFile {
            cert: enc(&pki.verifier.cert),
            key: None,
        },
    )
}

/// Splits a capture file into its messages.
pub fn read_transcript(bytes: &[u8]) -> Result<Vec<(Role, HttpMessage)>, String> {
    let mut out = Vec::new();
    let mut rest = bytes;
    while !rest.is_empty() {
        if rest.len() < 5 {
            return Err("truncated transcript entry header".into());
        }
        let sender = match rest[0] {
            0 => Role::Client,
            1 => Role::Server,
            d => return Err(format!("bad direction byte {d}")),
        };
        let len = u32::from_be_bytes(rest[1..5].try_into().unwrap()) as usize;
        let body = rest
            .get(5..5 + len)
            .ok_or_else(|| "truncated transcript entry".to_string())?;
        let msg = HttpMessage::parse(body).map_err(|e| e.to_string())?;
        out.push((sender, msg));
        rest = &rest[5 + len..];
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TlsFiles {
    pub cert: PathBuf,
    pub key: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HandlerKind {
    Echo,
    Uppercase,
    Reverse,
}

impl HandlerKind {
    pub fn name(self) -> &'static str {
        match self {
            HandlerKind::Echo => "echo",
            HandlerKind::Uppercase => "uppercase",
            HandlerKind::Reverse => "reverse",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RouteConfig {
    pub route: RouteKey,
    pub handler: HandlerKind,
    /// Code identity measured into this route's TEE; defaults to the
    /// handler name.
    #[serde(default)]
    pub code_identity: Option<String>,
}

fn default_mode() -> Mode {
    Mode::OneWay
}

fn default_max_age() -> u32 {
    DEFAULT_MAX_AGE
}

fn default_suites() -> Vec<CipherSuiteId> {
    CipherSuiteId::REGISTERED.to_vec()
}

fn default_capacity() -> usize {
    1024
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

fn resolve_opt(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(p) = p {
        resolve(base, p);
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServerConfig {
    pub listen: String,
    #[serde(default = "default_mode")]
    pub mode: Mode,
    #[serde(default)]
    pub tls: Option<TlsFiles>,
    /// Vendor signing credentials used to certify every route's TEE.
    pub vendor: PathBuf,
    /// Roots the vendor signing certificate must chain to.
    pub vendor_roots: PathBuf,
    /// Roots for verifying client quotes; required in mutual mode.
    #[serde(default)]
    pub client_roots: Option<PathBuf>,
    #[serde(default)]
    pub client_policy: Option<PathBuf>,
    pub routes: Vec<RouteConfig>,
    #[serde(default = "default_max_age")]
    pub max_age: u32,
    #[serde(default = "default_suites")]
    pub suites: Vec<CipherSuiteId>,
    #[serde(default = "default_capacity")]
    pub session_capacity: usize,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub transcript: Option<PathBuf>,
}

impl ServerConfig {
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let mut cfg: ServerConfig = read_json(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        resolve(base, &mut cfg.vendor);
        resolve(base, &mut cfg.vendor_roots);
        resolve_opt(base, &mut cfg.client_roots);
        resolve_opt(base, &mut cfg.client_policy);
        resolve_opt(base, &mut cfg.transcript);
        if let Some(tls) = &mut cfg.tls {
            resolve(base, &mut tls.cert);
            resolve(base, &mut tls.key);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.mode == Mode::Mutual && self.client_roots.is_none() {
            return Err(ConfigError::Invalid(
                "mutual mode requires client_roots for verifying client quotes".into(),
            ));
        }
        if self.routes.is_empty() {
            return Err(ConfigError::Invalid("at least one route is required".into()));
        }
        if self.suites.is_empty() || self.suites.iter().any(|s| !s.is_registered()) {
            return Err(ConfigError::Invalid("suites must be non-empty and registered".into()));
        }
        if self.session_capacity == 0 {
            return Err(ConfigError::Invalid("session_capacity must be positive".into()));
        }
        super::check_seed_allowed(self.seed, self.tls.is_some())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VerifierChoice {
    #[default]
    InProcess,
    /// A remote attestation service; `cert` is the verifier certificate
    /// file its reports must be signed by.
    Remote { url: String, cert: PathBuf },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientConfig {
    /// `http://` or `https://` URL of the attested service.
    pub target: String,
    #[serde(default = "default_mode")]
    pub mode: Mode,
    #[serde(default)]
    pub policy: Option<PathBuf>,
    pub roots: PathBuf,
    #[serde(default = "default_suites")]
    pub suites: Vec<CipherSuiteId>,
    #[serde(default)]
    pub verifier: VerifierChoice,
    /// Ticket store; resumption is off without it.
    #[serde(default)]
    pub session_cache: Option<PathBuf>,
    /// PEM file of certificates trusted for `https://` targets.
    #[serde(default)]
    pub tls_ca: Option<PathBuf>,
    /// Mutual mode: vendor credentials for the client's own TEE.
    #[serde(default)]
    pub vendor: Option<PathBuf>,
    #[serde(default)]
    pub code_identity: Option<String>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub transcript: Option<PathBuf>,
}

impl ClientConfig {
    pub fn new(target: impl Into<String>, roots: impl Into<PathBuf>) -> Self {
        ClientConfig {
            target: target.into(),
            mode: Mode::OneWay,
            policy: None,
            roots: roots.into(),
            suites: default_suites(),
            verifier: VerifierChoice::InProcess,
            session_cache: None,
            tls_ca: None,
            vendor: None,
            code_identity: None,
            seed: None,
            transcript: None,
        }
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let mut cfg: ClientConfig = read_json(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        resolve(base, &mut cfg.roots);
        resolve_opt(base, &mut cfg.policy);
        resolve_opt(base, &mut cfg.session_cache);
        resolve_opt(base, &mut cfg.tls_ca);
        resolve_opt(base, &mut cfg.vendor);
        resolve_opt(base, &mut cfg.transcript);
        if let VerifierChoice::Remote { cert, .. } = &mut cfg.verifier {
            resolve(base, cert);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<url::Url, ConfigError> {
        let url = url::Url::parse(&self.target)
            .map_err(|e| ConfigError::Invalid(format!("target url: {e}")))?;
        let tls = match url.scheme() {
            "http" => false,
            "https" => true,
            other => return Err(ConfigError::Invalid(format!("unsupported url scheme {other:?}"))),
        };
        if url.host_str().is_none() {
            return Err(ConfigError::Invalid("target url has no host".into()));
        }
        if tls && self.tls_ca.is_none() {
            return Err(ConfigError::Invalid("https targets need tls_ca".into()));
        }
        if self.mode == Mode::Mutual && self.vendor.is_none() {
            return Err(ConfigError::Invalid("mutual mode needs vendor credentials for the client TEE".into()));
        }
        if self.suites.is_empty() || self.suites.iter().any(|s| !s.is_registered()) {
            return Err(ConfigError::Invalid("suites must be non-empty and registered".into()));
        }
        super::check_seed_allowed(self.seed, tls)?;
        Ok(url)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifierConfig {
    pub listen: String,
    /// Roots that quote chains are validated against.
    pub roots: PathBuf,
    /// Verifier certificate and signing key.
    pub credentials: PathBuf,
    #[serde(default)]
    pub tls: Option<TlsFiles>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn pki_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let pki = DemoPki::generate(&mut ChaCha20Rng::seed_from_u64(1));
        save_pki(dir.path(), &pki).unwrap();
        let roots = load_roots(&dir.path().join("roots.json")).unwrap();
        assert_eq!(roots.roots().len(), 2);
        let vendor = load_vendor(&dir.path().join("vendor.json")).unwrap();
        assert_eq!(vendor.signing_cert, pki.vendor.signing_cert);
        let verifier = load_verifier(&dir.path().join("verifier.json")).unwrap();
        assert_eq!(verifier.cert, pki.verifier.cert);
        assert_eq!(
            load_verifier_cert(&dir.path().join("verifier_cert.json")).unwrap(),
            pki.verifier.cert
        );
        assert!(load_verifier(&dir.path().join("verifier_cert.json")).is_err());
    }

    #[test]
    fn mutual_server_needs_client_roots() {
        let cfg: ServerConfig = serde_json::from_str(
            r#"{"listen": "127.0.0.1:0", "mode": "mutual", "vendor": "v.json",
                "vendor_roots": "r.json",
                "routes": [{"route": {"path_prefix": "/"}, "handler": "echo"}]}"#,
        )
        .unwrap();
        assert!(matches!(cfg.validate(), Err(ConfigError::Invalid(_))));
    }

    #[test]
    fn client_url_scheme_checked() {
        let cfg = ClientConfig::new("ftp://example.com/", "roots.json");
        assert!(cfg.validate().is_err());
        let cfg = ClientConfig::new("http://127.0.0.1:8080/echo", "roots.json");
        assert!(cfg.validate().is_ok());
    }
}
