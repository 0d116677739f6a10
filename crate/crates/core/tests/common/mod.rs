#![allow(dead_code)]

use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};
use std::sync::Arc;

use rand::{CryptoRng, RngCore};
use serde_json::{json, Value};

use httpa::clock::{Clock, ManualClock, FIXED_EPOCH};
use httpa::handshake::{ClientHandshake, HandshakeConfig, ServerHandshake};
use httpa::keyschedule::{Mode, Role};
use httpa::pki::DemoPki;
use httpa::quote::SimulatedTee;
use httpa::transport::read_transcript;
use httpa::verify::{QuoteVerifier, Verifier};
use httpa::wire::{classify, MessageKind};

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

pub fn golden_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

pub fn fixture(name: &str) -> String {
    fixtures().join(name).display().to_string()
}

pub fn httpa() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_httpa"));
    cmd.env_remove("HTTPA_LOG");
    cmd
}

/// A background `httpa` process, killed on drop.
pub struct Spawned {
    child: Child,
    pub addr: String,
}

impl Drop for Spawned {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// Starts a process that prints `listening on ADDR` once ready.
pub fn spawn(mut cmd: Command) -> Spawned {
    let mut child = cmd
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .expect("spawn httpa");
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap())
        .read_line(&mut line)
        .expect("read listen line");
    let addr = line
        .trim()
        .strip_prefix("listening on ")
        .unwrap_or_else(|| panic!("unexpected first line {line:?}"))
        .to_owned();
    Spawned { child, addr }
}

pub fn server_config(mode: &str) -> Value {
    json!({
        "listen": "127.0.0.1:0",
        "mode": mode,
        "vendor": fixture("vendor.json"),
        "vendor_roots": fixture("roots.json"),
        "client_roots": fixture("roots.json"),
        "routes": [
            {"route": {"path_prefix": "/echo"}, "handler": "echo"},
            {"route": {"path_prefix": "/upper"}, "handler": "uppercase"}
        ]
    })
}

/// Writes `config` into `dir` and starts a server with extra flags.
pub fn spawn_server(dir: &Path, config: &Value, extra: &[&str]) -> Spawned {
    let path = dir.join(format!("server-{}.json", rand::random::<u32>()));
    std::fs::write(&path, serde_json::to_vec_pretty(config).unwrap()).unwrap();
    let mut cmd = httpa();
    cmd.arg("server").arg("--config").arg(&path).args(extra);
    spawn(cmd)
}

pub fn client(addr: &str, path: &str, extra: &[&str]) -> Output {
    httpa()
        .args(["client", "--target"])
        .arg(format!("http://{addr}{path}"))
        .arg("--roots")
        .arg(fixture("roots.json"))
        .args(extra)
        .output()
        .expect("run client")
}

pub fn outcome(out: &Output) -> Value {
    assert!(
        out.status.success(),
        "client failed with {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("client prints JSON")
}

/// Message kinds in a capture file, with their senders.
pub fn captured_kinds(path: &Path) -> Vec<(Role, MessageKind)> {
    let bytes = std::fs::read(path).unwrap_or_default();
    read_transcript(&bytes)
        .expect("well-formed capture")
        .iter()
        .map(|(role, msg)| (*role, classify(msg).expect("captured message classifies")))
        .collect()
}

pub const ONE_WAY_FLOW: [MessageKind; 6] = [
    MessageKind::PreflightRequest,
    MessageKind::PreflightResponse,
    MessageKind::AttestRequest,
    MessageKind::AttestResponse,
    MessageKind::TrustedSessionRequest,
    MessageKind::TrustedSessionResponse,
];

/// Everything needed to run handshakes without sockets.
pub struct Lab {
    pub pki: DemoPki,
    pub clock: Arc<ManualClock>,
    pub server_tee: Arc<SimulatedTee>,
    pub client_tee: Arc<SimulatedTee>,
    pub verifier: Arc<Verifier>,
}

impl Lab {
    pub fn new<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        let pki = DemoPki::generate(rng);
        let anchors = pki.anchors();
        let clock = Arc::new(ManualClock::new(FIXED_EPOCH));
        let server_tee = Arc::new(SimulatedTee::create(b"server app", &pki.vendor, &anchors, rng).unwrap());
        let client_tee = Arc::new(SimulatedTee::create(b"client app", &pki.vendor, &anchors, rng).unwrap());
        let verifier = Arc::new(Verifier::in_process(anchors, clock.clone(), rng));
        Lab {
            pki,
            clock,
            server_tee,
            client_tee,
            verifier,
        }
    }

    pub fn config(&self, mode: Mode) -> HandshakeConfig {
        let clock: Arc<dyn Clock> = self.clock.clone();
        HandshakeConfig::new(mode, clock)
    }

    pub fn client(&self, cfg: HandshakeConfig) -> ClientHandshake {
        let tee = (cfg.mode == Mode::Mutual).then(|| self.client_tee.clone());
        ClientHandshake::new(cfg, "/app", tee).unwrap()
    }

    pub fn server(&self, cfg: HandshakeConfig) -> ServerHandshake {
        let verifier: Option<Arc<dyn QuoteVerifier>> =
            (cfg.mode == Mode::Mutual).then(|| self.verifier.clone() as Arc<dyn QuoteVerifier>);
        ServerHandshake::new(Arc::new(cfg), self.server_tee.clone(), verifier).unwrap()
    }
}
