use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::Serialize;
use thiserror::Error;

use super::config::{load_policy, load_roots, load_vendor, load_verifier_cert, ClientConfig, ConfigError, VerifierChoice};
use super::{connect, rng_and_clock, tls_client_config, HttpConn, TranscriptWriter, TransportError, VERIFY_PATH};
use crate::handshake::{
    resume, ClientHandshake, Failure, HandshakeConfig, HandshakeError, QuoteRejection, SessionTicket,
};
use crate::keyschedule::{Mode, Role};
use crate::pki::{Certificate, TrustAnchors};
use crate::quote::SimulatedTee;
use crate::record::{RecordError, RecordFrame, TrustedChannel, RECORD_CONTENT_TYPE};
use crate::verify::{
    check_remote_report, encode_service_request, IdentityBundle, Policy, QuoteVerifier,
    VerificationReport, Verdict, Verifier, VerifyError,
};
use crate::wire::headers::{ATTEST_SESSION_ID, CONTENT_TYPE};
use crate::wire::HttpMessage;

/// Process exit codes used by the command-line client.
pub mod exit_code {
    pub const OK: i32 = 0;
    pub const CONFIG: i32 = 1;
    pub const USAGE: i32 = 2;
    pub const NOT_ATTESTABLE: i32 = 10;
    pub const QUOTE_REJECTED: i32 = 11;
    pub const POLICY_REJECTED: i32 = 12;
    pub const CONFIRMATION_MISMATCH: i32 = 13;
    pub const TRANSPORT: i32 = 14;
    pub const PROTOCOL: i32 = 15;
}

#[derive(Debug, Error)]
pub enum ClientError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("transport: {0}")]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Handshake(#[from] HandshakeError),
    #[error("record: {0}")]
    Record(#[from] RecordError),
    #[error("server refused the protected request with status {0}")]
    Refused(u16),
}

impl ClientError {
    pub fn exit_code(&self) -> i32 {
        use exit_code::*;
        match self {
            ClientError::Config(_) => CONFIG,
            ClientError::Transport(_) => TRANSPORT,
            ClientError::Handshake(HandshakeError::Failed(f)) => match f {
                Failure::NotAttestable => NOT_ATTESTABLE,
                Failure::QuoteRejected(QuoteRejection::Verifier(VerifyError::Transport(_))) => TRANSPORT,
                Failure::QuoteRejected(_) => QUOTE_REJECTED,
                Failure::PolicyRejected(_) => POLICY_REJECTED,
                Failure::ConfirmationMismatch => CONFIRMATION_MISMATCH,
                _ => PROTOCOL,
            },
            ClientError::Handshake(HandshakeError::InvalidConfig(_)) => CONFIG,
            ClientError::Handshake(_) | ClientError::Record(_) | ClientError::Refused(_) => PROTOCOL,
        }
    }
}

/// A protected request: the body is sealed and posted to `path`, which
/// defaults to the path of the target URL.
#[derive(Debug, Clone, Default)]
pub struct ClientRequest {
    pub path: Option<String>,
    pub body: Vec<u8>,
}

/// Identities as reported to the operator; an absent domain is shown as
/// `unverified`.
#[derive(Debug, Clone, Serialize)]
pub struct IdentityReport {
    pub domain: String,
    pub tcb: String,
    pub vendor: Option<String>,
    pub verifier: Option<String>,
}

impl From<&IdentityBundle> for IdentityReport {
    fn from(b: &IdentityBundle) -> Self {
        IdentityReport {
            domain: b.domain.clone().unwrap_or_else(|| "unverified".into()),
            tcb: hex::encode(b.tcb),
            vendor: b.vendor.clone(),
            verifier: b.verifier.clone(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ClientOutcome {
    pub status: u16,
    #[serde(serialize_with = "lossy_utf8")]
    pub body: Vec<u8>,
    pub resumed: bool,
    /// Handshake messages sent and received by this invocation.
    pub handshake_messages: usize,
    pub session_id: String,
    pub suite: String,
    pub identities: IdentityReport,
    pub verdict: Verdict,
}

fn lossy_utf8<S: serde::Serializer>(body: &[u8], s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(&String::from_utf8_lossy(body))
}

/// Verifies quotes through a remote attestation service.
pub struct RemoteVerifier {
    host: String,
    port: u16,
    path: String,
    tls: Option<Arc<rustls::ClientConfig>>,
    cert: Certificate,
    roots: TrustAnchors,
}

impl RemoteVerifier {
    /// `cert` is the verifier certificate reports must be signed by; it must
    /// chain to `roots`.
    pub fn new(
        url: &str,
        cert: Certificate,
        roots: TrustAnchors,
        tls_ca: Option<&Path>,
    ) -> Result<Self, ClientError> {
        let url = url::Url::parse(url).map_err(|e| ConfigError::Invalid(format!("verifier url: {e}")))?;
        let tls = match url.scheme() {
            "http" => None,
            "https" => {
                let ca = tls_ca.ok_or_else(|| ConfigError::Invalid("https verifier needs tls_ca".into()))?;
                Some(tls_client_config(ca)?)
            }
            other => return Err(ConfigError::Invalid(format!("unsupported verifier scheme {other:?}")).into()),
        };
        let host = url
            .host_str()
            .ok_or_else(|| ConfigError::Invalid("verifier url has no host".into()))?
            .to_owned();
        let port = url.port_or_known_default().unwrap_or(80);
        let path = match url.path() {
            "" | "/" => VERIFY_PATH.to_owned(),
            p => p.to_owned(),
        };
        Ok(RemoteVerifier {
            host,
            port,
            path,
            tls,
            cert,
            roots,
        })
    }

    fn request(&self, quote: &[u8], pubkey: &[u8]) -> Result<HttpMessage, TransportError> {
        let mut conn = connect(&self.host, self.port, self.tls.as_ref())?;
        let req = HttpMessage::request("POST", &self.path)
            .with_header(CONTENT_TYPE, "application/octet-stream")
            .with_body(encode_service_request(quote, pubkey));
        conn.exchange(&req)
    }
}

impl QuoteVerifier for RemoteVerifier {
    fn verify(&self, quote: &[u8], expected_pubkey: &[u8]) -> Result<VerificationReport, VerifyError> {
        let resp = self
            .request(quote, expected_pubkey)
            .map_err(|e| VerifyError::Transport(e.to_string()))?;
        match resp.status() {
            Some(200) => {}
            Some(400) => return Err(VerifyError::MalformedRequest),
            other => return Err(VerifyError::Transport(format!("unexpected status {other:?}"))),
        }
        let report = VerificationReport::decode(&resp.body)?;
        check_remote_report(&report, &self.cert, &self.roots, quote)?;
        Ok(report)
    }
}

type TicketStore = BTreeMap<String, SessionTicket>;

fn load_tickets(path: Option<&Path>) -> TicketStore {
    path.and_then(|p| fs::read_to_string(p).ok())
        .and_then(|text| serde_json::from_str(&text).ok())
        .unwrap_or_default()
}

fn save_tickets(path: Option<&Path>, store: &TicketStore) -> Result<(), ConfigError> {
    let Some(path) = path else { return Ok(()) };
    let text = serde_json::to_string_pretty(store).expect("tickets serialize");
    fs::write(path, text).map_err(|source| ConfigError::Io {
        path: path.to_owned(),
        source,
    })
}

enum RecordReply {
    Ok(u16, Vec<u8>),
    NeedsHandshake,
}

fn protected_exchange(
    conn: &mut HttpConn,
    channel: &mut TrustedChannel,
    path: &str,
    body: &[u8],
) -> Result<RecordReply, ClientError> {
    let frame = channel.seal(body, path.as_bytes())?;
    let req = HttpMessage::request("POST", path)
        .with_header(ATTEST_SESSION_ID, channel.session_id().to_header_value())
        .with_header(CONTENT_TYPE, RECORD_CONTENT_TYPE)
        .with_body(frame.encode());
    let resp = conn.exchange(&req)?;
    match resp.status() {
        Some(200) => {}
        Some(428) => return Ok(RecordReply::NeedsHandshake),
        Some(status) => return Err(ClientError::Refused(status)),
        None => return Err(TransportError::Closed.into()),
    }
    let frame = RecordFrame::decode(&resp.body)?;
    let plaintext = channel.open(&frame, path.as_bytes())?;
    Ok(RecordReply::Ok(200, plaintext))
}

struct Capture(Option<TranscriptWriter>);

impl Capture {
    fn record(&self, sender: Role, msg: &HttpMessage) {
        if let Some(w) = &self.0 {
            if let Err(e) = w.record(sender, msg) {
                log::warn!("transcript write failed: {e}");
            }
        }
    }
}

/// Performs a handshake (or resumes a cached session), sends one protected
/// request and returns the opened response.
pub fn run_client(cfg: &ClientConfig, request: &ClientRequest) -> Result<ClientOutcome, ClientError> {
    let url = cfg.validate()?;
    let host = url.host_str().expect("validated").to_owned();
    let port = url.port_or_known_default().unwrap_or(80);
    let tls = match (url.scheme(), &cfg.tls_ca) {
        ("https", Some(ca)) => Some(tls_client_config(ca)?),
        _ => None,
    };
    let path = request.path.clone().unwrap_or_else(|| match url.query() {
        Some(q) => format!("{}?{q}", url.path()),
        None => url.path().to_owned(),
    });
    let (mut rng, clock) = rng_and_clock(cfg.seed, 2);
    let roots = load_roots(&cfg.roots)?;
    let policy = match &cfg.policy {
        Some(p) => load_policy(p)?,
        None => Policy::open(),
    };
    let hs_cfg = HandshakeConfig::new(cfg.mode, Arc::clone(&clock))
        .with_suites(cfg.suites.clone())
        .with_policy(policy)
        .with_quote_cache(cfg.session_cache.is_some());
    let capture = Capture(
        cfg.transcript
            .as_deref()
            .map(TranscriptWriter::create)
            .transpose()
            .map_err(TransportError::Io)?,
    );

    let cache_path = cfg.session_cache.as_deref();
    let ticket_key = format!("{:?} {}://{}:{}{}", cfg.mode, url.scheme(), host, port, path);
    let mut tickets = load_tickets(cache_path);
    if let Some(ticket) = tickets.get(&ticket_key).cloned() {
        match resume(&hs_cfg, &ticket) {
            Ok(mut channel) => {
                let mut conn = connect(&host, port, tls.as_ref())?;
                match protected_exchange(&mut conn, &mut channel, &path, &request.body)? {
                    RecordReply::Ok(status, body) => {
                        let mut ticket = ticket;
                        ticket.update_from(&channel);
                        let outcome = ClientOutcome {
                            status,
                            body,
                            resumed: true,
                            handshake_messages: 0,
                            session_id: ticket.session_id.to_string(),
                            suite: ticket.suite.token().to_owned(),
                            identities: IdentityReport::from(&ticket.identities),
                            verdict: Verdict::Pass,
                        };
                        tickets.insert(ticket_key, ticket);
                        save_tickets(cache_path, &tickets)?;
                        return Ok(outcome);
                    }
                    RecordReply::NeedsHandshake => {
                        log::info!("server no longer holds the session; running a full handshake");
                    }
                }
            }
            Err(HandshakeError::TicketExpired) => {}
            Err(e) => return Err(e.into()),
        }
        tickets.remove(&ticket_key);
        save_tickets(cache_path, &tickets)?;
    }

    let tee = match cfg.mode {
        Mode::Mutual => {
            let vendor = load_vendor(cfg.vendor.as_deref().expect("validated"))?;
            let identity = cfg.code_identity.as_deref().unwrap_or("httpa-client");
            let tee = SimulatedTee::create(identity.as_bytes(), &vendor, &roots, &mut rng)
                .map_err(|e| ConfigError::Invalid(format!("client TEE: {e}")))?;
            Some(Arc::new(tee))
        }
        Mode::OneWay => None,
    };
    let verifier: Box<dyn QuoteVerifier> = match &cfg.verifier {
        VerifierChoice::InProcess => Box::new(Verifier::in_process(roots.clone(), Arc::clone(&clock), &mut rng)),
        VerifierChoice::Remote { url, cert } => Box::new(RemoteVerifier::new(
            url,
            load_verifier_cert(cert)?,
            roots.clone(),
            cfg.tls_ca.as_deref(),
        )?),
    };
    let domain = tls.as_ref().map(|_| host.clone());
    let mut hs = ClientHandshake::new(hs_cfg, &path, tee)?.with_domain(domain);
    let mut conn = connect(&host, port, tls.as_ref())?;
    let step = |conn: &mut HttpConn, msg: HttpMessage| -> Result<HttpMessage, ClientError> {
        capture.record(Role::Client, &msg);
        let reply = conn.exchange(&msg)?;
        capture.record(Role::Server, &reply);
        Ok(reply)
    };
    let preflight = hs.begin()?;
    let reply = step(&mut conn, preflight)?;
    let attest = hs.on_preflight_response(&reply, &mut rng)?;
    let reply = step(&mut conn, attest)?;
    let secret = hs.on_attest_response(&reply, verifier.as_ref(), &mut rng)?;
    let reply = step(&mut conn, secret)?;
    let mut session = hs.on_session_response(&reply)?;
    let handshake_messages = hs.message_count();

    let (status, body) = match protected_exchange(&mut conn, &mut session.channel, &path, &request.body)? {
        RecordReply::Ok(status, body) => (status, body),
        RecordReply::NeedsHandshake => return Err(ClientError::Refused(428)),
    };
    if let Some(mut ticket) = session.ticket.take() {
        ticket.update_from(&session.channel);
        tickets.insert(ticket_key, ticket);
        save_tickets(cache_path, &tickets)?;
    }
    Ok(ClientOutcome {
        status,
        body,
        resumed: false,
        handshake_messages,
        session_id: session.channel.session_id().to_string(),
        suite: session.channel.suite().token().to_owned(),
        identities: IdentityReport::from(&session.identities),
        verdict: session.report.verdict,
    })
}
