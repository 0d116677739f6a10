//! Client and server handshake state machines.
//!
//! Both machines consume and produce [`HttpMessage`]s, so the bytes hashed
//! into the transcript are exactly the bytes that crossed the wire. Any
//! error moves a machine to its failed phase; later calls return
//! [`HandshakeError::WrongState`] and never emit another message.
//!
//! The transcript hash is SHA-256 over every message in order, each
//! prefixed with its length as a 4-byte big-endian integer. The client
//! secret is wrapped under the hash through the attest response; the
//! confirmation MAC and the mutual-mode server secret use the hash through
//! the trusted session request.

mod client;
mod server;
mod session;

use std::sync::Arc;

use rand::{CryptoRng, RngCore};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::clock::Clock;
use crate::keyschedule::{Mode, Role};
use crate::verify::{FailReason, Policy, QuoteVerifier, Rejection, VerifyError};
use crate::wire::{CipherSuiteId, HttpMessage, WireError};

pub use client::{client_begin, ClientHandshake, ClientPhase, ClientSession, ClientStart};
pub use server::{ServerHandshake, ServerPhase, ServerSession, ServerStep};
pub use session::{resume, FullHandshakeRequired, SessionCache, SessionTicket};

/// Largest accepted gap between a mutual-mode `Attest-Date` and the
/// server clock.
pub const MAX_DATE_SKEW_SECS: u64 = 600;
pub const DEFAULT_MAX_AGE: u32 = 300;

const NON_CANONICAL: WireError = WireError::InvalidMessage("non-canonical encoding");

/// Why a quote, or the evidence around it, was not accepted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum QuoteRejection {
    Verdict(FailReason),
    Verifier(VerifyError),
    Policy(Rejection),
    MissingEvidence,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum Failure {
    #[error("peer does not support attestation")]
    NotAttestable,
    #[error("server quote rejected: {0:?}")]
    QuoteRejected(QuoteRejection),
    #[error("server identities rejected by policy: {0:?}")]
    PolicyRejected(Rejection),
    #[error("no cipher suite in common")]
    NoCommonSuite,
    #[error("server confirmation did not verify")]
    ConfirmationMismatch,
    #[error("client quote rejected: {0:?}")]
    ClientQuoteRejected(QuoteRejection),
    #[error("pre-session secret could not be recovered")]
    BadSecret,
    #[error("attest date outside the accepted window")]
    StaleDate,
    #[error("unexpected session id")]
    UnknownSession,
    #[error("peer aborted with status {0}")]
    PeerAborted(u16),
    #[error("malformed message: {0}")]
    Malformed(WireError),
    #[error("message arrived out of order")]
    OutOfOrder,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum HandshakeError {
    #[error("handshake failed: {0}")]
    Failed(Failure),
    #[error("operation not valid in the current phase")]
    WrongState,
    #[error("invalid handshake configuration: {0}")]
    InvalidConfig(&'static str),
    #[error("session ticket expired")]
    TicketExpired,
}

impl HandshakeError {
    pub fn failure(&self) -> Option<&Failure> {
        match self {
            HandshakeError::Failed(f) => Some(f),
            _ => None,
        }
    }
}

/// Settings shared by both roles.
#[derive(Debug, Clone)]
pub struct HandshakeConfig {
    pub mode: Mode,
    /// Offered (client) or accepted (server) suites, most preferred first.
    pub suites: Vec<CipherSuiteId>,
    /// Applied to the peer's identities.
    pub policy: Policy,
    /// Client only: keep a ticket for resumption within the quote max-age.
    pub quote_cache_respect: bool,
    /// Server only: lifetime announced in `Attest-Quote` and enforced on
    /// cached sessions.
    pub max_age: u32,
    pub clock: Arc<dyn Clock>,
}

impl HandshakeConfig {
    pub fn new(mode: Mode, clock: Arc<dyn Clock>) -> Self {
        HandshakeConfig {
            mode,
            suites: CipherSuiteId::REGISTERED.to_vec(),
            policy: Policy::open(),
            quote_cache_respect: true,
            max_age: DEFAULT_MAX_AGE,
            clock,
        }
    }

    pub fn with_suites(mut self, suites: Vec<CipherSuiteId>) -> Self {
        self.suites = suites;
        self
    }

    pub fn with_policy(mut self, policy: Policy) -> Self {
        self.policy = policy;
        self
    }

    pub fn with_max_age(mut self, max_age: u32) -> Self {
        self.max_age = max_age;
        self
    }

    pub fn with_quote_cache(mut self, respect: bool) -> Self {
        self.quote_cache_respect = respect;
        self
    }

    fn validate(&self) -> Result<(), HandshakeError> {
        if self.suites.is_empty() {
            return Err(HandshakeError::InvalidConfig("no cipher suites configured"));
        }
        if self.suites.iter().any(|s| !s.is_registered()) {
            return Err(HandshakeError::InvalidConfig("unregistered cipher suite configured"));
        }
        Ok(())
    }
}

#[derive(Clone, Default)]
struct Transcript {
    hasher: Sha256,
    messages: usize,
}

impl Transcript {
    fn absorb(&mut self, msg: &HttpMessage) {
        let bytes = msg.transcript_bytes();
        self.hasher.update((bytes.len() as u32).to_be_bytes());
        self.hasher.update(&bytes);
        self.messages += 1;
    }

    fn hash(&self) -> [u8; 32] {
        self.hasher.clone().finalize().into()
    }
}

/// One message of an in-memory run, as it crossed the simulated wire.
#[derive(Debug, Clone)]
pub struct TraceEntry {
    pub sender: Role,
    pub message: HttpMessage,
}

#[derive(Debug)]
pub struct InMemoryRun {
    pub trace: Vec<TraceEntry>,
    pub result: Result<(ClientSession, ServerSession), HandshakeError>,
}

/// Drives both machines against each other without sockets. Every message
/// is serialized and reparsed; `tamper` sees the raw bytes first and may
/// change them (the argument is the message index).
pub fn run_in_memory_with<R, F>(
    client: &mut ClientHandshake,
    server: &mut ServerHandshake,
    verifier: &dyn QuoteVerifier,
    rng: &mut R,
    mut tamper: F,
) -> InMemoryRun
where
    R: RngCore + CryptoRng,
    F: FnMut(usize, &mut Vec<u8>),
{
    let mut trace = Vec::new();
    let mut relay = |sender: Role, msg: HttpMessage, trace: &mut Vec<TraceEntry>| {
        let mut bytes = msg.to_wire(Some("in-memory"));
        tamper(trace.len(), &mut bytes);
        let parsed = HttpMessage::parse(&bytes).map_err(|_| {
            HandshakeError::Failed(Failure::Malformed(WireError::InvalidMessage("unparseable message")))
        })?;
        trace.push(TraceEntry {
            sender,
            message: parsed.clone(),
        });
        Ok::<_, HandshakeError>(parsed)
    };
    let mut run = || {
        let m = relay(Role::Client, client.begin()?, &mut trace)?;
        let m = relay(Role::Server, server.on_message(&m, rng)?.reply, &mut trace)?;
        let m = relay(Role::Client, client.on_preflight_response(&m, rng)?, &mut trace)?;
        let m = relay(Role::Server, server.on_message(&m, rng)?.reply, &mut trace)?;
        let m = relay(Role::Client, client.on_attest_response(&m, verifier, rng)?, &mut trace)?;
        let step = server.on_message(&m, rng)?;
        let m = relay(Role::Server, step.reply, &mut trace)?;
        let client_session = client.on_session_response(&m)?;
        let server_session = step.session.expect("final server step yields a session");
        Ok((client_session, server_session))
    };
    let result = run();
    InMemoryRun { trace, result }
}

pub fn run_in_memory<R: RngCore + CryptoRng>(
    client: &mut ClientHandshake,
    server: &mut ServerHandshake,
    verifier: &dyn QuoteVerifier,
    rng: &mut R,
) -> InMemoryRun {
    run_in_memory_with(client, server, verifier, rng, |_, _| {})
}
