use std::sync::Arc;

use rand::{CryptoRng, RngCore};

use super::session::{resume, SessionTicket};
use super::{Failure, HandshakeConfig, HandshakeError, QuoteRejection, Transcript, NON_CANONICAL};
use crate::keyschedule::{
    derive_key_block, unwrap_secret, verify_confirmation, wrap_secret, KeyBlock, Mode,
    PreSessionSecret, Role, WrappedSecret,
};
use crate::quote::SimulatedTee;
use crate::record::TrustedChannel;
use crate::verify::{
    evaluate_policy, IdentityBundle, PolicyDecision, QuoteVerifier, VerificationReport, Verdict,
};
use crate::wire::{
    classify, decode_message, encode_message, is_canonical, AttestMessage, AttestRequest, AttestResponse,
    ClientEvidence, CipherSuiteId, HttpMessage, MessageKind, Random32, SessionId,
    TrustedSessionRequest,
};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ClientPhase {
    Start,
    PreflightSent,
    AttestSent,
    SecretSent,
    Established,
    Failed(Failure),
}

/// Everything the client learns from a completed handshake.
#[derive(Debug)]
pub struct ClientSession {
    pub channel: TrustedChannel,
    /// Present when the configuration keeps tickets for resumption.
    pub ticket: Option<SessionTicket>,
    pub identities: IdentityBundle,
    pub report: VerificationReport,
    pub max_age: u32,
    pub key_block: KeyBlock,
}

struct Negotiated {
    server_random: Random32,
    session_id: SessionId,
    suite: CipherSuiteId,
    max_age: u32,
    secret: PreSessionSecret,
    report: VerificationReport,
    identities: IdentityBundle,
}

pub struct ClientHandshake {
    cfg: HandshakeConfig,
    target: String,
    tee: Option<Arc<SimulatedTee>>,
    domain: Option<String>,
    phase: ClientPhase,
    transcript: Transcript,
    client_random: Option<Random32>,
    negotiated: Option<Negotiated>,
}

impl std::fmt::Debug for ClientHandshake {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ClientHandshake")
            .field("mode", &self.cfg.mode)
            .field("target", &self.target)
            .field("phase", &self.phase)
            .finish_non_exhaustive()
    }
}

impl ClientHandshake {
    /// `tee` is the client's own enclave and is required in mutual mode.
    pub fn new(
        cfg: HandshakeConfig,
        target: &str,
        tee: Option<Arc<SimulatedTee>>,
    ) -> Result<Self, HandshakeError> {
        cfg.validate()?;
        if cfg.mode == Mode::Mutual && tee.is_none() {
            return Err(HandshakeError::InvalidConfig("mutual mode needs a client TEE"));
        }
        Ok(ClientHandshake {
            cfg,
            target: target.to_owned(),
            tee,
            domain: None,
            phase: ClientPhase::Start,
            transcript: Transcript::default(),
            client_random: None,
            negotiated: None,
        })
    }

    /// The server name verified by the transport (TLS), if any. It becomes
    /// the domain identity checked against policy.
    pub fn with_domain(mut self, domain: Option<String>) -> Self {
        self.domain = domain;
        self
    }

    pub fn phase(&self) -> &ClientPhase {
        &self.phase
    }

    pub fn transcript_hash(&self) -> [u8; 32] {
        self.transcript.hash()
    }

    /// Messages sent and received so far.
    pub fn message_count(&self) -> usize {
        self.transcript.messages
    }

    fn fail(&mut self, failure: Failure) -> HandshakeError {
        self.phase = ClientPhase::Failed(failure.clone());
        self.negotiated = None;
        HandshakeError::Failed(failure)
    }

    fn expect(&mut self, phase: ClientPhase) -> Result<(), HandshakeError> {
        if self.phase == phase {
            return Ok(());
        }
        if !matches!(self.phase, ClientPhase::Failed(_)) {
            self.phase = ClientPhase::Failed(Failure::OutOfOrder);
            self.negotiated = None;
        }
        Err(HandshakeError::WrongState)
    }

    fn reply_failure(resp: &HttpMessage, err: crate::wire::WireError) -> Failure {
        match resp.status() {
            Some(status) if status != 200 => Failure::PeerAborted(status),
            _ => Failure::Malformed(err),
        }
    }

    /// Emits the preflight request.
    pub fn begin(&mut self) -> Result<HttpMessage, HandshakeError> {
        self.expect(ClientPhase::Start)?;
        let mut msg = encode_message(&AttestMessage::PreflightRequest)
            .map_err(|e| self.fail(Failure::Malformed(e)))?;
        msg.set_target(&self.target);
        self.transcript.absorb(&msg);
        self.phase = ClientPhase::PreflightSent;
        Ok(msg)
    }

    pub fn on_preflight_response<R: RngCore + CryptoRng>(
        &mut self,
        resp: &HttpMessage,
        rng: &mut R,
    ) -> Result<HttpMessage, HandshakeError> {
        self.expect(ClientPhase::PreflightSent)?;
        self.transcript.absorb(resp);
        if classify(resp) != Ok(MessageKind::PreflightResponse) {
            return Err(self.fail(Failure::NotAttestable));
        }
        let random = Random32::generate(rng);
        let client_evidence = self.tee.as_ref().filter(|_| self.cfg.mode == Mode::Mutual).map(|tee| {
            ClientEvidence {
                quote: tee.generate_quote().encode(),
                pubkey: tee.public_key().to_vec(),
            }
        });
        let req = AttestRequest {
            date: Some(self.cfg.clock.now()),
            session_id: None,
            random,
            cipher_suites: self.cfg.suites.clone(),
            client_evidence,
        };
        let mut msg = encode_message(&AttestMessage::AttestRequest(req))
            .map_err(|e| self.fail(Failure::Malformed(e)))?;
        msg.set_target(&self.target);
        self.transcript.absorb(&msg);
        self.client_random = Some(random);
        self.phase = ClientPhase::AttestSent;
        Ok(msg)
    }

    pub fn on_attest_response<R: RngCore + CryptoRng>(
        &mut self,
        resp: &HttpMessage,
        verifier: &dyn QuoteVerifier,
        rng: &mut R,
    ) -> Result<HttpMessage, HandshakeError> {
        self.expect(ClientPhase::AttestSent)?;
        self.transcript.absorb(resp);
        let ar: AttestResponse = match decode_message(resp) {
            Ok(m) if !is_canonical(resp, &m) => return Err(self.fail(Failure::Malformed(NON_CANONICAL))),
            Ok(AttestMessage::AttestResponse(ar)) => ar,
            Ok(_) => return Err(self.fail(Failure::OutOfOrder)),
            Err(e) => return Err(self.fail(Self::reply_failure(resp, e))),
        };
        if !self.cfg.suites.contains(&ar.cipher_suite) {
            return Err(self.fail(Failure::NoCommonSuite));
        }
        let report = match verifier.verify(&ar.quote, &ar.pubkey) {
            Ok(r) => r,
            Err(e) => return Err(self.fail(Failure::QuoteRejected(QuoteRejection::Verifier(e)))),
        };
        if let Verdict::Fail(reason) = report.verdict {
            return Err(self.fail(Failure::QuoteRejected(QuoteRejection::Verdict(reason))));
        }
        let mut identities = report.bundle.clone();
        identities.domain = self.domain.clone();
        if let PolicyDecision::Reject(r) = evaluate_policy(&identities, &self.cfg.policy) {
            return Err(self.fail(Failure::PolicyRejected(r)));
        }
        let secret = PreSessionSecret::generate(rng);
        let wrapped = match wrap_secret(&ar.pubkey, &secret, &self.transcript.hash(), rng) {
            Ok(w) => w,
            Err(_) => return Err(self.fail(Failure::BadSecret)),
        };
        let tsr = TrustedSessionRequest {
            session_id: ar.session_id,
            secret: wrapped.to_bytes(),
        };
        let mut msg = encode_message(&AttestMessage::TrustedSessionRequest(tsr))
            .map_err(|e| self.fail(Failure::Malformed(e)))?;
        msg.set_target(&self.target);
        self.transcript.absorb(&msg);
        self.negotiated = Some(Negotiated {
            server_random: ar.random,
            session_id: ar.session_id,
            suite: ar.cipher_suite,
            max_age: ar.max_age,
            secret,
            report,
            identities,
        });
        self.phase = ClientPhase::SecretSent;
        Ok(msg)
    }

    pub fn on_session_response(&mut self, resp: &HttpMessage) -> Result<ClientSession, HandshakeError> {
        self.expect(ClientPhase::SecretSent)?;
        let th = self.transcript.hash();
        self.transcript.absorb(resp);
        let tsr = match decode_message(resp) {
            Ok(m) if !is_canonical(resp, &m) => return Err(self.fail(Failure::Malformed(NON_CANONICAL))),
            Ok(AttestMessage::TrustedSessionResponse(t)) => t,
            Ok(_) => return Err(self.fail(Failure::OutOfOrder)),
            Err(e) => return Err(self.fail(Self::reply_failure(resp, e))),
        };
        let n = self.negotiated.take().expect("negotiated in SecretSent");
        if tsr.session_id != n.session_id {
            return Err(self.fail(Failure::UnknownSession));
        }
        let secrets = match (self.cfg.mode, &tsr.server_secret, &self.tee) {
            (Mode::OneWay, None, _) => vec![n.secret],
            (Mode::Mutual, Some(wrapped), Some(tee)) => {
                let server_secret = WrappedSecret::from_bytes(wrapped)
                    .and_then(|w| unwrap_secret(tee, &w, &th));
                match server_secret {
                    Ok(s) => vec![s, n.secret],
                    Err(_) => return Err(self.fail(Failure::BadSecret)),
                }
            }
            _ => return Err(self.fail(Failure::BadSecret)),
        };
        let client_random = self.client_random.expect("set with the attest request");
        let kb = match derive_key_block(self.cfg.mode, &secrets, &client_random, &n.server_random, &n.suite) {
            Ok(kb) => kb,
            Err(_) => return Err(self.fail(Failure::NoCommonSuite)),
        };
        for s in secrets {
            s.destroy();
        }
        if !verify_confirmation(&kb, &th, Role::Server, &tsr.confirmation) {
            return Err(self.fail(Failure::ConfirmationMismatch));
        }
        let channel = TrustedChannel::new(n.session_id, n.suite.clone(), &kb, Role::Client)
            .map_err(|_| self.fail(Failure::NoCommonSuite))?;
        let ticket = self.cfg.quote_cache_respect.then(|| SessionTicket {
            session_id: n.session_id,
            suite: n.suite.clone(),
            key_block: kb.clone(),
            identities: n.identities.clone(),
            created_at: self.cfg.clock.now(),
            max_age: n.max_age,
            seq_send: 0,
            seq_recv: 0,
        });
        self.phase = ClientPhase::Established;
        Ok(ClientSession {
            channel,
            ticket,
            identities: n.identities,
            report: n.report,
            max_age: n.max_age,
            key_block: kb,
        })
    }
}

/// Either a usable channel rebuilt from a ticket, or a fresh handshake with
/// its preflight request ready to send.
#[derive(Debug)]
pub enum ClientStart {
    Resumed(TrustedChannel),
    Full(Box<ClientHandshake>, HttpMessage),
}

/// Starts a session. An unexpired ticket that still satisfies policy is
/// resumed; otherwise a full handshake begins.
pub fn client_begin(
    cfg: HandshakeConfig,
    target: &str,
    tee: Option<Arc<SimulatedTee>>,
    ticket: Option<&SessionTicket>,
) -> Result<ClientStart, HandshakeError> {
    if let Some(t) = ticket {
        match resume(&cfg, t) {
            Ok(ch) => return Ok(ClientStart::Resumed(ch)),
            Err(HandshakeError::TicketExpired) => {}
            Err(e) => return Err(e),
        }
    }
    let mut hs = ClientHandshake::new(cfg, target, tee)?;
    let preflight = hs.begin()?;
    Ok(ClientStart::Full(Box::new(hs), preflight))
}
