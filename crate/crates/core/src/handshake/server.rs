use std::sync::Arc;

use rand::{CryptoRng, RngCore};

use super::{
    Failure, HandshakeConfig, HandshakeError, QuoteRejection, Transcript, MAX_DATE_SKEW_SECS,
    NON_CANONICAL,
};
use crate::clock::Timestamp;
use crate::keyschedule::{
    confirmation_mac, derive_key_block, unwrap_secret, wrap_secret, KeyBlock, Mode, PreSessionSecret, Role,
    WrappedSecret,
};
use crate::quote::SimulatedTee;
use crate::record::TrustedChannel;
use crate::verify::{evaluate_policy, IdentityBundle, PolicyDecision, QuoteVerifier, Verdict};
use crate::wire::{
    classify, decode_message, encode_message, is_canonical, negotiate_suite, AttestMessage, AttestRequest,
    AttestResponse, CipherSuiteId, HttpMessage, MessageKind, Random32, SessionId, TrustedSessionResponse,
    WireError,
};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ServerPhase {
    Start,
    PreflightDone,
    AttestReceived,
    Established,
    Failed(Failure),
}

#[derive(Debug)]
pub struct ServerSession {
    pub channel: TrustedChannel,
    /// Verified client identities, mutual mode only.
    pub client_identities: Option<IdentityBundle>,
    pub created_at: Timestamp,
    pub max_age: u32,
    pub key_block: KeyBlock,
}

/// The reply to send and, after the last step, the established session.
#[derive(Debug)]
pub struct ServerStep {
    pub reply: HttpMessage,
    pub session: Option<ServerSession>,
}

struct Offered {
    client_random: Random32,
    server_random: Random32,
    session_id: SessionId,
    suite: CipherSuiteId,
    client_pubkey: Option<Vec<u8>>,
    client_identities: Option<IdentityBundle>,
}

pub struct ServerHandshake {
    cfg: Arc<HandshakeConfig>,
    tee: Arc<SimulatedTee>,
    client_verifier: Option<Arc<dyn QuoteVerifier>>,
    phase: ServerPhase,
    transcript: Transcript,
    offered: Option<Offered>,
}

impl std::fmt::Debug for ServerHandshake {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ServerHandshake")
            .field("mode", &self.cfg.mode)
            .field("phase", &self.phase)
            .finish_non_exhaustive()
    }
}

impl ServerHandshake {
    /// `client_verifier` judges client quotes and is required in mutual mode.
    pub fn new(
        cfg: Arc<HandshakeConfig>,
        tee: Arc<SimulatedTee>,
        client_verifier: Option<Arc<dyn QuoteVerifier>>,
    ) -> Result<Self, HandshakeError> {
        cfg.validate()?;
        if cfg.mode == Mode::Mutual && client_verifier.is_none() {
            return Err(HandshakeError::InvalidConfig("mutual mode needs a client quote verifier"));
        }
        Ok(ServerHandshake {
            cfg,
            tee,
            client_verifier,
            phase: ServerPhase::Start,
            transcript: Transcript::default(),
            offered: None,
        })
    }

    pub fn phase(&self) -> &ServerPhase {
        &self.phase
    }

    pub fn transcript_hash(&self) -> [u8; 32] {
        self.transcript.hash()
    }

    fn fail(&mut self, failure: Failure) -> HandshakeError {
        self.phase = ServerPhase::Failed(failure.clone());
        self.offered = None;
        HandshakeError::Failed(failure)
    }

    fn encode(&mut self, msg: AttestMessage) -> Result<HttpMessage, HandshakeError> {
        let reply = encode_message(&msg).map_err(|e| self.fail(Failure::Malformed(e)))?;
        self.transcript.absorb(&reply);
        Ok(reply)
    }

    /// Advances the machine with one client message.
    pub fn on_message<R: RngCore + CryptoRng>(
        &mut self,
        msg: &HttpMessage,
        rng: &mut R,
    ) -> Result<ServerStep, HandshakeError> {
        if matches!(self.phase, ServerPhase::Failed(_) | ServerPhase::Established) {
            return Err(HandshakeError::WrongState);
        }
        let kind = match classify(msg) {
            Ok(k) => k,
            Err(e) => return Err(self.fail(Failure::Malformed(e))),
        };
        match (&self.phase, kind) {
            (ServerPhase::Start, MessageKind::PreflightRequest) => {
                self.transcript.absorb(msg);
                let reply = self.encode(AttestMessage::PreflightResponse)?;
                self.phase = ServerPhase::PreflightDone;
                Ok(ServerStep { reply, session: None })
            }
            (ServerPhase::PreflightDone, MessageKind::AttestRequest) => {
                self.transcript.absorb(msg);
                match decode_message(msg) {
                    Ok(m) if !is_canonical(msg, &m) => Err(self.fail(Failure::Malformed(NON_CANONICAL))),
                    Ok(AttestMessage::AttestRequest(req)) => self.on_attest_request(req, rng),
                    Ok(_) => Err(self.fail(Failure::OutOfOrder)),
                    Err(e) => Err(self.fail(Failure::Malformed(e))),
                }
            }
            (ServerPhase::AttestReceived, MessageKind::TrustedSessionRequest) => {
                let wrap_hash = self.transcript.hash();
                self.transcript.absorb(msg);
                match decode_message(msg) {
                    Ok(m) if !is_canonical(msg, &m) => Err(self.fail(Failure::Malformed(NON_CANONICAL))),
                    Ok(AttestMessage::TrustedSessionRequest(req)) => {
                        self.on_session_request(&wrap_hash, req.session_id, &req.secret, rng)
                    }
                    Ok(_) => Err(self.fail(Failure::OutOfOrder)),
                    Err(e) => Err(self.fail(Failure::Malformed(e))),
                }
            }
            _ => Err(self.fail(Failure::OutOfOrder)),
        }
    }

    fn check_client(&self, req: &AttestRequest) -> Result<(Vec<u8>, IdentityBundle), Failure> {
        let date = req.date.ok_or(Failure::StaleDate)?;
        if date.abs_diff(self.cfg.clock.now()) > MAX_DATE_SKEW_SECS {
            return Err(Failure::StaleDate);
        }
        let evidence = req
            .client_evidence
            .as_ref()
            .ok_or(Failure::ClientQuoteRejected(QuoteRejection::MissingEvidence))?;
        let verifier = self.client_verifier.as_ref().expect("checked in new");
        let report = verifier
            .verify(&evidence.quote, &evidence.pubkey)
            .map_err(|e| Failure::ClientQuoteRejected(QuoteRejection::Verifier(e)))?;
        if let Verdict::Fail(reason) = report.verdict {
            return Err(Failure::ClientQuoteRejected(QuoteRejection::Verdict(reason)));
        }
        if let PolicyDecision::Reject(r) = evaluate_policy(&report.bundle, &self.cfg.policy) {
            return Err(Failure::ClientQuoteRejected(QuoteRejection::Policy(r)));
        }
        Ok((evidence.pubkey.clone(), report.bundle))
    }

    fn on_attest_request<R: RngCore + CryptoRng>(
        &mut self,
        req: AttestRequest,
        rng: &mut R,
    ) -> Result<ServerStep, HandshakeError> {
        let (client_pubkey, client_identities) = match self.cfg.mode {
            Mode::OneWay => (None, None),
            Mode::Mutual => match self.check_client(&req) {
                Ok((pk, ids)) => (Some(pk), Some(ids)),
                Err(f) => return Err(self.fail(f)),
            },
        };
        let suite = match negotiate_suite(&req.cipher_suites, &self.cfg.suites) {
            Ok(s) => s,
            Err(WireError::NoCommonSuite) => return Err(self.fail(Failure::NoCommonSuite)),
            Err(e) => return Err(self.fail(Failure::Malformed(e))),
        };
        let server_random = Random32::generate(rng);
        let session_id = SessionId::generate(rng);
        let resp = AttestResponse {
            date: self.cfg.clock.now(),
            quote: self.tee.generate_quote().encode(),
            max_age: self.cfg.max_age,
            pubkey: self.tee.public_key().to_vec(),
            random: server_random,
            session_id,
            cipher_suite: suite.clone(),
        };
        let reply = self.encode(AttestMessage::AttestResponse(resp))?;
        self.offered = Some(Offered {
            client_random: req.random,
            server_random,
            session_id,
            suite,
            client_pubkey,
            client_identities,
        });
        self.phase = ServerPhase::AttestReceived;
        Ok(ServerStep { reply, session: None })
    }

    fn on_session_request<R: RngCore + CryptoRng>(
        &mut self,
        wrap_hash: &[u8; 32],
        session_id: SessionId,
        secret: &[u8],
        rng: &mut R,
    ) -> Result<ServerStep, HandshakeError> {
        let o = self.offered.take().expect("offered in AttestReceived");
        if session_id != o.session_id {
            return Err(self.fail(Failure::UnknownSession));
        }
        let client_secret = match WrappedSecret::from_bytes(secret)
            .and_then(|w| unwrap_secret(&self.tee, &w, wrap_hash))
        {
            Ok(s) => s,
            Err(_) => return Err(self.fail(Failure::BadSecret)),
        };
        let th = self.transcript.hash();
        let (secrets, server_secret) = match (&self.cfg.mode, &o.client_pubkey) {
            (Mode::Mutual, Some(pk)) => {
                let mine = PreSessionSecret::generate(rng);
                let wrapped = match wrap_secret(pk, &mine, &th, rng) {
                    Ok(w) => w,
                    Err(_) => return Err(self.fail(Failure::BadSecret)),
                };
                (vec![mine, client_secret], Some(wrapped.to_bytes()))
            }
            _ => (vec![client_secret], None),
        };
        let kb = match derive_key_block(self.cfg.mode, &secrets, &o.client_random, &o.server_random, &o.suite) {
            Ok(kb) => kb,
            Err(_) => return Err(self.fail(Failure::NoCommonSuite)),
        };
        for s in secrets {
            s.destroy();
        }
        let channel = TrustedChannel::new(o.session_id, o.suite.clone(), &kb, Role::Server)
            .map_err(|_| self.fail(Failure::NoCommonSuite))?;
        let resp = TrustedSessionResponse {
            session_id: o.session_id,
            confirmation: confirmation_mac(&kb, &th, Role::Server),
            server_secret,
        };
        let reply = self.encode(AttestMessage::TrustedSessionResponse(resp))?;
        self.phase = ServerPhase::Established;
        Ok(ServerStep {
            reply,
            session: Some(ServerSession {
                channel,
                client_identities: o.client_identities,
                created_at: self.cfg.clock.now(),
                max_age: self.cfg.max_age,
                key_block: kb,
            }),
        })
    }
}
