//! AEAD record protection for an established trusted channel, and the
//! router that dispatches protected requests to attested services.
//!
//! A frame is `seq(8, big-endian) ‖ ciphertext`. The nonce is the write IV
//! with the sequence number XORed into its last eight bytes. The associated
//! data is `session_id(16) ‖ seq(8) ‖ sender(1) ‖ context`, where the sender
//! byte is 0 for the client and 1 for the server.

use std::fmt;
use std::sync::{Arc, Mutex, RwLock};

use aes_gcm::aead::{Aead, KeyInit, Payload};
use aes_gcm::{Aes128Gcm, Aes256Gcm};
use chacha20poly1305::ChaCha20Poly1305;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::keyschedule::{KeyBlock, Role, IV_LEN};
use crate::wire::{CipherSuiteId, SessionId};

pub const MAX_RECORD_PLAINTEXT: usize = 16 * 1024 * 1024;
pub const RECORD_CONTENT_TYPE: &str = "application/httpa-record";
const TAG_LEN: usize = 16;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RecordError {
    #[error("channel is closed")]
    ChannelClosed,
    #[error("sequence number space exhausted")]
    Overflow,
    #[error("record plaintext exceeds {MAX_RECORD_PLAINTEXT} bytes")]
    TooLarge,
    #[error("record failed authentication")]
    AuthFailure,
    #[error("expected sequence {expected}, got {got}")]
    ReplayOrReorder { expected: u64, got: u64 },
    #[error("malformed record frame")]
    MalformedFrame,
    #[error("cipher suite is not registered")]
    UnknownSuite,
}

#[derive(Clone, PartialEq, Eq)]
pub struct RecordFrame {
    pub seq: u64,
    pub ciphertext: Vec<u8>,
}

impl fmt::Debug for RecordFrame {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RecordFrame")
            .field("seq", &self.seq)
            .field("len", &self.ciphertext.len())
            .finish()
    }
}

impl RecordFrame {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + self.ciphertext.len());
        out.extend_from_slice(&self.seq.to_be_bytes());
        out.extend_from_slice(&self.ciphertext);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, RecordError> {
        if bytes.len() < 8 + TAG_LEN {
            return Err(RecordError::MalformedFrame);
        }
        let (seq, ct) = bytes.split_at(8);
        Ok(RecordFrame {
            seq: u64::from_be_bytes(seq.try_into().unwrap()),
            ciphertext: ct.to_vec(),
        })
    }
}

enum Cipher {
    Aes128(Box<Aes128Gcm>),
    Aes256(Box<Aes256Gcm>),
    ChaCha(Box<ChaCha20Poly1305>),
}

impl Cipher {
    fn new(suite: &CipherSuiteId, key: &[u8]) -> Result<Self, RecordError> {
        let bad = |_| RecordError::UnknownSuite;
        Ok(match suite {
            CipherSuiteId::Aes128GcmSha256 => {
                Cipher::Aes128(Box::new(Aes128Gcm::new_from_slice(key).map_err(bad)?))
            }
            CipherSuiteId::Aes256GcmSha384 => {
                Cipher::Aes256(Box::new(Aes256Gcm::new_from_slice(key).map_err(bad)?))
            }
            CipherSuiteId::Chacha20Poly1305Sha256 => {
                Cipher::ChaCha(Box::new(ChaCha20Poly1305::new_from_slice(key).map_err(bad)?))
            }
            CipherSuiteId::Unrecognized(_) => return Err(RecordError::UnknownSuite),
        })
    }

    fn seal(&self, nonce: &[u8; IV_LEN], aad: &[u8], msg: &[u8]) -> Vec<u8> {
        let payload = Payload { msg, aad };
        let out = match self {
            Cipher::Aes128(c) => c.encrypt(nonce.into(), payload),
            Cipher::Aes256(c) => c.encrypt(nonce.into(), payload),
            Cipher::ChaCha(c) => c.encrypt(nonce.into(), payload),
        };
        out.expect("plaintext length is bounded")
    }

    fn open(&self, nonce: &[u8; IV_LEN], aad: &[u8], msg: &[u8]) -> Option<Vec<u8>> {
        let payload = Payload { msg, aad };
        match self {
            Cipher::Aes128(c) => c.decrypt(nonce.into(), payload),
            Cipher::Aes256(c) => c.decrypt(nonce.into(), payload),
            Cipher::ChaCha(c) => c.decrypt(nonce.into(), payload),
        }
        .ok()
    }
}

struct Direction {
    session_id: SessionId,
    sender: Role,
    cipher: Cipher,
    iv: [u8; IV_LEN],
    seq: u64,
    closed: bool,
}

impl Direction {
    fn new(
        session_id: SessionId,
        suite: &CipherSuiteId,
        kb: &KeyBlock,
        sender: Role,
        seq: u64,
    ) -> Result<Self, RecordError> {
        let iv = kb
            .write_iv(sender)
            .try_into()
            .map_err(|_| RecordError::UnknownSuite)?;
        Ok(Direction {
            session_id,
            sender,
            cipher: Cipher::new(suite, kb.write_key(sender))?,
            iv,
            seq,
            closed: false,
        })
    }

    fn nonce(&self, seq: u64) -> [u8; IV_LEN] {
        let mut nonce = self.iv;
        for (n, s) in nonce[IV_LEN - 8..].iter_mut().zip(seq.to_be_bytes()) {
            *n ^= s;
        }
        nonce
    }

    fn aad(&self, seq: u64, context: &[u8]) -> Vec<u8> {
        let mut aad = Vec::with_capacity(25 + context.len());
        aad.extend_from_slice(&self.session_id.0);
        aad.extend_from_slice(&seq.to_be_bytes());
        aad.push(match self.sender {
            Role::Client => 0,
            Role::Server => 1,
        });
        aad.extend_from_slice(context);
        aad
    }
}

/// Sending half of a channel.
pub struct Sealer(Direction);

impl Sealer {
    pub fn seal(&mut self, plaintext: &[u8], context: &[u8]) -> Result<RecordFrame, RecordError> {
        let d = &mut self.0;
        if d.closed {
            return Err(RecordError::ChannelClosed);
        }
        if plaintext.len() > MAX_RECORD_PLAINTEXT {
            return Err(RecordError::TooLarge);
        }
        if d.seq == u64::MAX {
            d.closed = true;
            return Err(RecordError::Overflow);
        }
        let seq = d.seq;
        let ciphertext = d.cipher.seal(&d.nonce(seq), &d.aad(seq, context), plaintext);
        d.seq += 1;
        Ok(RecordFrame { seq, ciphertext })
    }

    pub fn next_seq(&self) -> u64 {
        self.0.seq
    }

    pub fn is_closed(&self) -> bool {
        self.0.closed
    }
}

/// Receiving half of a channel. Frames must arrive in strict sequence;
/// any authentication failure, gap or repeat closes it.
pub struct Opener(Direction);

impl Opener {
    pub fn open(&mut self, frame: &RecordFrame, context: &[u8]) -> Result<Vec<u8>, RecordError> {
        let d = &mut self.0;
        if d.closed {
            return Err(RecordError::ChannelClosed);
        }
        if d.seq == u64::MAX {
            d.closed = true;
            return Err(RecordError::Overflow);
        }
        if frame.seq != d.seq {
            d.closed = true;
            return Err(RecordError::ReplayOrReorder {
                expected: d.seq,
                got: frame.seq,
            });
        }
        if frame.ciphertext.len() > MAX_RECORD_PLAINTEXT + TAG_LEN {
            d.closed = true;
            return Err(RecordError::TooLarge);
        }
        match d
            .cipher
            .open(&d.nonce(frame.seq), &d.aad(frame.seq, context), &frame.ciphertext)
        {
            Some(pt) => {
                d.seq += 1;
                Ok(pt)
            }
            None => {
                d.closed = true;
                Err(RecordError::AuthFailure)
            }
        }
    }

    pub fn next_seq(&self) -> u64 {
        self.0.seq
    }

    pub fn is_closed(&self) -> bool {
        self.0.closed
    }
}

/// Both directions of an established session, from one endpoint's view.
pub struct TrustedChannel {
    session_id: SessionId,
    suite: CipherSuiteId,
    role: Role,
    sealer: Sealer,
    opener: Opener,
}

impl fmt::Debug for TrustedChannel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TrustedChannel")
            .field("session_id", &self.session_id)
            .field("suite", &self.suite)
            .field("role", &self.role)
            .field("seq_send", &self.sealer.next_seq())
            .field("seq_recv", &self.opener.next_seq())
            .finish()
    }
}

impl TrustedChannel {
    pub fn new(
        session_id: SessionId,
        suite: CipherSuiteId,
        kb: &KeyBlock,
        role: Role,
    ) -> Result<Self, RecordError> {
        Self::with_sequences(session_id, suite, kb, role, 0, 0)
    }

    /// Rebuilds a channel whose counters already advanced, so resumed
    /// sessions never reuse a nonce.
    pub fn with_sequences(
        session_id: SessionId,
        suite: CipherSuiteId,
        kb: &KeyBlock,
        role: Role,
        seq_send: u64,
        seq_recv: u64,
    ) -> Result<Self, RecordError> {
        let sealer = Sealer(Direction::new(session_id, &suite, kb, role, seq_send)?);
        let opener = Opener(Direction::new(session_id, &suite, kb, role.peer(), seq_recv)?);
        Ok(TrustedChannel {
            session_id,
            suite,
            role,
            sealer,
            opener,
        })
    }

    pub fn session_id(&self) -> SessionId {
        self.session_id
    }

    pub fn suite(&self) -> &CipherSuiteId {
        &self.suite
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn seal(&mut self, plaintext: &[u8], context: &[u8]) -> Result<RecordFrame, RecordError> {
        self.sealer.seal(plaintext, context)
    }

    pub fn open(&mut self, frame: &RecordFrame, context: &[u8]) -> Result<Vec<u8>, RecordError> {
        self.opener.open(frame, context)
    }

    pub fn seq_send(&self) -> u64 {
        self.sealer.next_seq()
    }

    pub fn seq_recv(&self) -> u64 {
        self.opener.next_seq()
    }

    /// True once either direction has been closed by an error.
    pub fn is_closed(&self) -> bool {
        self.sealer.is_closed() || self.opener.is_closed()
    }

    pub fn close(&mut self) {
        self.sealer.0.closed = true;
        self.opener.0.closed = true;
    }

    pub fn split(self) -> (Sealer, Opener) {
        (self.sealer, self.opener)
    }
}

/// How a protected request selects its service.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RouteKey {
    /// Exact, case-insensitive header name with an exact value.
    Header { name: String, value: String },
    /// Path prefix matched on segment boundaries.
    PathPrefix(String),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RouteError {
    #[error("no route matches the request")]
    NoRoute,
    #[error("request does not belong to an established session")]
    UnknownSession,
}

/// Answers whether a session id names a live session.
pub trait SessionScope {
    fn has_session(&self, id: &SessionId) -> bool;
}

fn path_matches(prefix: &str, path: &str) -> bool {
    let path = path.split('?').next().unwrap_or("");
    if prefix == "/" {
        return path.starts_with('/');
    }
    let prefix = prefix.trim_end_matches('/');
    match path.strip_prefix(prefix) {
        Some(rest) => rest.is_empty() || rest.starts_with('/'),
        None => false,
    }
}

pub type RouteTable<H> = Vec<(RouteKey, Arc<H>)>;

/// Maps request metadata to a handler. Only the target and headers are
/// consulted; record payloads never pass through here.
pub struct Router<H: ?Sized> {
    table: RwLock<Arc<RouteTable<H>>>,
}

impl<H: ?Sized> fmt::Debug for Router<H> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let table = self.table.read().unwrap();
        f.debug_list().entries(table.iter().map(|(k, _)| k)).finish()
    }
}

impl<H: ?Sized> Default for Router<H> {
    fn default() -> Self {
        Router {
            table: RwLock::new(Arc::new(Vec::new())),
        }
    }
}

impl<H: ?Sized> Router<H> {
    pub fn new(routes: RouteTable<H>) -> Self {
        Router {
            table: RwLock::new(Arc::new(routes)),
        }
    }

    /// Swaps in a new table. Lookups in flight keep the table they started
    /// with, so no request ever sees a half-updated mix.
    pub fn replace(&self, routes: RouteTable<H>) {
        *self.table.write().unwrap() = Arc::new(routes);
    }

    pub fn routes(&self) -> Vec<RouteKey> {
        self.table.read().unwrap().iter().map(|(k, _)| k.clone()).collect()
    }

    /// Header matches win over path prefixes; among prefixes the longest wins.
    pub fn resolve<'a>(
        &self,
        target: &str,
        headers: impl IntoIterator<Item = (&'a str, &'a str)>,
    ) -> Option<Arc<H>> {
        let table = Arc::clone(&self.table.read().unwrap());
        let headers: Vec<(&str, &str)> = headers.into_iter().collect();
        let by_header = table.iter().find(|(key, _)| match key {
            RouteKey::Header { name, value } => headers
                .iter()
                .any(|(n, v)| n.eq_ignore_ascii_case(name) && v == value),
            RouteKey::PathPrefix(_) => false,
        });
        if let Some((_, h)) = by_header {
            return Some(Arc::clone(h));
        }
        table
            .iter()
            .filter_map(|(key, h)| match key {
                RouteKey::PathPrefix(p) if path_matches(p, target) => Some((p.len(), h)),
                _ => None,
            })
            .max_by_key(|(len, _)| *len)
            .map(|(_, h)| Arc::clone(h))
    }

    /// Resolves a protected request. It must carry an `Attest-Session-Id`
    /// naming a session that the resolved handler knows about.
    pub fn route<'a>(
        &self,
        target: &str,
        headers: impl IntoIterator<Item = (&'a str, &'a str)>,
    ) -> Result<(SessionId, Arc<H>), RouteError>
    where
        H: SessionScope,
    {
        let headers: Vec<(&str, &str)> = headers.into_iter().collect();
        let session = headers
            .iter()
            .find(|(n, _)| n.eq_ignore_ascii_case(crate::wire::headers::ATTEST_SESSION_ID))
            .and_then(|(_, v)| SessionId::from_header_value(v))
            .ok_or(RouteError::UnknownSession)?;
        let handler = self
            .resolve(target, headers.iter().copied())
            .ok_or(RouteError::NoRoute)?;
        if !handler.has_session(&session) {
            return Err(RouteError::UnknownSession);
        }
        Ok((session, handler))
    }
}

/// Application logic run inside the TEE boundary on decrypted requests.
pub trait Handler: Send + Sync {
    fn handle(&self, request: &[u8]) -> Vec<u8>;
}

impl<F> Handler for F
where
    F: Fn(&[u8]) -> Vec<u8> + Send + Sync,
{
    fn handle(&self, request: &[u8]) -> Vec<u8> {
        self(request)
    }
}

pub fn echo_handler() -> Arc<dyn Handler> {
    Arc::new(|req: &[u8]| req.to_vec())
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ServiceError {
    #[error(transparent)]
    Route(#[from] RouteError),
    #[error(transparent)]
    Record(#[from] RecordError),
}

/// Opens a request frame, runs the handler, and seals the reply on the same
/// channel. The handler only ever sees plaintext it was routed to.
pub fn serve_record(
    channel: &Mutex<TrustedChannel>,
    handler: &dyn Handler,
    frame_bytes: &[u8],
    context: &[u8],
) -> Result<Vec<u8>, ServiceError> {
    let mut channel = channel.lock().unwrap();
    let frame = match RecordFrame::decode(frame_bytes) {
        Ok(f) => f,
        Err(e) => {
            channel.close();
            return Err(e.into());
        }
    };
    let request = channel.open(&frame, context)?;
    let reply = handler.handle(&request);
    Ok(channel.seal(&reply, context)?.encode())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::keyschedule::{derive_key_block, Mode, PreSessionSecret};
    use crate::wire::Random32;
    use proptest::prelude::*;

    fn pair(suite: CipherSuiteId) -> (TrustedChannel, TrustedChannel) {
        let secret = PreSessionSecret::from_bytes([7; 32]);
        let kb = derive_key_block(
            Mode::OneWay,
            &[secret],
            &Random32([1; 32]),
            &Random32([2; 32]),
            &suite,
        )
        .unwrap();
        let sid = SessionId([9; 16]);
        (
            TrustedChannel::new(sid, suite.clone(), &kb, Role::Client).unwrap(),
            TrustedChannel::new(sid, suite, &kb, Role::Server).unwrap(),
        )
    }

    #[test]
    fn both_directions_every_suite() {
        for suite in CipherSuiteId::REGISTERED {
            let (mut c, mut s) = pair(suite);
            let f = c.seal(b"ping", b"").unwrap();
            assert_eq!(s.open(&f, b"").unwrap(), b"ping");
            let f = s.seal(b"pong", b"").unwrap();
            assert_eq!(c.open(&f, b"").unwrap(), b"pong");
        }
    }

    #[test]
    fn directions_use_different_keys() {
        let (mut c, _) = pair(CipherSuiteId::Aes128GcmSha256);
        let (mut c2, _) = pair(CipherSuiteId::Aes128GcmSha256);
        let f = c.seal(b"x", b"").unwrap();
        // a client cannot open its own frame: the opener expects the server key
        assert_eq!(c2.open(&f, b""), Err(RecordError::AuthFailure));
    }

    #[test]
    fn replay_closes_channel() {
        let (mut c, mut s) = pair(CipherSuiteId::Chacha20Poly1305Sha256);
        let f = c.seal(b"a", b"").unwrap();
        s.open(&f, b"").unwrap();
        assert_eq!(
            s.open(&f, b""),
            Err(RecordError::ReplayOrReorder { expected: 1, got: 0 })
        );
        let next = c.seal(b"b", b"").unwrap();
        assert_eq!(s.open(&next, b""), Err(RecordError::ChannelClosed));
    }

    #[test]
    fn overflow_closes_channel() {
        let secret = PreSessionSecret::from_bytes([7; 32]);
        let suite = CipherSuiteId::Aes128GcmSha256;
        let kb = derive_key_block(Mode::OneWay, &[secret], &Random32([1; 32]), &Random32([2; 32]), &suite)
            .unwrap();
        let mut c =
            TrustedChannel::with_sequences(SessionId([0; 16]), suite, &kb, Role::Client, u64::MAX - 1, 0)
                .unwrap();
        assert_eq!(c.seal(b"last", b"").unwrap().seq, u64::MAX - 1);
        assert_eq!(c.seal(b"x", b""), Err(RecordError::Overflow));
        assert_eq!(c.seal(b"x", b""), Err(RecordError::ChannelClosed));
    }

    #[test]
    fn oversized_plaintext_rejected() {
        let (mut c, _) = pair(CipherSuiteId::Aes128GcmSha256);
        let big = vec![0u8; MAX_RECORD_PLAINTEXT + 1];
        assert_eq!(c.seal(&big, b""), Err(RecordError::TooLarge));
        assert!(c.seal(b"ok", b"").is_ok());
    }

    #[test]
    fn context_is_authenticated() {
        let (mut c, mut s) = pair(CipherSuiteId::Aes256GcmSha384);
        let f = c.seal(b"body", b"/a").unwrap();
        assert_eq!(s.open(&f, b"/b"), Err(RecordError::AuthFailure));
    }

    #[derive(Debug)]
    struct Scope(Vec<SessionId>);
    impl SessionScope for Scope {
        fn has_session(&self, id: &SessionId) -> bool {
            self.0.contains(id)
        }
    }

    #[test]
    fn routing_precedence() {
        let router = Router::new(vec![
            (RouteKey::PathPrefix("/".into()), Arc::new("root")),
            (RouteKey::PathPrefix("/api".into()), Arc::new("api")),
            (RouteKey::PathPrefix("/api/v2".into()), Arc::new("v2")),
            (
                RouteKey::Header {
                    name: "X-Service".into(),
                    value: "billing".into(),
                },
                Arc::new("billing"),
            ),
        ]);
        let r = |target: &str, h: &[(&str, &str)]| *router.resolve(target, h.iter().copied()).unwrap();
        assert_eq!(r("/api/v2/x", &[]), "v2");
        assert_eq!(r("/api/v20", &[]), "api");
        assert_eq!(r("/apix", &[]), "root");
        assert_eq!(r("/api/v2", &[("x-service", "billing")]), "billing");
        assert_eq!(r("/api", &[("X-Service", "Billing")]), "api");
    }

    #[test]
    fn route_requires_known_session() {
        let sid = SessionId([3; 16]);
        let router = Router::new(vec![(RouteKey::PathPrefix("/echo".into()), Arc::new(Scope(vec![sid])))]);
        let hv = sid.to_header_value();
        let ok = router.route("/echo", [("Attest-Session-Id", hv.as_str())]);
        assert_eq!(ok.unwrap().0, sid);
        assert_eq!(
            router.route("/echo", []).unwrap_err(),
            RouteError::UnknownSession
        );
        let other = SessionId([4; 16]).to_header_value();
        assert_eq!(
            router
                .route("/echo", [("Attest-Session-Id", other.as_str())])
                .unwrap_err(),
            RouteError::UnknownSession
        );
        assert_eq!(
            router
                .route("/nope", [("Attest-Session-Id", hv.as_str())])
                .unwrap_err(),
            RouteError::NoRoute
        );
    }

    #[test]
    fn replace_is_atomic_for_readers() {
        let router = Router::new(vec![(RouteKey::PathPrefix("/".into()), Arc::new(1))]);
        router.replace(vec![(RouteKey::PathPrefix("/".into()), Arc::new(2))]);
        assert_eq!(*router.resolve("/", []).unwrap(), 2);
        assert_eq!(router.routes().len(), 1);
    }

    proptest! {
        #[test]
        fn in_order_frames_round_trip(msgs in proptest::collection::vec(proptest::collection::vec(any::<u8>(), 0..64), 1..20)) {
            let (mut c, mut s) = pair(CipherSuiteId::Aes128GcmSha256);
            for m in &msgs {
                let f = RecordFrame::decode(&c.seal(m, b"").unwrap().encode()).unwrap();
                prop_assert_eq!(&s.open(&f, b"").unwrap(), m);
            }
        }

        #[test]
        fn any_bit_flip_is_rejected(msg in proptest::collection::vec(any::<u8>(), 0..64), bit in any::<prop::sample::Index>()) {
            let (mut c, mut s) = pair(CipherSuiteId::Chacha20Poly1305Sha256);
            let mut bytes = c.seal(&msg, b"").unwrap().encode();
            let i = bit.index(bytes.len() * 8);
            bytes[i / 8] ^= 1 << (i % 8);
            let f = RecordFrame::decode(&bytes).unwrap();
            prop_assert!(s.open(&f, b"").is_err());
            prop_assert!(s.is_closed());
        }
    }
}
