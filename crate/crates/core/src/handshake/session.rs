use std::num::NonZeroUsize;
use std::sync::{Arc, Mutex};

use lru::LruCache;
use serde::{Deserialize, Serialize};

use super::{Failure, HandshakeConfig, HandshakeError};
use crate::clock::Timestamp;
use crate::keyschedule::{KeyBlock, Role};
use crate::record::{SessionScope, TrustedChannel};
use crate::verify::{evaluate_policy, IdentityBundle, PolicyDecision};
use crate::wire::{CipherSuiteId, SessionId};

/// Client-side state for resuming a session without a new handshake.
///
/// The ticket records how far each sequence counter advanced so a resumed
/// channel continues from there instead of reusing nonces.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SessionTicket {
    pub session_id: SessionId,
    pub suite: CipherSuiteId,
    pub key_block: KeyBlock,
    pub identities: IdentityBundle,
    pub created_at: Timestamp,
    pub max_age: u32,
    pub seq_send: u64,
    pub seq_recv: u64,
}

impl SessionTicket {
    pub fn expires_at(&self) -> Timestamp {
        self.created_at.plus_secs(self.max_age as u64)
    }

    pub fn is_expired(&self, now: Timestamp) -> bool {
        now >= self.expires_at()
    }

    /// Records the counters of a channel that was using this ticket.
    pub fn update_from(&mut self, channel: &TrustedChannel) {
        if channel.session_id() == self.session_id {
            self.seq_send = channel.seq_send();
            self.seq_recv = channel.seq_recv();
        }
    }
}

/// Rebuilds a client channel from a ticket. The stored identities are
/// checked against the current policy again, so a policy tightened since
/// the ticket was issued still applies.
pub fn resume(cfg: &HandshakeConfig, ticket: &SessionTicket) -> Result<TrustedChannel, HandshakeError> {
    if ticket.is_expired(cfg.clock.now()) {
        return Err(HandshakeError::TicketExpired);
    }
    if let PolicyDecision::Reject(r) = evaluate_policy(&ticket.identities, &cfg.policy) {
        return Err(HandshakeError::Failed(Failure::PolicyRejected(r)));
    }
    TrustedChannel::with_sequences(
        ticket.session_id,
        ticket.suite.clone(),
        &ticket.key_block,
        Role::Client,
        ticket.seq_send,
        ticket.seq_recv,
    )
    .map_err(|_| HandshakeError::InvalidConfig("ticket names an unusable cipher suite"))
}

/// The server no longer holds the session; the client must start over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("session unknown or expired; full handshake required")]
pub struct FullHandshakeRequired;

struct Entry {
    channel: Arc<Mutex<TrustedChannel>>,
    client_identities: Option<IdentityBundle>,
    expires_at: Timestamp,
}

/// Bounded server-side session store. Least recently used sessions are
/// evicted first; expired ones are dropped on lookup.
pub struct SessionCache {
    inner: Mutex<LruCache<SessionId, Entry>>,
}

impl std::fmt::Debug for SessionCache {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SessionCache").field("len", &self.len()).finish()
    }
}

impl SessionCache {
    pub fn new(capacity: usize) -> Self {
        let cap = NonZeroUsize::new(capacity).unwrap_or(NonZeroUsize::MIN);
        SessionCache {
            inner: Mutex::new(LruCache::new(cap)),
        }
    }

    pub fn insert(
        &self,
        channel: TrustedChannel,
        client_identities: Option<IdentityBundle>,
        created_at: Timestamp,
        max_age: u32,
    ) -> Arc<Mutex<TrustedChannel>> {
        let id = channel.session_id();
        let channel = Arc::new(Mutex::new(channel));
        let entry = Entry {
            channel: Arc::clone(&channel),
            client_identities,
            expires_at: created_at.plus_secs(max_age as u64),
        };
        self.inner.lock().unwrap().put(id, entry);
        channel
    }

    pub fn lookup(
        &self,
        id: &SessionId,
        now: Timestamp,
    ) -> Result<Arc<Mutex<TrustedChannel>>, FullHandshakeRequired> {
        let mut inner = self.inner.lock().unwrap();
        match inner.get(id) {
            Some(e) if now < e.expires_at => Ok(Arc::clone(&e.channel)),
            Some(_) => {
                inner.pop(id);
                Err(FullHandshakeRequired)
            }
            None => Err(FullHandshakeRequired),
        }
    }

    pub fn client_identities(&self, id: &SessionId) -> Option<IdentityBundle> {
        self.inner
            .lock()
            .unwrap()
            .peek(id)
            .and_then(|e| e.client_identities.clone())
    }

    pub fn remove(&self, id: &SessionId) {
        self.inner.lock().unwrap().pop(id);
    }

    pub fn len(&self) -> usize {
        self.inner.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Membership only; expiry is enforced by [`SessionCache::lookup`].
impl SessionScope for SessionCache {
    fn has_session(&self, id: &SessionId) -> bool {
        self.inner.lock().unwrap().contains(id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::keyschedule::{derive_key_block, Mode, PreSessionSecret};
    use crate::wire::Random32;

    fn channel(id: u8) -> (TrustedChannel, KeyBlock) {
        let suite = CipherSuiteId::Aes128GcmSha256;
        let kb = derive_key_block(
            Mode::OneWay,
            &[PreSessionSecret::from_bytes([id; 32])],
            &Random32([0; 32]),
            &Random32([1; 32]),
            &suite,
        )
        .unwrap();
        let ch = TrustedChannel::new(SessionId([id; 16]), suite, &kb, Role::Server).unwrap();
        (ch, kb)
    }

    #[test]
    fn expiry_and_eviction() {
        let cache = SessionCache::new(2);
        let t0 = Timestamp(1000);
        for id in 1..=3 {
            cache.insert(channel(id).0, None, t0, 10);
        }
        assert_eq!(cache.len(), 2);
        assert!(cache.lookup(&SessionId([1; 16]), t0).is_err());
        assert!(cache.lookup(&SessionId([2; 16]), t0.plus_secs(9)).is_ok());
        assert_eq!(
            cache.lookup(&SessionId([2; 16]), t0.plus_secs(10)).unwrap_err(),
            FullHandshakeRequired
        );
        assert!(!cache.has_session(&SessionId([2; 16])));
    }

    #[test]
    fn resumed_channel_continues_sequence() {
        let (_, kb) = channel(5);
        let clock = Arc::new(crate::clock::ManualClock::new(Timestamp(100)));
        let cfg = HandshakeConfig::new(Mode::OneWay, clock.clone());
        let mut ticket = SessionTicket {
            session_id: SessionId([5; 16]),
            suite: CipherSuiteId::Aes128GcmSha256,
            key_block: kb,
            identities: IdentityBundle::new([0; 32]),
            created_at: Timestamp(100),
            max_age: 5,
            seq_send: 0,
            seq_recv: 0,
        };
        let mut ch = resume(&cfg, &ticket).unwrap();
        ch.seal(b"a", b"").unwrap();
        ticket.update_from(&ch);
        let mut again = resume(&cfg, &ticket).unwrap();
        assert_eq!(again.seal(b"b", b"").unwrap().seq, 1);
        clock.advance(5);
        assert_eq!(resume(&cfg, &ticket).unwrap_err(), HandshakeError::TicketExpired);
    }
}
