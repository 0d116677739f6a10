//! PRF, key-block derivation, pre-session secret wrapping and the
//! handshake confirmation MAC.
//!
//! The PRF is the iterated HMAC-SHA-256 expansion used by TLS 1.2:
//!
//! ```text
//! A(0) = label ‖ seed
//! A(i) = HMAC(secret, A(i-1))
//! out  = HMAC(secret, A(1) ‖ label ‖ seed) ‖ HMAC(secret, A(2) ‖ label ‖ seed) ‖ …
//! ```
//!
//! The key block is partitioned, in order, into the client and server MAC
//! secrets (32 bytes each), the client and server write keys (suite key
//! length) and the client and server IVs (12 bytes each).

use std::fmt;

use chacha20poly1305::aead::{Aead, KeyInit, Payload};
use chacha20poly1305::ChaCha20Poly1305;
use hmac::{Hmac, Mac};
use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};
use sha2::Sha256;
use thiserror::Error;
use x25519_dalek::{EphemeralSecret, PublicKey as KemPublicKey};
use zeroize::{Zeroize, ZeroizeOnDrop, Zeroizing};

use crate::quote::SimulatedTee;
use crate::wire::{CipherSuiteId, Random32};

type HmacSha256 = Hmac<Sha256>;

pub const ONE_WAY_LABEL: &str = "trusted session keys";
pub const MUTUAL_LABEL: &str = "trusted mutual session keys";
pub const CONFIRMATION_LABEL: &[u8] = b"httpa finished";
const WRAP_LABEL: &str = "httpa secret wrap";

pub const MAX_PRF_OUTPUT: usize = 1024;
pub const MAC_SECRET_LEN: usize = 32;
pub const IV_LEN: usize = 12;
pub const PRE_SESSION_SECRET_LEN: usize = 32;
const WRAP_TAG_LEN: usize = 16;
pub const WRAPPED_SECRET_LEN: usize = 32 + PRE_SESSION_SECRET_LEN + WRAP_TAG_LEN;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum KeyScheduleError {
    #[error("invalid PRF secret or output length")]
    InvalidLength,
    #[error("{mode:?} mode needs {expected} pre-session secret(s), got {got}")]
    WrongSecretCount { mode: Mode, expected: usize, got: usize },
    #[error("cipher suite is not registered")]
    UnknownSuite,
    #[error("invalid KEM public key")]
    InvalidPublicKey,
    #[error("wrapped secret failed to unwrap")]
    UnwrapFailure,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    OneWay,
    Mutual,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Client,
    Server,
}

impl Role {
    pub fn peer(self) -> Role {
        match self {
            Role::Client => Role::Server,
            Role::Server => Role::Client,
        }
    }
}

pub fn prf(secret: &[u8], label: &str, seed: &[u8], out_len: usize) -> Result<Vec<u8>, KeyScheduleError> {
    if secret.is_empty() || out_len == 0 || out_len > MAX_PRF_OUTPUT {
        return Err(KeyScheduleError::InvalidLength);
    }
    let keyed = <HmacSha256 as Mac>::new_from_slice(secret).expect("HMAC accepts any key length");
    let mut label_seed = Vec::with_capacity(label.len() + seed.len());
    label_seed.extend_from_slice(label.as_bytes());
    label_seed.extend_from_slice(seed);

    let mut out = Vec::with_capacity(out_len + 32);
    let mut a = label_seed.clone();
    while out.len() < out_len {
        let mut mac = keyed.clone();
        mac.update(&a);
        a = mac.finalize().into_bytes().to_vec();
        let mut mac = keyed.clone();
        mac.update(&a);
        mac.update(&label_seed);
        out.extend_from_slice(&mac.finalize().into_bytes());
    }
    out.truncate(out_len);
    a.zeroize();
    Ok(out)
}

/// 32 uniformly random bytes chosen by one side and wrapped to the peer.
#[derive(Clone, PartialEq, Eq, Zeroize, ZeroizeOnDrop)]
pub struct PreSessionSecret([u8; PRE_SESSION_SECRET_LEN]);

impl fmt::Debug for PreSessionSecret {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("PreSessionSecret(..)")
    }
}

impl PreSessionSecret {
    pub fn generate<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        let mut bytes = [0u8; PRE_SESSION_SECRET_LEN];
        rng.fill_bytes(&mut bytes);
        PreSessionSecret(bytes)
    }

    pub fn from_bytes(bytes: [u8; PRE_SESSION_SECRET_LEN]) -> Self {
        PreSessionSecret(bytes)
    }

    pub fn as_bytes(&self) -> &[u8; PRE_SESSION_SECRET_LEN] {
        &self.0
    }

    /// Erases the secret now instead of at drop.
    pub fn destroy(mut self) {
        self.0.zeroize();
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KeyBlockLayout {
    pub mac_len: usize,
    pub key_len: usize,
    pub iv_len: usize,
}

impl KeyBlockLayout {
    pub fn for_suite(suite: &CipherSuiteId) -> Result<Self, KeyScheduleError> {
        let key_len = suite.key_len().ok_or(KeyScheduleError::UnknownSuite)?;
        Ok(KeyBlockLayout {
            mac_len: MAC_SECRET_LEN,
            key_len,
            iv_len: IV_LEN,
        })
    }

    pub fn total(&self) -> usize {
        2 * (self.mac_len + self.key_len + self.iv_len)
    }

    /// Byte ranges of the six fields inside the key block, in partition order.
    pub fn offsets(&self) -> [std::ops::Range<usize>; 6] {
        let lens = [
            self.mac_len,
            self.mac_len,
            self.key_len,
            self.key_len,
            self.iv_len,
            self.iv_len,
        ];
        let mut start = 0;
        lens.map(|len| {
            let r = start..start + len;
            start += len;
            r
        })
    }
}

/// The six session secrets partitioned from PRF output.
#[derive(Clone, PartialEq, Eq, Zeroize, ZeroizeOnDrop, Serialize, Deserialize)]
pub struct KeyBlock {
    #[serde(with = "hex::serde")]
    client_write_mac_secret: Vec<u8>,
    #[serde(with = "hex::serde")]
    server_write_mac_secret: Vec<u8>,
    #[serde(with = "hex::serde")]
    client_write_key: Vec<u8>,
    #[serde(with = "hex::serde")]
    server_write_key: Vec<u8>,
    #[serde(with = "hex::serde")]
    client_write_iv: Vec<u8>,
    #[serde(with = "hex::serde")]
    server_write_iv: Vec<u8>,
}

impl fmt::Debug for KeyBlock {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KeyBlock")
            .field("key_len", &self.client_write_key.len())
            .finish_non_exhaustive()
    }
}

impl KeyBlock {
    /// Splits raw PRF output according to `suite`'s layout.
    pub fn partition(block: &[u8], suite: &CipherSuiteId) -> Result<Self, KeyScheduleError> {
        let layout = KeyBlockLayout::for_suite(suite)?;
        if block.len() != layout.total() {
            return Err(KeyScheduleError::InvalidLength);
        }
        let [a, b, c, d, e, f] = layout.offsets().map(|r| block[r].to_vec());
        Ok(KeyBlock {
            client_write_mac_secret: a,
            server_write_mac_secret: b,
            client_write_key: c,
            server_write_key: d,
            client_write_iv: e,
            server_write_iv: f,
        })
    }

    pub fn client_write_mac_secret(&self) -> &[u8] {
        &self.client_write_mac_secret
    }
    pub fn server_write_mac_secret(&self) -> &[u8] {
        &self.server_write_mac_secret
    }
    pub fn client_write_key(&self) -> &[u8] {
        &self.client_write_key
    }
    pub fn server_write_key(&self) -> &[u8] {
        &self.server_write_key
    }
    pub fn client_write_iv(&self) -> &[u8] {
        &self.client_write_iv
    }
    pub fn server_write_iv(&self) -> &[u8] {
        &self.server_write_iv
    }

    pub fn write_key(&self, role: Role) -> &[u8] {
        match role {
            Role::Client => &self.client_write_key,
            Role::Server => &self.server_write_key,
        }
    }

    pub fn write_iv(&self, role: Role) -> &[u8] {
        match role {
            Role::Client => &self.client_write_iv,
            Role::Server => &self.server_write_iv,
        }
    }

    pub fn mac_secret(&self, role: Role) -> &[u8] {
        match role {
            Role::Client => &self.client_write_mac_secret,
            Role::Server => &self.server_write_mac_secret,
        }
    }

    /// The concatenated key block, in partition order.
    pub fn to_bytes(&self) -> Zeroizing<Vec<u8>> {
        let mut out = Vec::new();
        for part in [
            &self.client_write_mac_secret,
            &self.server_write_mac_secret,
            &self.client_write_key,
            &self.server_write_key,
            &self.client_write_iv,
            &self.server_write_iv,
        ] {
            out.extend_from_slice(part);
        }
        Zeroizing::new(out)
    }

    pub fn destroy(mut self) {
        self.zeroize();
    }
}

/// Derives the key block. One-way mode takes exactly the client's secret;
/// mutual mode takes `[server_secret, client_secret]`, concatenated in that
/// order as the PRF secret.
pub fn derive_key_block(
    mode: Mode,
    secrets: &[PreSessionSecret],
    client_random: &Random32,
    server_random: &Random32,
    suite: &CipherSuiteId,
) -> Result<KeyBlock, KeyScheduleError> {
    let expected = match mode {
        Mode::OneWay => 1,
        Mode::Mutual => 2,
    };
    if secrets.len() != expected {
        return Err(KeyScheduleError::WrongSecretCount {
            mode,
            expected,
            got: secrets.len(),
        });
    }
    let layout = KeyBlockLayout::for_suite(suite)?;
    let secret: Zeroizing<Vec<u8>> =
        Zeroizing::new(secrets.iter().flat_map(|s| s.0).collect());
    let label = match mode {
        Mode::OneWay => ONE_WAY_LABEL,
        Mode::Mutual => MUTUAL_LABEL,
    };
    let mut seed = [0u8; 64];
    seed[..32].copy_from_slice(&client_random.0);
    seed[32..].copy_from_slice(&server_random.0);
    let block = Zeroizing::new(prf(&secret, label, &seed, layout.total())?);
    KeyBlock::partition(&block, suite)
}

/// A pre-session secret encrypted to a TEE public key: an ephemeral X25519
/// key followed by a ChaCha20-Poly1305 ciphertext whose associated data is
/// the transcript hash.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WrappedSecret {
    pub encapsulated_key: [u8; 32],
    pub ciphertext: Vec<u8>,
}

impl WrappedSecret {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = self.encapsulated_key.to_vec();
        out.extend_from_slice(&self.ciphertext);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, KeyScheduleError> {
        if bytes.len() != WRAPPED_SECRET_LEN {
            return Err(KeyScheduleError::UnwrapFailure);
        }
        Ok(WrappedSecret {
            encapsulated_key: bytes[..32].try_into().expect("length checked"),
            ciphertext: bytes[32..].to_vec(),
        })
    }
}

fn wrap_key(shared: &[u8; 32], encapsulated: &[u8; 32], recipient: &[u8; 32]) -> Zeroizing<Vec<u8>> {
    let mut seed = [0u8; 64];
    seed[..32].copy_from_slice(encapsulated);
    seed[32..].copy_from_slice(recipient);
    Zeroizing::new(prf(shared, WRAP_LABEL, &seed, 32).expect("fixed lengths are valid"))
}

pub fn wrap_secret<R: RngCore + CryptoRng>(
    tee_pubkey: &[u8],
    secret: &PreSessionSecret,
    transcript_hash: &[u8; 32],
    rng: &mut R,
) -> Result<WrappedSecret, KeyScheduleError> {
    let recipient: [u8; 32] = tee_pubkey
        .try_into()
        .map_err(|_| KeyScheduleError::InvalidPublicKey)?;
    let ephemeral = EphemeralSecret::random_from_rng(rng);
    let encapsulated = *KemPublicKey::from(&ephemeral).as_bytes();
    let shared = ephemeral.diffie_hellman(&KemPublicKey::from(recipient));
    if !shared.was_contributory() {
        return Err(KeyScheduleError::InvalidPublicKey);
    }
    let key = wrap_key(shared.as_bytes(), &encapsulated, &recipient);
    let cipher = ChaCha20Poly1305::new_from_slice(&key).expect("32-byte key");
    let ciphertext = cipher
        .encrypt(
            &[0u8; 12].into(),
            Payload {
                msg: &secret.0,
                aad: transcript_hash,
            },
        )
        .expect("encryption of 32 bytes cannot fail");
    Ok(WrappedSecret {
        encapsulated_key: encapsulated,
        ciphertext,
    })
}

/// Unwraps inside `tee`; fails on a wrong key, a different transcript hash
/// or any modified byte.
pub fn unwrap_secret(
    tee: &SimulatedTee,
    wrapped: &WrappedSecret,
    transcript_hash: &[u8; 32],
) -> Result<PreSessionSecret, KeyScheduleError> {
    let shared = Zeroizing::new(
        tee.decapsulate(&wrapped.encapsulated_key)
            .ok_or(KeyScheduleError::UnwrapFailure)?,
    );
    let key = wrap_key(&shared, &wrapped.encapsulated_key, &tee.public_key());
    let cipher = ChaCha20Poly1305::new_from_slice(&key).expect("32-byte key");
    let plain = Zeroizing::new(
        cipher
            .decrypt(
                &[0u8; 12].into(),
                Payload {
                    msg: &wrapped.ciphertext,
                    aad: transcript_hash,
                },
            )
            .map_err(|_| KeyScheduleError::UnwrapFailure)?,
    );
    let bytes: [u8; 32] = plain
        .as_slice()
        .try_into()
        .map_err(|_| KeyScheduleError::UnwrapFailure)?;
    Ok(PreSessionSecret(bytes))
}

fn confirmation_hmac(kb: &KeyBlock, transcript_hash: &[u8; 32], role: Role) -> HmacSha256 {
    let mut mac = <HmacSha256 as Mac>::new_from_slice(kb.mac_secret(role)).expect("any key length");
    mac.update(CONFIRMATION_LABEL);
    mac.update(transcript_hash);
    mac
}

/// HMAC-SHA-256 under `role`'s MAC secret over `"httpa finished" ‖ transcript_hash`.
pub fn confirmation_mac(kb: &KeyBlock, transcript_hash: &[u8; 32], role: Role) -> [u8; 32] {
    confirmation_hmac(kb, transcript_hash, role)
        .finalize()
        .into_bytes()
        .into()
}

/// Constant-time check of a received confirmation MAC.
pub fn verify_confirmation(kb: &KeyBlock, transcript_hash: &[u8; 32], role: Role, tag: &[u8]) -> bool {
    confirmation_hmac(kb, transcript_hash, role)
        .verify_slice(tag)
        .is_ok()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pki::DemoPki;
    use proptest::prelude::*;
    use rand::{RngCore, SeedableRng};
    use rand_chacha::ChaCha20Rng;
    use CipherSuiteId::*;

    #[test]
    fn prf_is_prefix_stable() {
        let full = prf(b"secret", "label", b"seed", 200).unwrap();
        for n in [1, 31, 32, 33, 64, 199] {
            assert_eq!(prf(b"secret", "label", b"seed", n).unwrap(), full[..n]);
        }
    }

    #[test]
    fn prf_length_limits() {
        assert_eq!(prf(b"", "l", b"s", 16), Err(KeyScheduleError::InvalidLength));
        assert_eq!(prf(b"k", "l", b"s", 0), Err(KeyScheduleError::InvalidLength));
        assert_eq!(prf(b"k", "l", b"s", 1025), Err(KeyScheduleError::InvalidLength));
        assert_eq!(prf(b"k", "l", b"s", 1024).unwrap().len(), 1024);
    }

    #[test]
    fn layout_sizes() {
        let aes128 = KeyBlockLayout::for_suite(&Aes128GcmSha256).unwrap();
        assert_eq!(aes128.total(), 120);
        assert_eq!(KeyBlockLayout::for_suite(&Aes256GcmSha384).unwrap().total(), 152);
        assert_eq!(KeyBlockLayout::for_suite(&Chacha20Poly1305Sha256).unwrap().total(), 152);
        assert_eq!(
            KeyBlockLayout::for_suite(&Unrecognized("X".into())),
            Err(KeyScheduleError::UnknownSuite)
        );
    }

    #[test]
    fn secret_count_is_checked() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let s = PreSessionSecret::generate(&mut rng);
        let r = Random32([1; 32]);
        assert!(matches!(
            derive_key_block(Mode::OneWay, &[s.clone(), s.clone()], &r, &r, &Aes128GcmSha256),
            Err(KeyScheduleError::WrongSecretCount { expected: 1, got: 2, .. })
        ));
        assert!(matches!(
            derive_key_block(Mode::Mutual, &[s], &r, &r, &Aes128GcmSha256),
            Err(KeyScheduleError::WrongSecretCount { expected: 2, got: 1, .. })
        ));
    }

    #[test]
    fn mutual_concatenates_server_then_client() {
        let server = PreSessionSecret::from_bytes([1; 32]);
        let client = PreSessionSecret::from_bytes([2; 32]);
        let (cr, sr) = (Random32([3; 32]), Random32([4; 32]));
        let kb = derive_key_block(Mode::Mutual, &[server, client], &cr, &sr, &Aes128GcmSha256).unwrap();
        let mut secret = vec![1u8; 32];
        secret.extend_from_slice(&[2u8; 32]);
        let mut seed = vec![3u8; 32];
        seed.extend_from_slice(&[4u8; 32]);
        let expected = prf(&secret, "trusted mutual session keys", &seed, 120).unwrap();
        assert_eq!(kb.to_bytes().as_slice(), expected.as_slice());
    }

    #[test]
    fn wrap_round_trip_and_failures() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let pki = DemoPki::generate(&mut rng);
        let tee_a = SimulatedTee::create(b"a", &pki.vendor, &pki.anchors(), &mut rng).unwrap();
        let tee_b = SimulatedTee::create(b"b", &pki.vendor, &pki.anchors(), &mut rng).unwrap();
        let secret = PreSessionSecret::generate(&mut rng);
        let th = [7u8; 32];
        let wrapped = wrap_secret(&tee_a.public_key(), &secret, &th, &mut rng).unwrap();
        assert_eq!(wrapped.to_bytes().len(), WRAPPED_SECRET_LEN);
        assert_eq!(unwrap_secret(&tee_a, &wrapped, &th).unwrap(), secret);

        let mut flipped = wrapped.clone();
        flipped.ciphertext[3] ^= 1;
        assert_eq!(unwrap_secret(&tee_a, &flipped, &th), Err(KeyScheduleError::UnwrapFailure));
        let mut flipped = wrapped.clone();
        flipped.encapsulated_key[0] ^= 1;
        assert_eq!(unwrap_secret(&tee_a, &flipped, &th), Err(KeyScheduleError::UnwrapFailure));
        assert_eq!(unwrap_secret(&tee_b, &wrapped, &th), Err(KeyScheduleError::UnwrapFailure));
        assert_eq!(unwrap_secret(&tee_a, &wrapped, &[8u8; 32]), Err(KeyScheduleError::UnwrapFailure));
    }

    #[test]
    fn wrap_rejects_bad_keys() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let s = PreSessionSecret::generate(&mut rng);
        assert_eq!(
            wrap_secret(&[1; 31], &s, &[0; 32], &mut rng),
            Err(KeyScheduleError::InvalidPublicKey)
        );
        // the identity point yields an all-zero shared secret
        assert_eq!(
            wrap_secret(&[0; 32], &s, &[0; 32], &mut rng),
            Err(KeyScheduleError::InvalidPublicKey)
        );
    }

    #[test]
    fn confirmation_depends_on_role_and_transcript() {
        let kb = derive_key_block(
            Mode::OneWay,
            &[PreSessionSecret::from_bytes([9; 32])],
            &Random32([1; 32]),
            &Random32([2; 32]),
            &Aes128GcmSha256,
        )
        .unwrap();
        let th = [5u8; 32];
        let server = confirmation_mac(&kb, &th, Role::Server);
        assert_eq!(server, confirmation_mac(&kb.clone(), &th, Role::Server));
        assert_ne!(server, confirmation_mac(&kb, &th, Role::Client));
        assert!(verify_confirmation(&kb, &th, Role::Server, &server));
        assert!(!verify_confirmation(&kb, &[6u8; 32], Role::Server, &server));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn swapping_randoms_changes_every_field(cr in any::<[u8; 32]>(), sr in any::<[u8; 32]>(), s in any::<[u8; 32]>()) {
            prop_assume!(cr != sr);
            let secret = [PreSessionSecret::from_bytes(s)];
            let a = derive_key_block(Mode::OneWay, &secret, &Random32(cr), &Random32(sr), &Aes128GcmSha256).unwrap();
            let b = derive_key_block(Mode::OneWay, &secret, &Random32(sr), &Random32(cr), &Aes128GcmSha256).unwrap();
            prop_assert_ne!(a.client_write_mac_secret(), b.client_write_mac_secret());
            prop_assert_ne!(a.server_write_mac_secret(), b.server_write_mac_secret());
            prop_assert_ne!(a.client_write_key(), b.client_write_key());
            prop_assert_ne!(a.server_write_key(), b.server_write_key());
            prop_assert_ne!(a.client_write_iv(), b.client_write_iv());
            prop_assert_ne!(a.server_write_iv(), b.server_write_iv());
        }

        #[test]
        fn differing_transcripts_give_differing_macs(t1 in any::<[u8; 32]>(), t2 in any::<[u8; 32]>()) {
            prop_assume!(t1 != t2);
            let kb = derive_key_block(
                Mode::OneWay,
                &[PreSessionSecret::from_bytes([9; 32])],
                &Random32([1; 32]),
                &Random32([2; 32]),
                &Chacha20Poly1305Sha256,
            ).unwrap();
            prop_assert_ne!(confirmation_mac(&kb, &t1, Role::Server), confirmation_mac(&kb, &t2, Role::Server));
        }
    }

    #[test]
    fn seed_byte_changes_change_output() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let mut seen = std::collections::HashSet::new();
        for _ in 0..1000 {
            let mut secret = [0u8; 32];
            let mut seed = [0u8; 64];
            rng.fill_bytes(&mut secret);
            rng.fill_bytes(&mut seed);
            let base = prf(&secret, ONE_WAY_LABEL, &seed, 32).unwrap();
            let i = (rng.next_u32() % 64) as usize;
            let mut altered = seed;
            altered[i] ^= 1 << (rng.next_u32() % 8);
            let other = prf(&secret, ONE_WAY_LABEL, &altered, 32).unwrap();
            assert_ne!(base, other);
            assert!(seen.insert(base));
            assert!(seen.insert(other));
        }
    }
}
