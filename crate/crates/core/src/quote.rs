//! Attestation quotes and the simulated TEE that produces them.
//!
//! Serialized layout, all integers big-endian:
//!
//! ```text
//! version(2) ‖ measurement(32) ‖ vendor_id(16) ‖ report_data(64)
//!   ‖ sig_len(2) ‖ signature ‖ chain_len(2) ‖ { cert_len(2) ‖ cert }*
//! ```
//!
//! `report_data[0..32]` is the SHA-256 fingerprint of the TEE's KEM public
//! key and `report_data[32..64]` is zero. The signature is made by the TCB
//! signing key over the first 114 bytes. The chain holds the vendor signing
//! CA followed by the TCB signing key certificate; the vendor root is a
//! trust anchor and is not carried.

use ed25519_dalek::{Signer, SigningKey};
use rand::{CryptoRng, RngCore};
use sha2::{Digest, Sha256};
use thiserror::Error;
use x25519_dalek::{PublicKey as KemPublicKey, StaticSecret};

use crate::codec::{put_prefixed, Reader};
use crate::pki::{Certificate, PkiError, TrustAnchors, VendorCredentials};

pub const QUOTE_VERSION: u16 = 1;
/// version + measurement + vendor_id + report_data + sig_len
pub const QUOTE_FIXED_PREFIX_LEN: usize = 2 + 32 + 16 + 64 + 2;
const SIGNED_LEN: usize = 2 + 32 + 16 + 64;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum QuoteError {
    #[error("quote is truncated")]
    TruncatedQuote,
    #[error("unsupported quote version {0:#06x}")]
    BadVersion(u16),
    #[error("trailing bytes after quote")]
    TrailingBytes,
    #[error("vendor credentials do not chain to a trusted vendor root")]
    BadVendorCredentials,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Quote {
    pub version: u16,
    pub measurement: [u8; 32],
    pub vendor_id: [u8; 16],
    pub report_data: [u8; 64],
    pub signature: Vec<u8>,
    pub cert_chain: Vec<Vec<u8>>,
}

/// SHA-256 of a public key, as bound into `report_data`.
pub fn fingerprint(pubkey: &[u8]) -> [u8; 32] {
    Sha256::digest(pubkey).into()
}

/// Vendor id derived from the vendor signing CA's subject name.
pub fn vendor_id_for(subject: &str) -> [u8; 16] {
    let digest = Sha256::digest(subject.as_bytes());
    digest[..16].try_into().expect("digest is 32 bytes")
}

impl Quote {
    /// The bytes covered by the TCB signature.
    pub fn signed_prefix(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(SIGNED_LEN);
        out.extend_from_slice(&self.version.to_be_bytes());
        out.extend_from_slice(&self.measurement);
        out.extend_from_slice(&self.vendor_id);
        out.extend_from_slice(&self.report_data);
        out
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = self.signed_prefix();
        put_prefixed(&mut out, &self.signature);
        out.extend_from_slice(&(self.cert_chain.len() as u16).to_be_bytes());
        for cert in &self.cert_chain {
            put_prefixed(&mut out, cert);
        }
        out
    }

    /// Decodes a quote occupying all of `bytes`.
    pub fn decode(bytes: &[u8]) -> Result<Self, QuoteError> {
        let (quote, used) = Self::decode_prefix(bytes)?;
        if used != bytes.len() {
            return Err(QuoteError::TrailingBytes);
        }
        Ok(quote)
    }

    /// Decodes a quote from the front of `bytes`, returning it with the
    /// number of bytes consumed.
    pub fn decode_prefix(bytes: &[u8]) -> Result<(Self, usize), QuoteError> {
        if bytes.len() < QUOTE_FIXED_PREFIX_LEN {
            return Err(QuoteError::TruncatedQuote);
        }
        let mut r = Reader::new(bytes);
        let t = |_| QuoteError::TruncatedQuote;
        let version = r.u16().map_err(t)?;
        if version != QUOTE_VERSION {
            return Err(QuoteError::BadVersion(version));
        }
        let measurement = r.array().map_err(t)?;
        let vendor_id = r.array().map_err(t)?;
        let report_data = r.array().map_err(t)?;
        let signature = r.prefixed().map_err(t)?.to_vec();
        let count = r.u16().map_err(t)?;
        let cert_chain = (0..count)
            .map(|_| r.prefixed().map(<[u8]>::to_vec))
            .collect::<Result<Vec<_>, _>>()
            .map_err(t)?;
        let used = r.consumed_from(bytes);
        Ok((
            Quote {
                version,
                measurement,
                vendor_id,
                report_data,
                signature,
                cert_chain,
            },
            used,
        ))
    }

    pub fn certificates(&self) -> Result<Vec<Certificate>, PkiError> {
        self.cert_chain.iter().map(|c| Certificate::decode(c)).collect()
    }

    pub fn pubkey_fingerprint(&self) -> [u8; 32] {
        self.report_data[..32].try_into().expect("report_data is 64 bytes")
    }
}

pub fn quote_encode(quote: &Quote) -> Vec<u8> {
    quote.encode()
}

pub fn quote_decode(bytes: &[u8]) -> Result<Quote, QuoteError> {
    Quote::decode(bytes)
}

/// A software stand-in for an enclave: a measured code identity, a KEM
/// keypair whose private half never leaves the struct, and a TCB signing key
/// certified by the vendor.
///
/// All methods take `&self`; the type is `Sync` and can serve concurrent
/// request handlers.
pub struct SimulatedTee {
    measurement: [u8; 32],
    vendor_id: [u8; 16],
    kem_secret: StaticSecret,
    kem_public: KemPublicKey,
    tcb_key: SigningKey,
    chain: Vec<Certificate>,
}

impl std::fmt::Debug for SimulatedTee {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SimulatedTee")
            .field("measurement", &hex::encode(self.measurement))
            .field("public_key", &hex::encode(self.kem_public.as_bytes()))
            .finish_non_exhaustive()
    }
}

impl SimulatedTee {
    /// Creates a TEE for `code_identity`. The vendor signing certificate must
    /// be issued by one of `vendor_roots` and match the vendor signing key.
    pub fn create<R: RngCore + CryptoRng>(
        code_identity: &[u8],
        vendor: &VendorCredentials,
        vendor_roots: &TrustAnchors,
        rng: &mut R,
    ) -> Result<Self, QuoteError> {
        let cert = &vendor.signing_cert;
        if !cert.is_ca
            || vendor_roots.issuer_of(cert).is_none()
            || vendor.signing_key.verifying_key().to_bytes() != cert.public_key
        {
            return Err(QuoteError::BadVendorCredentials);
        }
        let measurement: [u8; 32] = Sha256::digest(code_identity).into();
        let kem_secret = StaticSecret::random_from_rng(&mut *rng);
        let kem_public = KemPublicKey::from(&kem_secret);
        let tcb_key = SigningKey::generate(rng);
        let tcb_cert = Certificate::issue(
            &format!("CN=TCB {}", hex::encode(&measurement[..8])),
            &tcb_key.verifying_key(),
            false,
            cert,
            &vendor.signing_key,
        );
        Ok(SimulatedTee {
            measurement,
            vendor_id: vendor_id_for(&cert.subject),
            kem_secret,
            kem_public,
            tcb_key,
            chain: vec![cert.clone(), tcb_cert],
        })
    }

    pub fn measurement(&self) -> [u8; 32] {
        self.measurement
    }

    /// The KEM public key, as sent in `Attest-Pubkey`.
    pub fn public_key(&self) -> [u8; 32] {
        *self.kem_public.as_bytes()
    }

    pub fn generate_quote(&self) -> Quote {
        let mut report_data = [0u8; 64];
        report_data[..32].copy_from_slice(&fingerprint(self.kem_public.as_bytes()));
        let mut quote = Quote {
            version: QUOTE_VERSION,
            measurement: self.measurement,
            vendor_id: self.vendor_id,
            report_data,
            signature: Vec::new(),
            cert_chain: self.chain.iter().map(Certificate::encode).collect(),
        };
        quote.signature = self.tcb_key.sign(&quote.signed_prefix()).to_bytes().to_vec();
        quote
    }

    /// X25519 with the TEE's private key. Returns `None` for a
    /// non-contributory (low-order) peer key.
    pub(crate) fn decapsulate(&self, encapsulated: &[u8; 32]) -> Option<[u8; 32]> {
        let shared = self
            .kem_secret
            .diffie_hellman(&KemPublicKey::from(*encapsulated));
        shared.was_contributory().then(|| *shared.as_bytes())
    }
}
