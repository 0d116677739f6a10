//! Compact certificates for the simulated vendor and verifier hierarchies.
//!
//! Layout (big-endian lengths):
//! `subject_len(2) ‖ subject ‖ issuer_len(2) ‖ issuer ‖ public_key(32) ‖ is_ca(1) ‖ signature(64)`.
//! The signature is Ed25519 by the issuer over every byte before it.

use ed25519_dalek::{Signature, Signer, SigningKey, VerifyingKey};
use rand::{CryptoRng, RngCore};
use thiserror::Error;

use crate::codec::{put_prefixed, Reader};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PkiError {
    #[error("certificate encoding is truncated or malformed")]
    Malformed,
    #[error("certificate public key is not a valid point")]
    BadPublicKey,
    #[error("trust anchor set is empty")]
    NoAnchors,
    #[error("trust anchor {0:?} is not a valid self-signed CA")]
    BadAnchor(String),
}

#[derive(Clone, PartialEq, Eq)]
pub struct Certificate {
    pub subject: String,
    pub issuer: String,
    pub public_key: [u8; 32],
    pub is_ca: bool,
    pub signature: [u8; 64],
}

impl std::fmt::Debug for Certificate {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Certificate")
            .field("subject", &self.subject)
            .field("issuer", &self.issuer)
            .field("is_ca", &self.is_ca)
            .finish_non_exhaustive()
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_prefixed(out, s.as_bytes());
}

impl Certificate {
    fn tbs(subject: &str, issuer: &str, public_key: &[u8; 32], is_ca: bool) -> Vec<u8> {
        let mut out = Vec::with_capacity(subject.len() + issuer.len() + 37);
        put_str(&mut out, subject);
        put_str(&mut out, issuer);
        out.extend_from_slice(public_key);
        out.push(is_ca as u8);
        out
    }

    pub fn self_signed(subject: &str, key: &SigningKey) -> Self {
        let public_key = key.verifying_key().to_bytes();
        let tbs = Self::tbs(subject, subject, &public_key, true);
        Certificate {
            subject: subject.to_owned(),
            issuer: subject.to_owned(),
            public_key,
            is_ca: true,
            signature: key.sign(&tbs).to_bytes(),
        }
    }

    /// Issues a certificate for `subject_key` signed by `issuer_key`.
    pub fn issue(
        subject: &str,
        subject_key: &VerifyingKey,
        is_ca: bool,
        issuer: &Certificate,
        issuer_key: &SigningKey,
    ) -> Self {
        let public_key = subject_key.to_bytes();
        let tbs = Self::tbs(subject, &issuer.subject, &public_key, is_ca);
        Certificate {
            subject: subject.to_owned(),
            issuer: issuer.subject.clone(),
            public_key,
            is_ca,
            signature: issuer_key.sign(&tbs).to_bytes(),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Self::tbs(&self.subject, &self.issuer, &self.public_key, self.is_ca);
        out.extend_from_slice(&self.signature);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, PkiError> {
        let mut r = Reader::new(bytes);
        let string = |r: &mut Reader|  -> Result<String, PkiError> {
            let raw = r.prefixed().map_err(|_| PkiError::Malformed)?;
            String::from_utf8(raw.to_vec()).map_err(|_| PkiError::Malformed)
        };
        let subject = string(&mut r)?;
        let issuer = string(&mut r)?;
        let public_key = r.array::<32>().map_err(|_| PkiError::Malformed)?;
        let is_ca = match r.u8().map_err(|_| PkiError::Malformed)? {
            0 => false,
            1 => true,
            _ => return Err(PkiError::Malformed),
        };
        let signature = r.array::<64>().map_err(|_| PkiError::Malformed)?;
        if !r.is_empty() || subject.is_empty() || issuer.is_empty() {
            return Err(PkiError::Malformed);
        }
        Ok(Certificate {
            subject,
            issuer,
            public_key,
            is_ca,
            signature,
        })
    }

    pub fn verifying_key(&self) -> Result<VerifyingKey, PkiError> {
        VerifyingKey::from_bytes(&self.public_key).map_err(|_| PkiError::BadPublicKey)
    }

    /// True when `issuer` is a CA named by this certificate and its key
    /// produced the signature.
    pub fn is_issued_by(&self, issuer: &Certificate) -> bool {
        if !issuer.is_ca || self.issuer != issuer.subject {
            return false;
        }
        let Ok(key) = issuer.verifying_key() else {
            return false;
        };
        let tbs = Self::tbs(&self.subject, &self.issuer, &self.public_key, self.is_ca);
        key.verify_strict(&tbs, &Signature::from_bytes(&self.signature))
            .is_ok()
    }

    /// Checks an Ed25519 signature made by this certificate's key.
    pub fn verify_signature(&self, message: &[u8], signature: &[u8]) -> bool {
        let Ok(sig) = <[u8; 64]>::try_from(signature) else {
            return false;
        };
        let Ok(key) = self.verifying_key() else {
            return false;
        };
        key.verify_strict(message, &Signature::from_bytes(&sig)).is_ok()
    }
}

/// A non-empty set of self-signed root certificates.
#[derive(Debug, Clone)]
pub struct TrustAnchors {
    roots: Vec<Certificate>,
}

impl TrustAnchors {
    pub fn new(roots: Vec<Certificate>) -> Result<Self, PkiError> {
        if roots.is_empty() {
            return Err(PkiError::NoAnchors);
        }
        if let Some(bad) = roots.iter().find(|r| !r.is_issued_by(r)) {
            return Err(PkiError::BadAnchor(bad.subject.clone()));
        }
        Ok(TrustAnchors { roots })
    }

    pub fn roots(&self) -> &[Certificate] {
        &self.roots
    }

    pub fn issuer_of(&self, cert: &Certificate) -> Option<&Certificate> {
        self.roots.iter().find(|root| cert.is_issued_by(root))
    }

    /// Validates `chain` (leaf last) up to one of the anchors; the first
    /// element must be issued by an anchor and each later element by its
    /// predecessor. Every certificate except the leaf must be a CA.
    pub fn validate_chain(&self, chain: &[Certificate]) -> bool {
        let Some(first) = chain.first() else {
            return false;
        };
        if self.issuer_of(first).is_none() {
            return false;
        }
        chain.windows(2).all(|pair| pair[1].is_issued_by(&pair[0]))
    }
}

/// Credentials a vendor uses to certify TCB signing keys.
#[derive(Clone)]
pub struct VendorCredentials {
    pub signing_cert: Certificate,
    pub signing_key: SigningKey,
}

/// Identity an attestation service signs its reports with.
#[derive(Clone)]
pub struct VerifierCredentials {
    pub cert: Certificate,
    pub key: SigningKey,
}

/// A complete demo hierarchy: vendor root and signing CA plus a verifier
/// root and leaf.
pub struct DemoPki {
    pub vendor_root: Certificate,
    pub vendor: VendorCredentials,
    pub verifier_root: Certificate,
    pub verifier: VerifierCredentials,
}

pub const DEMO_VENDOR_ROOT: &str = "CN=Demo TEE Vendor Root CA,O=Demo Vendor";
pub const DEMO_VENDOR_SIGNING: &str = "CN=Demo TEE Vendor Signing CA,O=Demo Vendor";
pub const DEMO_VERIFIER_ROOT: &str = "CN=Demo Attestation Root CA,O=Demo Verifier";
pub const DEMO_VERIFIER: &str = "CN=Demo Attestation Service,O=Demo Verifier";

impl DemoPki {
    pub fn generate<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        Self::generate_named(rng, DEMO_VENDOR_ROOT, DEMO_VENDOR_SIGNING)
    }

    /// Same hierarchy with custom vendor names; useful for a second,
    /// distrusted vendor in tests.
    pub fn generate_named<R: RngCore + CryptoRng>(
        rng: &mut R,
        vendor_root_name: &str,
        vendor_signing_name: &str,
    ) -> Self {
        let root_key = SigningKey::generate(rng);
        let vendor_root = Certificate::self_signed(vendor_root_name, &root_key);
        let signing_key = SigningKey::generate(rng);
        let signing_cert = Certificate::issue(
            vendor_signing_name,
            &signing_key.verifying_key(),
            true,
            &vendor_root,
            &root_key,
        );
        let vroot_key = SigningKey::generate(rng);
        let verifier_root = Certificate::self_signed(DEMO_VERIFIER_ROOT, &vroot_key);
        let verifier_key = SigningKey::generate(rng);
        let verifier_cert = Certificate::issue(
            DEMO_VERIFIER,
            &verifier_key.verifying_key(),
            false,
            &verifier_root,
            &vroot_key,
        );
        DemoPki {
            vendor_root,
            vendor: VendorCredentials {
                signing_cert,
                signing_key,
            },
            verifier_root,
            verifier: VerifierCredentials {
                cert: verifier_cert,
                key: verifier_key,
            },
        }
    }

    pub fn anchors(&self) -> TrustAnchors {
        TrustAnchors::new(vec![self.vendor_root.clone(), self.verifier_root.clone()])
            .expect("demo roots are self-signed")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn encode_decode_and_chain() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let pki = DemoPki::generate(&mut rng);
        let enc = pki.vendor.signing_cert.encode();
        assert_eq!(Certificate::decode(&enc).unwrap(), pki.vendor.signing_cert);
        let anchors = pki.anchors();
        assert!(anchors.validate_chain(std::slice::from_ref(&pki.vendor.signing_cert)));
        assert!(anchors.validate_chain(std::slice::from_ref(&pki.verifier.cert)));
        assert!(!anchors.validate_chain(&[]));
    }

    #[test]
    fn tampered_certificate_fails() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let pki = DemoPki::generate(&mut rng);
        let mut cert = pki.vendor.signing_cert.clone();
        cert.subject.push('x');
        assert!(!cert.is_issued_by(&pki.vendor_root));
        let mut cert = pki.vendor.signing_cert.clone();
        cert.is_ca = false;
        assert!(!cert.is_issued_by(&pki.vendor_root));
    }

    #[test]
    fn anchors_must_be_self_signed() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let pki = DemoPki::generate(&mut rng);
        assert_eq!(TrustAnchors::new(vec![]).unwrap_err(), PkiError::NoAnchors);
        assert!(TrustAnchors::new(vec![pki.vendor.signing_cert.clone()]).is_err());
    }

    #[test]
    fn decode_rejects_trailing_and_truncated() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let pki = DemoPki::generate(&mut rng);
        let mut enc = pki.vendor_root.encode();
        enc.push(0);
        assert_eq!(Certificate::decode(&enc), Err(PkiError::Malformed));
        enc.truncate(enc.len() - 2);
        assert_eq!(Certificate::decode(&enc), Err(PkiError::Malformed));
    }
}
