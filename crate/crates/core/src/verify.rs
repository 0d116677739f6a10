//! Quote verification, signed verification reports and identity policy.
//!
//! A quote passes when its certificate chain leads to a trust anchor, the
//! TCB key signed it, and its report data carries the fingerprint of the
//! public key presented next to it. Verification never returns an error for
//! a bad quote: the outcome is a [`Verdict`] inside a signed
//! [`VerificationReport`].
//!
//! Policy evaluation is deny-overrides. An empty allow list admits anything
//! that is not denied.

use std::sync::Arc;

use ed25519_dalek::{Signer, SigningKey};
use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::{Clock, Timestamp};
use crate::codec::{put_prefixed, Reader};
use crate::pki::{Certificate, TrustAnchors, VerifierCredentials};
use crate::quote::{fingerprint, vendor_id_for, Quote, QuoteError, SimulatedTee, QUOTE_VERSION};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum VerifyError {
    #[error("malformed verification request")]
    MalformedRequest,
    #[error("malformed verification report")]
    MalformedReport,
    #[error("verifier certificate does not chain to a trusted root")]
    UntrustedVerifier,
    #[error("verification report signature is invalid")]
    BadReportSignature,
    #[error("verification report does not describe the submitted quote")]
    ReportMismatch,
    #[error("attestation service unreachable: {0}")]
    Transport(String),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PolicyError {
    #[error("selector {0:?} is both allowed and denied")]
    Conflict(Selector),
    #[error("tcb selector value {0:?} is not 32 bytes of hex")]
    BadTcbValue(String),
    #[error("empty selector value")]
    EmptyValue,
    #[error("policy json: {0}")]
    Json(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IdentityKind {
    Domain,
    Tcb,
    Vendor,
    Verifier,
}

impl IdentityKind {
    pub const ALL: [IdentityKind; 4] = [
        IdentityKind::Domain,
        IdentityKind::Tcb,
        IdentityKind::Vendor,
        IdentityKind::Verifier,
    ];
}

/// The identities a client can collect about a peer TEE.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdentityBundle {
    /// Verified TLS server name; absent on plaintext transports.
    pub domain: Option<String>,
    #[serde(with = "hex::serde")]
    pub tcb: [u8; 32],
    /// Subject of the vendor signing CA, present once the chain validated.
    pub vendor: Option<String>,
    /// Subject of the verifier certificate that judged the quote.
    pub verifier: Option<String>,
}

impl IdentityBundle {
    pub fn new(tcb: [u8; 32]) -> Self {
        IdentityBundle {
            domain: None,
            tcb,
            vendor: None,
            verifier: None,
        }
    }

    pub fn value(&self, kind: IdentityKind) -> Option<String> {
        match kind {
            IdentityKind::Domain => self.domain.clone(),
            IdentityKind::Tcb => Some(hex::encode(self.tcb)),
            IdentityKind::Vendor => self.vendor.clone(),
            IdentityKind::Verifier => self.verifier.clone(),
        }
    }

    fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        put_prefixed(&mut out, self.domain.as_deref().unwrap_or("").as_bytes());
        put_prefixed(&mut out, &self.tcb);
        put_prefixed(&mut out, self.vendor.as_deref().unwrap_or("").as_bytes());
        put_prefixed(&mut out, self.verifier.as_deref().unwrap_or("").as_bytes());
        out
    }

    fn decode(bytes: &[u8]) -> Result<Self, VerifyError> {
        let bad = |_| VerifyError::MalformedReport;
        let mut r = Reader::new(bytes);
        let name = |r: &mut Reader| -> Result<Option<String>, VerifyError> {
            let raw = r.prefixed().map_err(bad)?;
            if raw.is_empty() {
                return Ok(None);
            }
            String::from_utf8(raw.to_vec())
                .map(Some)
                .map_err(|_| VerifyError::MalformedReport)
        };
        let domain = name(&mut r)?;
        let tcb = <[u8; 32]>::try_from(r.prefixed().map_err(bad)?)
            .map_err(|_| VerifyError::MalformedReport)?;
        let vendor = name(&mut r)?;
        let verifier = name(&mut r)?;
        if !r.is_empty() {
            return Err(VerifyError::MalformedReport);
        }
        Ok(IdentityBundle {
            domain,
            tcb,
            vendor,
            verifier,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Selector {
    pub kind: IdentityKind,
    pub value: String,
}

impl Selector {
    pub fn new(kind: IdentityKind, value: impl Into<String>) -> Self {
        Selector {
            kind,
            value: value.into(),
        }
    }

    fn normalized(mut self) -> Result<Self, PolicyError> {
        if self.value.is_empty() {
            return Err(PolicyError::EmptyValue);
        }
        if self.kind == IdentityKind::Tcb {
            match hex::decode(&self.value) {
                Ok(b) if b.len() == 32 => self.value = hex::encode(b),
                _ => return Err(PolicyError::BadTcbValue(self.value)),
            }
        }
        Ok(self)
    }

    pub fn matches(&self, bundle: &IdentityBundle) -> bool {
        bundle.value(self.kind).as_deref() == Some(self.value.as_str())
    }
}

#[derive(Deserialize)]
struct RawPolicy {
    #[serde(default)]
    allowed: Vec<Selector>,
    #[serde(default)]
    denied: Vec<Selector>,
}

/// User allow/deny decision rules over identity selectors.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawPolicy")]
pub struct Policy {
    allowed: Vec<Selector>,
    denied: Vec<Selector>,
}

impl TryFrom<RawPolicy> for Policy {
    type Error = PolicyError;

    fn try_from(raw: RawPolicy) -> Result<Self, PolicyError> {
        Policy::new(raw.allowed, raw.denied)
    }
}

impl Policy {
    pub fn new(allowed: Vec<Selector>, denied: Vec<Selector>) -> Result<Self, PolicyError> {
        let allowed = allowed
            .into_iter()
            .map(Selector::normalized)
            .collect::<Result<Vec<_>, _>>()?;
        let denied = denied
            .into_iter()
            .map(Selector::normalized)
            .collect::<Result<Vec<_>, _>>()?;
        if let Some(dup) = allowed.iter().find(|s| denied.contains(s)) {
            return Err(PolicyError::Conflict(dup.clone()));
        }
        Ok(Policy { allowed, denied })
    }

    /// Accepts every bundle.
    pub fn open() -> Self {
        Policy::default()
    }

    pub fn from_json(text: &str) -> Result<Self, PolicyError> {
        serde_json::from_str(text).map_err(|e| PolicyError::Json(e.to_string()))
    }

    pub fn allowed(&self) -> &[Selector] {
        &self.allowed
    }

    pub fn denied(&self) -> &[Selector] {
        &self.denied
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Rejection {
    Denied(Selector),
    /// The bundle carries this identity kind but no allowed selector of that
    /// kind matches it.
    NotAllowed(IdentityKind),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PolicyDecision {
    Accept,
    Reject(Rejection),
}

pub fn evaluate_policy(bundle: &IdentityBundle, policy: &Policy) -> PolicyDecision {
    if let Some(sel) = policy.denied.iter().find(|s| s.matches(bundle)) {
        return PolicyDecision::Reject(Rejection::Denied(sel.clone()));
    }
    if policy.allowed.is_empty() {
        return PolicyDecision::Accept;
    }
    for kind in IdentityKind::ALL {
        let mut of_kind = policy.allowed.iter().filter(|s| s.kind == kind).peekable();
        if of_kind.peek().is_none() || bundle.value(kind).is_none() {
            continue;
        }
        if !of_kind.any(|s| s.matches(bundle)) {
            return PolicyDecision::Reject(Rejection::NotAllowed(kind));
        }
    }
    PolicyDecision::Accept
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FailReason {
    BadChain,
    FingerprintMismatch,
    UnsupportedVersion,
    MalformedQuote,
    MalformedReportData,
}

impl FailReason {
    fn code(self) -> u8 {
        match self {
            FailReason::BadChain => 1,
            FailReason::FingerprintMismatch => 2,
            FailReason::UnsupportedVersion => 3,
            FailReason::MalformedQuote => 4,
            FailReason::MalformedReportData => 5,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            1 => FailReason::BadChain,
            2 => FailReason::FingerprintMismatch,
            3 => FailReason::UnsupportedVersion,
            4 => FailReason::MalformedQuote,
            5 => FailReason::MalformedReportData,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Pass,
    Fail(FailReason),
}

impl Verdict {
    pub fn is_pass(&self) -> bool {
        matches!(self, Verdict::Pass)
    }

    fn encode(&self) -> Vec<u8> {
        match self {
            Verdict::Pass => vec![0],
            Verdict::Fail(reason) => vec![1, reason.code()],
        }
    }

    fn decode(bytes: &[u8]) -> Result<Self, VerifyError> {
        match bytes {
            [0] => Ok(Verdict::Pass),
            [1, code] => FailReason::from_code(*code)
                .map(Verdict::Fail)
                .ok_or(VerifyError::MalformedReport),
            _ => Err(VerifyError::MalformedReport),
        }
    }
}

/// Pure quote check: the verdict plus whatever identities could be
/// extracted. `vendor` is only filled in when the chain validated.
pub fn check_quote(
    quote: &Quote,
    roots: &TrustAnchors,
    expected_pubkey: &[u8],
) -> (Verdict, IdentityBundle) {
    let mut bundle = IdentityBundle::new(quote.measurement);
    if quote.version != QUOTE_VERSION {
        return (Verdict::Fail(FailReason::UnsupportedVersion), bundle);
    }
    let chain_ok = match quote.certificates() {
        Ok(certs) if certs.len() == 2 => {
            let ok = roots.validate_chain(&certs)
                && vendor_id_for(&certs[0].subject) == quote.vendor_id
                && certs[1].verify_signature(&quote.signed_prefix(), &quote.signature);
            if ok {
                bundle.vendor = Some(certs[0].subject.clone());
            }
            ok
        }
        _ => false,
    };
    if !chain_ok {
        return (Verdict::Fail(FailReason::BadChain), bundle);
    }
    if quote.report_data[32..].iter().any(|&b| b != 0) {
        return (Verdict::Fail(FailReason::MalformedReportData), bundle);
    }
    if quote.pubkey_fingerprint() != fingerprint(expected_pubkey) {
        return (Verdict::Fail(FailReason::FingerprintMismatch), bundle);
    }
    (Verdict::Pass, bundle)
}

/// Outcome of a quote verification, signed by the verifier.
///
/// Wire layout: five fields, each with a 2-byte big-endian length prefix, in
/// the order verdict, bundle, verifier quote (empty when absent), timestamp
/// (8-byte seconds), signature. The signature covers the first, second and
/// fourth encoded fields including their prefixes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VerificationReport {
    pub verdict: Verdict,
    pub bundle: IdentityBundle,
    pub verifier_quote: Option<Quote>,
    pub timestamp: Timestamp,
    pub signature: Vec<u8>,
}

impl VerificationReport {
    fn signed_bytes(verdict: &Verdict, bundle: &IdentityBundle, timestamp: Timestamp) -> Vec<u8> {
        let mut out = Vec::new();
        put_prefixed(&mut out, &verdict.encode());
        put_prefixed(&mut out, &bundle.encode());
        put_prefixed(&mut out, &timestamp.0.to_be_bytes());
        out
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        put_prefixed(&mut out, &self.verdict.encode());
        put_prefixed(&mut out, &self.bundle.encode());
        put_prefixed(
            &mut out,
            &self.verifier_quote.as_ref().map(Quote::encode).unwrap_or_default(),
        );
        put_prefixed(&mut out, &self.timestamp.0.to_be_bytes());
        put_prefixed(&mut out, &self.signature);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, VerifyError> {
        let bad = |_| VerifyError::MalformedReport;
        let mut r = Reader::new(bytes);
        let verdict = Verdict::decode(r.prefixed().map_err(bad)?)?;
        let bundle = IdentityBundle::decode(r.prefixed().map_err(bad)?)?;
        let quote_bytes = r.prefixed().map_err(bad)?;
        let verifier_quote = if quote_bytes.is_empty() {
            None
        } else {
            Some(Quote::decode(quote_bytes).map_err(|_| VerifyError::MalformedReport)?)
        };
        let ts = <[u8; 8]>::try_from(r.prefixed().map_err(bad)?)
            .map_err(|_| VerifyError::MalformedReport)?;
        let signature = r.prefixed().map_err(bad)?.to_vec();
        if !r.is_empty() {
            return Err(VerifyError::MalformedReport);
        }
        Ok(VerificationReport {
            verdict,
            bundle,
            verifier_quote,
            timestamp: Timestamp(u64::from_be_bytes(ts)),
            signature,
        })
    }

    pub fn verify_signature(&self, verifier_cert: &Certificate) -> bool {
        let msg = Self::signed_bytes(&self.verdict, &self.bundle, self.timestamp);
        verifier_cert.verify_signature(&msg, &self.signature)
    }
}

/// Something that can judge a serialized quote against a public key.
pub trait QuoteVerifier: Send + Sync {
    fn verify(&self, quote: &[u8], expected_pubkey: &[u8]) -> Result<VerificationReport, VerifyError>;
}

/// Verifier with its own signing identity; used in-process or behind the
/// attestation service endpoint. Immutable after construction.
pub struct Verifier {
    roots: TrustAnchors,
    credentials: VerifierCredentials,
    tee: Option<Arc<SimulatedTee>>,
    clock: Arc<dyn Clock>,
}

pub const IN_PROCESS_VERIFIER: &str = "CN=In-Process Verifier";

impl Verifier {
    pub fn new(roots: TrustAnchors, credentials: VerifierCredentials, clock: Arc<dyn Clock>) -> Self {
        Verifier {
            roots,
            credentials,
            tee: None,
            clock,
        }
    }

    /// A verifier with a freshly generated self-signed identity.
    pub fn in_process<R: RngCore + CryptoRng>(
        roots: TrustAnchors,
        clock: Arc<dyn Clock>,
        rng: &mut R,
    ) -> Self {
        let key = SigningKey::generate(rng);
        let cert = Certificate::self_signed(IN_PROCESS_VERIFIER, &key);
        Self::new(roots, VerifierCredentials { cert, key }, clock)
    }

    /// Runs the verifier inside a simulated TEE; its quote is attached to
    /// every report.
    pub fn with_tee(mut self, tee: Arc<SimulatedTee>) -> Self {
        self.tee = Some(tee);
        self
    }

    pub fn identity(&self) -> &Certificate {
        &self.credentials.cert
    }

    pub fn roots(&self) -> &TrustAnchors {
        &self.roots
    }

    fn sign(&self, verdict: Verdict, mut bundle: IdentityBundle) -> VerificationReport {
        bundle.verifier = Some(self.credentials.cert.subject.clone());
        let timestamp = self.clock.now();
        let msg = VerificationReport::signed_bytes(&verdict, &bundle, timestamp);
        VerificationReport {
            verdict,
            bundle,
            verifier_quote: self.tee.as_ref().map(|t| t.generate_quote()),
            timestamp,
            signature: self.credentials.key.sign(&msg).to_bytes().to_vec(),
        }
    }

    pub fn verify_quote(&self, quote: &Quote, expected_pubkey: &[u8]) -> VerificationReport {
        let (verdict, bundle) = check_quote(quote, &self.roots, expected_pubkey);
        self.sign(verdict, bundle)
    }

    /// Like [`Verifier::verify_quote`] for undecoded bytes; decode failures
    /// become failing verdicts with an all-zero TCB identity.
    pub fn verify_quote_bytes(&self, quote: &[u8], expected_pubkey: &[u8]) -> VerificationReport {
        match Quote::decode(quote) {
            Ok(q) => self.verify_quote(&q, expected_pubkey),
            Err(QuoteError::BadVersion(_)) => self.sign(
                Verdict::Fail(FailReason::UnsupportedVersion),
                IdentityBundle::new([0; 32]),
            ),
            Err(_) => self.sign(
                Verdict::Fail(FailReason::MalformedQuote),
                IdentityBundle::new([0; 32]),
            ),
        }
    }

    /// Attestation-service request handler: body is
    /// `quote ‖ pubkey_len(2) ‖ pubkey`, reply is an encoded report.
    pub fn handle_service_request(&self, body: &[u8]) -> Result<Vec<u8>, VerifyError> {
        let (quote, used) = Quote::decode_prefix(body).map_err(|_| VerifyError::MalformedRequest)?;
        let mut r = Reader::new(&body[used..]);
        let pubkey = r.prefixed().map_err(|_| VerifyError::MalformedRequest)?;
        if !r.is_empty() || pubkey.is_empty() {
            return Err(VerifyError::MalformedRequest);
        }
        Ok(self.verify_quote(&quote, pubkey).encode())
    }
}

impl QuoteVerifier for Verifier {
    fn verify(&self, quote: &[u8], expected_pubkey: &[u8]) -> Result<VerificationReport, VerifyError> {
        Ok(self.verify_quote_bytes(quote, expected_pubkey))
    }
}

pub fn attestation_service_handle(verifier: &Verifier, body: &[u8]) -> Result<Vec<u8>, VerifyError> {
    verifier.handle_service_request(body)
}

/// Builds the body of a `POST /verify` request.
pub fn encode_service_request(quote: &[u8], pubkey: &[u8]) -> Vec<u8> {
    let mut out = quote.to_vec();
    put_prefixed(&mut out, pubkey);
    out
}

/// Checks a report received from a remote service: the verifier
/// certificate must chain to `roots`, the signature must verify, and the
/// report must describe the quote that was sent.
pub fn check_remote_report(
    report: &VerificationReport,
    verifier_cert: &Certificate,
    roots: &TrustAnchors,
    quote: &[u8],
) -> Result<(), VerifyError> {
    if !roots.validate_chain(std::slice::from_ref(verifier_cert)) {
        return Err(VerifyError::UntrustedVerifier);
    }
    if !report.verify_signature(verifier_cert)
        || report.bundle.verifier.as_deref() != Some(verifier_cert.subject.as_str())
    {
        return Err(VerifyError::BadReportSignature);
    }
    if let Ok(q) = Quote::decode(quote) {
        if q.measurement != report.bundle.tcb {
            return Err(VerifyError::ReportMismatch);
        }
    }
    Ok(())
}
