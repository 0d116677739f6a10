//! Encoding of HTTPA messages as HTTP methods and `Attest-*` headers.
//!
//! All six message kinds share the single `ATTEST` method (plus the `OPTIONS`
//! preflight); the phase is told apart by which headers are present, see
//! [`classify`]. Binary values travel as unpadded base64url and only the
//! canonical encoding is accepted back.

mod http;

use std::fmt;

use base64::engine::general_purpose::URL_SAFE_NO_PAD;
use base64::Engine as _;
use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::Timestamp;

pub use self::http::{HttpMessage, HttpParseError, StartLine, MAX_BODY_LEN, MAX_HEAD_LEN};

pub const ATTEST_METHOD: &str = "ATTEST";

pub mod headers {
    pub const ATTEST_DATE: &str = "Attest-Date";
    pub const ATTEST_SESSION_ID: &str = "Attest-Session-Id";
    pub const ATTEST_RANDOM: &str = "Attest-Random";
    pub const ATTEST_CIPHER_SUITES: &str = "Attest-Cipher-Suites";
    pub const ATTEST_CIPHER_SUITE: &str = "Attest-Cipher-Suite";
    pub const ATTEST_QUOTE: &str = "Attest-Quote";
    pub const ATTEST_PUBKEY: &str = "Attest-Pubkey";
    pub const ATTEST_SECRET: &str = "Attest-Secret";
    pub const ATTEST_CONFIRMATION: &str = "Attest-Confirmation";
    pub const ACCESS_CONTROL_REQUEST_METHOD: &str = "Access-Control-Request-Method";
    pub const ALLOW: &str = "Allow";
    pub const CONTENT_TYPE: &str = "Content-Type";
}

use headers::*;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WireError {
    #[error("invalid message: {0}")]
    InvalidMessage(&'static str),
    #[error("not an HTTPA message")]
    NotHttpa,
    #[error("malformed header {0}")]
    MalformedHeader(&'static str),
    #[error("unsupported protocol version")]
    UnsupportedVersion,
    #[error("message carries both attest and session headers")]
    Ambiguous,
    #[error("no cipher suite in common")]
    NoCommonSuite,
}

/// Trusted-channel cipher suite token.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "String", from = "String")]
pub enum CipherSuiteId {
    Aes128GcmSha256,
    Aes256GcmSha384,
    Chacha20Poly1305Sha256,
    /// A token outside the registered set, kept verbatim.
    Unrecognized(String),
}

impl CipherSuiteId {
    pub const REGISTERED: [CipherSuiteId; 3] = [
        CipherSuiteId::Aes128GcmSha256,
        CipherSuiteId::Aes256GcmSha384,
        CipherSuiteId::Chacha20Poly1305Sha256,
    ];

    pub fn from_token(token: &str) -> Self {
        match token {
            "TCS_AES_128_GCM_SHA256" => Self::Aes128GcmSha256,
            "TCS_AES_256_GCM_SHA384" => Self::Aes256GcmSha384,
            "TCS_CHACHA20_POLY1305_SHA256" => Self::Chacha20Poly1305Sha256,
            other => Self::Unrecognized(other.to_owned()),
        }
    }

    pub fn token(&self) -> &str {
        match self {
            Self::Aes128GcmSha256 => "TCS_AES_128_GCM_SHA256",
            Self::Aes256GcmSha384 => "TCS_AES_256_GCM_SHA384",
            Self::Chacha20Poly1305Sha256 => "TCS_CHACHA20_POLY1305_SHA256",
            Self::Unrecognized(raw) => raw,
        }
    }

    pub fn is_registered(&self) -> bool {
        !matches!(self, Self::Unrecognized(_))
    }

    /// Encryption key length in bytes, `None` for unrecognized suites.
    pub fn key_len(&self) -> Option<usize> {
        match self {
            Self::Aes128GcmSha256 => Some(16),
            Self::Aes256GcmSha384 | Self::Chacha20Poly1305Sha256 => Some(32),
            Self::Unrecognized(_) => None,
        }
    }
}

impl fmt::Display for CipherSuiteId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

impl From<String> for CipherSuiteId {
    fn from(s: String) -> Self {
        Self::from_token(&s)
    }
}

impl From<CipherSuiteId> for String {
    fn from(s: CipherSuiteId) -> Self {
        s.token().to_owned()
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Random32(pub [u8; 32]);

impl Random32 {
    pub fn generate<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        let mut bytes = [0u8; 32];
        rng.fill_bytes(&mut bytes);
        Random32(bytes)
    }
}

impl fmt::Debug for Random32 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Random32({})", hex::encode(self.0))
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SessionId(pub [u8; 16]);

impl SessionId {
    pub fn generate<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        let mut bytes = [0u8; 16];
        rng.fill_bytes(&mut bytes);
        SessionId(bytes)
    }

    pub fn to_header_value(&self) -> String {
        b64_encode(&self.0)
    }

    pub fn from_header_value(value: &str) -> Option<Self> {
        b64_decode(value)
            .and_then(|b| <[u8; 16]>::try_from(b).ok())
            .map(SessionId)
    }
}

impl Serialize for SessionId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(self.0))
    }
}

impl<'de> Deserialize<'de> for SessionId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        let bytes = hex::decode(&text).map_err(serde::de::Error::custom)?;
        <[u8; 16]>::try_from(bytes)
            .map(SessionId)
            .map_err(|_| serde::de::Error::custom("session id must be 16 bytes"))
    }
}

impl fmt::Debug for SessionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SessionId({})", hex::encode(self.0))
    }
}

impl fmt::Display for SessionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&hex::encode(self.0))
    }
}

pub fn b64_encode(bytes: &[u8]) -> String {
    URL_SAFE_NO_PAD.encode(bytes)
}

/// Decodes unpadded base64url, rejecting padding and non-canonical trailing bits.
pub fn b64_decode(value: &str) -> Option<Vec<u8>> {
    URL_SAFE_NO_PAD.decode(value).ok()
}

/// Quote and public key of the client TEE, sent only in mutual mode.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClientEvidence {
    pub quote: Vec<u8>,
    pub pubkey: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttestRequest {
    pub date: Option<Timestamp>,
    pub session_id: Option<SessionId>,
    pub random: Random32,
    pub cipher_suites: Vec<CipherSuiteId>,
    pub client_evidence: Option<ClientEvidence>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttestResponse {
    pub date: Timestamp,
    pub quote: Vec<u8>,
    pub max_age: u32,
    pub pubkey: Vec<u8>,
    pub random: Random32,
    pub session_id: SessionId,
    pub cipher_suite: CipherSuiteId,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrustedSessionRequest {
    pub session_id: SessionId,
    /// Client pre-session secret wrapped to the server TEE key.
    pub secret: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrustedSessionResponse {
    pub session_id: SessionId,
    pub confirmation: [u8; 32],
    /// Mutual mode only: server pre-session secret wrapped to the client TEE key.
    pub server_secret: Option<Vec<u8>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MessageKind {
    PreflightRequest,
    PreflightResponse,
    AttestRequest,
    AttestResponse,
    TrustedSessionRequest,
    TrustedSessionResponse,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AttestMessage {
    PreflightRequest,
    PreflightResponse,
    AttestRequest(AttestRequest),
    AttestResponse(AttestResponse),
    TrustedSessionRequest(TrustedSessionRequest),
    TrustedSessionResponse(TrustedSessionResponse),
}

impl AttestMessage {
    pub fn kind(&self) -> MessageKind {
        match self {
            Self::PreflightRequest => MessageKind::PreflightRequest,
            Self::PreflightResponse => MessageKind::PreflightResponse,
            Self::AttestRequest(_) => MessageKind::AttestRequest,
            Self::AttestResponse(_) => MessageKind::AttestResponse,
            Self::TrustedSessionRequest(_) => MessageKind::TrustedSessionRequest,
            Self::TrustedSessionResponse(_) => MessageKind::TrustedSessionResponse,
        }
    }
}

fn suite_list(suites: &[CipherSuiteId]) -> String {
    suites.iter().map(|s| s.token()).collect::<Vec<_>>().join(",")
}

fn require_bytes(b: &[u8], what: &'static str) -> Result<(), WireError> {
    if b.is_empty() {
        Err(WireError::InvalidMessage(what))
    } else {
        Ok(())
    }
}

/// True when `msg` is exactly what [`encode_message`] renders for
/// `decoded`, apart from the request target. Alternative spellings of the
/// same content are rejected so the transcript cannot be malleated.
pub fn is_canonical(msg: &HttpMessage, decoded: &AttestMessage) -> bool {
    let Ok(mut again) = encode_message(decoded) else {
        return false;
    };
    if let Some(target) = msg.target() {
        again.set_target(target);
    }
    again.transcript_bytes() == msg.transcript_bytes()
}

/// Encodes a message. Requests use target `/`; callers that route by path
/// rewrite it with [`HttpMessage::set_target`].
pub fn encode_message(msg: &AttestMessage) -> Result<HttpMessage, WireError> {
    let out = match msg {
        AttestMessage::PreflightRequest => HttpMessage::request("OPTIONS", "/")
            .with_header(ACCESS_CONTROL_REQUEST_METHOD, ATTEST_METHOD),
        AttestMessage::PreflightResponse => {
            HttpMessage::response(200).with_header(ALLOW, ATTEST_METHOD)
        }
        AttestMessage::AttestRequest(req) => {
            if req.cipher_suites.is_empty() {
                return Err(WireError::InvalidMessage("empty cipher suite list"));
            }
            if req
                .cipher_suites
                .iter()
                .any(|s| !http::is_token(s.token()))
            {
                return Err(WireError::InvalidMessage("cipher suite is not a token"));
            }
            let mut m = HttpMessage::request(ATTEST_METHOD, "/");
            if let Some(date) = req.date {
                m.push_header(ATTEST_DATE, date.to_string());
            }
            if let Some(id) = &req.session_id {
                m.push_header(ATTEST_SESSION_ID, id.to_header_value());
            }
            m.push_header(ATTEST_RANDOM, b64_encode(&req.random.0));
            m.push_header(ATTEST_CIPHER_SUITES, suite_list(&req.cipher_suites));
            if let Some(ev) = &req.client_evidence {
                require_bytes(&ev.quote, "empty client quote")?;
                require_bytes(&ev.pubkey, "empty client public key")?;
                m.push_header(ATTEST_QUOTE, b64_encode(&ev.quote));
                m.push_header(ATTEST_PUBKEY, b64_encode(&ev.pubkey));
            }
            m
        }
        AttestMessage::AttestResponse(resp) => {
            if !resp.cipher_suite.is_registered() {
                return Err(WireError::InvalidMessage("unrecognized cipher suite"));
            }
            require_bytes(&resp.quote, "empty quote")?;
            require_bytes(&resp.pubkey, "empty public key")?;
            HttpMessage::response(200)
                .with_header(ATTEST_DATE, resp.date.to_string())
                .with_header(
                    ATTEST_QUOTE,
                    format!("{};max-age={}", b64_encode(&resp.quote), resp.max_age),
                )
                .with_header(ATTEST_PUBKEY, b64_encode(&resp.pubkey))
                .with_header(ATTEST_RANDOM, b64_encode(&resp.random.0))
                .with_header(ATTEST_SESSION_ID, resp.session_id.to_header_value())
                .with_header(ATTEST_CIPHER_SUITE, resp.cipher_suite.token())
        }
        AttestMessage::TrustedSessionRequest(req) => {
            require_bytes(&req.secret, "empty secret")?;
            HttpMessage::request(ATTEST_METHOD, "/")
                .with_header(ATTEST_SESSION_ID, req.session_id.to_header_value())
                .with_header(ATTEST_SECRET, b64_encode(&req.secret))
        }
        AttestMessage::TrustedSessionResponse(resp) => {
            let mut m = HttpMessage::response(200)
                .with_header(ATTEST_SESSION_ID, resp.session_id.to_header_value())
                .with_header(ATTEST_CONFIRMATION, b64_encode(&resp.confirmation));
            if let Some(secret) = &resp.server_secret {
                require_bytes(secret, "empty server secret")?;
                m.push_header(ATTEST_SECRET, b64_encode(secret));
            }
            m
        }
    };
    Ok(out)
}

fn allow_lists_attest(msg: &HttpMessage) -> bool {
    msg.header(ALLOW)
        .map(|v| v.split(',').any(|m| m.trim() == ATTEST_METHOD))
        .unwrap_or(false)
}

/// Determines the message kind from the method (or status) and header set.
pub fn classify(msg: &HttpMessage) -> Result<MessageKind, WireError> {
    let has_random_suites = msg.has_header(ATTEST_RANDOM)
        && (msg.has_header(ATTEST_CIPHER_SUITES) || msg.has_header(ATTEST_CIPHER_SUITE));
    match msg.method() {
        Some("OPTIONS") => {
            if msg.header(ACCESS_CONTROL_REQUEST_METHOD) == Some(ATTEST_METHOD) {
                Ok(MessageKind::PreflightRequest)
            } else {
                Err(WireError::NotHttpa)
            }
        }
        Some(ATTEST_METHOD) => {
            let has_secret = msg.has_header(ATTEST_SECRET);
            match (has_random_suites, has_secret) {
                (true, true) => Err(WireError::Ambiguous),
                (true, false) => Ok(MessageKind::AttestRequest),
                (false, true) => Ok(MessageKind::TrustedSessionRequest),
                (false, false) => Err(WireError::NotHttpa),
            }
        }
        Some(_) => Err(WireError::NotHttpa),
        None => {
            if msg.status() != Some(200) {
                return Err(WireError::NotHttpa);
            }
            let has_confirmation = msg.has_header(ATTEST_CONFIRMATION);
            match (has_random_suites, has_confirmation) {
                (true, true) => Err(WireError::Ambiguous),
                (true, false) => Ok(MessageKind::AttestResponse),
                (false, true) => Ok(MessageKind::TrustedSessionResponse),
                (false, false) if allow_lists_attest(msg) => Ok(MessageKind::PreflightResponse),
                (false, false) => Err(WireError::NotHttpa),
            }
        }
    }
}

/// Fetches a header that must appear at most once.
fn single<'a>(msg: &'a HttpMessage, name: &'static str) -> Result<Option<&'a str>, WireError> {
    match msg.header_count(name) {
        0 => Ok(None),
        1 => Ok(msg.header(name)),
        _ => Err(WireError::MalformedHeader(name)),
    }
}

fn required<'a>(msg: &'a HttpMessage, name: &'static str) -> Result<&'a str, WireError> {
    single(msg, name)?.ok_or(WireError::MalformedHeader(name))
}

fn decode_bytes(value: &str, name: &'static str) -> Result<Vec<u8>, WireError> {
    match b64_decode(value) {
        Some(b) if !b.is_empty() => Ok(b),
        _ => Err(WireError::MalformedHeader(name)),
    }
}

fn decode_random(value: &str) -> Result<Random32, WireError> {
    if value.len() != 43 {
        return Err(WireError::MalformedHeader(ATTEST_RANDOM));
    }
    let bytes = decode_bytes(value, ATTEST_RANDOM)?;
    <[u8; 32]>::try_from(bytes)
        .map(Random32)
        .map_err(|_| WireError::MalformedHeader(ATTEST_RANDOM))
}

fn decode_session_id(value: &str) -> Result<SessionId, WireError> {
    SessionId::from_header_value(value).ok_or(WireError::MalformedHeader(ATTEST_SESSION_ID))
}

fn decode_date(value: &str) -> Result<Timestamp, WireError> {
    let t = httpdate::parse_http_date(value).map_err(|_| WireError::MalformedHeader(ATTEST_DATE))?;
    let ts = Timestamp::from_system_time(t);
    // only IMF-fixdate round-trips; RFC 850 and asctime forms are rejected
    if ts.to_string() != value {
        return Err(WireError::MalformedHeader(ATTEST_DATE));
    }
    Ok(ts)
}

fn decode_suite(value: &str, name: &'static str) -> Result<CipherSuiteId, WireError> {
    if !http::is_token(value) {
        return Err(WireError::MalformedHeader(name));
    }
    Ok(CipherSuiteId::from_token(value))
}

fn decode_quote_with_max_age(value: &str) -> Result<(Vec<u8>, u32), WireError> {
    let bad = WireError::MalformedHeader(ATTEST_QUOTE);
    let (quote, param) = value.split_once(";max-age=").ok_or(bad.clone())?;
    if param.is_empty()
        || !param.bytes().all(|b| b.is_ascii_digit())
        || (param.len() > 1 && param.starts_with('0'))
    {
        return Err(bad);
    }
    let max_age = param.parse::<u32>().map_err(|_| bad)?;
    Ok((decode_bytes(quote, ATTEST_QUOTE)?, max_age))
}

/// Decodes a message into its typed form.
pub fn decode_message(msg: &HttpMessage) -> Result<AttestMessage, WireError> {
    let kind = classify(msg)?;
    let out = match kind {
        MessageKind::PreflightRequest => AttestMessage::PreflightRequest,
        MessageKind::PreflightResponse => AttestMessage::PreflightResponse,
        MessageKind::AttestRequest => {
            let date = single(msg, ATTEST_DATE)?.map(decode_date).transpose()?;
            let session_id = single(msg, ATTEST_SESSION_ID)?
                .map(decode_session_id)
                .transpose()?;
            let random = decode_random(required(msg, ATTEST_RANDOM)?)?;
            let list = required(msg, ATTEST_CIPHER_SUITES)?;
            let cipher_suites = list
                .split(',')
                .map(|tok| decode_suite(tok, ATTEST_CIPHER_SUITES))
                .collect::<Result<Vec<_>, _>>()?;
            let client_evidence = match (single(msg, ATTEST_QUOTE)?, single(msg, ATTEST_PUBKEY)?) {
                (None, None) => None,
                (Some(q), Some(pk)) => Some(ClientEvidence {
                    quote: decode_bytes(q, ATTEST_QUOTE)?,
                    pubkey: decode_bytes(pk, ATTEST_PUBKEY)?,
                }),
                (None, Some(_)) => return Err(WireError::MalformedHeader(ATTEST_QUOTE)),
                (Some(_), None) => return Err(WireError::MalformedHeader(ATTEST_PUBKEY)),
            };
            AttestMessage::AttestRequest(AttestRequest {
                date,
                session_id,
                random,
                cipher_suites,
                client_evidence,
            })
        }
        MessageKind::AttestResponse => {
            let (quote, max_age) = decode_quote_with_max_age(required(msg, ATTEST_QUOTE)?)?;
            let cipher_suite = decode_suite(required(msg, ATTEST_CIPHER_SUITE)?, ATTEST_CIPHER_SUITE)?;
            if !cipher_suite.is_registered() {
                return Err(WireError::MalformedHeader(ATTEST_CIPHER_SUITE));
            }
            AttestMessage::AttestResponse(AttestResponse {
                date: decode_date(required(msg, ATTEST_DATE)?)?,
                quote,
                max_age,
                pubkey: decode_bytes(required(msg, ATTEST_PUBKEY)?, ATTEST_PUBKEY)?,
                random: decode_random(required(msg, ATTEST_RANDOM)?)?,
                session_id: decode_session_id(required(msg, ATTEST_SESSION_ID)?)?,
                cipher_suite,
            })
        }
        MessageKind::TrustedSessionRequest => {
            AttestMessage::TrustedSessionRequest(TrustedSessionRequest {
                session_id: decode_session_id(required(msg, ATTEST_SESSION_ID)?)?,
                secret: decode_bytes(required(msg, ATTEST_SECRET)?, ATTEST_SECRET)?,
            })
        }
        MessageKind::TrustedSessionResponse => {
            let confirmation = decode_bytes(required(msg, ATTEST_CONFIRMATION)?, ATTEST_CONFIRMATION)?;
            AttestMessage::TrustedSessionResponse(TrustedSessionResponse {
                session_id: decode_session_id(required(msg, ATTEST_SESSION_ID)?)?,
                confirmation: <[u8; 32]>::try_from(confirmation)
                    .map_err(|_| WireError::MalformedHeader(ATTEST_CONFIRMATION))?,
                server_secret: single(msg, ATTEST_SECRET)?
                    .map(|v| decode_bytes(v, ATTEST_SECRET))
                    .transpose()?,
            })
        }
    };
    Ok(out)
}

/// Picks the first client-preferred suite the server supports. Unrecognized
/// tokens never match.
pub fn negotiate_suite(
    client_list: &[CipherSuiteId],
    server_supported: &[CipherSuiteId],
) -> Result<CipherSuiteId, WireError> {
    if client_list.is_empty() {
        return Err(WireError::InvalidMessage("empty cipher suite list"));
    }
    client_list
        .iter()
        .find(|s| s.is_registered() && server_supported.contains(s))
        .cloned()
        .ok_or(WireError::NoCommonSuite)
}
