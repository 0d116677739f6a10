//! Minimal HTTP/1.x message model with a strict, canonical head grammar.
//!
//! Every handshake message is hashed into the transcript in exactly the form
//! produced by [`HttpMessage::transcript_bytes`]. The parser only accepts
//! heads that re-serialize to the same bytes, so any byte altered in flight
//! either fails to parse or changes the transcript.
//!
//! Transport headers (`Host`, `Content-Length`, `Connection`) are added when
//! writing to a socket and stripped when parsing; they never enter the
//! transcript.

use std::fmt::Write as _;
use std::io::BufRead;

use thiserror::Error;

/// Upper bound on the size of a message head.
pub const MAX_HEAD_LEN: usize = 64 * 1024;
/// Upper bound on a message body (one maximal record plus framing).
pub const MAX_BODY_LEN: usize = 16 * 1024 * 1024 + 1024;

const TRANSPORT_HEADERS: [&str; 3] = ["host", "content-length", "connection"];

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum HttpParseError {
    #[error("malformed start line")]
    StartLine,
    #[error("malformed header line {0:?}")]
    HeaderLine(String),
    #[error("message head exceeds {MAX_HEAD_LEN} bytes")]
    HeadTooLarge,
    #[error("body exceeds {MAX_BODY_LEN} bytes")]
    BodyTooLarge,
    #[error("bad content-length")]
    ContentLength,
    #[error("connection closed mid-message")]
    UnexpectedEof,
    #[error("i/o error: {0}")]
    Io(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StartLine {
    Request {
        method: String,
        target: String,
        version: String,
    },
    Response {
        version: String,
        status: u16,
        reason: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpMessage {
    pub start: StartLine,
    headers: Vec<(String, String)>,
    pub body: Vec<u8>,
}

fn reason_phrase(status: u16) -> &'static str {
    match status {
        200 => "OK",
        204 => "No Content",
        400 => "Bad Request",
        403 => "Forbidden",
        404 => "Not Found",
        405 => "Method Not Allowed",
        428 => "Precondition Required",
        500 => "Internal Server Error",
        _ => "Unknown",
    }
}

pub(crate) fn is_token(s: &str) -> bool {
    !s.is_empty()
        && s.bytes().all(|b| {
            b.is_ascii_alphanumeric() || b"!#$%&'*+-.^_`|~".contains(&b)
        })
}

fn is_field_value(s: &str) -> bool {
    let bytes = s.as_bytes();
    if let (Some(first), Some(last)) = (bytes.first(), bytes.last()) {
        if matches!(first, b' ' | b'\t') || matches!(last, b' ' | b'\t') {
            return false;
        }
    }
    bytes
        .iter()
        .all(|&b| b == b' ' || b == b'\t' || (0x21..=0x7e).contains(&b))
}

impl HttpMessage {
    pub fn request(method: &str, target: &str) -> Self {
        Self {
            start: StartLine::Request {
                method: method.to_owned(),
                target: target.to_owned(),
                version: "HTTP/1.1".to_owned(),
            },
            headers: Vec::new(),
            body: Vec::new(),
        }
    }

    pub fn response(status: u16) -> Self {
        Self {
            start: StartLine::Response {
                version: "HTTP/1.1".to_owned(),
                status,
                reason: reason_phrase(status).to_owned(),
            },
            headers: Vec::new(),
            body: Vec::new(),
        }
    }

    pub fn with_header(mut self, name: &str, value: impl Into<String>) -> Self {
        self.push_header(name, value);
        self
    }

    pub fn with_body(mut self, body: Vec<u8>) -> Self {
        self.body = body;
        self
    }

    pub fn push_header(&mut self, name: &str, value: impl Into<String>) {
        self.headers.push((name.to_owned(), value.into()));
    }

    /// Replaces every header named `name` (case-insensitively) with one value.
    pub fn set_header(&mut self, name: &str, value: impl Into<String>) {
        self.headers.retain(|(n, _)| !n.eq_ignore_ascii_case(name));
        self.push_header(name, value);
    }

    pub fn remove_header(&mut self, name: &str) {
        self.headers.retain(|(n, _)| !n.eq_ignore_ascii_case(name));
    }

    /// First value of `name`, compared case-insensitively.
    pub fn header(&self, name: &str) -> Option<&str> {
        self.headers
            .iter()
            .find(|(n, _)| n.eq_ignore_ascii_case(name))
            .map(|(_, v)| v.as_str())
    }

    pub fn header_count(&self, name: &str) -> usize {
        self.headers
            .iter()
            .filter(|(n, _)| n.eq_ignore_ascii_case(name))
            .count()
    }

    pub fn has_header(&self, name: &str) -> bool {
        self.header_count(name) > 0
    }

    pub fn headers(&self) -> impl Iterator<Item = (&str, &str)> {
        self.headers.iter().map(|(n, v)| (n.as_str(), v.as_str()))
    }

    pub fn method(&self) -> Option<&str> {
        match &self.start {
            StartLine::Request { method, .. } => Some(method),
            StartLine::Response { .. } => None,
        }
    }

    pub fn target(&self) -> Option<&str> {
        match &self.start {
            StartLine::Request { target, .. } => Some(target),
            StartLine::Response { .. } => None,
        }
    }

    pub fn set_target(&mut self, new_target: &str) {
        if let StartLine::Request { target, .. } = &mut self.start {
            *target = new_target.to_owned();
        }
    }

    pub fn status(&self) -> Option<u16> {
        match &self.start {
            StartLine::Response { status, .. } => Some(*status),
            StartLine::Request { .. } => None,
        }
    }

    pub fn is_request(&self) -> bool {
        matches!(self.start, StartLine::Request { .. })
    }

    fn write_head(&self, out: &mut String) {
        match &self.start {
            StartLine::Request {
                method,
                target,
                version,
            } => {
                let _ = write!(out, "{method} {target} {version}\r\n");
            }
            StartLine::Response {
                version,
                status,
                reason,
            } => {
                let _ = write!(out, "{version} {status:03} {reason}\r\n");
            }
        }
        for (name, value) in &self.headers {
            let _ = write!(out, "{name}: {value}\r\n");
        }
    }

    /// Canonical bytes that enter the handshake transcript.
    pub fn transcript_bytes(&self) -> Vec<u8> {
        let mut head = String::new();
        self.write_head(&mut head);
        head.push_str("\r\n");
        let mut out = head.into_bytes();
        out.extend_from_slice(&self.body);
        out
    }

    /// Bytes to put on a socket: the canonical head plus transport headers.
    pub fn to_wire(&self, host: Option<&str>) -> Vec<u8> {
        let mut head = String::new();
        self.write_head(&mut head);
        if let Some(host) = host {
            let _ = write!(head, "Host: {host}\r\n");
        }
        let _ = write!(head, "Content-Length: {}\r\n\r\n", self.body.len());
        let mut out = head.into_bytes();
        out.extend_from_slice(&self.body);
        out
    }

    /// Parses a complete message held in memory. Without a `Content-Length`
    /// header the body is the remainder of the buffer.
    pub fn parse(bytes: &[u8]) -> Result<Self, HttpParseError> {
        let end = find_head_end(bytes).ok_or(HttpParseError::UnexpectedEof)?;
        let (mut msg, content_length) = parse_head(&bytes[..end])?;
        let rest = &bytes[end + 4..];
        match content_length {
            Some(n) if n != rest.len() => return Err(HttpParseError::ContentLength),
            _ => {}
        }
        if rest.len() > MAX_BODY_LEN {
            return Err(HttpParseError::BodyTooLarge);
        }
        msg.body = rest.to_vec();
        Ok(msg)
    }

    /// Reads one message from a stream. Returns `Ok(None)` on a clean EOF
    /// before the first byte.
    pub fn read_from<R: BufRead>(reader: &mut R) -> Result<Option<Self>, HttpParseError> {
        let mut head = Vec::new();
        loop {
            let mut line = Vec::new();
            let n = reader
                .read_until(b'\n', &mut line)
                .map_err(|e| HttpParseError::Io(e.to_string()))?;
            if n == 0 {
                return if head.is_empty() {
                    Ok(None)
                } else {
                    Err(HttpParseError::UnexpectedEof)
                };
            }
            head.extend_from_slice(&line);
            if head.len() > MAX_HEAD_LEN {
                return Err(HttpParseError::HeadTooLarge);
            }
            if line == b"\r\n" {
                break;
            }
        }
        if head.len() < 4 || !head.ends_with(b"\r\n\r\n") {
            return Err(HttpParseError::StartLine);
        }
        let (mut msg, content_length) = parse_head(&head[..head.len() - 4])?;
        let len = content_length.unwrap_or(0);
        if len > MAX_BODY_LEN {
            return Err(HttpParseError::BodyTooLarge);
        }
        let mut body = vec![0u8; len];
        reader.read_exact(&mut body).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => HttpParseError::UnexpectedEof,
            _ => HttpParseError::Io(e.to_string()),
        })?;
        msg.body = body;
        Ok(Some(msg))
    }
}

fn find_head_end(bytes: &[u8]) -> Option<usize> {
    bytes.windows(4).position(|w| w == b"\r\n\r\n")
}

fn parse_start_line(line: &str) -> Result<StartLine, HttpParseError> {
    if line.starts_with("HTTP/") {
        let mut parts = line.splitn(3, ' ');
        let version = parts.next().ok_or(HttpParseError::StartLine)?;
        let status = parts.next().ok_or(HttpParseError::StartLine)?;
        let reason = parts.next().ok_or(HttpParseError::StartLine)?;
        if !matches!(version, "HTTP/1.1" | "HTTP/1.0")
            || status.len() != 3
            || !status.bytes().all(|b| b.is_ascii_digit())
            || !is_field_value(reason)
        {
            return Err(HttpParseError::StartLine);
        }
        Ok(StartLine::Response {
            version: version.to_owned(),
            status: status.parse().map_err(|_| HttpParseError::StartLine)?,
            reason: reason.to_owned(),
        })
    } else {
        let parts: Vec<&str> = line.split(' ').collect();
        let [method, target, version] = parts[..] else {
            return Err(HttpParseError::StartLine);
        };
        if !is_token(method)
            || target.is_empty()
            || !target.bytes().all(|b| (0x21..=0x7e).contains(&b))
            || !matches!(version, "HTTP/1.1" | "HTTP/1.0")
        {
            return Err(HttpParseError::StartLine);
        }
        Ok(StartLine::Request {
            method: method.to_owned(),
            target: target.to_owned(),
            version: version.to_owned(),
        })
    }
}

/// Parses a head (without the terminating blank line). Returns the message
/// with transport headers removed plus the declared content length.
fn parse_head(head: &[u8]) -> Result<(HttpMessage, Option<usize>), HttpParseError> {
    let text = std::str::from_utf8(head).map_err(|_| HttpParseError::StartLine)?;
    let mut lines = text.split("\r\n");
    let start = parse_start_line(lines.next().ok_or(HttpParseError::StartLine)?)?;
    let mut headers = Vec::new();
    let mut content_length = None;
    for line in lines {
        let bad = || HttpParseError::HeaderLine(line.to_owned());
        let (name, value) = line.split_once(": ").ok_or_else(bad)?;
        if !is_token(name) || !is_field_value(value) || line.contains('\n') {
            return Err(bad());
        }
        let lower = name.to_ascii_lowercase();
        if lower == "content-length" {
            if content_length.is_some() || value.is_empty() || !value.bytes().all(|b| b.is_ascii_digit()) {
                return Err(HttpParseError::ContentLength);
            }
            content_length = Some(value.parse().map_err(|_| HttpParseError::ContentLength)?);
        } else if lower == "transfer-encoding" {
            // chunked bodies are not part of this protocol
            return Err(bad());
        }
        if TRANSPORT_HEADERS.contains(&lower.as_str()) {
            continue;
        }
        headers.push((name.to_owned(), value.to_owned()));
    }
    Ok((
        HttpMessage {
            start,
            headers,
            body: Vec::new(),
        },
        content_length,
    ))
}
