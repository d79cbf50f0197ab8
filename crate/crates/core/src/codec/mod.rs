//! Wire codecs for the two supported application protocols.
//!
//! Both decoders are stateless functions over a byte buffer: the caller
//! accumulates bytes and re-invokes until a complete message is
//! available. `Ok(None)` means "need more data"; a hard error means the
//! buffer can never become a valid message no matter what is appended,
//! so the connection should be closed.
//!
//! Protocols:
//! - `http1`: a strict subset of RFC 9112 framing. Bodies are delimited
//!   by `content-length` only (no chunked encoding); header names are
//!   normalized to lowercase on decode.
//! - `mux`: a length-prefixed multiplexing envelope. Each frame carries
//!   a 16-byte header (`XMUX` magic, frame type, flags, big-endian
//!   stream id and payload length, reserved tail) and an HTTP/1.1
//!   formatted message as payload. Many logical streams share one
//!   connection, distinguished by stream id.

mod http1;
mod mux;

use serde::{Deserialize, Serialize};

pub use mux::{rewrite_stream_id, MUX_HEADER_LEN, MUX_MAGIC};

/// Application protocol spoken on a connection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Protocol {
    #[serde(rename = "http1")]
    Http11,
    #[serde(rename = "mux")]
    Mux,
}

impl std::fmt::Display for Protocol {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Protocol::Http11 => f.write_str("http1"),
            Protocol::Mux => f.write_str("mux"),
        }
    }
}

/// A decoded request. For `Mux` the stream id is always present; for
/// `Http11` it is always `None`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Request {
    pub protocol: Protocol,
    pub stream_id: Option<u32>,
    pub method: String,
    pub path: String,
    /// Lowercased names, original order preserved.
    pub headers: Vec<(String, String)>,
    pub body: Vec<u8>,
}

/// A decoded response; mirrors [`Request`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Response {
    pub protocol: Protocol,
    pub stream_id: Option<u32>,
    pub status: u16,
    pub headers: Vec<(String, String)>,
    pub body: Vec<u8>,
}

/// Field of a request a route rule can match against.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum FieldRef {
    Path,
    Method,
    Header(String),
}

impl Request {
    pub fn new(method: &str, path: &str) -> Self {
        Request {
            protocol: Protocol::Http11,
            stream_id: None,
            method: method.to_string(),
            path: path.to_string(),
            headers: Vec::new(),
            body: Vec::new(),
        }
    }

    pub fn with_header(mut self, name: &str, value: &str) -> Self {
        self.headers.push((name.to_ascii_lowercase(), value.to_string()));
        self
    }

    pub fn with_body(mut self, body: Vec<u8>) -> Self {
        self.body = body;
        self
    }

    pub fn into_mux(mut self, stream_id: u32) -> Self {
        self.protocol = Protocol::Mux;
        self.stream_id = Some(stream_id);
        self
    }

    /// First header with the given (lowercase-insensitive) name.
    pub fn header(&self, name: &str) -> Option<&str> {
        self.headers
            .iter()
            .find(|(n, _)| n.eq_ignore_ascii_case(name))
            .map(|(_, v)| v.as_str())
    }
}

impl Response {
    pub fn new(status: u16) -> Self {
        Response {
            protocol: Protocol::Http11,
            stream_id: None,
            status,
            headers: Vec::new(),
            body: Vec::new(),
        }
    }

    pub fn with_header(mut self, name: &str, value: &str) -> Self {
        self.headers.push((name.to_ascii_lowercase(), value.to_string()));
        self
    }

    pub fn with_body(mut self, body: Vec<u8>) -> Self {
        self.body = body;
        self
    }

    pub fn into_mux(mut self, stream_id: u32) -> Self {
        self.protocol = Protocol::Mux;
        self.stream_id = Some(stream_id);
        self
    }

    /// First header with the given (lowercase-insensitive) name.
    pub fn header(&self, name: &str) -> Option<&str> {
        self.headers
            .iter()
            .find(|(n, _)| n.eq_ignore_ascii_case(name))
            .map(|(_, v)| v.as_str())
    }
}

/// Why a buffer can never parse into a valid message.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ProtocolError {
    #[error("malformed {0} line: {1:?}")]
    MalformedStartLine(&'static str, String),
    #[error("malformed header line: {0:?}")]
    MalformedHeader(String),
    #[error("head exceeds {max} bytes", max = crate::limits::MAX_HEADER_BYTES)]
    HeadTooLarge,
    #[error("invalid content-length: {0:?}")]
    BadContentLength(String),
    #[error("unsupported http version: {0:?}")]
    BadVersion(String),
    #[error("bad mux magic")]
    BadMagic,
    #[error("unexpected mux frame type {0}")]
    UnexpectedFrameType(u8),
    #[error("mux payload length {0} exceeds bound")]
    PayloadTooLarge(u32),
    #[error("body length {0} exceeds bound")]
    BodyTooLarge(u64),
    #[error("mux payload is not exactly one embedded message")]
    PayloadMismatch,
    #[error("truncated mux frame")]
    TruncatedFrame,
}

/// Decode one request from the front of `buf`.
///
/// Returns `Ok(Some((req, consumed)))` when a full message is present,
/// `Ok(None)` when more bytes are needed. The decision between
/// protocols is made on the first four bytes: an `XMUX` magic selects
/// the mux framing, anything else is parsed as HTTP/1.1.
pub fn decode_request(buf: &[u8]) -> Result<Option<(Request, usize)>, ProtocolError> {
    match detect(buf) {
        None => Ok(None),
        Some(Protocol::Mux) => mux::decode_request(buf),
        Some(Protocol::Http11) => http1::decode_request(buf),
    }
}

/// Decode one response from the front of `buf`; same contract as
/// [`decode_request`].
pub fn decode_response(buf: &[u8]) -> Result<Option<(Response, usize)>, ProtocolError> {
    match detect(buf) {
        None => Ok(None),
        Some(Protocol::Mux) => mux::decode_response(buf),
        Some(Protocol::Http11) => http1::decode_response(buf),
    }
}

/// Serialize a request in the wire format of its protocol.
pub fn encode_request(req: &Request) -> Vec<u8> {
    match req.protocol {
        Protocol::Http11 => http1::encode_request(req),
        Protocol::Mux => mux::encode_request(req),
    }
}

/// Serialize a response in the wire format of its protocol.
pub fn encode_response(resp: &Response) -> Vec<u8> {
    match resp.protocol {
        Protocol::Http11 => http1::encode_response(resp),
        Protocol::Mux => mux::encode_response(resp),
    }
}

/// Extract the routable field value from a request, if present.
pub fn get_field<'a>(req: &'a Request, field: &FieldRef) -> Option<&'a str> {
    match field {
        FieldRef::Path => Some(req.path.as_str()),
        FieldRef::Method => Some(req.method.as_str()),
        FieldRef::Header(name) => req.header(name),
    }
}

fn detect(buf: &[u8]) -> Option<Protocol> {
    if buf.len() < MUX_MAGIC.len() {
        // Could still become either protocol; even a shorter prefix of
        // the magic does not decide until all four bytes are present.
        return None;
    }
    if &buf[..MUX_MAGIC.len()] == MUX_MAGIC {
        Some(Protocol::Mux)
    } else {
        Some(Protocol::Http11)
    }
}
