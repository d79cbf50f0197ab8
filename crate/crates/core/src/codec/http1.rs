//! Strict HTTP/1.1 subset: `content-length` framing only, version pinned
//! to `HTTP/1.1`, no obs-folding, no chunked bodies.

use crate::limits::{MAX_HEADER_BYTES, MUX_MAX_PAYLOAD};

use super::{Protocol, ProtocolError, Request, Response};

const CRLF: &[u8] = b"\r\n";
const HEAD_END: &[u8] = b"\r\n\r\n";

/// Parsed head plus how many bytes the full message spans.
struct Head {
    lines: Vec<String>,
    head_len: usize,
}

/// Locate and split the head section, enforcing the size bound. All
/// errors raised here remain errors no matter what bytes are appended.
fn take_head(buf: &[u8]) -> Result<Option<Head>, ProtocolError> {
    let end = buf.windows(HEAD_END.len()).position(|w| w == HEAD_END);
    let Some(pos) = end else {
        if buf.len() >= MAX_HEADER_BYTES {
            return Err(ProtocolError::HeadTooLarge);
        }
        return Ok(None);
    };
    let head_len = pos + HEAD_END.len();
    if head_len > MAX_HEADER_BYTES {
        return Err(ProtocolError::HeadTooLarge);
    }
    let text = std::str::from_utf8(&buf[..pos])
        .map_err(|_| ProtocolError::MalformedHeader("non-utf8 head".into()))?;
    let lines = text.split("\r\n").map(str::to_string).collect();
    Ok(Some(Head { lines, head_len }))
}

fn is_token(s: &str) -> bool {
    !s.is_empty()
        && s.bytes().all(|b| {
            b.is_ascii_alphanumeric() || b"!#$%&'*+-.^_`|~".contains(&b)
        })
}

/// Parse header lines into (lowercase name, OWS-trimmed value) pairs and
/// extract a validated content-length.
fn parse_headers(lines: &[String]) -> Result<(Vec<(String, String)>, u64), ProtocolError> {
    let mut headers = Vec::with_capacity(lines.len());
    let mut content_length: Option<u64> = None;
    for line in lines {
        if line.starts_with(' ') || line.starts_with('\t') {
            return Err(ProtocolError::MalformedHeader(line.clone()));
        }
        let Some(colon) = line.find(':') else {
            return Err(ProtocolError::MalformedHeader(line.clone()));
        };
        let name = &line[..colon];
        if !is_token(name) {
            return Err(ProtocolError::MalformedHeader(line.clone()));
        }
        let value = line[colon + 1..].trim_matches([' ', '\t']).to_string();
        let name = name.to_ascii_lowercase();
        if name == "content-length" {
            if content_length.is_some() {
                return Err(ProtocolError::BadContentLength("duplicate".into()));
            }
            if value.is_empty() || !value.bytes().all(|b| b.is_ascii_digit()) {
                return Err(ProtocolError::BadContentLength(value.clone()));
            }
            let n: u64 = value
                .parse()
                .map_err(|_| ProtocolError::BadContentLength(value.clone()))?;
            if n > MUX_MAX_PAYLOAD as u64 {
                return Err(ProtocolError::BodyTooLarge(n));
            }
            content_length = Some(n);
        }
        headers.push((name, value));
    }
    Ok((headers, content_length.unwrap_or(0)))
}

pub(super) fn decode_request(buf: &[u8]) -> Result<Option<(Request, usize)>, ProtocolError> {
    let Some(head) = take_head(buf)? else {
        return Ok(None);
    };
    let start = &head.lines[0];
    let mut parts = start.split(' ');
    let (method, path, version) = match (parts.next(), parts.next(), parts.next(), parts.next()) {
        (Some(m), Some(p), Some(v), None) => (m, p, v),
        _ => return Err(ProtocolError::MalformedStartLine("request", start.clone())),
    };
    if !is_token(method) {
        return Err(ProtocolError::MalformedStartLine("request", start.clone()));
    }
    if path.is_empty() || path.bytes().any(|b| b.is_ascii_control()) {
        return Err(ProtocolError::MalformedStartLine("request", start.clone()));
    }
    if version != "HTTP/1.1" {
        return Err(ProtocolError::BadVersion(version.to_string()));
    }
    let (headers, body_len) = parse_headers(&head.lines[1..])?;
    let total = head.head_len + body_len as usize;
    if buf.len() < total {
        return Ok(None);
    }
    let req = Request {
        protocol: Protocol::Http11,
        stream_id: None,
        method: method.to_string(),
        path: path.to_string(),
        headers,
        body: buf[head.head_len..total].to_vec(),
    };
    Ok(Some((req, total)))
}

pub(super) fn decode_response(buf: &[u8]) -> Result<Option<(Response, usize)>, ProtocolError> {
    let Some(head) = take_head(buf)? else {
        return Ok(None);
    };
    let start = &head.lines[0];
    let bad = || ProtocolError::MalformedStartLine("status", start.clone());
    let rest = start.strip_prefix("HTTP/1.1 ").ok_or_else(bad)?;
    let digits = rest.split(' ').next().unwrap_or("");
    if digits.len() != 3 || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return Err(bad());
    }
    let status: u16 = digits.parse().map_err(|_| bad())?;
    if !(100..=599).contains(&status) {
        return Err(bad());
    }
    let (headers, body_len) = parse_headers(&head.lines[1..])?;
    let total = head.head_len + body_len as usize;
    if buf.len() < total {
        return Ok(None);
    }
    let resp = Response {
        protocol: Protocol::Http11,
        stream_id: None,
        status,
        headers,
        body: buf[head.head_len..total].to_vec(),
    };
    Ok(Some((resp, total)))
}

fn write_headers(out: &mut Vec<u8>, headers: &[(String, String)], body_len: usize) {
    let has_cl = headers.iter().any(|(n, _)| n == "content-length");
    for (name, value) in headers {
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(b": ");
        out.extend_from_slice(value.as_bytes());
        out.extend_from_slice(CRLF);
    }
    if body_len > 0 && !has_cl {
        out.extend_from_slice(format!("content-length: {body_len}\r\n").as_bytes());
    }
    out.extend_from_slice(CRLF);
}

pub(super) fn encode_request(req: &Request) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + req.body.len());
    out.extend_from_slice(format!("{} {} HTTP/1.1\r\n", req.method, req.path).as_bytes());
    write_headers(&mut out, &req.headers, req.body.len());
    out.extend_from_slice(&req.body);
    out
}

fn reason(status: u16) -> &'static str {
    match status {
        200 => "OK",
        204 => "No Content",
        400 => "Bad Request",
        404 => "Not Found",
        500 => "Internal Server Error",
        503 => "Service Unavailable",
        504 => "Gateway Timeout",
        _ => "Status",
    }
}

pub(super) fn encode_response(resp: &Response) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + resp.body.len());
    out.extend_from_slice(
        format!("HTTP/1.1 {} {}\r\n", resp.status, reason(resp.status)).as_bytes(),
    );
    write_headers(&mut out, &resp.headers, resp.body.len());
    out.extend_from_slice(&resp.body);
    out
}
