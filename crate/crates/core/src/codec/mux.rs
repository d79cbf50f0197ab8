//! MUX framing: a fixed 16-byte header in front of an embedded
//! HTTP/1.1-formatted message.
//!
//! Layout (offsets in bytes):
//! ```text
//! 0..4   magic "XMUX"
//! 4      frame type (1 = request, 2 = response)
//! 5      flags (always 0)
//! 6..10  stream id, big endian
//! 10..14 payload length, big endian
//! 14..16 reserved (zero)
//! ```
//! The payload must parse as exactly one embedded message; trailing or
//! missing payload bytes condemn the frame.

use crate::limits::MUX_MAX_PAYLOAD;

use super::{http1, Protocol, ProtocolError, Request, Response};

pub const MUX_MAGIC: &[u8; 4] = b"XMUX";
pub const MUX_HEADER_LEN: usize = 16;

pub(super) const FRAME_REQUEST: u8 = 1;
pub(super) const FRAME_RESPONSE: u8 = 2;

struct FrameHead {
    frame_type: u8,
    stream_id: u32,
    payload_len: usize,
}

/// Parse the fixed header; `Ok(None)` until 16 bytes are buffered.
fn decode_head(buf: &[u8]) -> Result<Option<FrameHead>, ProtocolError> {
    if buf.len() < MUX_HEADER_LEN {
        return Ok(None);
    }
    if &buf[..4] != MUX_MAGIC {
        return Err(ProtocolError::BadMagic);
    }
    let payload_len = u32::from_be_bytes(buf[10..14].try_into().unwrap());
    if payload_len as usize > MUX_MAX_PAYLOAD {
        return Err(ProtocolError::PayloadTooLarge(payload_len));
    }
    Ok(Some(FrameHead {
        frame_type: buf[4],
        stream_id: u32::from_be_bytes(buf[6..10].try_into().unwrap()),
        payload_len: payload_len as usize,
    }))
}

pub(super) fn decode_request(buf: &[u8]) -> Result<Option<(Request, usize)>, ProtocolError> {
    let Some(head) = decode_head(buf)? else {
        return Ok(None);
    };
    if head.frame_type != FRAME_REQUEST {
        return Err(ProtocolError::UnexpectedFrameType(head.frame_type));
    }
    let total = MUX_HEADER_LEN + head.payload_len;
    if buf.len() < total {
        return Ok(None);
    }
    let payload = &buf[MUX_HEADER_LEN..total];
    match http1::decode_request(payload)? {
        Some((mut req, consumed)) if consumed == payload.len() => {
            req.protocol = Protocol::Mux;
            req.stream_id = Some(head.stream_id);
            Ok(Some((req, total)))
        }
        _ => Err(ProtocolError::PayloadMismatch),
    }
}

pub(super) fn decode_response(buf: &[u8]) -> Result<Option<(Response, usize)>, ProtocolError> {
    let Some(head) = decode_head(buf)? else {
        return Ok(None);
    };
    if head.frame_type != FRAME_RESPONSE {
        return Err(ProtocolError::UnexpectedFrameType(head.frame_type));
    }
    let total = MUX_HEADER_LEN + head.payload_len;
    if buf.len() < total {
        return Ok(None);
    }
    let payload = &buf[MUX_HEADER_LEN..total];
    match http1::decode_response(payload)? {
        Some((mut resp, consumed)) if consumed == payload.len() => {
            resp.protocol = Protocol::Mux;
            resp.stream_id = Some(head.stream_id);
            Ok(Some((resp, total)))
        }
        _ => Err(ProtocolError::PayloadMismatch),
    }
}

fn encode_frame(frame_type: u8, stream_id: u32, payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(MUX_HEADER_LEN + payload.len());
    out.extend_from_slice(MUX_MAGIC);
    out.push(frame_type);
    out.push(0); // flags
    out.extend_from_slice(&stream_id.to_be_bytes());
    out.extend_from_slice(&(payload.len() as u32).to_be_bytes());
    out.extend_from_slice(&[0, 0]); // reserved
    out.extend_from_slice(payload);
    out
}

pub(super) fn encode_request(req: &Request) -> Vec<u8> {
    let inner = Request {
        protocol: Protocol::Http11,
        stream_id: None,
        ..req.clone()
    };
    encode_frame(
        FRAME_REQUEST,
        req.stream_id.unwrap_or(0),
        &http1::encode_request(&inner),
    )
}

pub(super) fn encode_response(resp: &Response) -> Vec<u8> {
    let inner = Response {
        protocol: Protocol::Http11,
        stream_id: None,
        ..resp.clone()
    };
    encode_frame(
        FRAME_RESPONSE,
        resp.stream_id.unwrap_or(0),
        &http1::encode_response(&inner),
    )
}

/// Replace the stream id of a complete frame without touching anything
/// else. The frame is validated just enough to know the splice is safe.
pub fn rewrite_stream_id(frame: &[u8], stream_id: u32) -> Result<Vec<u8>, ProtocolError> {
    if frame.len() < MUX_HEADER_LEN {
        return Err(ProtocolError::TruncatedFrame);
    }
    if &frame[..4] != MUX_MAGIC {
        return Err(ProtocolError::BadMagic);
    }
    let payload_len = u32::from_be_bytes(frame[10..14].try_into().unwrap()) as usize;
    if frame.len() != MUX_HEADER_LEN + payload_len {
        return Err(ProtocolError::TruncatedFrame);
    }
    let mut out = frame.to_vec();
    out[6..10].copy_from_slice(&stream_id.to_be_bytes());
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::super::{decode_request, decode_response, encode_request, encode_response};
    use super::*;

    fn sample_frame() -> Vec<u8> {
        encode_request(
            &Request::new("GET", "/users/7")
                .with_header("host", "h")
                .into_mux(0xDEAD_BEEF),
        )
    }

    #[test]
    fn frame_layout_is_exact() {
        let req = Request::new("GET", "/").into_mux(0x01020304);
        let wire = encode_request(&req);
        let payload = b"GET / HTTP/1.1\r\n\r\n";
        assert_eq!(&wire[..4], b"XMUX");
        assert_eq!(wire[4], FRAME_REQUEST);
        assert_eq!(wire[5], 0);
        assert_eq!(&wire[6..10], &[1, 2, 3, 4]);
        assert_eq!(&wire[10..14], &(payload.len() as u32).to_be_bytes());
        assert_eq!(&wire[14..16], &[0, 0]);
        assert_eq!(&wire[16..], payload);
    }

    #[test]
    fn round_trips_request_with_body() {
        let req = Request::new("POST", "/ingest")
            .with_header("x-k", "v")
            .with_body(vec![0u8, 1, 2, 250])
            .into_mux(42);
        let wire = encode_request(&req);
        let (back, consumed) = decode_request(&wire).unwrap().unwrap();
        assert_eq!(consumed, wire.len());
        assert_eq!(back.stream_id, Some(42));
        assert_eq!(back.protocol, Protocol::Mux);
        assert_eq!(back.method, "POST");
        assert_eq!(back.body, vec![0u8, 1, 2, 250]);
    }

    #[test]
    fn needs_full_header_then_full_payload() {
        let wire = sample_frame();
        assert_eq!(decode_request(&wire[..10]).unwrap(), None);
        assert_eq!(decode_request(&wire[..wire.len() - 1]).unwrap(), None);
        assert!(decode_request(&wire).unwrap().is_some());
    }

    #[test]
    fn rejects_wrong_frame_type_per_direction() {
        let resp_wire = encode_response(&Response::new(200).into_mux(7));
        assert!(matches!(
            decode_request(&resp_wire).unwrap_err(),
            ProtocolError::UnexpectedFrameType(FRAME_RESPONSE)
        ));
        let req_wire = sample_frame();
        assert!(matches!(
            decode_response(&req_wire).unwrap_err(),
            ProtocolError::UnexpectedFrameType(FRAME_REQUEST)
        ));
    }

    #[test]
    fn rejects_payload_length_mismatch() {
        let mut wire = sample_frame();
        // lengthen the declared payload by one and append a junk byte
        let len = u32::from_be_bytes(wire[10..14].try_into().unwrap()) + 1;
        wire[10..14].copy_from_slice(&len.to_be_bytes());
        wire.push(b'!');
        assert_eq!(decode_request(&wire).unwrap_err(), ProtocolError::PayloadMismatch);
    }

    #[test]
    fn rejects_oversized_payload_declaration() {
        let mut wire = sample_frame();
        wire[10..14].copy_from_slice(&u32::MAX.to_be_bytes());
        assert!(matches!(
            decode_request(&wire).unwrap_err(),
            ProtocolError::PayloadTooLarge(_)
        ));
    }

    #[test]
    fn rewrite_touches_only_the_id_bytes() {
        let wire = sample_frame();
        let out = rewrite_stream_id(&wire, 0x0A0B0C0D).unwrap();
        assert_eq!(out.len(), wire.len());
        assert_eq!(&out[6..10], &[0x0A, 0x0B, 0x0C, 0x0D]);
        assert_eq!(&out[..6], &wire[..6]);
        assert_eq!(&out[10..], &wire[10..]);
        let (back, _) = decode_request(&out).unwrap().unwrap();
        assert_eq!(back.stream_id, Some(0x0A0B0C0D));
    }

    #[test]
    fn rewrite_rejects_truncated_frames() {
        let wire = sample_frame();
        assert_eq!(
            rewrite_stream_id(&wire[..wire.len() - 1], 1).unwrap_err(),
            ProtocolError::TruncatedFrame
        );
        assert_eq!(rewrite_stream_id(b"XMU", 1).unwrap_err(), ProtocolError::TruncatedFrame);
    }

    #[test]
    fn interleaved_frames_decode_in_sequence() {
        let mut wire = Vec::new();
        for id in [3u32, 9, 3] {
            wire.extend_from_slice(&encode_request(
                &Request::new("GET", &format!("/s/{id}")).into_mux(id),
            ));
        }
        let mut seen = Vec::new();
        let mut off = 0;
        while off < wire.len() {
            let (req, n) = decode_request(&wire[off..]).unwrap().unwrap();
            seen.push(req.stream_id.unwrap());
            off += n;
        }
        assert_eq!(seen, vec![3, 9, 3]);
    }
}
