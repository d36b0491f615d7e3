//! Length-prefixed binary framing shared by the pipe and TCP backends.
//!
//! Frame layout: 4-byte big-endian unsigned length `L`, then `L` payload
//! bytes. Payload: 1 byte tag, 4-byte big-endian source id, 4-byte
//! big-endian dest id, remainder UTF-8 JSON body.

use std::io::{Read, Write};

use super::{CommsError, Message};
use crate::tags::Tag;

const HEADER_LEN: usize = 9;
/// Sanity bound on a single frame; anything larger is a protocol error.
const MAX_FRAME: usize = 256 * 1024 * 1024;

pub fn write_frame(w: &mut dyn Write, msg: &Message) -> Result<(), CommsError> {
    let body = msg.encode_body()?;
    let len = HEADER_LEN + body.len();
    if len > MAX_FRAME {
        return Err(CommsError::Oversize(len));
    }
    let mut buf = Vec::with_capacity(4 + len);
    buf.extend_from_slice(&(len as u32).to_be_bytes());
    buf.push(msg.tag as u8);
    buf.extend_from_slice(&msg.source.to_be_bytes());
    buf.extend_from_slice(&msg.dest.to_be_bytes());
    buf.extend_from_slice(&body);
    w.write_all(&buf)?;
    w.flush()?;
    Ok(())
}

fn decode_payload(payload: &[u8]) -> Result<Message, CommsError> {
    if payload.len() < HEADER_LEN {
        return Err(CommsError::Protocol(format!("short frame: {} bytes", payload.len())));
    }
    let tag = Tag::from_byte(payload[0])
        .ok_or_else(|| CommsError::Protocol(format!("unknown tag byte {}", payload[0])))?;
    let source = u32::from_be_bytes(payload[1..5].try_into().unwrap());
    let dest = u32::from_be_bytes(payload[5..9].try_into().unwrap());
    Message::decode(tag, source, dest, &payload[HEADER_LEN..])
}

/// Incremental frame reassembler. Feed it arbitrary byte fragments; complete
/// messages pop out in order regardless of how the stream was chopped up.
#[derive(Default)]
pub struct FrameDecoder {
    buf: Vec<u8>,
}

impl FrameDecoder {
    pub fn new() -> FrameDecoder {
        FrameDecoder::default()
    }

    pub fn push(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    pub fn next_frame(&mut self) -> Result<Option<Message>, CommsError> {
        if self.buf.len() < 4 {
            return Ok(None);
        }
        let len = u32::from_be_bytes(self.buf[0..4].try_into().unwrap()) as usize;
        if len > MAX_FRAME {
            return Err(CommsError::Oversize(len));
        }
        if self.buf.len() < 4 + len {
            return Ok(None);
        }
        let msg = decode_payload(&self.buf[4..4 + len])?;
        self.buf.drain(..4 + len);
        Ok(Some(msg))
    }
}

/// Blocking frame read from a raw reader. Returns `PeerClosed` on EOF at a
/// frame boundary, a protocol error on EOF inside a frame.
pub fn read_frame(r: &mut dyn Read) -> Result<Message, CommsError> {
    let mut len_buf = [0u8; 4];
    let mut filled = 0;
    while filled < 4 {
        let n = r.read(&mut len_buf[filled..])?;
        if n == 0 {
            if filled == 0 {
                return Err(CommsError::PeerClosed);
            }
            return Err(CommsError::Protocol("eof inside frame header".into()));
        }
        filled += n;
    }
    let len = u32::from_be_bytes(len_buf) as usize;
    if len > MAX_FRAME {
        return Err(CommsError::Oversize(len));
    }
    let mut payload = vec![0u8; len];
    let mut filled = 0;
    while filled < len {
        let n = r.read(&mut payload[filled..])?;
        if n == 0 {
            return Err(CommsError::Protocol("eof inside frame body".into()));
        }
        filled += n;
    }
    decode_payload(&payload)
}
