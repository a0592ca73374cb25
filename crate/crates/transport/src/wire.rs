//! Length-prefixed framing: a 19-byte little-endian header followed by an
//! optional tensor-container body.
//!
//! ```text
//! magic "FLSH" | version u16 | msg_type u8 | round u32 | body_length u64 | body
//! ```

use std::io::{self, Read, Write};
use std::sync::{Arc, Mutex};

use thiserror::Error;

pub const WIRE_MAGIC: [u8; 4] = *b"FLSH";
pub const WIRE_VERSION: u16 = 1;
pub const WIRE_HEADER_LEN: usize = 4 + 2 + 1 + 4 + 8;
/// Larger bodies are refused before any allocation.
pub const MAX_BODY: u64 = 1 << 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MsgType {
    Join = 0,
    Task = 1,
    Result = 2,
    Ack = 3,
    Shutdown = 4,
}

impl MsgType {
    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => MsgType::Join,
            1 => MsgType::Task,
            2 => MsgType::Result,
            3 => MsgType::Ack,
            4 => MsgType::Shutdown,
            _ => return None,
        })
    }
}

#[derive(Debug, Error)]
pub enum WireError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("connection closed")]
    Closed,
    #[error("bad wire magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("wire version {found}, supported {supported}")]
    Version { found: u16, supported: u16 },
    #[error("unknown message type {0}")]
    UnknownType(u8),
    #[error("body of {0} bytes exceeds the {MAX_BODY}-byte limit")]
    BodyTooLarge(u64),
    #[error("truncated frame: header says {expected} body bytes, got {found}")]
    Truncated { expected: u64, found: u64 },
}

impl WireError {
    /// Errors that mean the peer is gone rather than misbehaving.
    pub fn is_disconnect(&self) -> bool {
        match self {
            WireError::Closed | WireError::Truncated { .. } => true,
            WireError::Io(e) => matches!(
                e.kind(),
                io::ErrorKind::UnexpectedEof
                    | io::ErrorKind::ConnectionReset
                    | io::ErrorKind::ConnectionAborted
                    | io::ErrorKind::BrokenPipe
                    | io::ErrorKind::TimedOut
                    | io::ErrorKind::WouldBlock
            ),
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WireMessage {
    pub msg_type: MsgType,
    pub round: u32,
    pub body: Vec<u8>,
}

impl WireMessage {
    pub fn new(msg_type: MsgType, round: u32, body: Vec<u8>) -> Self {
        WireMessage { msg_type, round, body }
    }

    pub fn empty(msg_type: MsgType, round: u32) -> Self {
        Self::new(msg_type, round, Vec::new())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(WIRE_HEADER_LEN + self.body.len());
        out.extend_from_slice(&WIRE_MAGIC);
        out.extend_from_slice(&WIRE_VERSION.to_le_bytes());
        out.push(self.msg_type as u8);
        out.extend_from_slice(&self.round.to_le_bytes());
        out.extend_from_slice(&(self.body.len() as u64).to_le_bytes());
        out.extend_from_slice(&self.body);
        out
    }

    /// Decodes exactly one frame; trailing bytes are an error.
    pub fn decode(bytes: &[u8]) -> Result<Self, WireError> {
        let mut cursor = bytes;
        let msg = read_message(&mut cursor)?;
        if !cursor.is_empty() {
            return Err(WireError::Io(io::Error::new(
                io::ErrorKind::InvalidData,
                format!("{} bytes after frame", cursor.len()),
            )));
        }
        Ok(msg)
    }
}

struct Header {
    msg_type: MsgType,
    round: u32,
    body_len: u64,
}

fn parse_header(h: &[u8; WIRE_HEADER_LEN]) -> Result<Header, WireError> {
    let magic: [u8; 4] = h[0..4].try_into().expect("four bytes");
    if magic != WIRE_MAGIC {
        return Err(WireError::BadMagic(magic));
    }
    let version = u16::from_le_bytes([h[4], h[5]]);
    if version != WIRE_VERSION {
        return Err(WireError::Version {
            found: version,
            supported: WIRE_VERSION,
        });
    }
    let msg_type = MsgType::from_code(h[6]).ok_or(WireError::UnknownType(h[6]))?;
    let round = u32::from_le_bytes(h[7..11].try_into().expect("four bytes"));
    let body_len = u64::from_le_bytes(h[11..19].try_into().expect("eight bytes"));
    if body_len > MAX_BODY {
        return Err(WireError::BodyTooLarge(body_len));
    }
    Ok(Header {
        msg_type,
        round,
        body_len,
    })
}

/// Reads one frame. A clean EOF before the first header byte is
/// [`WireError::Closed`].
pub fn read_message<R: Read>(r: &mut R) -> Result<WireMessage, WireError> {
    let mut header = [0u8; WIRE_HEADER_LEN];
    let mut filled = 0;
    while filled < WIRE_HEADER_LEN {
        match r.read(&mut header[filled..]) {
            Ok(0) if filled == 0 => return Err(WireError::Closed),
            Ok(0) => return Err(io::Error::from(io::ErrorKind::UnexpectedEof).into()),
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let h = parse_header(&header)?;
    // Grow with the data actually received instead of trusting the header.
    let mut body = Vec::new();
    let got = r.take(h.body_len).read_to_end(&mut body)? as u64;
    if got != h.body_len {
        return Err(WireError::Truncated {
            expected: h.body_len,
            found: got,
        });
    }
    Ok(WireMessage {
        msg_type: h.msg_type,
        round: h.round,
        body,
    })
}

pub fn write_message<W: Write>(w: &mut W, msg: &WireMessage) -> Result<(), WireError> {
    w.write_all(&msg.encode())?;
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Sent,
    Received,
}

/// One frame as it crossed the server's sockets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CapturedFrame {
    pub direction: Direction,
    pub client_id: Option<u32>,
    pub bytes: Vec<u8>,
}

/// Shared recording of every frame the server sends or receives.
#[derive(Debug, Clone, Default)]
pub struct WireTap(Arc<Mutex<Vec<CapturedFrame>>>);

impl WireTap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&self, direction: Direction, client_id: Option<u32>, msg: &WireMessage) {
        self.0.lock().expect("tap lock").push(CapturedFrame {
            direction,
            client_id,
            bytes: msg.encode(),
        });
    }

    pub fn frames(&self) -> Vec<CapturedFrame> {
        self.0.lock().expect("tap lock").clone()
    }
}
