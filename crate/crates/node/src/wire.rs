//! Length-prefixed frames exchanged between donors, servers and gateways.
//!
//! ```text
//! u32 frame_len | u8 version | u8 kind | u64 session | i64 epoch | u32 body_len | body
//! ```
//!
//! All integers are little-endian. `frame_len` counts every byte after
//! itself and must equal `22 + body_len`.

use std::io::{self, Read, Write};

use thiserror::Error;

pub const WIRE_VERSION: u8 = 1;

/// Bytes after the length prefix, excluding the body.
pub const HEADER_LEN: usize = 1 + 1 + 8 + 8 + 4;

/// Upper bound on a single frame; larger prefixes are rejected unread.
pub const MAX_FRAME: usize = 256 << 20;

#[derive(Debug, Error)]
pub enum WireError {
    #[error("frame truncated: needed {needed} bytes, got {got}")]
    Truncated { needed: usize, got: usize },
    #[error("unknown frame kind {kind} (wire version {version})")]
    UnknownKind { kind: u8, version: u8 },
    #[error("unsupported wire version {0}, this build speaks {WIRE_VERSION}")]
    BadVersion(u8),
    #[error("frame length {frame} does not match body length {body}")]
    LengthMismatch { frame: usize, body: usize },
    #[error("frame of {0} bytes exceeds the limit")]
    TooLarge(usize),
    #[error("malformed body: {0}")]
    Body(String),
    #[error("connection closed")]
    Closed,
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum FrameKind {
    SubmitShares = 1,
    QueryRequest = 2,
    ShareExchange = 3,
    QueryResponseShare = 4,
    TapeSync = 5,
    BudgetEvent = 6,
    Handshake = 7,
    Ack = 8,
    Error = 9,
}

impl FrameKind {
    pub fn from_byte(kind: u8, version: u8) -> Result<Self, WireError> {
        Ok(match kind {
            1 => FrameKind::SubmitShares,
            2 => FrameKind::QueryRequest,
            3 => FrameKind::ShareExchange,
            4 => FrameKind::QueryResponseShare,
            5 => FrameKind::TapeSync,
            6 => FrameKind::BudgetEvent,
            7 => FrameKind::Handshake,
            8 => FrameKind::Ack,
            9 => FrameKind::Error,
            _ => return Err(WireError::UnknownKind { kind, version }),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frame {
    pub kind: FrameKind,
    pub session: u64,
    pub epoch: i64,
    pub body: Vec<u8>,
}

impl Frame {
    pub fn new(kind: FrameKind, session: u64, body: Vec<u8>) -> Self {
        Frame {
            kind,
            session,
            epoch: 0,
            body,
        }
    }

    pub fn with_epoch(mut self, epoch: i64) -> Self {
        self.epoch = epoch;
        self
    }

    pub fn json<T: serde::Serialize>(kind: FrameKind, session: u64, value: &T) -> Self {
        Frame::new(
            kind,
            session,
            serde_json::to_vec(value).expect("wire bodies serialize"),
        )
    }

    pub fn parse_json<T: serde::de::DeserializeOwned>(&self) -> Result<T, WireError> {
        serde_json::from_slice(&self.body)
            .map_err(|e| WireError::Body(format!("{:?} body: {e}", self.kind)))
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + HEADER_LEN + self.body.len());
        out.extend_from_slice(&((HEADER_LEN + self.body.len()) as u32).to_le_bytes());
        out.push(WIRE_VERSION);
        out.push(self.kind as u8);
        out.extend_from_slice(&self.session.to_le_bytes());
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&(self.body.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.body);
        out
    }

    /// Decodes one complete frame, length prefix included.
    pub fn decode(buf: &[u8]) -> Result<Self, WireError> {
        if buf.len() < 4 {
            return Err(WireError::Truncated {
                needed: 4,
                got: buf.len(),
            });
        }
        let frame_len = u32::from_le_bytes(buf[..4].try_into().expect("4 bytes")) as usize;
        if buf.len() - 4 < frame_len {
            return Err(WireError::Truncated {
                needed: 4 + frame_len,
                got: buf.len(),
            });
        }
        Self::decode_payload(&buf[4..4 + frame_len])
    }

    fn decode_payload(p: &[u8]) -> Result<Self, WireError> {
        if p.len() < HEADER_LEN {
            return Err(WireError::Truncated {
                needed: HEADER_LEN,
                got: p.len(),
            });
        }
        let version = p[0];
        if version != WIRE_VERSION {
            return Err(WireError::BadVersion(version));
        }
        let kind = FrameKind::from_byte(p[1], version)?;
        let session = u64::from_le_bytes(p[2..10].try_into().expect("8 bytes"));
        let epoch = i64::from_le_bytes(p[10..18].try_into().expect("8 bytes"));
        let body_len = u32::from_le_bytes(p[18..22].try_into().expect("4 bytes")) as usize;
        if HEADER_LEN + body_len != p.len() {
            return Err(WireError::LengthMismatch {
                frame: p.len(),
                body: body_len,
            });
        }
        Ok(Frame {
            kind,
            session,
            epoch,
            body: p[HEADER_LEN..].to_vec(),
        })
    }
}

pub fn write_frame<W: Write>(w: &mut W, frame: &Frame) -> Result<(), WireError> {
    w.write_all(&frame.encode())?;
    w.flush()?;
    Ok(())
}

/// Reads one frame; a clean end of stream before the prefix is [`WireError::Closed`].
pub fn read_frame<R: Read>(r: &mut R) -> Result<Frame, WireError> {
    let mut len = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match r.read(&mut len[got..]) {
            Ok(0) if got == 0 => return Err(WireError::Closed),
            Ok(0) => return Err(WireError::Truncated { needed: 4, got }),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let frame_len = u32::from_le_bytes(len) as usize;
    if frame_len > MAX_FRAME {
        return Err(WireError::TooLarge(frame_len));
    }
    let mut payload = vec![0u8; frame_len];
    r.read_exact(&mut payload).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => WireError::Truncated {
            needed: frame_len,
            got: 0,
        },
        _ => e.into(),
    })?;
    Frame::decode_payload(&payload)
}

/// Packs ring values as little-endian 16-byte words.
pub fn pack_u128(values: &[u128]) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + 16 * values.len());
    out.extend_from_slice(&(values.len() as u32).to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn unpack_u128(buf: &[u8]) -> Result<Vec<u128>, WireError> {
    if buf.len() < 4 {
        return Err(WireError::Body("missing value count".into()));
    }
    let n = u32::from_le_bytes(buf[..4].try_into().expect("4 bytes")) as usize;
    if buf.len() != 4 + 16 * n {
        return Err(WireError::Body(format!(
            "{} bytes cannot hold {n} values",
            buf.len()
        )));
    }
    Ok(buf[4..]
        .chunks_exact(16)
        .map(|c| u128::from_le_bytes(c.try_into().expect("16 bytes")))
        .collect())
}
