//! Two-sided message framing shared by all schemes.
//!
//! Requests start with an op byte. Replies start with a status byte below
//! [`NOTIFY_BASE`]; unsolicited server pushes start with a byte at or above it,
//! which lets a client tell them apart without per-scheme state.

use thiserror::Error;

pub const OP_PUT: u8 = 1;
pub const OP_DELETE: u8 = 2;
pub const OP_READ: u8 = 3;
pub const OP_WRITE_OBJ: u8 = 4;
pub const OP_REPAIR: u8 = 5;
pub const OP_CONNECT: u8 = 6;
pub const OP_SLOT: u8 = 7;

pub const ST_OK: u8 = 0;
pub const ST_NOT_FOUND: u8 = 1;
pub const ST_CLEANING: u8 = 2;
pub const ST_FULL: u8 = 3;
pub const ST_BAD_REQUEST: u8 = 4;
pub const ST_DATA_LOSS: u8 = 5;

pub const NOTIFY_BASE: u8 = 0xC0;
pub const NOTE_CLEAN_START: u8 = 0xC0;
pub const NOTE_CLEAN_FINISH: u8 = 0xC1;
pub const NOTE_HEAD_UPDATE: u8 = 0xC2;

pub fn is_notification(payload: &[u8]) -> bool {
    payload.first().is_some_and(|&b| b >= NOTIFY_BASE)
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("malformed message: {0}")]
pub struct WireError(pub &'static str);

#[derive(Debug, Default, Clone)]
pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new() -> Self {
        Writer::default()
    }

    pub fn u8(mut self, v: u8) -> Self {
        self.buf.push(v);
        self
    }

    pub fn u32(mut self, v: u32) -> Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn u64(mut self, v: u64) -> Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn bytes(mut self, v: &[u8]) -> Self {
        self.buf.extend_from_slice(v);
        self
    }

    /// A key prefixed by its one-byte length.
    pub fn key(self, key: &[u8]) -> Self {
        self.u8(key.len() as u8).bytes(key)
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

#[derive(Debug, Clone)]
pub struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Reader { buf }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        if self.buf.len() < n {
            return Err(WireError("truncated"));
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    pub fn u8(&mut self) -> Result<u8, WireError> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32, WireError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64, WireError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn key(&mut self) -> Result<&'a [u8], WireError> {
        let n = self.u8()? as usize;
        if n == 0 {
            return Err(WireError("empty key"));
        }
        self.take(n)
    }

    pub fn rest(&mut self) -> &'a [u8] {
        std::mem::take(&mut self.buf)
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }
}
