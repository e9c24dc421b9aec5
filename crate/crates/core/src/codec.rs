//! Storage and wire encodings.
//!
//! Object record layout (all integers little-endian):
//!
//! ```text
//! +-----+--------+---------+-----------+-----+-------+
//! | tag | crc32  | key_len | value_len | key | value |
//! |  1  |   4    |    2    |     4     |     |       |
//! +-----+--------+---------+-----------+-----+-------+
//! ```
//!
//! Bit 0 of the tag byte is the delete tag; the other bits are zero. The CRC
//! (CRC-32/ISO-HDLC) covers the whole record with the crc field zeroed.
//!
//! The metadata word packs, most significant bit first: new tag (1),
//! offset A (31), offset B (31), reserved (1). With the tag set, A is the
//! latest offset and B the previous one; with the tag clear the roles swap.

use crc::{Crc, CRC_32_ISO_HDLC};
use thiserror::Error;

pub const OBJECT_HEADER_LEN: usize = 11;
pub const MAX_KEY_LEN: usize = u16::MAX as usize;
pub const MAX_OFFSET: u32 = (1 << 31) - 1;

const CRC32: Crc<u32> = Crc::<u32>::new(&CRC_32_ISO_HDLC);
const CRC_RANGE: std::ops::Range<usize> = 1..5;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CodecError {
    #[error("key of {0} bytes exceeds the 16-bit length field")]
    KeyTooLong(usize),
    #[error("value of {0} bytes exceeds the 32-bit length field")]
    ValueTooLong(usize),
    #[error("offset {0} does not fit in 31 bits")]
    OffsetOverflow(u32),
}

pub fn crc32(bytes: &[u8]) -> u32 {
    CRC32.checksum(bytes)
}

/// Encoded length of an object with the given key and value lengths.
pub fn object_len(key_len: usize, value_len: usize) -> usize {
    OBJECT_HEADER_LEN + key_len + value_len
}

/// Encode a normal object (`Some(value)`) or a delete marker (`None`).
pub fn encode_object(key: &[u8], value: Option<&[u8]>) -> Result<Vec<u8>, CodecError> {
    if key.len() > MAX_KEY_LEN {
        return Err(CodecError::KeyTooLong(key.len()));
    }
    let value = value.map(|v| (v, false)).unwrap_or((&[][..], true));
    if value.0.len() > u32::MAX as usize {
        return Err(CodecError::ValueTooLong(value.0.len()));
    }
    let mut buf = Vec::with_capacity(object_len(key.len(), value.0.len()));
    buf.push(value.1 as u8);
    buf.extend_from_slice(&[0; 4]);
    buf.extend_from_slice(&(key.len() as u16).to_le_bytes());
    buf.extend_from_slice(&(value.0.len() as u32).to_le_bytes());
    buf.extend_from_slice(key);
    buf.extend_from_slice(value.0);
    let crc = crc32(&buf);
    buf[CRC_RANGE].copy_from_slice(&crc.to_le_bytes());
    Ok(buf)
}

/// A record that passed checksum verification.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ObjectRecord {
    pub key: Vec<u8>,
    /// `None` for a delete marker.
    pub value: Option<Vec<u8>>,
}

impl ObjectRecord {
    pub fn is_delete(&self) -> bool {
        self.value.is_none()
    }

    pub fn encoded_len(&self) -> usize {
        object_len(self.key.len(), self.value.as_ref().map_or(0, Vec::len))
    }
}

/// Parse the framed lengths at the start of `buf` without checking the CRC.
/// Returns the total record length when the header is plausible.
pub fn peek_object_len(buf: &[u8]) -> Option<usize> {
    if buf.len() < OBJECT_HEADER_LEN || buf[0] & !1 != 0 {
        return None;
    }
    let key_len = u16::from_le_bytes([buf[5], buf[6]]) as usize;
    let value_len = u32::from_le_bytes(buf[7..11].try_into().unwrap()) as usize;
    if key_len == 0 || (buf[0] == 1 && value_len != 0) {
        return None;
    }
    Some(object_len(key_len, value_len))
}

/// Verify the record at the start of `buf`; trailing bytes are ignored.
/// Any malformed length, reserved bit, or checksum mismatch yields `None`.
pub fn verify_object(buf: &[u8]) -> Option<ObjectRecord> {
    let len = peek_object_len(buf)?;
    if buf.len() < len {
        return None;
    }
    let rec = &buf[..len];
    let stored = u32::from_le_bytes(rec[CRC_RANGE].try_into().unwrap());
    let mut digest = CRC32.digest();
    digest.update(&rec[..1]);
    digest.update(&[0; 4]);
    digest.update(&rec[5..]);
    if digest.finalize() != stored {
        return None;
    }
    let key_len = u16::from_le_bytes([rec[5], rec[6]]) as usize;
    let key = rec[OBJECT_HEADER_LEN..OBJECT_HEADER_LEN + key_len].to_vec();
    let value = (rec[0] == 0).then(|| rec[OBJECT_HEADER_LEN + key_len..].to_vec());
    Some(ObjectRecord { key, value })
}

/// Decode the record at the start of `buf` trusting its lengths and skipping
/// the checksum. Exists so tests can show what verification protects against.
#[doc(hidden)]
pub fn decode_unchecked(buf: &[u8]) -> Option<ObjectRecord> {
    let len = peek_object_len(buf)?;
    if buf.len() < len {
        return None;
    }
    let key_len = u16::from_le_bytes([buf[5], buf[6]]) as usize;
    let key = buf[OBJECT_HEADER_LEN..OBJECT_HEADER_LEN + key_len].to_vec();
    let value = (buf[0] == 0).then(|| buf[OBJECT_HEADER_LEN + key_len..len].to_vec());
    Some(ObjectRecord { key, value })
}

/// Decoded metadata word.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AtomicRegion {
    pub new_tag: bool,
    pub offset_a: u32,
    pub offset_b: u32,
    pub reserved: bool,
}

impl AtomicRegion {
    pub fn new_offset(&self) -> u32 {
        if self.new_tag {
            self.offset_a
        } else {
            self.offset_b
        }
    }

    pub fn old_offset(&self) -> u32 {
        if self.new_tag {
            self.offset_b
        } else {
            self.offset_a
        }
    }

    pub fn pack(&self) -> u64 {
        ((self.new_tag as u64) << 63)
            | ((self.offset_a as u64 & MAX_OFFSET as u64) << 32)
            | ((self.offset_b as u64 & MAX_OFFSET as u64) << 1)
            | self.reserved as u64
    }

    /// Word after the normal update path: flip the tag and write `offset` into
    /// the slot the flipped tag selects. The previous new offset becomes old.
    pub fn flipped_with(&self, offset: u32) -> Result<AtomicRegion, CodecError> {
        check_offset(offset)?;
        let mut next = *self;
        next.new_tag = !self.new_tag;
        if next.new_tag {
            next.offset_a = offset;
        } else {
            next.offset_b = offset;
        }
        Ok(next)
    }

    /// Overwrite the slot the tag does not select, leaving the tag alone.
    pub fn with_old_slot(&self, offset: u32) -> Result<AtomicRegion, CodecError> {
        check_offset(offset)?;
        let mut next = *self;
        if self.new_tag {
            next.offset_b = offset;
        } else {
            next.offset_a = offset;
        }
        Ok(next)
    }

    /// Overwrite the slot the tag selects, leaving the tag alone.
    pub fn with_new_slot(&self, offset: u32) -> Result<AtomicRegion, CodecError> {
        check_offset(offset)?;
        let mut next = *self;
        if self.new_tag {
            next.offset_a = offset;
        } else {
            next.offset_b = offset;
        }
        Ok(next)
    }
}

fn check_offset(off: u32) -> Result<(), CodecError> {
    if off > MAX_OFFSET {
        Err(CodecError::OffsetOverflow(off))
    } else {
        Ok(())
    }
}

pub fn pack_atomic(new_tag: bool, new_off: u32, old_off: u32) -> Result<u64, CodecError> {
    check_offset(new_off)?;
    check_offset(old_off)?;
    let (a, b) = if new_tag {
        (new_off, old_off)
    } else {
        (old_off, new_off)
    };
    Ok(AtomicRegion {
        new_tag,
        offset_a: a,
        offset_b: b,
        reserved: false,
    }
    .pack())
}

pub fn unpack_atomic(word: u64) -> AtomicRegion {
    AtomicRegion {
        new_tag: word >> 63 == 1,
        offset_a: ((word >> 32) & MAX_OFFSET as u64) as u32,
        offset_b: ((word >> 1) & MAX_OFFSET as u64) as u32,
        reserved: word & 1 == 1,
    }
}

#[derive(
    Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize,
)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Erda,
    Redo,
    Raw,
}

impl Scheme {
    pub const ALL: [Scheme; 3] = [Scheme::Erda, Scheme::Redo, Scheme::Raw];

    pub fn name(&self) -> &'static str {
        match self {
            Scheme::Erda => "erda",
            Scheme::Redo => "redo",
            Scheme::Raw => "raw",
        }
    }
}

impl std::str::FromStr for Scheme {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "erda" => Ok(Scheme::Erda),
            "redo" => Ok(Scheme::Redo),
            "raw" | "read-after-write" => Ok(Scheme::Raw),
            other => Err(format!("unknown scheme {other:?}")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum WriteOp {
    Create,
    Update,
    Delete,
}

// Per-step NVM write contributions. The components sum to the per-operation
// totals in `paper_cost`.

/// Object framing counted against NVM writes: tag byte plus CRC.
pub const OBJECT_OVERHEAD: u64 = 5;
/// Erda metadata on update/delete: new tag and one offset (DCW skips the rest).
pub const ERDA_META_UPDATE: u64 = 4;
/// Erda metadata on create, excluding the key: head id plus tag and offset.
pub const ERDA_META_CREATE: u64 = 5;
/// Redo/RAW log framing: CRC alongside the key-value pair.
pub const LOG_OVERHEAD: u64 = 4;
/// Redo/RAW metadata on create or delete, excluding the key: an 8-byte address.
pub const BASELINE_META: u64 = 8;

/// NVM bytes written by one operation; `n` is the key-value pair size.
pub fn paper_cost(scheme: Scheme, op: WriteOp, key_size: u64, n: u64) -> u64 {
    match (scheme, op) {
        (Scheme::Erda, WriteOp::Create) => key_size + ERDA_META_CREATE + OBJECT_OVERHEAD + n,
        (Scheme::Erda, WriteOp::Update) => ERDA_META_UPDATE + OBJECT_OVERHEAD + n,
        (Scheme::Erda, WriteOp::Delete) => ERDA_META_UPDATE + OBJECT_OVERHEAD + key_size,
        (_, WriteOp::Create) => key_size + BASELINE_META + LOG_OVERHEAD + 2 * n,
        (_, WriteOp::Update) => LOG_OVERHEAD + 2 * n,
        (_, WriteOp::Delete) => key_size + BASELINE_META,
    }
}
