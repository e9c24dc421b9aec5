//! The two comparison schemes, sharing the codec, index and fabric with Erda.
//!
//! Redo logging: the client sends the whole object; the server verifies it,
//! appends it to an NVM redo log, replies, and later copies it to the key's
//! destination slot.
//!
//! Read after write (RAW): the client asks for a ring slot, writes the object
//! into it with a one-sided write and forces it into the persistence domain
//! with a one-sided read. The server polls the ring and applies records in
//! order.
//!
//! Both write every object twice. Gets are two-sided and served from the
//! unapplied records first, then from the destination.
//!
//! Device layout:
//!
//! ```text
//! 0       superblock
//! 512     apply cursor (redo: next offset | next seq << 32; raw: next seq)
//! 4096    hopscotch index
//! log     redo log or RAW ring
//! dest    destination slots, bump-allocated
//! ```

use std::any::Any;
use std::collections::{HashMap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{
    crc32, object_len, peek_object_len, verify_object, ObjectRecord, Scheme, BASELINE_META,
    LOG_OVERHEAD, OBJECT_HEADER_LEN,
};
use crate::fabric::{
    Completion, CostModel, EndpointId, Fabric, FabricError, Region, RegionKind, SERVER,
};
use crate::index::{HashIndex, IndexError, TableGeometry, MAX_INLINE_KEY};
use crate::nvm::{NvmDevice, NvmError};
use crate::sim::{ClientCtx, OpKind, Outcome, Placement, ServerLogic, Sim};
use crate::wire::{self, Reader, WireError, Writer};

pub const BASELINE_MAGIC: &[u8; 8] = b"ERDABL01";
const CURSOR_ADDR: u64 = 512;
const TABLE_BASE: u64 = 4096;
const PAGE: u64 = 4096;
/// Word in front of every log or ring record: the 32-bit sequence number
/// and a CRC binding it to the object, so a torn rewrite of a slot cannot
/// pair a new sequence number with an older object.
const SEQ_LEN: usize = 8;

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("not a baseline image: {0}")]
    BadImage(String),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Nvm(#[from] NvmError),
    #[error(transparent)]
    Fabric(#[from] FabricError),
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error("unexpected reply status {0}")]
    Status(u8),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    pub table_slots: u64,
    /// Bytes in the redo log.
    pub log_size: u64,
    /// Slots in the RAW ring.
    pub ring_slots: u64,
    pub max_object_size: u32,
    /// Bytes available for destination slots.
    pub dest_size: u64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            table_slots: 4096,
            log_size: 64 << 10,
            ring_slots: 64,
            max_object_size: 4096,
            dest_size: 16 << 20,
        }
    }
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<(), BaselineError> {
        let fail = |m: &str| Err(BaselineError::Config(m.to_string()));
        if !self.table_slots.is_power_of_two() {
            return fail("table slots must be a power of two");
        }
        if self.log_size < 2 * (SEQ_LEN as u64 + self.max_object_size as u64) {
            return fail("redo log must hold at least two maximum-size records");
        }
        if self.ring_slots == 0 {
            return fail("ring needs at least one slot");
        }
        if self.max_object_size as usize <= OBJECT_HEADER_LEN
            || self.max_object_size > u16::MAX as u32
        {
            return fail("max object size out of range");
        }
        if self.log_size > u32::MAX as u64 {
            return fail("redo log offsets must fit in 32 bits");
        }
        Ok(())
    }

    fn encode(&self, scheme: Scheme) -> Vec<u8> {
        Writer::new()
            .bytes(BASELINE_MAGIC)
            .u8(scheme as u8)
            .u64(self.table_slots)
            .u64(self.log_size)
            .u64(self.ring_slots)
            .u32(self.max_object_size)
            .u64(self.dest_size)
            .finish()
    }

    fn decode(buf: &[u8]) -> Result<(Scheme, BaselineConfig), BaselineError> {
        let mut r = Reader::new(buf);
        if r.take(8)? != BASELINE_MAGIC {
            return Err(BaselineError::BadImage("superblock magic mismatch".into()));
        }
        let scheme = match r.u8()? {
            1 => Scheme::Redo,
            2 => Scheme::Raw,
            other => {
                return Err(BaselineError::BadImage(format!(
                    "unknown scheme byte {other}"
                )))
            }
        };
        let cfg = BaselineConfig {
            table_slots: r.u64()?,
            log_size: r.u64()?,
            ring_slots: r.u64()?,
            max_object_size: r.u32()?,
            dest_size: r.u64()?,
        };
        cfg.validate()
            .map_err(|e| BaselineError::BadImage(e.to_string()))?;
        Ok((scheme, cfg))
    }
}

fn align_up(v: u64, to: u64) -> u64 {
    v.div_ceil(to) * to
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BaselineLayout {
    pub table: TableGeometry,
    pub log_base: u64,
    pub log_len: u64,
    pub slot_size: u64,
    pub dest_base: u64,
    pub dest_len: u64,
}

impl BaselineLayout {
    pub fn new(scheme: Scheme, cfg: &BaselineConfig) -> Self {
        let table = TableGeometry::new(TABLE_BASE, cfg.table_slots);
        let log_base = align_up(TABLE_BASE + table.byte_len(), PAGE);
        let slot_size = align_up(SEQ_LEN as u64 + cfg.max_object_size as u64, 8);
        let log_len = match scheme {
            Scheme::Raw => slot_size * cfg.ring_slots,
            _ => cfg.log_size,
        };
        let dest_base = align_up(log_base + log_len, PAGE);
        BaselineLayout {
            table,
            log_base,
            log_len,
            slot_size,
            dest_base,
            dest_len: cfg.dest_size,
        }
    }

    pub fn capacity(&self) -> u64 {
        self.dest_base + self.dest_len
    }

    /// Ring slot that holds RAW record `seq`.
    pub fn slot_addr(&self, seq: u64) -> u64 {
        self.log_base + (seq % (self.log_len / self.slot_size)) * self.slot_size
    }
}

/// Destination word stored in an index entry: address in the low 48 bits,
/// slot capacity in the high 16.
fn dest_word(addr: u64, cap: u32) -> u64 {
    addr | (cap as u64) << 48
}

fn dest_of(word: u64) -> (u64, u32) {
    (word & ((1 << 48) - 1), (word >> 48) as u32)
}

/// A seq-prefixed record found at `addr`, if intact.
fn frame_crc(seq: u32, obj: &[u8]) -> u32 {
    let mut buf = Vec::with_capacity(4 + obj.len());
    buf.extend_from_slice(&seq.to_le_bytes());
    buf.extend_from_slice(obj);
    crc32(&buf)
}

fn frame(seq: u64, obj: &[u8]) -> Vec<u8> {
    let seq = seq as u32;
    Writer::new()
        .u32(seq)
        .u32(frame_crc(seq, obj))
        .bytes(obj)
        .finish()
}

fn read_framed(dev: &NvmDevice, addr: u64, max: usize) -> Option<(u64, ObjectRecord, Vec<u8>)> {
    let head = dev.read(addr, SEQ_LEN + OBJECT_HEADER_LEN).ok()?;
    let seq = u32::from_le_bytes(head[..4].try_into().unwrap());
    let crc = u32::from_le_bytes(head[4..8].try_into().unwrap());
    let len = peek_object_len(&head[SEQ_LEN..])?;
    if len > max {
        return None;
    }
    let obj = dev.read(addr + SEQ_LEN as u64, len).ok()?;
    if frame_crc(seq, &obj) != crc {
        return None;
    }
    let rec = verify_object(&obj)?;
    Some((seq as u64, rec, obj))
}

#[derive(Clone, Debug)]
struct LogRec {
    seq: u64,
    off: u64,
    len: u64,
    key: Vec<u8>,
    obj: Vec<u8>,
}

#[derive(Clone, Debug)]
struct Grant {
    seq: u64,
    key: Vec<u8>,
    is_delete: bool,
    len: u32,
    granted_at: u64,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct BaselineStats {
    pub applied: u64,
    /// Redo records applied inside a request handler to free log space.
    pub inline_applies: u64,
    /// RAW slots given up on because their write never arrived.
    pub abandoned: u64,
    /// Records applied by recovery.
    pub replayed: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct BaselineRecoveryReport {
    pub index_fixes: usize,
    pub replayed: u64,
}

pub struct BaselineServer {
    scheme: Scheme,
    cfg: BaselineConfig,
    layout: BaselineLayout,
    index: HashIndex,
    dest_next: u64,
    next_client_id: u32,
    ring: Region,
    // redo
    pending: VecDeque<LogRec>,
    shadow: HashMap<Vec<u8>, u64>,
    log_tail: u64,
    // raw
    grants: VecDeque<Grant>,
    next_apply: u64,
    poll_armed: bool,
    next_seq: u64,
    lease_ns: u64,
    stats: BaselineStats,
}

impl BaselineServer {
    pub fn device_size(scheme: Scheme, cfg: &BaselineConfig) -> u64 {
        BaselineLayout::new(scheme, cfg).capacity()
    }

    pub fn format(
        fab: &mut Fabric,
        scheme: Scheme,
        cfg: BaselineConfig,
    ) -> Result<Self, BaselineError> {
        if scheme == Scheme::Erda {
            return Err(BaselineError::Config(
                "Erda is not a baseline scheme".into(),
            ));
        }
        cfg.validate()?;
        let layout = BaselineLayout::new(scheme, &cfg);
        if fab.nvm().capacity() < layout.capacity() {
            return Err(BaselineError::Config(
                "device is smaller than the layout".into(),
            ));
        }
        let sb = cfg.encode(scheme);
        fab.nvm_mut().store(0, &sb, false)?;
        fab.nvm_mut().persist(0, sb.len());
        let cursor = match scheme {
            Scheme::Redo => 1 << 32,
            _ => 1,
        };
        fab.nvm_mut().store_word(CURSOR_ADDR, cursor)?;
        fab.nvm_mut().persist(CURSOR_ADDR, 8);
        Ok(Self::bare(fab, scheme, cfg, layout))
    }

    fn bare(fab: &mut Fabric, scheme: Scheme, cfg: BaselineConfig, layout: BaselineLayout) -> Self {
        let kind = if scheme == Scheme::Raw {
            RegionKind::Nvm
        } else {
            RegionKind::Volatile
        };
        // Redo has no one-sided targets; the registration only keeps rkeys uniform.
        let ring = fab.register(layout.log_base, layout.log_len, kind);
        let cost = fab.cost();
        let lease_ns = 4
            * (cost.rtt_ns
                + 2 * cost.jitter_ns
                + cost.per_byte_ns * (cfg.max_object_size as u64 + 64))
            + cost.nic_drain_ns
            + cost.nvm_write_extra_ns
            + cost.server_cpu_op_ns;
        BaselineServer {
            scheme,
            index: HashIndex::new(layout.table),
            dest_next: layout.dest_base,
            next_client_id: 1,
            ring,
            pending: VecDeque::new(),
            shadow: HashMap::new(),
            log_tail: 0,
            grants: VecDeque::new(),
            next_apply: 1,
            poll_armed: false,
            next_seq: 1,
            lease_ns,
            stats: BaselineStats::default(),
            cfg,
            layout,
        }
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    pub fn stats(&self) -> &BaselineStats {
        &self.stats
    }

    pub fn index(&self) -> &HashIndex {
        &self.index
    }

    /// Records accepted but not yet copied to their destination.
    pub fn unapplied(&self) -> usize {
        match self.scheme {
            Scheme::Raw => self.grants.len(),
            _ => self.pending.len(),
        }
    }

    fn dest_budget(&self) -> u64 {
        let pending: u64 = match self.scheme {
            Scheme::Raw => self.grants.iter().map(|g| g.len as u64).sum(),
            _ => self.pending.iter().map(|r| r.obj.len() as u64).sum(),
        };
        (self.layout.dest_base + self.layout.dest_len).saturating_sub(self.dest_next + pending)
    }

    /// Copy a verified record to its destination and update the index.
    fn apply(
        &mut self,
        fab: &mut Fabric,
        rec: &ObjectRecord,
        obj: &[u8],
    ) -> Result<(), BaselineError> {
        let key = &rec.key;
        let n = (obj.len() - OBJECT_HEADER_LEN) as u64;
        let entry = self.index.lookup(fab.nvm(), key)?;
        if rec.is_delete() {
            if entry.is_some() {
                self.index.remove(fab.nvm_mut(), key)?;
                fab.nvm_mut().account(key.len() as u64 + BASELINE_META);
            }
            return Ok(());
        }
        let (addr, fresh) = match entry {
            Some((_, e)) if dest_of(e.word).1 as usize >= obj.len() => (dest_of(e.word).0, None),
            other => {
                let addr = self.dest_next;
                self.dest_next += align_up(obj.len() as u64, 8);
                (addr, Some(other.map(|(a, _)| a)))
            }
        };
        fab.nvm_mut().store(addr, obj, false)?;
        fab.nvm_mut().persist(addr, obj.len());
        fab.nvm_mut().account(n);
        match fresh {
            None => {}
            Some(None) => {
                self.index
                    .insert(fab.nvm_mut(), key, 0, dest_word(addr, obj.len() as u32))?;
                fab.nvm_mut().account(key.len() as u64 + BASELINE_META);
            }
            Some(Some(entry_addr)) => {
                // Moving to a larger slot is not a metadata write the byte model counts.
                self.index.update_atomic(
                    fab.nvm_mut(),
                    entry_addr,
                    dest_word(addr, obj.len() as u32),
                )?;
            }
        }
        self.stats.applied += 1;
        Ok(())
    }

    fn read_dest(
        &self,
        dev: &NvmDevice,
        key: &[u8],
    ) -> Result<Option<ObjectRecord>, BaselineError> {
        let Some((_, e)) = self.index.lookup(dev, key)? else {
            return Ok(None);
        };
        let (addr, cap) = dest_of(e.word);
        Ok(verify_object(&dev.read(addr, cap as usize)?).filter(|r| r.key == key))
    }

    /// Latest accepted state of `key`: `Some(true)` live, `Some(false)`
    /// deleted, `None` unknown to pending records.
    fn pending_state(&self, key: &[u8]) -> Option<bool> {
        match self.scheme {
            Scheme::Raw => self
                .grants
                .iter()
                .rev()
                .find(|g| g.key == key)
                .map(|g| !g.is_delete),
            _ => self
                .shadow
                .get(key)
                .and_then(|seq| self.pending.iter().find(|r| r.seq == *seq))
                .map(|r| r.obj[0] & 1 == 0),
        }
    }

    fn exists(&self, dev: &NvmDevice, key: &[u8]) -> Result<bool, BaselineError> {
        Ok(match self.pending_state(key) {
            Some(live) => live,
            None => self.index.lookup(dev, key)?.is_some(),
        })
    }

    fn handle_read(
        &self,
        fab: &mut Fabric,
        to: EndpointId,
        key: &[u8],
    ) -> Result<(), BaselineError> {
        let from_log = match self.scheme {
            Scheme::Raw => self
                .grants
                .iter()
                .rev()
                .filter(|g| g.key == key)
                .find_map(|g| {
                    read_framed(
                        fab.nvm(),
                        self.layout.slot_addr(g.seq),
                        self.cfg.max_object_size as usize,
                    )
                    .filter(|(seq, r, _)| *seq == g.seq && r.key == key)
                    .map(|(_, r, _)| r)
                }),
            _ => self
                .shadow
                .get(key)
                .and_then(|seq| self.pending.iter().find(|r| r.seq == *seq))
                .and_then(|r| verify_object(&r.obj)),
        };
        let rec = match from_log {
            Some(r) => Some(r),
            None => self.read_dest(fab.nvm(), key)?,
        };
        let msg = match rec.and_then(|r| r.value) {
            Some(v) => Writer::new()
                .u8(wire::ST_OK)
                .u32(v.len() as u32)
                .bytes(&v)
                .finish(),
            None => Writer::new().u8(wire::ST_NOT_FOUND).u32(0).finish(),
        };
        fab.post_send(SERVER, to, msg);
        Ok(())
    }

    fn check_object(&self, key: &[u8], op: u8, obj: &[u8]) -> bool {
        key.len() <= MAX_INLINE_KEY
            && obj.len() <= self.cfg.max_object_size as usize
            && matches!(verify_object(obj), Some(r) if r.key == key && r.is_delete() == (op == wire::OP_DELETE)
                && obj.len() == r.encoded_len())
    }

    fn redo_conflicts(&self, off: u64, len: u64) -> Option<usize> {
        self.pending
            .iter()
            .position(|r| off < r.off + r.len && r.off < off + len)
    }

    fn redo_apply_front(&mut self, fab: &mut Fabric) -> Result<(), BaselineError> {
        let Some(r) = self.pending.pop_front() else {
            return Ok(());
        };
        let rec = verify_object(&r.obj).expect("records were verified on arrival");
        self.apply(fab, &rec, &r.obj)?;
        let next_off = if r.off + r.len >= self.layout.log_len {
            0
        } else {
            r.off + r.len
        };
        fab.nvm_mut()
            .store_word(CURSOR_ADDR, next_off | (r.seq + 1) << 32)?;
        fab.nvm_mut().persist(CURSOR_ADDR, 8);
        fab.charge_nvm_write();
        if self.shadow.get(&r.key) == Some(&r.seq) {
            self.shadow.remove(&r.key);
        }
        Ok(())
    }

    fn handle_redo_write(
        &mut self,
        fab: &mut Fabric,
        to: EndpointId,
        r: &mut Reader<'_>,
    ) -> Result<(), BaselineError> {
        let op = r.u8()?;
        let key = r.key()?.to_vec();
        let obj = r.rest().to_vec();
        let status = if !self.check_object(&key, op, &obj) {
            wire::ST_BAD_REQUEST
        } else if op == wire::OP_DELETE && !self.exists(fab.nvm(), &key)? {
            wire::ST_NOT_FOUND
        } else if op == wire::OP_PUT && obj.len() as u64 + 8 > self.dest_budget() {
            wire::ST_FULL
        } else {
            let len = (SEQ_LEN + obj.len()) as u64;
            let mut off = if self.log_tail + len > self.layout.log_len {
                0
            } else {
                self.log_tail
            };
            while self.redo_conflicts(off, len).is_some() {
                self.redo_apply_front(fab)?;
                self.stats.inline_applies += 1;
                if self.pending.is_empty() {
                    off = if self.log_tail + len > self.layout.log_len {
                        0
                    } else {
                        self.log_tail
                    };
                }
            }
            let seq = self.next_seq;
            self.next_seq += 1;
            let framed = frame(seq, &obj);
            let addr = self.layout.log_base + off;
            fab.nvm_mut().store(addr, &framed, false)?;
            fab.nvm_mut().persist(addr, framed.len());
            if op == wire::OP_PUT {
                fab.nvm_mut()
                    .account(LOG_OVERHEAD + (obj.len() - OBJECT_HEADER_LEN) as u64);
            }
            fab.charge_nvm_write();
            self.log_tail = off + len;
            self.shadow.insert(key.clone(), seq);
            self.pending.push_back(LogRec {
                seq,
                off,
                len,
                key,
                obj,
            });
            wire::ST_OK
        };
        fab.post_send(SERVER, to, Writer::new().u8(status).u8(0).u32(0).finish());
        Ok(())
    }

    fn handle_slot(
        &mut self,
        fab: &mut Fabric,
        to: EndpointId,
        r: &mut Reader<'_>,
    ) -> Result<(), BaselineError> {
        let op = r.u8()?;
        let key = r.key()?.to_vec();
        let size = r.u32()?;
        let ok_size = size as usize >= object_len(key.len(), 0) && size <= self.cfg.max_object_size;
        let ring_full = self.next_seq - self.next_apply >= self.cfg.ring_slots;
        let status = if key.len() > MAX_INLINE_KEY
            || !ok_size
            || !matches!(op, wire::OP_PUT | wire::OP_DELETE)
        {
            wire::ST_BAD_REQUEST
        } else if op == wire::OP_DELETE && !self.exists(fab.nvm(), &key)? {
            wire::ST_NOT_FOUND
        } else if ring_full || (op == wire::OP_PUT && size as u64 + 8 > self.dest_budget()) {
            wire::ST_FULL
        } else {
            wire::ST_OK
        };
        if status != wire::ST_OK {
            fab.post_send(
                SERVER,
                to,
                Writer::new().u8(status).u64(0).u32(0).u64(0).finish(),
            );
            return Ok(());
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.grants.push_back(Grant {
            seq,
            key,
            is_delete: op == wire::OP_DELETE,
            len: size,
            granted_at: fab.now(),
        });
        let addr = self.layout.slot_addr(seq);
        fab.post_send(
            SERVER,
            to,
            Writer::new()
                .u8(wire::ST_OK)
                .u64(addr)
                .u32(self.ring.rkey)
                .u64(seq)
                .finish(),
        );
        self.arm_poll(fab);
        Ok(())
    }

    fn arm_poll(&mut self, fab: &mut Fabric) {
        if !self.poll_armed && !self.grants.is_empty() {
            self.poll_armed = true;
            fab.wake_server_after(fab.cost().half_rtt());
        }
    }

    /// Whether the oldest grant can be applied or given up on now.
    fn raw_front_ready(&self, fab: &Fabric) -> bool {
        let Some(g) = self.grants.front() else {
            return false;
        };
        self.raw_front_record(fab.nvm()).is_some() || fab.now() >= g.granted_at + self.lease_ns
    }

    fn raw_front_record(&self, dev: &NvmDevice) -> Option<(ObjectRecord, Vec<u8>)> {
        let g = self.grants.front()?;
        read_framed(
            dev,
            self.layout.slot_addr(g.seq),
            self.cfg.max_object_size as usize,
        )
        .filter(|(seq, r, obj)| *seq == g.seq && r.key == g.key && obj.len() == g.len as usize)
        .map(|(_, r, obj)| (r, obj))
    }

    fn raw_poll(&mut self, fab: &mut Fabric) -> Result<(), BaselineError> {
        self.poll_armed = false;
        if let Some(g) = self.grants.front().cloned() {
            match self.raw_front_record(fab.nvm()) {
                Some((rec, obj)) => {
                    self.apply(fab, &rec, &obj)?;
                    fab.charge_nvm_write();
                }
                None if fab.now() >= g.granted_at + self.lease_ns => self.stats.abandoned += 1,
                None => {
                    self.arm_poll(fab);
                    return Ok(());
                }
            }
            self.grants.pop_front();
            self.next_apply = g.seq + 1;
            fab.nvm_mut().store_word(CURSOR_ADDR, self.next_apply)?;
            fab.nvm_mut().persist(CURSOR_ADDR, 8);
        }
        if !self.raw_front_ready(fab) {
            self.arm_poll(fab);
        }
        Ok(())
    }

    fn dispatch(&mut self, fab: &mut Fabric, c: &Completion) -> Result<(), BaselineError> {
        let mut r = Reader::new(&c.payload);
        match (r.u8()?, self.scheme) {
            (wire::OP_CONNECT, _) => {
                let id = self.next_client_id;
                self.next_client_id += 1;
                fab.post_send(
                    SERVER,
                    c.from,
                    Writer::new().u8(wire::ST_OK).u32(id).finish(),
                );
            }
            (wire::OP_READ, _) => {
                let key = r.key()?.to_vec();
                self.handle_read(fab, c.from, &key)?;
            }
            (wire::OP_WRITE_OBJ, Scheme::Redo) => self.handle_redo_write(fab, c.from, &mut r)?,
            (wire::OP_SLOT, Scheme::Raw) => self.handle_slot(fab, c.from, &mut r)?,
            _ => {
                fab.post_send(SERVER, c.from, vec![wire::ST_BAD_REQUEST]);
            }
        }
        Ok(())
    }

    /// Rebuild a server from a post-crash device, replaying durable records
    /// that were not yet applied.
    pub fn recover(fab: &mut Fabric) -> Result<(Self, BaselineRecoveryReport), BaselineError> {
        let sb = fab.nvm().read(0, 64)?;
        let (scheme, cfg) = BaselineConfig::decode(&sb)?;
        let layout = BaselineLayout::new(scheme, &cfg);
        if fab.nvm().capacity() < layout.capacity() {
            return Err(BaselineError::BadImage(
                "device is smaller than its layout".into(),
            ));
        }
        let mut s = Self::bare(fab, scheme, cfg, layout);
        let mut report = BaselineRecoveryReport {
            index_fixes: s.index.recover(fab.nvm_mut())?,
            replayed: 0,
        };
        s.dest_next = s
            .index
            .entries(fab.nvm())?
            .iter()
            .map(|(_, e)| {
                let (addr, cap) = dest_of(e.word);
                addr + align_up(cap as u64, 8)
            })
            .max()
            .unwrap_or(layout.dest_base)
            .max(layout.dest_base);
        let cursor = fab.nvm().read_word(CURSOR_ADDR)?;
        let max = s.cfg.max_object_size as usize;
        match scheme {
            Scheme::Raw => {
                let mut found: Vec<(u64, ObjectRecord, Vec<u8>)> = (0..s.cfg.ring_slots)
                    .filter_map(|i| {
                        read_framed(fab.nvm(), layout.log_base + i * layout.slot_size, max)
                    })
                    .filter(|(seq, _, _)| *seq >= cursor)
                    .collect();
                found.sort_by_key(|f| f.0);
                for (seq, rec, obj) in found {
                    s.apply(fab, &rec, &obj)?;
                    s.next_apply = seq + 1;
                    report.replayed += 1;
                }
                s.next_apply = s.next_apply.max(cursor);
                s.next_seq = s.next_apply;
                fab.nvm_mut().store_word(CURSOR_ADDR, s.next_apply)?;
                fab.nvm_mut().persist(CURSOR_ADDR, 8);
            }
            _ => {
                let mut off = cursor & 0xFFFF_FFFF;
                let mut seq = cursor >> 32;
                loop {
                    let at = |o: u64| {
                        read_framed(fab.nvm(), layout.log_base + o, max).filter(|(q, _, obj)| {
                            *q == seq && o + (SEQ_LEN + obj.len()) as u64 <= layout.log_len
                        })
                    };
                    let (o, (_, rec, obj)) = match at(off) {
                        Some(f) => (off, f),
                        None if off != 0 => match at(0) {
                            Some(f) => (0, f),
                            None => break,
                        },
                        None => break,
                    };
                    s.apply(fab, &rec, &obj)?;
                    report.replayed += 1;
                    off = o + (SEQ_LEN + obj.len()) as u64;
                    if off >= layout.log_len {
                        off = 0;
                    }
                    seq += 1;
                }
                fab.nvm_mut().store_word(CURSOR_ADDR, off | seq << 32)?;
                fab.nvm_mut().persist(CURSOR_ADDR, 8);
                s.log_tail = off;
                s.next_seq = seq;
            }
        }
        s.stats.replayed = report.replayed;
        Ok((s, report))
    }
}

impl ServerLogic for BaselineServer {
    fn on_completion(&mut self, fab: &mut Fabric, c: Completion) {
        if let Err(e) = self.dispatch(fab, &c) {
            match e {
                BaselineError::Wire(_) => {
                    fab.post_send(SERVER, c.from, vec![wire::ST_BAD_REQUEST]);
                }
                other => panic!("baseline server failed handling a request: {other}"),
            }
        }
    }

    fn on_background(&mut self, fab: &mut Fabric) {
        let res = match self.scheme {
            Scheme::Raw => self.raw_poll(fab),
            _ => self.redo_apply_front(fab),
        };
        if let Err(e) = res {
            panic!("baseline apply failed: {e}");
        }
    }

    fn wants_background(&self, fab: &Fabric) -> bool {
        match self.scheme {
            Scheme::Raw => self.raw_front_ready(fab),
            _ => !self.pending.is_empty(),
        }
    }

    fn as_any(&self) -> &dyn Any {
        self
    }

    fn as_any_mut(&mut self) -> &mut dyn Any {
        self
    }
}

/// A simulation running a freshly formatted baseline server.
pub fn new_sim(
    scheme: Scheme,
    cfg: BaselineConfig,
    cost: CostModel,
    seed: u64,
) -> Result<Sim, BaselineError> {
    cfg.validate()?;
    let size = BaselineServer::device_size(scheme, &cfg) as usize;
    let mut fab = Fabric::new(NvmDevice::new(size), cost, seed);
    let server = BaselineServer::format(&mut fab, scheme, cfg)?;
    Ok(Sim::new(fab, Box::new(server)))
}

/// A simulation whose baseline server recovers from a post-crash image.
pub fn restart_sim(
    nvm: NvmDevice,
    cost: CostModel,
    seed: u64,
) -> Result<(Sim, BaselineRecoveryReport), BaselineError> {
    let mut fab = Fabric::new(nvm, cost, seed);
    let (server, report) = BaselineServer::recover(&mut fab)?;
    Ok((Sim::new(fab, Box::new(server)), report))
}

pub struct BaselineClient {
    ctx: ClientCtx,
    scheme: Scheme,
    client_id: u32,
    max_object_size: u32,
    backoff_ns: u64,
}

impl BaselineClient {
    pub async fn connect(
        ctx: ClientCtx,
        scheme: Scheme,
        max_object_size: u32,
    ) -> Result<Self, BaselineError> {
        let reply = ctx.call(vec![wire::OP_CONNECT]).await?;
        let mut r = Reader::new(&reply);
        let status = r.u8()?;
        if status != wire::ST_OK {
            return Err(BaselineError::Status(status));
        }
        let client_id = r.u32()?;
        let backoff_ns = ctx.with_world(|w| w.fab.cost().rtt_ns);
        Ok(BaselineClient {
            ctx,
            scheme,
            client_id,
            max_object_size,
            backoff_ns,
        })
    }

    pub fn client_id(&self) -> u32 {
        self.client_id
    }

    pub fn ctx(&self) -> &ClientCtx {
        &self.ctx
    }

    pub async fn get(&mut self, key: &[u8]) -> Outcome {
        let idx = self.ctx.begin_op(OpKind::Get, key, None);
        let out = match self
            .ctx
            .call(Writer::new().u8(wire::OP_READ).key(key).finish())
            .await
        {
            Ok(reply) => {
                let mut r = Reader::new(&reply);
                match (r.u8(), r.u32()) {
                    (Ok(wire::ST_OK), Ok(n)) => match r.take(n as usize) {
                        Ok(v) => Outcome::Value(v.to_vec()),
                        Err(e) => Outcome::Failed(e.to_string()),
                    },
                    (Ok(wire::ST_NOT_FOUND), _) => Outcome::NotFound,
                    (Ok(st), _) => Outcome::Failed(format!("server returned status {st}")),
                    (Err(e), _) => Outcome::Failed(e.to_string()),
                }
            }
            Err(e) => Outcome::Failed(e.to_string()),
        };
        self.ctx.end_op(idx, out.clone());
        out
    }

    pub async fn put(&mut self, key: &[u8], value: &[u8]) -> Outcome {
        self.write(OpKind::Put, key, Some(value)).await
    }

    pub async fn delete(&mut self, key: &[u8]) -> Outcome {
        self.write(OpKind::Delete, key, None).await
    }

    async fn write(&mut self, kind: OpKind, key: &[u8], value: Option<&[u8]>) -> Outcome {
        let idx = self.ctx.begin_op(kind, key, value);
        let out = match crate::codec::encode_object(key, value) {
            Ok(obj) if obj.len() <= self.max_object_size as usize => {
                let res = match self.scheme {
                    Scheme::Raw => self.raw_write(&obj, key, idx).await,
                    _ => self.redo_write(&obj, key).await,
                };
                res.unwrap_or_else(|e| Outcome::Failed(e.to_string()))
            }
            Ok(obj) => {
                Outcome::Failed(format!("object of {} bytes exceeds the maximum", obj.len()))
            }
            Err(e) => Outcome::Failed(e.to_string()),
        };
        self.ctx.end_op(idx, out.clone());
        out
    }

    fn op_byte(value_is_delete: bool) -> u8 {
        if value_is_delete {
            wire::OP_DELETE
        } else {
            wire::OP_PUT
        }
    }

    fn status_outcome(status: u8) -> Outcome {
        match status {
            wire::ST_OK => Outcome::Done,
            wire::ST_NOT_FOUND => Outcome::NotFound,
            wire::ST_FULL => Outcome::Failed("server full".into()),
            st => Outcome::Failed(format!("server returned status {st}")),
        }
    }

    async fn redo_write(&mut self, obj: &[u8], key: &[u8]) -> Result<Outcome, BaselineError> {
        let msg = Writer::new()
            .u8(wire::OP_WRITE_OBJ)
            .u8(Self::op_byte(obj[0] & 1 == 1))
            .key(key)
            .bytes(obj)
            .finish();
        let reply = self.ctx.call(msg).await?;
        Ok(Self::status_outcome(Reader::new(&reply).u8()?))
    }

    async fn raw_write(
        &mut self,
        obj: &[u8],
        key: &[u8],
        idx: usize,
    ) -> Result<Outcome, BaselineError> {
        let req = Writer::new()
            .u8(wire::OP_SLOT)
            .u8(Self::op_byte(obj[0] & 1 == 1))
            .key(key)
            .u32(obj.len() as u32);
        let req = req.finish();
        let (addr, rkey, seq) = loop {
            let reply = self.ctx.call(req.clone()).await?;
            let mut r = Reader::new(&reply);
            match r.u8()? {
                wire::ST_OK => break (r.u64()?, r.u32()?, r.u64()?),
                wire::ST_FULL => self.ctx.sleep(self.backoff_ns).await,
                st => return Ok(Self::status_outcome(st)),
            }
        };
        let framed = frame(seq, obj);
        let paper = if obj[0] & 1 == 1 {
            0
        } else {
            LOG_OVERHEAD + (obj.len() - OBJECT_HEADER_LEN) as u64
        };
        let len = framed.len();
        self.ctx.write(addr, framed, rkey, None, paper).await?;
        // Reading back the tail forces the write out of the NIC into NVM.
        self.ctx.read(addr + len as u64 - 1, 1, rkey).await?;
        let placement = Placement {
            head: 0,
            chain_offset: 0,
            addr,
            generation: 0,
            one_sided: true,
        };
        self.ctx.place_op(idx, placement);
        Ok(Outcome::Done)
    }
}
