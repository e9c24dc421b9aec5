use std::any::Any;
use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::Serialize;

use super::{
    encode_head_view, head_of, in_flight_bound, place_in_segment, ErdaConfig, ErdaError,
    HeadControl, Layout,
};
use crate::cleaner::{CleanPhase, CleanStats, CleaningSession};
use crate::codec::{
    object_len, unpack_atomic, verify_object, AtomicRegion, ObjectRecord, ERDA_META_CREATE,
    ERDA_META_UPDATE, OBJECT_HEADER_LEN, OBJECT_OVERHEAD,
};
use crate::fabric::{Completion, EndpointId, Fabric, Region, RegionKind, SERVER};
use crate::index::{HashEntry, HashIndex, IndexError, MAX_INLINE_KEY};
use crate::nvm::NvmDevice;
use crate::sim::ServerLogic;
use crate::wire::{self, Reader, Writer};

/// Base of the address space used for the volatile request mailbox.
pub(crate) const MAILBOX_BASE: u64 = 1 << 48;
const MAILBOX_LEN: u64 = 1 << 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct RecordInfo {
    pub len: u32,
    /// Simulated time the range was handed out; zero for records found by recovery.
    pub reserved_at: u64,
}

/// A head's chain of regions and the server's volatile directory of the
/// records it handed out in it.
#[derive(Clone, Debug, Default)]
pub(crate) struct Chain {
    pub regions: Vec<u32>,
    pub last_written: u32,
    pub records: BTreeMap<u32, RecordInfo>,
}

#[derive(Clone, Debug)]
pub(crate) struct HeadState {
    pub control: HeadControl,
    pub chain: Chain,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct ErdaStats {
    pub reservations: u64,
    pub direct_writes: u64,
    pub served_reads: u64,
    pub repairs_applied: u64,
    pub repairs_skipped: u64,
    pub regions_linked: u64,
    pub cleanings: Vec<CleanStats>,
}

/// Result of checking one index entry against the log.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum EntryFix {
    Intact,
    /// New version unreadable; the entry now points at the old version.
    Repaired,
    /// A create whose object never became durable; the entry is gone.
    Removed,
    /// Both versions unreadable; the entry points at an older durable record.
    RolledBack,
    /// No durable version at all; the entry is gone.
    Lost,
}

pub struct ErdaServer {
    pub(crate) cfg: ErdaConfig,
    pub(crate) layout: Layout,
    pub(crate) index: HashIndex,
    pub(crate) heads: Vec<HeadState>,
    pub(crate) free: BTreeSet<u32>,
    pub(crate) rkeys: HashMap<u32, u32>,
    pub(crate) table_region: Region,
    pub(crate) mailbox: Region,
    pub(crate) clients: BTreeMap<u32, EndpointId>,
    pub(crate) next_client_id: u32,
    pub(crate) cleaning: Option<CleaningSession>,
    pub(crate) stats: ErdaStats,
    pub(crate) lease_ns: u64,
    pub(crate) quiesce_ns: u64,
}

impl ErdaServer {
    /// Device size needed for `cfg`.
    pub fn device_size(cfg: &ErdaConfig) -> u64 {
        Layout::new(cfg).capacity()
    }

    /// Initialize an empty store on the fabric's device.
    pub fn format(fab: &mut Fabric, cfg: ErdaConfig) -> Result<ErdaServer, ErdaError> {
        cfg.validate()?;
        let layout = Layout::new(&cfg);
        if fab.nvm().capacity() < layout.capacity() {
            return Err(ErdaError::Config(format!(
                "device of {} bytes is smaller than the {} bytes the layout needs",
                fab.nvm().capacity(),
                layout.capacity()
            )));
        }
        let sb = cfg.encode();
        fab.nvm_mut().store(0, &sb, false)?;
        fab.nvm_mut().persist(0, sb.len());
        let mut server = ErdaServer::bare(fab, cfg, layout);
        for h in 0..server.cfg.heads {
            let id = h as u32;
            server.free.remove(&id);
            let control = HeadControl {
                len_a: 1,
                generation: 1,
                ..HeadControl::default()
            };
            let slot = layout.chain_slot_addr(h, false, 0);
            fab.nvm_mut().store(slot, &id.to_le_bytes(), false)?;
            fab.nvm_mut().persist(slot, 4);
            fab.nvm_mut()
                .store_word(layout.head_addr(h), control.pack())?;
            fab.nvm_mut().persist(layout.head_addr(h), 8);
            server.register_region(fab, id);
            server.heads.push(HeadState {
                control,
                chain: Chain {
                    regions: vec![id],
                    ..Chain::default()
                },
            });
        }
        Ok(server)
    }

    /// Server with no heads yet; shared by format and recovery.
    pub(crate) fn bare(fab: &mut Fabric, cfg: ErdaConfig, layout: Layout) -> ErdaServer {
        let table_region =
            fab.register(layout.table.base, layout.table.byte_len(), RegionKind::Nvm);
        let mailbox = fab.register(MAILBOX_BASE, MAILBOX_LEN, RegionKind::Volatile);
        let bound = in_flight_bound(fab.cost(), cfg.max_object_size);
        ErdaServer {
            index: HashIndex::new(layout.table),
            heads: Vec::new(),
            free: (0..cfg.pool_regions).collect(),
            rkeys: HashMap::new(),
            table_region,
            mailbox,
            clients: BTreeMap::new(),
            next_client_id: 1,
            cleaning: None,
            stats: ErdaStats::default(),
            lease_ns: 2 * bound,
            quiesce_ns: bound
                + fab.cost().half_rtt()
                + fab.cost().jitter_ns
                + 64 * fab.cost().per_byte_ns,
            cfg,
            layout,
        }
    }

    pub fn config(&self) -> &ErdaConfig {
        &self.cfg
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn index(&self) -> &HashIndex {
        &self.index
    }

    pub fn stats(&self) -> &ErdaStats {
        &self.stats
    }

    pub fn control(&self, head: u8) -> HeadControl {
        self.heads[head as usize].control
    }

    pub fn last_written(&self, head: u8) -> u32 {
        self.heads[head as usize].chain.last_written
    }

    pub fn chain_regions(&self, head: u8) -> &[u32] {
        &self.heads[head as usize].chain.regions
    }

    pub fn cleaning_head(&self) -> Option<u8> {
        self.cleaning.as_ref().map(|c| c.head)
    }

    pub fn cleaning_phase(&self) -> Option<CleanPhase> {
        self.cleaning.as_ref().map(|c| c.phase)
    }

    pub fn free_regions(&self) -> usize {
        self.free.len()
    }

    /// Occupied fraction of a head's chain.
    pub fn occupancy(&self, head: u8) -> f64 {
        let chain = &self.heads[head as usize].chain;
        chain.last_written as f64 / (chain.regions.len() as u64 * self.cfg.region_size) as f64
    }

    /// Offsets and lengths of the records handed out in a head's active chain.
    pub fn directory(&self, head: u8) -> Vec<(u32, u32)> {
        self.heads[head as usize]
            .chain
            .records
            .iter()
            .map(|(&o, r)| (o, r.len))
            .collect()
    }

    /// Absolute address of a head's chain offset in its active chain.
    pub fn chain_addr(&self, head: u8, offset: u32) -> Option<u64> {
        self.layout
            .chain_addr(&self.heads[head as usize].chain.regions, offset)
    }

    pub(crate) fn register_region(&mut self, fab: &mut Fabric, id: u32) {
        let r = fab.register(
            self.layout.region_addr(id),
            self.cfg.region_size,
            RegionKind::Nvm,
        );
        self.rkeys.insert(id, r.rkey);
    }

    pub(crate) fn release_region(&mut self, fab: &mut Fabric, id: u32) {
        if let Some(rkey) = self.rkeys.remove(&id) {
            fab.unregister(rkey);
        }
        self.free.insert(id);
    }

    /// Take a free region, zero it if it holds old data, and register it.
    pub(crate) fn alloc_region(&mut self, fab: &mut Fabric) -> Result<u32, ErdaError> {
        let id = self.free.pop_first().ok_or(ErdaError::PoolExhausted)?;
        let addr = self.layout.region_addr(id);
        let len = self.cfg.region_size as usize;
        if fab.nvm().read(addr, len)?.iter().any(|&b| b != 0) {
            fab.nvm_mut().store(addr, &vec![0; len], false)?;
            fab.nvm_mut().persist(addr, len);
        }
        self.register_region(fab, id);
        Ok(id)
    }

    pub(crate) fn write_control(&self, fab: &mut Fabric, head: u8) -> Result<(), ErdaError> {
        let addr = self.layout.head_addr(head);
        fab.nvm_mut()
            .store_word(addr, self.heads[head as usize].control.pack())?;
        fab.nvm_mut().persist(addr, 8);
        Ok(())
    }

    /// Append a fresh region to chain array `b` of `head`. The region id is
    /// written before the length that makes it part of the chain.
    pub(crate) fn link_region(
        &mut self,
        fab: &mut Fabric,
        head: u8,
        b: bool,
        chain: &mut Chain,
    ) -> Result<(), ErdaError> {
        if chain.regions.len() as u32 >= self.cfg.max_chain {
            return Err(ErdaError::LogFull);
        }
        let id = self.alloc_region(fab)?;
        let slot = self
            .layout
            .chain_slot_addr(head, b, chain.regions.len() as u32);
        fab.nvm_mut().store(slot, &id.to_le_bytes(), false)?;
        fab.nvm_mut().persist(slot, 4);
        chain.regions.push(id);
        let active = self.heads[head as usize].control.active_b == b;
        let control = &mut self.heads[head as usize].control;
        control.set_len(b, chain.regions.len() as u16);
        if active {
            control.generation += 1;
        }
        self.write_control(fab, head)?;
        self.stats.regions_linked += 1;
        Ok(())
    }

    /// Hand out `size` bytes in `chain`, linking regions as needed.
    pub(crate) fn reserve_in(
        &mut self,
        fab: &mut Fabric,
        head: u8,
        b: bool,
        chain: &mut Chain,
        size: u32,
    ) -> Result<u32, ErdaError> {
        loop {
            let off = place_in_segment(
                chain.last_written as u64,
                size as u64,
                self.cfg.segment_size,
            );
            if off + size as u64 <= chain.regions.len() as u64 * self.cfg.region_size {
                let off = off as u32;
                chain.last_written = off + size;
                chain.records.insert(
                    off,
                    RecordInfo {
                        len: size,
                        reserved_at: fab.now(),
                    },
                );
                return Ok(off);
            }
            self.link_region(fab, head, b, chain)?;
        }
    }

    /// Reserve in the head's active chain, telling clients if the chain grew.
    pub(crate) fn reserve_active(
        &mut self,
        fab: &mut Fabric,
        head: u8,
        size: u32,
    ) -> Result<u32, ErdaError> {
        let mut chain = std::mem::take(&mut self.heads[head as usize].chain);
        let before = chain.regions.len();
        let b = self.heads[head as usize].control.active_b;
        let res = self.reserve_in(fab, head, b, &mut chain, size);
        let grew = chain.regions.len() != before;
        self.heads[head as usize].chain = chain;
        if grew {
            let note = Writer::new()
                .u8(wire::NOTE_HEAD_UPDATE)
                .u8(head)
                .bytes(&self.head_view(head))
                .finish();
            self.notify_all(fab, note);
        }
        res
    }

    pub(crate) fn head_view(&self, head: u8) -> Vec<u8> {
        let hs = &self.heads[head as usize];
        let regions: Vec<(u64, u32)> = hs
            .chain
            .regions
            .iter()
            .map(|id| (self.layout.region_addr(*id), self.rkeys[id]))
            .collect();
        encode_head_view(
            hs.control.generation,
            self.cleaning_head() == Some(head),
            &regions,
        )
    }

    pub(crate) fn notify_all(&self, fab: &mut Fabric, payload: Vec<u8>) {
        for &ep in self.clients.values() {
            if fab.is_alive(ep) {
                fab.post_send(SERVER, ep, payload.clone());
            }
        }
    }

    /// Verified record for `key` at `offset` of `chain`, if any.
    pub(crate) fn record_at(
        &self,
        dev: &NvmDevice,
        chain: &[u32],
        offset: u32,
        key: &[u8],
    ) -> Option<ObjectRecord> {
        let addr = self.layout.chain_addr(chain, offset)?;
        let seg = self.cfg.segment_size;
        let room = seg - (offset as u64 % seg);
        let len = room.min(self.cfg.max_object_size as u64) as usize;
        let bytes = dev.read(addr, len).ok()?;
        verify_object(&bytes).filter(|r| r.key == key)
    }

    /// Check an entry's new version and fall back when it is unreadable.
    /// Used by recovery and before cleaning scans a chain.
    pub(crate) fn fix_entry(
        &mut self,
        fab: &mut Fabric,
        head: u8,
        addr: u64,
        e: &HashEntry,
    ) -> Result<EntryFix, ErdaError> {
        let chain = self.heads[head as usize].chain.regions.clone();
        let a = unpack_atomic(e.word);
        let (new, old) = (a.new_offset(), a.old_offset());
        if self.record_at(fab.nvm(), &chain, new, &e.key).is_some() {
            return Ok(EntryFix::Intact);
        }
        if old != new && self.record_at(fab.nvm(), &chain, old, &e.key).is_some() {
            let w = AtomicRegion {
                offset_a: old,
                offset_b: old,
                ..a
            };
            self.index.update_atomic(fab.nvm_mut(), addr, w.pack())?;
            return Ok(EntryFix::Repaired);
        }
        if old == new {
            self.index.remove(fab.nvm_mut(), &e.key)?;
            return Ok(EntryFix::Removed);
        }
        let older = self.heads[head as usize]
            .chain
            .records
            .range(..new.min(old))
            .rev()
            .map(|(&o, _)| o)
            .find(|&o| self.record_at(fab.nvm(), &chain, o, &e.key).is_some());
        match older {
            Some(o) => {
                let w = AtomicRegion {
                    offset_a: o,
                    offset_b: o,
                    ..a
                };
                self.index.update_atomic(fab.nvm_mut(), addr, w.pack())?;
                Ok(EntryFix::RolledBack)
            }
            None => {
                self.index.remove(fab.nvm_mut(), &e.key)?;
                Ok(EntryFix::Lost)
            }
        }
    }

    /// Live entries under `head`.
    pub(crate) fn head_entries(
        &self,
        dev: &NvmDevice,
        head: u8,
    ) -> Result<Vec<(u64, HashEntry)>, ErdaError> {
        Ok(self
            .index
            .entries(dev)?
            .into_iter()
            .filter(|(_, e)| e.head_id == head)
            .collect())
    }

    fn reply_to(&self, c: &Completion) -> EndpointId {
        c.imm
            .and_then(|id| self.clients.get(&id).copied())
            .unwrap_or(c.from)
    }

    fn handle_connect(&mut self, fab: &mut Fabric, from: EndpointId) {
        let id = self.next_client_id;
        self.next_client_id += 1;
        self.clients.insert(id, from);
        let mut w = Writer::new()
            .u8(wire::ST_OK)
            .u32(id)
            .u64(self.layout.table.base)
            .u64(self.layout.table.slots)
            .u32(self.table_region.rkey)
            .u64(self.mailbox.base)
            .u32(self.mailbox.rkey)
            .u32(self.cfg.max_object_size)
            .u64(self.cfg.region_size)
            .u64(self.cfg.segment_size)
            .u8(self.cfg.heads);
        for h in 0..self.cfg.heads {
            w = w.bytes(&self.head_view(h));
        }
        fab.post_send(SERVER, from, w.finish());
    }

    fn write_resp(fab: &mut Fabric, to: EndpointId, status: u8, head: u8, off: u32) {
        fab.post_send(
            SERVER,
            to,
            Writer::new().u8(status).u8(head).u32(off).finish(),
        );
    }

    /// Whether the entry's latest record is a delete marker.
    fn latest_is_marker(&self, dev: &NvmDevice, head: u8, e: &HashEntry) -> bool {
        let a = unpack_atomic(e.word);
        let chain = &self.heads[head as usize].chain.regions;
        matches!(self.record_at(dev, chain, a.new_offset(), &e.key), Some(r) if r.is_delete())
    }

    /// WRITE_REQ: reserve log space and publish it in the metadata word; the
    /// client then writes the object itself.
    fn handle_write_req(
        &mut self,
        fab: &mut Fabric,
        c: &Completion,
        op: u8,
        r: &mut Reader<'_>,
    ) -> Result<(), ErdaError> {
        let to = self.reply_to(c);
        let key = r.key()?.to_vec();
        let size = r.u32()?;
        let head = head_of(&key, self.cfg.heads);
        let valid_size = if op == wire::OP_DELETE {
            size as usize == object_len(key.len(), 0)
        } else {
            size as usize >= object_len(key.len(), 0)
        };
        if key.len() > MAX_INLINE_KEY || !valid_size || size > self.cfg.max_object_size {
            Self::write_resp(fab, to, wire::ST_BAD_REQUEST, head, 0);
            return Ok(());
        }
        if self.cleaning_head() == Some(head) {
            Self::write_resp(fab, to, wire::ST_CLEANING, head, 0);
            return Ok(());
        }
        let entry = self.index.lookup(fab.nvm(), &key)?;
        if op == wire::OP_DELETE
            && entry
                .as_ref()
                .is_none_or(|(_, e)| self.latest_is_marker(fab.nvm(), head, e))
        {
            Self::write_resp(fab, to, wire::ST_NOT_FOUND, head, 0);
            return Ok(());
        }
        let off = match self.reserve_active(fab, head, size) {
            Ok(off) => off,
            Err(ErdaError::LogFull | ErdaError::PoolExhausted) => {
                Self::write_resp(fab, to, wire::ST_FULL, head, 0);
                return Ok(());
            }
            Err(e) => return Err(e),
        };
        let published = match entry {
            Some((addr, e)) => {
                let w = unpack_atomic(e.word)
                    .flipped_with(off)
                    .expect("chain offsets fit in 31 bits");
                self.index.update_atomic(fab.nvm_mut(), addr, w.pack())?;
                fab.nvm_mut().account(ERDA_META_UPDATE);
                Ok(())
            }
            None => {
                let epoch = self.heads[head as usize].control.epoch;
                let w = AtomicRegion {
                    new_tag: true,
                    offset_a: off,
                    offset_b: off,
                    reserved: epoch,
                };
                match self.index.insert(fab.nvm_mut(), &key, head, w.pack()) {
                    Ok(_) => {
                        fab.nvm_mut().account(key.len() as u64 + ERDA_META_CREATE);
                        Ok(())
                    }
                    Err(IndexError::TableFull) => Err(()),
                    Err(e) => return Err(e.into()),
                }
            }
        };
        fab.charge_nvm_write();
        match published {
            Ok(()) => {
                self.stats.reservations += 1;
                Self::write_resp(fab, to, wire::ST_OK, head, off);
                self.maybe_start_cleaning(fab, head);
            }
            Err(()) => Self::write_resp(fab, to, wire::ST_FULL, head, 0),
        }
        Ok(())
    }

    /// WRITE_OBJ: the server writes the object itself. Clients use this for
    /// heads under cleaning.
    fn handle_write_obj(
        &mut self,
        fab: &mut Fabric,
        c: &Completion,
        op: u8,
        r: &mut Reader<'_>,
    ) -> Result<(), ErdaError> {
        let to = self.reply_to(c);
        let key = r.key()?.to_vec();
        let obj = r.rest().to_vec();
        let head = head_of(&key, self.cfg.heads);
        let ok = matches!(verify_object(&obj), Some(rec) if rec.key == key && rec.is_delete() == (op == wire::OP_DELETE))
            && obj.len()
                == object_len(
                    key.len(),
                    obj.len().saturating_sub(OBJECT_HEADER_LEN + key.len()),
                )
            && obj.len() <= self.cfg.max_object_size as usize;
        if key.len() > MAX_INLINE_KEY || !ok {
            Self::write_resp(fab, to, wire::ST_BAD_REQUEST, head, 0);
            return Ok(());
        }
        let (status, off) = self.write_direct(fab, head, &key, &obj)?;
        Self::write_resp(fab, to, status, head, off);
        if status == wire::ST_OK {
            self.maybe_start_cleaning(fab, head);
        }
        Ok(())
    }

    pub(crate) fn write_direct(
        &mut self,
        fab: &mut Fabric,
        head: u8,
        key: &[u8],
        obj: &[u8],
    ) -> Result<(u8, u32), ErdaError> {
        let is_delete = obj[0] & 1 == 1;
        let entry = self.index.lookup(fab.nvm(), key)?;
        let phase = self
            .cleaning
            .as_ref()
            .filter(|s| s.head == head)
            .map(|s| s.phase);
        let live = match &entry {
            None => false,
            Some((_, e)) => match phase {
                Some(_) => self.serve_read(fab.nvm(), key)?.0 == wire::ST_OK,
                None => !self.latest_is_marker(fab.nvm(), head, e),
            },
        };
        if is_delete && !live {
            return Ok((wire::ST_NOT_FOUND, 0));
        }
        let size = obj.len() as u32;
        let epoch = self.heads[head as usize].control.epoch;
        let placed = match phase {
            Some(CleanPhase::Replicating) => {
                let mut session = self.cleaning.take().expect("phase implies a session");
                let b = session.r2_b;
                let res = self.reserve_in(fab, head, b, &mut session.r2, size);
                let res = res.map(|off| {
                    let addr = self
                        .layout
                        .chain_addr(&session.r2.regions, off)
                        .expect("reserved inside chain");
                    session.r2_of.insert(key.to_vec(), off);
                    (off, addr)
                });
                self.cleaning = Some(session);
                res
            }
            _ => self.reserve_active(fab, head, size).map(|off| {
                let addr = self.chain_addr(head, off).expect("reserved inside chain");
                (off, addr)
            }),
        };
        let (off, addr) = match placed {
            Ok(p) => p,
            Err(ErdaError::LogFull | ErdaError::PoolExhausted) => return Ok((wire::ST_FULL, 0)),
            Err(e) => return Err(e),
        };
        fab.nvm_mut().store(addr, obj, false)?;
        fab.nvm_mut().persist(addr, obj.len());
        fab.nvm_mut()
            .account(OBJECT_OVERHEAD + (obj.len() - OBJECT_HEADER_LEN) as u64);
        fab.charge_nvm_write();
        let word = match (&entry, phase) {
            (Some((_, e)), None | Some(CleanPhase::Quiescing { .. })) => {
                unpack_atomic(e.word).flipped_with(off)
            }
            (Some((_, e)), Some(CleanPhase::Merging)) => unpack_atomic(e.word).with_new_slot(off),
            (Some((_, e)), Some(CleanPhase::Replicating)) => {
                unpack_atomic(e.word).with_old_slot(off)
            }
            (Some(_), Some(CleanPhase::Finishing)) | (None, _) => Ok(AtomicRegion {
                new_tag: true,
                offset_a: off,
                offset_b: off,
                reserved: epoch,
            }),
        }
        .expect("chain offsets fit in 31 bits");
        match entry {
            Some((eaddr, _)) => {
                self.index
                    .update_atomic(fab.nvm_mut(), eaddr, word.pack())?;
                fab.nvm_mut().account(ERDA_META_UPDATE);
            }
            None => match self.index.insert(fab.nvm_mut(), key, head, word.pack()) {
                Ok(_) => fab.nvm_mut().account(key.len() as u64 + ERDA_META_CREATE),
                Err(IndexError::TableFull) => return Ok((wire::ST_FULL, 0)),
                Err(e) => return Err(e.into()),
            },
        }
        fab.charge_nvm_write();
        self.stats.direct_writes += 1;
        Ok((wire::ST_OK, off))
    }

    /// Server-side read, aware of the cleaning phase of the key's head.
    /// Returns (status, value).
    pub(crate) fn serve_read(
        &self,
        dev: &NvmDevice,
        key: &[u8],
    ) -> Result<(u8, Vec<u8>), ErdaError> {
        let Some((_, e)) = self.index.lookup(dev, key)? else {
            return Ok((wire::ST_NOT_FOUND, Vec::new()));
        };
        let head = e.head_id;
        let a = unpack_atomic(e.word);
        let active = &self.heads[head as usize].chain.regions;
        let from = |chain: &[u32], off: u32| self.record_at(dev, chain, off, key);
        let found = match self.cleaning.as_ref().filter(|s| s.head == head) {
            None
            | Some(CleaningSession {
                phase: CleanPhase::Quiescing { .. },
                ..
            }) => match from(active, a.new_offset()) {
                Some(r) => Some(r),
                None if a.old_offset() == a.new_offset() => {
                    return Ok((wire::ST_NOT_FOUND, Vec::new()))
                }
                None => from(active, a.old_offset()),
            },
            Some(CleaningSession {
                phase: CleanPhase::Merging,
                ..
            }) => from(active, a.new_offset()),
            Some(
                s @ CleaningSession {
                    phase: CleanPhase::Replicating,
                    ..
                },
            ) => match s.r2_of.get(key) {
                Some(&o) if o >= s.reserved_end => from(&s.r2.regions, o),
                _ => from(active, a.new_offset()),
            },
            Some(
                s @ CleaningSession {
                    phase: CleanPhase::Finishing,
                    ..
                },
            ) => {
                if a.reserved == self.heads[head as usize].control.epoch {
                    from(active, a.new_offset())
                } else {
                    match s.r2_of.get(key) {
                        Some(&o) => from(active, o),
                        None => return Ok((wire::ST_NOT_FOUND, Vec::new())),
                    }
                }
            }
        };
        Ok(match found {
            Some(ObjectRecord { value: Some(v), .. }) => (wire::ST_OK, v),
            Some(_) => (wire::ST_NOT_FOUND, Vec::new()),
            None => (wire::ST_DATA_LOSS, Vec::new()),
        })
    }

    fn handle_read(
        &mut self,
        fab: &mut Fabric,
        c: &Completion,
        r: &mut Reader<'_>,
    ) -> Result<(), ErdaError> {
        let key = r.key()?.to_vec();
        let (status, value) = self.serve_read(fab.nvm(), &key)?;
        self.stats.served_reads += 1;
        let msg = Writer::new()
            .u8(status)
            .u32(value.len() as u32)
            .bytes(&value)
            .finish();
        fab.post_send(SERVER, self.reply_to(c), msg);
        Ok(())
    }

    /// REPAIR_REQ: point both slots at the old version, unless the word moved
    /// on, the new version turned out fine, or its writer may still be busy.
    fn handle_repair(&mut self, fab: &mut Fabric, r: &mut Reader<'_>) -> Result<(), ErdaError> {
        let key = r.key()?.to_vec();
        let observed = r.u64()?;
        let Some((addr, e)) = self.index.lookup(fab.nvm(), &key)? else {
            self.stats.repairs_skipped += 1;
            return Ok(());
        };
        let head = e.head_id;
        let a = unpack_atomic(e.word);
        let chain = &self.heads[head as usize].chain;
        let young = chain
            .records
            .get(&a.new_offset())
            .is_some_and(|info| fab.now() < info.reserved_at + self.lease_ns);
        let stale = e.word != observed
            || self.cleaning_head() == Some(head)
            || young
            || self
                .record_at(fab.nvm(), &chain.regions, a.new_offset(), &key)
                .is_some()
            || self
                .record_at(fab.nvm(), &chain.regions, a.old_offset(), &key)
                .is_none();
        if stale {
            self.stats.repairs_skipped += 1;
            return Ok(());
        }
        let w = AtomicRegion {
            offset_a: a.old_offset(),
            offset_b: a.old_offset(),
            ..a
        };
        self.index.update_atomic(fab.nvm_mut(), addr, w.pack())?;
        fab.charge_nvm_write();
        self.stats.repairs_applied += 1;
        Ok(())
    }

    fn dispatch(&mut self, fab: &mut Fabric, c: &Completion) -> Result<(), ErdaError> {
        let mut r = Reader::new(&c.payload);
        match r.u8()? {
            wire::OP_CONNECT => {
                self.handle_connect(fab, c.from);
                Ok(())
            }
            op @ (wire::OP_PUT | wire::OP_DELETE) => self.handle_write_req(fab, c, op, &mut r),
            wire::OP_READ => self.handle_read(fab, c, &mut r),
            wire::OP_WRITE_OBJ => {
                let op = r.u8()?;
                self.handle_write_obj(fab, c, op, &mut r)
            }
            wire::OP_REPAIR => self.handle_repair(fab, &mut r),
            _ => {
                fab.post_send(SERVER, self.reply_to(c), vec![wire::ST_BAD_REQUEST]);
                Ok(())
            }
        }
    }

    pub(crate) fn maybe_start_cleaning(&mut self, fab: &mut Fabric, head: u8) {
        if self.cfg.auto_clean
            && self.cleaning.is_none()
            && self.occupancy(head) >= self.cfg.clean_threshold
        {
            // A failed start (no spare region) simply leaves the head as is.
            let _ = self.start_cleaning(fab, head);
        }
    }

    pub(crate) fn push_clean_stats(&mut self, stats: CleanStats) {
        self.stats.cleanings.push(stats);
    }
}

impl ServerLogic for ErdaServer {
    fn on_completion(&mut self, fab: &mut Fabric, c: Completion) {
        if let Err(e) = self.dispatch(fab, &c) {
            // Malformed requests get a bad-request status; device errors here
            // mean a bug in the layout, which tests must surface.
            match e {
                ErdaError::Wire(_) => {
                    fab.post_send(SERVER, self.reply_to(&c), vec![wire::ST_BAD_REQUEST]);
                }
                other => panic!("server failed handling a request: {other}"),
            }
        }
    }

    fn on_background(&mut self, fab: &mut Fabric) {
        if let Err(e) = self.clean_step(fab) {
            panic!("cleaner failed: {e}");
        }
    }

    fn wants_background(&self, fab: &Fabric) -> bool {
        self.cleaning.as_ref().is_some_and(|s| s.ready(fab.now()))
    }

    fn as_any(&self) -> &dyn Any {
        self
    }

    fn as_any_mut(&mut self) -> &mut dyn Any {
        self
    }
}
