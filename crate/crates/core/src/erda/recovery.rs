use serde::Serialize;

use super::server::{Chain, EntryFix, ErdaServer, HeadState, RecordInfo};
use super::{ErdaConfig, ErdaError, HeadControl, Layout, Phase};
use crate::codec::{
    peek_object_len, unpack_atomic, verify_object, AtomicRegion, OBJECT_HEADER_LEN,
};
use crate::fabric::Fabric;

/// What recovery found and changed.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct RecoveryReport {
    /// Index slots cleaned of half-finished inserts or removals.
    pub index_fixes: usize,
    /// Keys whose new version was torn, now pointing at the old one.
    pub repaired: Vec<Vec<u8>>,
    /// Keys whose first version never became durable.
    pub removed: Vec<Vec<u8>>,
    /// Keys whose two latest versions were both unreadable.
    pub rolled_back: Vec<Vec<u8>>,
    /// Keys with no durable version left at all.
    pub lost: Vec<Vec<u8>>,
    /// Heads whose interrupted cleaning was undone.
    pub cleaning_undone: Vec<u8>,
    /// Heads whose interrupted cleaning was carried to completion.
    pub cleaning_completed: Vec<u8>,
    pub last_written: Vec<u32>,
}

impl ErdaServer {
    /// Rebuild a server from the fabric's device after a crash.
    pub fn recover(fab: &mut Fabric) -> Result<(ErdaServer, RecoveryReport), ErdaError> {
        let sb = fab.nvm().read(0, 64)?;
        let cfg = ErdaConfig::decode(&sb)?;
        let layout = Layout::new(&cfg);
        if fab.nvm().capacity() < layout.capacity() {
            return Err(ErdaError::BadImage(
                "device is smaller than its layout".into(),
            ));
        }
        let mut report = RecoveryReport::default();
        let mut server = ErdaServer::bare(fab, cfg, layout);
        report.index_fixes = server.index.recover(fab.nvm_mut())?;
        for h in 0..server.cfg.heads {
            let control = HeadControl::unpack(fab.nvm().read_word(layout.head_addr(h))?);
            let regions =
                server.read_chain(fab, h, control.active_b, control.len(control.active_b))?;
            for &id in &regions {
                server.free.remove(&id);
            }
            // An interrupted cleaning's R2 stays out of the pool until it is resolved.
            if control.phase != Phase::Normal {
                let b = !control.active_b;
                for id in server.read_chain(fab, h, b, control.len(b))? {
                    server.free.remove(&id);
                }
            }
            let chain = server.scan_chain(fab, &regions)?;
            server.heads.push(HeadState { control, chain });
        }
        for h in 0..server.cfg.heads {
            let ids = server.heads[h as usize].chain.regions.clone();
            for id in ids {
                server.register_region(fab, id);
            }
        }
        for h in 0..server.cfg.heads {
            server.add_referenced_records(fab, h)?;
            match server.heads[h as usize].control.phase {
                Phase::Normal => {}
                Phase::Merging => {
                    server.undo_merge(fab, h)?;
                    report.cleaning_undone.push(h);
                }
                Phase::Replicating => {
                    server.undo_replicate(fab, h)?;
                    report.cleaning_undone.push(h);
                }
                Phase::Finishing => {
                    server.redo_finish(fab, h)?;
                    report.cleaning_completed.push(h);
                }
            }
            let control = server.heads[h as usize].control;
            let inactive = !control.active_b;
            if control.phase != Phase::Normal {
                for id in server.read_chain(fab, h, inactive, control.len(inactive))? {
                    server.free.insert(id);
                }
            }
            server.heads[h as usize].control.phase = Phase::Normal;
            server.heads[h as usize].control.set_len(inactive, 0);
            server.write_control(fab, h)?;
        }
        for h in 0..server.cfg.heads {
            for (addr, e) in server.head_entries(fab.nvm(), h)? {
                let list = match server.fix_entry(fab, h, addr, &e)? {
                    EntryFix::Intact => continue,
                    EntryFix::Repaired => &mut report.repaired,
                    EntryFix::Removed => &mut report.removed,
                    EntryFix::RolledBack => &mut report.rolled_back,
                    EntryFix::Lost => &mut report.lost,
                };
                list.push(e.key);
            }
            report
                .last_written
                .push(server.heads[h as usize].chain.last_written);
        }
        Ok((server, report))
    }

    fn read_chain(&self, fab: &Fabric, head: u8, b: bool, len: u16) -> Result<Vec<u32>, ErdaError> {
        (0..len as u32)
            .map(|i| {
                let raw = fab.nvm().read(self.layout.chain_slot_addr(head, b, i), 4)?;
                let id = u32::from_le_bytes(raw.try_into().unwrap());
                if id >= self.cfg.pool_regions {
                    return Err(ErdaError::BadImage(format!(
                        "head {head} links region {id} outside the pool"
                    )));
                }
                Ok(id)
            })
            .collect()
    }

    /// Parse each segment of a chain front to back, stopping a segment at the
    /// first empty or unreadable header.
    fn scan_chain(&self, fab: &Fabric, regions: &[u32]) -> Result<Chain, ErdaError> {
        let seg = self.cfg.segment_size as usize;
        let mut chain = Chain {
            regions: regions.to_vec(),
            ..Chain::default()
        };
        for (ri, &id) in regions.iter().enumerate() {
            let base = self.layout.region_addr(id);
            for s in 0..(self.cfg.region_size as usize / seg) {
                let bytes = fab.nvm().read(base + (s * seg) as u64, seg)?;
                let mut p = 0;
                while p + OBJECT_HEADER_LEN <= seg {
                    let Some(len) = peek_object_len(&bytes[p..]) else {
                        break;
                    };
                    if p + len > seg || verify_object(&bytes[p..p + len]).is_none() {
                        break;
                    }
                    let off = (ri as u64 * self.cfg.region_size) as u32 + (s * seg + p) as u32;
                    chain.records.insert(
                        off,
                        RecordInfo {
                            len: len as u32,
                            reserved_at: 0,
                        },
                    );
                    p += len;
                }
            }
        }
        Ok(chain)
    }

    /// Records that entries point at but the scan stopped short of, e.g.
    /// after a torn record in the same segment.
    /// Also moves the head's write frontier past every known record.
    fn add_referenced_records(&mut self, fab: &Fabric, head: u8) -> Result<(), ErdaError> {
        for (_, e) in self.head_entries(fab.nvm(), head)? {
            let a = unpack_atomic(e.word);
            for off in [a.new_offset(), a.old_offset()] {
                let regions = &self.heads[head as usize].chain.regions;
                if let Some(rec) = self.record_at(fab.nvm(), regions, off, &e.key) {
                    let len = rec.encoded_len() as u32;
                    self.heads[head as usize].chain.records.insert(
                        off,
                        RecordInfo {
                            len,
                            reserved_at: 0,
                        },
                    );
                }
            }
        }
        let chain = &mut self.heads[head as usize].chain;
        chain.last_written = chain
            .records
            .iter()
            .map(|(&o, r)| o + r.len)
            .max()
            .unwrap_or(0);
        Ok(())
    }

    /// Crash while merging: R2 copies are only referenced by non-tag slots,
    /// which go back to mirroring the tag slot.
    fn undo_merge(&mut self, fab: &mut Fabric, head: u8) -> Result<(), ErdaError> {
        for (addr, e) in self.head_entries(fab.nvm(), head)? {
            let a = unpack_atomic(e.word);
            let w = AtomicRegion {
                offset_a: a.new_offset(),
                offset_b: a.new_offset(),
                ..a
            };
            if w != a {
                self.index.update_atomic(fab.nvm_mut(), addr, w.pack())?;
            }
        }
        Ok(())
    }

    /// Crash while replicating: writes that went straight to R2 past the
    /// replication bound are the newest versions of their keys, so they are
    /// copied back into R1. Everything else reverts to the R1 tag slot.
    fn undo_replicate(&mut self, fab: &mut Fabric, head: u8) -> Result<(), ErdaError> {
        let control = self.heads[head as usize].control;
        let r2_b = !control.active_b;
        let r2 = self.read_chain(fab, head, r2_b, control.len(r2_b))?;
        let reserved_end = fab.nvm().read_word(self.layout.reserved_end_addr(head))? as u32;
        for (addr, e) in self.head_entries(fab.nvm(), head)? {
            let a = unpack_atomic(e.word);
            let direct = (a.old_offset() >= reserved_end)
                .then(|| self.layout.chain_addr(&r2, a.old_offset()))
                .flatten()
                .and_then(|at| {
                    let len =
                        (self.cfg.segment_size - a.old_offset() as u64 % self.cfg.segment_size)
                            .min(self.cfg.max_object_size as u64) as usize;
                    let bytes = fab.nvm().read(at, len).ok()?;
                    let rec = verify_object(&bytes).filter(|r| r.key == e.key)?;
                    Some(bytes[..rec.encoded_len()].to_vec())
                });
            let w = match direct {
                Some(obj) => {
                    let off = self.reserve_active(fab, head, obj.len() as u32)?;
                    let at = self.chain_addr(head, off).expect("reserved inside chain");
                    fab.nvm_mut().store(at, &obj, false)?;
                    fab.nvm_mut().persist(at, obj.len());
                    AtomicRegion {
                        offset_a: off,
                        offset_b: off,
                        ..a
                    }
                }
                None => AtomicRegion {
                    offset_a: a.new_offset(),
                    offset_b: a.new_offset(),
                    ..a
                },
            };
            if w != a {
                self.index.update_atomic(fab.nvm_mut(), addr, w.pack())?;
            }
        }
        Ok(())
    }

    /// Crash after the chain swap: finish rewriting entries to their R2
    /// copies, which the non-tag slot of every unconverted entry names.
    fn redo_finish(&mut self, fab: &mut Fabric, head: u8) -> Result<(), ErdaError> {
        let epoch = self.heads[head as usize].control.epoch;
        for (addr, e) in self.head_entries(fab.nvm(), head)? {
            let a = unpack_atomic(e.word);
            if a.reserved == epoch {
                continue;
            }
            let regions = &self.heads[head as usize].chain.regions;
            match self.record_at(fab.nvm(), regions, a.old_offset(), &e.key) {
                Some(r) if !r.is_delete() => {
                    let o = a.old_offset();
                    let w = AtomicRegion {
                        new_tag: true,
                        offset_a: o,
                        offset_b: o,
                        reserved: epoch,
                    };
                    self.index.update_atomic(fab.nvm_mut(), addr, w.pack())?;
                }
                _ => {
                    self.index.remove(fab.nvm_mut(), &e.key)?;
                }
            }
        }
        Ok(())
    }
}
