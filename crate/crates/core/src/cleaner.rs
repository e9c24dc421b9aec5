//! Log cleaning for one head at a time.
//!
//! Cleaning copies the live records of a head's chain (R1) into a fresh chain
//! (R2) and then swaps the two. It runs in the server's background CPU slots:
//!
//! 1. quiesce: clients are told the head is cleaning and switch to two-sided
//!    writes; the cleaner waits until every one-sided write already granted
//!    has landed, then points entries with unreadable new versions back at
//!    readable ones.
//! 2. merge: the latest record of each key below the snapshot is copied to R2
//!    and the entry's non-tag slot is pointed at the copy.
//! 3. replicate: records written after the snapshot are copied in order into
//!    a range of R2 reserved up front; writes arriving meanwhile go to R2
//!    after that range.
//! 4. finish: the control word swaps the chains and flips the epoch in one
//!    atomic store, entries are rewritten to their R2 copies, and R1 goes
//!    back to the pool.
//!
//! The phase is kept in the head's control word so recovery can roll an
//! interrupted cleaning back (merge, replicate) or forward (finish).

use std::collections::{HashMap, HashSet, VecDeque};

use serde::Serialize;

use crate::codec::{unpack_atomic, verify_object, AtomicRegion, ObjectRecord};
use crate::erda::{Chain, EntryFix, ErdaError, ErdaServer, Phase};
use crate::fabric::Fabric;
use crate::nvm::NvmDevice;
use crate::wire::{self, Writer};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum CleanPhase {
    Quiescing { until: u64 },
    Merging,
    Replicating,
    Finishing,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct CleanStats {
    pub head: u8,
    pub started_at: u64,
    pub merge_started_at: u64,
    pub replicate_started_at: u64,
    pub finished_at: u64,
    pub snapshot: u32,
    pub reserved_end: u32,
    pub r1_regions: u32,
    pub r2_regions: u32,
    /// Bytes of records handed out below the snapshot.
    pub pre_snapshot_bytes: u64,
    pub pre_snapshot_records: u64,
    pub merged_bytes: u64,
    pub merged_records: u64,
    pub replicated_bytes: u64,
    pub replicated_records: u64,
    /// Post-snapshot records skipped because a newer direct write exists in R2.
    pub skipped_replicas: u64,
    /// Entries with no live version left, dropped at the swap.
    pub removed_entries: u64,
    /// Entries pointed back at a readable version before merging.
    pub sanitized_entries: u64,
}

impl CleanStats {
    /// Pre-snapshot bytes that were not carried over.
    pub fn reclaimed_bytes(&self) -> u64 {
        self.pre_snapshot_bytes - self.merged_bytes
    }
}

pub struct CleaningSession {
    pub head: u8,
    pub phase: CleanPhase,
    /// Chain array R2 lives in.
    pub(crate) r2_b: bool,
    pub(crate) r2: Chain,
    pub(crate) r1: Chain,
    pub(crate) snapshot: u32,
    pub(crate) reserved_end: u32,
    /// Latest R2 copy of each key.
    pub(crate) r2_of: HashMap<Vec<u8>, u32>,
    merge_queue: Vec<(u32, u32)>,
    merged_keys: HashSet<Vec<u8>>,
    repl_queue: VecDeque<(u32, u32, u32)>,
    finish_queue: VecDeque<Vec<u8>>,
    pub(crate) stats: CleanStats,
}

impl CleaningSession {
    pub(crate) fn ready(&self, now: u64) -> bool {
        match self.phase {
            CleanPhase::Quiescing { until } => now >= until,
            _ => true,
        }
    }
}

fn read_exact(
    server: &ErdaServer,
    dev: &NvmDevice,
    chain: &[u32],
    off: u32,
    len: u32,
) -> Option<ObjectRecord> {
    let addr = server.layout.chain_addr(chain, off)?;
    verify_object(&dev.read(addr, len as usize).ok()?)
}

impl ErdaServer {
    /// Begin cleaning `head`. Rejected while another head is cleaning or when
    /// the head is below the cleaning threshold.
    pub fn start_cleaning(&mut self, fab: &mut Fabric, head: u8) -> Result<(), ErdaError> {
        if head >= self.cfg.heads {
            return Err(ErdaError::CleaningRejected(format!("no head {head}")));
        }
        if let Some(h) = self.cleaning_head() {
            return Err(ErdaError::CleaningRejected(format!(
                "head {h} is already cleaning"
            )));
        }
        let occ = self.occupancy(head);
        if occ < self.cfg.clean_threshold {
            return Err(ErdaError::CleaningRejected(format!(
                "head {head} is {:.1}% full, below the {:.1}% threshold",
                occ * 100.0,
                self.cfg.clean_threshold * 100.0
            )));
        }
        let r2_b = !self.heads[head as usize].control.active_b;
        let mut r2 = Chain::default();
        self.link_region(fab, head, r2_b, &mut r2)?;
        let chain = &self.heads[head as usize].chain;
        let snapshot = chain.last_written;
        let pre: Vec<u32> = chain
            .records
            .range(..snapshot)
            .map(|(_, r)| r.len)
            .collect();
        let until = fab.now() + self.quiesce_ns;
        let stats = CleanStats {
            head,
            started_at: fab.now(),
            snapshot,
            r1_regions: chain.regions.len() as u32,
            pre_snapshot_bytes: pre.iter().map(|&l| l as u64).sum(),
            pre_snapshot_records: pre.len() as u64,
            ..CleanStats::default()
        };
        self.cleaning = Some(CleaningSession {
            head,
            phase: CleanPhase::Quiescing { until },
            r2_b,
            r2,
            r1: Chain::default(),
            snapshot,
            reserved_end: 0,
            r2_of: HashMap::new(),
            merge_queue: Vec::new(),
            merged_keys: HashSet::new(),
            repl_queue: VecDeque::new(),
            finish_queue: VecDeque::new(),
            stats,
        });
        self.notify_all(fab, vec![wire::NOTE_CLEAN_START, head]);
        fab.wake_server_after(self.quiesce_ns);
        Ok(())
    }

    /// One background slice of cleaning work.
    pub(crate) fn clean_step(&mut self, fab: &mut Fabric) -> Result<(), ErdaError> {
        let Some(mut s) = self.cleaning.take() else {
            return Ok(());
        };
        if !s.ready(fab.now()) {
            self.cleaning = Some(s);
            return Ok(());
        }
        let done = match s.phase {
            CleanPhase::Quiescing { .. } => self.begin_merge(fab, &mut s).map(|_| false),
            CleanPhase::Merging => self.merge_some(fab, &mut s).map(|_| false),
            CleanPhase::Replicating => self.replicate_some(fab, &mut s).map(|_| false),
            CleanPhase::Finishing => self.finish_some(fab, &mut s),
        };
        match done {
            Ok(true) => self.complete(fab, s),
            Ok(false) => {
                self.cleaning = Some(s);
                Ok(())
            }
            Err(e) => {
                self.cleaning = Some(s);
                Err(e)
            }
        }
    }

    fn begin_merge(&mut self, fab: &mut Fabric, s: &mut CleaningSession) -> Result<(), ErdaError> {
        let head = s.head;
        for (addr, e) in self.head_entries(fab.nvm(), head)? {
            if self.fix_entry(fab, head, addr, &e)? != EntryFix::Intact {
                s.stats.sanitized_entries += 1;
                fab.charge_nvm_write();
            }
        }
        self.heads[head as usize].control.phase = Phase::Merging;
        self.write_control(fab, head)?;
        fab.charge_nvm_write();
        let chain = &self.heads[head as usize].chain;
        s.merge_queue = chain
            .records
            .range(..s.snapshot)
            .map(|(&o, r)| (o, r.len))
            .collect();
        s.phase = CleanPhase::Merging;
        s.stats.merge_started_at = fab.now();
        Ok(())
    }

    /// Copy `obj` to the next free spot of R2 and return its offset.
    fn copy_to_r2(
        &mut self,
        fab: &mut Fabric,
        s: &mut CleaningSession,
        obj: &[u8],
    ) -> Result<u32, ErdaError> {
        let off = self.reserve_in(fab, s.head, s.r2_b, &mut s.r2, obj.len() as u32)?;
        self.store_r2(fab, s, off, obj)?;
        Ok(off)
    }

    fn store_r2(
        &self,
        fab: &mut Fabric,
        s: &CleaningSession,
        off: u32,
        obj: &[u8],
    ) -> Result<(), ErdaError> {
        let addr = self
            .layout
            .chain_addr(&s.r2.regions, off)
            .expect("reserved inside R2");
        fab.nvm_mut().store(addr, obj, false)?;
        fab.nvm_mut().persist(addr, obj.len());
        fab.charge_nvm_write();
        Ok(())
    }

    fn set_non_tag_slot(&self, fab: &mut Fabric, key: &[u8], off: u32) -> Result<(), ErdaError> {
        if let Some((addr, e)) = self.index.lookup(fab.nvm(), key)? {
            let w = unpack_atomic(e.word)
                .with_old_slot(off)
                .expect("chain offsets fit in 31 bits");
            self.index.update_atomic(fab.nvm_mut(), addr, w.pack())?;
        }
        Ok(())
    }

    fn merge_some(&mut self, fab: &mut Fabric, s: &mut CleaningSession) -> Result<(), ErdaError> {
        let head = s.head as usize;
        for _ in 0..self.cfg.clean_batch {
            let Some((off, len)) = s.merge_queue.pop() else {
                return self.begin_replicate(fab, s);
            };
            let Some(rec) = read_exact(self, fab.nvm(), &self.heads[head].chain.regions, off, len)
            else {
                continue;
            };
            if !s.merged_keys.insert(rec.key.clone()) || rec.is_delete() {
                continue;
            }
            if self.index.lookup(fab.nvm(), &rec.key)?.is_none() {
                continue;
            }
            let obj = fab.nvm().read(
                self.layout
                    .chain_addr(&self.heads[head].chain.regions, off)
                    .unwrap(),
                len as usize,
            )?;
            let dst = self.copy_to_r2(fab, s, &obj)?;
            self.set_non_tag_slot(fab, &rec.key, dst)?;
            s.r2_of.insert(rec.key, dst);
            s.stats.merged_bytes += len as u64;
            s.stats.merged_records += 1;
        }
        Ok(())
    }

    fn begin_replicate(
        &mut self,
        fab: &mut Fabric,
        s: &mut CleaningSession,
    ) -> Result<(), ErdaError> {
        let head = s.head;
        let post: Vec<(u32, u32)> = self.heads[head as usize]
            .chain
            .records
            .range(s.snapshot..)
            .map(|(&o, r)| (o, r.len))
            .collect();
        for (src, len) in post {
            let dst = self.reserve_in(fab, head, s.r2_b, &mut s.r2, len)?;
            s.repl_queue.push_back((src, len, dst));
        }
        s.reserved_end = s.r2.last_written;
        let addr = self.layout.reserved_end_addr(head);
        fab.nvm_mut().store_word(addr, s.reserved_end as u64)?;
        fab.nvm_mut().persist(addr, 8);
        self.heads[head as usize].control.phase = Phase::Replicating;
        self.write_control(fab, head)?;
        fab.charge_nvm_write();
        s.phase = CleanPhase::Replicating;
        s.stats.reserved_end = s.reserved_end;
        s.stats.replicate_started_at = fab.now();
        Ok(())
    }

    fn replicate_some(
        &mut self,
        fab: &mut Fabric,
        s: &mut CleaningSession,
    ) -> Result<(), ErdaError> {
        let head = s.head as usize;
        for _ in 0..self.cfg.clean_batch {
            let Some((src, len, dst)) = s.repl_queue.pop_front() else {
                return self.begin_finish(fab, s);
            };
            let r1 = &self.heads[head].chain.regions;
            let rec = read_exact(self, fab.nvm(), r1, src, len);
            let newer = rec
                .as_ref()
                .and_then(|r| s.r2_of.get(&r.key))
                .is_some_and(|&o| o >= s.reserved_end);
            let live = match &rec {
                Some(r) => self.index.lookup(fab.nvm(), &r.key)?.is_some(),
                None => false,
            };
            if rec.is_none() || newer || !live {
                s.r2.records.remove(&dst);
                if newer {
                    s.stats.skipped_replicas += 1;
                }
                continue;
            }
            let rec = rec.unwrap();
            let obj = fab
                .nvm()
                .read(self.layout.chain_addr(r1, src).unwrap(), len as usize)?;
            self.store_r2(fab, s, dst, &obj)?;
            self.set_non_tag_slot(fab, &rec.key, dst)?;
            s.r2_of.insert(rec.key, dst);
            s.stats.replicated_bytes += len as u64;
            s.stats.replicated_records += 1;
        }
        Ok(())
    }

    fn begin_finish(&mut self, fab: &mut Fabric, s: &mut CleaningSession) -> Result<(), ErdaError> {
        let head = s.head;
        let hs = &mut self.heads[head as usize];
        hs.control.active_b = s.r2_b;
        hs.control.epoch = !hs.control.epoch;
        hs.control.phase = Phase::Finishing;
        hs.control.generation += 1;
        hs.control.set_len(s.r2_b, s.r2.regions.len() as u16);
        s.r1 = std::mem::replace(&mut hs.chain, std::mem::take(&mut s.r2));
        self.write_control(fab, head)?;
        fab.charge_nvm_write();
        s.finish_queue = self
            .head_entries(fab.nvm(), head)?
            .into_iter()
            .map(|(_, e)| e.key)
            .collect();
        s.phase = CleanPhase::Finishing;
        Ok(())
    }

    /// Rewrite a batch of entries to their R2 copies. Returns true when all are done.
    fn finish_some(
        &mut self,
        fab: &mut Fabric,
        s: &mut CleaningSession,
    ) -> Result<bool, ErdaError> {
        let head = s.head as usize;
        let epoch = self.heads[head].control.epoch;
        for _ in 0..self.cfg.clean_batch {
            let Some(key) = s.finish_queue.pop_front() else {
                return Ok(true);
            };
            let Some((addr, e)) = self.index.lookup(fab.nvm(), &key)? else {
                continue;
            };
            let a = unpack_atomic(e.word);
            if a.reserved == epoch {
                continue;
            }
            let chain = &self.heads[head].chain.regions;
            let live = s.r2_of.get(&key).copied().filter(
                |&o| matches!(self.record_at(fab.nvm(), chain, o, &key), Some(r) if !r.is_delete()),
            );
            match live {
                Some(o) => {
                    let w = AtomicRegion {
                        new_tag: true,
                        offset_a: o,
                        offset_b: o,
                        reserved: epoch,
                    };
                    self.index.update_atomic(fab.nvm_mut(), addr, w.pack())?;
                }
                None => {
                    self.index.remove(fab.nvm_mut(), &key)?;
                    s.stats.removed_entries += 1;
                }
            }
            fab.charge_nvm_write();
        }
        Ok(s.finish_queue.is_empty())
    }

    fn complete(&mut self, fab: &mut Fabric, mut s: CleaningSession) -> Result<(), ErdaError> {
        let head = s.head;
        let r1_b = !s.r2_b;
        let hs = &mut self.heads[head as usize];
        hs.control.phase = Phase::Normal;
        hs.control.set_len(r1_b, 0);
        self.write_control(fab, head)?;
        for id in std::mem::take(&mut s.r1.regions) {
            self.release_region(fab, id);
        }
        s.stats.finished_at = fab.now();
        s.stats.r2_regions = self.heads[head as usize].chain.regions.len() as u32;
        self.push_clean_stats(s.stats);
        let b = self.heads[head as usize].control.active_b;
        while self.occupancy(head) >= self.cfg.clean_threshold {
            let mut chain = std::mem::take(&mut self.heads[head as usize].chain);
            let linked = self.link_region(fab, head, b, &mut chain);
            self.heads[head as usize].chain = chain;
            if linked.is_err() {
                break;
            }
        }
        let note = Writer::new()
            .u8(wire::NOTE_CLEAN_FINISH)
            .u8(head)
            .bytes(&self.head_view(head))
            .finish();
        self.notify_all(fab, note);
        Ok(())
    }
}
