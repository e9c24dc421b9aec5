//! Simulated byte-addressable non-volatile memory.
//!
//! The device keeps a durable image plus an ordered list of stores that have
//! been issued but not yet persisted. Reads see both; a crash keeps the durable
//! image and whatever subset of the pending stores the crash plan selects.
//! Aligned 8-byte stores issued with `atomic8` are all-or-nothing; bulk stores
//! tear at persistence-unit granularity (cache lines by default).

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Default persistence unit for bulk stores.
pub const DEFAULT_PERSIST_UNIT: usize = 64;
/// Additive write latency applied per NVM write batch.
pub const DEFAULT_EXTRA_WRITE_LATENCY_NS: u64 = 150;

const DUMP_MAGIC: &[u8; 8] = b"ERDANVM1";
const DUMP_HEADER_LEN: usize = 16;

#[derive(Debug, Error)]
pub enum NvmError {
    #[error("access [{addr}, {addr}+{len}) outside device of {capacity} bytes")]
    OutOfBounds {
        addr: u64,
        len: usize,
        capacity: u64,
    },
    #[error("atomic store must be 8 bytes at an 8-byte aligned address (addr {addr}, len {len})")]
    Misaligned { addr: u64, len: usize },
    #[error("bad image: {0}")]
    BadImage(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CrashMode {
    /// Each interrupted bulk store persists a contiguous prefix of itself.
    Prefix,
    /// Each persistence unit of each interrupted store survives independently.
    ArbitrarySubset,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CrashModel {
    pub mode: CrashMode,
    pub unit: usize,
    pub seed: u64,
}

impl CrashModel {
    pub fn prefix(seed: u64) -> Self {
        CrashModel {
            mode: CrashMode::Prefix,
            unit: DEFAULT_PERSIST_UNIT,
            seed,
        }
    }

    pub fn arbitrary(seed: u64) -> Self {
        CrashModel {
            mode: CrashMode::ArbitrarySubset,
            unit: DEFAULT_PERSIST_UNIT,
            seed,
        }
    }
}

/// What survives of one pending store.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum StoreFate {
    Dropped,
    Persisted,
    /// First `n` bytes of the store survive. For atomic stores only `n >= 8` keeps anything.
    Prefix(usize),
    /// One flag per persistence unit touched by the store, in address order.
    Units(Vec<bool>),
}

/// A store that has been issued but is not yet durable.
#[derive(Clone, Debug)]
pub struct PendingStore {
    pub addr: u64,
    pub data: Vec<u8>,
    pub atomic8: bool,
}

impl PendingStore {
    /// Number of persistence units (aligned to absolute addresses) this store touches.
    pub fn unit_count(&self, unit: usize) -> usize {
        if self.data.is_empty() {
            return 0;
        }
        let unit = unit as u64;
        let first = self.addr / unit;
        let last = (self.addr + self.data.len() as u64 - 1) / unit;
        (last - first + 1) as usize
    }

    /// Byte ranges (store-relative) of each persistence unit, in order.
    fn unit_spans(&self, unit: usize) -> Vec<(usize, usize)> {
        let unit = unit as u64;
        let end = self.addr + self.data.len() as u64;
        let mut spans = Vec::new();
        let mut pos = self.addr;
        while pos < end {
            let next = ((pos / unit) + 1) * unit;
            let stop = next.min(end);
            spans.push(((pos - self.addr) as usize, (stop - self.addr) as usize));
            pos = stop;
        }
        spans
    }
}

#[derive(Clone, Debug)]
pub struct NvmDevice {
    durable: Vec<u8>,
    inflight: Vec<PendingStore>,
    write_bytes_paper: u64,
    write_bytes_actual: u64,
    extra_write_latency_ns: u64,
    unit: usize,
}

impl NvmDevice {
    pub fn new(capacity: usize) -> Self {
        NvmDevice {
            durable: vec![0; capacity],
            inflight: Vec::new(),
            write_bytes_paper: 0,
            write_bytes_actual: 0,
            extra_write_latency_ns: DEFAULT_EXTRA_WRITE_LATENCY_NS,
            unit: DEFAULT_PERSIST_UNIT,
        }
    }

    pub fn with_extra_write_latency(mut self, ns: u64) -> Self {
        self.extra_write_latency_ns = ns;
        self
    }

    pub fn capacity(&self) -> u64 {
        self.durable.len() as u64
    }

    pub fn extra_write_latency_ns(&self) -> u64 {
        self.extra_write_latency_ns
    }

    pub fn persist_unit(&self) -> usize {
        self.unit
    }

    pub fn write_bytes_paper(&self) -> u64 {
        self.write_bytes_paper
    }

    pub fn write_bytes_actual(&self) -> u64 {
        self.write_bytes_actual
    }

    pub fn inflight(&self) -> &[PendingStore] {
        &self.inflight
    }

    fn check(&self, addr: u64, len: usize) -> Result<(), NvmError> {
        let end = addr.checked_add(len as u64);
        match end {
            Some(end) if end <= self.capacity() => Ok(()),
            _ => Err(NvmError::OutOfBounds {
                addr,
                len,
                capacity: self.capacity(),
            }),
        }
    }

    /// Issue a store. It is visible to `read` immediately and durable after `flush`.
    pub fn store(&mut self, addr: u64, data: &[u8], atomic8: bool) -> Result<(), NvmError> {
        self.check(addr, data.len())?;
        if atomic8 && (data.len() != 8 || !addr.is_multiple_of(8)) {
            return Err(NvmError::Misaligned {
                addr,
                len: data.len(),
            });
        }
        if !data.is_empty() {
            self.inflight.push(PendingStore {
                addr,
                data: data.to_vec(),
                atomic8,
            });
        }
        Ok(())
    }

    /// Convenience for an aligned 8-byte atomic store of a little-endian word.
    pub fn store_word(&mut self, addr: u64, word: u64) -> Result<(), NvmError> {
        self.store(addr, &word.to_le_bytes(), true)
    }

    pub fn read(&self, addr: u64, len: usize) -> Result<Vec<u8>, NvmError> {
        self.check(addr, len)?;
        let mut out = self.durable[addr as usize..addr as usize + len].to_vec();
        let end = addr + len as u64;
        for st in &self.inflight {
            let st_end = st.addr + st.data.len() as u64;
            if st_end <= addr || st.addr >= end {
                continue;
            }
            let lo = st.addr.max(addr);
            let hi = st_end.min(end);
            out[(lo - addr) as usize..(hi - addr) as usize]
                .copy_from_slice(&st.data[(lo - st.addr) as usize..(hi - st.addr) as usize]);
        }
        Ok(out)
    }

    pub fn read_word(&self, addr: u64) -> Result<u64, NvmError> {
        let b = self.read(addr, 8)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }

    /// The durable image only, ignoring pending stores.
    pub fn durable_image(&self) -> &[u8] {
        &self.durable
    }

    /// Persist every pending store in issue order.
    pub fn flush(&mut self) {
        for st in std::mem::take(&mut self.inflight) {
            let a = st.addr as usize;
            self.durable[a..a + st.data.len()].copy_from_slice(&st.data);
            self.write_bytes_actual += st.data.len() as u64;
        }
    }

    /// Persist the pending stores overlapping `[addr, addr+len)`, together with
    /// any earlier pending stores they overlap so issue order is preserved.
    pub fn persist(&mut self, addr: u64, len: usize) {
        let overlaps =
            |a: &PendingStore, lo: u64, hi: u64| a.addr < hi && lo < a.addr + a.data.len() as u64;
        let mut selected: Vec<bool> = self
            .inflight
            .iter()
            .map(|st| overlaps(st, addr, addr + len as u64))
            .collect();
        for i in (0..self.inflight.len()).rev() {
            if !selected[i] {
                continue;
            }
            let (lo, hi) = (
                self.inflight[i].addr,
                self.inflight[i].addr + self.inflight[i].data.len() as u64,
            );
            for (j, st) in self.inflight[..i].iter().enumerate() {
                if !selected[j] && overlaps(st, lo, hi) {
                    selected[j] = true;
                }
            }
        }
        let mut keep = Vec::new();
        for (st, sel) in std::mem::take(&mut self.inflight).into_iter().zip(selected) {
            if sel {
                let a = st.addr as usize;
                self.durable[a..a + st.data.len()].copy_from_slice(&st.data);
                self.write_bytes_actual += st.data.len() as u64;
            } else {
                keep.push(st);
            }
        }
        self.inflight = keep;
    }

    pub fn account(&mut self, paper_bytes: u64) {
        self.write_bytes_paper += paper_bytes;
    }

    /// Crash the device: the durable image plus a seeded subset of pending stores.
    pub fn crash(&self, model: &CrashModel) -> NvmDevice {
        let mut rng = ChaCha8Rng::seed_from_u64(model.seed);
        let plan: Vec<StoreFate> = self
            .inflight
            .iter()
            .map(|st| {
                if st.atomic8 {
                    return if rng.gen_bool(0.5) {
                        StoreFate::Persisted
                    } else {
                        StoreFate::Dropped
                    };
                }
                match model.mode {
                    CrashMode::Prefix => StoreFate::Prefix(rng.gen_range(0..=st.data.len())),
                    CrashMode::ArbitrarySubset => StoreFate::Units(
                        (0..st.unit_count(model.unit))
                            .map(|_| rng.gen_bool(0.5))
                            .collect(),
                    ),
                }
            })
            .collect();
        let mut dev = self.clone();
        dev.unit = model.unit;
        dev.apply_crash(&plan);
        dev
    }

    /// Crash with an explicit fate per pending store (in issue order). Missing
    /// fates mean `Dropped`. Used by exhaustive crash-point enumeration.
    pub fn crash_with(&self, plan: &[StoreFate]) -> NvmDevice {
        let mut dev = self.clone();
        dev.apply_crash(plan);
        dev
    }

    /// Crash in place with an explicit plan.
    pub fn crash_in_place(&mut self, plan: &[StoreFate]) {
        self.apply_crash(plan);
    }

    fn apply_crash(&mut self, plan: &[StoreFate]) {
        let inflight = std::mem::take(&mut self.inflight);
        for (i, st) in inflight.iter().enumerate() {
            let fate = plan.get(i).cloned().unwrap_or(StoreFate::Dropped);
            let base = st.addr as usize;
            let keep = |lo: usize, hi: usize, durable: &mut Vec<u8>| {
                durable[base + lo..base + hi].copy_from_slice(&st.data[lo..hi]);
            };
            match fate {
                StoreFate::Dropped => {}
                StoreFate::Persisted => keep(0, st.data.len(), &mut self.durable),
                StoreFate::Prefix(n) => {
                    if st.atomic8 {
                        if n >= 8 {
                            keep(0, 8, &mut self.durable);
                        }
                    } else {
                        keep(0, n.min(st.data.len()), &mut self.durable);
                    }
                }
                StoreFate::Units(mask) => {
                    if st.atomic8 {
                        if mask.first().copied().unwrap_or(false) {
                            keep(0, 8, &mut self.durable);
                        }
                    } else {
                        for (span, kept) in st.unit_spans(self.unit).into_iter().zip(mask) {
                            if kept {
                                keep(span.0, span.1, &mut self.durable);
                            }
                        }
                    }
                }
            }
        }
    }

    /// Write the durable image to `path`.
    pub fn dump(&self, path: &Path) -> Result<(), NvmError> {
        let mut f = fs::File::create(path)?;
        f.write_all(DUMP_MAGIC)?;
        f.write_all(&self.capacity().to_le_bytes())?;
        f.write_all(&self.durable)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<NvmDevice, NvmError> {
        let mut f = fs::File::open(path)?;
        let mut header = [0u8; DUMP_HEADER_LEN];
        f.read_exact(&mut header)?;
        if &header[..8] != DUMP_MAGIC {
            return Err(NvmError::BadImage("bad magic".into()));
        }
        let capacity = u64::from_le_bytes(header[8..16].try_into().unwrap()) as usize;
        let mut durable = Vec::with_capacity(capacity);
        f.read_to_end(&mut durable)?;
        if durable.len() != capacity {
            return Err(NvmError::BadImage(format!(
                "expected {capacity} bytes of image, found {}",
                durable.len()
            )));
        }
        let mut dev = NvmDevice::new(0);
        dev.durable = durable;
        Ok(dev)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_initialized_and_round_trip() {
        let mut dev = NvmDevice::new(256);
        assert_eq!(dev.read(100, 16).unwrap(), vec![0; 16]);
        dev.store(0, &[0; 8], true).unwrap();
        dev.flush();
        assert_eq!(dev.read(0, 8).unwrap(), vec![0; 8]);
    }

    #[test]
    fn pending_stores_are_visible_but_not_durable() {
        let mut dev = NvmDevice::new(64);
        dev.store(8, &[7; 8], false).unwrap();
        assert_eq!(dev.read(8, 8).unwrap(), vec![7; 8]);
        assert_eq!(&dev.durable_image()[8..16], &[0; 8]);
        assert_eq!(dev.write_bytes_actual(), 0);
        dev.flush();
        assert_eq!(dev.write_bytes_actual(), 8);
        assert!(dev.inflight().is_empty());
    }

    #[test]
    fn bounds_and_alignment_faults() {
        let mut dev = NvmDevice::new(64);
        assert!(matches!(
            dev.store(60, &[1; 8], false),
            Err(NvmError::OutOfBounds { .. })
        ));
        assert!(matches!(dev.read(64, 1), Err(NvmError::OutOfBounds { .. })));
        assert!(matches!(
            dev.store(4, &[1; 8], true),
            Err(NvmError::Misaligned { .. })
        ));
        assert!(matches!(
            dev.store(8, &[1; 4], true),
            Err(NvmError::Misaligned { .. })
        ));
    }

    #[test]
    fn prefix_cut_keeps_exact_prefix() {
        let record: Vec<u8> = (1..=100).collect();
        for cut in 0..=record.len() {
            let mut dev = NvmDevice::new(256);
            dev.store(16, &record, false).unwrap();
            let crashed = dev.crash_with(&[StoreFate::Prefix(cut)]);
            let img = crashed.durable_image();
            // reference: zero image with the first `cut` bytes of the record copied in
            let mut expect = vec![0u8; 256];
            expect[16..16 + cut].copy_from_slice(&record[..cut]);
            assert_eq!(img, &expect[..], "cut {cut}");
        }
    }

    #[test]
    fn atomic_slot_never_mixes() {
        let mut dev = NvmDevice::new(64);
        dev.store_word(8, 0x1111_1111_1111_1111).unwrap();
        dev.flush();
        dev.store_word(8, 0x2222_2222_2222_2222).unwrap();
        for seed in 0..64 {
            let c = dev.crash(&CrashModel::arbitrary(seed));
            let w = c.read_word(8).unwrap();
            assert!(w == 0x1111_1111_1111_1111 || w == 0x2222_2222_2222_2222);
        }
        for cut in 0..=8 {
            let c = dev.crash_with(&[StoreFate::Prefix(cut)]);
            let w = c.read_word(8).unwrap();
            assert_eq!(
                w,
                if cut == 8 {
                    0x2222_2222_2222_2222
                } else {
                    0x1111_1111_1111_1111
                }
            );
        }
    }

    #[test]
    fn both_outcomes_reachable_for_atomic_store() {
        let mut dev = NvmDevice::new(64);
        dev.store_word(0, 5).unwrap();
        let seen: std::collections::BTreeSet<u64> = (0..32)
            .map(|s| dev.crash(&CrashModel::prefix(s)).read_word(0).unwrap())
            .collect();
        assert_eq!(seen.into_iter().collect::<Vec<_>>(), vec![0, 5]);
    }

    #[test]
    fn subset_crash_persists_whole_units() {
        // 200-byte store at an unaligned address touching 4 cache lines.
        let data: Vec<u8> = (0..200).map(|i| (i % 251 + 1) as u8).collect();
        let mut dev = NvmDevice::new(512);
        dev.store(40, &data, false).unwrap();
        let st = &dev.inflight()[0];
        let n = st.unit_count(64);
        assert_eq!(n, 4);
        for mask in 0u32..(1 << n) {
            let fates: Vec<bool> = (0..n).map(|i| mask & (1 << i) != 0).collect();
            let c = dev.crash_with(&[StoreFate::Units(fates.clone())]);
            // oracle: each absolute line [64k, 64k+64) ∩ [40, 240) is all-new or all-zero
            for (u, kept) in fates.iter().enumerate() {
                let line_lo = (u as u64) * 64;
                let lo = line_lo.max(40) as usize;
                let hi = (line_lo + 64).min(240) as usize;
                let got = &c.durable_image()[lo..hi];
                if *kept {
                    assert_eq!(got, &data[lo - 40..hi - 40]);
                } else {
                    assert!(got.iter().all(|b| *b == 0));
                }
            }
        }
        // seeded crashes only ever produce one of those unions
        for seed in 0..50 {
            let c = dev.crash(&CrashModel::arbitrary(seed));
            for line in 0..8u64 {
                let lo = (line * 64).max(40) as usize;
                let hi = ((line + 1) * 64).min(240) as usize;
                if lo >= hi {
                    continue;
                }
                let got = &c.durable_image()[lo..hi];
                assert!(got == &data[lo - 40..hi - 40] || got.iter().all(|b| *b == 0));
            }
        }
    }

    #[test]
    fn crash_with_empty_inflight_is_identity_and_idempotent() {
        let mut dev = NvmDevice::new(128);
        dev.store(0, &[9; 30], false).unwrap();
        dev.flush();
        let c = dev.crash(&CrashModel::arbitrary(3));
        assert_eq!(c.durable_image(), dev.durable_image());
        let mut again = c.clone();
        again.flush();
        assert_eq!(again.durable_image(), c.durable_image());
        assert_eq!(c.write_bytes_actual(), dev.write_bytes_actual());
    }

    #[test]
    fn persist_range_keeps_unrelated_stores_pending() {
        let mut dev = NvmDevice::new(256);
        dev.store(0, &[1; 16], false).unwrap();
        dev.store(128, &[2; 16], false).unwrap();
        dev.store(8, &[3; 16], false).unwrap();
        dev.persist(16, 8);
        // the store at 8 overlaps the range and drags the earlier store at 0 with it
        assert_eq!(dev.inflight().len(), 1);
        assert_eq!(dev.inflight()[0].addr, 128);
        assert_eq!(&dev.durable_image()[0..8], &[1; 8]);
        assert_eq!(&dev.durable_image()[8..24], &[3; 16]);
    }

    #[test]
    fn accounting_is_separate_from_actual_bytes() {
        let mut dev = NvmDevice::new(64);
        dev.account(9 + 72);
        assert_eq!(dev.write_bytes_paper(), 81);
        dev.account(0);
        assert_eq!(dev.write_bytes_paper(), 81);
        assert_eq!(dev.write_bytes_actual(), 0);
    }

    #[test]
    fn dump_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img");
        let mut dev = NvmDevice::new(1024);
        dev.store(100, b"hello", false).unwrap();
        dev.flush();
        dev.store(200, b"lost", false).unwrap();
        dev.dump(&path).unwrap();
        let raw = std::fs::read(&path).unwrap();
        assert_eq!(&raw[..8], b"ERDANVM1");
        assert_eq!(u64::from_le_bytes(raw[8..16].try_into().unwrap()), 1024);
        let back = NvmDevice::load(&path).unwrap();
        assert_eq!(back.read(100, 5).unwrap(), b"hello");
        assert_eq!(back.read(200, 4).unwrap(), vec![0; 4]);
    }
}
