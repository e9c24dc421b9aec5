//! Erda: clients write objects straight into the server's log with one-sided
//! writes; the server only hands out log space and flips the 8-byte metadata
//! word. Readers detect torn objects by checksum and fall back to the previous
//! version the word still points at.
//!
//! Device layout:
//!
//! ```text
//! 0            superblock (magic + configuration)
//! HEAD_BASE    one record per head: control word, replication bound, two chain arrays
//! table        hopscotch index
//! pool         fixed-size regions handed out to head chains
//! ```
//!
//! Offsets stored in metadata words are logical offsets into a head's chain;
//! a chain is a list of pool regions, each `region_size` bytes.

mod client;
mod recovery;
mod server;

pub use client::{ClientOptions, ErdaClient, HeadView, Session};
pub use recovery::RecoveryReport;
pub(crate) use server::{Chain, EntryFix};
pub use server::{ErdaServer, ErdaStats};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::MAX_OFFSET;
use crate::fabric::{CostModel, Fabric, FabricError};
use crate::index::{IndexError, TableGeometry};
use crate::nvm::{NvmDevice, NvmError};
use crate::sim::Sim;
use crate::wire::{Reader, WireError, Writer};

pub const SUPERBLOCK_MAGIC: &[u8; 8] = b"ERDASB01";
pub const HEAD_BASE: u64 = 4096;
const PAGE: u64 = 4096;

#[derive(Debug, Error)]
pub enum ErdaError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("not an Erda image: {0}")]
    BadImage(String),
    #[error("log space exhausted")]
    LogFull,
    #[error("no free region in the pool")]
    PoolExhausted,
    #[error("cleaning not possible: {0}")]
    CleaningRejected(String),
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
pub struct ErdaConfig {
    pub heads: u8,
    pub region_size: u64,
    pub segment_size: u64,
    /// Regions in the pool shared by all chains.
    pub pool_regions: u32,
    /// Maximum regions one chain may link.
    pub max_chain: u32,
    pub table_slots: u64,
    /// Largest encoded object a client may write.
    pub max_object_size: u32,
    /// Occupied fraction of a chain that triggers cleaning.
    pub clean_threshold: f64,
    pub auto_clean: bool,
    /// Records (or entries) the cleaner handles per CPU slice.
    pub clean_batch: usize,
}

impl Default for ErdaConfig {
    fn default() -> Self {
        ErdaConfig {
            heads: 4,
            region_size: 1 << 20,
            segment_size: 64 << 10,
            pool_regions: 16,
            max_chain: 8,
            table_slots: 4096,
            max_object_size: 4096,
            clean_threshold: 0.75,
            auto_clean: true,
            clean_batch: 8,
        }
    }
}

impl ErdaConfig {
    pub fn validate(&self) -> Result<(), ErdaError> {
        let fail = |m: &str| Err(ErdaError::Config(m.to_string()));
        if self.heads == 0 {
            return fail("at least one head is required");
        }
        if self.segment_size == 0 || !self.region_size.is_multiple_of(self.segment_size) {
            return fail("region size must be a whole number of segments");
        }
        if self.max_object_size as u64 > self.segment_size {
            return fail("max object size exceeds the segment size");
        }
        if self.max_chain == 0 || self.max_chain > u16::MAX as u32 {
            return fail("max chain length out of range");
        }
        if self.max_chain as u64 * self.region_size > MAX_OFFSET as u64 + 1 {
            return fail("chain capacity exceeds the 31-bit offset space");
        }
        if self.pool_regions <= self.heads as u32 {
            return fail("pool needs at least one spare region beyond one per head");
        }
        if !self.table_slots.is_power_of_two() {
            return fail("table slots must be a power of two");
        }
        if !(self.clean_threshold > 0.0 && self.clean_threshold <= 1.0) {
            return fail("clean threshold must lie in (0, 1]");
        }
        if self.clean_batch == 0 {
            return fail("clean batch must be positive");
        }
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        Writer::new()
            .bytes(SUPERBLOCK_MAGIC)
            .u8(self.heads)
            .u64(self.region_size)
            .u64(self.segment_size)
            .u32(self.pool_regions)
            .u32(self.max_chain)
            .u64(self.table_slots)
            .u32(self.max_object_size)
            .u64(self.clean_threshold.to_bits())
            .u8(self.auto_clean as u8)
            .u32(self.clean_batch as u32)
            .finish()
    }

    pub fn decode(buf: &[u8]) -> Result<ErdaConfig, ErdaError> {
        let mut r = Reader::new(buf);
        if r.take(8)? != SUPERBLOCK_MAGIC {
            return Err(ErdaError::BadImage("superblock magic mismatch".into()));
        }
        let cfg = ErdaConfig {
            heads: r.u8()?,
            region_size: r.u64()?,
            segment_size: r.u64()?,
            pool_regions: r.u32()?,
            max_chain: r.u32()?,
            table_slots: r.u64()?,
            max_object_size: r.u32()?,
            clean_threshold: f64::from_bits(r.u64()?),
            auto_clean: r.u8()? != 0,
            clean_batch: r.u32()? as usize,
        };
        cfg.validate()
            .map_err(|e| ErdaError::BadImage(e.to_string()))?;
        Ok(cfg)
    }
}

/// Where things live on the device.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Layout {
    pub head_rec_len: u64,
    pub table: TableGeometry,
    pub pool_base: u64,
    pub region_size: u64,
    pub pool_regions: u32,
    pub max_chain: u32,
}

fn align_up(v: u64, to: u64) -> u64 {
    v.div_ceil(to) * to
}

impl Layout {
    pub fn new(cfg: &ErdaConfig) -> Layout {
        let head_rec_len = align_up(16 + 8 * cfg.max_chain as u64, 64);
        let table_base = align_up(HEAD_BASE + head_rec_len * cfg.heads as u64, PAGE);
        let table = TableGeometry::new(table_base, cfg.table_slots);
        let pool_base = align_up(table_base + table.byte_len(), PAGE);
        Layout {
            head_rec_len,
            table,
            pool_base,
            region_size: cfg.region_size,
            pool_regions: cfg.pool_regions,
            max_chain: cfg.max_chain,
        }
    }

    pub fn capacity(&self) -> u64 {
        self.pool_base + self.region_size * self.pool_regions as u64
    }

    pub fn head_addr(&self, head: u8) -> u64 {
        HEAD_BASE + self.head_rec_len * head as u64
    }

    /// Address of the replication bound kept while a head is replicating.
    pub fn reserved_end_addr(&self, head: u8) -> u64 {
        self.head_addr(head) + 8
    }

    /// Address of entry `i` of chain array `b` (0 = A, 1 = B).
    pub fn chain_slot_addr(&self, head: u8, b: bool, i: u32) -> u64 {
        self.head_addr(head) + 16 + 4 * (b as u64 * self.max_chain as u64 + i as u64)
    }

    pub fn region_addr(&self, id: u32) -> u64 {
        self.pool_base + self.region_size * id as u64
    }

    /// Absolute address of a logical chain offset.
    pub fn chain_addr(&self, chain: &[u32], offset: u32) -> Option<u64> {
        let idx = (offset as u64 / self.region_size) as usize;
        chain
            .get(idx)
            .map(|&id| self.region_addr(id) + offset as u64 % self.region_size)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    #[default]
    Normal,
    Merging,
    Replicating,
    Finishing,
}

/// A head's durable control word, always updated with one atomic store.
///
/// Bit 0 selects the active chain array, bit 1 is the cleaning epoch that
/// metadata words echo in their reserved bit, bits 2..4 hold the phase, bits
/// 8..40 the two chain lengths and bits 40..64 a generation counter bumped
/// whenever clients must refresh their view of the head.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct HeadControl {
    pub active_b: bool,
    pub epoch: bool,
    pub phase: Phase,
    pub len_a: u16,
    pub len_b: u16,
    pub generation: u32,
}

impl HeadControl {
    pub fn pack(&self) -> u64 {
        let phase = match self.phase {
            Phase::Normal => 0u64,
            Phase::Merging => 1,
            Phase::Replicating => 2,
            Phase::Finishing => 3,
        };
        self.active_b as u64
            | (self.epoch as u64) << 1
            | phase << 2
            | (self.len_a as u64) << 8
            | (self.len_b as u64) << 24
            | ((self.generation as u64) & 0xFF_FFFF) << 40
    }

    pub fn unpack(w: u64) -> HeadControl {
        HeadControl {
            active_b: w & 1 == 1,
            epoch: w >> 1 & 1 == 1,
            phase: match w >> 2 & 3 {
                0 => Phase::Normal,
                1 => Phase::Merging,
                2 => Phase::Replicating,
                _ => Phase::Finishing,
            },
            len_a: (w >> 8) as u16,
            len_b: (w >> 24) as u16,
            generation: ((w >> 40) & 0xFF_FFFF) as u32,
        }
    }

    pub fn len(&self, b: bool) -> u16 {
        if b {
            self.len_b
        } else {
            self.len_a
        }
    }

    pub fn set_len(&mut self, b: bool, len: u16) {
        if b {
            self.len_b = len;
        } else {
            self.len_a = len;
        }
    }
}

/// How long a one-sided verb issued by a client can stay in flight, from
/// posting until its payload is visible in the device.
pub fn in_flight_bound(cost: &CostModel, max_object_size: u32) -> u64 {
    cost.rtt_ns
        + 2 * cost.jitter_ns
        + cost.per_byte_ns * (max_object_size as u64 + 1024)
        + cost.nic_drain_ns
        + cost.nvm_write_extra_ns
}

/// Head record as sent to clients: generation, cleaning flag, and the
/// (address, rkey) of each region in the active chain.
pub fn encode_head_view(generation: u32, cleaning: bool, regions: &[(u64, u32)]) -> Vec<u8> {
    let mut w = Writer::new()
        .u32(generation)
        .u8(cleaning as u8)
        .u8(regions.len() as u8);
    for &(addr, rkey) in regions {
        w = w.u64(addr).u32(rkey);
    }
    w.finish()
}

pub fn decode_head_view(r: &mut Reader<'_>) -> Result<HeadView, WireError> {
    let generation = r.u32()?;
    let cleaning = r.u8()? != 0;
    let n = r.u8()? as usize;
    let regions = (0..n)
        .map(|_| Ok((r.u64()?, r.u32()?)))
        .collect::<Result<_, WireError>>()?;
    Ok(HeadView {
        generation,
        cleaning,
        regions,
    })
}

/// A simulation running a freshly formatted Erda server.
pub fn new_sim(cfg: ErdaConfig, cost: CostModel, seed: u64) -> Result<Sim, ErdaError> {
    cfg.validate()?;
    let size = ErdaServer::device_size(&cfg) as usize;
    let mut fab = Fabric::new(NvmDevice::new(size), cost, seed);
    let server = ErdaServer::format(&mut fab, cfg)?;
    Ok(Sim::new(fab, Box::new(server)))
}

/// A simulation whose server recovers from a post-crash device image.
pub fn restart_sim(
    nvm: NvmDevice,
    cost: CostModel,
    seed: u64,
) -> Result<(Sim, RecoveryReport), ErdaError> {
    let mut fab = Fabric::new(nvm, cost, seed);
    let (server, report) = ErdaServer::recover(&mut fab)?;
    Ok((Sim::new(fab, Box::new(server)), report))
}

/// Head a key lives under.
pub fn head_of(key: &[u8], heads: u8) -> u8 {
    (crate::index::hash64(key) % heads as u64) as u8
}

/// Place a `size`-byte record at `from` or later so it does not straddle a
/// segment. Returns the record's offset.
pub fn place_in_segment(from: u64, size: u64, segment: u64) -> u64 {
    if from % segment + size > segment {
        align_up(from, segment)
    } else {
        from
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid_and_round_trips() {
        let cfg = ErdaConfig::default();
        cfg.validate().unwrap();
        assert_eq!(ErdaConfig::decode(&cfg.encode()).unwrap(), cfg);
    }

    #[test]
    fn config_rejections() {
        let bad = [
            ErdaConfig {
                heads: 0,
                ..ErdaConfig::default()
            },
            ErdaConfig {
                segment_size: 3000,
                ..ErdaConfig::default()
            },
            ErdaConfig {
                max_object_size: 1 << 20,
                ..ErdaConfig::default()
            },
            ErdaConfig {
                max_chain: 4096,
                ..ErdaConfig::default()
            },
            ErdaConfig {
                pool_regions: 4,
                ..ErdaConfig::default()
            },
            ErdaConfig {
                table_slots: 1000,
                ..ErdaConfig::default()
            },
            ErdaConfig {
                clean_threshold: 0.0,
                ..ErdaConfig::default()
            },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
    }

    #[test]
    fn layout_is_ordered_and_aligned() {
        let cfg = ErdaConfig::default();
        let l = Layout::new(&cfg);
        assert!(l.head_addr(cfg.heads - 1) + l.head_rec_len <= l.table.base);
        assert!(l.table.base + l.table.byte_len() <= l.pool_base);
        assert_eq!(l.pool_base % PAGE, 0);
        assert_eq!(l.reserved_end_addr(2) % 8, 0);
        assert!(l.chain_slot_addr(0, true, cfg.max_chain - 1) + 4 <= l.head_addr(1));
        let chain = [3, 7];
        assert_eq!(l.chain_addr(&chain, 10), Some(l.region_addr(3) + 10));
        assert_eq!(
            l.chain_addr(&chain, (1 << 20) + 5),
            Some(l.region_addr(7) + 5)
        );
        assert_eq!(l.chain_addr(&chain, 2 << 20), None);
    }

    #[test]
    fn control_word_round_trips() {
        let c = HeadControl {
            active_b: true,
            epoch: true,
            phase: Phase::Replicating,
            len_a: 3,
            len_b: 65535,
            generation: 0xAB_CDEF,
        };
        assert_eq!(HeadControl::unpack(c.pack()), c);
        assert_eq!(HeadControl::unpack(0), HeadControl::default());
    }

    #[test]
    fn segment_placement() {
        assert_eq!(place_in_segment(0, 100, 1024), 0);
        assert_eq!(place_in_segment(1000, 24, 1024), 1000);
        assert_eq!(place_in_segment(1000, 25, 1024), 1024);
        assert_eq!(place_in_segment(1024, 1024, 1024), 1024);
    }

    #[test]
    fn head_view_round_trips() {
        let bytes = encode_head_view(9, true, &[(4096, 17), (8192, 23)]);
        let v = decode_head_view(&mut Reader::new(&bytes)).unwrap();
        assert_eq!(
            v,
            HeadView {
                generation: 9,
                cleaning: true,
                regions: vec![(4096, 17), (8192, 23)]
            }
        );
    }
}
