//! Hopscotch hash table laid out in NVM.
//!
//! Entries are fixed 32-byte records so a client can compute the address of a
//! key's home slot from its hash and fetch the whole neighborhood with one
//! one-sided read:
//!
//! ```text
//! 0      1        2        3    4          8               16          32
//! +------+--------+--------+----+----------+---------------+-----------+
//! | occ  | keylen | headid | -- | hop_info | atomic region |  key (16) |
//! +------+--------+--------+----+----------+---------------+-----------+
//! ```
//!
//! `hop_info` belongs to the slot as a *home bucket*: bit `i` says the entry
//! stored `i` slots later hashes here. Bytes 0..8 form one aligned word so
//! occupancy and hop bits change with single atomic stores. The table has
//! `H - 1` overflow slots past the last home so neighborhoods never wrap.
//!
//! Keys are hashed with XXH64 (seed 0) on both client and server.

use thiserror::Error;
use twox_hash::XxHash64;

use crate::nvm::{NvmDevice, NvmError};

pub const ENTRY_SIZE: u64 = 32;
pub const NEIGHBORHOOD: u64 = 32;
pub const MAX_INLINE_KEY: usize = 16;
const WORD_OFFSET: u64 = 8;
const KEY_OFFSET: u64 = 16;

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("key of {0} bytes exceeds the {MAX_INLINE_KEY}-byte inline limit")]
    KeyTooLong(usize),
    #[error("no free slot reachable within the neighborhood")]
    TableFull,
    #[error("key already present")]
    Duplicate,
    #[error("entry at {0:#x} is not live")]
    DeadEntry(u64),
    #[error(transparent)]
    Nvm(#[from] NvmError),
}

pub fn hash64(key: &[u8]) -> u64 {
    XxHash64::oneshot(0, key)
}

/// Address of the home slot for `key`.
pub fn entry_addr(key: &[u8], table_base: u64, table_slots: u64) -> u64 {
    table_base + ENTRY_SIZE * (hash64(key) % table_slots)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HashEntry {
    pub occupied: bool,
    pub key: Vec<u8>,
    pub head_id: u8,
    pub word: u64,
    pub hop_info: u32,
}

impl HashEntry {
    pub fn decode(bytes: &[u8]) -> HashEntry {
        let key_len = (bytes[1] as usize).min(MAX_INLINE_KEY);
        HashEntry {
            occupied: bytes[0] == 1,
            key: bytes[KEY_OFFSET as usize..KEY_OFFSET as usize + key_len].to_vec(),
            head_id: bytes[2],
            word: u64::from_le_bytes(bytes[8..16].try_into().unwrap()),
            hop_info: u32::from_le_bytes(bytes[4..8].try_into().unwrap()),
        }
    }

    fn header_word(occupied: bool, key_len: u8, head_id: u8, hop_info: u32) -> u64 {
        let mut b = [0u8; 8];
        b[0] = occupied as u8;
        b[1] = key_len;
        b[2] = head_id;
        b[4..8].copy_from_slice(&hop_info.to_le_bytes());
        u64::from_le_bytes(b)
    }
}

/// Table geometry, shared with clients at connection setup.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TableGeometry {
    pub base: u64,
    /// Number of home buckets; a power of two.
    pub slots: u64,
}

impl TableGeometry {
    pub fn new(base: u64, slots: u64) -> Self {
        assert!(
            slots.is_power_of_two(),
            "table slots must be a power of two"
        );
        assert_eq!(base % 8, 0);
        TableGeometry { base, slots }
    }

    pub fn physical_slots(&self) -> u64 {
        self.slots + NEIGHBORHOOD - 1
    }

    pub fn byte_len(&self) -> u64 {
        self.physical_slots() * ENTRY_SIZE
    }

    pub fn home(&self, key: &[u8]) -> u64 {
        hash64(key) % self.slots
    }

    pub fn slot_addr(&self, slot: u64) -> u64 {
        self.base + slot * ENTRY_SIZE
    }

    pub fn slot_of(&self, addr: u64) -> u64 {
        (addr - self.base) / ENTRY_SIZE
    }

    /// Byte range a client reads to see every slot a key may occupy.
    pub fn neighborhood(&self, key: &[u8]) -> (u64, usize) {
        (
            self.slot_addr(self.home(key)),
            (NEIGHBORHOOD * ENTRY_SIZE) as usize,
        )
    }

    /// Client-side scan of a neighborhood read for a live entry matching `key`.
    /// Returns the entry and its address.
    pub fn find_in_neighborhood(&self, key: &[u8], bytes: &[u8]) -> Option<(u64, HashEntry)> {
        let home = self.home(key);
        bytes
            .chunks_exact(ENTRY_SIZE as usize)
            .enumerate()
            .find_map(|(i, raw)| {
                let e = HashEntry::decode(raw);
                (e.occupied && e.key == key).then(|| (self.slot_addr(home + i as u64), e))
            })
    }
}

/// Server-side operations on the NVM-resident table.
#[derive(Clone, Copy, Debug)]
pub struct HashIndex {
    pub geo: TableGeometry,
}

impl HashIndex {
    pub fn new(geo: TableGeometry) -> Self {
        HashIndex { geo }
    }

    fn read_slot(&self, dev: &NvmDevice, slot: u64) -> Result<HashEntry, IndexError> {
        Ok(HashEntry::decode(
            &dev.read(self.geo.slot_addr(slot), ENTRY_SIZE as usize)?,
        ))
    }

    fn write_header(
        &self,
        dev: &mut NvmDevice,
        slot: u64,
        occupied: bool,
        key_len: u8,
        head_id: u8,
        hop_info: u32,
    ) -> Result<(), IndexError> {
        let addr = self.geo.slot_addr(slot);
        dev.store_word(
            addr,
            HashEntry::header_word(occupied, key_len, head_id, hop_info),
        )?;
        dev.persist(addr, 8);
        Ok(())
    }

    fn set_hop(
        &self,
        dev: &mut NvmDevice,
        home: u64,
        set: Option<u64>,
        clear: Option<u64>,
    ) -> Result<(), IndexError> {
        let e = self.read_slot(dev, home)?;
        let mut hop = e.hop_info;
        if let Some(i) = set {
            hop |= 1 << i;
        }
        if let Some(i) = clear {
            hop &= !(1 << i);
        }
        self.write_header(dev, home, e.occupied, e.key.len() as u8, e.head_id, hop)
    }

    /// Write key and word into a free slot, then publish it by setting occupancy.
    fn place(
        &self,
        dev: &mut NvmDevice,
        slot: u64,
        key: &[u8],
        head_id: u8,
        word: u64,
    ) -> Result<(), IndexError> {
        let addr = self.geo.slot_addr(slot);
        let mut body = [0u8; 24];
        body[..8].copy_from_slice(&word.to_le_bytes());
        body[8..8 + key.len()].copy_from_slice(key);
        dev.store(addr + WORD_OFFSET, &body, false)?;
        dev.persist(addr + WORD_OFFSET, body.len());
        let hop = self.read_slot(dev, slot)?.hop_info;
        self.write_header(dev, slot, true, key.len() as u8, head_id, hop)
    }

    pub fn lookup(
        &self,
        dev: &NvmDevice,
        key: &[u8],
    ) -> Result<Option<(u64, HashEntry)>, IndexError> {
        let home = self.geo.home(key);
        let hop = self.read_slot(dev, home)?.hop_info;
        for i in 0..NEIGHBORHOOD {
            if hop & (1 << i) == 0 {
                continue;
            }
            let e = self.read_slot(dev, home + i)?;
            if e.occupied && e.key == key {
                return Ok(Some((self.geo.slot_addr(home + i), e)));
            }
        }
        Ok(None)
    }

    /// Insert a new entry, displacing others toward the key's home as needed.
    /// Every move copies first and clears the source last, so a crash leaves at
    /// most an unreachable duplicate that `recover` removes.
    pub fn insert(
        &self,
        dev: &mut NvmDevice,
        key: &[u8],
        head_id: u8,
        word: u64,
    ) -> Result<u64, IndexError> {
        if key.len() > MAX_INLINE_KEY {
            return Err(IndexError::KeyTooLong(key.len()));
        }
        if self.lookup(dev, key)?.is_some() {
            return Err(IndexError::Duplicate);
        }
        let home = self.geo.home(key);
        let mut free = None;
        for s in home..self.geo.physical_slots() {
            if !self.read_slot(dev, s)?.occupied {
                free = Some(s);
                break;
            }
        }
        let mut free = free.ok_or(IndexError::TableFull)?;
        while free - home >= NEIGHBORHOOD {
            // The nearest bucket whose neighbor can move forward into `free`.
            let mut found = None;
            for bucket in (free + 1 - NEIGHBORHOOD)..free {
                let hop = self.read_slot(dev, bucket)?.hop_info;
                if let Some(i) = (0..(free - bucket)).find(|i| hop & (1 << i) != 0) {
                    found = Some((bucket, i));
                    break;
                }
            }
            let (bucket, i) = found.ok_or(IndexError::TableFull)?;
            let from = bucket + i;
            let e = self.read_slot(dev, from)?;
            self.place(dev, free, &e.key, e.head_id, e.word)?;
            self.set_hop(dev, bucket, Some(free - bucket), Some(i))?;
            let src = self.read_slot(dev, from)?;
            self.write_header(dev, from, false, 0, 0, src.hop_info)?;
            free = from;
        }
        self.place(dev, free, key, head_id, word)?;
        self.set_hop(dev, home, Some(free - home), None)?;
        Ok(self.geo.slot_addr(free))
    }

    /// One aligned 8-byte atomic store of the metadata word.
    pub fn update_atomic(
        &self,
        dev: &mut NvmDevice,
        entry: u64,
        word: u64,
    ) -> Result<(), IndexError> {
        let e = HashEntry::decode(&dev.read(entry, ENTRY_SIZE as usize)?);
        if !e.occupied {
            return Err(IndexError::DeadEntry(entry));
        }
        dev.store_word(entry + WORD_OFFSET, word)?;
        dev.persist(entry + WORD_OFFSET, 8);
        Ok(())
    }

    pub fn remove(&self, dev: &mut NvmDevice, key: &[u8]) -> Result<bool, IndexError> {
        let Some((addr, _)) = self.lookup(dev, key)? else {
            return Ok(false);
        };
        let slot = self.geo.slot_of(addr);
        let home = self.geo.home(key);
        let e = self.read_slot(dev, slot)?;
        self.write_header(dev, slot, false, 0, 0, e.hop_info)?;
        self.set_hop(dev, home, None, Some(slot - home))?;
        Ok(true)
    }

    /// All live entries as (address, entry).
    pub fn entries(&self, dev: &NvmDevice) -> Result<Vec<(u64, HashEntry)>, IndexError> {
        let raw = dev.read(self.geo.base, self.geo.byte_len() as usize)?;
        Ok(raw
            .chunks_exact(ENTRY_SIZE as usize)
            .enumerate()
            .filter_map(|(i, b)| {
                let e = HashEntry::decode(b);
                e.occupied.then(|| (self.geo.slot_addr(i as u64), e))
            })
            .collect())
    }

    /// Drop occupied slots not reachable from their home's hop bits and hop
    /// bits that point at empty or foreign slots. Returns the number of fixes.
    pub fn recover(&self, dev: &mut NvmDevice) -> Result<usize, IndexError> {
        let mut fixes = 0;
        for slot in 0..self.geo.physical_slots() {
            let e = self.read_slot(dev, slot)?;
            if e.occupied {
                let home = self.geo.home(&e.key);
                let reachable = slot >= home
                    && slot - home < NEIGHBORHOOD
                    && self.read_slot(dev, home)?.hop_info & (1 << (slot - home)) != 0;
                if !reachable {
                    self.write_header(dev, slot, false, 0, 0, e.hop_info)?;
                    fixes += 1;
                }
            }
        }
        for home in 0..self.geo.slots {
            let hop = self.read_slot(dev, home)?.hop_info;
            for i in 0..NEIGHBORHOOD {
                if hop & (1 << i) == 0 {
                    continue;
                }
                let e = self.read_slot(dev, home + i)?;
                if !e.occupied || self.geo.home(&e.key) != home {
                    self.set_hop(dev, home, None, Some(i))?;
                    fixes += 1;
                }
            }
        }
        Ok(fixes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashMap;

    fn setup(slots: u64) -> (NvmDevice, HashIndex) {
        let geo = TableGeometry::new(64, slots);
        let dev = NvmDevice::new((64 + geo.byte_len()) as usize);
        (dev, HashIndex::new(geo))
    }

    /// Brute-force search for `n` distinct keys with the same home slot.
    fn colliding_keys(geo: &TableGeometry, home: u64, n: usize) -> Vec<Vec<u8>> {
        (0u64..)
            .map(|i| format!("c{i}").into_bytes())
            .filter(|k| geo.home(k) == home)
            .take(n)
            .collect()
    }

    #[test]
    fn entry_addr_is_deterministic() {
        let a = entry_addr(b"user1", 4096, 1024);
        assert_eq!(a, entry_addr(b"user1", 4096, 1024));
        assert_eq!((a - 4096) % ENTRY_SIZE, 0);
        assert!(a < 4096 + 1024 * ENTRY_SIZE);
    }

    #[test]
    fn empty_lookup_and_insert_lookup() {
        let (mut dev, idx) = setup(64);
        assert!(idx.lookup(&dev, b"a").unwrap().is_none());
        let (addr, len) = idx.geo.neighborhood(b"a");
        let raw = dev.read(addr, len).unwrap();
        assert!(!HashEntry::decode(&raw[..32]).occupied);
        let at = idx.insert(&mut dev, b"a", 2, 0xDEAD).unwrap();
        let (found, e) = idx.lookup(&dev, b"a").unwrap().unwrap();
        assert_eq!(found, at);
        assert_eq!((e.head_id, e.word), (2, 0xDEAD));
        let raw = dev.read(addr, len).unwrap();
        assert_eq!(idx.geo.find_in_neighborhood(b"a", &raw).unwrap().0, at);
    }

    #[test]
    fn colliding_keys_share_a_neighborhood() {
        let (mut dev, idx) = setup(64);
        let keys = colliding_keys(&idx.geo, 5, 2);
        let a = idx.insert(&mut dev, &keys[0], 0, 1).unwrap();
        let b = idx.insert(&mut dev, &keys[1], 0, 2).unwrap();
        assert_ne!(a, b);
        for k in &keys {
            let (addr, _) = idx.lookup(&dev, k).unwrap().unwrap();
            let slot = idx.geo.slot_of(addr);
            assert!(slot >= 5 && slot - 5 < NEIGHBORHOOD);
        }
    }

    #[test]
    fn full_neighborhood_reports_table_full_without_corruption() {
        let (mut dev, idx) = setup(256);
        let keys = colliding_keys(&idx.geo, 17, NEIGHBORHOOD as usize + 1);
        for (i, k) in keys[..NEIGHBORHOOD as usize].iter().enumerate() {
            idx.insert(&mut dev, k, 0, i as u64).unwrap();
        }
        assert!(matches!(
            idx.insert(&mut dev, &keys[NEIGHBORHOOD as usize], 0, 99),
            Err(IndexError::TableFull)
        ));
        for (i, k) in keys[..NEIGHBORHOOD as usize].iter().enumerate() {
            assert_eq!(idx.lookup(&dev, k).unwrap().unwrap().1.word, i as u64);
        }
        assert_eq!(idx.entries(&dev).unwrap().len(), NEIGHBORHOOD as usize);
    }

    #[test]
    fn displacement_keeps_everything_reachable() {
        // Fill a run of slots with keys homed at consecutive buckets, then insert
        // a key whose nearest free slot is beyond its neighborhood.
        let (mut dev, idx) = setup(128);
        let mut inserted = Vec::new();
        for home in 10..10 + NEIGHBORHOOD + 4 {
            let k = colliding_keys(&idx.geo, home, 1).remove(0);
            idx.insert(&mut dev, &k, 0, home).unwrap();
            inserted.push(k);
        }
        let extra = colliding_keys(&idx.geo, 10, 2).remove(1);
        idx.insert(&mut dev, &extra, 0, 777).unwrap();
        inserted.push(extra);
        for k in &inserted {
            assert!(idx.lookup(&dev, k).unwrap().is_some());
        }
        assert_eq!(idx.recover(&mut dev).unwrap(), 0);
    }

    #[test]
    fn update_atomic_is_one_eight_byte_store() {
        let (mut dev, idx) = setup(64);
        let at = idx.insert(&mut dev, b"key", 0, 1).unwrap();
        let before = dev.write_bytes_actual();
        idx.update_atomic(&mut dev, at, 2).unwrap();
        assert_eq!(dev.write_bytes_actual() - before, 8);
        assert!(matches!(
            idx.update_atomic(&mut dev, idx.geo.slot_addr(60), 3),
            Err(IndexError::DeadEntry(_))
        ));
    }

    #[test]
    fn update_then_crash_is_old_or_new() {
        let (mut dev, idx) = setup(64);
        let at = idx.insert(&mut dev, b"key", 0, 0x1111).unwrap();
        dev.store_word(at + WORD_OFFSET, 0x2222).unwrap();
        for seed in 0..16 {
            let c = dev.crash(&crate::nvm::CrashModel::arbitrary(seed));
            let w = idx.lookup(&c, b"key").unwrap().unwrap().1.word;
            assert!(w == 0x1111 || w == 0x2222);
        }
    }

    #[test]
    fn remove_then_lookup() {
        let (mut dev, idx) = setup(64);
        idx.insert(&mut dev, b"k", 0, 5).unwrap();
        assert!(idx.remove(&mut dev, b"k").unwrap());
        assert!(idx.lookup(&dev, b"k").unwrap().is_none());
        assert!(!idx.remove(&mut dev, b"k").unwrap());
        assert!(matches!(
            idx.insert(&mut dev, &[0; 17], 0, 0),
            Err(IndexError::KeyTooLong(17))
        ));
    }

    #[test]
    fn recover_drops_duplicate_from_interrupted_move() {
        let (mut dev, idx) = setup(64);
        let k = colliding_keys(&idx.geo, 3, 1).remove(0);
        idx.insert(&mut dev, &k, 1, 42).unwrap();
        // copy step of a move to slot 9 landed, hop bits never updated
        idx.place(&mut dev, 9, &k, 1, 42).unwrap();
        assert_eq!(idx.entries(&dev).unwrap().len(), 2);
        assert_eq!(idx.recover(&mut dev).unwrap(), 1);
        let live = idx.entries(&dev).unwrap();
        assert_eq!(live.len(), 1);
        assert_eq!(idx.lookup(&dev, &k).unwrap().unwrap().0, live[0].0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn agrees_with_model_map(ops in proptest::collection::vec((0u8..3, 0u16..300, any::<u64>()), 1..600)) {
            let (mut dev, idx) = setup(512);
            let mut model: HashMap<Vec<u8>, u64> = HashMap::new();
            for (op, k, w) in ops {
                let key = format!("key{k}").into_bytes();
                match op {
                    0 => {
                        let r = idx.insert(&mut dev, &key, 0, w);
                        if model.contains_key(&key) {
                            prop_assert!(matches!(r, Err(IndexError::Duplicate)));
                        } else {
                            r.unwrap();
                            model.insert(key.clone(), w);
                        }
                    }
                    1 => {
                        if let Some((at, _)) = idx.lookup(&dev, &key).unwrap() {
                            idx.update_atomic(&mut dev, at, w).unwrap();
                            model.insert(key.clone(), w);
                        }
                    }
                    _ => {
                        prop_assert_eq!(idx.remove(&mut dev, &key).unwrap(), model.remove(&key).is_some());
                    }
                }
                let got = idx.lookup(&dev, &key).unwrap().map(|(_, e)| e.word);
                prop_assert_eq!(got, model.get(&key).copied());
            }
            for (k, w) in &model {
                prop_assert_eq!(idx.lookup(&dev, k).unwrap().unwrap().1.word, *w);
            }
        }
    }
}
