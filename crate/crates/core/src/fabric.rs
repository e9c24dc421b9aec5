//! Discrete-event RDMA fabric.
//!
//! One server endpoint (id 0) owns the NVM device; clients are endpoints
//! 1.. and talk to it through one-sided verbs (read, write, write-with-imm)
//! and two-sided sends. One-sided writes land in the server NIC cache first,
//! are drained to the device as pending stores by a later event, and only
//! become durable when a flush event (or a forcing read on the same
//! connection) persists them.
//!
//! The fabric never runs protocol code itself. [`Fabric::step`] advances
//! simulated time until something needs a protocol decision and hands that
//! back as an [`Upcall`]: a delivery to a client, a completion the server CPU
//! has polled, or a background slot on the server CPU.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::nvm::{CrashModel, NvmDevice, NvmError};

pub type EndpointId = usize;

/// The endpoint that owns the NVM device.
pub const SERVER: EndpointId = 0;

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum FabricError {
    #[error("remote access error: no registered region with rkey {rkey:#x} covers [{addr}, {addr}+{len})")]
    RemoteAccess { rkey: u32, addr: u64, len: usize },
    #[error("peer {0} is not reachable")]
    SendFailed(EndpointId),
    #[error("device error: {0}")]
    Device(String),
}

impl From<NvmError> for FabricError {
    fn from(e: NvmError) -> Self {
        FabricError::Device(e.to_string())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct CostModel {
    pub rtt_ns: u64,
    pub per_byte_ns: u64,
    pub server_cpu_op_ns: u64,
    pub nvm_write_extra_ns: u64,
    /// Delay between a write landing in the NIC cache and its drain to NVM.
    pub nic_drain_ns: u64,
    /// Upper bound of the uniform random delay added to every network leg.
    pub jitter_ns: u64,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel {
            rtt_ns: 2000,
            per_byte_ns: 1,
            server_cpu_op_ns: 1500,
            nvm_write_extra_ns: crate::nvm::DEFAULT_EXTRA_WRITE_LATENCY_NS,
            nic_drain_ns: 100,
            jitter_ns: 0,
        }
    }
}

impl CostModel {
    pub fn half_rtt(&self) -> u64 {
        self.rtt_ns / 2
    }

    pub fn wire(&self, bytes: usize) -> u64 {
        self.per_byte_ns * bytes as u64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RegionKind {
    /// Backed by the server's NVM device.
    Nvm,
    /// Receive buffer for write-with-imm payloads; contents only reach the CPU.
    Volatile,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Region {
    pub id: u32,
    pub base: u64,
    pub len: u64,
    pub rkey: u32,
    pub kind: RegionKind,
}

impl Region {
    fn covers(&self, addr: u64, len: usize) -> bool {
        addr >= self.base && addr + len as u64 <= self.base + self.len
    }
}

/// Something delivered to a client endpoint.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Delivery {
    ReadDone { tag: u64, data: Vec<u8> },
    WriteAck { tag: u64 },
    Recv { payload: Vec<u8> },
    Failed { tag: u64, error: FabricError },
    Timer { tag: u64 },
}

/// A completion the server CPU polled.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Completion {
    pub from: EndpointId,
    pub imm: Option<u32>,
    pub payload: Vec<u8>,
}

#[derive(Debug)]
pub enum Upcall {
    Client {
        ep: EndpointId,
        delivery: Delivery,
    },
    /// The server CPU starts handling a completion. Call [`Fabric::end_cpu`] afterwards.
    Server(Completion),
    /// The server CPU has a slot for background work. Call [`Fabric::end_cpu`] afterwards.
    Background,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct FabricCounters {
    pub server_cpu_events: u64,
    pub one_sided_reads: u64,
    pub one_sided_writes: u64,
    pub writes_with_imm: u64,
    pub sends: u64,
    pub client_sends: u64,
    pub wire_bytes: u64,
    pub remote_errors: u64,
    pub send_failures: u64,
    pub background_steps: u64,
}

impl FabricCounters {
    /// Client-visible network round trips: every one-sided verb plus every
    /// client-originated send (its reply, if any, completes the trip).
    pub fn round_trips(&self) -> u64 {
        self.one_sided_reads + self.one_sided_writes + self.client_sends
    }

    pub fn delta(&self, earlier: &FabricCounters) -> FabricCounters {
        FabricCounters {
            server_cpu_events: self.server_cpu_events - earlier.server_cpu_events,
            one_sided_reads: self.one_sided_reads - earlier.one_sided_reads,
            one_sided_writes: self.one_sided_writes - earlier.one_sided_writes,
            writes_with_imm: self.writes_with_imm - earlier.writes_with_imm,
            sends: self.sends - earlier.sends,
            client_sends: self.client_sends - earlier.client_sends,
            wire_bytes: self.wire_bytes - earlier.wire_bytes,
            remote_errors: self.remote_errors - earlier.remote_errors,
            send_failures: self.send_failures - earlier.send_failures,
            background_steps: self.background_steps - earlier.background_steps,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct TraceRecord {
    pub time: u64,
    pub kind: &'static str,
    pub src: EndpointId,
    pub dst: EndpointId,
    pub addr: u64,
    pub len: usize,
    pub imm: Option<u32>,
}

/// A one-sided write that has reached the NIC cache but not the device.
#[derive(Clone, Debug)]
struct NicEntry {
    id: u64,
    src: EndpointId,
    addr: u64,
    data: Vec<u8>,
    paper_bytes: u64,
}

/// A write still travelling towards the server, exposed for torn-crash injection.
#[derive(Clone, Debug)]
pub struct InFlightWrite {
    pub tag: u64,
    pub addr: u64,
    pub len: usize,
}

#[derive(Debug)]
enum Event {
    ReadExec {
        tag: u64,
        src: EndpointId,
        addr: u64,
        len: usize,
        rkey: u32,
    },
    WriteLand {
        tag: u64,
        src: EndpointId,
        addr: u64,
        data: Vec<u8>,
        rkey: u32,
        imm: Option<u32>,
        paper_bytes: u64,
    },
    Drain {
        id: u64,
    },
    Flush {
        id: u64,
    },
    ServerArrive {
        src: EndpointId,
        imm: Option<u32>,
        payload: Vec<u8>,
    },
    Deliver {
        dst: EndpointId,
        delivery: Delivery,
    },
    CpuRun,
    WakeServer,
}

impl Event {
    /// The client endpoint whose crash cancels this event, if any.
    fn client(&self) -> Option<EndpointId> {
        match self {
            Event::ReadExec { src, .. }
            | Event::WriteLand { src, .. }
            | Event::ServerArrive { src, .. } => Some(*src),
            Event::Deliver { dst, .. } => Some(*dst),
            _ => None,
        }
    }
}

#[derive(Debug, Default)]
struct Cpu {
    queue: VecDeque<Completion>,
    busy_until: u64,
    scheduled: bool,
    background: bool,
    last_was_background: bool,
    in_handler: bool,
    cursor: u64,
}

#[derive(Debug)]
pub struct Fabric {
    now: u64,
    seq: u64,
    queue: BinaryHeap<Reverse<(u64, u64)>>,
    events: HashMap<u64, Event>,
    cost: CostModel,
    rng: ChaCha8Rng,
    nvm: NvmDevice,
    regions: HashMap<u32, Region>,
    next_region: u32,
    nic_cache: Vec<NicEntry>,
    unflushed: Vec<(u64, EndpointId, u64, usize)>,
    next_nic_id: u64,
    alive: Vec<bool>,
    last_arrival: HashMap<(EndpointId, EndpointId), u64>,
    cpu: Cpu,
    counters: FabricCounters,
    trace: Option<Vec<TraceRecord>>,
    next_tag: u64,
}

impl Fabric {
    pub fn new(nvm: NvmDevice, cost: CostModel, seed: u64) -> Self {
        Fabric {
            now: 0,
            seq: 0,
            queue: BinaryHeap::new(),
            events: HashMap::new(),
            cost,
            rng: ChaCha8Rng::seed_from_u64(seed),
            nvm,
            regions: HashMap::new(),
            next_region: 1,
            nic_cache: Vec::new(),
            unflushed: Vec::new(),
            next_nic_id: 0,
            alive: vec![true],
            last_arrival: HashMap::new(),
            cpu: Cpu::default(),
            counters: FabricCounters::default(),
            trace: None,
            next_tag: 1,
        }
    }

    pub fn enable_trace(&mut self) {
        self.trace.get_or_insert_with(Vec::new);
    }

    pub fn trace(&self) -> Option<&[TraceRecord]> {
        self.trace.as_deref()
    }

    /// The trace as JSON lines.
    pub fn trace_jsonl(&self) -> String {
        let mut out = String::new();
        for r in self.trace.iter().flatten() {
            out.push_str(&serde_json::to_string(r).expect("trace record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn cost(&self) -> &CostModel {
        &self.cost
    }

    pub fn counters(&self) -> FabricCounters {
        self.counters
    }

    pub fn nvm(&self) -> &NvmDevice {
        &self.nvm
    }

    /// Direct device access for server-side code running on the server CPU.
    pub fn nvm_mut(&mut self) -> &mut NvmDevice {
        &mut self.nvm
    }

    pub fn into_nvm(self) -> NvmDevice {
        self.nvm
    }

    pub fn add_client(&mut self) -> EndpointId {
        self.alive.push(true);
        self.alive.len() - 1
    }

    pub fn is_alive(&self, ep: EndpointId) -> bool {
        self.alive.get(ep).copied().unwrap_or(false)
    }

    pub fn register(&mut self, base: u64, len: u64, kind: RegionKind) -> Region {
        let id = self.next_region;
        self.next_region += 1;
        let rkey = 0x5eed_0000u32.wrapping_add(id.wrapping_mul(0x9e37));
        let region = Region {
            id,
            base,
            len,
            rkey,
            kind,
        };
        self.regions.insert(rkey, region);
        region
    }

    pub fn unregister(&mut self, rkey: u32) -> bool {
        self.regions.remove(&rkey).is_some()
    }

    pub fn region(&self, rkey: u32) -> Option<Region> {
        self.regions.get(&rkey).copied()
    }

    /// Writes from `ep` that have not yet reached the server.
    pub fn in_flight_writes(&self, ep: EndpointId) -> Vec<InFlightWrite> {
        let mut out: Vec<(u64, InFlightWrite)> = self
            .events
            .iter()
            .filter_map(|(seq, ev)| match ev {
                Event::WriteLand {
                    tag,
                    src,
                    addr,
                    data,
                    ..
                } if *src == ep => Some((
                    *seq,
                    InFlightWrite {
                        tag: *tag,
                        addr: *addr,
                        len: data.len(),
                    },
                )),
                _ => None,
            })
            .collect();
        out.sort_by_key(|(seq, _)| *seq);
        out.into_iter().map(|(_, w)| w).collect()
    }

    /// Number of landed writes still in the NIC cache.
    pub fn nic_cache_len(&self) -> usize {
        self.nic_cache.len()
    }

    pub fn pending_events(&self) -> usize {
        self.events.len()
    }

    fn push(&mut self, at: u64, ev: Event) {
        let seq = self.seq;
        self.seq += 1;
        self.events.insert(seq, ev);
        self.queue.push(Reverse((at, seq)));
    }

    fn record(
        &mut self,
        kind: &'static str,
        src: EndpointId,
        dst: EndpointId,
        addr: u64,
        len: usize,
        imm: Option<u32>,
    ) {
        let time = self.now;
        if let Some(t) = self.trace.as_mut() {
            t.push(TraceRecord {
                time,
                kind,
                src,
                dst,
                addr,
                len,
                imm,
            });
        }
    }

    /// Time at which a verb posted by `src` leaves: server code running on the
    /// CPU posts at the end of its accumulated handling cost.
    fn origin(&self, src: EndpointId) -> u64 {
        if src == SERVER && self.cpu.in_handler {
            self.cpu.cursor
        } else {
            self.now
        }
    }

    /// Arrival time of a network leg, FIFO per directed connection.
    fn arrival(&mut self, src: EndpointId, dst: EndpointId, depart: u64, bytes: usize) -> u64 {
        let jitter = if self.cost.jitter_ns > 0 {
            self.rng.gen_range(0..=self.cost.jitter_ns)
        } else {
            0
        };
        let t = depart + self.cost.half_rtt() + self.cost.wire(bytes) + jitter;
        let last = self.last_arrival.entry((src, dst)).or_insert(0);
        let t = t.max(*last);
        *last = t;
        t
    }

    fn fresh_tag(&mut self) -> u64 {
        let t = self.next_tag;
        self.next_tag += 1;
        t
    }

    pub fn post_rdma_read(&mut self, src: EndpointId, addr: u64, len: usize, rkey: u32) -> u64 {
        let tag = self.fresh_tag();
        self.counters.one_sided_reads += 1;
        self.record("rdma_read", src, SERVER, addr, len, None);
        let depart = self.origin(src);
        let at = self.arrival(src, SERVER, depart, 0);
        self.push(
            at,
            Event::ReadExec {
                tag,
                src,
                addr,
                len,
                rkey,
            },
        );
        tag
    }

    /// Post a one-sided write. `paper_bytes` is the accounting charged when the
    /// payload drains to the device.
    pub fn post_rdma_write(
        &mut self,
        src: EndpointId,
        addr: u64,
        data: Vec<u8>,
        rkey: u32,
        imm: Option<u32>,
        paper_bytes: u64,
    ) -> u64 {
        let tag = self.fresh_tag();
        if imm.is_some() {
            self.counters.writes_with_imm += 1;
        }
        self.counters.one_sided_writes += 1;
        self.counters.wire_bytes += data.len() as u64;
        let kind = if imm.is_some() {
            "rdma_write_with_imm"
        } else {
            "rdma_write"
        };
        self.record(kind, src, SERVER, addr, data.len(), imm);
        let depart = self.origin(src);
        let at = self.arrival(src, SERVER, depart, data.len());
        self.push(
            at,
            Event::WriteLand {
                tag,
                src,
                addr,
                data,
                rkey,
                imm,
                paper_bytes,
            },
        );
        tag
    }

    pub fn post_send(&mut self, src: EndpointId, dst: EndpointId, payload: Vec<u8>) -> u64 {
        let tag = self.fresh_tag();
        self.counters.sends += 1;
        if src != SERVER {
            self.counters.client_sends += 1;
        }
        self.counters.wire_bytes += payload.len() as u64;
        self.record("send", src, dst, 0, payload.len(), None);
        let depart = self.origin(src);
        if !self.is_alive(dst) {
            self.counters.send_failures += 1;
            if src != SERVER {
                let at = self.arrival(dst, src, depart, 0);
                self.push(
                    at,
                    Event::Deliver {
                        dst: src,
                        delivery: Delivery::Failed {
                            tag,
                            error: FabricError::SendFailed(dst),
                        },
                    },
                );
            }
            return tag;
        }
        let at = self.arrival(src, dst, depart, payload.len());
        if dst == SERVER {
            self.push(
                at,
                Event::ServerArrive {
                    src,
                    imm: None,
                    payload,
                },
            );
        } else {
            self.push(
                at,
                Event::Deliver {
                    dst,
                    delivery: Delivery::Recv { payload },
                },
            );
        }
        tag
    }

    /// Wake `ep` with a timer delivery after `delay` ns.
    pub fn post_timer(&mut self, ep: EndpointId, delay: u64) -> u64 {
        let tag = self.fresh_tag();
        let at = self.origin(ep) + delay;
        self.push(
            at,
            Event::Deliver {
                dst: ep,
                delivery: Delivery::Timer { tag },
            },
        );
        tag
    }

    /// Charge extra time to the completion currently being handled.
    pub fn charge_cpu(&mut self, ns: u64) {
        debug_assert!(self.cpu.in_handler, "charge outside a CPU handler");
        self.cpu.cursor += ns;
    }

    /// Charge one NVM write batch to the current handler.
    pub fn charge_nvm_write(&mut self) {
        let ns = self.cost.nvm_write_extra_ns;
        self.charge_cpu(ns);
    }

    /// Finish the current CPU handler. `background` says whether the server
    /// still has background work that wants CPU time.
    pub fn end_cpu(&mut self, background: bool) {
        self.cpu.in_handler = false;
        self.cpu.busy_until = self.cpu.cursor;
        self.cpu.background = background;
        self.schedule_cpu();
    }

    /// Give the server CPU a background slot after `delay` ns.
    pub fn wake_server_after(&mut self, delay: u64) {
        let at = self.origin(SERVER) + delay;
        self.push(at, Event::WakeServer);
    }

    /// Tell the scheduler the server has (or no longer has) background work.
    pub fn set_background(&mut self, pending: bool) {
        self.cpu.background = pending;
        if !self.cpu.in_handler {
            self.schedule_cpu();
        }
    }

    fn schedule_cpu(&mut self) {
        if self.cpu.scheduled || (self.cpu.queue.is_empty() && !self.cpu.background) {
            return;
        }
        self.cpu.scheduled = true;
        let at = self.now.max(self.cpu.busy_until);
        self.push(at, Event::CpuRun);
    }

    fn check_region(&self, rkey: u32, addr: u64, len: usize) -> Result<Region, FabricError> {
        match self.regions.get(&rkey) {
            Some(r) if r.covers(addr, len) => Ok(*r),
            _ => Err(FabricError::RemoteAccess { rkey, addr, len }),
        }
    }

    fn drain_entry(&mut self, idx: usize) {
        let e = self.nic_cache.remove(idx);
        // Ranges were validated against a registered region on landing.
        self.nvm
            .store(e.addr, &e.data, false)
            .expect("registered region lies inside the device");
        self.nvm.account(e.paper_bytes);
        self.unflushed.push((e.id, e.src, e.addr, e.data.len()));
        let at = self.now + self.cost.nvm_write_extra_ns;
        self.push(at, Event::Flush { id: e.id });
    }

    /// Force every landed write into the persistence domain, as a forcing read
    /// on every connection would.
    pub fn force_all(&mut self) {
        while !self.nic_cache.is_empty() {
            self.drain_entry(0);
        }
        for (_, _, addr, len) in std::mem::take(&mut self.unflushed) {
            self.nvm.persist(addr, len);
        }
    }

    /// Force every write from `src` into the persistence domain.
    fn force_connection(&mut self, src: EndpointId) {
        while let Some(idx) = self.nic_cache.iter().position(|e| e.src == src) {
            self.drain_entry(idx);
        }
        let (mine, rest): (Vec<_>, Vec<_>) = self.unflushed.drain(..).partition(|u| u.1 == src);
        self.unflushed = rest;
        for (_, _, addr, len) in mine {
            self.nvm.persist(addr, len);
        }
    }

    /// Advance until an upcall is due. `None` means the event queue is empty.
    pub fn step(&mut self) -> Option<Upcall> {
        loop {
            if let Some(up) = self.step_event()? {
                return Some(up);
            }
        }
    }

    /// Process exactly one queued event. `None` means the queue is empty;
    /// `Some(None)` means the event needed no upcall.
    pub fn step_event(&mut self) -> Option<Option<Upcall>> {
        loop {
            let Reverse((at, seq)) = self.queue.pop()?;
            let Some(ev) = self.events.remove(&seq) else {
                continue;
            };
            if let Some(c) = ev.client() {
                if c != SERVER && !self.is_alive(c) {
                    continue;
                }
            }
            self.now = self.now.max(at);
            return Some(self.handle(ev));
        }
    }

    fn handle(&mut self, ev: Event) -> Option<Upcall> {
        match ev {
            Event::ReadExec {
                tag,
                src,
                addr,
                len,
                rkey,
            } => {
                let delivery = match self.check_region(rkey, addr, len) {
                    Ok(r) if r.kind == RegionKind::Nvm => {
                        self.force_connection(src);
                        match self.nvm.read(addr, len) {
                            Ok(data) => Delivery::ReadDone { tag, data },
                            Err(e) => Delivery::Failed {
                                tag,
                                error: e.into(),
                            },
                        }
                    }
                    _ => {
                        self.counters.remote_errors += 1;
                        Delivery::Failed {
                            tag,
                            error: FabricError::RemoteAccess { rkey, addr, len },
                        }
                    }
                };
                let bytes = match &delivery {
                    Delivery::ReadDone { data, .. } => data.len(),
                    _ => 0,
                };
                self.counters.wire_bytes += bytes as u64;
                let at = self.arrival(SERVER, src, self.now, bytes);
                self.push(at, Event::Deliver { dst: src, delivery });
                None
            }
            Event::WriteLand {
                tag,
                src,
                addr,
                data,
                rkey,
                imm,
                paper_bytes,
            } => {
                let region = match self.check_region(rkey, addr, data.len()) {
                    Ok(r) => r,
                    Err(error) => {
                        self.counters.remote_errors += 1;
                        let at = self.arrival(SERVER, src, self.now, 0);
                        self.push(
                            at,
                            Event::Deliver {
                                dst: src,
                                delivery: Delivery::Failed { tag, error },
                            },
                        );
                        return None;
                    }
                };
                self.record("ack", SERVER, src, addr, data.len(), None);
                self.push(
                    self.now,
                    Event::Deliver {
                        dst: src,
                        delivery: Delivery::WriteAck { tag },
                    },
                );
                let payload = if region.kind == RegionKind::Nvm {
                    let id = self.next_nic_id;
                    self.next_nic_id += 1;
                    self.nic_cache.push(NicEntry {
                        id,
                        src,
                        addr,
                        data: data.clone(),
                        paper_bytes,
                    });
                    let at = self.now + self.cost.nic_drain_ns;
                    self.push(at, Event::Drain { id });
                    data
                } else {
                    data
                };
                if let Some(imm) = imm {
                    self.cpu.queue.push_back(Completion {
                        from: src,
                        imm: Some(imm),
                        payload,
                    });
                    self.schedule_cpu();
                }
                None
            }
            Event::Drain { id } => {
                if let Some(idx) = self.nic_cache.iter().position(|e| e.id == id) {
                    self.drain_entry(idx);
                }
                None
            }
            Event::Flush { id } => {
                if let Some(idx) = self.unflushed.iter().position(|u| u.0 == id) {
                    let (_, _, addr, len) = self.unflushed.remove(idx);
                    self.nvm.persist(addr, len);
                }
                None
            }
            Event::ServerArrive { src, imm, payload } => {
                self.cpu.queue.push_back(Completion {
                    from: src,
                    imm,
                    payload,
                });
                self.schedule_cpu();
                None
            }
            Event::Deliver { dst, delivery } => Some(Upcall::Client { ep: dst, delivery }),
            Event::WakeServer => {
                self.cpu.background = true;
                if !self.cpu.in_handler {
                    self.schedule_cpu();
                }
                None
            }
            Event::CpuRun => {
                self.cpu.scheduled = false;
                let fg = !self.cpu.queue.is_empty();
                let bg = self.cpu.background;
                if fg && (!bg || self.cpu.last_was_background) {
                    let c = self.cpu.queue.pop_front().expect("queue checked non-empty");
                    self.counters.server_cpu_events += 1;
                    self.record("recv_completion", c.from, SERVER, 0, c.payload.len(), c.imm);
                    self.cpu.in_handler = true;
                    self.cpu.last_was_background = false;
                    self.cpu.cursor = self.now + self.cost.server_cpu_op_ns;
                    Some(Upcall::Server(c))
                } else if bg {
                    self.counters.background_steps += 1;
                    self.record("background", SERVER, SERVER, 0, 0, None);
                    self.cpu.in_handler = true;
                    self.cpu.last_was_background = true;
                    // Polling is never free; this also keeps idle loops advancing.
                    self.cpu.cursor = self.now + 1;
                    Some(Upcall::Background)
                } else {
                    None
                }
            }
        }
    }

    /// Crash a client. Everything it had in flight is cancelled; `keep` may
    /// land a prefix (its return value, in bytes) of each in-flight write, which
    /// models a client dying halfway through pushing an object.
    pub fn crash_client(&mut self, ep: EndpointId, mut keep: impl FnMut(&InFlightWrite) -> usize) {
        if ep == SERVER || !self.is_alive(ep) {
            return;
        }
        for w in self.in_flight_writes(ep) {
            let n = keep(&w).min(w.len);
            if n == 0 {
                continue;
            }
            let seq = self
                .events
                .iter()
                .find_map(|(s, e)| {
                    matches!(e, Event::WriteLand { tag, .. } if *tag == w.tag).then_some(*s)
                })
                .expect("write listed as in flight");
            if let Some(Event::WriteLand {
                src,
                addr,
                data,
                rkey,
                paper_bytes,
                ..
            }) = self.events.remove(&seq)
            {
                if let Ok(r) = self.check_region(rkey, addr, n) {
                    if r.kind == RegionKind::Nvm {
                        let id = self.next_nic_id;
                        self.next_nic_id += 1;
                        let cut = data[..n].to_vec();
                        let paper = if n == data.len() { paper_bytes } else { 0 };
                        self.nic_cache.push(NicEntry {
                            id,
                            src,
                            addr,
                            data: cut,
                            paper_bytes: paper,
                        });
                        let at = self.now + self.cost.nic_drain_ns;
                        self.push(at, Event::Drain { id });
                    }
                }
            }
        }
        self.alive[ep] = false;
        self.cpu.queue.retain(|c| c.from != ep);
    }

    /// Crash the server: the NIC cache and every in-flight verb are lost and the
    /// device crashes under `model`. Returns the post-crash device.
    pub fn crash_server(self, model: &CrashModel) -> NvmDevice {
        self.nvm.crash(model)
    }

    /// Run until the queue is empty, dropping upcalls. Only useful in tests of
    /// the fabric itself.
    #[cfg(test)]
    fn run_bare(&mut self) -> Vec<(EndpointId, Delivery)> {
        let mut out = Vec::new();
        while let Some(up) = self.step() {
            match up {
                Upcall::Client { ep, delivery } => out.push((ep, delivery)),
                Upcall::Server(_) | Upcall::Background => self.end_cpu(false),
            }
        }
        out
    }
}
