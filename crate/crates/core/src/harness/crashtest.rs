//! `crashtest`: enumerate crash points of small scripted histories and check
//! that every get afterwards returns a complete value the history allows.
//!
//! Scenarios:
//!
//! * `client-crash-mid-put`: the writer dies while its object is on the
//!   wire; every persistence-unit prefix of the object is tried, once with
//!   the server running on and once with a server restart afterwards.
//! * `server-crash-restart`: the server crashes after every event of the
//!   scripted history, under every unit prefix of each not yet durable
//!   store; then seeded multi-client schedules are crashed, dumped, loaded
//!   and recovered, and the recovery report is compared with the entries
//!   whose latest record is torn in the crashed image.
//! * `crash-during-cleaning-finish`: the server crashes after every event of
//!   a cleaning pass (quiesce through finish) with a writer running
//!   concurrently.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::baselines::{self, BaselineConfig};
use crate::cleaner::CleanPhase;
use crate::codec::{unpack_atomic, verify_object, Scheme};
use crate::erda::{self, ClientOptions, ErdaConfig, ErdaServer, HeadControl, Layout};
use crate::fabric::{CostModel, EndpointId};
use crate::index::HashIndex;
use crate::nvm::{CrashModel, NvmDevice, StoreFate};
use crate::sim::{OpKind, OpRecord, Outcome, Sim};

use super::{AnyClient, HarnessError};

/// Sleep before post-crash reads so every repair lease has run out.
const SETTLE_NS: u64 = 200_000;
const MAX_OBJECT: u32 = 600;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum CrashScenario {
    ClientCrashMidPut,
    ServerCrashRestart,
    CrashDuringCleaningFinish,
}

impl CrashScenario {
    pub const ALL: [CrashScenario; 3] = [
        CrashScenario::ClientCrashMidPut,
        CrashScenario::ServerCrashRestart,
        CrashScenario::CrashDuringCleaningFinish,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CrashScenario::ClientCrashMidPut => "client-crash-mid-put",
            CrashScenario::ServerCrashRestart => "server-crash-restart",
            CrashScenario::CrashDuringCleaningFinish => "crash-during-cleaning-finish",
        }
    }
}

impl fmt::Display for CrashScenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CrashScenario {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        CrashScenario::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| format!("unknown scenario {s:?}"))
    }
}

#[derive(Clone, Debug)]
pub struct CrashTestSpec {
    pub scheme: Scheme,
    pub scenario: CrashScenario,
    /// Persistence unit in bytes.
    pub unit: usize,
    pub seed: u64,
    /// Seeded schedules for `server-crash-restart`.
    pub schedules: usize,
    /// Skip the exhaustive event-by-event cut of `server-crash-restart`.
    pub seeded_only: bool,
    /// Readers trust record lengths without checking checksums. Exists to
    /// show the enumeration catches torn reads.
    pub skip_verify: bool,
    /// Where crashed images are dumped and loaded from.
    pub dump_dir: Option<PathBuf>,
}

impl Default for CrashTestSpec {
    fn default() -> Self {
        CrashTestSpec {
            scheme: Scheme::Erda,
            scenario: CrashScenario::ClientCrashMidPut,
            unit: 64,
            seed: 1,
            schedules: 200,
            seeded_only: false,
            skip_verify: false,
            dump_dir: None,
        }
    }
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct CrashTestReport {
    pub scheme: String,
    pub scenario: String,
    pub cases: u64,
    pub failures: u64,
    /// The first failing case with the history that led to it.
    pub counterexample: Option<String>,
    /// Entries recovery reported as repaired, removed or rolled back across
    /// all seeded restarts.
    pub repaired_entries: u64,
    /// Seeded restarts whose report matched the torn entries exactly.
    pub exact_repairs: u64,
    /// Cleaning phases a crash was injected in.
    pub phases_cut: BTreeSet<String>,
}

impl CrashTestReport {
    pub fn passed(&self) -> bool {
        self.failures == 0 && self.cases > 0
    }

    fn record(&mut self, case: impl FnOnce() -> String, result: Result<(), String>) {
        self.cases += 1;
        if let Err(e) = result {
            self.failures += 1;
            if self.counterexample.is_none() {
                self.counterexample = Some(format!("{}\n{e}", case()));
            }
        }
    }

    fn merge(&mut self, other: CrashTestReport) {
        self.cases += other.cases;
        self.failures += other.failures;
        self.repaired_entries += other.repaired_entries;
        self.exact_repairs += other.exact_repairs;
        self.phases_cut.extend(other.phases_cut);
        if self.counterexample.is_none() {
            self.counterexample = other.counterexample;
        }
    }
}

pub fn crashtest(spec: &CrashTestSpec) -> Result<CrashTestReport, HarnessError> {
    let mut report = CrashTestReport {
        scheme: spec.scheme.name().into(),
        scenario: spec.scenario.name().into(),
        ..CrashTestReport::default()
    };
    match spec.scenario {
        CrashScenario::ClientCrashMidPut => report.merge(client_crashes(spec)),
        CrashScenario::ServerCrashRestart => {
            if !spec.seeded_only {
                report.merge(prefix_cuts(spec));
            }
            report.merge(seeded_restarts(spec)?);
        }
        CrashScenario::CrashDuringCleaningFinish => report.merge(cleaning_cuts(spec)),
    }
    Ok(report)
}

fn erda_cfg() -> ErdaConfig {
    ErdaConfig {
        heads: 1,
        region_size: 4096,
        segment_size: 1024,
        pool_regions: 8,
        max_chain: 4,
        table_slots: 256,
        max_object_size: MAX_OBJECT,
        clean_threshold: 0.75,
        auto_clean: false,
        clean_batch: 2,
    }
}

fn baseline_cfg() -> BaselineConfig {
    BaselineConfig {
        table_slots: 256,
        log_size: 4096,
        ring_slots: 8,
        max_object_size: MAX_OBJECT,
        dest_size: 64 << 10,
    }
}

fn fresh(scheme: Scheme, cost: &CostModel, seed: u64) -> Sim {
    match scheme {
        Scheme::Erda => erda::new_sim(erda_cfg(), *cost, seed).expect("valid geometry"),
        _ => baselines::new_sim(scheme, baseline_cfg(), *cost, seed).expect("valid geometry"),
    }
}

/// Restart a server of `scheme` from a crashed image. The Erda recovery
/// report is returned alongside.
fn restart(
    scheme: Scheme,
    dev: NvmDevice,
    seed: u64,
) -> Result<(Sim, Option<erda::RecoveryReport>), String> {
    match scheme {
        Scheme::Erda => erda::restart_sim(dev, CostModel::default(), seed)
            .map(|(s, r)| (s, Some(r)))
            .map_err(|e| format!("recovery failed: {e}")),
        _ => baselines::restart_sim(dev, CostModel::default(), seed)
            .map(|(s, _)| (s, None))
            .map_err(|e| format!("recovery failed: {e}")),
    }
}

/// One scripted write: `None` deletes.
type ScriptOp = (Vec<u8>, Option<Vec<u8>>);

/// Three keys, twelve writes, objects spanning several persistence units.
fn script() -> Vec<ScriptOp> {
    let keys = [b"ka", b"kb", b"kc"];
    let plan: [(usize, bool); 12] = [
        (0, true),
        (1, true),
        (2, true),
        (0, true),
        (1, false),
        (2, true),
        (1, true),
        (0, true),
        (2, false),
        (2, true),
        (0, true),
        (1, true),
    ];
    plan.iter()
        .enumerate()
        .map(|(i, &(k, put))| {
            let value = put.then(|| vec![b'A' + i as u8; 90 + 37 * i]);
            (keys[k].to_vec(), value)
        })
        .collect()
}

type State = HashMap<Vec<u8>, Option<Vec<u8>>>;

/// State after each prefix of `ops`: `states[j]` follows the first `j` ops.
fn states(keys: &[Vec<u8>], initial: &State, ops: &[ScriptOp]) -> Vec<State> {
    let mut s: State = keys
        .iter()
        .map(|k| (k.clone(), initial.get(k).cloned().flatten()))
        .collect();
    let mut out = vec![s.clone()];
    for (k, v) in ops {
        s.insert(k.clone(), v.clone());
        out.push(s.clone());
    }
    out
}

fn script_keys(ops: &[ScriptOp]) -> Vec<Vec<u8>> {
    let set: BTreeSet<Vec<u8>> = ops.iter().map(|(k, _)| k.clone()).collect();
    set.into_iter().collect()
}

fn spawn_writer(sim: &mut Sim, scheme: Scheme, ops: Vec<ScriptOp>) -> EndpointId {
    let ctx = sim.add_client();
    let ep = ctx.ep;
    sim.spawn(&ctx.clone(), async move {
        let Ok(mut c) = AnyClient::connect(ctx, scheme, MAX_OBJECT, ClientOptions::default()).await
        else {
            return;
        };
        for (k, v) in ops {
            match v {
                Some(v) => c.put(&k, &v).await,
                None => c.delete(&k).await,
            };
        }
    });
    ep
}

/// Read every key twice after the settle delay; the first read may trigger
/// a repair the second one then sees.
fn read_back(
    sim: &mut Sim,
    scheme: Scheme,
    keys: &[Vec<u8>],
    verify: bool,
) -> Vec<(Vec<u8>, Outcome)> {
    let ctx = sim.add_client();
    let ep = ctx.ep;
    let keys = keys.to_vec();
    let opts = ClientOptions {
        verify_checksums: verify,
        ..ClientOptions::default()
    };
    sim.spawn(&ctx.clone(), async move {
        let Ok(mut c) = AnyClient::connect(ctx.clone(), scheme, MAX_OBJECT, opts).await else {
            return;
        };
        ctx.sleep(SETTLE_NS).await;
        for _ in 0..2 {
            for k in &keys {
                c.get(k).await;
            }
        }
    });
    sim.run();
    sim.history()
        .into_iter()
        .filter(|r| r.client == ep && r.kind == OpKind::Get)
        .map(|r| {
            (
                r.key,
                r.outcome.unwrap_or(Outcome::Failed("unfinished".into())),
            )
        })
        .collect()
}

type Allowed = HashMap<Vec<u8>, Vec<Option<Vec<u8>>>>;

fn describe(v: &Option<Vec<u8>>) -> String {
    match v {
        None => "absent".into(),
        Some(v) if v.iter().all(|&b| b == v[0]) => {
            format!("{}x{:?}", v.len(), v[0] as char)
        }
        Some(v) => format!("{} bytes {:?}..", v.len(), &v[..v.len().min(8)]),
    }
}

fn check_reads(reads: &[(Vec<u8>, Outcome)], allowed: &Allowed) -> Result<(), String> {
    if reads.is_empty() {
        return Err("reader could not run".into());
    }
    for (k, o) in reads {
        let seen = match o.observed() {
            Some(v) => v.map(<[u8]>::to_vec),
            None => {
                return Err(format!(
                    "get {:?} returned {o:?}",
                    String::from_utf8_lossy(k)
                ))
            }
        };
        let ok = allowed.get(k).is_some_and(|a| a.contains(&seen));
        if !ok {
            let options: Vec<String> = allowed.get(k).into_iter().flatten().map(describe).collect();
            return Err(format!(
                "get {:?} saw {} but only {} are possible",
                String::from_utf8_lossy(k),
                describe(&seen),
                options.join(" or ")
            ));
        }
    }
    Ok(())
}

/// Allowed values when ops `0..lo` are durable and ops up to `hi` may
/// have taken effect.
fn sequential_allowed(states: &[State], lo: usize, hi: usize) -> Allowed {
    let hi = hi.min(states.len() - 1);
    states[lo]
        .keys()
        .map(|k| {
            let mut a: Vec<Option<Vec<u8>>> = Vec::new();
            for s in &states[lo..=hi] {
                if !a.contains(&s[k]) {
                    a.push(s[k].clone());
                }
            }
            (k.clone(), a)
        })
        .collect()
}

/// How long after its completion a write may still sit in the NIC cache.
/// Erda clients take the write ACK as completion; the baselines only
/// complete once the data is durable.
fn ack_window(scheme: Scheme, cost: &CostModel) -> Option<u64> {
    (scheme == Scheme::Erda).then(|| cost.nic_drain_ns + cost.nvm_write_extra_ns)
}

/// Writes by `ep` that completed, and how many of those are surely durable
/// if the server crashes now.
fn completed(sim: &Sim, ep: EndpointId, window: Option<u64>) -> (usize, usize) {
    sim.with(|w| {
        let now = w.fab.now();
        let ends: Vec<u64> = w
            .history
            .iter()
            .filter(|r| r.client == ep && r.kind != OpKind::Get)
            .filter_map(|r| r.outcome.as_ref().and(r.end))
            .collect();
        let durable = match window {
            None => ends.len(),
            Some(win) => ends.iter().filter(|&&e| e + win < now).count(),
        };
        (durable, ends.len())
    })
}

fn format_history(history: &[OpRecord]) -> String {
    history
        .iter()
        .map(|r| {
            format!(
                "  t={:>8} c{} {:?} {} {} -> {:?}",
                r.start,
                r.client,
                r.kind,
                String::from_utf8_lossy(&r.key),
                describe(&r.value),
                r.outcome.as_ref().map(|o| match o {
                    Outcome::Value(v) | Outcome::Recovered(v) => describe(&Some(v.clone())),
                    other => format!("{other:?}"),
                })
            )
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// Byte counts that keep 0, 1, 2, ... whole persistence units of a write.
fn unit_prefixes(addr: u64, len: usize, unit: usize) -> Vec<usize> {
    let unit = unit as u64;
    let mut out = vec![0];
    let mut boundary = (addr / unit + 1) * unit;
    while boundary < addr + len as u64 {
        out.push((boundary - addr) as usize);
        boundary += unit;
    }
    out.push(len);
    out
}

/// Crash the writer after every event of the script. When it has writes on
/// the wire, each of them is cut at every unit boundary in turn. Reads
/// follow on the live server and, separately, after a server restart.
fn client_crashes(spec: &CrashTestSpec) -> CrashTestReport {
    let mut report = CrashTestReport::default();
    let ops = script();
    let keys = script_keys(&ops);
    let st = states(&keys, &State::new(), &ops);
    let cost = CostModel::default();
    let build = || {
        let mut sim = fresh(spec.scheme, &cost, spec.seed);
        let w = spawn_writer(&mut sim, spec.scheme, ops.clone());
        (sim, w)
    };
    let total = {
        let (mut sim, _) = build();
        let mut n = 0usize;
        while sim.step_event() {
            n += 1;
        }
        n
    };
    for cut in 0..=total {
        let writes = {
            let (mut sim, w) = build();
            for _ in 0..cut {
                sim.step_event();
            }
            sim.with(|world| world.fab.in_flight_writes(w))
        };
        // (which write is cut, bytes it keeps); the others land whole.
        let mut cases: Vec<Option<(usize, usize)>> = vec![None];
        for (i, f) in writes.iter().enumerate() {
            for keep in unit_prefixes(f.addr, f.len, spec.unit) {
                if keep < f.len {
                    cases.push(Some((i, keep)));
                }
            }
        }
        for case in cases {
            let crashed = || {
                let (mut sim, w) = build();
                for _ in 0..cut {
                    sim.step_event();
                }
                let mut i = 0;
                sim.crash_client(w, |f| {
                    let keep = match case {
                        Some((j, keep)) if j == i => keep,
                        _ => f.len,
                    };
                    i += 1;
                    keep
                });
                (sim, w)
            };
            let describe_case = |after: Option<(usize, usize)>| {
                let cut_desc = match case {
                    Some((j, keep)) => format!(
                        " cutting write {:#x}+{} after {keep} bytes",
                        writes[j].addr, writes[j].len
                    ),
                    None => String::new(),
                };
                let restart_desc = match after {
                    Some((e, p)) => format!(", server crash {e} events later with plan {p}"),
                    None => String::new(),
                };
                format!(
                    "{} client crash after event {cut}{cut_desc}{restart_desc}",
                    spec.scheme.name()
                )
            };

            // Reads against the live server.
            let (mut sim, w) = crashed();
            let (_, done) = completed(&sim, w, None);
            let allowed = sequential_allowed(&st, done, done + 1);
            let history = sim.history();
            let result = check_reads(
                &read_back(&mut sim, spec.scheme, &keys, !spec.skip_verify),
                &allowed,
            );
            report.record(
                || format!("{}:\n{}", describe_case(None), format_history(&history)),
                result,
            );

            // The server crashes after each later event, under every unit plan.
            let remaining = {
                let (mut sim, _) = crashed();
                let mut n = 0usize;
                while sim.step_event() {
                    n += 1;
                }
                n
            };
            for e in 0..=remaining {
                let (mut sim, w) = crashed();
                for _ in 0..e {
                    sim.step_event();
                }
                let (lo, _) = completed(&sim, w, ack_window(spec.scheme, &cost));
                let allowed = sequential_allowed(&st, lo, done + 1);
                let world = sim.into_world();
                for (p, plan) in unit_plans(world.fab.nvm(), spec.unit)
                    .into_iter()
                    .enumerate()
                {
                    let image = world.fab.nvm().crash_with(&plan);
                    let result = restart(spec.scheme, image, spec.seed).and_then(|(mut s, _)| {
                        check_reads(
                            &read_back(&mut s, spec.scheme, &keys, !spec.skip_verify),
                            &allowed,
                        )
                    });
                    report.record(
                        || {
                            format!(
                                "{}:\n{}",
                                describe_case(Some((e, p))),
                                format_history(&history)
                            )
                        },
                        result,
                    );
                }
            }
        }
    }
    report
}

/// Largest store whose every subset of persistence units is tried.
const SUBSET_UNITS: usize = 10;

/// Crash plans over the pending stores: every store before `j` persisted,
/// store `j` cut at each unit boundary or, for stores of at most
/// `SUBSET_UNITS` units, reduced to each non-prefix subset of its units,
/// and everything after `j` dropped. Dropping everything is the first plan.
fn unit_plans(dev: &NvmDevice, unit: usize) -> Vec<Vec<StoreFate>> {
    let pending = dev.inflight();
    let mut plans = vec![Vec::new()];
    for (j, st) in pending.iter().enumerate() {
        let mut fates: Vec<StoreFate> = if st.atomic8 {
            vec![StoreFate::Prefix(8)]
        } else {
            unit_prefixes(st.addr, st.data.len(), unit)[1..]
                .iter()
                .map(|&n| StoreFate::Prefix(n))
                .collect()
        };
        let units = st.unit_count(dev.persist_unit());
        if !st.atomic8 && units <= SUBSET_UNITS {
            for mask in 1u32..(1 << units) {
                let bits: Vec<bool> = (0..units).map(|u| mask >> u & 1 == 1).collect();
                let is_prefix = bits.windows(2).all(|p| p[0] || !p[1]);
                if !is_prefix {
                    fates.push(StoreFate::Units(bits));
                }
            }
        }
        for fate in fates {
            let mut plan = vec![StoreFate::Persisted; j];
            plan.push(fate);
            plans.push(plan);
        }
    }
    plans
}

/// Run the script event by event, crashing the server after each event
/// under every unit plan.
fn prefix_cuts(spec: &CrashTestSpec) -> CrashTestReport {
    let mut report = CrashTestReport::default();
    let ops = script();
    let keys = script_keys(&ops);
    let st = states(&keys, &State::new(), &ops);
    let cost = CostModel::default();
    let build = || {
        let mut sim = fresh(spec.scheme, &cost, spec.seed);
        let w = spawn_writer(&mut sim, spec.scheme, ops.clone());
        (sim, w)
    };
    let total = {
        let (mut sim, _) = build();
        let mut n = 0usize;
        while sim.step_event() {
            n += 1;
        }
        n
    };
    for cut in 0..=total {
        let (mut sim, w) = build();
        for _ in 0..cut {
            sim.step_event();
        }
        let (lo, done) = completed(&sim, w, ack_window(spec.scheme, &cost));
        let allowed = sequential_allowed(&st, lo, done + 1);
        let history = sim.history();
        let world = sim.into_world();
        for (p, plan) in unit_plans(world.fab.nvm(), spec.unit)
            .into_iter()
            .enumerate()
        {
            let image = world.fab.nvm().crash_with(&plan);
            let result = restart(spec.scheme, image, spec.seed).and_then(|(mut s, _)| {
                check_reads(
                    &read_back(&mut s, spec.scheme, &keys, !spec.skip_verify),
                    &allowed,
                )
            });
            report.record(
                || {
                    format!(
                        "{} server crash after event {cut} with plan {p} {plan:?}:\n{}",
                        spec.scheme.name(),
                        format_history(&history)
                    )
                },
                result,
            );
        }
    }
    report
}

/// Keys whose index entry names a record that does not verify, judged from
/// the crashed image alone.
fn torn_entries(dev: &NvmDevice) -> Result<BTreeSet<Vec<u8>>, String> {
    let cfg = ErdaConfig::decode(&dev.read(0, 64).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    let layout = Layout::new(&cfg);
    let mut scratch = dev.clone();
    let index = HashIndex::new(layout.table);
    index.recover(&mut scratch).map_err(|e| e.to_string())?;
    let mut torn = BTreeSet::new();
    for (_, e) in index.entries(&scratch).map_err(|e| e.to_string())? {
        let word = scratch
            .read_word(layout.head_addr(e.head_id))
            .map_err(|e| e.to_string())?;
        let control = HeadControl::unpack(word);
        let chain: Vec<u32> = (0..control.len(control.active_b) as u32)
            .map(|i| {
                let at = layout.chain_slot_addr(e.head_id, control.active_b, i);
                let raw = scratch.read(at, 4).unwrap();
                u32::from_le_bytes(raw.try_into().unwrap())
            })
            .collect();
        let off = unpack_atomic(e.word).new_offset();
        let intact = layout.chain_addr(&chain, off).is_some_and(|addr| {
            let room = cfg.segment_size - off as u64 % cfg.segment_size;
            let len = room.min(cfg.max_object_size as u64) as usize;
            scratch
                .read(addr, len)
                .ok()
                .and_then(|b| verify_object(&b))
                .is_some_and(|r| r.key == e.key)
        });
        if !intact {
            torn.insert(e.key);
        }
    }
    Ok(torn)
}

/// Values a key may hold after a crash at `now`. Writes that completed
/// within `window` of the crash count as unfinished.
fn possible_after(
    history: &[OpRecord],
    keys: &[Vec<u8>],
    now: u64,
    window: Option<u64>,
) -> Allowed {
    let history: Vec<OpRecord> = history
        .iter()
        .cloned()
        .map(|mut r| {
            if let (Some(win), Some(end)) = (window, r.end) {
                if end + win >= now {
                    r.end = None;
                    r.outcome = None;
                }
            }
            r
        })
        .collect();
    let cut = now + 1;
    keys.iter()
        .map(|k| {
            let probe = OpRecord {
                client: usize::MAX,
                kind: OpKind::Get,
                key: k.clone(),
                value: None,
                start: cut,
                end: Some(cut),
                outcome: Some(Outcome::Done),
                placement: None,
                one_sided_reads: 0,
            };
            let mut h = history.clone();
            h.push(probe);
            let v = super::oracle::check_history(&h);
            let allowed = v
                .into_iter()
                .find(|v| v.op == h.len() - 1)
                .map(|v| v.allowed)
                .unwrap_or_default();
            (k.clone(), allowed)
        })
        .collect()
}

fn seeded_restarts(spec: &CrashTestSpec) -> Result<CrashTestReport, HarnessError> {
    let mut report = CrashTestReport::default();
    let dir = match &spec.dump_dir {
        Some(d) => d.clone(),
        None => std::env::temp_dir().join(format!("erda-crashtest-{}", std::process::id())),
    };
    std::fs::create_dir_all(&dir)?;
    let keys: Vec<Vec<u8>> = (0..4).map(|i| format!("key{i}").into_bytes()).collect();
    let cost = CostModel {
        jitter_ns: 400,
        ..CostModel::default()
    };
    for n in 0..spec.schedules as u64 {
        let seed = spec.seed.wrapping_mul(1_000_003).wrapping_add(n);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut sim = fresh(spec.scheme, &cost, seed);
        let mut writers = Vec::new();
        for c in 0..3 {
            let ops: Vec<ScriptOp> = (0..8)
                .map(|i| {
                    let k = keys[rng.gen_range(0..keys.len())].clone();
                    let v = (!rng.gen_bool(0.15))
                        .then(|| vec![b'a' + (c * 8 + i) as u8 % 26; rng.gen_range(20..400)]);
                    (k, v)
                })
                .collect();
            writers.push(spawn_writer(&mut sim, spec.scheme, ops));
        }
        let tear_at = rng.gen_range(0..400);
        let crash_at = tear_at + rng.gen_range(0..400);
        let victim = writers[rng.gen_range(0..writers.len())];
        let mut events = 0;
        while events < crash_at && sim.step_event() {
            events += 1;
            if events == tear_at {
                let writes = sim.with(|w| w.fab.in_flight_writes(victim));
                if let Some(f) = writes.iter().max_by_key(|f| f.len) {
                    let keep = rng.gen_range(0..f.len);
                    let big = f.len;
                    sim.crash_client(victim, |g| if g.len == big { keep } else { 0 });
                }
            }
        }
        let history = sim.history();
        let now = sim.now();
        let model = if n % 2 == 0 {
            CrashModel::prefix(seed)
        } else {
            CrashModel::arbitrary(seed)
        };
        let crashed = sim.into_world().fab.crash_server(&model);
        let path = dir.join(format!("schedule-{n}.img"));
        crashed.dump(&path)?;
        let loaded = NvmDevice::load(&path)?;
        std::fs::remove_file(&path)?;
        let expected_torn = if spec.scheme == Scheme::Erda {
            Some(torn_entries(&loaded))
        } else {
            None
        };
        let allowed = possible_after(&history, &keys, now, ack_window(spec.scheme, &cost));
        let result = restart(spec.scheme, loaded, seed).and_then(|(mut s, rep)| {
            if let (Some(rep), Some(torn)) = (rep, &expected_torn) {
                let torn = torn.clone()?;
                let fixed: BTreeSet<Vec<u8>> = rep
                    .repaired
                    .iter()
                    .chain(&rep.removed)
                    .chain(&rep.rolled_back)
                    .chain(&rep.lost)
                    .cloned()
                    .collect();
                report.repaired_entries += fixed.len() as u64;
                if fixed != torn {
                    return Err(format!(
                        "recovery touched {:?} but the torn entries were {:?}",
                        fixed, torn
                    ));
                }
                report.exact_repairs += 1;
            }
            check_reads(
                &read_back(&mut s, spec.scheme, &keys, !spec.skip_verify),
                &allowed,
            )
        });
        report.record(
            || {
                format!(
                    "{} seeded schedule {n} (seed {seed}, tear at event {tear_at}, crash at {crash_at}):\n{}",
                    spec.scheme.name(),
                    format_history(&history)
                )
            },
            result,
        );
    }
    let _ = std::fs::remove_dir(&dir);
    Ok(report)
}

/// Fill a head past the threshold, start cleaning it with a writer running
/// alongside, and crash after every event until the cleaning completes.
fn cleaning_cuts(spec: &CrashTestSpec) -> CrashTestReport {
    let mut report = CrashTestReport::default();
    if spec.scheme != Scheme::Erda {
        report.record(
            || "cleaning scenario".into(),
            Err("only Erda has a cleaner".into()),
        );
        return report;
    }
    let cfg = ErdaConfig {
        max_object_size: 256,
        ..erda_cfg()
    };
    let fill: Vec<ScriptOp> = (0..16)
        .map(|i| {
            (
                format!("f{}", i % 6).into_bytes(),
                Some(vec![b'a' + i as u8; 180]),
            )
        })
        .chain([(b"f5".to_vec(), None)])
        .collect();
    let concurrent: Vec<ScriptOp> = (0..3)
        .map(|i| (b"f0".to_vec(), Some(vec![b'X' + i as u8; 60])))
        .collect();
    let mut keys = script_keys(&fill);
    keys.sort();
    let filled = states(&keys, &State::new(), &fill).pop().unwrap();
    let st = states(&keys, &filled, &concurrent);
    let cost = CostModel::default();
    let build = || -> Result<(Sim, EndpointId), String> {
        let mut sim = erda::new_sim(cfg.clone(), cost, spec.seed).map_err(|e| e.to_string())?;
        spawn_writer(&mut sim, Scheme::Erda, fill.clone());
        sim.run();
        sim.with(|w| {
            let server = w
                .server
                .as_any_mut()
                .downcast_mut::<ErdaServer>()
                .expect("Erda server");
            server.start_cleaning(&mut w.fab, 0)
        })
        .map_err(|e| e.to_string())?;
        let w = spawn_writer(&mut sim, Scheme::Erda, concurrent.clone());
        Ok((sim, w))
    };
    let total = match build() {
        Ok((mut sim, _)) => {
            let mut n = 0;
            while sim.with(|w| w.server::<ErdaServer>().cleaning_head().is_some())
                && sim.step_event()
            {
                n += 1;
            }
            n
        }
        Err(e) => {
            report.record(|| "setting up cleaning".into(), Err(e));
            return report;
        }
    };
    for cut in 0..=total {
        let (mut sim, w) = build().expect("setup succeeded once");
        for _ in 0..cut {
            sim.step_event();
        }
        let phase = sim.with(|w| w.server::<ErdaServer>().cleaning_phase());
        report.phases_cut.insert(
            match phase {
                None => "idle",
                Some(CleanPhase::Quiescing { .. }) => "quiescing",
                Some(CleanPhase::Merging) => "merging",
                Some(CleanPhase::Replicating) => "replicating",
                Some(CleanPhase::Finishing) => "finishing",
            }
            .to_string(),
        );
        let (lo, done) = completed(&sim, w, ack_window(Scheme::Erda, &cost));
        let allowed = sequential_allowed(&st, lo, done + 1);
        let history = sim.history();
        let world = sim.into_world();
        for (p, plan) in unit_plans(world.fab.nvm(), spec.unit)
            .into_iter()
            .enumerate()
        {
            let image = world.fab.nvm().crash_with(&plan);
            let result = restart(Scheme::Erda, image, spec.seed).and_then(|(mut s, _)| {
                check_reads(
                    &read_back(&mut s, Scheme::Erda, &keys, !spec.skip_verify),
                    &allowed,
                )
            });
            report.record(
                || {
                    format!(
                        "crash after cleaning event {cut} ({phase:?}) with plan {p} {plan:?}:\n{}",
                        format_history(&history)
                    )
                },
                result,
            );
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_prefixes_follow_absolute_boundaries() {
        assert_eq!(unit_prefixes(100, 100, 64), vec![0, 28, 92, 100]);
        assert_eq!(unit_prefixes(128, 64, 64), vec![0, 64]);
    }

    #[test]
    fn scenario_names_round_trip() {
        for s in CrashScenario::ALL {
            assert_eq!(s.name().parse::<CrashScenario>().unwrap(), s);
        }
    }

    #[test]
    fn sequential_allowed_covers_the_in_flight_op() {
        let ops = script();
        let keys = script_keys(&ops);
        let st = states(&keys, &State::new(), &ops);
        let a = sequential_allowed(&st, 3, 4);
        assert_eq!(a[&b"ka".to_vec()].len(), 2);
        assert_eq!(a[&b"kb".to_vec()].len(), 1);
        let last = sequential_allowed(&st, 12, 13);
        assert!(last.values().all(|v| v.len() == 1));
        // Ops 2 and 3 write kc and ka; kb is untouched.
        let wide = sequential_allowed(&st, 2, 4);
        assert_eq!(wide[&b"kc".to_vec()].len(), 2);
        assert_eq!(wide[&b"kb".to_vec()].len(), 1);
        assert_eq!(wide[&b"ka".to_vec()].len(), 2);
    }
}
