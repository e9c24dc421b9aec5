//! `run`: load the keys, replay a workload across simulated clients and
//! report counters, byte accounting and simulated latency.
//!
//! Latency and throughput are simulated-time outputs of the cost model, not
//! hardware measurements.

use std::cell::RefCell;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::rc::Rc;

use serde::Serialize;

use crate::codec::Scheme;
use crate::erda::ClientOptions;
use crate::fabric::{FabricCounters, TraceRecord, SERVER};
use crate::sim::{OpKind, OpRecord, Outcome, Sim};
use crate::workload::{partition, Mix, Op, OpType, Workload, WorkloadSpec};

use super::{max_object_size, new_scheme_sim, AnyClient, HarnessConfig, HarnessError};

/// Column order of every CSV the harness writes. One row per op kind
/// (`get`, `put`, `all`) of each scheme × mix × value size × client count.
/// Columns from `paper_bytes` on are run-wide and repeat across a run's rows.
pub const CSV_HEADER: &str = "scheme,mix,value_size,clients,op_kind,ops,mean_latency_ns,\
one_sided_reads_per_op,throughput_ops_per_s,paper_bytes,paper_bytes_per_write,actual_bytes,\
server_cpu_events,cpu_events_per_op,round_trips_per_op";

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct KindStats {
    pub ops: u64,
    pub mean_latency_ns: f64,
    pub one_sided_reads_per_op: f64,
}

impl KindStats {
    fn of<'a>(records: impl Iterator<Item = &'a OpRecord>) -> KindStats {
        let (mut n, mut lat, mut reads) = (0u64, 0u64, 0u64);
        for r in records {
            n += 1;
            lat += r.end.unwrap_or(r.start) - r.start;
            reads += r.one_sided_reads as u64;
        }
        let div = n.max(1) as f64;
        KindStats {
            ops: n,
            mean_latency_ns: lat as f64 / div,
            one_sided_reads_per_op: reads as f64 / div,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunReport {
    pub scheme: Scheme,
    pub spec: WorkloadSpec,
    pub clients: usize,
    /// Run-phase operations that completed with an expected outcome.
    pub ops_completed: u64,
    pub failed_ops: u64,
    pub get: KindStats,
    pub put: KindStats,
    pub all: KindStats,
    /// Paper-accounted NVM bytes written during the run phase. Gets write
    /// nothing, so all of it belongs to writes.
    pub paper_bytes: u64,
    pub actual_bytes: u64,
    pub counters: FabricCounters,
    /// Simulated time from the first run-phase op to the last completion.
    pub duration_ns: u64,
    pub throughput_ops_per_s: f64,
    #[serde(skip)]
    pub trace: Option<Vec<TraceRecord>>,
}

impl RunReport {
    pub fn paper_bytes_per_write(&self) -> f64 {
        self.paper_bytes as f64 / self.put.ops.max(1) as f64
    }

    pub fn cpu_events_per_op(&self) -> f64 {
        self.counters.server_cpu_events as f64 / self.all.ops.max(1) as f64
    }

    pub fn round_trips_per_op(&self) -> f64 {
        self.counters.round_trips() as f64 / self.all.ops.max(1) as f64
    }

    pub fn csv_rows(&self) -> String {
        let mut out = String::new();
        for (kind, k) in [("get", &self.get), ("put", &self.put), ("all", &self.all)] {
            writeln!(
                out,
                "{},{},{},{},{},{},{:.1},{:.3},{:.1},{},{:.3},{},{},{:.4},{:.4}",
                self.scheme.name(),
                self.spec.mix,
                self.spec.value_size,
                self.clients,
                kind,
                k.ops,
                k.mean_latency_ns,
                k.one_sided_reads_per_op,
                self.throughput_ops_per_s,
                self.paper_bytes,
                self.paper_bytes_per_write(),
                self.actual_bytes,
                self.counters.server_cpu_events,
                self.cpu_events_per_op(),
                self.round_trips_per_op(),
            )
            .unwrap();
        }
        out
    }

    /// One human-readable line.
    pub fn summary(&self) -> String {
        format!(
            "{:<5} {:<11} v={:<5} c={:<2} ops={:<6} lat={:>9.1}ns get={:>9.1}ns put={:>9.1}ns \
             tput={:>11.1}/s cpu/op={:.3} paper={} actual={}",
            self.scheme.name(),
            self.spec.mix.name(),
            self.spec.value_size,
            self.clients,
            self.ops_completed,
            self.all.mean_latency_ns,
            self.get.mean_latency_ns,
            self.put.mean_latency_ns,
            self.throughput_ops_per_s,
            self.cpu_events_per_op(),
            self.paper_bytes,
            self.actual_bytes,
        )
    }
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Keep the run phase's event trace in the report.
    pub trace: bool,
    /// Dump the final NVM image here.
    pub nvm_dump: Option<PathBuf>,
}

async fn apply(c: &mut AnyClient, w: &Workload, op: Op) -> Outcome {
    let key = w.key(op.key);
    match op.kind {
        OpType::Read => c.get(&key).await,
        OpType::Write => c.put(&key, &w.value(op.value_seed)).await,
    }
}

fn expected(kind: OpKind, o: &Outcome) -> bool {
    match kind {
        OpKind::Get => matches!(o, Outcome::Value(_) | Outcome::Recovered(_)),
        _ => *o == Outcome::Done,
    }
}

type Parked = Rc<RefCell<Vec<Option<AnyClient>>>>;

/// Run `ops` split round-robin over the parked clients and wait for the
/// simulation to go idle.
fn drive(sim: &mut Sim, parked: &Parked, workload: &Rc<Workload>, ops: Vec<Op>) {
    let n = parked.borrow().len();
    for (i, part) in partition(ops, n).into_iter().enumerate() {
        let mut client = parked.borrow_mut()[i].take().expect("client parked");
        let ctx = client.ctx().clone();
        let parked = parked.clone();
        let w = workload.clone();
        sim.spawn(&ctx, async move {
            for op in part {
                apply(&mut client, &w, op).await;
            }
            parked.borrow_mut()[i] = Some(client);
        });
    }
    sim.run();
}

/// One run of `cfg.workload` under `scheme` with `clients` clients.
pub fn run(
    scheme: Scheme,
    cfg: &HarnessConfig,
    clients: usize,
    opts: &RunOptions,
) -> Result<RunReport, HarnessError> {
    let workload = Rc::new(Workload::new(cfg.workload.clone())?);
    let mut sim = new_scheme_sim(scheme, cfg, cfg.cost, cfg.workload.seed)?;
    let clients = clients.max(1);
    let max_obj = max_object_size(scheme, cfg);
    let parked: Parked = Rc::new(RefCell::new((0..clients).map(|_| None).collect()));
    for i in 0..clients {
        let ctx = sim.add_client();
        let parked = parked.clone();
        sim.spawn(&ctx.clone(), async move {
            match AnyClient::connect(ctx, scheme, max_obj, ClientOptions::default()).await {
                Ok(c) => parked.borrow_mut()[i] = Some(c),
                Err(e) => panic!("client failed to connect: {e}"),
            }
        });
    }
    sim.run();
    drive(
        &mut sim,
        &parked,
        &workload,
        workload.load_phase().collect(),
    );

    let before = sim.with(|w| {
        if opts.trace {
            w.fab.enable_trace();
        }
        (
            w.fab.counters(),
            w.fab.nvm().write_bytes_paper(),
            w.fab.nvm().write_bytes_actual(),
            w.history.len(),
            w.fab.now(),
        )
    });
    let (c0, paper0, actual0, h0, t0) = before;
    drive(&mut sim, &parked, &workload, workload.run_phase().collect());

    drop(parked);
    let world = sim.into_world();
    let history = &world.history[h0..];
    let counters = world.fab.counters().delta(&c0);
    let last = history.iter().filter_map(|r| r.end).max().unwrap_or(t0);
    let duration_ns = last.saturating_sub(t0);
    let failed = history
        .iter()
        .filter(|r| !r.outcome.as_ref().is_some_and(|o| expected(r.kind, o)))
        .count() as u64;
    let report = RunReport {
        scheme,
        spec: cfg.workload.clone(),
        clients,
        ops_completed: history.len() as u64 - failed,
        failed_ops: failed,
        get: KindStats::of(history.iter().filter(|r| r.kind == OpKind::Get)),
        put: KindStats::of(history.iter().filter(|r| r.kind != OpKind::Get)),
        all: KindStats::of(history.iter()),
        paper_bytes: world.fab.nvm().write_bytes_paper() - paper0,
        actual_bytes: world.fab.nvm().write_bytes_actual() - actual0,
        counters,
        duration_ns,
        throughput_ops_per_s: if duration_ns == 0 {
            0.0
        } else {
            history.len() as f64 * 1e9 / duration_ns as f64
        },
        trace: world.fab.trace().map(<[TraceRecord]>::to_vec),
    };
    if let Some(path) = &opts.nvm_dump {
        world.fab.nvm().dump(path)?;
    }
    Ok(report)
}

/// Every scheme × mix × value size × client count of a configuration.
pub fn run_matrix(cfg: &HarnessConfig, opts: &RunOptions) -> Result<Vec<RunReport>, HarnessError> {
    let mut out = Vec::new();
    for &scheme in &cfg.schemes {
        for &mix in &cfg.mixes {
            for &value_size in &cfg.value_sizes {
                let spec = WorkloadSpec {
                    mix,
                    value_size,
                    ..cfg.workload.clone()
                };
                let run_cfg = cfg.for_run(&spec);
                for &clients in &cfg.clients {
                    out.push(run(scheme, &run_cfg, clients, opts)?);
                }
            }
        }
    }
    Ok(out)
}

/// Mixes in the order reports list them.
pub fn mix_order(m: Mix) -> usize {
    Mix::ALL.iter().position(|&x| x == m).unwrap_or(usize::MAX)
}

/// Recount every fabric counter from a trace and compare. Returns the
/// mismatches as `name: counter vs trace` lines.
pub fn audit_trace(trace: &[TraceRecord], counters: &FabricCounters) -> Result<(), Vec<String>> {
    let count = |f: &dyn Fn(&TraceRecord) -> bool| trace.iter().filter(|t| f(t)).count() as u64;
    let sum = |f: &dyn Fn(&TraceRecord) -> bool| {
        trace
            .iter()
            .filter(|t| f(t))
            .map(|t| t.len as u64)
            .sum::<u64>()
    };
    let is_write = |t: &TraceRecord| t.kind == "rdma_write" || t.kind == "rdma_write_with_imm";
    let mut checks = vec![
        (
            "server_cpu_events",
            counters.server_cpu_events,
            count(&|t| t.kind == "recv_completion"),
        ),
        (
            "one_sided_reads",
            counters.one_sided_reads,
            count(&|t| t.kind == "rdma_read"),
        ),
        (
            "one_sided_writes",
            counters.one_sided_writes,
            count(&is_write),
        ),
        (
            "writes_with_imm",
            counters.writes_with_imm,
            count(&|t| t.kind == "rdma_write_with_imm"),
        ),
        ("sends", counters.sends, count(&|t| t.kind == "send")),
        (
            "client_sends",
            counters.client_sends,
            count(&|t| t.kind == "send" && t.src != SERVER),
        ),
        (
            "background_steps",
            counters.background_steps,
            count(&|t| t.kind == "background"),
        ),
    ];
    // Failed reads return no bytes, so wire bytes only reconcile without errors.
    if counters.remote_errors == 0 {
        checks.push((
            "wire_bytes",
            counters.wire_bytes,
            sum(&|t| is_write(t) || t.kind == "send" || t.kind == "rdma_read"),
        ));
    }
    let bad: Vec<String> = checks
        .into_iter()
        .filter(|(_, a, b)| a != b)
        .map(|(n, a, b)| format!("{n}: counter {a} vs trace {b}"))
        .collect();
    if bad.is_empty() {
        Ok(())
    } else {
        Err(bad)
    }
}
