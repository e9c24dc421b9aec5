//! `cleantest`: fill one log head past the cleaning threshold, start
//! cleaning at a seeded moment while clients keep reading and writing, and
//! check the recorded history, the space the cleaner reclaimed and the read
//! path once cleaning is over.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::cleaner::CleanStats;
use crate::codec::{encode_object, Scheme};
use crate::erda::{self, ClientOptions, ErdaConfig, ErdaServer};
use crate::fabric::CostModel;
use crate::nvm::CrashModel;
use crate::sim::{OpKind, OpRecord, Outcome, Sim};

use super::oracle::check_history;
use super::{AnyClient, HarnessError};

#[derive(Clone, Debug)]
pub struct CleanTestSpec {
    pub seed: u64,
    pub clients: usize,
    pub keys: usize,
    /// Operations per client while cleaning may run.
    pub ops_per_client: usize,
    /// Fraction of those operations that are gets; the rest are puts.
    pub read_fraction: f64,
    pub cost: CostModel,
}

impl Default for CleanTestSpec {
    fn default() -> Self {
        CleanTestSpec {
            seed: 1,
            clients: 4,
            keys: 24,
            ops_per_client: 60,
            read_fraction: 0.5,
            cost: CostModel {
                jitter_ns: 300,
                ..CostModel::default()
            },
        }
    }
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct CleanTestReport {
    pub seed: u64,
    pub ops: u64,
    pub violations: u64,
    pub counterexample: Option<String>,
    pub cleaning: Option<CleanStats>,
    /// Bytes the cleaner says it reclaimed.
    pub reclaimed_bytes: u64,
    /// Bytes the recorded placements say it should have reclaimed.
    pub expected_reclaimed_bytes: u64,
    pub mean_latency_during_ns: f64,
    pub mean_latency_outside_ns: f64,
    /// One-sided reads per get after cleaning finished.
    pub post_reads_per_get: f64,
    /// Server CPU events those gets cost.
    pub post_cpu_events: u64,
    /// Final values survived a server crash and recovery.
    pub survives_restart: bool,
}

impl CleanTestReport {
    pub fn passed(&self) -> bool {
        self.violations == 0
            && self.cleaning.is_some()
            && self.reclaimed_bytes == self.expected_reclaimed_bytes
            && self.post_reads_per_get == 2.0
            && self.post_cpu_events == 0
            && self.survives_restart
    }
}

fn config() -> ErdaConfig {
    ErdaConfig {
        heads: 1,
        region_size: 4096,
        segment_size: 1024,
        pool_regions: 16,
        max_chain: 6,
        table_slots: 256,
        max_object_size: 256,
        clean_threshold: 0.75,
        auto_clean: false,
        clean_batch: 4,
    }
}

fn key(i: usize) -> Vec<u8> {
    format!("c{i:03}").into_bytes()
}

enum Step {
    Get(Vec<u8>),
    Put(Vec<u8>, Vec<u8>),
    Delete(Vec<u8>),
}

/// Connect a client and run `steps`, returning its endpoint.
fn spawn_steps(sim: &mut Sim, steps: Vec<Step>) -> usize {
    let ctx = sim.add_client();
    let ep = ctx.ep;
    sim.spawn(&ctx.clone(), async move {
        let Ok(mut c) = AnyClient::connect(ctx, Scheme::Erda, 256, ClientOptions::default()).await
        else {
            return;
        };
        for s in steps {
            match s {
                Step::Get(k) => c.get(&k).await,
                Step::Put(k, v) => c.put(&k, &v).await,
                Step::Delete(k) => c.delete(&k).await,
            };
        }
    });
    ep
}

fn occupancy(sim: &Sim) -> f64 {
    sim.with(|w| w.server::<ErdaServer>().occupancy(0))
}

/// Bytes that cleaning must drop: every record placed below the snapshot
/// except the newest one of each key still holding a value.
fn expected_reclaimed(history: &[OpRecord], st: &CleanStats) -> u64 {
    let mut total = 0;
    let mut newest: HashMap<&[u8], (u32, u64, bool)> = HashMap::new();
    for r in history {
        let Some(p) = r.placement else { continue };
        if r.kind == OpKind::Get || p.head != st.head || p.chain_offset >= st.snapshot {
            continue;
        }
        if r.start >= st.started_at {
            continue;
        }
        let value = if r.kind == OpKind::Put {
            r.value.as_deref()
        } else {
            None
        };
        let len = encode_object(&r.key, value).expect("encodable").len() as u64;
        total += len;
        let e = newest
            .entry(&r.key)
            .or_insert((p.chain_offset, len, value.is_some()));
        if p.chain_offset >= e.0 {
            *e = (p.chain_offset, len, value.is_some());
        }
    }
    let kept: u64 = newest.values().filter(|e| e.2).map(|e| e.1).sum();
    total - kept
}

fn mean_latency<'a>(ops: impl Iterator<Item = &'a OpRecord>) -> f64 {
    let (mut n, mut sum) = (0u64, 0u64);
    for r in ops {
        if let Some(end) = r.end {
            n += 1;
            sum += end - r.start;
        }
    }
    if n == 0 {
        0.0
    } else {
        sum as f64 / n as f64
    }
}

fn reads_of(sim: &Sim, ep: usize) -> Vec<Outcome> {
    sim.history()
        .into_iter()
        .filter(|r| r.client == ep && r.kind == OpKind::Get)
        .filter_map(|r| r.outcome)
        .collect()
}

pub fn cleantest(spec: &CleanTestSpec) -> Result<CleanTestReport, HarnessError> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut report = CleanTestReport {
        seed: spec.seed,
        ..CleanTestReport::default()
    };
    let cfg = config();
    let mut sim = erda::new_sim(cfg.clone(), spec.cost, spec.seed)?;
    let keys = spec.keys.max(1);

    // Fill with puts and the odd delete until the head is worth cleaning.
    let mut n = 0usize;
    let mut filler = |sim: &mut Sim, rng: &mut ChaCha8Rng| {
        let steps: Vec<Step> = (0..8)
            .map(|j| {
                let k = key(rng.gen_range(0..keys));
                if (n + j) % 7 == 6 {
                    Step::Delete(k)
                } else {
                    Step::Put(k, vec![(n + j) as u8; rng.gen_range(60..=200)])
                }
            })
            .collect();
        n += steps.len();
        spawn_steps(sim, steps);
    };
    let threshold = cfg.clean_threshold;
    let mut rounds = 0;
    while occupancy(&sim) < threshold {
        filler(&mut sim, &mut rng);
        sim.run();
        rounds += 1;
        if rounds > 600 {
            return Err(HarnessError::Erda(erda::ErdaError::Config(
                "head never reached the cleaning threshold".into(),
            )));
        }
    }

    // Concurrent gets and puts; cleaning starts at the first moment past a
    // seeded time when the head is above the threshold. Linking a region
    // drops the fill level, so more filler writes may be needed.
    for c in 0..spec.clients.max(1) {
        let steps: Vec<Step> = (0..spec.ops_per_client)
            .map(|i| {
                let k = key(rng.gen_range(0..keys));
                if rng.gen_bool(spec.read_fraction.clamp(0.0, 1.0)) {
                    Step::Get(k)
                } else {
                    let fill = (c * 64 + i) as u8;
                    Step::Put(k, vec![fill; rng.gen_range(20..=200)])
                }
            })
            .collect();
        spawn_steps(&mut sim, steps);
    }
    let start_at = sim.now() + rng.gen_range(5_000..60_000);
    let ready = |w: &crate::sim::World| {
        w.fab.now() >= start_at && w.server::<ErdaServer>().occupancy(0) >= threshold
    };
    while !sim.run_until(ready) {
        filler(&mut sim, &mut rng);
        rounds += 1;
        if rounds > 600 {
            return Err(HarnessError::Erda(erda::ErdaError::Config(
                "head never reached the cleaning threshold".into(),
            )));
        }
    }
    sim.with(|w| {
        let fab = &mut w.fab;
        let s: &mut ErdaServer = w.server.as_any_mut().downcast_mut().expect("Erda server");
        s.start_cleaning(fab, 0)
    })?;
    sim.run();

    let history = sim.history();
    let st = sim.with(|w| w.server::<ErdaServer>().stats().cleanings.first().cloned());
    report.ops = history.len() as u64;
    let violations = check_history(&history);
    report.violations = violations.len() as u64;
    if let Some(v) = violations.first() {
        let r = &history[v.op];
        report.counterexample = Some(format!(
            "get {:?} by client {} over [{}, {:?}] returned {:?}; allowed {} values",
            String::from_utf8_lossy(&v.key),
            r.client,
            r.start,
            r.end,
            v.outcome,
            v.allowed.len()
        ));
    }
    if let Some(st) = &st {
        report.reclaimed_bytes = st.reclaimed_bytes();
        report.expected_reclaimed_bytes = expected_reclaimed(&history, st);
        let during =
            |r: &&OpRecord| r.end.is_some_and(|e| e >= st.started_at) && r.start <= st.finished_at;
        let phase2 = history.iter().filter(|r| r.start + 100_000 >= start_at);
        report.mean_latency_during_ns = mean_latency(phase2.clone().filter(during));
        report.mean_latency_outside_ns = mean_latency(phase2.filter(|r| !during(r)));
    }
    report.cleaning = st;

    // Gets after cleaning: two one-sided reads each and no server CPU.
    let all_keys: Vec<Vec<u8>> = (0..keys).map(key).collect();
    let reader = sim.add_client();
    let ep = reader.ep;
    let rk = all_keys.clone();
    sim.spawn(&reader.clone(), async move {
        let Ok(mut c) =
            AnyClient::connect(reader.clone(), Scheme::Erda, 256, ClientOptions::default()).await
        else {
            return;
        };
        reader.sleep(1_000).await;
        for k in &rk {
            c.get(k).await;
        }
    });
    let connected = sim.run_until(|w| w.fab.now() > 0 && w.history.iter().any(|r| r.client == ep));
    let before = sim.with(|w| w.fab.counters());
    sim.run();
    let after = sim.with(|w| w.fab.counters()).delta(&before);
    let post: Vec<OpRecord> = sim
        .history()
        .into_iter()
        .filter(|r| r.client == ep && r.kind == OpKind::Get && r.outcome.is_some())
        .collect();
    let found = post
        .iter()
        .filter(|r| matches!(r.outcome, Some(Outcome::Value(_))))
        .collect::<Vec<_>>();
    report.post_reads_per_get = if found.is_empty() || !connected {
        0.0
    } else {
        found.iter().map(|r| r.one_sided_reads as f64).sum::<f64>() / found.len() as f64
    };
    report.post_cpu_events = after.server_cpu_events;
    let final_violations = check_history(&sim.history()).len() as u64;
    report.violations = report.violations.max(final_violations);
    let finals = reads_of(&sim, ep);

    // The same values after a crash and recovery.
    let image = sim
        .into_world()
        .fab
        .crash_server(&CrashModel::prefix(spec.seed));
    let (mut sim, _) = erda::restart_sim(image, spec.cost, spec.seed)?;
    let ep2 = spawn_steps(&mut sim, all_keys.into_iter().map(Step::Get).collect());
    sim.run();
    report.survives_restart = !finals.is_empty() && reads_of(&sim, ep2) == finals;
    Ok(report)
}
