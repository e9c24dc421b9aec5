use erda::codec::Scheme;
use erda::harness::oracle::check_history;
use erda::harness::{
    audit_trace, cleantest, crashtest, merge_csv, run, CleanTestSpec, CrashScenario, CrashTestSpec,
    HarnessConfig, RunOptions, CSV_HEADER,
};
use erda::nvm::NvmDevice;
use erda::sim::{OpKind, OpRecord, Outcome};
use erda::workload::{Mix, WorkloadSpec};
use proptest::prelude::*;

fn small(mix: Mix, value_size: usize) -> HarnessConfig {
    let spec = WorkloadSpec {
        mix,
        value_size,
        key_count: 200,
        op_count: 600,
        ..WorkloadSpec::default()
    };
    HarnessConfig::default().for_run(&spec)
}

#[test]
fn identical_seeds_give_identical_csv() {
    let cfg = small(Mix::YcsbA, 64);
    for scheme in Scheme::ALL {
        let a = run(scheme, &cfg, 3, &RunOptions::default()).unwrap();
        let b = run(scheme, &cfg, 3, &RunOptions::default()).unwrap();
        assert_eq!(a.csv_rows(), b.csv_rows());
        assert_eq!(a.failed_ops, 0);
    }
}

#[test]
fn different_seeds_change_the_schedule() {
    let mut cfg = small(Mix::YcsbA, 64);
    let a = run(Scheme::Erda, &cfg, 2, &RunOptions::default()).unwrap();
    cfg.workload.seed = 2;
    let b = run(Scheme::Erda, &cfg, 2, &RunOptions::default()).unwrap();
    assert_ne!(a.csv_rows(), b.csv_rows());
}

#[test]
fn trace_recounts_every_counter() {
    let opts = RunOptions {
        trace: true,
        nvm_dump: None,
    };
    for scheme in Scheme::ALL {
        let r = run(scheme, &small(Mix::YcsbB, 128), 2, &opts).unwrap();
        let trace = r.trace.as_deref().unwrap();
        assert!(!trace.is_empty());
        audit_trace(trace, &r.counters).unwrap();
        let mut off = r.counters;
        off.server_cpu_events += 1;
        assert!(audit_trace(trace, &off).is_err());
    }
}

#[test]
fn update_bytes_per_write_follow_the_formulas() {
    // N = 8-byte key + 256-byte value; the run phase only updates.
    let n = 8 + 256;
    let cfg = small(Mix::UpdateOnly, 256);
    let erda = run(Scheme::Erda, &cfg, 1, &RunOptions::default()).unwrap();
    assert_eq!(erda.paper_bytes_per_write(), (9 + n) as f64);
    for scheme in [Scheme::Redo, Scheme::Raw] {
        let r = run(scheme, &cfg, 1, &RunOptions::default()).unwrap();
        assert_eq!(r.paper_bytes_per_write(), (4 + 2 * n) as f64);
    }
}

#[test]
fn run_dumps_a_loadable_image() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("erda.img");
    let opts = RunOptions {
        trace: false,
        nvm_dump: Some(path.clone()),
    };
    let r = run(Scheme::Erda, &small(Mix::YcsbA, 64), 1, &opts).unwrap();
    assert_eq!(r.failed_ops, 0);
    let dev = NvmDevice::load(&path).unwrap();
    assert!(dev.durable_image().iter().any(|&b| b != 0));
}

#[test]
fn merged_csv_keeps_one_row_per_key() {
    let a = run(
        Scheme::Erda,
        &small(Mix::YcsbC, 64),
        1,
        &RunOptions::default(),
    )
    .unwrap();
    let b = run(
        Scheme::Raw,
        &small(Mix::YcsbC, 64),
        1,
        &RunOptions::default(),
    )
    .unwrap();
    let text = |r: &erda::harness::RunReport| format!("{CSV_HEADER}\n{}", r.csv_rows());
    let merged = merge_csv(&[text(&a), text(&b), text(&a)]).unwrap();
    assert_eq!(merged.lines().count(), 1 + 6);
}

#[test]
fn redo_and_raw_survive_every_crash_point() {
    for scheme in [Scheme::Redo, Scheme::Raw] {
        for scenario in [
            CrashScenario::ClientCrashMidPut,
            CrashScenario::ServerCrashRestart,
        ] {
            let r = crashtest(&CrashTestSpec {
                scheme,
                scenario,
                schedules: 40,
                ..CrashTestSpec::default()
            })
            .unwrap();
            assert!(r.passed(), "{r:#?}");
        }
    }
}

#[test]
fn cleaning_finish_is_cut_in_every_phase() {
    let r = crashtest(&CrashTestSpec {
        scheme: Scheme::Erda,
        scenario: CrashScenario::CrashDuringCleaningFinish,
        ..CrashTestSpec::default()
    })
    .unwrap();
    assert!(r.passed(), "{r:#?}");
    assert!(r.phases_cut.len() >= 3, "{:?}", r.phases_cut);
}

#[test]
fn write_heavy_cleaning_slows_concurrent_ops() {
    for seed in 1..=5 {
        let r = cleantest(&CleanTestSpec {
            seed,
            read_fraction: 0.0,
            ..CleanTestSpec::default()
        })
        .unwrap();
        assert!(r.passed(), "{r:#?}");
        assert!(
            r.mean_latency_during_ns >= r.mean_latency_outside_ns,
            "{} < {}",
            r.mean_latency_during_ns,
            r.mean_latency_outside_ns
        );
    }
}

fn record(
    client: usize,
    kind: OpKind,
    key: u8,
    value: Option<u8>,
    start: u64,
    end: u64,
    outcome: Outcome,
) -> OpRecord {
    OpRecord {
        client,
        kind,
        key: vec![key],
        value: value.map(|v| vec![v]),
        start,
        end: Some(end),
        outcome: Some(outcome),
        placement: None,
        one_sided_reads: 0,
    }
}

proptest! {
    /// A sequential history whose gets return the latest write is always
    /// accepted, and changing any get's result to a never-written value is
    /// always rejected.
    #[test]
    fn oracle_accepts_exactly_the_sequential_truth(
        ops in prop::collection::vec((0u8..3, 0u8..3, 0u8..50), 1..40),
        corrupt in any::<prop::sample::Index>(),
    ) {
        let mut latest: [Option<u8>; 3] = [None; 3];
        let mut history = Vec::new();
        for (i, &(kind, key, v)) in ops.iter().enumerate() {
            let t = i as u64 * 10;
            let k = key as usize;
            history.push(match kind {
                0 => {
                    latest[k] = Some(v);
                    record(0, OpKind::Put, key, Some(v), t, t + 5, Outcome::Done)
                }
                1 => {
                    latest[k] = None;
                    record(0, OpKind::Delete, key, None, t, t + 5, Outcome::Done)
                }
                _ => {
                    let o = match latest[k] {
                        Some(v) => Outcome::Value(vec![v]),
                        None => Outcome::NotFound,
                    };
                    record(0, OpKind::Get, key, None, t, t + 5, o)
                }
            });
        }
        prop_assert!(check_history(&history).is_empty());
        let gets: Vec<usize> = (0..history.len()).filter(|&i| history[i].kind == OpKind::Get).collect();
        if !gets.is_empty() {
            let g = gets[corrupt.index(gets.len())];
            history[g].outcome = Some(Outcome::Value(vec![200]));
            prop_assert!(!check_history(&history).is_empty());
        }
    }
}
