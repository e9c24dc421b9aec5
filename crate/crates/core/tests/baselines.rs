use erda::baselines::{new_sim, restart_sim, BaselineClient, BaselineConfig, BaselineServer};
use erda::codec::Scheme;
use erda::fabric::CostModel;
use erda::nvm::CrashModel;
use erda::sim::{OpKind, Outcome, Sim};

fn small_cfg() -> BaselineConfig {
    BaselineConfig {
        table_slots: 256,
        log_size: 1024,
        ring_slots: 4,
        max_object_size: 256,
        dest_size: 64 << 10,
    }
}

#[derive(Clone)]
enum Step {
    Put(&'static str, Vec<u8>),
    Get(&'static str),
    Del(&'static str),
}

fn spawn(sim: &mut Sim, scheme: Scheme, steps: Vec<Step>) -> usize {
    let ctx = sim.add_client();
    let ep = ctx.ep;
    sim.spawn(&ctx.clone(), async move {
        let mut c = BaselineClient::connect(ctx, scheme, 256).await.unwrap();
        for s in steps {
            match s {
                Step::Put(k, v) => {
                    c.put(k.as_bytes(), &v).await;
                }
                Step::Get(k) => {
                    c.get(k.as_bytes()).await;
                }
                Step::Del(k) => {
                    c.delete(k.as_bytes()).await;
                }
            }
        }
    });
    ep
}

fn outcomes(sim: &Sim, ep: usize, kind: OpKind) -> Vec<Outcome> {
    sim.history()
        .into_iter()
        .filter(|r| r.client == ep && r.kind == kind)
        .map(|r| r.outcome.unwrap())
        .collect()
}

fn paper(sim: &Sim) -> u64 {
    sim.with(|w| w.fab.nvm().write_bytes_paper())
}

#[test]
fn put_get_update_delete_for_both_schemes() {
    for scheme in [Scheme::Redo, Scheme::Raw] {
        let mut sim = new_sim(scheme, small_cfg(), CostModel::default(), 1).unwrap();
        let ep = spawn(
            &mut sim,
            scheme,
            vec![
                Step::Get("k"),
                Step::Put("k", b"v1".to_vec()),
                Step::Get("k"),
                Step::Put("k", b"v2".to_vec()),
                Step::Get("k"),
                Step::Del("k"),
                Step::Get("k"),
                Step::Del("k"),
            ],
        );
        sim.run();
        assert_eq!(
            outcomes(&sim, ep, OpKind::Get),
            vec![
                Outcome::NotFound,
                Outcome::Value(b"v1".to_vec()),
                Outcome::Value(b"v2".to_vec()),
                Outcome::NotFound
            ],
            "{scheme:?}"
        );
        assert_eq!(
            outcomes(&sim, ep, OpKind::Delete),
            vec![Outcome::Done, Outcome::NotFound],
            "{scheme:?}"
        );
        sim.with(|w| assert_eq!(w.server::<BaselineServer>().unapplied(), 0));
    }
}

#[test]
fn accounting_matches_closed_form() {
    for scheme in [Scheme::Redo, Scheme::Raw] {
        let mut sim = new_sim(scheme, small_cfg(), CostModel::default(), 1).unwrap();
        let key = "kkkkkkkk";
        spawn(&mut sim, scheme, vec![Step::Put(key, vec![1; 64])]);
        sim.run();
        let create = paper(&sim);
        // key + 8 metadata, 4 + N log record, N destination copy
        assert_eq!(create, 8 + 8 + 4 + 2 * 72, "{scheme:?}");
        spawn(&mut sim, scheme, vec![Step::Put(key, vec![2; 64])]);
        sim.run();
        assert_eq!(paper(&sim) - create, 4 + 2 * 72, "{scheme:?}");
        let before = paper(&sim);
        spawn(&mut sim, scheme, vec![Step::Del(key)]);
        sim.run();
        assert_eq!(paper(&sim) - before, 8 + 8, "{scheme:?}");
    }
}

#[test]
fn every_write_costs_server_cpu() {
    for scheme in [Scheme::Redo, Scheme::Raw] {
        let mut sim = new_sim(scheme, small_cfg(), CostModel::default(), 1).unwrap();
        spawn(&mut sim, scheme, vec![Step::Put("a", vec![0; 16])]);
        sim.run();
        let before = sim.with(|w| w.fab.counters());
        spawn(
            &mut sim,
            scheme,
            vec![Step::Put("a", vec![1; 16]), Step::Get("a")],
        );
        sim.run();
        let d = sim.with(|w| w.fab.counters()).delta(&before);
        // connect, the write request and the get, plus a background apply
        assert!(d.server_cpu_events >= 3, "{scheme:?}: {d:?}");
        assert!(d.background_steps >= 1, "{scheme:?}: {d:?}");
    }
}

#[test]
fn redo_log_wraps_and_keeps_values() {
    let mut sim = new_sim(Scheme::Redo, small_cfg(), CostModel::default(), 2).unwrap();
    let names = ["a", "b", "c", "d", "e", "f", "g", "h"];
    let mut steps = Vec::new();
    for round in 0..4u8 {
        for n in names {
            steps.push(Step::Put(n, vec![round; 150]));
        }
    }
    for n in names {
        steps.push(Step::Get(n));
    }
    let ep = spawn(&mut sim, Scheme::Redo, steps);
    sim.run();
    assert!(outcomes(&sim, ep, OpKind::Get)
        .iter()
        .all(|o| *o == Outcome::Value(vec![3; 150])));
}

#[test]
fn raw_ring_backpressure_with_many_writers() {
    let mut sim = new_sim(Scheme::Raw, small_cfg(), CostModel::default(), 5).unwrap();
    let keys = ["w0", "w1", "w2", "w3", "w4", "w5", "w6", "w7"];
    let eps: Vec<_> = keys
        .iter()
        .map(|k| {
            spawn(
                &mut sim,
                Scheme::Raw,
                vec![Step::Put(k, vec![9; 100]), Step::Get(k)],
            )
        })
        .collect();
    sim.run();
    for ep in eps {
        assert_eq!(
            outcomes(&sim, ep, OpKind::Get),
            vec![Outcome::Value(vec![9; 100])]
        );
    }
}

#[test]
fn crash_before_apply_replays_the_log() {
    for scheme in [Scheme::Redo, Scheme::Raw] {
        let mut sim = new_sim(scheme, small_cfg(), CostModel::default(), 3).unwrap();
        spawn(&mut sim, scheme, vec![Step::Put("key", vec![b'o'; 100])]);
        sim.run();
        let w = spawn(&mut sim, scheme, vec![Step::Put("key", vec![b'n'; 100])]);
        // Stop once the new record is in the log but not yet applied.
        if scheme == Scheme::Raw {
            // The whole object lands but the writer dies before its forcing read.
            sim.run_until(|world| !world.fab.in_flight_writes(w).is_empty());
            sim.crash_client(w, |f| f.len);
        } else {
            sim.run_until(|world| world.server::<BaselineServer>().unapplied() > 0);
        }
        sim.with(|w| assert!(w.server::<BaselineServer>().unapplied() > 0, "{scheme:?}"));
        // Make everything that landed durable, as a completed forcing read would.
        let mut world = sim.into_world();
        world.fab.force_all();
        let image = world.fab.crash_server(&CrashModel::prefix(0));
        let (mut sim, report) = restart_sim(image, CostModel::default(), 4).unwrap();
        assert_eq!(report.replayed, 1, "{scheme:?}");
        let r = spawn(&mut sim, scheme, vec![Step::Get("key")]);
        sim.run();
        assert_eq!(
            outcomes(&sim, r, OpKind::Get),
            vec![Outcome::Value(vec![b'n'; 100])],
            "{scheme:?}"
        );
    }
}

#[test]
fn raw_abandons_a_slot_whose_writer_died() {
    let mut sim = new_sim(Scheme::Raw, small_cfg(), CostModel::default(), 3).unwrap();
    spawn(
        &mut sim,
        Scheme::Raw,
        vec![Step::Put("key", vec![b'o'; 100])],
    );
    sim.run();
    let w = spawn(
        &mut sim,
        Scheme::Raw,
        vec![Step::Put("key", vec![b'n'; 100])],
    );
    sim.run_until(|world| !world.fab.in_flight_writes(w).is_empty());
    sim.crash_client(w, |f| f.len / 2);
    let r = spawn(
        &mut sim,
        Scheme::Raw,
        vec![
            Step::Get("key"),
            Step::Put("other", vec![1; 8]),
            Step::Get("other"),
        ],
    );
    sim.run();
    assert_eq!(
        outcomes(&sim, r, OpKind::Get),
        vec![Outcome::Value(vec![b'o'; 100]), Outcome::Value(vec![1; 8])]
    );
    sim.with(|w| assert_eq!(w.server::<BaselineServer>().stats().abandoned, 1));
}
