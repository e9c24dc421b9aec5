use erda::codec::{encode_object, unpack_atomic};
use erda::erda::{new_sim, restart_sim, ClientOptions, ErdaClient, ErdaConfig, ErdaServer};
use erda::fabric::CostModel;
use erda::nvm::CrashModel;
use erda::sim::{OpKind, Outcome, Sim};
use erda::wire::{self, Writer};

fn small_cfg() -> ErdaConfig {
    ErdaConfig {
        heads: 1,
        region_size: 4096,
        segment_size: 1024,
        pool_regions: 8,
        max_chain: 4,
        table_slots: 256,
        max_object_size: 256,
        clean_threshold: 0.75,
        auto_clean: false,
        clean_batch: 4,
    }
}

#[derive(Clone)]
enum Step {
    Put(&'static str, Vec<u8>),
    Get(&'static str),
    Del(&'static str),
    Sleep(u64),
}

fn spawn(sim: &mut Sim, steps: Vec<Step>) -> usize {
    spawn_with(sim, ClientOptions::default(), steps)
}

fn spawn_with(sim: &mut Sim, opts: ClientOptions, steps: Vec<Step>) -> usize {
    let ctx = sim.add_client();
    let ep = ctx.ep;
    sim.spawn(&ctx.clone(), async move {
        let mut c = ErdaClient::connect(ctx, opts).await.unwrap();
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
                Step::Sleep(ns) => c.ctx().sleep(ns).await,
            }
        }
    });
    ep
}

fn gets(sim: &Sim, ep: usize) -> Vec<Outcome> {
    sim.history()
        .into_iter()
        .filter(|r| r.client == ep && r.kind == OpKind::Get)
        .map(|r| r.outcome.unwrap())
        .collect()
}

#[test]
fn put_get_update_delete() {
    let mut sim = new_sim(small_cfg(), CostModel::default(), 1).unwrap();
    let ep = spawn(
        &mut sim,
        vec![
            Step::Get("k"),
            Step::Put("k", b"v1".to_vec()),
            Step::Get("k"),
            Step::Put("k", b"v2".to_vec()),
            Step::Get("k"),
            Step::Del("k"),
            Step::Get("k"),
            Step::Del("k"),
            Step::Del("never"),
        ],
    );
    sim.run();
    assert_eq!(
        gets(&sim, ep),
        vec![
            Outcome::NotFound,
            Outcome::Value(b"v1".to_vec()),
            Outcome::Value(b"v2".to_vec()),
            Outcome::NotFound
        ]
    );
    let dels: Vec<_> = sim
        .history()
        .into_iter()
        .filter(|r| r.kind == OpKind::Delete)
        .map(|r| r.outcome)
        .collect();
    assert_eq!(
        dels,
        vec![
            Some(Outcome::Done),
            Some(Outcome::NotFound),
            Some(Outcome::NotFound)
        ]
    );
}

#[test]
fn two_clients_get_distinct_ids() {
    let mut sim = new_sim(small_cfg(), CostModel::default(), 1).unwrap();
    let ids = std::rc::Rc::new(std::cell::RefCell::new(Vec::new()));
    for _ in 0..2 {
        let ctx = sim.add_client();
        let ids = ids.clone();
        sim.spawn(&ctx.clone(), async move {
            let c = ErdaClient::connect(ctx, ClientOptions::default())
                .await
                .unwrap();
            ids.borrow_mut().push(c.session().client_id);
        });
    }
    sim.run();
    let ids = ids.borrow();
    assert_eq!(ids.len(), 2);
    assert_ne!(ids[0], ids[1]);
}

#[test]
fn reads_take_two_one_sided_reads_and_no_server_cpu() {
    let mut sim = new_sim(small_cfg(), CostModel::default(), 1).unwrap();
    spawn(&mut sim, vec![Step::Put("a", vec![7; 40])]);
    sim.run();
    let before = sim.with(|w| w.fab.counters());
    let ep = spawn(&mut sim, vec![Step::Get("a"), Step::Get("a")]);
    sim.run();
    let d = sim.with(|w| w.fab.counters()).delta(&before);
    // connect is the only server CPU event for the reader
    assert_eq!(d.server_cpu_events, 1);
    assert_eq!(d.one_sided_reads, 4);
    assert!(sim
        .history()
        .iter()
        .filter(|r| r.client == ep)
        .all(|r| r.one_sided_reads == 2));
}

#[test]
fn update_accounting_matches_closed_form() {
    let mut sim = new_sim(small_cfg(), CostModel::default(), 1).unwrap();
    let key = "kkkkkkkk";
    spawn(&mut sim, vec![Step::Put(key, vec![1; 64])]);
    sim.run();
    let create = sim.with(|w| w.fab.nvm().write_bytes_paper());
    // create: key + 5 metadata, 5 + N object
    assert_eq!(create, 8 + 5 + 5 + 72);
    spawn(&mut sim, vec![Step::Put(key, vec![2; 64])]);
    sim.run();
    let update = sim.with(|w| w.fab.nvm().write_bytes_paper()) - create;
    assert_eq!(update, 81);
    spawn(&mut sim, vec![Step::Del(key)]);
    sim.run();
    let del = sim.with(|w| w.fab.nvm().write_bytes_paper()) - create - update;
    assert_eq!(del, 17);
}

/// Crash a writer mid-update so only the first half of its object lands.
fn torn_update(cfg: ErdaConfig) -> (Sim, usize) {
    let mut sim = new_sim(cfg, CostModel::default(), 3).unwrap();
    spawn(&mut sim, vec![Step::Put("key", vec![b'o'; 200])]);
    sim.run();
    let w = spawn(&mut sim, vec![Step::Put("key", vec![b'n'; 200])]);
    sim.run_until(|w_| !w_.fab.in_flight_writes(w).iter().all(|f| f.len < 100));
    sim.crash_client(w, |f| f.len / 2);
    sim.run();
    (sim, w)
}

#[test]
fn torn_update_falls_back_and_repairs() {
    let (mut sim, _) = torn_update(small_cfg());
    // Let the writer's lease run out so the repair is honoured.
    let r = spawn(
        &mut sim,
        vec![
            Step::Sleep(100_000),
            Step::Get("key"),
            Step::Sleep(20_000),
            Step::Get("key"),
        ],
    );
    sim.run();
    let got = gets(&sim, r);
    assert_eq!(got[0], Outcome::Recovered(vec![b'o'; 200]));
    assert_eq!(got[1], Outcome::Value(vec![b'o'; 200]));
    // first get: entry + new (1 + R retries) + entry... then old
    let first = sim
        .history()
        .into_iter()
        .find(|h| h.client == r && h.kind == OpKind::Get)
        .unwrap();
    assert_eq!(first.one_sided_reads, 2 * 4 + 1);
    sim.with(|w| {
        let s = w.server::<ErdaServer>();
        assert_eq!(s.stats().repairs_applied, 1);
        let (_, e) = s.index().lookup(w.fab.nvm(), b"key").unwrap().unwrap();
        let a = unpack_atomic(e.word);
        assert_eq!(a.new_offset(), a.old_offset());
    });
}

/// Send a raw repair request for `key` carrying `word`.
fn send_repair(sim: &mut Sim, key: &[u8], word: u64) {
    let ctx = sim.add_client();
    let msg = Writer::new()
        .u8(wire::OP_REPAIR)
        .key(key)
        .u64(word)
        .finish();
    sim.spawn(&ctx.clone(), async move {
        ctx.send(msg);
    });
    sim.run();
}

fn current_word(sim: &Sim, key: &[u8]) -> u64 {
    sim.with(|w| {
        w.server::<ErdaServer>()
            .index()
            .lookup(w.fab.nvm(), key)
            .unwrap()
            .unwrap()
            .1
            .word
    })
}

#[test]
fn repair_is_skipped_while_the_writer_may_still_be_busy() {
    let mut sim = new_sim(small_cfg(), CostModel::default(), 3).unwrap();
    spawn(&mut sim, vec![Step::Put("key", vec![b'o'; 200])]);
    sim.run();
    let w = spawn(&mut sim, vec![Step::Put("key", vec![b'n'; 200])]);
    sim.run_until(|w_| !w_.fab.in_flight_writes(w).is_empty());
    sim.crash_client(w, |f| f.len / 2);
    let word = current_word(&sim, b"key");
    send_repair(&mut sim, b"key", word);
    sim.with(|w| assert_eq!(w.server::<ErdaServer>().stats().repairs_skipped, 1));
    assert_eq!(current_word(&sim, b"key"), word);
}

#[test]
fn repair_with_a_stale_word_is_skipped_and_repair_is_idempotent() {
    let (mut sim, _) = torn_update(small_cfg());
    let torn = current_word(&sim, b"key");
    spawn(
        &mut sim,
        vec![Step::Sleep(100_000), Step::Put("key", b"newer".to_vec())],
    );
    sim.run();
    send_repair(&mut sim, b"key", torn);
    sim.with(|w| assert_eq!(w.server::<ErdaServer>().stats().repairs_skipped, 1));
    let r = spawn(&mut sim, vec![Step::Get("key")]);
    sim.run();
    assert_eq!(gets(&sim, r), vec![Outcome::Value(b"newer".to_vec())]);

    let (mut sim, _) = torn_update(small_cfg());
    let torn = current_word(&sim, b"key");
    spawn(&mut sim, vec![Step::Sleep(100_000)]);
    sim.run();
    send_repair(&mut sim, b"key", torn);
    let repaired = current_word(&sim, b"key");
    let a = unpack_atomic(repaired);
    assert_eq!(
        (a.new_offset(), a.new_tag),
        (
            unpack_atomic(torn).old_offset(),
            unpack_atomic(torn).new_tag
        )
    );
    send_repair(&mut sim, b"key", repaired);
    assert_eq!(current_word(&sim, b"key"), repaired);
}

#[test]
fn without_checksums_a_torn_object_is_returned() {
    let (mut sim, _) = torn_update(small_cfg());
    let opts = ClientOptions {
        verify_checksums: false,
        ..ClientOptions::default()
    };
    let r = spawn_with(&mut sim, opts, vec![Step::Get("key")]);
    sim.run();
    match &gets(&sim, r)[0] {
        Outcome::Value(v) => assert!(v != &vec![b'o'; 200] && v != &vec![b'n'; 200]),
        other => panic!("expected a torn value, got {other:?}"),
    }
}

#[test]
fn torn_create_reads_as_not_found() {
    let mut sim = new_sim(small_cfg(), CostModel::default(), 3).unwrap();
    let w = spawn(&mut sim, vec![Step::Put("fresh", vec![1; 200])]);
    sim.run_until(|w_| !w_.fab.in_flight_writes(w).iter().all(|f| f.len < 100));
    sim.crash_client(w, |f| f.len / 2);
    let r = spawn(&mut sim, vec![Step::Sleep(50_000), Step::Get("fresh")]);
    sim.run();
    assert_eq!(gets(&sim, r), vec![Outcome::NotFound]);
}

#[test]
fn server_restart_repairs_torn_tail() {
    let (sim, _) = torn_update(small_cfg());
    let world = sim.into_world();
    let image = world.fab.crash_server(&CrashModel::prefix(0));
    let (mut sim, report) = restart_sim(image, CostModel::default(), 4).unwrap();
    assert_eq!(report.repaired, vec![b"key".to_vec()]);
    assert!(report.removed.is_empty() && report.lost.is_empty());
    let expected_tail = encode_object(b"key", Some(&[b'o'; 200])).unwrap().len() as u32;
    assert_eq!(report.last_written, vec![expected_tail]);
    let r = spawn(
        &mut sim,
        vec![
            Step::Get("key"),
            Step::Put("key", b"x".to_vec()),
            Step::Get("key"),
        ],
    );
    sim.run();
    assert_eq!(
        gets(&sim, r),
        vec![
            Outcome::Value(vec![b'o'; 200]),
            Outcome::Value(b"x".to_vec())
        ]
    );
}

#[test]
fn recovery_of_a_clean_image_changes_nothing() {
    let mut sim = new_sim(small_cfg(), CostModel::default(), 1).unwrap();
    spawn(
        &mut sim,
        vec![
            Step::Put("a", b"1".to_vec()),
            Step::Put("b", b"2".to_vec()),
            Step::Put("a", b"3".to_vec()),
        ],
    );
    sim.run();
    let image = sim.into_world().fab.crash_server(&CrashModel::prefix(0));
    let before = image.durable_image().to_vec();
    let (sim, report) = restart_sim(image, CostModel::default(), 1).unwrap();
    assert!(
        report.repaired.is_empty() && report.removed.is_empty() && report.rolled_back.is_empty()
    );
    let after = sim.into_world().fab.into_nvm();
    assert_eq!(after.durable_image(), &before[..]);
}

#[test]
fn chain_grows_and_clients_follow() {
    let mut cfg = small_cfg();
    cfg.heads = 2;
    let mut sim = new_sim(cfg, CostModel::default(), 1).unwrap();
    let steps: Vec<Step> = (0..40)
        .map(|i| Step::Put(["a", "b", "c", "d"][i % 4], vec![i as u8; 150]))
        .collect();
    spawn(&mut sim, steps);
    let r = spawn(
        &mut sim,
        vec![Step::Sleep(2_000_000), Step::Get("a"), Step::Get("d")],
    );
    sim.run();
    assert_eq!(
        gets(&sim, r),
        vec![Outcome::Value(vec![36; 150]), Outcome::Value(vec![39; 150])]
    );
    sim.with(|w| {
        let s = w.server::<ErdaServer>();
        assert!(s.chain_regions(0).len() + s.chain_regions(1).len() > 2);
    });
}

#[test]
fn cleaning_reclaims_and_preserves_values() {
    let mut sim = new_sim(small_cfg(), CostModel::default(), 1).unwrap();
    let mut steps = Vec::new();
    for i in 0..16u8 {
        steps.push(Step::Put(["a", "b", "c"][i as usize % 3], vec![i; 190]));
    }
    steps.push(Step::Del("c"));
    spawn(&mut sim, steps);
    sim.run();
    let occ = sim.with(|w| w.server::<ErdaServer>().occupancy(0));
    assert!(occ >= 0.75, "occupancy {occ}");
    sim.with(|w| {
        let fab = &mut w.fab;
        let s: &mut ErdaServer = w.server.as_any_mut().downcast_mut().unwrap();
        s.start_cleaning(fab, 0).unwrap();
    });
    let r = spawn(
        &mut sim,
        vec![
            Step::Get("a"),
            Step::Put("b", vec![99; 10]),
            Step::Sleep(400_000),
            Step::Get("a"),
            Step::Get("b"),
            Step::Get("c"),
        ],
    );
    sim.run();
    assert_eq!(
        gets(&sim, r),
        vec![
            Outcome::Value(vec![15; 190]),
            Outcome::Value(vec![15; 190]),
            Outcome::Value(vec![99; 10]),
            Outcome::NotFound
        ]
    );
    sim.with(|w| {
        let s = w.server::<ErdaServer>();
        assert!(s.cleaning_head().is_none());
        let st = &s.stats().cleanings[0];
        assert_eq!(st.merged_records, 2);
        // key a and b latest pre-snapshot copies survive, the rest is reclaimed
        let rec = encode_object(b"a", Some(&[0; 190])).unwrap().len() as u64;
        assert_eq!(st.merged_bytes, 2 * rec);
        assert_eq!(st.reclaimed_bytes(), st.pre_snapshot_bytes - 2 * rec);
        assert!(s.index().lookup(w.fab.nvm(), b"c").unwrap().is_none());
    });
    // after cleaning, reads are one-sided again
    let r2 = spawn(&mut sim, vec![Step::Get("a")]);
    let before = sim.with(|w| w.fab.counters());
    sim.run();
    let d = sim.with(|w| w.fab.counters()).delta(&before);
    assert_eq!(d.server_cpu_events, 1);
    let last = sim.history().into_iter().rfind(|h| h.client == r2).unwrap();
    assert_eq!(last.one_sided_reads, 2);
}

#[test]
fn cleaning_below_threshold_is_rejected() {
    let mut sim = new_sim(small_cfg(), CostModel::default(), 1).unwrap();
    spawn(&mut sim, vec![Step::Put("a", b"1".to_vec())]);
    sim.run();
    sim.with(|w| {
        let fab = &mut w.fab;
        let s: &mut ErdaServer = w.server.as_any_mut().downcast_mut().unwrap();
        assert!(s.start_cleaning(fab, 0).is_err());
    });
}
