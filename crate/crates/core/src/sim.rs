//! Single-threaded simulation driver.
//!
//! Client logic is written as ordinary `async` code against [`ClientCtx`]; each
//! client is one task. The driver pulls upcalls out of the fabric, files
//! deliveries into the target client's mailbox and polls that client's task,
//! or runs the server logic for CPU upcalls. Nothing here uses a real waker:
//! a task is only ever polled when something was delivered to it.

use std::any::Any;
use std::cell::RefCell;
use std::collections::{HashMap, VecDeque};
use std::future::Future;
use std::pin::Pin;
use std::rc::Rc;
use std::task::{Context, Poll, Waker};

use serde::Serialize;

use crate::fabric::{
    Completion, Delivery, EndpointId, Fabric, FabricError, InFlightWrite, Upcall, SERVER,
};
use crate::wire;

/// Server-side protocol logic, run on the simulated server CPU.
pub trait ServerLogic: Any {
    fn on_completion(&mut self, fab: &mut Fabric, c: Completion);
    /// One slice of background work (log apply, cleaning, polling).
    fn on_background(&mut self, fab: &mut Fabric);
    fn wants_background(&self, fab: &Fabric) -> bool;
    fn as_any(&self) -> &dyn Any;
    fn as_any_mut(&mut self) -> &mut dyn Any;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum OpKind {
    Get,
    Put,
    Delete,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub enum Outcome {
    Done,
    Value(Vec<u8>),
    /// A previous version, returned because the latest one failed verification.
    Recovered(Vec<u8>),
    NotFound,
    DataLoss,
    Failed(String),
}

impl Outcome {
    /// The value a get observed, treating a recovered old version as a value.
    pub fn observed(&self) -> Option<Option<&[u8]>> {
        match self {
            Outcome::Value(v) | Outcome::Recovered(v) => Some(Some(v)),
            Outcome::NotFound => Some(None),
            _ => None,
        }
    }
}

/// Where a write's record was placed, as reported to the writing client.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Placement {
    pub head: u8,
    pub chain_offset: u32,
    /// Absolute device address of the record.
    pub addr: u64,
    /// Chain generation of the head the client targeted.
    pub generation: u32,
    /// Written by the client itself over a one-sided write.
    pub one_sided: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct OpRecord {
    pub client: EndpointId,
    pub kind: OpKind,
    pub key: Vec<u8>,
    pub value: Option<Vec<u8>>,
    pub start: u64,
    pub end: Option<u64>,
    pub outcome: Option<Outcome>,
    pub placement: Option<Placement>,
    /// One-sided reads the op issued.
    pub one_sided_reads: u32,
}

#[derive(Debug, Default)]
struct Mailbox {
    done: HashMap<u64, Delivery>,
    replies: VecDeque<Vec<u8>>,
    notes: VecDeque<Vec<u8>>,
}

pub struct World {
    pub fab: Fabric,
    pub server: Box<dyn ServerLogic>,
    mailboxes: HashMap<EndpointId, Mailbox>,
    pub history: Vec<OpRecord>,
}

impl World {
    pub fn server<T: 'static>(&self) -> &T {
        self.server.as_any().downcast_ref().expect("server type")
    }

    pub fn server_mut<T: 'static>(&mut self) -> &mut T {
        self.server
            .as_any_mut()
            .downcast_mut()
            .expect("server type")
    }

    fn deliver(&mut self, ep: EndpointId, delivery: Delivery) {
        let Some(mb) = self.mailboxes.get_mut(&ep) else {
            return;
        };
        match delivery {
            Delivery::Recv { payload } if wire::is_notification(&payload) => {
                mb.notes.push_back(payload)
            }
            Delivery::Recv { payload } => mb.replies.push_back(payload),
            Delivery::ReadDone { tag, .. }
            | Delivery::WriteAck { tag }
            | Delivery::Failed { tag, .. }
            | Delivery::Timer { tag } => {
                mb.done.insert(tag, delivery);
            }
        }
    }
}

type Task = Pin<Box<dyn Future<Output = ()>>>;

/// Handle a client task uses to talk to the fabric.
#[derive(Clone)]
pub struct ClientCtx {
    world: Rc<RefCell<World>>,
    pub ep: EndpointId,
}

struct WaitTag {
    world: Rc<RefCell<World>>,
    ep: EndpointId,
    tag: u64,
}

impl Future for WaitTag {
    type Output = Delivery;
    fn poll(self: Pin<&mut Self>, _: &mut Context<'_>) -> Poll<Delivery> {
        let mut w = self.world.borrow_mut();
        match w
            .mailboxes
            .get_mut(&self.ep)
            .and_then(|mb| mb.done.remove(&self.tag))
        {
            Some(d) => Poll::Ready(d),
            None => Poll::Pending,
        }
    }
}

struct WaitReply {
    world: Rc<RefCell<World>>,
    ep: EndpointId,
    send_tag: u64,
}

impl Future for WaitReply {
    type Output = Result<Vec<u8>, FabricError>;
    fn poll(self: Pin<&mut Self>, _: &mut Context<'_>) -> Poll<Self::Output> {
        let mut w = self.world.borrow_mut();
        let Some(mb) = w.mailboxes.get_mut(&self.ep) else {
            return Poll::Pending;
        };
        if let Some(Delivery::Failed { error, .. }) = mb.done.remove(&self.send_tag) {
            return Poll::Ready(Err(error));
        }
        match mb.replies.pop_front() {
            Some(r) => Poll::Ready(Ok(r)),
            None => Poll::Pending,
        }
    }
}

impl ClientCtx {
    pub fn now(&self) -> u64 {
        self.world.borrow().fab.now()
    }

    pub fn with_world<R>(&self, f: impl FnOnce(&mut World) -> R) -> R {
        f(&mut self.world.borrow_mut())
    }

    fn wait(&self, tag: u64) -> WaitTag {
        WaitTag {
            world: self.world.clone(),
            ep: self.ep,
            tag,
        }
    }

    pub async fn read(&self, addr: u64, len: usize, rkey: u32) -> Result<Vec<u8>, FabricError> {
        let tag = self
            .world
            .borrow_mut()
            .fab
            .post_rdma_read(self.ep, addr, len, rkey);
        match self.wait(tag).await {
            Delivery::ReadDone { data, .. } => Ok(data),
            Delivery::Failed { error, .. } => Err(error),
            other => unreachable!("read completed with {other:?}"),
        }
    }

    pub async fn write(
        &self,
        addr: u64,
        data: Vec<u8>,
        rkey: u32,
        imm: Option<u32>,
        paper_bytes: u64,
    ) -> Result<(), FabricError> {
        let tag = self.world.borrow_mut().fab.post_rdma_write(
            self.ep,
            addr,
            data,
            rkey,
            imm,
            paper_bytes,
        );
        match self.wait(tag).await {
            Delivery::WriteAck { .. } => Ok(()),
            Delivery::Failed { error, .. } => Err(error),
            other => unreachable!("write completed with {other:?}"),
        }
    }

    /// Fire-and-forget send to the server.
    pub fn send(&self, payload: Vec<u8>) -> u64 {
        self.world
            .borrow_mut()
            .fab
            .post_send(self.ep, SERVER, payload)
    }

    /// Wait for the next reply; `send_tag` identifies the request whose
    /// failure should abort the wait.
    pub async fn reply(&self, send_tag: u64) -> Result<Vec<u8>, FabricError> {
        WaitReply {
            world: self.world.clone(),
            ep: self.ep,
            send_tag,
        }
        .await
    }

    /// Send a request and wait for its reply.
    pub async fn call(&self, payload: Vec<u8>) -> Result<Vec<u8>, FabricError> {
        let tag = self.send(payload);
        self.reply(tag).await
    }

    pub async fn sleep(&self, ns: u64) {
        let tag = self.world.borrow_mut().fab.post_timer(self.ep, ns);
        self.wait(tag).await;
    }

    /// Unsolicited server pushes received so far.
    pub fn take_notes(&self) -> Vec<Vec<u8>> {
        let mut w = self.world.borrow_mut();
        w.mailboxes
            .get_mut(&self.ep)
            .map(|mb| mb.notes.drain(..).collect())
            .unwrap_or_default()
    }

    /// Open a history record for an op; returns its index.
    pub fn begin_op(&self, kind: OpKind, key: &[u8], value: Option<&[u8]>) -> usize {
        let mut w = self.world.borrow_mut();
        let start = w.fab.now();
        w.history.push(OpRecord {
            client: self.ep,
            kind,
            key: key.to_vec(),
            value: value.map(<[u8]>::to_vec),
            start,
            end: None,
            outcome: None,
            placement: None,
            one_sided_reads: 0,
        });
        w.history.len() - 1
    }

    pub fn place_op(&self, idx: usize, placement: Placement) {
        self.world.borrow_mut().history[idx].placement = Some(placement);
    }

    pub fn count_read(&self, idx: usize) {
        self.world.borrow_mut().history[idx].one_sided_reads += 1;
    }

    pub fn end_op(&self, idx: usize, outcome: Outcome) {
        let mut w = self.world.borrow_mut();
        let now = w.fab.now();
        let rec = &mut w.history[idx];
        rec.end = Some(now);
        rec.outcome = Some(outcome);
    }
}

pub struct Sim {
    world: Rc<RefCell<World>>,
    tasks: HashMap<EndpointId, Task>,
}

impl Sim {
    pub fn new(fab: Fabric, server: Box<dyn ServerLogic>) -> Self {
        let world = World {
            fab,
            server,
            mailboxes: HashMap::new(),
            history: Vec::new(),
        };
        let mut sim = Sim {
            world: Rc::new(RefCell::new(world)),
            tasks: HashMap::new(),
        };
        sim.kick_server();
        sim
    }

    /// Re-check whether the server wants background time, e.g. after its
    /// state was changed from outside a CPU upcall.
    pub fn kick_server(&mut self) {
        let mut w = self.world.borrow_mut();
        let World { fab, server, .. } = &mut *w;
        let bg = server.wants_background(fab);
        fab.set_background(bg);
    }

    pub fn with<R>(&self, f: impl FnOnce(&mut World) -> R) -> R {
        f(&mut self.world.borrow_mut())
    }

    pub fn now(&self) -> u64 {
        self.world.borrow().fab.now()
    }

    pub fn add_client(&mut self) -> ClientCtx {
        let mut w = self.world.borrow_mut();
        let ep = w.fab.add_client();
        w.mailboxes.insert(ep, Mailbox::default());
        ClientCtx {
            world: self.world.clone(),
            ep,
        }
    }

    /// Start a task for `ctx`'s endpoint, polling it once right away.
    pub fn spawn(&mut self, ctx: &ClientCtx, fut: impl Future<Output = ()> + 'static) {
        assert!(
            !self.tasks.contains_key(&ctx.ep),
            "endpoint {} already runs a task",
            ctx.ep
        );
        self.tasks.insert(ctx.ep, Box::pin(fut));
        self.poll(ctx.ep);
    }

    pub fn task_running(&self, ep: EndpointId) -> bool {
        self.tasks.contains_key(&ep)
    }

    fn poll(&mut self, ep: EndpointId) {
        let Some(task) = self.tasks.get_mut(&ep) else {
            return;
        };
        let mut cx = Context::from_waker(Waker::noop());
        if task.as_mut().poll(&mut cx).is_ready() {
            self.tasks.remove(&ep);
        }
    }

    /// Process one upcall. Returns false once the simulation is idle.
    pub fn step(&mut self) -> bool {
        let up = self.world.borrow_mut().fab.step();
        self.dispatch(up)
    }

    /// Process one fabric event, which may or may not need an upcall. Crash
    /// enumeration uses this to stop between a write draining and persisting.
    pub fn step_event(&mut self) -> bool {
        let up = self.world.borrow_mut().fab.step_event();
        match up {
            None => false,
            Some(None) => true,
            Some(up) => self.dispatch(up),
        }
    }

    fn dispatch(&mut self, up: Option<Upcall>) -> bool {
        match up {
            None => false,
            Some(Upcall::Client { ep, delivery }) => {
                self.world.borrow_mut().deliver(ep, delivery);
                self.poll(ep);
                true
            }
            Some(Upcall::Server(c)) => {
                let mut w = self.world.borrow_mut();
                let World { fab, server, .. } = &mut *w;
                server.on_completion(fab, c);
                let bg = server.wants_background(fab);
                fab.end_cpu(bg);
                true
            }
            Some(Upcall::Background) => {
                let mut w = self.world.borrow_mut();
                let World { fab, server, .. } = &mut *w;
                server.on_background(fab);
                let bg = server.wants_background(fab);
                fab.end_cpu(bg);
                true
            }
        }
    }

    /// Run until nothing is left to do. Returns the number of upcalls processed.
    pub fn run(&mut self) -> u64 {
        let mut n = 0;
        while self.step() {
            n += 1;
        }
        n
    }

    /// Run until `pred` holds (checked after every upcall) or the sim idles.
    pub fn run_until(&mut self, mut pred: impl FnMut(&World) -> bool) -> bool {
        loop {
            if pred(&self.world.borrow()) {
                return true;
            }
            if !self.step() {
                return pred(&self.world.borrow());
            }
        }
    }

    /// Crash a client: its task is dropped and its in-flight verbs cancelled,
    /// with `keep` choosing how much of each in-flight write still lands.
    pub fn crash_client(&mut self, ep: EndpointId, keep: impl FnMut(&InFlightWrite) -> usize) {
        self.tasks.remove(&ep);
        let mut w = self.world.borrow_mut();
        w.fab.crash_client(ep, keep);
        w.mailboxes.remove(&ep);
    }

    pub fn history(&self) -> Vec<OpRecord> {
        self.world.borrow().history.clone()
    }

    /// Tear the simulation down, returning the world.
    pub fn into_world(self) -> World {
        drop(self.tasks);
        match Rc::try_unwrap(self.world) {
            Ok(cell) => cell.into_inner(),
            Err(_) => panic!("client handles outlived the simulation"),
        }
    }
}
