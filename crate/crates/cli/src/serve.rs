//! Live gateway: paces the simulation against the wall clock and exchanges
//! JSON messages with console clients over WebSocket.
//!
//! The stepping loop shares exactly two bounded queues with the I/O threads.
//! Accepted commands flow in through a channel drained before every step, and
//! snapshots flow out through [`SnapshotQueue`], which drops its oldest entry
//! rather than block the loop.

use std::collections::VecDeque;
use std::io::ErrorKind;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, SyncSender, TrySendError};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use lineguard_core::gateway::{handle_client_text, AckStatus, ConsoleCommand, Scene, ServerMessage, SessionCommand, Snapshot};
use lineguard_core::sim::{Engine, MissionLog};
use lineguard_core::Scenario;
use serde::Serialize;
use tungstenite::{Message, WebSocket};

use crate::config::{Mode, RunConfig};
use crate::headless::{resolve, write_outcome};
use crate::outcome::{CliError, Outcome};

const SNAPSHOT_QUEUE: usize = 64;
const COMMAND_QUEUE: usize = 256;
const CLIENT_QUEUE: usize = 64;
const POLL: Duration = Duration::from_millis(5);

/// Bounded single-consumer queue that evicts the oldest entry when full.
pub struct SnapshotQueue {
    capacity: usize,
    items: Mutex<VecDeque<Arc<Snapshot>>>,
    ready: Condvar,
    dropped: AtomicU64,
}

impl SnapshotQueue {
    pub fn new(capacity: usize) -> Self {
        SnapshotQueue { capacity: capacity.max(1), items: Mutex::new(VecDeque::new()), ready: Condvar::new(), dropped: AtomicU64::new(0) }
    }

    /// Never waits for the consumer.
    pub fn push(&self, s: Arc<Snapshot>) {
        let mut q = self.items.lock().expect("queue lock");
        if q.len() == self.capacity {
            q.pop_front();
            self.dropped.fetch_add(1, Ordering::Relaxed);
        }
        q.push_back(s);
        self.ready.notify_one();
    }

    pub fn pop_timeout(&self, timeout: Duration) -> Option<Arc<Snapshot>> {
        let q = self.items.lock().expect("queue lock");
        let (mut q, _) = self.ready.wait_timeout_while(q, timeout, |q| q.is_empty()).expect("queue lock");
        q.pop_front()
    }

    pub fn dropped(&self) -> u64 {
        self.dropped.load(Ordering::Relaxed)
    }
}

/// Gateway counters, written next to the mission log as `gateway_stats.json`.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct GatewayStats {
    pub snapshots_produced: u64,
    /// Evictions from the loop's outbound queue.
    pub snapshots_dropped: u64,
    /// Snapshots skipped for clients that read too slowly.
    pub client_snapshots_dropped: u64,
    pub commands_accepted: u64,
    pub commands_rejected: u64,
    pub clients: u64,
}

#[derive(Default)]
struct Counters {
    client_dropped: AtomicU64,
    accepted: AtomicU64,
    rejected: AtomicU64,
    clients: AtomicU64,
}

pub struct ServeResult {
    pub outcome: Outcome,
    pub log: MissionLog,
    pub stats: GatewayStats,
    pub addr: SocketAddr,
}

struct Shared {
    scenario: Scenario,
    commands: SyncSender<ConsoleCommand>,
    clients: Mutex<Vec<SyncSender<Arc<Snapshot>>>>,
    counters: Counters,
    stop: AtomicBool,
}

/// Runs the mission paced at `speed` times wall clock while serving console
/// clients; `on_listen` is called once the port is bound.
pub fn serve(cfg: &RunConfig, on_listen: impl FnOnce(SocketAddr)) -> Result<ServeResult, CliError> {
    let Mode::Serve { port } = cfg.mode else {
        return Err(CliError::Config("serve called without a port".into()));
    };
    let (scenario, seed, duration) = resolve(cfg)?;
    let mut engine = Engine::new(&scenario, seed)?;
    let listener = TcpListener::bind(("127.0.0.1", port)).map_err(|source| CliError::PortBusy { port, source })?;
    listener.set_nonblocking(true)?;
    let addr = listener.local_addr()?;
    on_listen(addr);

    let (tx, rx) = mpsc::sync_channel(COMMAND_QUEUE);
    let shared = Arc::new(Shared { scenario, commands: tx, clients: Mutex::new(Vec::new()), counters: Counters::default(), stop: AtomicBool::new(false) });
    let outbound = Arc::new(SnapshotQueue::new(SNAPSHOT_QUEUE));
    let threads = [spawn_acceptor(listener, shared.clone()), spawn_broadcaster(outbound.clone(), shared.clone())];

    let produced = step_paced(&mut engine, duration, cfg.speed, &rx, &outbound);

    shared.stop.store(true, Ordering::Relaxed);
    for t in threads {
        let _ = t.join();
    }
    let log = engine.finish();
    let outcome = write_outcome(cfg, &log)?;
    let c = &shared.counters;
    let stats = GatewayStats {
        snapshots_produced: produced,
        snapshots_dropped: outbound.dropped(),
        client_snapshots_dropped: c.client_dropped.load(Ordering::Relaxed),
        commands_accepted: c.accepted.load(Ordering::Relaxed),
        commands_rejected: c.rejected.load(Ordering::Relaxed),
        clients: c.clients.load(Ordering::Relaxed),
    };
    std::fs::write(cfg.out.join("gateway_stats.json"), serde_json::to_string_pretty(&stats).expect("stats serialise") + "\n")?;
    Ok(ServeResult { outcome, log, stats, addr })
}

/// The stepping loop. Returns the number of snapshots handed to the gateway.
fn step_paced(engine: &mut Engine, duration: f64, speed: f64, commands: &Receiver<ConsoleCommand>, outbound: &SnapshotQueue) -> u64 {
    let mut speed = speed;
    let mut paused = false;
    let mut anchor = (Instant::now(), engine.time());
    let mut last_sent = f64::NEG_INFINITY;
    let mut produced = 0;
    for _ in 0..engine.step_count(duration) {
        loop {
            for c in commands.try_iter() {
                match c {
                    ConsoleCommand::Mission(m) => engine.push_operator(m),
                    ConsoleCommand::Session(SessionCommand::Pause) => paused = true,
                    ConsoleCommand::Session(SessionCommand::Resume) => paused = false,
                    ConsoleCommand::Session(SessionCommand::SetSpeed { speed: s }) => speed = s,
                }
                anchor = (Instant::now(), engine.time());
            }
            if !paused {
                break;
            }
            thread::sleep(POLL);
        }
        let due = anchor.0 + Duration::from_secs_f64((engine.time() - anchor.1).max(0.0) / speed);
        let now = Instant::now();
        if due > now {
            thread::sleep(due - now);
        }
        engine.step();
        if let Some(s) = engine.latest_snapshot() {
            if s.time > last_sent {
                last_sent = s.time;
                produced += 1;
                outbound.push(Arc::new(s.clone()));
            }
        }
    }
    produced
}

fn spawn_broadcaster(outbound: Arc<SnapshotQueue>, shared: Arc<Shared>) -> JoinHandle<()> {
    thread::spawn(move || {
        while !shared.stop.load(Ordering::Relaxed) {
            let Some(s) = outbound.pop_timeout(Duration::from_millis(20)) else { continue };
            let mut clients = shared.clients.lock().expect("client list lock");
            clients.retain(|c| match c.try_send(s.clone()) {
                Ok(()) => true,
                Err(TrySendError::Full(_)) => {
                    shared.counters.client_dropped.fetch_add(1, Ordering::Relaxed);
                    true
                }
                Err(TrySendError::Disconnected(_)) => false,
            });
        }
    })
}

fn spawn_acceptor(listener: TcpListener, shared: Arc<Shared>) -> JoinHandle<()> {
    thread::spawn(move || {
        let mut sessions = Vec::new();
        while !shared.stop.load(Ordering::Relaxed) {
            match listener.accept() {
                Ok((stream, peer)) => {
                    log::info!("console connected from {peer}");
                    let (tx, rx) = mpsc::sync_channel(CLIENT_QUEUE);
                    shared.clients.lock().expect("client list lock").push(tx);
                    shared.counters.clients.fetch_add(1, Ordering::Relaxed);
                    let s = shared.clone();
                    sessions.push(thread::spawn(move || {
                        if let Err(e) = session(stream, rx, &s) {
                            log::info!("console {peer} closed: {e}");
                        }
                    }));
                }
                Err(e) if e.kind() == ErrorKind::WouldBlock => thread::sleep(POLL),
                Err(e) => log::warn!("accept failed: {e}"),
            }
        }
        for s in sessions {
            let _ = s.join();
        }
    })
}

#[allow(clippy::result_large_err)] // tungstenite's own error type
fn send(ws: &mut WebSocket<TcpStream>, msg: &ServerMessage) -> tungstenite::Result<()> {
    ws.send(Message::text(serde_json::to_string(msg).expect("server message serialises")))
}

/// One console connection: acks inbound commands and forwards snapshots,
/// the first one carrying the static scene.
#[allow(clippy::result_large_err)]
fn session(stream: TcpStream, snapshots: Receiver<Arc<Snapshot>>, shared: &Shared) -> tungstenite::Result<()> {
    stream.set_nonblocking(false)?;
    let mut ws = tungstenite::accept(stream).map_err(|e| match e {
        tungstenite::HandshakeError::Failure(e) => e,
        tungstenite::HandshakeError::Interrupted(_) => tungstenite::Error::ConnectionClosed,
    })?;
    ws.get_ref().set_read_timeout(Some(POLL))?;
    let mut seq = 0u64;
    let mut scene = Some(Scene::from_scenario(&shared.scenario));
    while !shared.stop.load(Ordering::Relaxed) {
        match ws.read() {
            Ok(Message::Text(text)) => {
                let (mut ack, command) = handle_client_text(text.as_str(), seq, &shared.scenario);
                seq += 1;
                if let Some(c) = command {
                    if shared.commands.try_send(c).is_err() {
                        if let ServerMessage::Ack { status, reason, .. } = &mut ack {
                            *status = AckStatus::Rejected;
                            *reason = Some("command queue full".into());
                        }
                    }
                }
                let counter = match &ack {
                    ServerMessage::Ack { status: AckStatus::Accepted, .. } => &shared.counters.accepted,
                    _ => &shared.counters.rejected,
                };
                counter.fetch_add(1, Ordering::Relaxed);
                send(&mut ws, &ack)?;
            }
            Ok(Message::Close(_)) => return Ok(()),
            Ok(_) => {}
            Err(tungstenite::Error::Io(e)) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {}
            Err(e) => return Err(e),
        }
        for s in snapshots.try_iter() {
            let mut snapshot = (*s).clone();
            snapshot.scene = scene.take();
            send(&mut ws, &ServerMessage::Snapshot { seq, snapshot: Box::new(snapshot) })?;
            seq += 1;
        }
    }
    let _ = ws.close(None);
    let _ = ws.flush();
    Ok(())
}
