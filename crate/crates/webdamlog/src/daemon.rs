//! Long-running peers over TCP. Each daemon owns one [`Peer`] on a loop
//! thread: inbound frames and host operations arrive over a channel,
//! stages run when there is work (or on the interval timer), and outbound
//! messages are framed onto cached connections with reconnect-and-retry.
//! Receivers drop duplicate frames by (sender, seq), so a resend after a
//! reconnect is harmless.
//!
//! [`SocketSystem`] runs a whole set of daemons in one process — the
//! socket-backed counterpart of the simulator, used by scenario runs and
//! the transport-independence tests. Peers must all be declared before the
//! first message flows, because daemons need the full name→address map.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::io::{ErrorKind, Read as _, Write as _};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{channel, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use crate::ast::{Fact, Tuple};
use crate::peer::{Message, Peer, StageReport};
use crate::scenario::{PeerAddress, ScenarioError, System};
use crate::schema::RelationKey;
use crate::transport::{decode_body, encode, MAX_FRAME};

type PeerOp = Box<dyn FnOnce(&mut Peer) + Send>;

enum Event {
    Op(PeerOp),
    Inbound(Message),
    Shutdown,
}

/// Liveness counters shared with pollers; quiescence detection watches
/// them settle.
#[derive(Default)]
struct Activity {
    stages: AtomicU64,
    frames_out: AtomicU64,
    frames_in: AtomicU64,
    /// Messages waiting for a (re)connect.
    backlog: AtomicU64,
}

pub struct DaemonConfig {
    pub name: String,
    /// Other peers this daemon may send to.
    pub peers: BTreeMap<String, SocketAddr>,
    /// How long the loop sleeps with an empty channel before rechecking;
    /// also the retry cadence for unsent messages.
    pub stage_interval: Duration,
}

pub struct PeerDaemon {
    name: String,
    addr: SocketAddr,
    events: Sender<Event>,
    activity: Arc<Activity>,
    reports: Arc<Mutex<Vec<StageReport>>>,
    stop: Arc<AtomicBool>,
    loop_handle: Option<JoinHandle<Peer>>,
    listen_handle: Option<JoinHandle<()>>,
    done: Receiver<()>,
}

impl PeerDaemon {
    /// Starts the loop and listener threads. The listener must already be
    /// bound — callers bind first so ephemeral ports are known before any
    /// daemon starts sending.
    pub fn spawn(config: DaemonConfig, listener: TcpListener) -> std::io::Result<PeerDaemon> {
        let name = config.name.clone();
        let addr = listener.local_addr()?;
        listener.set_nonblocking(true)?;
        let (events, inbox) = channel::<Event>();
        let (done_tx, done) = channel::<()>();
        let activity = Arc::new(Activity::default());
        let reports = Arc::new(Mutex::new(Vec::new()));
        let stop = Arc::new(AtomicBool::new(false));

        let listen_handle = {
            let events = events.clone();
            let stop = Arc::clone(&stop);
            let activity = Arc::clone(&activity);
            std::thread::spawn(move || accept_loop(listener, events, stop, activity))
        };
        let loop_handle = {
            let activity = Arc::clone(&activity);
            let reports = Arc::clone(&reports);
            std::thread::spawn(move || peer_loop(config, inbox, activity, reports, done_tx))
        };
        Ok(PeerDaemon {
            name,
            addr,
            events,
            activity,
            reports,
            stop,
            loop_handle: Some(loop_handle),
            listen_handle: Some(listen_handle),
            done,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Runs a closure against the peer on its loop thread and returns the
    /// result. Blocks until the loop gets to it.
    pub fn with_peer<R: Send + 'static>(
        &self,
        f: impl FnOnce(&mut Peer) -> R + Send + 'static,
    ) -> R {
        let (tx, rx) = channel();
        self.events
            .send(Event::Op(Box::new(move |peer| {
                let _ = tx.send(f(peer));
            })))
            .expect("daemon loop alive");
        rx.recv().expect("daemon loop replies")
    }

    /// Snapshot of (stages run, frames out, frames in, send backlog).
    pub fn activity(&self) -> (u64, u64, u64, u64) {
        (
            self.activity.stages.load(Ordering::SeqCst),
            self.activity.frames_out.load(Ordering::SeqCst),
            self.activity.frames_in.load(Ordering::SeqCst),
            self.activity.backlog.load(Ordering::SeqCst),
        )
    }

    /// No pending work on the peer and nothing waiting to be sent.
    pub fn quiet(&self) -> bool {
        self.with_peer(|p| !p.needs_stage())
            && self.activity.backlog.load(Ordering::SeqCst) == 0
    }

    /// Drains the reports of stages run since the last call.
    pub fn take_reports(&self) -> Vec<StageReport> {
        std::mem::take(&mut *self.reports.lock().expect("reports lock"))
    }

    /// Stops the daemon: stages until locally quiet, flushes unsent
    /// messages (bounded retry), then returns the final peer state.
    pub fn shutdown(mut self) -> Peer {
        self.stop.store(true, Ordering::SeqCst);
        let _ = self.events.send(Event::Shutdown);
        // `done` fires when the flush is complete; tolerate a missing
        // signal if the loop already exited.
        let _ = self.done.recv_timeout(Duration::from_secs(10));
        if let Some(h) = self.listen_handle.take() {
            let _ = h.join();
        }
        self.loop_handle.take().expect("not yet joined").join().expect("loop thread exits")
    }
}

fn accept_loop(
    listener: TcpListener,
    events: Sender<Event>,
    stop: Arc<AtomicBool>,
    activity: Arc<Activity>,
) {
    let mut readers: Vec<JoinHandle<()>> = Vec::new();
    while !stop.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, _)) => {
                let events = events.clone();
                let stop = Arc::clone(&stop);
                let activity = Arc::clone(&activity);
                readers.push(std::thread::spawn(move || read_frames(stream, events, stop, activity)));
            }
            Err(e) if e.kind() == ErrorKind::WouldBlock => {
                std::thread::sleep(Duration::from_millis(2));
            }
            Err(_) => break,
        }
    }
    for r in readers {
        let _ = r.join();
    }
}

/// Reads length-prefixed frames off one connection until it closes or the
/// daemon stops. Malformed frames drop the connection; the sender will
/// reconnect and resend, and seq filtering discards what already landed.
fn read_frames(
    stream: TcpStream,
    events: Sender<Event>,
    stop: Arc<AtomicBool>,
    activity: Arc<Activity>,
) {
    let mut stream = stream;
    if stream.set_read_timeout(Some(Duration::from_millis(50))).is_err() {
        return;
    }
    let mut header = [0u8; 4];
    loop {
        if stop.load(Ordering::SeqCst) {
            return;
        }
        match read_exact_interruptible(&mut stream, &mut header, &stop) {
            Ok(true) => {}
            Ok(false) | Err(_) => return,
        }
        let len = u32::from_be_bytes(header) as usize;
        if len > MAX_FRAME {
            return;
        }
        let mut body = vec![0u8; len];
        match read_exact_interruptible(&mut stream, &mut body, &stop) {
            Ok(true) => {}
            Ok(false) | Err(_) => return,
        }
        match decode_body(&body) {
            Ok(msg) => {
                activity.frames_in.fetch_add(1, Ordering::SeqCst);
                if events.send(Event::Inbound(msg)).is_err() {
                    return;
                }
            }
            Err(e) => {
                eprintln!("dropping connection after malformed frame: {e}");
                return;
            }
        }
    }
}

/// `read_exact` that honors the read timeout so the stop flag gets
/// rechecked. Returns Ok(false) on clean EOF before any byte.
fn read_exact_interruptible(
    stream: &mut TcpStream,
    buf: &mut [u8],
    stop: &AtomicBool,
) -> std::io::Result<bool> {
    let mut filled = 0;
    while filled < buf.len() {
        if stop.load(Ordering::SeqCst) {
            return Ok(false);
        }
        match stream.read(&mut buf[filled..]) {
            Ok(0) => return Ok(false),
            Ok(n) => filled += n,
            Err(e) if e.kind() == ErrorKind::WouldBlock || e.kind() == ErrorKind::TimedOut => {
                // Partial messages must finish; only bail between frames.
                if filled == 0 {
                    return Ok(false);
                }
            }
            Err(e) if e.kind() == ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(true)
}

struct Outbound {
    peers: BTreeMap<String, SocketAddr>,
    conns: BTreeMap<String, TcpStream>,
    queues: BTreeMap<String, VecDeque<Message>>,
    activity: Arc<Activity>,
}

impl Outbound {
    fn push(&mut self, msg: Message) {
        if !self.peers.contains_key(&msg.target) {
            eprintln!("dropping message to unknown peer {}", msg.target);
            return;
        }
        self.queues.entry(msg.target.clone()).or_default().push_back(msg);
        self.refresh_backlog();
    }

    fn refresh_backlog(&self) {
        let n: usize = self.queues.values().map(|q| q.len()).sum();
        self.activity.backlog.store(n as u64, Ordering::SeqCst);
    }

    /// Tries to send every queued message; connection failures leave the
    /// rest of that target's queue for the next tick.
    fn flush(&mut self) {
        let targets: Vec<String> = self.queues.keys().cloned().collect();
        for target in targets {
            while let Some(msg) = self.queues.get(&target).and_then(|q| q.front().cloned()) {
                if self.send_one(&target, &msg) {
                    self.queues.get_mut(&target).expect("queue exists").pop_front();
                    self.activity.frames_out.fetch_add(1, Ordering::SeqCst);
                } else {
                    break;
                }
            }
        }
        self.queues.retain(|_, q| !q.is_empty());
        self.refresh_backlog();
    }

    fn send_one(&mut self, target: &str, msg: &Message) -> bool {
        let addr = match self.peers.get(target) {
            Some(a) => *a,
            None => return true, // unknown peer: drop (already warned)
        };
        for attempt in 0..2 {
            if !self.conns.contains_key(target) {
                match TcpStream::connect_timeout(&addr, Duration::from_millis(200)) {
                    Ok(s) => {
                        let _ = s.set_nodelay(true);
                        self.conns.insert(target.to_string(), s);
                    }
                    Err(_) => return false,
                }
            }
            let stream = self.conns.get_mut(target).expect("just ensured");
            match stream.write_all(&encode(msg)) {
                Ok(()) => return true,
                Err(_) => {
                    // Stale connection: drop it and retry once fresh.
                    self.conns.remove(target);
                    if attempt == 1 {
                        return false;
                    }
                }
            }
        }
        false
    }
}

fn peer_loop(
    config: DaemonConfig,
    inbox: Receiver<Event>,
    activity: Arc<Activity>,
    reports: Arc<Mutex<Vec<StageReport>>>,
    done: Sender<()>,
) -> Peer {
    let mut peer = Peer::new(&config.name);
    let mut out = Outbound {
        peers: config.peers,
        conns: BTreeMap::new(),
        queues: BTreeMap::new(),
        activity: Arc::clone(&activity),
    };
    let mut stopping = false;
    loop {
        // Block briefly for the first event, then drain whatever is there.
        match inbox.recv_timeout(config.stage_interval) {
            Ok(ev) => {
                handle_event(ev, &mut peer, &mut stopping);
                for ev in inbox.try_iter() {
                    handle_event(ev, &mut peer, &mut stopping);
                }
            }
            Err(RecvTimeoutError::Timeout) => {}
            Err(RecvTimeoutError::Disconnected) => stopping = true,
        }
        while peer.needs_stage() {
            match peer.run_stage() {
                Ok(report) => {
                    activity.stages.fetch_add(1, Ordering::SeqCst);
                    for w in &report.warnings {
                        eprintln!("{}: {w}", peer.name());
                    }
                    reports.lock().expect("reports lock").push(report);
                }
                Err(e) => {
                    // The stage rolled back; the offending input is still
                    // queued. Drop the queue rather than retry forever.
                    let n = peer.discard_inbox();
                    eprintln!(
                        "{}: stage failed ({e}); discarded {n} queued messages",
                        peer.name()
                    );
                    break;
                }
            }
            for msg in peer.take_outbox() {
                out.push(msg);
            }
            // Send between stages so downstream peers start early.
            out.flush();
        }
        out.flush();
        if stopping {
            // Final flush with a deadline, then hand the peer back.
            let deadline = Instant::now() + Duration::from_secs(2);
            while out.queues.values().any(|q| !q.is_empty()) && Instant::now() < deadline {
                std::thread::sleep(Duration::from_millis(20));
                out.flush();
            }
            for q in out.queues.values() {
                if !q.is_empty() {
                    eprintln!("{}: shutdown with {} unsent messages", peer.name(), q.len());
                }
            }
            let _ = done.send(());
            return peer;
        }
    }
}

fn handle_event(ev: Event, peer: &mut Peer, stopping: &mut bool) {
    match ev {
        Event::Op(op) => op(peer),
        Event::Inbound(msg) => peer.enqueue(msg),
        Event::Shutdown => *stopping = true,
    }
}

/// A full system of in-process daemons behind the scenario [`System`]
/// interface. Declare all peers first; daemons start when the first
/// non-declaration operation arrives.
pub struct SocketSystem {
    pending: Vec<(String, TcpListener)>,
    daemons: BTreeMap<String, PeerDaemon>,
    stage_interval: Duration,
    reports: Vec<(String, StageReport)>,
}

impl SocketSystem {
    pub fn new() -> Self {
        SocketSystem {
            pending: Vec::new(),
            daemons: BTreeMap::new(),
            stage_interval: Duration::from_millis(10),
            reports: Vec::new(),
        }
    }

    /// Binds a listener for a peer. `Sim` (or no) address means any free
    /// local port.
    pub fn bind_peer(&mut self, name: &str, address: &PeerAddress) -> Result<(), ScenarioError> {
        if !self.daemons.is_empty() {
            return Err(ScenarioError::System(
                "declare every peer before the first load/insert/run".into(),
            ));
        }
        if self.pending.iter().any(|(n, _)| n == name) {
            return Ok(());
        }
        let bind_to = match address {
            PeerAddress::Sim => "127.0.0.1:0".to_string(),
            PeerAddress::Socket(addr) => addr.clone(),
        };
        let listener = TcpListener::bind(&bind_to).map_err(|e| {
            ScenarioError::System(format!("binding {bind_to} for {name}: {e}"))
        })?;
        self.pending.push((name.to_string(), listener));
        Ok(())
    }

    fn ensure_started(&mut self) -> Result<(), ScenarioError> {
        if self.pending.is_empty() {
            return Ok(());
        }
        let addrs: BTreeMap<String, SocketAddr> = self
            .pending
            .iter()
            .map(|(name, l)| {
                (name.clone(), l.local_addr().expect("bound listener has an address"))
            })
            .collect();
        for (name, listener) in self.pending.drain(..) {
            let mut peers = addrs.clone();
            peers.remove(&name);
            let daemon = PeerDaemon::spawn(
                DaemonConfig {
                    name: name.clone(),
                    peers,
                    stage_interval: self.stage_interval,
                },
                listener,
            )
            .map_err(|e| ScenarioError::System(format!("starting {name}: {e}")))?;
            self.daemons.insert(name, daemon);
        }
        Ok(())
    }

    fn daemon(&self, name: &str) -> Result<&PeerDaemon, ScenarioError> {
        self.daemons
            .get(name)
            .ok_or_else(|| ScenarioError::System(format!("unknown peer {name}")))
    }

    /// Waits until every daemon is quiet, nothing is in flight, and the
    /// whole picture holds still for a few polls.
    pub fn wait_quiescent(&self, timeout: Duration) -> Result<(), ScenarioError> {
        let deadline = Instant::now() + timeout;
        let mut stable = 0;
        let mut last: Option<Vec<(u64, u64, u64, u64)>> = None;
        while Instant::now() < deadline {
            let snapshot: Vec<_> = self.daemons.values().map(|d| d.activity()).collect();
            let sent: u64 = snapshot.iter().map(|s| s.1).sum();
            let received: u64 = snapshot.iter().map(|s| s.2).sum();
            let backlog: u64 = snapshot.iter().map(|s| s.3).sum();
            let quiet = self.daemons.values().all(|d| d.quiet());
            if quiet && backlog == 0 && sent == received && last.as_ref() == Some(&snapshot) {
                stable += 1;
                if stable >= 3 {
                    return Ok(());
                }
            } else {
                stable = 0;
            }
            last = Some(snapshot);
            std::thread::sleep(Duration::from_millis(10));
        }
        Err(ScenarioError::System(format!(
            "sockets did not quiesce within {timeout:?}"
        )))
    }

    /// Stops every daemon and returns the final peers.
    pub fn shutdown(mut self) -> BTreeMap<String, Peer> {
        let mut out = BTreeMap::new();
        let names: Vec<String> = self.daemons.keys().cloned().collect();
        for name in names {
            let daemon = self.daemons.remove(&name).expect("listed");
            out.insert(name, daemon.shutdown());
        }
        out
    }
}

impl Default for SocketSystem {
    fn default() -> Self {
        Self::new()
    }
}

impl System for SocketSystem {
    fn add_peer(&mut self, name: &str, address: &PeerAddress) -> Result<(), ScenarioError> {
        self.bind_peer(name, address)
    }

    fn load(&mut self, peer: &str, text: &str) -> Result<(), ScenarioError> {
        self.ensure_started()?;
        let text = text.to_string();
        self.daemon(peer)?
            .with_peer(move |p| p.load_program(&text).map(|_| ()))
            .map_err(ScenarioError::Host)
    }

    fn insert(&mut self, fact: &Fact) -> Result<(), ScenarioError> {
        self.ensure_started()?;
        let fact = fact.clone();
        self.daemon(&fact.peer.clone())?
            .with_peer(move |p| p.insert_fact(&fact))
            .map_err(ScenarioError::Host)
    }

    fn delete(&mut self, fact: &Fact) -> Result<(), ScenarioError> {
        self.ensure_started()?;
        let fact = fact.clone();
        self.daemon(&fact.peer.clone())?
            .with_peer(move |p| p.delete_fact(&fact))
            .map_err(ScenarioError::Host)
    }

    fn run_rounds(&mut self, rounds: usize) -> Result<(), ScenarioError> {
        self.ensure_started()?;
        // Sockets have no global round; give the loops time to work.
        std::thread::sleep(self.stage_interval * (rounds as u32 + 1));
        Ok(())
    }

    fn quiesce(&mut self, budget: usize) -> Result<(), ScenarioError> {
        self.ensure_started()?;
        // Interpret the budget as rounds of the stage interval, floor 5s.
        let timeout = (self.stage_interval * (budget as u32)).max(Duration::from_secs(5));
        self.wait_quiescent(timeout)
    }

    fn read(&mut self, key: &RelationKey) -> Result<BTreeSet<Tuple>, ScenarioError> {
        self.ensure_started()?;
        let key = key.clone();
        Ok(self.daemon(&key.peer.clone())?.with_peer(move |p| p.peek(&key)))
    }

    fn reports(&mut self) -> Vec<(String, StageReport)> {
        for (name, daemon) in &self.daemons {
            let fresh = daemon.take_reports();
            self.reports.extend(fresh.into_iter().map(|r| (name.clone(), r)));
        }
        self.reports.clone()
    }
}
