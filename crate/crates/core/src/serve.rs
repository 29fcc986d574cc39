//! Live mode: the simulation loop streams frames and state over WebSocket
//! and takes master input and control messages from connected consoles.
//!
//! One thread runs the loop, one accepts connections, and every client has
//! a thread that owns its socket. The loop never waits on a client: it
//! pushes into bounded per-client queues that drop the oldest frame when
//! full and never drop `state`. Console messages from all clients go
//! through one channel and are applied at sample boundaries, in arrival
//! order, and recorded so the session can be replayed.

use std::collections::VecDeque;
use std::io::ErrorKind;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use tungstenite::{Message, WebSocket};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::overlay::CameraSide;
use crate::sim::{MasterSource, MetricsRow, SimControl, Simulation, StepOutput};
use crate::wire::{apply, SessionEntry, SessionLog, WireMessage};

const POLL: Duration = Duration::from_millis(5);

#[derive(Debug, Clone)]
pub struct ServeOptions {
    pub bind: String,
    /// 0 picks a free port.
    pub port: u16,
    pub queue_len: usize,
    /// Pace the loop at the sample rate.
    pub realtime: bool,
    /// Stop after this many samples.
    pub max_samples: Option<u64>,
    /// Hold the loop at sample 0 until this many clients are connected.
    pub wait_for_clients: usize,
    pub initial_source: MasterSource,
}

impl ServeOptions {
    pub fn from_config(cfg: &Config) -> Self {
        ServeOptions {
            bind: cfg.serve.bind.clone(),
            port: cfg.serve.port,
            queue_len: cfg.serve.queue_len,
            realtime: cfg.serve.realtime,
            max_samples: None,
            wait_for_clients: 0,
            initial_source: MasterSource::Live,
        }
    }
}

#[derive(Debug, Clone)]
struct Outgoing {
    text: Arc<String>,
    is_frame: bool,
}

#[derive(Debug)]
struct ClientQueue {
    queue: Mutex<VecDeque<Outgoing>>,
    capacity: usize,
    dropped_frames: AtomicU64,
    closed: AtomicBool,
}

impl ClientQueue {
    fn push(&self, msg: Outgoing) {
        let mut q = self.queue.lock().expect("queue lock");
        if q.len() >= self.capacity {
            if let Some(i) = q.iter().position(|m| m.is_frame) {
                q.remove(i);
                self.dropped_frames.fetch_add(1, Ordering::Relaxed);
            } else if msg.is_frame {
                self.dropped_frames.fetch_add(1, Ordering::Relaxed);
                return;
            }
        }
        q.push_back(msg);
    }

    fn pop(&self) -> Option<Outgoing> {
        self.queue.lock().expect("queue lock").pop_front()
    }
}

#[derive(Debug, Default)]
struct Shared {
    clients: Mutex<Vec<Arc<ClientQueue>>>,
    connected: AtomicUsize,
    malformed: AtomicU64,
    stop: AtomicBool,
}

/// What the loop did, returned when the server stops.
#[derive(Debug, Clone)]
pub struct ServeReport {
    pub samples: u64,
    pub session: SessionLog,
    /// Finalized metrics of the live run.
    pub rows: Vec<MetricsRow>,
    pub malformed: u64,
    pub rejected: u64,
    pub frames_dropped: u64,
    pub messages_sent: u64,
}

pub struct ServeHandle {
    pub addr: SocketAddr,
    shared: Arc<Shared>,
    join: Option<JoinHandle<Result<ServeReport>>>,
}

impl ServeHandle {
    pub fn stop(&self) {
        self.shared.stop.store(true, Ordering::Relaxed);
    }

    /// A callable that stops the server from another thread or a signal handler.
    pub fn stopper(&self) -> impl Fn() + Send + Sync + 'static {
        let shared = Arc::clone(&self.shared);
        move || shared.stop.store(true, Ordering::Relaxed)
    }

    pub fn malformed(&self) -> u64 {
        self.shared.malformed.load(Ordering::Relaxed)
    }

    pub fn connected(&self) -> usize {
        self.shared.connected.load(Ordering::Relaxed)
    }

    /// Waits for the loop to end (stop or `max_samples`).
    pub fn join(mut self) -> Result<ServeReport> {
        let j = self.join.take().expect("joined once");
        j.join().map_err(|_| Error::State("serve loop panicked".into()))?
    }
}

impl Drop for ServeHandle {
    fn drop(&mut self) {
        self.stop();
        if let Some(j) = self.join.take() {
            let _ = j.join();
        }
    }
}

/// Binds the listening socket and starts the loop. A busy port is an
/// `Error::Io` with `AddrInUse`.
pub fn spawn(cfg: &Config, opts: ServeOptions) -> Result<ServeHandle> {
    let mut sim = Simulation::new(cfg)?;
    sim.control(SimControl::SetSource(opts.initial_source))?;
    sim.enable_rendering(cfg.scenario.grid_step)?;
    let listener = TcpListener::bind((opts.bind.as_str(), opts.port))?;
    listener.set_nonblocking(true)?;
    let addr = listener.local_addr()?;
    let shared = Arc::new(Shared::default());
    let (tx, rx) = mpsc::channel::<WireMessage>();

    let acc_shared = Arc::clone(&shared);
    let queue_len = opts.queue_len.max(1);
    std::thread::spawn(move || accept_loop(listener, acc_shared, tx, queue_len));

    let loop_shared = Arc::clone(&shared);
    let sample_rate = cfg.delay.sample_rate;
    let join = std::thread::spawn(move || sim_loop(sim, opts, sample_rate, loop_shared, rx));
    Ok(ServeHandle {
        addr,
        shared,
        join: Some(join),
    })
}

fn accept_loop(listener: TcpListener, shared: Arc<Shared>, tx: Sender<WireMessage>, queue_len: usize) {
    while !shared.stop.load(Ordering::Relaxed) {
        match listener.accept() {
            Ok((stream, _)) => {
                let shared = Arc::clone(&shared);
                let tx = tx.clone();
                std::thread::spawn(move || {
                    let _ = client_loop(stream, shared, tx, queue_len);
                });
            }
            Err(e) if e.kind() == ErrorKind::WouldBlock => std::thread::sleep(POLL),
            Err(_) => std::thread::sleep(POLL),
        }
    }
}

fn client_loop(stream: TcpStream, shared: Arc<Shared>, tx: Sender<WireMessage>, queue_len: usize) -> Result<()> {
    stream.set_nonblocking(false)?;
    let mut ws: WebSocket<TcpStream> = tungstenite::accept(stream).map_err(|e| Error::InvalidArgument(format!("handshake: {e}")))?;
    ws.get_ref().set_read_timeout(Some(POLL))?;
    let queue = Arc::new(ClientQueue {
        queue: Mutex::new(VecDeque::new()),
        capacity: queue_len,
        dropped_frames: AtomicU64::new(0),
        closed: AtomicBool::new(false),
    });
    shared.clients.lock().expect("clients lock").push(Arc::clone(&queue));
    shared.connected.fetch_add(1, Ordering::Relaxed);
    let mut last_seq: Option<u64> = None;
    let result = (|| -> Result<()> {
        loop {
            if shared.stop.load(Ordering::Relaxed) {
                let _ = ws.close(None);
                let _ = ws.flush();
                return Ok(());
            }
            while let Some(m) = queue.pop() {
                ws.send(Message::Text(m.text.as_str().to_owned()))
                    .map_err(|e| Error::State(format!("send: {e}")))?;
            }
            match ws.read() {
                Ok(Message::Text(text)) => {
                    for line in text.lines().filter(|l| !l.trim().is_empty()) {
                        match WireMessage::parse(line) {
                            Ok(m) if m.is_console_message() && last_seq.is_none_or(|s| m.seq() > s) => {
                                last_seq = Some(m.seq());
                                let _ = tx.send(m);
                            }
                            _ => {
                                shared.malformed.fetch_add(1, Ordering::Relaxed);
                            }
                        }
                    }
                }
                Ok(Message::Close(_)) => return Ok(()),
                Ok(Message::Binary(_)) => {
                    shared.malformed.fetch_add(1, Ordering::Relaxed);
                }
                Ok(_) => {}
                Err(tungstenite::Error::Io(e)) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {}
                Err(e) => return Err(Error::State(format!("read: {e}"))),
            }
        }
    })();
    queue.closed.store(true, Ordering::Relaxed);
    shared.connected.fetch_sub(1, Ordering::Relaxed);
    result
}

struct Broadcaster {
    seq: u64,
    sent: u64,
}

impl Broadcaster {
    fn send(&mut self, shared: &Shared, msg: WireMessage) -> u64 {
        let is_frame = matches!(msg, WireMessage::Frame { .. });
        let out = Outgoing {
            text: Arc::new(msg.to_line()),
            is_frame,
        };
        let mut clients = shared.clients.lock().expect("clients lock");
        clients.retain(|c| !c.closed.load(Ordering::Relaxed));
        for c in clients.iter() {
            c.push(out.clone());
            self.sent += 1;
        }
        clients.len() as u64
    }

    fn next_seq(&mut self) -> u64 {
        let s = self.seq;
        self.seq += 1;
        s
    }
}

fn state_message(seq: u64, sim: &Simulation, out: &StepOutput, malformed: u64) -> WireMessage {
    let tip = |v: &crate::se3::Vec3| [v.x, v.y, v.z];
    WireMessage::State {
        seq,
        sample: out.rows.first().map(|r| r.sample).unwrap_or(0),
        delay: sim.delay().round_trip,
        sarpd: sim.overlay_enabled(),
        source: sim.source(),
        alpha: out.rows.iter().map(|r| r.alpha).collect(),
        tracker_error: out.rows.iter().map(|r| r.hand_eye_err_t).collect(),
        overlay_tip: out.rows.iter().map(|r| tip(&r.overlay_tip)).collect(),
        feedback_tip: out.rows.iter().map(|r| tip(&r.feedback.translation)).collect(),
        malformed,
    }
}

fn sim_loop(
    mut sim: Simulation,
    opts: ServeOptions,
    sample_rate: f64,
    shared: Arc<Shared>,
    rx: Receiver<WireMessage>,
) -> Result<ServeReport> {
    while shared.connected.load(Ordering::Relaxed) < opts.wait_for_clients {
        if shared.stop.load(Ordering::Relaxed) {
            break;
        }
        std::thread::sleep(POLL);
    }
    let mut bc = Broadcaster { seq: 0, sent: 0 };
    let mut entries = Vec::new();
    let mut rows = Vec::new();
    let mut rejected = 0u64;
    let start = Instant::now();
    let period = 1.0 / sample_rate;
    let mut n = 0u64;
    while !shared.stop.load(Ordering::Relaxed) && opts.max_samples.is_none_or(|m| n < m) {
        while let Ok(msg) = rx.try_recv() {
            match apply(&mut sim, &msg) {
                Ok(()) => entries.push(SessionEntry { sample: n, message: msg }),
                Err(_) => {
                    // still recorded: replay rejects it identically
                    rejected += 1;
                    entries.push(SessionEntry { sample: n, message: msg });
                }
            }
        }
        let out = sim.step()?;
        if let Some(f) = &out.frames {
            let malformed = shared.malformed.load(Ordering::Relaxed);
            if shared.connected.load(Ordering::Relaxed) > 0 {
                for (side, frame) in [(CameraSide::Left, &f.left), (CameraSide::Right, &f.right)] {
                    let seq = bc.next_seq();
                    bc.send(&shared, WireMessage::frame(seq, side, f.sample, f.capture, frame)?);
                }
            }
            let seq = bc.next_seq();
            bc.send(&shared, state_message(seq, &sim, &out, malformed));
        }
        rows.extend(out.rows);
        n += 1;
        if opts.realtime {
            let due = start + Duration::from_secs_f64(n as f64 * period);
            let now = Instant::now();
            if due > now {
                std::thread::sleep(due - now);
            }
        }
    }
    // let writers drain before the stop flag closes them
    let drain_until = Instant::now() + Duration::from_millis(500);
    while Instant::now() < drain_until {
        let pending = shared
            .clients
            .lock()
            .expect("clients lock")
            .iter()
            .filter(|c| !c.closed.load(Ordering::Relaxed))
            .any(|c| !c.queue.lock().expect("queue lock").is_empty());
        if !pending {
            break;
        }
        std::thread::sleep(POLL);
    }
    shared.stop.store(true, Ordering::Relaxed);
    let frames_dropped = shared
        .clients
        .lock()
        .expect("clients lock")
        .iter()
        .map(|c| c.dropped_frames.load(Ordering::Relaxed))
        .sum();
    sim.finalize(&mut rows);
    Ok(ServeReport {
        samples: n,
        session: SessionLog {
            samples: n,
            initial_source: opts.initial_source,
            entries,
        },
        rows,
        malformed: shared.malformed.load(Ordering::Relaxed),
        rejected,
        frames_dropped,
        messages_sent: bc.sent,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn out(is_frame: bool, tag: &str) -> Outgoing {
        Outgoing {
            text: Arc::new(tag.to_string()),
            is_frame,
        }
    }

    fn queue(cap: usize) -> ClientQueue {
        ClientQueue {
            queue: Mutex::new(VecDeque::new()),
            capacity: cap,
            dropped_frames: AtomicU64::new(0),
            closed: AtomicBool::new(false),
        }
    }

    fn contents(q: &ClientQueue) -> Vec<String> {
        q.queue.lock().unwrap().iter().map(|m| m.text.to_string()).collect()
    }

    #[test]
    fn full_queue_drops_oldest_frame() {
        let q = queue(3);
        q.push(out(true, "f1"));
        q.push(out(false, "s1"));
        q.push(out(true, "f2"));
        q.push(out(true, "f3"));
        assert_eq!(contents(&q), ["s1", "f2", "f3"]);
        assert_eq!(q.dropped_frames.load(Ordering::Relaxed), 1);
    }

    #[test]
    fn state_is_never_dropped() {
        let q = queue(2);
        q.push(out(false, "s1"));
        q.push(out(false, "s2"));
        q.push(out(true, "f1"));
        q.push(out(false, "s3"));
        assert_eq!(contents(&q), ["s1", "s2", "s3"]);
        assert_eq!(q.dropped_frames.load(Ordering::Relaxed), 1);
    }

    #[test]
    fn busy_port_is_addr_in_use() {
        let blocker = TcpListener::bind("127.0.0.1:0").unwrap();
        let port = blocker.local_addr().unwrap().port();
        let mut opts = ServeOptions::from_config(&Config::default());
        opts.port = port;
        match spawn(&Config::default(), opts) {
            Err(Error::Io(e)) => assert_eq!(e.kind(), ErrorKind::AddrInUse),
            Err(e) => panic!("unexpected error {e}"),
            Ok(_) => panic!("bind succeeded on a busy port"),
        }
    }
}
