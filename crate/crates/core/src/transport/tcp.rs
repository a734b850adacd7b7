use std::io::{self, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use crossbeam_channel::{Receiver, Sender};

use super::sink::Sink;
use crate::framing::{Frame, StreamDecoder};
use crate::measure::MeasureError;

pub const DEFAULT_SINK_PORT: u16 = 24577;

const POLL: Duration = Duration::from_millis(20);
const READ_CHUNK: usize = 256 * 1024;

enum Msg {
    Data { conn: u64, at: Instant, bytes: Vec<u8> },
    Closed { conn: u64 },
}

/// TCP readout sink. Every accepted connection is a separate frame stream;
/// timestamps count from the first byte received on any of them.
pub struct SinkServer {
    addr: SocketAddr,
    accepting: Arc<AtomicBool>,
    force: Arc<AtomicBool>,
    open: Arc<AtomicU64>,
    received: Arc<AtomicU64>,
    acceptor: Option<JoinHandle<()>>,
    consumer: Option<JoinHandle<Result<Sink, MeasureError>>>,
}

impl SinkServer {
    pub fn spawn(addr: impl ToSocketAddrs, seed: u64, window_us: u64) -> io::Result<Self> {
        let sink = Sink::new(seed, window_us).map_err(|e| io::Error::new(io::ErrorKind::InvalidInput, e))?;
        let listener = TcpListener::bind(addr)?;
        listener.set_nonblocking(true)?;
        let local = listener.local_addr()?;
        let accepting = Arc::new(AtomicBool::new(true));
        let force = Arc::new(AtomicBool::new(false));
        let open = Arc::new(AtomicU64::new(0));
        let received = Arc::new(AtomicU64::new(0));
        let (tx, rx) = crossbeam_channel::unbounded();

        let (acc, frc, opn, rcv) = (accepting.clone(), force.clone(), open.clone(), received.clone());
        let acceptor = std::thread::Builder::new()
            .name("sink-accept".into())
            .spawn(move || accept_loop(listener, tx, acc, frc, opn, rcv))?;
        let consumer = std::thread::Builder::new()
            .name("sink-consume".into())
            .spawn(move || consume(rx, sink))?;
        Ok(Self {
            addr: local,
            accepting,
            force,
            open,
            received,
            acceptor: Some(acceptor),
            consumer: Some(consumer),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn received_bytes(&self) -> u64 {
        self.received.load(Ordering::Relaxed)
    }

    pub fn open_connections(&self) -> u64 {
        self.open.load(Ordering::Relaxed)
    }

    /// Stops accepting, waits up to `grace` for open streams to reach EOF,
    /// then cuts the rest.
    pub fn finish(mut self, grace: Duration) -> Result<Sink, MeasureError> {
        self.accepting.store(false, Ordering::Relaxed);
        if let Some(a) = self.acceptor.take() {
            let _ = a.join();
        }
        let deadline = Instant::now() + grace;
        while self.open_connections() > 0 && Instant::now() < deadline {
            std::thread::sleep(Duration::from_millis(2));
        }
        self.force.store(true, Ordering::Relaxed);
        self.consumer
            .take()
            .expect("consumer runs until finish")
            .join()
            .expect("sink consumer panicked")
    }
}

impl Drop for SinkServer {
    fn drop(&mut self) {
        self.accepting.store(false, Ordering::Relaxed);
        self.force.store(true, Ordering::Relaxed);
        if let Some(a) = self.acceptor.take() {
            let _ = a.join();
        }
        if let Some(c) = self.consumer.take() {
            let _ = c.join();
        }
    }
}

fn accept_loop(
    listener: TcpListener,
    tx: Sender<Msg>,
    accepting: Arc<AtomicBool>,
    force: Arc<AtomicBool>,
    open: Arc<AtomicU64>,
    received: Arc<AtomicU64>,
) {
    let mut conn = 0u64;
    while accepting.load(Ordering::Relaxed) {
        match listener.accept() {
            Ok((stream, peer)) => {
                log::debug!("sink: connection {conn} from {peer}");
                open.fetch_add(1, Ordering::Relaxed);
                let (tx, force, open, received) = (tx.clone(), force.clone(), open.clone(), received.clone());
                let id = conn;
                std::thread::spawn(move || {
                    read_loop(stream, id, &tx, &force, &received);
                    let _ = tx.send(Msg::Closed { conn: id });
                    open.fetch_sub(1, Ordering::Relaxed);
                });
                conn += 1;
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => std::thread::sleep(Duration::from_millis(2)),
            Err(e) => {
                log::warn!("sink accept failed: {e}");
                std::thread::sleep(POLL);
            }
        }
    }
}

fn read_loop(mut stream: TcpStream, conn: u64, tx: &Sender<Msg>, force: &AtomicBool, received: &AtomicU64) {
    if stream.set_nonblocking(false).is_err() || stream.set_read_timeout(Some(POLL)).is_err() {
        return;
    }
    let mut buf = vec![0u8; READ_CHUNK];
    while !force.load(Ordering::Relaxed) {
        match stream.read(&mut buf) {
            Ok(0) => return,
            Ok(n) => {
                let at = Instant::now();
                received.fetch_add(n as u64, Ordering::Relaxed);
                if tx
                    .send(Msg::Data {
                        conn,
                        at,
                        bytes: buf[..n].to_vec(),
                    })
                    .is_err()
                {
                    return;
                }
            }
            Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {}
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(_) => return,
        }
    }
}

fn consume(rx: Receiver<Msg>, mut sink: Sink) -> Result<Sink, MeasureError> {
    let mut decoders = std::collections::HashMap::<u64, StreamDecoder>::new();
    let mut origin: Option<Instant> = None;
    for msg in rx {
        match msg {
            Msg::Data { conn, at, bytes } => {
                let o = *origin.get_or_insert(at);
                let t = at.saturating_duration_since(o).as_nanos() as u64;
                let dec = decoders.entry(conn).or_default();
                sink.ingest(dec, t, &bytes)?;
            }
            Msg::Closed { conn } => {
                if let Some(d) = decoders.remove(&conn) {
                    sink.close_stream(d);
                }
            }
        }
    }
    for (_, d) in decoders.drain() {
        sink.close_stream(d);
    }
    Ok(sink)
}

/// Wall-clock token bucket for paced sending.
#[derive(Debug, Clone)]
pub struct Pacer {
    rate_bps: f64,
    start: Instant,
    sent_bits: f64,
    burst_bits: f64,
}

impl Pacer {
    pub fn new(rate_bps: f64, burst_bytes: u64) -> Self {
        Self {
            rate_bps,
            start: Instant::now(),
            sent_bits: 0.0,
            burst_bits: burst_bytes as f64 * 8.0,
        }
    }

    pub fn rate_bps(&self) -> f64 {
        self.rate_bps
    }

    /// Changes the rate from now on without crediting or debiting history.
    pub fn set_rate(&mut self, rate_bps: f64) {
        if rate_bps == self.rate_bps {
            return;
        }
        self.start = Instant::now();
        self.sent_bits = 0.0;
        self.rate_bps = rate_bps;
    }

    /// Earliest instant at which `bytes` more may go out.
    pub fn due(&self, bytes: usize) -> Option<Instant> {
        if self.rate_bps <= 0.0 {
            return None;
        }
        let bits = (self.sent_bits + bytes as f64 * 8.0 - self.burst_bits).max(0.0);
        Some(self.start + Duration::from_secs_f64(bits / self.rate_bps))
    }

    pub fn consume(&mut self, bytes: usize) {
        self.sent_bits += bytes as f64 * 8.0;
    }

    /// Blocks until `bytes` may go out and takes them. `false` if the rate
    /// is zero.
    pub fn wait(&mut self, bytes: usize) -> bool {
        let Some(due) = self.due(bytes) else {
            return false;
        };
        sleep_until(due);
        self.consume(bytes);
        true
    }
}

pub fn sleep_until(t: Instant) {
    loop {
        let now = Instant::now();
        if now >= t {
            return;
        }
        let left = t - now;
        if left > Duration::from_micros(200) {
            std::thread::sleep(left - Duration::from_micros(100));
        } else {
            std::thread::yield_now();
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SendStats {
    pub frames: u64,
    pub bytes: u64,
}

/// Sends `next()` frames to `target` at `rate_bps` for `duration`.
pub fn send_paced(
    target: SocketAddr,
    rate_bps: f64,
    duration: Duration,
    mut next: impl FnMut(u64) -> Frame,
) -> io::Result<SendStats> {
    let mut stream = TcpStream::connect(target)?;
    stream.set_nodelay(true)?;
    let mut pacer = Pacer::new(rate_bps, 0);
    let end = Instant::now() + duration;
    let mut stats = SendStats::default();
    let mut buf = Vec::new();
    loop {
        let frame = next(stats.frames);
        let len = frame.serialized_len();
        match pacer.due(len) {
            Some(due) if due < end => sleep_until(due),
            _ => break,
        }
        pacer.consume(len);
        buf.clear();
        frame.write_to(&mut buf);
        stream.write_all(&buf)?;
        stats.frames += 1;
        stats.bytes += len as u64;
    }
    stream.flush()?;
    Ok(stats)
}
