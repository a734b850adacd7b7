use std::io;
use std::net::{SocketAddr, ToSocketAddrs, UdpSocket};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use crossbeam_channel::{Receiver, Sender};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::codec::MAX_DATAGRAM;
use super::handle_datagram;
use super::regfile::RegisterFile;

const POLL: Duration = Duration::from_millis(20);

fn is_timeout(e: &io::Error) -> bool {
    matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut)
}

/// A bound UDP port whose datagrams are handed to the owning task through a
/// queue. Replies go out through [`UdpEndpoint::reply`].
#[derive(Debug)]
pub struct UdpEndpoint {
    socket: UdpSocket,
    rx: Receiver<(Vec<u8>, SocketAddr)>,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

impl UdpEndpoint {
    pub fn bind(addr: impl ToSocketAddrs) -> io::Result<Self> {
        let socket = UdpSocket::bind(addr)?;
        let recv = socket.try_clone()?;
        recv.set_read_timeout(Some(POLL))?;
        let (tx, rx) = crossbeam_channel::bounded(256);
        let stop = Arc::new(AtomicBool::new(false));
        let stop2 = stop.clone();
        let thread = std::thread::Builder::new()
            .name("udp-recv".into())
            .spawn(move || receive_loop(recv, tx, stop2))?;
        Ok(Self {
            socket,
            rx,
            stop,
            thread: Some(thread),
        })
    }

    pub fn local_addr(&self) -> io::Result<SocketAddr> {
        self.socket.local_addr()
    }

    pub fn queue(&self) -> &Receiver<(Vec<u8>, SocketAddr)> {
        &self.rx
    }

    pub fn reply(&self, bytes: &[u8], to: SocketAddr) -> io::Result<()> {
        self.socket.send_to(bytes, to).map(|_| ())
    }
}

impl Drop for UdpEndpoint {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

fn receive_loop(sock: UdpSocket, tx: Sender<(Vec<u8>, SocketAddr)>, stop: Arc<AtomicBool>) {
    let mut buf = [0u8; MAX_DATAGRAM + 64];
    while !stop.load(Ordering::Relaxed) {
        match sock.recv_from(&mut buf) {
            Ok((n, from)) => {
                // A full queue drops the datagram, as a busy board would.
                let _ = tx.try_send((buf[..n].to_vec(), from));
            }
            Err(e) if is_timeout(&e) => {}
            Err(e) if e.kind() == io::ErrorKind::ConnectionRefused => {}
            Err(e) => {
                log::warn!("udp receive failed: {e}");
                return;
            }
        }
    }
}

/// Standalone register server: one thread owning a register file.
pub struct RegServer {
    addr: SocketAddr,
    regs: Arc<Mutex<RegisterFile>>,
    handled: Arc<AtomicU64>,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

impl RegServer {
    pub fn spawn(addr: impl ToSocketAddrs, regs: RegisterFile) -> io::Result<Self> {
        let endpoint = UdpEndpoint::bind(addr)?;
        let local = endpoint.local_addr()?;
        let regs = Arc::new(Mutex::new(regs));
        let handled = Arc::new(AtomicU64::new(0));
        let stop = Arc::new(AtomicBool::new(false));
        let (r, h, s) = (regs.clone(), handled.clone(), stop.clone());
        let thread = std::thread::Builder::new()
            .name("reg-server".into())
            .spawn(move || {
                while !s.load(Ordering::Relaxed) {
                    let Ok((bytes, from)) = endpoint.queue().recv_timeout(POLL) else {
                        continue;
                    };
                    let reply = handle_datagram(&bytes, &mut r.lock().unwrap());
                    h.fetch_add(1, Ordering::Relaxed);
                    if let Some(reply) = reply {
                        let _ = endpoint.reply(&reply, from);
                    }
                }
            })?;
        Ok(Self {
            addr: local,
            regs,
            handled,
            stop,
            thread: Some(thread),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn registers(&self) -> RegisterFile {
        self.regs.lock().unwrap().clone()
    }

    /// Internal-logic access (counters that the protocol cannot write).
    pub fn with_registers<R>(&self, f: impl FnOnce(&mut RegisterFile) -> R) -> R {
        f(&mut self.regs.lock().unwrap())
    }

    pub fn handled(&self) -> u64 {
        self.handled.load(Ordering::Relaxed)
    }
}

impl Drop for RegServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

/// UDP relay that drops datagrams at random, for exercising retransmission.
///
/// Clients talk to [`LossyRelay::local_addr`]; requests are forwarded to the
/// target and replies back to the most recent client.
pub struct LossyRelay {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    dropped: Arc<[AtomicU64; 2]>,
    threads: Vec<JoinHandle<()>>,
}

impl LossyRelay {
    /// `request_loss` and `reply_loss` are drop probabilities per direction.
    pub fn spawn(
        target: SocketAddr,
        request_loss: f64,
        reply_loss: f64,
        seed: u64,
    ) -> io::Result<Self> {
        let front = UdpSocket::bind("127.0.0.1:0")?;
        let back = UdpSocket::bind("127.0.0.1:0")?;
        front.set_read_timeout(Some(POLL))?;
        back.set_read_timeout(Some(POLL))?;
        let addr = front.local_addr()?;
        let client: Arc<Mutex<Option<SocketAddr>>> = Arc::new(Mutex::new(None));
        let stop = Arc::new(AtomicBool::new(false));
        let dropped: Arc<[AtomicU64; 2]> = Arc::new([AtomicU64::new(0), AtomicU64::new(0)]);

        let (f2, b2) = (front.try_clone()?, back.try_clone()?);
        let (c1, s1, d1) = (client.clone(), stop.clone(), dropped.clone());
        let up = std::thread::spawn(move || {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut buf = [0u8; 2048];
            while !s1.load(Ordering::Relaxed) {
                if let Ok((n, from)) = front.recv_from(&mut buf) {
                    *c1.lock().unwrap() = Some(from);
                    if rng.random_bool(request_loss) {
                        d1[0].fetch_add(1, Ordering::Relaxed);
                    } else {
                        let _ = b2.send_to(&buf[..n], target);
                    }
                }
            }
        });
        let (s2, d2) = (stop.clone(), dropped.clone());
        let down = std::thread::spawn(move || {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_0F_F00D);
            let mut buf = [0u8; 2048];
            while !s2.load(Ordering::Relaxed) {
                if let Ok((n, _)) = back.recv_from(&mut buf) {
                    let Some(to) = *client.lock().unwrap() else {
                        continue;
                    };
                    if rng.random_bool(reply_loss) {
                        d2[1].fetch_add(1, Ordering::Relaxed);
                    } else {
                        let _ = f2.send_to(&buf[..n], to);
                    }
                }
            }
        });
        Ok(Self {
            addr,
            stop,
            dropped,
            threads: vec![up, down],
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// (requests dropped, replies dropped)
    pub fn dropped(&self) -> (u64, u64) {
        (
            self.dropped[0].load(Ordering::Relaxed),
            self.dropped[1].load(Ordering::Relaxed),
        )
    }
}

impl Drop for LossyRelay {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}
