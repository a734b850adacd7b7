use std::io;
use std::net::{SocketAddr, ToSocketAddrs, UdpSocket};
use std::time::{Duration, Instant};

use thiserror::Error;

use super::codec::{
    decode_packet, encode_packet, ErrorCode, InvalidPacket, PacketKind, RegPacket, MAX_DATAGRAM,
};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_millis(100);
pub const DEFAULT_RETRIES: u32 = 8;

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("no reply after {attempts} attempts")]
    Timeout { attempts: u32 },
    #[error("read-back mismatch at {addr:#06x}: wrote {wrote:#x}, read back {readback:#x}")]
    VerifyMismatch { addr: u32, wrote: u32, readback: u32 },
    #[error("board rejected request: {0}")]
    Remote(ErrorCode),
    #[error("reply does not match request")]
    UnexpectedReply,
    #[error(transparent)]
    Invalid(#[from] InvalidPacket),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ClientStats {
    pub requests: u64,
    pub retransmits: u64,
    /// Replies discarded because their sequence id was stale.
    pub stale_replies: u64,
    pub timeouts: u64,
}

/// Blocking register client. Retransmissions reuse the sequence id so the
/// server sees at-least-once delivery of an idempotent request.
#[derive(Debug)]
pub struct RegClient {
    socket: UdpSocket,
    peer: SocketAddr,
    seq: u8,
    timeout: Duration,
    retries: u32,
    stats: ClientStats,
}

impl RegClient {
    pub fn connect(peer: impl ToSocketAddrs) -> io::Result<Self> {
        let peer = peer
            .to_socket_addrs()?
            .next()
            .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "no address"))?;
        let bind: SocketAddr = if peer.is_ipv4() {
            "0.0.0.0:0".parse().unwrap()
        } else {
            "[::]:0".parse().unwrap()
        };
        let socket = UdpSocket::bind(bind)?;
        Ok(Self {
            socket,
            peer,
            seq: 0,
            timeout: DEFAULT_TIMEOUT,
            retries: DEFAULT_RETRIES,
            stats: ClientStats::default(),
        })
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn with_retries(mut self, retries: u32) -> Self {
        self.retries = retries;
        self
    }

    pub fn peer(&self) -> SocketAddr {
        self.peer
    }

    pub fn stats(&self) -> ClientStats {
        self.stats
    }

    pub fn read(&mut self, addr: u32, count: u8) -> Result<Vec<u32>, ClientError> {
        let seq = self.next_seq();
        let req = RegPacket::read_request(seq, addr, count);
        Ok(self.transact(&req)?.data)
    }

    /// Writes and returns the board's read-back values.
    pub fn write(&mut self, addr: u32, values: &[u32]) -> Result<Vec<u32>, ClientError> {
        let seq = self.next_seq();
        let req = RegPacket::write_request(seq, addr, values.to_vec());
        Ok(self.transact(&req)?.data)
    }

    /// Writes and checks the read-back equals what was written.
    pub fn write_verified(&mut self, addr: u32, values: &[u32]) -> Result<(), ClientError> {
        let readback = self.write(addr, values)?;
        for (i, (&wrote, &got)) in values.iter().zip(&readback).enumerate() {
            if wrote != got {
                return Err(ClientError::VerifyMismatch {
                    addr: addr + 4 * i as u32,
                    wrote,
                    readback: got,
                });
            }
        }
        Ok(())
    }

    fn next_seq(&mut self) -> u8 {
        let s = self.seq;
        self.seq = self.seq.wrapping_add(1);
        s
    }

    /// Sends `req`, retransmitting on timeout, and returns the matching reply.
    pub fn transact(&mut self, req: &RegPacket) -> Result<RegPacket, ClientError> {
        let bytes = encode_packet(req)?;
        self.stats.requests += 1;
        let mut buf = [0u8; MAX_DATAGRAM + 16];
        let attempts = self.retries + 1;
        for attempt in 0..attempts {
            if attempt > 0 {
                self.stats.retransmits += 1;
            }
            self.socket.send_to(&bytes, self.peer)?;
            let deadline = Instant::now() + self.timeout;
            loop {
                let now = Instant::now();
                if now >= deadline {
                    break;
                }
                self.socket.set_read_timeout(Some(deadline - now))?;
                let (n, from) = match self.socket.recv_from(&mut buf) {
                    Ok(r) => r,
                    Err(e)
                        if matches!(
                            e.kind(),
                            io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut
                        ) =>
                    {
                        break
                    }
                    // ICMP port unreachable surfaces here on some platforms.
                    Err(e) if e.kind() == io::ErrorKind::ConnectionRefused => {
                        std::thread::sleep(deadline.saturating_duration_since(Instant::now()));
                        break;
                    }
                    Err(e) => return Err(e.into()),
                };
                if from != self.peer {
                    continue;
                }
                let Ok(rep) = decode_packet(&buf[..n]) else {
                    continue;
                };
                if rep.is_request() || rep.seq != req.seq {
                    self.stats.stale_replies += 1;
                    continue;
                }
                if rep.op != req.op || rep.addr != req.addr {
                    return Err(ClientError::UnexpectedReply);
                }
                return match rep.kind {
                    PacketKind::ErrorReply(code) => Err(ClientError::Remote(code)),
                    _ if rep.count != req.count => Err(ClientError::UnexpectedReply),
                    _ => Ok(rep),
                };
            }
            self.stats.timeouts += 1;
        }
        Err(ClientError::Timeout { attempts })
    }
}

impl ClientError {
    pub fn remote_code(&self) -> Option<ErrorCode> {
        match self {
            Self::Remote(c) => Some(*c),
            _ => None,
        }
    }
}
