//! UDP slow-control protocol: datagram codec, register file, request
//! handler, blocking client with read-back verification, and a small
//! threaded server.

mod client;
mod codec;
mod regfile;
mod server;

pub use client::{ClientError, ClientStats, RegClient, DEFAULT_RETRIES, DEFAULT_TIMEOUT};
pub use codec::{
    decode_packet, encode_packet, ErrorCode, InvalidPacket, Malformed, MalformedReason, Op,
    PacketKind, RegPacket, HEADER_LEN, MAGIC, MAX_COUNT, MAX_DATAGRAM,
};
pub use regfile::*;
pub use server::{LossyRelay, RegServer, UdpEndpoint};

pub const DEFAULT_UDP_PORT: u16 = 24576;

/// Executes one request against the register file.
///
/// Writes are all-or-nothing and answered with the post-write read-back of
/// the same addresses.
pub fn handle_request(req: &RegPacket, regs: &mut RegisterFile) -> RegPacket {
    let err = |code| RegPacket::error_reply(req.op, req.seq, req.addr, code);
    if req.count == 0 || req.count > MAX_COUNT {
        return err(ErrorCode::BadCount);
    }
    if req.addr % 4 != 0 {
        return err(ErrorCode::UnknownAddress);
    }
    match req.op {
        Op::Read => {}
        Op::Write => {
            if req.data.len() != req.count as usize {
                return err(ErrorCode::BadCount);
            }
            let writes: Vec<_> = req.addresses().zip(req.data.iter().copied()).collect();
            if let Err(code) = regs.write_block(&writes) {
                return err(code);
            }
        }
    }
    match regs.read_block(req.addresses()) {
        Ok(values) => RegPacket::reply_to(req, values),
        Err(code) => err(code),
    }
}

/// Datagram-level handling: decode, execute, encode.
///
/// Returns `None` when the datagram must be dropped silently (unrecoverable
/// header or not a request).
pub fn handle_datagram(bytes: &[u8], regs: &mut RegisterFile) -> Option<Vec<u8>> {
    let reply = match decode_packet(bytes) {
        Ok(req) if req.is_request() => handle_request(&req, regs),
        Ok(_) => return None,
        Err(m) => {
            let (Some(seq), Some(op), Some(addr)) = (m.seq, m.op, m.addr) else {
                return None;
            };
            if !m.is_request || m.reason == MalformedReason::BadFlags {
                return None;
            }
            let code = match m.reason {
                MalformedReason::Misaligned => ErrorCode::UnknownAddress,
                _ => ErrorCode::BadCount,
            };
            // Misaligned addresses cannot be echoed in a valid reply.
            RegPacket::error_reply(op, seq, addr & !3, code)
        }
    };
    Some(encode_packet(&reply).expect("handler replies are well formed"))
}
