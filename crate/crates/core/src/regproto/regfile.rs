use std::collections::BTreeMap;

use super::codec::ErrorCode;

pub const BOARD_ID: u32 = 0x0000;
/// Generator rate in kbit/s; 0 idles the generator.
pub const DATA_RATE_CTRL: u32 = 0x0004;
/// Payload bytes per frame, multiple of 8.
pub const FRAME_SIZE: u32 = 0x0008;
/// bit0 enables frame generation.
pub const TRIGGER_CTRL: u32 = 0x000C;
/// Bytes emitted in the last completed sample window.
pub const THROUGHPUT_COUNT: u32 = 0x0010;
pub const FIFO_OCCUPANCY: u32 = 0x0014;
/// Frames dropped since reset.
pub const OVERFLOW_COUNT: u32 = 0x0018;

pub const DEFAULT_FRAME_SIZE: u32 = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Access {
    ReadOnly,
    ReadWrite,
}

#[derive(Debug, Clone)]
struct Register {
    value: u32,
    reset: u32,
    access: Access,
    validate: Option<fn(u32) -> bool>,
}

/// Board register file: address to 32-bit value with per-register access mode.
#[derive(Debug, Clone)]
pub struct RegisterFile {
    regs: BTreeMap<u32, Register>,
}

fn frame_size_ok(v: u32) -> bool {
    v > 0 && v % 8 == 0
}

impl RegisterFile {
    pub fn empty() -> Self {
        Self {
            regs: BTreeMap::new(),
        }
    }

    /// The standard board register map.
    pub fn for_board(board_id: u16, frame_size: u32) -> Self {
        let mut f = Self::empty();
        f.define(BOARD_ID, Access::ReadOnly, board_id as u32);
        f.define(DATA_RATE_CTRL, Access::ReadWrite, 0);
        f.define_validated(FRAME_SIZE, frame_size, frame_size_ok);
        f.define(TRIGGER_CTRL, Access::ReadWrite, 0);
        f.define(THROUGHPUT_COUNT, Access::ReadOnly, 0);
        f.define(FIFO_OCCUPANCY, Access::ReadOnly, 0);
        f.define(OVERFLOW_COUNT, Access::ReadOnly, 0);
        f
    }

    pub fn define(&mut self, addr: u32, access: Access, reset: u32) {
        self.regs.insert(
            addr,
            Register {
                value: reset,
                reset,
                access,
                validate: None,
            },
        );
    }

    fn define_validated(&mut self, addr: u32, reset: u32, validate: fn(u32) -> bool) {
        self.regs.insert(
            addr,
            Register {
                value: reset,
                reset,
                access: Access::ReadWrite,
                validate: Some(validate),
            },
        );
    }

    pub fn reset(&mut self) {
        for r in self.regs.values_mut() {
            r.value = r.reset;
        }
    }

    pub fn get(&self, addr: u32) -> Option<u32> {
        self.regs.get(&addr).map(|r| r.value)
    }

    pub fn access(&self, addr: u32) -> Option<Access> {
        self.regs.get(&addr).map(|r| r.access)
    }

    /// Sets a register from internal logic, bypassing the access mode.
    pub fn set_internal(&mut self, addr: u32, value: u32) {
        if let Some(r) = self.regs.get_mut(&addr) {
            r.value = value;
        }
    }

    pub fn read_block(&self, addrs: impl Iterator<Item = u32>) -> Result<Vec<u32>, ErrorCode> {
        addrs
            .map(|a| self.get(a).ok_or(ErrorCode::UnknownAddress))
            .collect()
    }

    /// Applies all writes or none.
    pub fn write_block(&mut self, writes: &[(u32, u32)]) -> Result<(), ErrorCode> {
        for &(addr, value) in writes {
            let r = self.regs.get(&addr).ok_or(ErrorCode::UnknownAddress)?;
            if r.access == Access::ReadOnly {
                return Err(ErrorCode::ReadOnly);
            }
            if r.validate.is_some_and(|ok| !ok(value)) {
                return Err(ErrorCode::BadValue);
            }
        }
        for &(addr, value) in writes {
            self.regs.get_mut(&addr).unwrap().value = value;
        }
        Ok(())
    }

    pub fn snapshot(&self) -> Vec<(u32, u32)> {
        self.regs.iter().map(|(a, r)| (*a, r.value)).collect()
    }
}
