//! Daisy chains of boards: topology files, the virtual-time simulator and
//! the threaded socket runner.

mod clock;
mod real;
mod sim;
mod topology;

use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;

pub use clock::VirtualClock;
pub use real::{run_real, RealError};
pub use sim::{run_virtual, ChainSim};
pub use topology::{
    Arbitration, ChainTopology, ControlOp, ControlStep, RunMode, SinkConfig, TopologyError,
};

use crate::board::BoardStats;
use crate::measure::{write_outputs, MeasureError, ThroughputReport, ThroughputSample};
use crate::regproto::RegPacket;
use crate::transport::Audit;

/// Outcome of one slow-control step.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ControlRecord {
    pub at_ns: u64,
    pub board_id: u16,
    pub op: ControlOp,
    pub addr: u32,
    /// Read-back values from the reply.
    pub values: Vec<u32>,
    pub error: Option<String>,
}

impl ControlRecord {
    pub(crate) fn new(step: &ControlStep, at_ns: u64, result: Result<Vec<u32>, String>) -> Self {
        let (values, error) = match result {
            Ok(v) => (v, None),
            Err(e) => (Vec::new(), Some(e)),
        };
        Self {
            at_ns,
            board_id: step.board_id,
            op: step.op,
            addr: step.addr,
            values,
            error,
        }
    }

    pub(crate) fn from_reply(step: &ControlStep, at_ns: u64, reply: Option<&RegPacket>) -> Self {
        let result = match reply {
            None => Err("no reply".to_string()),
            Some(r) => match r.error_code() {
                Some(code) => Err(code.to_string()),
                None => Ok(r.data.clone()),
            },
        };
        Self::new(step, at_ns, result)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RunOutput {
    /// Windows covering the run duration.
    pub samples: Vec<ThroughputSample>,
    /// `None` when the run is shorter than one window.
    pub report: Option<ThroughputReport>,
    pub audit: Audit,
    pub boards: Vec<BoardStats>,
    /// Final register contents per board.
    pub registers: Vec<(u16, BTreeMap<u32, u32>)>,
    pub control: Vec<ControlRecord>,
    /// Deepest upstream queue seen, in frames.
    pub max_lane_frames: usize,
    /// Time the last frame reached the sink, or the runner stopped.
    pub end_ns: u64,
}

impl RunOutput {
    /// Clean stream and every missing frame accounted for by a cache
    /// overflow on its board.
    pub fn audit_ok(&self) -> bool {
        self.audit.is_clean()
            && self.boards.iter().all(|b| {
                self.audit
                    .boards
                    .get(&b.board_id)
                    .map_or(b.generated == b.overflows, |a| a.gaps == b.overflows)
            })
    }

    /// `throughput.csv`, `report.txt`, `report.json` and `audit.json`.
    pub fn write(&self, dir: &Path) -> Result<(), MeasureError> {
        match &self.report {
            Some(r) => write_outputs(dir, &self.samples, r)?,
            None => {
                std::fs::create_dir_all(dir)?;
                crate::measure::write_samples_csv(
                    &self.samples,
                    std::fs::File::create(dir.join("throughput.csv"))?,
                )?;
            }
        }
        #[derive(Serialize)]
        struct AuditFile<'a> {
            ok: bool,
            audit: &'a Audit,
            boards: &'a [BoardStats],
            registers: &'a [(u16, BTreeMap<u32, u32>)],
            control: &'a [ControlRecord],
        }
        let f = std::fs::File::create(dir.join("audit.json"))?;
        crate::measure::write_json(
            f,
            &AuditFile {
                ok: self.audit_ok(),
                audit: &self.audit,
                boards: &self.boards,
                registers: &self.registers,
                control: &self.control,
            },
        )?;
        Ok(())
    }
}
