use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::board::BoardConfig;
use crate::regproto::MAX_COUNT;
use crate::transport::{LinkModel, DEFAULT_SINK_PORT};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    #[default]
    Virtual,
    Real,
}

impl std::str::FromStr for RunMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "virtual" => Ok(Self::Virtual),
            "real" => Ok(Self::Real),
            other => Err(format!("unknown mode {other:?}, expected virtual or real")),
        }
    }
}

/// How a board merges upstream traffic with its own.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arbitration {
    /// One upstream queue per originating board, polled alongside the local
    /// cache. Every board gets an equal share of a saturated tail link.
    #[default]
    PerOrigin,
    /// A single upstream queue against the local cache. Shares halve with
    /// each hop away from the tail.
    TwoInput,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlOp {
    Read,
    #[default]
    Write,
}

/// A slow-control request issued during the run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlStep {
    pub at_us: u64,
    pub board_id: u16,
    #[serde(default)]
    pub op: ControlOp,
    pub addr: u32,
    #[serde(default)]
    pub values: Vec<u32>,
    #[serde(default = "one")]
    pub count: u8,
}

fn one() -> u8 {
    1
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SinkConfig {
    #[serde(default = "default_endpoint")]
    pub endpoint: String,
}

fn default_endpoint() -> String {
    format!("127.0.0.1:{DEFAULT_SINK_PORT}")
}

impl Default for SinkConfig {
    fn default() -> Self {
        Self {
            endpoint: default_endpoint(),
        }
    }
}

fn default_duration() -> f64 {
    1000.0
}

fn default_window() -> u64 {
    crate::measure::DEFAULT_WINDOW_US
}

fn default_max_boards() -> usize {
    4
}

fn default_lane_frames() -> usize {
    2
}

fn default_link() -> LinkModel {
    LinkModel::gapless(10_000_000_000)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainTopology {
    #[serde(default)]
    pub mode: RunMode,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_duration")]
    pub duration_ms: f64,
    #[serde(default = "default_window")]
    pub window_us: u64,
    #[serde(default = "default_max_boards")]
    pub max_boards: usize,
    #[serde(default)]
    pub arbitration: Arbitration,
    /// Frames each upstream queue holds, counting frames in flight to it.
    #[serde(default = "default_lane_frames")]
    pub lane_frames: usize,
    #[serde(default)]
    pub sink: SinkConfig,
    /// Last board to sink; also the default between boards.
    #[serde(default = "default_link")]
    pub tail_link: LinkModel,
    /// Ordered from the head of the chain to the tail.
    pub boards: Vec<BoardConfig>,
    #[serde(default)]
    pub control: Vec<ControlStep>,
}

#[derive(Debug, Error)]
pub enum TopologyError {
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("parsing topology: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("a chain needs at least one board")]
    NoBoards,
    #[error("{count} boards exceed the limit of {max}")]
    TooManyBoards { count: usize, max: usize },
    #[error("board id {0} appears more than once")]
    DuplicateBoardId(u16),
    #[error("control step at {at_us} us names unknown board {board_id}")]
    UnknownControlBoard { at_us: u64, board_id: u16 },
    #[error("{0}")]
    Invalid(String),
}

impl ChainTopology {
    pub fn new(boards: Vec<BoardConfig>, tail_link: LinkModel) -> Self {
        Self {
            mode: RunMode::Virtual,
            seed: 0,
            duration_ms: default_duration(),
            window_us: default_window(),
            max_boards: default_max_boards(),
            arbitration: Arbitration::PerOrigin,
            lane_frames: default_lane_frames(),
            sink: SinkConfig::default(),
            tail_link,
            boards,
            control: Vec::new(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, TopologyError> {
        let t: Self = toml::from_str(text)?;
        t.validate()?;
        Ok(t)
    }

    pub fn load(path: &Path) -> Result<Self, TopologyError> {
        let text = std::fs::read_to_string(path).map_err(|source| TopologyError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn duration_ns(&self) -> u64 {
        (self.duration_ms * 1e6).round() as u64
    }

    /// Link leaving the board at `position`.
    pub fn link_after(&self, position: usize) -> LinkModel {
        if position + 1 == self.boards.len() {
            self.tail_link
        } else {
            self.boards[position].link.unwrap_or(self.tail_link)
        }
    }

    pub fn position_of(&self, board_id: u16) -> Option<usize> {
        self.boards.iter().position(|b| b.board_id == board_id)
    }

    pub fn validate(&self) -> Result<(), TopologyError> {
        let invalid = |m: String| Err(TopologyError::Invalid(m));
        if self.boards.is_empty() {
            return Err(TopologyError::NoBoards);
        }
        if self.boards.len() > self.max_boards {
            return Err(TopologyError::TooManyBoards {
                count: self.boards.len(),
                max: self.max_boards,
            });
        }
        let mut seen = BTreeSet::new();
        for b in &self.boards {
            if !seen.insert(b.board_id) {
                return Err(TopologyError::DuplicateBoardId(b.board_id));
            }
            b.validate().map_err(TopologyError::Invalid)?;
        }
        if !(self.duration_ms.is_finite() && self.duration_ms > 0.0) {
            return invalid(format!("duration_ms must be positive, got {}", self.duration_ms));
        }
        if self.window_us == 0 {
            return invalid("window_us must be positive".into());
        }
        if self.lane_frames == 0 {
            return invalid("lane_frames must be positive".into());
        }
        self.tail_link
            .validate()
            .map_err(|e| TopologyError::Invalid(format!("tail_link: {e}")))?;
        for c in &self.control {
            if !seen.contains(&c.board_id) {
                return Err(TopologyError::UnknownControlBoard {
                    at_us: c.at_us,
                    board_id: c.board_id,
                });
            }
            let n = match c.op {
                ControlOp::Write => c.values.len(),
                ControlOp::Read => c.count as usize,
            };
            if n == 0 || n > MAX_COUNT as usize {
                return invalid(format!("control step at {} us: bad register count {n}", c.at_us));
            }
        }
        Ok(())
    }
}
