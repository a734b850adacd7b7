//! Software model of a daisy-chained detector readout: SOP/EOP framing,
//! UDP slow control, frame buffering, round-robin chain arbitration, virtual
//! and socket transport, and windowed throughput measurement.

pub mod arbiter;
pub mod board;
pub mod buffer;
pub mod chain;
pub mod framing;
pub mod measure;
pub mod payload;
pub mod regproto;
pub mod transport;
