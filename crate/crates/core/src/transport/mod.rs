//! Links between boards and the sink, in virtual time and over sockets.

mod link;
mod sink;
mod tcp;

pub use link::{offered_rate, virtual_link_transfer, GapPlacement, GeneratorSpec, LinkModel, Transfer, VirtualLink};
#[allow(unused_imports)]
pub(crate) use link::lenient_u64;
pub use sink::{Audit, BoardAudit, Sink};
pub use tcp::{send_paced, sleep_until, Pacer, SendStats, SinkServer, DEFAULT_SINK_PORT};
