use std::collections::{BTreeMap, VecDeque};

use super::clock::VirtualClock;
use super::topology::{Arbitration, ChainTopology, ControlOp};
use super::{ControlRecord, RunOutput};
use crate::arbiter::PollingArbiter;
use crate::board::{Board, GeneratorMode, TokenBucket};
use crate::framing::Frame;
use crate::measure::{summarize, Arrival, DEFAULT_HISTOGRAM_BINS};
use crate::regproto::{decode_packet, encode_packet, RegPacket};
use crate::transport::{Sink, VirtualLink};

#[derive(Debug, Clone, Copy)]
enum Event {
    Trigger { node: usize, tick: u64 },
    Pace { node: usize, epoch: u64 },
    Done { node: usize },
    Control { step: usize },
    Window { index: u64 },
}

#[derive(Debug, Default)]
struct Lane {
    queue: VecDeque<Frame>,
    /// Frames on the wire toward this lane.
    reserved: usize,
}

#[derive(Debug)]
struct Node {
    board: Board,
    lanes: Vec<Lane>,
    arbiter: PollingArbiter,
    link: VirtualLink,
    bucket: TokenBucket,
    epoch: u64,
    stalled: bool,
    in_flight: Option<(Frame, Vec<Arrival>)>,
    window_bytes: BTreeMap<u64, u64>,
    lane_high_water: usize,
}

impl Node {
    fn local(&self) -> usize {
        self.lanes.len()
    }

    fn head(&self, input: usize) -> Option<&Frame> {
        if input == self.local() {
            self.board.fifo().front()
        } else {
            self.lanes[input].queue.front()
        }
    }
}

/// Runs a chain in virtual time. The outcome depends only on the topology.
pub struct ChainSim {
    topo: ChainTopology,
    nodes: Vec<Node>,
    positions: BTreeMap<u16, usize>,
    clock: VirtualClock<Event>,
    sink: Sink,
    duration_ns: u64,
    window_ns: u64,
    control: Vec<ControlRecord>,
}

impl ChainSim {
    /// `topo` must have passed validation.
    pub fn new(topo: ChainTopology) -> Self {
        let mut clock = VirtualClock::new();
        let nodes: Vec<Node> = topo
            .boards
            .iter()
            .enumerate()
            .map(|(k, cfg)| {
                let board = Board::new(cfg.clone(), topo.seed);
                let lanes = match (k, topo.arbitration) {
                    (0, _) => 0,
                    (_, Arbitration::PerOrigin) => k,
                    (_, Arbitration::TwoInput) => 1,
                };
                match cfg.generator {
                    GeneratorMode::Trigger => clock.schedule(0, Event::Trigger { node: k, tick: 0 }),
                    _ => clock.schedule(0, Event::Pace { node: k, epoch: 0 }),
                }
                Node {
                    bucket: TokenBucket::new(board.rate_bps(), board.frame_len() as u64 * 8, 0),
                    board,
                    lanes: (0..lanes).map(|_| Lane::default()).collect(),
                    arbiter: PollingArbiter::new(lanes + 1),
                    link: VirtualLink::new(topo.link_after(k)),
                    epoch: 0,
                    stalled: false,
                    in_flight: None,
                    window_bytes: BTreeMap::new(),
                    lane_high_water: 0,
                }
            })
            .collect();
        for (i, c) in topo.control.iter().enumerate() {
            clock.schedule(c.at_us * 1000, Event::Control { step: i });
        }
        let window_ns = topo.window_us * 1000;
        clock.schedule(window_ns, Event::Window { index: 0 });
        Self {
            positions: topo
                .boards
                .iter()
                .enumerate()
                .map(|(i, b)| (b.board_id, i))
                .collect(),
            sink: Sink::new(topo.seed, topo.window_us).expect("window validated"),
            duration_ns: topo.duration_ns(),
            window_ns,
            nodes,
            clock,
            control: Vec::new(),
            topo,
        }
    }

    pub fn run(mut self) -> RunOutput {
        while let Some((now, ev)) = self.clock.pop() {
            match ev {
                Event::Trigger { node, tick } => self.on_trigger(node, tick, now),
                Event::Pace { node, epoch } => {
                    if self.nodes[node].epoch == epoch {
                        self.pace(node, now);
                    }
                }
                Event::Done { node } => self.on_done(node, now),
                Event::Control { step } => self.on_control(step, now),
                Event::Window { index } => self.on_window(index),
            }
        }
        self.finish()
    }

    fn finish(mut self) -> RunOutput {
        let end_ns = self.clock.now();
        for n in &self.nodes {
            self.sink
                .audit_mut()
                .set_generated(n.board.id(), n.board.frames_generated());
        }
        let (audit, sampler) = self.sink.finish();
        let samples = sampler.samples(Some(self.duration_ns));
        let report = summarize(
            &samples,
            self.topo.window_us,
            self.topo.tail_link.rate_bps as f64,
            DEFAULT_HISTOGRAM_BINS,
        )
        .ok();
        RunOutput {
            samples,
            report,
            audit,
            boards: self.nodes.iter().map(|n| n.board.stats()).collect(),
            registers: self
                .nodes
                .iter()
                .map(|n| (n.board.id(), n.board.registers().snapshot().into_iter().collect()))
                .collect(),
            control: self.control,
            max_lane_frames: self.nodes.iter().map(|n| n.lane_high_water).max().unwrap_or(0),
            end_ns,
        }
    }

    fn lane_index(&self, node: usize, origin: u16) -> usize {
        match self.topo.arbitration {
            Arbitration::PerOrigin => self.positions[&origin],
            Arbitration::TwoInput => 0,
        }
        .min(node.saturating_sub(1))
    }

    fn has_credit(&self, node: usize, origin: u16) -> bool {
        let lane = &self.nodes[node].lanes[self.lane_index(node, origin)];
        lane.queue.len() + lane.reserved < self.topo.lane_frames
    }

    fn try_start(&mut self, k: usize, now: u64) {
        if self.nodes[k].in_flight.is_some() {
            return;
        }
        let tail = k + 1 == self.nodes.len();
        let n = &self.nodes[k];
        let ready: Vec<bool> = (0..n.arbiter.inputs())
            .map(|i| n.head(i).is_some_and(|f| tail || self.has_credit(k + 1, f.board_id())))
            .collect();
        let node = &mut self.nodes[k];
        let Some(input) = node.arbiter.grant(|i| ready[i]) else {
            return;
        };
        let local = input == node.local();
        let frame = if local {
            node.board.fifo_mut().pop()
        } else {
            node.lanes[input].queue.pop_front()
        }
        .expect("granted input has a frame");
        let t = node.link.schedule(now, frame.serialized_len() as u64);
        let pieces = t.pieces(self.window_ns);
        for p in &pieces {
            *node.window_bytes.entry(p.time_ns / self.window_ns).or_default() += p.bytes;
        }
        node.board.note_sent(&frame);
        let wake = local && std::mem::take(&mut node.stalled);
        if wake {
            node.epoch += 1;
            self.clock.schedule(now, Event::Pace { node: k, epoch: node.epoch });
        }
        if !tail {
            let li = self.lane_index(k + 1, frame.board_id());
            self.nodes[k + 1].lanes[li].reserved += 1;
        }
        self.nodes[k].in_flight = Some((frame, if tail { pieces } else { Vec::new() }));
        self.clock.schedule(t.end_ns, Event::Done { node: k });
        if !local {
            self.try_start(k - 1, now);
        }
    }

    fn on_done(&mut self, k: usize, now: u64) {
        let (frame, pieces) = self.nodes[k].in_flight.take().expect("transfer in flight");
        if k + 1 == self.nodes.len() {
            self.sink
                .ingest_frame(&frame, &pieces)
                .expect("virtual arrivals are time ordered");
        } else {
            let li = self.lane_index(k + 1, frame.board_id());
            let next = &mut self.nodes[k + 1];
            let lane = &mut next.lanes[li];
            lane.reserved -= 1;
            lane.queue.push_back(frame);
            next.lane_high_water = next.lane_high_water.max(lane.queue.len());
            self.try_start(k + 1, now);
        }
        self.try_start(k, now);
    }

    fn on_trigger(&mut self, k: usize, tick: u64, now: u64) {
        if now >= self.duration_ns {
            return;
        }
        let b = &mut self.nodes[k].board;
        if b.enabled() {
            let f = b.make_frame(Some(tick as u32));
            b.offer(f, now);
            self.try_start(k, now);
        }
        let hz = self.nodes[k].board.config().frame_rate_hz as u64;
        let next = (tick + 1) * 1_000_000_000 / hz;
        if next < self.duration_ns {
            self.clock.schedule(next, Event::Trigger { node: k, tick: tick + 1 });
        }
    }

    fn pace(&mut self, k: usize, now: u64) {
        let node = &mut self.nodes[k];
        if now >= self.duration_ns || !node.board.enabled() {
            return;
        }
        let len = node.board.frame_len();
        let bits = len as u64 * 8;
        node.bucket.set_capacity(bits);
        if node.board.config().generator == GeneratorMode::Traffic && !node.board.fifo().fits(len) {
            node.stalled = true;
            return;
        }
        if node.bucket.try_take(now, bits) {
            let f = node.board.make_frame(None);
            node.board.offer(f, now);
            self.try_start(k, now);
        }
        let node = &mut self.nodes[k];
        if let Some(wait) = node.bucket.wait_ns(bits) {
            let epoch = node.epoch;
            self.clock.schedule(now + wait, Event::Pace { node: k, epoch });
        }
    }

    fn on_control(&mut self, step: usize, now: u64) {
        let c = self.topo.control[step].clone();
        let k = self.positions[&c.board_id];
        let seq = step as u8;
        let req = match c.op {
            ControlOp::Write => RegPacket::write_request(seq, c.addr, c.values.clone()),
            ControlOp::Read => RegPacket::read_request(seq, c.addr, c.count),
        };
        let bytes = encode_packet(&req).expect("control step validated");
        let reply = self.nodes[k]
            .board
            .handle_datagram(&bytes)
            .and_then(|r| decode_packet(&r).ok());
        self.control.push(ControlRecord::from_reply(&c, now, reply.as_ref()));
        let node = &mut self.nodes[k];
        if node.board.config().generator != GeneratorMode::Trigger {
            node.bucket.set_rate(now, node.board.rate_bps());
            node.epoch += 1;
            node.stalled = false;
            self.pace(k, now);
        }
    }

    fn on_window(&mut self, index: u64) {
        for n in &mut self.nodes {
            let mut bytes = 0;
            while let Some(e) = n.window_bytes.first_entry() {
                if *e.key() > index {
                    break;
                }
                bytes += e.remove();
            }
            n.board.close_window(bytes);
        }
        if self.clock.pending() > 0 {
            self.clock
                .schedule((index + 2) * self.window_ns, Event::Window { index: index + 1 });
        }
    }
}

/// Runs a validated topology in virtual time.
pub fn run_virtual(topo: ChainTopology) -> RunOutput {
    ChainSim::new(topo).run()
}
