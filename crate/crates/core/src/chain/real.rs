use std::collections::BTreeMap;
use std::io::{self, Write};
use std::net::{SocketAddr, TcpStream};
use std::time::{Duration, Instant};

use crossbeam_channel::{Receiver, Sender, TryRecvError};
use thiserror::Error;

use super::topology::{Arbitration, ChainTopology, ControlOp};
use super::{ControlRecord, RunOutput};
use crate::arbiter::PollingArbiter;
use crate::board::{Board, BoardConfig, BoardStats, GeneratorMode};
use crate::framing::Frame;
use crate::measure::{summarize, MeasureError, DEFAULT_HISTOGRAM_BINS};
use crate::regproto::{RegClient, UdpEndpoint};
use crate::transport::{sleep_until, LinkModel, Pacer, SinkServer};

/// Longest a board keeps forwarding after generation stops.
const DRAIN_LIMIT: Duration = Duration::from_secs(10);
const IDLE_NAP: Duration = Duration::from_micros(50);
/// Lead time so that every thread is running before t = 0.
const START_DELAY: Duration = Duration::from_millis(20);

#[derive(Debug, Error)]
pub enum RealError {
    #[error("binding {what}: {source}")]
    Bind { what: String, source: io::Error },
    #[error("board {board_id}: {source}")]
    Board { board_id: u16, source: io::Error },
    #[error(transparent)]
    Measure(#[from] MeasureError),
    #[error("a board thread panicked")]
    Panicked,
}

enum Output {
    Lanes {
        senders: Vec<Sender<Frame>>,
        lane_of: BTreeMap<u16, usize>,
    },
    Tail(TcpStream),
}

impl Output {
    fn lane(&self, origin: u16) -> usize {
        match self {
            Output::Lanes { lane_of, .. } => lane_of.get(&origin).copied().unwrap_or(0),
            Output::Tail(_) => 0,
        }
    }

    fn has_credit(&self, origin: u16) -> bool {
        match self {
            Output::Lanes { senders, .. } => !senders[self.lane(origin)].is_full(),
            Output::Tail(_) => true,
        }
    }
}

struct BoardTask {
    board: Board,
    endpoint: UdpEndpoint,
    inputs: Vec<Receiver<Frame>>,
    output: Output,
    link: LinkModel,
    start: Instant,
    duration: Duration,
    window: Duration,
}

struct BoardResult {
    stats: BoardStats,
    registers: BTreeMap<u32, u32>,
    max_lane: usize,
}

impl BoardTask {
    fn run(mut self) -> io::Result<BoardResult> {
        let n_lanes = self.inputs.len();
        let mut heads: Vec<Option<Frame>> = vec![None; n_lanes];
        let mut closed = vec![false; n_lanes];
        let mut arbiter = PollingArbiter::new(n_lanes + 1);
        let mut link = Pacer::new(self.link.effective_rate_bps(), 0);
        let frame_bytes = self.board.frame_len() as u64;
        let mut gen = Pacer::new(self.board.rate_bps() as f64, frame_bytes);
        let mode = self.board.config().generator;
        let hz = self.board.config().frame_rate_hz.max(1) as u64;
        let mut tick = 0u64;
        let mut window = 0u64;
        let mut window_bytes = 0u64;
        let mut max_lane = 0usize;
        sleep_until(self.start);
        gen.set_rate(gen.rate_bps());
        loop {
            let mut busy = false;
            let elapsed = self.start.elapsed();

            while let Ok((bytes, from)) = self.endpoint.queue().try_recv() {
                if let Some(reply) = self.board.handle_datagram(&bytes) {
                    let _ = self.endpoint.reply(&reply, from);
                }
                gen.set_rate(self.board.rate_bps() as f64);
                busy = true;
            }

            while elapsed >= self.window * (window as u32 + 1) {
                self.board.close_window(window_bytes);
                window_bytes = 0;
                window += 1;
            }

            let generating = elapsed < self.duration;
            match mode {
                GeneratorMode::Trigger => {
                    while tick * 1_000_000_000 / hz <= elapsed.as_nanos() as u64 && generating {
                        if self.board.enabled() {
                            let f = self.board.make_frame(Some(tick as u32));
                            self.board.offer(f, elapsed.as_nanos() as u64);
                            busy = true;
                        }
                        tick += 1;
                    }
                }
                GeneratorMode::Rate | GeneratorMode::Traffic => {
                    let len = self.board.frame_len();
                    while generating && self.board.enabled() {
                        match gen.due(len) {
                            Some(due) if due <= Instant::now() => {}
                            _ => break,
                        }
                        if mode == GeneratorMode::Traffic && !self.board.fifo().fits(len) {
                            break;
                        }
                        gen.consume(len);
                        let f = self.board.make_frame(None);
                        self.board.offer(f, elapsed.as_nanos() as u64);
                        busy = true;
                    }
                }
            }

            for i in 0..n_lanes {
                if heads[i].is_none() && !closed[i] {
                    match self.inputs[i].try_recv() {
                        Ok(f) => heads[i] = Some(f),
                        Err(TryRecvError::Disconnected) => closed[i] = true,
                        Err(TryRecvError::Empty) => {}
                    }
                }
                max_lane = max_lane.max(self.inputs[i].len() + heads[i].is_some() as usize);
            }

            let ready = |i: usize| {
                let head = if i == n_lanes {
                    self.board.fifo().front()
                } else {
                    heads[i].as_ref()
                };
                head.is_some_and(|f| self.output.has_credit(f.board_id()))
            };
            if let Some(i) = arbiter.grant(ready) {
                let frame = if i == n_lanes {
                    self.board.fifo_mut().pop()
                } else {
                    heads[i].take()
                }
                .expect("granted input has a frame");
                let len = frame.serialized_len();
                link.wait(len);
                self.send(frame.clone())?;
                self.board.note_sent(&frame);
                window_bytes += len as u64;
                busy = true;
            }

            let drained = self.board.fifo().is_empty()
                && closed.iter().all(|&c| c)
                && heads.iter().all(Option::is_none);
            if !generating && drained {
                break;
            }
            if elapsed > self.duration + DRAIN_LIMIT {
                log::warn!("board {}: gave up draining", self.board.id());
                break;
            }
            if !busy {
                std::thread::sleep(IDLE_NAP);
            }
        }
        if let Output::Tail(s) = &mut self.output {
            s.flush()?;
        }
        Ok(BoardResult {
            stats: self.board.stats(),
            registers: self.board.registers().snapshot().into_iter().collect(),
            max_lane,
        })
    }

    fn send(&mut self, frame: Frame) -> io::Result<()> {
        match &mut self.output {
            Output::Tail(stream) => stream.write_all(&frame.to_bytes()),
            Output::Lanes { senders, lane_of } => {
                let lane = lane_of.get(&frame.board_id()).copied().unwrap_or(0);
                senders[lane]
                    .try_send(frame)
                    .map_err(|_| io::Error::new(io::ErrorKind::BrokenPipe, "downstream board gone"))
            }
        }
    }
}

/// Runs a validated topology on threads and sockets in wall-clock time.
/// Boards listen for slow control on UDP and the tail streams to a TCP sink.
pub fn run_real(topo: &ChainTopology) -> Result<RunOutput, RealError> {
    let sink = SinkServer::spawn(topo.sink.endpoint.as_str(), topo.seed, topo.window_us).map_err(
        |source| RealError::Bind {
            what: format!("sink {}", topo.sink.endpoint),
            source,
        },
    )?;
    let n = topo.boards.len();
    let lane_count = |k: usize| match (k, topo.arbitration) {
        (0, _) => 0,
        (_, Arbitration::PerOrigin) => k,
        (_, Arbitration::TwoInput) => 1,
    };
    let mut receivers: Vec<Vec<Receiver<Frame>>> = Vec::new();
    let mut senders: Vec<Vec<Sender<Frame>>> = Vec::new();
    for k in 0..n {
        let (s, r): (Vec<_>, Vec<_>) = (0..lane_count(k))
            .map(|_| crossbeam_channel::bounded(topo.lane_frames))
            .unzip();
        senders.push(s);
        receivers.push(r);
    }

    let start = Instant::now() + START_DELAY;
    let duration = Duration::from_nanos(topo.duration_ns());
    let mut addrs = BTreeMap::new();
    let mut tasks = Vec::new();
    for (k, cfg) in topo.boards.iter().enumerate().rev() {
        let endpoint = bind_board(cfg)?;
        addrs.insert(cfg.board_id, endpoint.local_addr().map_err(|source| RealError::Board {
            board_id: cfg.board_id,
            source,
        })?);
        let output = if k + 1 == n {
            let s = TcpStream::connect(sink.local_addr()).map_err(|source| RealError::Board {
                board_id: cfg.board_id,
                source,
            })?;
            let _ = s.set_nodelay(true);
            Output::Tail(s)
        } else {
            let lane_of = match topo.arbitration {
                Arbitration::PerOrigin => topo.boards[..=k]
                    .iter()
                    .enumerate()
                    .map(|(i, b)| (b.board_id, i))
                    .collect(),
                Arbitration::TwoInput => BTreeMap::new(),
            };
            Output::Lanes {
                senders: std::mem::take(&mut senders[k + 1]),
                lane_of,
            }
        };
        tasks.push(BoardTask {
            board: Board::new(cfg.clone(), topo.seed),
            endpoint,
            inputs: std::mem::take(&mut receivers[k]),
            output,
            link: topo.link_after(k),
            start,
            duration,
            window: Duration::from_micros(topo.window_us),
        });
    }
    tasks.reverse();
    let handles: Vec<_> = tasks
        .into_iter()
        .map(|t| {
            let id = t.board.id();
            std::thread::Builder::new()
                .name(format!("board-{id}"))
                .spawn(move || (id, t.run()))
        })
        .collect::<Result<_, _>>()
        .map_err(|source| RealError::Bind {
            what: "board thread".into(),
            source,
        })?;

    let control = run_control(topo, &addrs, start);

    let mut results = Vec::new();
    for h in handles {
        let (board_id, r) = h.join().map_err(|_| RealError::Panicked)?;
        results.push(r.map_err(|source| RealError::Board { board_id, source })?);
    }
    let end_ns = start.elapsed().as_nanos() as u64;
    let mut sink = sink.finish(Duration::from_secs(2))?;
    for r in &results {
        sink.audit_mut().set_generated(r.stats.board_id, r.stats.generated);
    }
    let (audit, sampler) = sink.finish();
    let samples = sampler.samples(Some(topo.duration_ns()));
    let report = summarize(
        &samples,
        topo.window_us,
        topo.tail_link.rate_bps as f64,
        DEFAULT_HISTOGRAM_BINS,
    )
    .ok();
    Ok(RunOutput {
        samples,
        report,
        audit,
        max_lane_frames: results.iter().map(|r| r.max_lane).max().unwrap_or(0),
        registers: results
            .iter()
            .map(|r| (r.stats.board_id, r.registers.clone()))
            .collect(),
        boards: results.into_iter().map(|r| r.stats).collect(),
        control,
        end_ns,
    })
}

fn bind_board(cfg: &BoardConfig) -> Result<UdpEndpoint, RealError> {
    UdpEndpoint::bind(("127.0.0.1", cfg.udp_port)).map_err(|source| RealError::Bind {
        what: format!("board {} udp port {}", cfg.board_id, cfg.udp_port),
        source,
    })
}

fn run_control(
    topo: &ChainTopology,
    addrs: &BTreeMap<u16, SocketAddr>,
    start: Instant,
) -> Vec<ControlRecord> {
    let mut steps: Vec<_> = topo.control.iter().collect();
    steps.sort_by_key(|c| c.at_us);
    let mut clients: BTreeMap<u16, RegClient> = BTreeMap::new();
    let mut out = Vec::new();
    for c in steps {
        sleep_until(start + Duration::from_micros(c.at_us));
        let at_ns = start.elapsed().as_nanos() as u64;
        let client = match clients.entry(c.board_id) {
            std::collections::btree_map::Entry::Occupied(e) => e.into_mut(),
            std::collections::btree_map::Entry::Vacant(e) => match RegClient::connect(addrs[&c.board_id]) {
                Ok(cl) => e.insert(cl),
                Err(err) => {
                    out.push(ControlRecord::new(c, at_ns, Err(err.to_string())));
                    continue;
                }
            },
        };
        let result = match c.op {
            ControlOp::Write => client.write(c.addr, &c.values),
            ControlOp::Read => client.read(c.addr, c.count),
        };
        out.push(ControlRecord::new(c, at_ns, result.map_err(|e| e.to_string())));
    }
    out
}
