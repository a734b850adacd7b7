//! `readout` subcommands. Parsing and command logic live here so tests can
//! drive them without spawning processes.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use readout_core::board::{BoardConfig, GeneratorMode};
use readout_core::chain::{run_real, run_virtual, ChainTopology, RunMode, RunOutput};
use readout_core::framing::Frame;
use readout_core::measure::{summarize, write_json, write_outputs, DEFAULT_HISTOGRAM_BINS};
use readout_core::payload::traffic_payload;
use readout_core::regproto::{ClientError, RegClient, DEFAULT_UDP_PORT};
use readout_core::transport::{
    offered_rate, send_paced, Audit, GapPlacement, GeneratorSpec, LinkModel, SinkServer,
    DEFAULT_SINK_PORT,
};

#[derive(Debug, Error)]
pub enum Failure {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
    #[error("audit failed: {0}")]
    Audit(String),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Config(_) => 2,
            Failure::Runtime(_) => 3,
            Failure::Audit(_) => 4,
        }
    }
}

fn runtime(e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(e.to_string())
}

#[derive(Debug, Parser)]
#[command(name = "readout", version, about = "Daisy-chained readout experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a board chain from a topology file.
    RunChain(RunChainArgs),
    /// Receive frames over TCP and report throughput.
    RunDaq(RunDaqArgs),
    /// Drive a traffic generator through a link model or over TCP.
    GenTraffic(GenTrafficArgs),
    /// Read or write board registers over UDP.
    Regctl(RegctlArgs),
}

#[derive(Debug, Args)]
pub struct RunChainArgs {
    #[arg(long, env = "READOUT_TOPOLOGY")]
    pub topology: PathBuf,
    /// `virtual` or `real`; overrides the file.
    #[arg(long, env = "READOUT_MODE")]
    pub mode: Option<RunMode>,
    /// Seconds; overrides the file.
    #[arg(long, env = "READOUT_DURATION")]
    pub duration: Option<f64>,
    #[arg(long, env = "READOUT_WINDOW_US")]
    pub window_us: Option<u64>,
    #[arg(long, env = "READOUT_OUT", default_value = "out")]
    pub out: PathBuf,
    #[arg(long, env = "READOUT_SEED")]
    pub seed: Option<u64>,
    /// Sink TCP port in real mode.
    #[arg(long, env = "READOUT_SINK_PORT")]
    pub port: Option<u16>,
}

#[derive(Debug, Args)]
pub struct RunDaqArgs {
    #[arg(long, env = "READOUT_LISTEN", default_value_t = SocketAddr::from(([0, 0, 0, 0], DEFAULT_SINK_PORT)))]
    pub listen: SocketAddr,
    #[arg(long, env = "READOUT_WINDOW_US", default_value_t = 100)]
    pub window_us: u64,
    #[arg(long, env = "READOUT_OUT", default_value = "out")]
    pub out: PathBuf,
    /// Payload seed of the boards being received.
    #[arg(long, env = "READOUT_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Seconds to listen; until Ctrl-C when absent.
    #[arg(long, env = "READOUT_DURATION")]
    pub duration: Option<f64>,
    /// Histogram upper edge.
    #[arg(long, env = "READOUT_LINK_RATE_BPS", default_value_t = 10e9)]
    pub link_rate_bps: f64,
}

#[derive(Debug, Args)]
pub struct GenTrafficArgs {
    #[arg(long, default_value_t = GeneratorSpec::CLOCK_156_25MHZ)]
    pub clock_hz: f64,
    #[arg(long, default_value_t = 64)]
    pub word_bits: u32,
    #[arg(long, default_value_t = 1.0)]
    pub duty: f64,
    /// Link data words per gap period.
    #[arg(long, default_value_t = 1)]
    pub packet_words: u32,
    /// Link idle words per gap period.
    #[arg(long, default_value_t = 0)]
    pub gap_words: u32,
    /// `burst` or `spread`.
    #[arg(long, default_value = "burst", value_parser = parse_placement)]
    pub placement: GapPlacement,
    #[arg(long, default_value_t = 10e9)]
    pub link_rate_bps: f64,
    #[arg(long, default_value_t = 8192)]
    pub payload_bytes: u32,
    /// Seconds.
    #[arg(long, env = "READOUT_DURATION", default_value_t = 1.0)]
    pub duration: f64,
    #[arg(long, env = "READOUT_MODE", default_value = "virtual")]
    pub mode: RunMode,
    /// Sink address in real mode.
    #[arg(long, env = "READOUT_TARGET", default_value_t = SocketAddr::from(([127, 0, 0, 1], DEFAULT_SINK_PORT)))]
    pub target: SocketAddr,
    #[arg(long, env = "READOUT_WINDOW_US", default_value_t = 100)]
    pub window_us: u64,
    #[arg(long, env = "READOUT_OUT", default_value = "out")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub board_id: u16,
}

#[derive(Debug, Args)]
pub struct RegctlArgs {
    #[arg(long, env = "READOUT_ENDPOINT", default_value_t = SocketAddr::from(([127, 0, 0, 1], DEFAULT_UDP_PORT)))]
    pub endpoint: SocketAddr,
    #[arg(long, default_value_t = 100)]
    pub timeout_ms: u64,
    #[arg(long, default_value_t = readout_core::regproto::DEFAULT_RETRIES)]
    pub retries: u32,
    #[command(subcommand)]
    pub op: RegOp,
}

#[derive(Debug, Subcommand)]
pub enum RegOp {
    Read {
        #[arg(value_parser = parse_u32)]
        addr: u32,
        #[arg(long, default_value_t = 1)]
        count: u8,
    },
    Write {
        #[arg(value_parser = parse_u32)]
        addr: u32,
        #[arg(required = true, value_parser = parse_u32)]
        values: Vec<u32>,
        /// Skip the read-back comparison.
        #[arg(long)]
        no_verify: bool,
    },
}

/// Decimal or `0x` hexadecimal, `_` separators allowed.
pub fn parse_u32(s: &str) -> Result<u32, String> {
    let t = s.replace('_', "");
    let r = match t.strip_prefix("0x").or_else(|| t.strip_prefix("0X")) {
        Some(hex) => u32::from_str_radix(hex, 16),
        None => t.parse(),
    };
    r.map_err(|e| format!("{s:?}: {e}"))
}

fn parse_placement(s: &str) -> Result<GapPlacement, String> {
    match s {
        "burst" => Ok(GapPlacement::Burst),
        "spread" => Ok(GapPlacement::Spread),
        _ => Err(format!("unknown placement {s:?}, expected burst or spread")),
    }
}

static STOP: AtomicBool = AtomicBool::new(false);

pub fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::RunChain(a) => run_chain(a),
        Command::RunDaq(a) => run_daq(a),
        Command::GenTraffic(a) => gen_traffic(a),
        Command::Regctl(a) => regctl(a),
    }
}

/// Parses `args` (program name first) and runs; returns the exit code.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("readout: {f}");
            f.exit_code()
        }
    }
}

fn secs_to_ms(s: f64) -> Result<f64, Failure> {
    if s.is_finite() && s > 0.0 {
        Ok(s * 1e3)
    } else {
        Err(Failure::Config(format!("duration must be positive, got {s}")))
    }
}

pub fn run_chain(a: RunChainArgs) -> Result<(), Failure> {
    let mut topo = ChainTopology::load(&a.topology).map_err(|e| Failure::Config(e.to_string()))?;
    if let Some(m) = a.mode {
        topo.mode = m;
    }
    if let Some(d) = a.duration {
        topo.duration_ms = secs_to_ms(d)?;
    }
    if let Some(w) = a.window_us {
        topo.window_us = w;
    }
    if let Some(s) = a.seed {
        topo.seed = s;
    }
    if let Some(p) = a.port {
        let host = topo.sink.endpoint.rsplit_once(':').map_or("127.0.0.1", |(h, _)| h);
        topo.sink.endpoint = format!("{host}:{p}");
    }
    topo.validate().map_err(|e| Failure::Config(e.to_string()))?;
    let out = match topo.mode {
        RunMode::Virtual => run_virtual(topo),
        RunMode::Real => run_real(&topo).map_err(runtime)?,
    };
    out.write(&a.out).map_err(runtime)?;
    print_run(&out, &a.out);
    if out.audit_ok() {
        Ok(())
    } else {
        Err(Failure::Audit(audit_summary(&out.audit)))
    }
}

fn audit_summary(a: &Audit) -> String {
    format!(
        "{} frames, {} gaps, {} framing errors, {} content mismatches, {} out of order",
        a.frames(),
        a.gaps(),
        a.framing_errors,
        a.content_mismatches(),
        a.out_of_order()
    )
}

fn print_run(out: &RunOutput, dir: &Path) {
    if let Some(r) = &out.report {
        let _ = r.write_text(std::io::stdout());
    }
    for b in &out.boards {
        let got = out.audit.boards.get(&b.board_id).map_or(0, |a| a.frames);
        println!(
            "board {:>5}: generated {:>9} received {:>9} overflow {:>7} cache peak {} B",
            b.board_id, b.generated, got, b.overflows, b.fifo_high_water_bytes
        );
    }
    for c in &out.control {
        match &c.error {
            None => println!("control t={} us board {} {:#06x}: {:?}", c.at_ns / 1000, c.board_id, c.addr, c.values),
            Some(e) => println!("control t={} us board {} {:#06x}: {e}", c.at_ns / 1000, c.board_id, c.addr),
        }
    }
    println!("audit: {}", audit_summary(&out.audit));
    println!("results in {}", dir.display());
}

pub fn run_daq(a: RunDaqArgs) -> Result<(), Failure> {
    let server = SinkServer::spawn(a.listen, a.seed, a.window_us).map_err(runtime)?;
    println!("listening on {}", server.local_addr());
    let deadline = match a.duration {
        Some(d) => Some(Instant::now() + Duration::from_secs_f64(secs_to_ms(d)? / 1e3)),
        None => {
            STOP.store(false, Ordering::Relaxed);
            let _ = ctrlc::set_handler(|| STOP.store(true, Ordering::Relaxed));
            None
        }
    };
    while !STOP.load(Ordering::Relaxed) && deadline.is_none_or(|d| Instant::now() < d) {
        std::thread::sleep(Duration::from_millis(20));
    }
    let sink = server.finish(Duration::from_secs(1)).map_err(runtime)?;
    let (audit, sampler) = sink.finish();
    let samples = sampler.samples(None);
    match summarize(&samples, a.window_us, a.link_rate_bps, DEFAULT_HISTOGRAM_BINS) {
        Ok(r) => {
            write_outputs(&a.out, &samples, &r).map_err(runtime)?;
            let _ = r.write_text(std::io::stdout());
        }
        Err(_) => println!("no data received"),
    }
    std::fs::create_dir_all(&a.out).map_err(runtime)?;
    let f = std::fs::File::create(a.out.join("audit.json")).map_err(runtime)?;
    write_json(f, &audit).map_err(runtime)?;
    println!("audit: {}", audit_summary(&audit));
    if audit.is_clean() {
        Ok(())
    } else {
        Err(Failure::Audit(audit_summary(&audit)))
    }
}

pub fn gen_traffic(a: GenTrafficArgs) -> Result<(), Failure> {
    let spec = GeneratorSpec::new(a.clock_hz, a.word_bits, a.duty);
    spec.validate().map_err(Failure::Config)?;
    let link = LinkModel {
        rate_bps: a.link_rate_bps as u64,
        words_per_packet: a.packet_words,
        gap_words: a.gap_words,
        placement: a.placement,
        word_bits: 64,
    };
    link.validate().map_err(Failure::Config)?;
    let offered = offered_rate(&spec);
    println!(
        "offered {:.6} Gbps, link effective {:.6} Gbps",
        offered / 1e9,
        link.effective_rate_bps() / 1e9
    );
    match a.mode {
        RunMode::Virtual => {
            let mut b = BoardConfig::new(a.board_id);
            b.generator = GeneratorMode::Traffic;
            b.traffic = Some(spec);
            b.frame_payload_bytes = a.payload_bytes;
            let mut topo = ChainTopology::new(vec![b], link);
            topo.duration_ms = secs_to_ms(a.duration)?;
            topo.window_us = a.window_us;
            topo.validate().map_err(|e| Failure::Config(e.to_string()))?;
            let out = run_virtual(topo);
            out.write(&a.out).map_err(runtime)?;
            print_run(&out, &a.out);
            if !out.audit_ok() {
                return Err(Failure::Audit(audit_summary(&out.audit)));
            }
        }
        RunMode::Real => {
            if a.payload_bytes == 0 || a.payload_bytes % 8 != 0 {
                return Err(Failure::Config("payload-bytes must be a positive multiple of 8".into()));
            }
            let rate = offered.min(link.effective_rate_bps());
            let payload = traffic_payload(a.payload_bytes as usize);
            let id = a.board_id;
            let stats = send_paced(a.target, rate, Duration::from_secs_f64(a.duration), |i| {
                Frame::new(id, i as u32, i as u32, payload.clone()).expect("payload is whole words")
            })
            .map_err(runtime)?;
            println!(
                "sent {} frames, {} bytes, {:.6} Gbps nominal",
                stats.frames,
                stats.bytes,
                stats.bytes as f64 * 8.0 / a.duration / 1e9
            );
        }
    }
    Ok(())
}

pub fn regctl(a: RegctlArgs) -> Result<(), Failure> {
    let mut client = RegClient::connect(a.endpoint)
        .map_err(runtime)?
        .with_timeout(Duration::from_millis(a.timeout_ms))
        .with_retries(a.retries);
    let print = |addr: u32, values: &[u32]| {
        for (i, v) in values.iter().enumerate() {
            println!("{:#06x} = {v} ({v:#010x})", addr + 4 * i as u32);
        }
    };
    let fail = |e: ClientError| Failure::Runtime(format!("{}: {e}", a.endpoint));
    match a.op {
        RegOp::Read { addr, count } => {
            let values = client.read(addr, count).map_err(fail)?;
            print(addr, &values);
        }
        RegOp::Write {
            addr,
            values,
            no_verify,
        } => {
            if no_verify {
                let readback = client.write(addr, &values).map_err(fail)?;
                print(addr, &readback);
            } else {
                client.write_verified(addr, &values).map_err(fail)?;
                print(addr, &values);
            }
        }
    }
    Ok(())
}
