//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fail.

use std::time::{Duration, Instant};

use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use readout_core::board::{BoardConfig, GeneratorMode};
use readout_core::chain::{run_virtual, Arbitration, ChainTopology, ControlOp, ControlStep, RunOutput};
use readout_core::framing::{decode_stream, encode_frame, Frame, StreamDecoder, FRAMING_OVERHEAD};
use readout_core::measure::{linearity_sweep, summarize, write_samples_csv, DEFAULT_HISTOGRAM_BINS};
use readout_core::regproto::{
    decode_packet, encode_packet, handle_datagram, LossyRelay, RegClient, RegPacket, RegServer,
    RegisterFile, DATA_RATE_CTRL, FRAME_SIZE, OVERFLOW_COUNT, TRIGGER_CTRL,
};
use readout_core::transport::{send_paced, GapPlacement, GeneratorSpec, LinkModel, SinkServer};

struct Line {
    id: &'static str,
    pass: bool,
    detail: String,
}

fn line(id: &'static str, pass: bool, detail: impl Into<String>) -> Line {
    Line {
        id,
        pass,
        detail: detail.into(),
    }
}

fn within(x: f64, target: f64, rel: f64) -> bool {
    ((x - target) / target).abs() <= rel
}

fn gbps(x: f64) -> String {
    format!("{:.4} Gbps", x / 1e9)
}

const GIG: u64 = 1_000_000_000;

// ---- 1: four boards at 1 kHz into a 5 Gbps link ----

fn chain_4_8() -> Vec<Line> {
    let boards = (1..=4)
        .map(|id| {
            let mut b = BoardConfig::new(id);
            b.frame_payload_bytes = 150_000 - FRAMING_OVERHEAD as u32;
            b
        })
        .collect();
    let mut topo = ChainTopology::new(boards, LinkModel::gapless(5 * GIG));
    topo.duration_ms = 10_000.0;
    let t0 = Instant::now();
    let out = run_virtual(topo);
    let wall = t0.elapsed();
    let mean = out.report.as_ref().map_or(0.0, |r| r.mean_bps);
    let frame = 150_000;
    let peak = out.boards.iter().map(|b| b.fifo_high_water_bytes).max().unwrap_or(0);
    let overflow: u64 = out.boards.iter().map(|b| b.overflows).sum();
    vec![
        line(
            "1a chain mean 4.8 Gbps +-0.5%",
            within(mean, 4.8e9, 0.005),
            format!("mean {} over {} windows", gbps(mean), out.samples.len()),
        ),
        line(
            "1b cache below two frames, no overflow",
            peak < 2 * frame && overflow == 0 && out.audit_ok(),
            format!("peak {peak} B, overflows {overflow}, frames {}", out.audit.frames()),
        ),
        line("1c 10 s virtual run under 30 s", wall < Duration::from_secs(30), format!("{wall:.2?}")),
    ]
}

// ---- 2: 10 Gbps generator through a 1527/2500 duty link ----

fn gapped_link() -> Vec<Line> {
    let mut b = BoardConfig::new(1);
    b.generator = GeneratorMode::Traffic;
    b.traffic = Some(GeneratorSpec::new(156.25e6, 64, 1.0));
    b.frame_payload_bytes = 8192;
    let link = LinkModel::gapless(10 * GIG).with_gap(1527, 973, GapPlacement::Spread);
    let mut topo = ChainTopology::new(vec![b], link);
    topo.duration_ms = 10_000.0;
    let t0 = Instant::now();
    let out = run_virtual(topo);
    let wall = t0.elapsed();
    let Some(r) = out.report.as_ref() else {
        return vec![line("2 gapped link", false, "no report")];
    };
    vec![
        line(
            "2a mean 6.108 Gbps +-0.5% over >=1e5 windows",
            within(r.mean_bps, 6.108e9, 0.005) && r.windows >= 100_000,
            format!("mean {} over {} windows", gbps(r.mean_bps), r.windows),
        ),
        line(
            "2b window stddev below 2% of mean",
            r.relative_stddev() < 0.02,
            format!("stddev/mean {:.5}", r.relative_stddev()),
        ),
        line(
            "2c run under 60 s, stream clean",
            wall < Duration::from_secs(60) && out.audit_ok(),
            format!("{wall:.2?}, {} frames", out.audit.frames()),
        ),
    ]
}

// ---- 3: linearity ----

fn rate_board(id: u16, rate_bps: f64, payload: u32) -> BoardConfig {
    let mut b = BoardConfig::new(id);
    b.generator = GeneratorMode::Rate;
    b.rate_kbps = (rate_bps / 1000.0) as u32;
    b.frame_payload_bytes = payload;
    b
}

fn linearity() -> Vec<Line> {
    let offered: Vec<f64> = (1..=9).map(|g| g as f64 * 1e9).collect();
    let pts = linearity_sweep::<()>(&offered, |o| {
        let mut topo = ChainTopology::new(vec![rate_board(1, o, 8192)], LinkModel::gapless(10 * GIG));
        topo.duration_ms = 200.0;
        Ok(run_virtual(topo).report.map_or(0.0, |r| r.mean_bps))
    })
    .unwrap();
    let ratios_ok = pts.iter().all(|p| (0.995..=1.005).contains(&p.ratio));
    let monotone = pts.windows(2).all(|w| w[1].measured_bps > w[0].measured_bps);
    let worst = pts
        .iter()
        .map(|p| (p.ratio - 1.0).abs())
        .fold(0.0, f64::max);

    let real_rates = [10e6, 50e6, 100e6];
    let real = linearity_sweep(&real_rates, |o| -> std::io::Result<f64> {
        let server = SinkServer::spawn("127.0.0.1:0", 0, 100)?;
        let payload = readout_core::payload::traffic_payload(4096);
        send_paced(server.local_addr(), o, Duration::from_secs(1), |i| {
            Frame::new(1, i as u32, 0, payload.clone()).unwrap()
        })?;
        let sink = server
            .finish(Duration::from_secs(2))
            .map_err(|e| std::io::Error::other(e.to_string()))?;
        let (_, sampler) = sink.finish();
        let samples = sampler.samples(None);
        Ok(summarize(&samples, 100, o, DEFAULT_HISTOGRAM_BINS).map_or(0.0, |r| r.mean_bps))
    });
    let (real_ok, real_detail) = match real {
        Ok(pts) => (
            pts.iter().all(|p| (p.ratio - 1.0).abs() <= 0.05),
            pts.iter()
                .map(|p| format!("{:.0}M:{:.4}", p.offered_bps / 1e6, p.ratio))
                .collect::<Vec<_>>()
                .join(" "),
        ),
        Err(e) => (false, e.to_string()),
    };
    vec![
        line(
            "3a virtual 1-9 Gbps ratio within 0.5%, monotone",
            ratios_ok && monotone,
            format!("worst |ratio-1| {worst:.5}"),
        ),
        line("3b loopback 10/50/100 Mbps within 5%", real_ok, real_detail),
    ]
}

// ---- 4: slow control ----

fn slow_control() -> Vec<Line> {
    let mut out = Vec::new();
    let server = RegServer::spawn("127.0.0.1:0", RegisterFile::for_board(1, 1024)).unwrap();
    let mut client = RegClient::connect(server.local_addr()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut mismatches = 0;
    let mut errors = 0;
    for _ in 0..1000 {
        let (addr, v) = match rng.random_range(0..3) {
            0 => (DATA_RATE_CTRL, rng.random::<u32>()),
            1 => (FRAME_SIZE, rng.random_range(1..=4096u32) * 8),
            _ => (TRIGGER_CTRL, rng.random_range(0..2)),
        };
        match client.write_verified(addr, &[v]) {
            Ok(()) => {}
            Err(readout_core::regproto::ClientError::VerifyMismatch { .. }) => mismatches += 1,
            Err(_) => errors += 1,
        }
    }
    out.push(line(
        "4a 1000 verified writes over UDP",
        mismatches == 0 && errors == 0,
        format!("mismatches {mismatches}, errors {errors}"),
    ));

    let lossy = [
        ("4b 50% request loss, 8 retries: >=99% success", 0.5, 0.0),
        ("4c 50% reply loss, 8 retries: >=99% success", 0.0, 0.5),
    ];
    for (id, req_loss, rep_loss) in lossy {
        let relay = LossyRelay::spawn(server.local_addr(), req_loss, rep_loss, 99).unwrap();
        let mut c = RegClient::connect(relay.local_addr())
            .unwrap()
            .with_timeout(Duration::from_millis(5))
            .with_retries(8);
        let ops = 500;
        let ok = (0..ops)
            .filter(|i| c.write_verified(DATA_RATE_CTRL, &[*i]).is_ok())
            .count();
        let rate = ok as f64 / ops as f64;
        out.push(line(
            id,
            rate >= 0.99,
            format!("{ok}/{ops}, dropped {:?}", relay.dropped()),
        ));
    }

    let mut regs = RegisterFile::for_board(1, 1024);
    let req = encode_packet(&RegPacket::write_request(7, DATA_RATE_CTRL, vec![5, 2048])).unwrap();
    let r1 = handle_datagram(&req, &mut regs).unwrap();
    let s1 = regs.snapshot();
    let r2 = handle_datagram(&req, &mut regs).unwrap();
    let same = r1 == r2 && s1 == regs.snapshot() && decode_packet(&r1).unwrap().data == [5, 2048];
    out.push(line("4d replayed write is idempotent", same, ""));
    out
}

// ---- 5: per-origin fairness and loss accounting ----

fn fairness() -> Vec<Line> {
    let boards = (1..=4)
        .map(|id| {
            let mut b = BoardConfig::new(id);
            b.generator = GeneratorMode::Traffic;
            b.traffic = Some(GeneratorSpec::new(156.25e6, 64, 1.0));
            b
        })
        .collect();
    let mut topo = ChainTopology::new(boards, LinkModel::gapless(10 * GIG));
    topo.arbitration = Arbitration::PerOrigin;
    topo.duration_ms = 200.0;
    let out = run_virtual(topo);
    let total = out.audit.frames();
    let shares: Vec<f64> = out
        .audit
        .boards
        .values()
        .map(|b| b.frames as f64 / total as f64)
        .collect();
    let fair = shares.iter().all(|s| (s - 0.25).abs() <= 0.01);
    let generated: u64 = out.boards.iter().map(|b| b.generated).sum();

    let lossy_boards = (1..=3)
        .map(|id| {
            let mut b = rate_board(id, 5e9, 1024);
            b.fifo_capacity_bytes = Some(256 << 10);
            b
        })
        .collect();
    let mut lossy = ChainTopology::new(lossy_boards, LinkModel::gapless(10 * GIG));
    lossy.duration_ms = 50.0;
    let lossy = run_virtual(lossy);
    let per_board: Vec<(u64, u64)> = lossy
        .boards
        .iter()
        .map(|b| {
            let reg = lossy
                .registers
                .iter()
                .find(|(id, _)| *id == b.board_id)
                .map_or(0, |(_, r)| r[&OVERFLOW_COUNT]) as u64;
            (lossy.audit.boards[&b.board_id].gaps, reg)
        })
        .collect();
    let dropped: u64 = per_board.iter().map(|p| p.1).sum();
    vec![
        line(
            "5a saturated chain: every board 25% +-1%",
            fair && total >= 100_000,
            format!("{total} frames, shares {:.4?}", shares),
        ),
        line(
            "5b gap-free, received equals generated",
            out.audit_ok() && out.audit.gaps() == 0 && total == generated,
            format!("gaps {}, generated {generated}", out.audit.gaps()),
        ),
        line(
            "5c lossy run: gaps equal OVERFLOW_COUNT per board",
            dropped > 0 && per_board.iter().all(|(g, r)| g == r) && lossy.audit.is_clean(),
            format!("(gaps, overflow) {per_board:?}"),
        ),
    ]
}

// ---- 6: overflow onset and rate ----

fn overflow_law() -> Vec<Line> {
    let lambda = 2e9;
    let mu = 1e9;
    let cap: u64 = 1 << 20;
    let payload = 1024u32;
    let s = (payload as usize + FRAMING_OVERHEAD) as f64;
    let mut b = rate_board(1, lambda, payload);
    b.fifo_capacity_bytes = Some(cap);
    let mut topo = ChainTopology::new(vec![b], LinkModel::gapless(mu as u64));
    topo.duration_ms = 100.0;
    let duration_ns = topo.duration_ns() as f64;
    let out = run_virtual(topo);
    let st = &out.boards[0];
    let predicted = cap as f64 * 8.0 / (lambda - mu) * 1e9;
    let frame_time = s * 8.0 / lambda * 1e9;
    let first = st.first_overflow_ns.unwrap_or(u64::MAX) as f64;
    let rate = (st.overflows - 1) as f64 / ((duration_ns - first) * 1e-9);
    let want = (lambda - mu) / (s * 8.0);
    vec![
        line(
            "6a first overflow at C*8/(lambda-mu) within one frame time",
            (first - predicted).abs() <= frame_time,
            format!("first {first:.0} ns, predicted {predicted:.0} ns, frame time {frame_time:.0} ns"),
        ),
        line(
            "6b overflow rate (lambda-mu)/(8S) +-1%",
            within(rate, want, 0.01),
            format!("{rate:.1}/s vs {want:.1}/s"),
        ),
    ]
}

// ---- 7: codec properties ----

fn frame_strategy() -> impl Strategy<Value = Frame> {
    (any::<u16>(), any::<u32>(), any::<u32>(), prop::collection::vec(any::<u8>(), 1..=32))
        .prop_map(|(b, f, t, words)| {
            let payload: Vec<u8> = words.iter().flat_map(|&w| [w; 8]).enumerate().map(|(i, x)| x ^ i as u8).collect();
            Frame::new(b, f, t, payload).unwrap()
        })
}

fn decode_words_all(events: &[readout_core::framing::WordEvent]) -> (Vec<Frame>, usize) {
    let (results, dec) = decode_stream(events);
    let mut errors = dec.finish().is_some() as usize;
    let mut frames = Vec::new();
    for r in results {
        match r {
            Ok(f) => frames.push(f),
            Err(_) => errors += 1,
        }
    }
    (frames, errors)
}

fn decode_bytes_all(bytes: &[u8], cuts: &[usize]) -> (Vec<Frame>, usize) {
    let mut dec = StreamDecoder::new();
    let mut results = Vec::new();
    let mut at = 0;
    for &c in cuts.iter().chain(std::iter::once(&bytes.len())) {
        let c = c.clamp(at, bytes.len());
        dec.feed_into(&bytes[at..c], &mut results);
        at = c;
    }
    let mut errors = dec.finish().is_some() as usize;
    let mut frames = Vec::new();
    for r in results {
        match r {
            Ok(f) => frames.push(f),
            Err(_) => errors += 1,
        }
    }
    (frames, errors)
}

fn codec_properties() -> Vec<Line> {
    let mut runner = TestRunner::new(Config {
        cases: 10_000,
        failure_persistence: None,
        ..Config::default()
    });
    let strategy = (
        prop::collection::vec(frame_strategy(), 1..4),
        prop::collection::vec(0usize..2000, 0..8),
        any::<u64>(),
    );
    let result = runner.run(&strategy, |(frames, mut cuts, salt)| {
        let events: Vec<_> = frames.iter().flat_map(encode_frame).collect();
        let (got, errs) = decode_words_all(&events);
        prop_assert_eq!(errs, 0);
        prop_assert_eq!(&got, &frames);

        let bytes: Vec<u8> = frames.iter().flat_map(|f| f.to_bytes()).collect();
        cuts.sort_unstable();
        let (got, errs) = decode_bytes_all(&bytes, &cuts);
        prop_assert_eq!(errs, 0);
        prop_assert_eq!(&got, &frames);

        // one random single-bit flip per decoder
        let target = &frames[0];
        let bit = (salt % (target.serialized_len() as u64 * 8)) as usize;
        let mut b = target.to_bytes();
        b[bit / 8] ^= 0x80 >> (bit % 8);
        let (got, errs) = decode_bytes_all(&b, &[]);
        if errs == 0 || got.contains(target) {
            return Err(TestCaseError::fail(format!("byte flip {bit} undetected")));
        }
        let mut ev = encode_frame(target);
        ev[bit / 64].data ^= 1 << (bit % 64);
        let (got, errs) = decode_words_all(&ev);
        if errs == 0 || got.contains(target) {
            return Err(TestCaseError::fail(format!("word flip {bit} undetected")));
        }
        Ok(())
    });

    // every bit of a set of frames, both decoders, plus sop/eop/valid flags
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut flips = 0u64;
    let mut missed = 0u64;
    for _ in 0..100 {
        let words = rng.random_range(1..=16usize);
        let mut payload = vec![0u8; words * 8];
        rng.fill(&mut payload[..]);
        let f = Frame::new(rng.random(), rng.random(), rng.random(), payload).unwrap();
        let bytes = f.to_bytes();
        let events = encode_frame(&f);
        for bit in 0..bytes.len() * 8 {
            let mut b = bytes.clone();
            b[bit / 8] ^= 0x80 >> (bit % 8);
            let (got, errs) = decode_bytes_all(&b, &[]);
            let mut ev = events.clone();
            ev[bit / 64].data ^= 1 << (bit % 64);
            let (got_w, errs_w) = decode_words_all(&ev);
            flips += 2;
            missed += (errs == 0 || got.contains(&f)) as u64;
            missed += (errs_w == 0 || got_w.contains(&f)) as u64;
        }
        for i in 0..events.len() {
            for flag in 0..3 {
                let mut ev = events.clone();
                match flag {
                    0 => ev[i].sop ^= true,
                    1 => ev[i].eop ^= true,
                    _ => ev[i].valid ^= true,
                }
                let (got, errs) = decode_words_all(&ev);
                flips += 1;
                missed += (errs == 0 || got.contains(&f)) as u64;
            }
        }
    }
    vec![
        line(
            "7a 1e4 random cases: round trip, chunking, bit flips",
            result.is_ok(),
            match &result {
                Ok(()) => "10000 cases".to_string(),
                Err(e) => e.to_string(),
            },
        ),
        line(
            "7b exhaustive single-bit corruption detected",
            missed == 0,
            format!("{missed} of {flips} corruptions missed"),
        ),
    ]
}

// ---- 8: determinism ----

fn mixed_topology() -> ChainTopology {
    let mut a = BoardConfig::new(10);
    a.frame_rate_hz = 5000;
    a.frame_payload_bytes = 4096;
    let mut b = rate_board(11, 3e9, 2048);
    b.fifo_capacity_bytes = Some(64 << 10);
    let mut c = BoardConfig::new(12);
    c.generator = GeneratorMode::Traffic;
    c.traffic = Some(GeneratorSpec::new(125e6, 64, 0.5));
    let link = LinkModel::gapless(8 * GIG).with_gap(100, 20, GapPlacement::Burst);
    let mut topo = ChainTopology::new(vec![a, b, c], link);
    topo.seed = 1234;
    topo.duration_ms = 50.0;
    topo.control = vec![
        ControlStep {
            at_us: 20_000,
            board_id: 11,
            op: ControlOp::Write,
            addr: DATA_RATE_CTRL,
            values: vec![6_000_000],
            count: 1,
        },
        ControlStep {
            at_us: 30_000,
            board_id: 10,
            op: ControlOp::Write,
            addr: FRAME_SIZE,
            values: vec![1024],
            count: 1,
        },
    ];
    topo
}

fn csv_bytes(out: &RunOutput) -> Vec<u8> {
    let mut buf = Vec::new();
    write_samples_csv(&out.samples, &mut buf).unwrap();
    buf
}

fn determinism() -> Vec<Line> {
    let a = run_virtual(mixed_topology());
    let b = run_virtual(mixed_topology());
    let same_csv = csv_bytes(&a) == csv_bytes(&b);
    let same_audit = serde_json::to_string(&a.audit).unwrap() == serde_json::to_string(&b.audit).unwrap();
    vec![line(
        "8 identical virtual runs produce identical output",
        same_csv && same_audit && !a.samples.is_empty(),
        format!("{} windows, {} frames", a.samples.len(), a.audit.frames()),
    )]
}

fn main() {
    let groups: [(&str, fn() -> Vec<Line>); 8] = [
        ("chain", chain_4_8),
        ("gapped link", gapped_link),
        ("linearity", linearity),
        ("slow control", slow_control),
        ("fairness", fairness),
        ("overflow", overflow_law),
        ("codec", codec_properties),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (name, run) in groups {
        let t0 = Instant::now();
        let lines = match std::panic::catch_unwind(run) {
            Ok(l) => l,
            Err(_) => vec![line("panic", false, format!("{name} panicked"))],
        };
        for l in lines {
            println!(
                "{} {:<55} {}",
                if l.pass { "PASS" } else { "FAIL" },
                l.id,
                l.detail
            );
            failed += !l.pass as usize;
        }
        eprintln!("  ({name}: {:.2?})", t0.elapsed());
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
    println!("all criteria passed");
}
