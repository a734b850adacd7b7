//! Fixed-window throughput sampling and reporting.

use std::io::{self, Write};
use std::path::Path;

use serde::Serialize;
use thiserror::Error;

pub const DEFAULT_WINDOW_US: u64 = 100;
pub const DEFAULT_HISTOGRAM_BINS: usize = 64;

/// Bytes observed at the sink at one instant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Arrival {
    pub time_ns: u64,
    pub bytes: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ThroughputSample {
    pub window_index: u64,
    pub t_start_us: u64,
    pub bytes: u64,
    pub rate_bps: f64,
}

#[derive(Debug, Error)]
pub enum MeasureError {
    #[error("arrival at {time_ns} ns precedes the previous one at {previous_ns} ns")]
    NonMonotonicTime { time_ns: u64, previous_ns: u64 },
    #[error("window width must be positive")]
    ZeroWindow,
    #[error("no complete windows to summarize")]
    Empty,
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Incremental window accumulator. Arrivals must come in time order.
#[derive(Debug, Clone)]
pub struct Sampler {
    window_ns: u64,
    counts: Vec<u64>,
    last_ns: Option<u64>,
    total: u64,
}

impl Sampler {
    pub fn new(window_us: u64) -> Result<Self, MeasureError> {
        if window_us == 0 {
            return Err(MeasureError::ZeroWindow);
        }
        Ok(Self {
            window_ns: window_us * 1000,
            counts: Vec::new(),
            last_ns: None,
            total: 0,
        })
    }

    pub fn window_us(&self) -> u64 {
        self.window_ns / 1000
    }

    pub fn total_bytes(&self) -> u64 {
        self.total
    }

    pub fn last_time_ns(&self) -> Option<u64> {
        self.last_ns
    }

    pub fn record(&mut self, a: Arrival) -> Result<(), MeasureError> {
        if let Some(prev) = self.last_ns {
            if a.time_ns < prev {
                return Err(MeasureError::NonMonotonicTime {
                    time_ns: a.time_ns,
                    previous_ns: prev,
                });
            }
        }
        self.last_ns = Some(a.time_ns);
        let w = (a.time_ns / self.window_ns) as usize;
        if self.counts.len() <= w {
            self.counts.resize(w + 1, 0);
        }
        self.counts[w] += a.bytes;
        self.total += a.bytes;
        Ok(())
    }

    /// Windows `[0, end_ns / W)`. With `None`, every window up to and
    /// including the one holding the last arrival.
    pub fn samples(&self, end_ns: Option<u64>) -> Vec<ThroughputSample> {
        let n = match end_ns {
            Some(end) => (end / self.window_ns) as usize,
            None => self.counts.len(),
        };
        let secs = self.window_ns as f64 * 1e-9;
        (0..n)
            .map(|w| {
                let bytes = self.counts.get(w).copied().unwrap_or(0);
                ThroughputSample {
                    window_index: w as u64,
                    t_start_us: w as u64 * self.window_ns / 1000,
                    bytes,
                    rate_bps: bytes as f64 * 8.0 / secs,
                }
            })
            .collect()
    }
}

pub fn sample_stream(
    arrivals: impl IntoIterator<Item = Arrival>,
    window_us: u64,
) -> Result<Vec<ThroughputSample>, MeasureError> {
    let mut s = Sampler::new(window_us)?;
    for a in arrivals {
        s.record(a)?;
    }
    Ok(s.samples(None))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Histogram {
    pub lo_bps: f64,
    pub hi_bps: f64,
    pub counts: Vec<u64>,
}

impl Histogram {
    /// Values outside `[lo, hi]` land in the edge bins.
    pub fn build(values: impl IntoIterator<Item = f64>, lo: f64, hi: f64, bins: usize) -> Self {
        let bins = bins.max(1);
        let mut counts = vec![0u64; bins];
        let width = (hi - lo) / bins as f64;
        for v in values {
            let b = if width > 0.0 { ((v - lo) / width).floor() } else { 0.0 };
            counts[(b.max(0.0) as usize).min(bins - 1)] += 1;
        }
        Self {
            lo_bps: lo,
            hi_bps: hi,
            counts,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ThroughputReport {
    pub window_us: u64,
    pub windows: u64,
    pub total_bytes: u64,
    pub mean_bps: f64,
    /// Population standard deviation over windows.
    pub stddev_bps: f64,
    pub min_bps: f64,
    pub max_bps: f64,
    pub histogram: Histogram,
}

impl ThroughputReport {
    pub fn relative_stddev(&self) -> f64 {
        self.stddev_bps / self.mean_bps
    }

    pub fn write_text(&self, mut w: impl Write) -> io::Result<()> {
        let g = |v: f64| v / 1e9;
        writeln!(w, "windows      {} x {} us", self.windows, self.window_us)?;
        writeln!(w, "total bytes  {}", self.total_bytes)?;
        writeln!(w, "mean         {:.6} Gbps", g(self.mean_bps))?;
        writeln!(w, "stddev       {:.6} Gbps", g(self.stddev_bps))?;
        writeln!(w, "min          {:.6} Gbps", g(self.min_bps))?;
        writeln!(w, "max          {:.6} Gbps", g(self.max_bps))?;
        let step = (self.histogram.hi_bps - self.histogram.lo_bps) / self.histogram.counts.len() as f64;
        let peak = self.histogram.counts.iter().copied().max().unwrap_or(0).max(1);
        writeln!(w, "histogram (Gbps)")?;
        for (i, &c) in self.histogram.counts.iter().enumerate() {
            if c == 0 {
                continue;
            }
            let lo = self.histogram.lo_bps + i as f64 * step;
            let bar = "#".repeat(((c * 50).div_ceil(peak)) as usize);
            writeln!(w, "  {:>8.4} {:>9} {}", g(lo), c, bar)?;
        }
        Ok(())
    }
}

/// `hist_max_bps` is normally the link rate.
pub fn summarize(
    samples: &[ThroughputSample],
    window_us: u64,
    hist_max_bps: f64,
    bins: usize,
) -> Result<ThroughputReport, MeasureError> {
    if samples.is_empty() {
        return Err(MeasureError::Empty);
    }
    if window_us == 0 {
        return Err(MeasureError::ZeroWindow);
    }
    let n = samples.len() as f64;
    let total: u64 = samples.iter().map(|s| s.bytes).sum();
    let mean = total as f64 * 8.0 / (n * window_us as f64 * 1e-6);
    let var = samples.iter().map(|s| (s.rate_bps - mean).powi(2)).sum::<f64>() / n;
    let min = samples.iter().map(|s| s.rate_bps).fold(f64::INFINITY, f64::min);
    let max = samples.iter().map(|s| s.rate_bps).fold(f64::NEG_INFINITY, f64::max);
    Ok(ThroughputReport {
        window_us,
        windows: samples.len() as u64,
        total_bytes: total,
        mean_bps: mean,
        stddev_bps: var.sqrt(),
        min_bps: min,
        max_bps: max,
        histogram: Histogram::build(samples.iter().map(|s| s.rate_bps), 0.0, hist_max_bps, bins),
    })
}

pub fn write_samples_csv(samples: &[ThroughputSample], w: impl Write) -> Result<(), MeasureError> {
    let mut out = csv::Writer::from_writer(w);
    for s in samples {
        out.serialize(s)?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_json(w: impl Write, value: &impl Serialize) -> Result<(), MeasureError> {
    let mut w = io::BufWriter::new(w);
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

/// Writes `throughput.csv`, `report.txt` and `report.json` into `dir`.
pub fn write_outputs(
    dir: &Path,
    samples: &[ThroughputSample],
    report: &ThroughputReport,
) -> Result<(), MeasureError> {
    std::fs::create_dir_all(dir)?;
    write_samples_csv(samples, io::BufWriter::new(std::fs::File::create(dir.join("throughput.csv"))?))?;
    report.write_text(std::fs::File::create(dir.join("report.txt"))?)?;
    write_json(std::fs::File::create(dir.join("report.json"))?, report)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepPoint {
    pub offered_bps: f64,
    pub measured_bps: f64,
    pub ratio: f64,
}

/// Runs `measure` at each offered rate and records the measured mean.
pub fn linearity_sweep<E>(
    offered: &[f64],
    mut measure: impl FnMut(f64) -> Result<f64, E>,
) -> Result<Vec<SweepPoint>, E> {
    offered
        .iter()
        .map(|&o| {
            let m = measure(o)?;
            Ok(SweepPoint {
                offered_bps: o,
                measured_bps: m,
                ratio: m / o,
            })
        })
        .collect()
}

pub fn write_sweep_csv(points: &[SweepPoint], w: impl Write) -> Result<(), MeasureError> {
    let mut out = csv::Writer::from_writer(w);
    for p in points {
        out.serialize(p)?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn a(time_ns: u64, bytes: u64) -> Arrival {
        Arrival { time_ns, bytes }
    }

    #[test]
    fn windows_bin_by_floor() {
        let s = sample_stream([a(0, 10), a(99_999, 5), a(100_000, 7), a(350_000, 1)], 100).unwrap();
        let bytes: Vec<_> = s.iter().map(|s| s.bytes).collect();
        assert_eq!(bytes, [15, 7, 0, 1]);
        assert_eq!(s[3].t_start_us, 300);
        assert_eq!(s[1].rate_bps, 7.0 * 8.0 / 100e-6);
    }

    #[test]
    fn non_monotonic_rejected() {
        let e = sample_stream([a(10, 1), a(9, 1)], 100).unwrap_err();
        assert!(matches!(e, MeasureError::NonMonotonicTime { time_ns: 9, previous_ns: 10 }));
        // equal times are fine
        assert!(sample_stream([a(10, 1), a(10, 1)], 100).is_ok());
    }

    #[test]
    fn explicit_end_pads_and_truncates() {
        let mut s = Sampler::new(100).unwrap();
        s.record(a(50_000, 8)).unwrap();
        assert_eq!(s.samples(Some(500_000)).len(), 5);
        assert_eq!(s.samples(Some(50_000)).len(), 0);
    }

    #[test]
    fn summary_statistics_match_direct_computation() {
        let rates = [1.0e9, 3.0e9, 2.0e9, 2.0e9];
        let samples: Vec<_> = rates
            .iter()
            .enumerate()
            .map(|(i, &r)| ThroughputSample {
                window_index: i as u64,
                t_start_us: i as u64 * 100,
                bytes: (r * 100e-6 / 8.0) as u64,
                rate_bps: r,
            })
            .collect();
        let r = summarize(&samples, 100, 4e9, 4).unwrap();
        assert!((r.mean_bps - 2e9).abs() < 1.0);
        assert!((r.stddev_bps - 0.5f64.sqrt() * 1e9).abs() < 1.0);
        assert_eq!(r.min_bps, 1e9);
        assert_eq!(r.max_bps, 3e9);
        assert_eq!(r.histogram.counts, [0, 1, 2, 1]);
        assert!(matches!(summarize(&[], 100, 1.0, 4), Err(MeasureError::Empty)));
    }

    #[test]
    fn histogram_clamps() {
        let h = Histogram::build([-1.0, 0.0, 9.99, 10.0, 50.0], 0.0, 10.0, 10);
        assert_eq!(h.counts[0], 2);
        assert_eq!(h.counts[9], 3);
    }

    #[test]
    fn csv_layout() {
        let s = sample_stream([a(0, 1250)], 100).unwrap();
        let mut buf = Vec::new();
        write_samples_csv(&s, &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "window_index,t_start_us,bytes,rate_bps\n0,0,1250,100000000.0\n"
        );
    }

    #[test]
    fn sweep_ratios() {
        let pts = linearity_sweep::<()>(&[1.0, 2.0], |o| Ok(o * 0.5)).unwrap();
        assert_eq!(pts[1].ratio, 0.5);
        let mut buf = Vec::new();
        write_sweep_csv(&pts, &mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("offered_bps,measured_bps,ratio\n"));
    }
}
