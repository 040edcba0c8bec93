//! Bandwidth traces and a deterministic simulated link.

mod link;

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

pub use link::{EventLog, SimLink, Transfer};

/// Sampling period of recorded and synthetic traces, seconds.
pub const SAMPLE_PERIOD: f64 = 0.1;
pub const INDOOR_MEAN_BPS: f64 = 93e6;
pub const OUTDOOR_MEAN_BPS: f64 = 73e6;

/// Piecewise-constant bandwidth over time. Each sample holds until the next;
/// the last one holds forever and the first one also covers earlier times.
#[derive(Clone, Debug, PartialEq)]
pub struct BandwidthTrace {
    pub name: String,
    samples: Vec<(f64, f64)>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TraceKind {
    Constant(f64),
    IndoorLike,
    OutdoorLike,
}

impl BandwidthTrace {
    pub fn new(name: impl Into<String>, samples: Vec<(f64, f64)>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Invalid("trace has no samples".into()));
        }
        for (k, &(t, b)) in samples.iter().enumerate() {
            if !t.is_finite() || !b.is_finite() {
                return Err(Error::Invalid(format!("sample {} is not finite", k)));
            }
            if b < 0.0 {
                return Err(Error::Invalid(format!(
                    "sample {} has negative bandwidth {}",
                    k, b
                )));
            }
            if k > 0 && t <= samples[k - 1].0 {
                return Err(Error::Invalid(format!(
                    "timestamps must increase (sample {} at {})",
                    k, t
                )));
            }
        }
        Ok(BandwidthTrace {
            name: name.into(),
            samples,
        })
    }

    pub fn constant(bps: f64, duration: f64) -> Result<Self> {
        synth_trace(TraceKind::Constant(bps), duration, 0)
    }

    pub fn samples(&self) -> &[(f64, f64)] {
        &self.samples
    }

    /// Time of the last sample.
    pub fn end(&self) -> f64 {
        self.samples.last().unwrap().0
    }

    /// Nominal duration: the last sample covers one period.
    pub fn duration(&self) -> f64 {
        self.end() + SAMPLE_PERIOD
    }

    fn segment(&self, t: f64) -> usize {
        self.samples.partition_point(|s| s.0 <= t).saturating_sub(1)
    }

    pub fn bandwidth_at(&self, t: f64) -> f64 {
        self.samples[self.segment(t)].1
    }

    pub fn mean(&self) -> f64 {
        self.samples.iter().map(|s| s.1).sum::<f64>() / self.samples.len() as f64
    }

    /// Mean and standard deviation of the samples in `[from, to)`.
    pub fn stats(&self, from: f64, to: f64) -> (f64, f64) {
        let v: Vec<f64> = self
            .samples
            .iter()
            .filter(|s| s.0 >= from && s.0 < to)
            .map(|s| s.1)
            .collect();
        let v = if v.is_empty() {
            vec![self.bandwidth_at(from)]
        } else {
            v
        };
        mean_std(&v)
    }

    /// Time at which `bits` have been carried when sending starts at `start`.
    /// Infinite when the trace ends in an outage before the bits get through.
    pub fn finish_time(&self, start: f64, bits: f64) -> f64 {
        if bits <= 0.0 {
            return start;
        }
        let mut k = self.segment(start);
        let mut now = start;
        let mut left = bits;
        loop {
            let bw = self.samples[k].1;
            let seg_end = self.samples.get(k + 1).map_or(f64::INFINITY, |s| s.0);
            if bw > 0.0 {
                let done = now + left / bw;
                if done <= seg_end {
                    return done;
                }
                left -= bw * (seg_end - now);
            }
            if seg_end.is_infinite() {
                return f64::INFINITY;
            }
            now = seg_end;
            k += 1;
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("# trace {}\n# t_seconds bandwidth_bps\n", self.name);
        for (t, b) in &self.samples {
            let _ = writeln!(s, "{} {}", t, b);
        }
        s
    }

    pub fn parse(name: &str, text: &str) -> Result<Self> {
        let mut samples = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut it = line.split_whitespace();
            let (Some(t), Some(b), None) = (it.next(), it.next(), it.next()) else {
                return Err(Error::parse(n + 1, "expected 't_seconds bandwidth_bps'"));
            };
            let t: f64 = t
                .parse()
                .map_err(|_| Error::parse(n + 1, format!("bad time '{}'", t)))?;
            let b: f64 = b
                .parse()
                .map_err(|_| Error::parse(n + 1, format!("bad bandwidth '{}'", b)))?;
            if b < 0.0 {
                return Err(Error::parse(n + 1, format!("negative bandwidth {}", b)));
            }
            if let Some(&(prev, _)) = samples.last() {
                if t <= prev {
                    return Err(Error::parse(
                        n + 1,
                        format!("timestamp {} does not increase", t),
                    ));
                }
            }
            samples.push((t, b));
        }
        BandwidthTrace::new(name, samples)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        BandwidthTrace::parse(&name, &std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}

pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (0.0, 0.0);
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64;
    (m, var.sqrt())
}

const DIP_START_PROB: f64 = 0.01;
const DIP_LEN: (usize, usize) = (2, 8);

/// Synthetic trace sampled every 0.1 s.
///
/// `IndoorLike` is an AR(1) process around 93 Mbps with a 15% stationary
/// spread. `OutdoorLike` is an AR(1) process with a 25% spread plus occasional
/// outages of 0.2 to 0.8 s at 0 to 1 Mbps; its base level is raised so the
/// long-run mean including outages is 73 Mbps.
pub fn synth_trace(kind: TraceKind, duration: f64, seed: u64) -> Result<BandwidthTrace> {
    if !(duration > 0.0) {
        return Err(Error::Invalid(format!(
            "trace duration must be > 0, got {}",
            duration
        )));
    }
    let n = ((duration / SAMPLE_PERIOD).round() as usize).max(1);
    let t = |k: usize| k as f64 / 10.0;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (name, values): (&str, Vec<f64>) = match kind {
        TraceKind::Constant(b) => {
            if !(b >= 0.0) || !b.is_finite() {
                return Err(Error::Invalid(format!(
                    "constant bandwidth must be >= 0, got {}",
                    b
                )));
            }
            ("constant", vec![b; n])
        }
        TraceKind::IndoorLike => ("indoor_like", ar1(&mut rng, n, INDOOR_MEAN_BPS, 0.15, 0.9)),
        TraceKind::OutdoorLike => {
            let mean_len = (DIP_LEN.0 + DIP_LEN.1) as f64 / 2.0;
            let dip_share = DIP_START_PROB * mean_len / (1.0 + DIP_START_PROB * mean_len);
            let base = OUTDOOR_MEAN_BPS / (1.0 - dip_share);
            let mut v = ar1(&mut rng, n, base, 0.25, 0.9);
            let mut k = 0;
            while k < n {
                if rng.gen_bool(DIP_START_PROB) {
                    let len = rng.gen_range(DIP_LEN.0..=DIP_LEN.1);
                    for x in v.iter_mut().skip(k).take(len) {
                        *x = rng.gen_range(0.0..1e6);
                    }
                    k += len;
                } else {
                    k += 1;
                }
            }
            ("outdoor_like", v)
        }
    };
    BandwidthTrace::new(
        name,
        values
            .into_iter()
            .enumerate()
            .map(|(k, b)| (t(k), b))
            .collect(),
    )
}

fn ar1(rng: &mut ChaCha8Rng, n: usize, mean: f64, spread: f64, phi: f64) -> Vec<f64> {
    let sigma = spread * mean;
    let noise = Normal::new(0.0, sigma * (1.0 - phi * phi).sqrt()).expect("finite sigma");
    let start = Normal::new(mean, sigma).expect("finite sigma");
    let mut x = start.sample(rng);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        out.push(x.max(0.0));
        x = mean + phi * (x - mean) + noise.sample(rng);
    }
    out
}

/// Exponentially weighted moving average of the trace samples up to a time.
#[derive(Clone, Debug)]
pub struct EwmaPredictor {
    alpha: f64,
    next: usize,
    value: Option<f64>,
}

impl EwmaPredictor {
    pub const DEFAULT_ALPHA: f64 = 0.3;

    pub fn new(alpha: f64) -> Self {
        EwmaPredictor {
            alpha,
            next: 0,
            value: None,
        }
    }

    /// Prediction at time `t`, folding in every sample with timestamp <= `t`.
    /// Calls must use non-decreasing times.
    pub fn predict(&mut self, trace: &BandwidthTrace, t: f64) -> f64 {
        let s = trace.samples();
        while self.next < s.len() && s[self.next].0 <= t {
            let b = s[self.next].1;
            self.value = Some(match self.value {
                None => b,
                Some(v) => self.alpha * b + (1.0 - self.alpha) * v,
            });
            self.next += 1;
        }
        self.value.unwrap_or(s[0].1)
    }
}
