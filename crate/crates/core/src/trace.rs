//! Request traces: canonical JSONL ingestion, power-law workload synthesis and
//! per-window load statistics.
//!
//! The canonical trace is JSON Lines, one request per line:
//!
//! ```text
//! {"ts_ms": 0, "model": "llama2-7b-0", "input_tokens": 128, "output_tokens": 64}
//! ```
//!
//! `ts`, `in` and `out` are accepted as short aliases. An optional `id` field is
//! honoured; otherwise ids are assigned in file order.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, LogNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::substream;
use crate::Millis;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("failed to read trace: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("workload synthesis needs at least one model")]
    NoModels,
    #[error("invalid synthesis parameter: {0}")]
    InvalidParam(String),
}

/// One inference request.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Request {
    pub id: u64,
    pub model_id: String,
    /// Arrival time in milliseconds since the start of the trace.
    pub arrival: Millis,
    pub input_tokens: u32,
    pub output_tokens: u32,
}

/// Supported on-disk trace formats.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceFormat {
    Jsonl,
}

#[derive(Debug, Deserialize)]
struct TraceRecord {
    #[serde(default)]
    id: Option<u64>,
    #[serde(alias = "ts")]
    ts_ms: Option<u64>,
    model: Option<String>,
    #[serde(alias = "in")]
    input_tokens: Option<u32>,
    #[serde(alias = "out")]
    output_tokens: Option<u32>,
}

#[derive(Serialize)]
struct TraceRecordOut<'a> {
    id: u64,
    ts_ms: u64,
    model: &'a str,
    input_tokens: u32,
    output_tokens: u32,
}

/// Parses a trace and returns its requests sorted by arrival.
///
/// Out-of-order timestamps are tolerated: they are logged as a warning and the
/// result is stably sorted.
pub fn load_trace(path: &Path, format: TraceFormat) -> Result<Vec<Request>, TraceError> {
    match format {
        TraceFormat::Jsonl => {
            let file = File::open(path)?;
            parse_jsonl(BufReader::new(file))
        }
    }
}

pub fn parse_jsonl<R: BufRead>(reader: R) -> Result<Vec<Request>, TraceError> {
    let mut out = Vec::new();
    let mut last_arrival = 0;
    let mut out_of_order = 0usize;
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let rec: TraceRecord = serde_json::from_str(trimmed).map_err(|e| TraceError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let missing = |field: &str| TraceError::Parse {
            line: line_no,
            message: format!("missing field `{field}`"),
        };
        let arrival = rec.ts_ms.ok_or_else(|| missing("ts_ms"))?;
        let model_id = rec.model.ok_or_else(|| missing("model"))?;
        let input_tokens = rec.input_tokens.ok_or_else(|| missing("input_tokens"))?;
        let output_tokens = rec.output_tokens.ok_or_else(|| missing("output_tokens"))?;
        if input_tokens == 0 || output_tokens == 0 {
            return Err(TraceError::Parse {
                line: line_no,
                message: "token counts must be at least 1".into(),
            });
        }
        if arrival < last_arrival {
            out_of_order += 1;
        }
        last_arrival = arrival;
        out.push(Request {
            id: rec.id.unwrap_or(out.len() as u64),
            model_id,
            arrival,
            input_tokens,
            output_tokens,
        });
    }
    if out_of_order > 0 {
        log::warn!("trace has {out_of_order} non-monotonic timestamps; sorting by arrival");
        out.sort_by_key(|r| r.arrival);
    }
    Ok(out)
}

pub fn write_trace(path: &Path, requests: &[Request]) -> Result<(), TraceError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_jsonl(&mut w, requests)?;
    w.flush()?;
    Ok(())
}

pub fn write_jsonl<W: Write>(w: &mut W, requests: &[Request]) -> std::io::Result<()> {
    for r in requests {
        let rec = TraceRecordOut {
            id: r.id,
            ts_ms: r.arrival,
            model: &r.model_id,
            input_tokens: r.input_tokens,
            output_tokens: r.output_tokens,
        };
        serde_json::to_writer(&mut *w, &rec)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// SHA-256 of the canonical JSONL serialization, hex encoded.
pub fn trace_hash(requests: &[Request]) -> String {
    use sha2::{Digest, Sha256};
    let mut buf = Vec::new();
    write_jsonl(&mut buf, requests).expect("writing to a Vec cannot fail");
    hex::encode(Sha256::digest(&buf))
}

/// Converts a CSV export of the public Azure LLM inference traces
/// (`TIMESTAMP,ContextTokens,GeneratedTokens`) into canonical requests for a
/// single model. Timestamps are rebased so the first request arrives at 0.
pub fn import_azure_csv(path: &Path, model_id: &str) -> Result<Vec<Request>, TraceError> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| TraceError::Parse {
        line: 0,
        message: e.to_string(),
    })?;
    let headers = rdr
        .headers()
        .map_err(|e| TraceError::Parse {
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim().eq_ignore_ascii_case(name))
            .ok_or_else(|| TraceError::Parse {
                line: 1,
                message: format!("missing column `{name}`"),
            })
    };
    let (ts_col, in_col, out_col) = (
        col("TIMESTAMP")?,
        col("ContextTokens")?,
        col("GeneratedTokens")?,
    );
    let mut rows = Vec::new();
    for (idx, rec) in rdr.records().enumerate() {
        let line = idx + 2;
        let rec = rec.map_err(|e| TraceError::Parse {
            line,
            message: e.to_string(),
        })?;
        let field = |c: usize| rec.get(c).unwrap_or("").trim();
        let ts = parse_azure_timestamp(field(ts_col)).ok_or_else(|| TraceError::Parse {
            line,
            message: "bad TIMESTAMP".into(),
        })?;
        let parse_u32 = |c: usize, name: &str| {
            field(c).parse::<u32>().map_err(|_| TraceError::Parse {
                line,
                message: format!("bad {name}"),
            })
        };
        let input = parse_u32(in_col, "ContextTokens")?.max(1);
        let output = parse_u32(out_col, "GeneratedTokens")?.max(1);
        rows.push((ts, input, output));
    }
    rows.sort_by_key(|r| r.0);
    let base = rows.first().map(|r| r.0).unwrap_or(0);
    Ok(rows
        .into_iter()
        .enumerate()
        .map(|(i, (ts, input, output))| Request {
            id: i as u64,
            model_id: model_id.to_string(),
            arrival: ts - base,
            input_tokens: input,
            output_tokens: output,
        })
        .collect())
}

/// Parses `YYYY-MM-DD HH:MM:SS[.fraction]` into milliseconds since an
/// arbitrary epoch (days are counted from year 0, which is all the rebasing
/// in [`import_azure_csv`] needs).
fn parse_azure_timestamp(s: &str) -> Option<u64> {
    let (date, time) = s.split_once([' ', 'T'])?;
    let mut d = date.split('-').map(|p| p.parse::<u64>());
    let (y, mo, day) = (d.next()?.ok()?, d.next()?.ok()?, d.next()?.ok()?);
    let time = time.trim_end_matches('Z');
    let mut t = time.split(':');
    let (h, mi) = (
        t.next()?.parse::<u64>().ok()?,
        t.next()?.parse::<u64>().ok()?,
    );
    let sec_str = t.next()?;
    let (sec, frac) = match sec_str.split_once('.') {
        Some((s, f)) => (s.parse::<u64>().ok()?, f),
        None => (sec_str.parse::<u64>().ok()?, ""),
    };
    let mut ms = 0u64;
    for (i, c) in frac.chars().take(3).enumerate() {
        ms += c.to_digit(10)? as u64 * 10u64.pow(2 - i as u32);
    }
    let days = days_from_civil(y, mo, day)?;
    Some((((days * 24 + h) * 60 + mi) * 60 + sec) * 1000 + ms)
}

fn days_from_civil(y: u64, m: u64, d: u64) -> Option<u64> {
    if !(1..=12).contains(&m) || !(1..=31).contains(&d) {
        return None;
    }
    let (y, m) = if m <= 2 {
        (y.checked_sub(1)?, m + 9)
    } else {
        (y, m - 3)
    };
    let era = y / 400;
    let yoe = y - era * 400;
    let doy = (153 * m + 2) / 5 + d - 1;
    let doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
    Some(era * 146_097 + doe)
}

/// Token-length sampler for synthetic requests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LengthDist {
    Fixed {
        input: u32,
        output: u32,
    },
    Uniform {
        input_min: u32,
        input_max: u32,
        output_min: u32,
        output_max: u32,
    },
    /// Log-normal lengths parameterised by their median, truncated to `max`.
    LogNormal {
        input_median: f64,
        input_sigma: f64,
        output_median: f64,
        output_sigma: f64,
        max_input: u32,
        max_output: u32,
    },
}

impl Default for LengthDist {
    fn default() -> Self {
        LengthDist::LogNormal {
            input_median: 800.0,
            input_sigma: 0.8,
            output_median: 200.0,
            output_sigma: 0.7,
            max_input: 8192,
            max_output: 2048,
        }
    }
}

impl LengthDist {
    fn validate(&self) -> Result<(), TraceError> {
        let bad = |m: &str| Err(TraceError::InvalidParam(m.into()));
        match *self {
            LengthDist::Fixed { input, output } if input == 0 || output == 0 => {
                bad("fixed lengths must be >= 1")
            }
            LengthDist::Uniform {
                input_min,
                input_max,
                output_min,
                output_max,
            } if input_min == 0
                || output_min == 0
                || input_min > input_max
                || output_min > output_max =>
            {
                bad("uniform length bounds must satisfy 1 <= min <= max")
            }
            LengthDist::LogNormal {
                input_median,
                input_sigma,
                output_median,
                output_sigma,
                max_input,
                max_output,
            } if !(input_median > 0.0 && output_median > 0.0)
                || !(input_sigma >= 0.0 && output_sigma >= 0.0)
                || max_input == 0
                || max_output == 0 =>
            {
                bad("log-normal medians must be > 0, sigmas >= 0, caps >= 1")
            }
            _ => Ok(()),
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> (u32, u32) {
        match *self {
            LengthDist::Fixed { input, output } => (input, output),
            LengthDist::Uniform {
                input_min,
                input_max,
                output_min,
                output_max,
            } => (
                rng.random_range(input_min..=input_max),
                rng.random_range(output_min..=output_max),
            ),
            LengthDist::LogNormal {
                input_median,
                input_sigma,
                output_median,
                output_sigma,
                max_input,
                max_output,
            } => {
                let draw = |rng: &mut ChaCha8Rng, median: f64, sigma: f64, cap: u32| {
                    let v = LogNormal::new(median.ln(), sigma)
                        .map(|d| d.sample(rng))
                        .unwrap_or(median);
                    (v.round() as u32).clamp(1, cap)
                };
                let i = draw(rng, input_median, input_sigma, max_input);
                let o = draw(rng, output_median, output_sigma, max_output);
                (i, o)
            }
        }
    }
}

/// A burst that recurs at the same offset every day for one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Burst {
    /// Model name; `None` applies the burst to every model.
    #[serde(default)]
    pub model: Option<String>,
    pub offset_ms: Millis,
    pub duration_ms: Millis,
    pub multiplier: f64,
}

/// Time-varying modulation of the aggregate arrival rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RateProfile {
    /// Relative amplitude of a daily sinusoid, in `[0, 1)`.
    pub diurnal_amplitude: f64,
    pub day_ms: Millis,
    /// Standard deviation of a per-window multiplicative rate noise.
    pub window_noise: f64,
    pub noise_window_ms: Millis,
    pub bursts: Vec<Burst>,
}

impl Default for RateProfile {
    fn default() -> Self {
        Self {
            diurnal_amplitude: 0.0,
            day_ms: 86_400_000,
            window_noise: 0.0,
            noise_window_ms: 300_000,
            bursts: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    /// Model names in popularity order (rank 1 first).
    pub models: Vec<String>,
    pub alpha: f64,
    /// Mean aggregate requests per second.
    pub rps: f64,
    pub duration_s: f64,
    pub seed: u64,
    #[serde(default)]
    pub lengths: LengthDist,
    #[serde(default)]
    pub profile: RateProfile,
}

/// Normalised power-law shares: rank `r` (1-based) gets `r^-alpha / sum`.
pub fn power_law_shares(n: usize, alpha: f64) -> Vec<f64> {
    let raw: Vec<f64> = (1..=n).map(|r| (r as f64).powf(-alpha)).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

/// Generates a multi-model workload: Poisson arrivals at `rps` (modulated by
/// the rate profile) with model popularity following a power law.
pub fn synthesize_workload(params: &SynthParams) -> Result<Vec<Request>, TraceError> {
    if params.models.is_empty() {
        return Err(TraceError::NoModels);
    }
    if !(params.alpha >= 0.0) || !params.alpha.is_finite() {
        return Err(TraceError::InvalidParam(
            "alpha must be finite and >= 0".into(),
        ));
    }
    if !(params.rps > 0.0) || !(params.duration_s > 0.0) {
        return Err(TraceError::InvalidParam(
            "rps and duration must be > 0".into(),
        ));
    }
    let prof = &params.profile;
    if !(0.0..1.0).contains(&prof.diurnal_amplitude)
        || prof.day_ms == 0
        || prof.noise_window_ms == 0
    {
        return Err(TraceError::InvalidParam(
            "diurnal amplitude must be in [0,1), periods > 0".into(),
        ));
    }
    if prof.bursts.iter().any(|b| !(b.multiplier > 0.0)) {
        return Err(TraceError::InvalidParam(
            "burst multipliers must be > 0".into(),
        ));
    }
    params.lengths.validate()?;

    let shares = power_law_shares(params.models.len(), params.alpha);
    let duration_ms = params.duration_s * 1000.0;
    let n_noise = (duration_ms / prof.noise_window_ms as f64).ceil() as usize + 1;

    let mut noise_rng = substream(params.seed, "rate-noise");
    let noise: Vec<f64> = (0..n_noise)
        .map(|_| {
            if prof.window_noise > 0.0 {
                let z: f64 = rand_distr::StandardNormal.sample(&mut noise_rng);
                (1.0 + prof.window_noise * z).max(0.0)
            } else {
                1.0
            }
        })
        .collect();

    // Per-model burst multiplier; the envelope bounds the thinning rate.
    let burst_factor = |model: usize, t: f64| -> f64 {
        let day_off = (t as u64) % prof.day_ms;
        prof.bursts
            .iter()
            .filter(|b| b.model.as_deref().is_none_or(|m| m == params.models[model]))
            .filter(|b| day_off >= b.offset_ms && day_off < b.offset_ms + b.duration_ms)
            .fold(1.0, |acc, b| acc * b.multiplier)
    };
    let max_burst: f64 = (0..params.models.len())
        .map(|m| {
            prof.bursts
                .iter()
                .filter(|b| b.model.as_deref().is_none_or(|x| x == params.models[m]))
                .map(|b| b.multiplier.max(1.0))
                .product::<f64>()
        })
        .fold(1.0, f64::max);
    let max_noise = noise.iter().cloned().fold(1.0, f64::max);
    let envelope = (1.0 + prof.diurnal_amplitude) * max_noise * max_burst;
    let rate_per_ms = params.rps / 1000.0;
    let lambda_max = rate_per_ms * envelope;

    let mut arrivals_rng = substream(params.seed, "arrivals");
    let mut lengths_rng = substream(params.seed, "lengths");
    let gap = Exp::new(lambda_max).map_err(|e| TraceError::InvalidParam(e.to_string()))?;
    let cumulative: Vec<f64> = shares
        .iter()
        .scan(0.0, |acc, s| {
            *acc += s;
            Some(*acc)
        })
        .collect();

    let mut out = Vec::new();
    let mut t = 0.0f64;
    loop {
        t += gap.sample(&mut arrivals_rng);
        if t >= duration_ms {
            break;
        }
        let u: f64 = arrivals_rng.random();
        let model = cumulative
            .iter()
            .position(|c| u < *c)
            .unwrap_or(shares.len() - 1);
        let diurnal = 1.0
            + prof.diurnal_amplitude * (2.0 * std::f64::consts::PI * t / prof.day_ms as f64).sin();
        let nz = noise[(t / prof.noise_window_ms as f64) as usize];
        let accept = diurnal * nz * burst_factor(model, t) / envelope;
        let v: f64 = arrivals_rng.random();
        if v >= accept {
            continue;
        }
        let (input_tokens, output_tokens) = params.lengths.sample(&mut lengths_rng);
        out.push(Request {
            id: out.len() as u64,
            model_id: params.models[model].clone(),
            arrival: t.floor() as Millis,
            input_tokens,
            output_tokens,
        });
    }
    Ok(out)
}

/// Time discretisation shared by statistics and the predictor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowGrid {
    pub window_ms: Millis,
    pub windows_per_day: u32,
}

impl WindowGrid {
    pub fn new(window_ms: Millis, windows_per_day: u32) -> Self {
        assert!(
            window_ms > 0 && windows_per_day > 0,
            "window grid must be non-degenerate"
        );
        Self {
            window_ms,
            windows_per_day,
        }
    }

    /// Absolute window number to `(day, window-of-day)`.
    pub fn split(&self, absolute: u64) -> (u32, u32) {
        let wpd = self.windows_per_day as u64;
        ((absolute / wpd) as u32, (absolute % wpd) as u32)
    }

    pub fn absolute(&self, day: u32, window: u32) -> u64 {
        day as u64 * self.windows_per_day as u64 + window as u64
    }

    pub fn window_of(&self, t: Millis) -> u64 {
        t / self.window_ms
    }
}

/// Observed load of one model in one window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowStats {
    pub model_id: String,
    pub day: u32,
    pub window: u32,
    /// Time-weighted mean number of concurrent requests.
    pub avg_load: f64,
    /// Maximum number of concurrent requests.
    pub peak_load: u32,
}

/// Per-model, per-window average and peak concurrency, where a request is
/// in the system over `[arrival, end)`.
///
/// Windows are emitted for every model from window 0 up to the window
/// containing the latest end time.
pub fn compute_window_stats(
    requests: &[Request],
    ends: &[Millis],
    grid: WindowGrid,
) -> Vec<WindowStats> {
    assert_eq!(requests.len(), ends.len(), "one end time per request");
    if requests.is_empty() {
        return Vec::new();
    }
    let horizon = requests
        .iter()
        .zip(ends)
        .map(|(r, &e)| e.max(r.arrival + 1))
        .max()
        .unwrap_or(0);
    let n_windows = horizon.div_ceil(grid.window_ms);

    let mut deltas: BTreeMap<&str, BTreeMap<Millis, i64>> = BTreeMap::new();
    for (r, &end) in requests.iter().zip(ends) {
        let d = deltas.entry(r.model_id.as_str()).or_default();
        if end > r.arrival {
            *d.entry(r.arrival).or_default() += 1;
            *d.entry(end).or_default() -= 1;
        }
    }

    let mut out = Vec::new();
    for (model, points) in deltas {
        let mut tracker = LoadTracker::new(0);
        let mut iter = points.into_iter().peekable();
        for w in 0..n_windows {
            let end = (w + 1) * grid.window_ms;
            while let Some(&(t, d)) = iter.peek() {
                if t >= end {
                    break;
                }
                tracker.apply(t, d);
                iter.next();
            }
            let (avg, peak) = tracker.close_window(end);
            let (day, window) = grid.split(w);
            out.push(WindowStats {
                model_id: model.to_string(),
                day,
                window,
                avg_load: avg,
                peak_load: peak,
            });
        }
    }
    out
}

/// Online accumulator of concurrency for the window currently open.
#[derive(Debug, Clone)]
pub struct LoadTracker {
    count: i64,
    window_start: Millis,
    last_change: Millis,
    area: u128,
    peak: i64,
}

impl LoadTracker {
    pub fn new(window_start: Millis) -> Self {
        Self {
            count: 0,
            window_start,
            last_change: window_start,
            area: 0,
            peak: 0,
        }
    }

    pub fn current(&self) -> u32 {
        self.count.max(0) as u32
    }

    /// Applies a concurrency change at `t`. Changes sharing a timestamp must
    /// all be applied before the interval after `t` is accounted.
    pub fn apply(&mut self, t: Millis, delta: i64) {
        debug_assert!(t >= self.last_change);
        if t > self.last_change {
            self.area += self.count as u128 * (t - self.last_change) as u128;
            self.peak = self.peak.max(self.count);
            self.last_change = t;
        }
        self.count += delta;
        debug_assert!(self.count >= 0, "concurrency went negative");
    }

    /// Closes the window at `end` and opens the next one; returns `(avg, peak)`.
    pub fn close_window(&mut self, end: Millis) -> (f64, u32) {
        if end > self.last_change {
            self.area += self.count as u128 * (end - self.last_change) as u128;
            self.peak = self.peak.max(self.count);
        }
        let len = end.saturating_sub(self.window_start).max(1);
        let avg = self.area as f64 / len as f64;
        let peak = self.peak.max(0) as u32;
        self.window_start = end;
        self.last_change = end;
        self.area = 0;
        self.peak = self.count;
        (avg, peak)
    }
}
