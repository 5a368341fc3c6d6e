//! Per-channel histogram scaler.
//!
//! Values accumulate into fixed-width bins with a lazily extended range
//! (a sparse map of bin index -> count), one histogram per electrode.
//! Quantiles come from the cumulative count with linear interpolation
//! inside the crossing bin, so median/p5/p95 are accurate to one bin width.
//! Scaling follows `(value - median) / (p95 - p5)` with a final clip to
//! [-1, 1].

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ScalerError {
    #[error("channel {0} saw no samples")]
    EmptyChannel(String),
    #[error("channel {0} has a degenerate scale (p95 - p5 = {1}); window rejected")]
    DegenerateScale(String, f64),
    #[error("scaler file is malformed: {0}")]
    Malformed(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

const SIDECAR_HEADER: &str = "DCAE-SCALER v1";

#[derive(Debug, Clone, Default)]
struct ChannelHistogram {
    counts: BTreeMap<i64, u64>,
    total: u64,
}

impl ChannelHistogram {
    fn observe(&mut self, bin: i64) {
        *self.counts.entry(bin).or_insert(0) += 1;
        self.total += 1;
    }

    fn merge(&mut self, other: &ChannelHistogram) {
        for (&bin, &count) in &other.counts {
            *self.counts.entry(bin).or_insert(0) += count;
        }
        self.total += other.total;
    }

    /// Quantile by locating the bin where the cumulative count crosses
    /// `q * total` and interpolating linearly within it.
    ///
    /// Samples inside a bin are modeled at uniform midpoints, which keeps
    /// the estimate within one bin width of exact-sort quantiles.
    fn quantile(&self, q: f64, bin_width: f64, origin: f64) -> f64 {
        let target = q * self.total as f64;
        let mut cumulative = 0.0;
        let mut last_bin = 0i64;
        for (&bin, &count) in &self.counts {
            let next = cumulative + count as f64;
            if next >= target && target > cumulative {
                let frac = ((target - cumulative - 0.5) / count as f64).clamp(0.0, 1.0);
                return origin + (bin as f64 + frac) * bin_width;
            }
            cumulative = next;
            last_bin = bin;
        }
        origin + (last_bin as f64 + 1.0) * bin_width
    }
}

/// Fitted per-channel statistics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelStats {
    pub median: f64,
    pub p5: f64,
    pub p95: f64,
}

/// Per-channel expandable histogram yielding median/p5/p95.
///
/// Fitting is mergeable: independent partial histograms combine by count
/// addition, so a corpus scan can fan out and merge deterministically.
#[derive(Debug, Clone)]
pub struct HistogramScaler {
    labels: Vec<String>,
    bin_width: f64,
    origin: f64,
    histograms: Vec<ChannelHistogram>,
}

impl HistogramScaler {
    /// Default bin width: 1 uV resolves EEG amplitudes while keeping the
    /// histograms small.
    pub const DEFAULT_BIN_WIDTH: f64 = 1.0;

    pub fn new(labels: &[impl AsRef<str>], bin_width: f64) -> Self {
        assert!(bin_width > 0.0);
        Self {
            labels: labels.iter().map(|l| l.as_ref().to_string()).collect(),
            bin_width,
            origin: 0.0,
            histograms: vec![ChannelHistogram::default(); labels.len()],
        }
    }

    pub fn channel_count(&self) -> usize {
        self.labels.len()
    }

    pub fn bin_width(&self) -> f64 {
        self.bin_width
    }

    pub fn observe(&mut self, channel: usize, value: f64) {
        let bin = ((value - self.origin) / self.bin_width).floor() as i64;
        self.histograms[channel].observe(bin);
    }

    /// Accumulate every sample of a raw window (row-major channels x time).
    pub fn observe_window(&mut self, window: &[f64]) {
        let samples = window.len() / self.labels.len();
        for c in 0..self.labels.len() {
            for &v in &window[c * samples..(c + 1) * samples] {
                self.observe(c, v);
            }
        }
    }

    pub fn merge(&mut self, other: &HistogramScaler) {
        assert_eq!(self.labels, other.labels);
        assert_eq!(self.bin_width, other.bin_width);
        for (mine, theirs) in self.histograms.iter_mut().zip(&other.histograms) {
            mine.merge(theirs);
        }
    }

    pub fn stats(&self, channel: usize) -> Result<ChannelStats, ScalerError> {
        let hist = &self.histograms[channel];
        if hist.total == 0 {
            return Err(ScalerError::EmptyChannel(self.labels[channel].clone()));
        }
        Ok(ChannelStats {
            median: hist.quantile(0.5, self.bin_width, self.origin),
            p5: hist.quantile(0.05, self.bin_width, self.origin),
            p95: hist.quantile(0.95, self.bin_width, self.origin),
        })
    }

    pub fn all_stats(&self) -> Result<Vec<ChannelStats>, ScalerError> {
        (0..self.labels.len()).map(|c| self.stats(c)).collect()
    }

    /// Scale a raw window to dimensionless values in [-1, 1]:
    /// `(value - median) / (p95 - p5)` per channel, then clip.
    pub fn apply(&self, window: &[f64]) -> Result<Vec<f32>, ScalerError> {
        let samples = window.len() / self.labels.len();
        let mut out = Vec::with_capacity(window.len());
        for c in 0..self.labels.len() {
            let stats = self.stats(c)?;
            let scale = stats.p95 - stats.p5;
            if scale < 1e-9 {
                return Err(ScalerError::DegenerateScale(self.labels[c].clone(), scale));
            }
            for &v in &window[c * samples..(c + 1) * samples] {
                let scaled = (v - stats.median) / scale;
                out.push(scaled.clamp(-1.0, 1.0) as f32);
            }
        }
        Ok(out)
    }

    /// Persist as a text sidecar so train/eval splits share one fit.
    pub fn save(&self, path: &Path) -> Result<(), ScalerError> {
        let mut file = std::fs::File::create(path)?;
        writeln!(file, "{SIDECAR_HEADER}")?;
        writeln!(file, "bin_width {}", self.bin_width)?;
        writeln!(file, "origin {}", self.origin)?;
        for (label, hist) in self.labels.iter().zip(&self.histograms) {
            write!(file, "channel {label}")?;
            for (bin, count) in &hist.counts {
                write!(file, " {bin}:{count}")?;
            }
            writeln!(file)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ScalerError> {
        let reader = BufReader::new(std::fs::File::open(path)?);
        let mut lines = reader.lines();
        let bad = |msg: &str| ScalerError::Malformed(msg.to_string());
        let header = lines.next().ok_or_else(|| bad("empty file"))??;
        if header != SIDECAR_HEADER {
            return Err(bad(&format!("unexpected header {header:?}")));
        }
        let parse_kv = |line: &str, key: &str| -> Result<f64, ScalerError> {
            let rest = line
                .strip_prefix(key)
                .ok_or_else(|| bad(&format!("expected {key} line")))?;
            rest.trim()
                .parse()
                .map_err(|_| bad(&format!("bad {key} value")))
        };
        let bin_width = parse_kv(&lines.next().ok_or_else(|| bad("missing bin_width"))??, "bin_width")?;
        let origin = parse_kv(&lines.next().ok_or_else(|| bad("missing origin"))??, "origin")?;

        let mut labels = Vec::new();
        let mut histograms = Vec::new();
        for line in lines {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            if parts.next() != Some("channel") {
                return Err(bad("expected channel line"));
            }
            let label = parts.next().ok_or_else(|| bad("channel without label"))?;
            let mut hist = ChannelHistogram::default();
            for entry in parts {
                let (bin, count) = entry
                    .split_once(':')
                    .ok_or_else(|| bad("bin entry without ':'"))?;
                let bin: i64 = bin.parse().map_err(|_| bad("bad bin index"))?;
                let count: u64 = count.parse().map_err(|_| bad("bad bin count"))?;
                hist.counts.insert(bin, count);
                hist.total += count;
            }
            labels.push(label.to_string());
            histograms.push(hist);
        }
        Ok(Self {
            labels,
            bin_width,
            origin,
            histograms,
        })
    }
}
