//! Window extraction, plausibility screening, scaling and augmentation.
//!
//! Montaged recordings are cut into 2-second windows with 50 % overlap
//! (hop = 1 s of unique signal per window). Windows with implausible
//! amplitudes are rejected, the survivors are scaled per channel with the
//! histogram scaler and clipped to [-1, 1].

mod scaler;

pub use scaler::{ChannelStats, HistogramScaler, ScalerError};

use crate::preprocess::{Montaged, MONTAGE_LABELS};
use thiserror::Error;

/// Samples per window: 2 seconds at 256 Hz.
pub const WINDOW_SAMPLES: usize = 512;
/// Hop between window starts: 1 second (50 % overlap).
pub const WINDOW_HOP: usize = 256;
/// Channels per window.
pub const WINDOW_CHANNELS: usize = 23;

#[derive(Debug, Error)]
pub enum WindowError {
    #[error("signal of {0} samples is shorter than one window ({1})")]
    TooShort(usize, usize),
}

/// Why a window was rejected by the plausibility screen.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RejectReason {
    /// Some channel's standard deviation exceeds 5000 uV.
    StdHigh,
    /// More than 8 channels are nearly flat (std below 0.01 uV).
    StdLow,
}

impl RejectReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            RejectReason::StdHigh => "std-high",
            RejectReason::StdLow => "std-low",
        }
    }
}

/// An unscaled window in microvolts plus its provenance.
#[derive(Debug, Clone)]
pub struct RawWindow {
    /// Row-major `[WINDOW_CHANNELS * WINDOW_SAMPLES]`.
    pub data: Vec<f64>,
    pub start_sample: usize,
}

/// Cut a montaged matrix into windows starting at hop multiples; the
/// trailing remainder is discarded. Count = floor((L - win) / hop) + 1.
pub fn segment_windows(m: &Montaged, win: usize, hop: usize) -> Result<Vec<RawWindow>, WindowError> {
    if m.samples < win {
        return Err(WindowError::TooShort(m.samples, win));
    }
    let count = (m.samples - win) / hop + 1;
    let mut out = Vec::with_capacity(count);
    for w in 0..count {
        let start = w * hop;
        let mut data = Vec::with_capacity(m.channels * win);
        for c in 0..m.channels {
            let row = m.row(c);
            data.extend_from_slice(&row[start..start + win]);
        }
        out.push(RawWindow {
            data,
            start_sample: start,
        });
    }
    Ok(out)
}

/// Population standard deviation of one channel row.
fn channel_std(row: &[f64]) -> f64 {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    var.sqrt()
}

/// Screen one window: reject if any channel std exceeds 5000 uV, or if more
/// than 8 channels sit below 0.01 uV std (almost zero activity).
pub fn plausibility_check(window: &[f64], channels: usize) -> Result<(), RejectReason> {
    let samples = window.len() / channels;
    let mut flat = 0usize;
    for c in 0..channels {
        let std = channel_std(&window[c * samples..(c + 1) * samples]);
        if std > 5000.0 {
            return Err(RejectReason::StdHigh);
        }
        if std < 0.01 {
            flat += 1;
        }
    }
    if flat > 8 {
        return Err(RejectReason::StdLow);
    }
    Ok(())
}

/// Row permutation swapping homologous left/right electrodes; midline rows
/// (Fz, Cz, Pz) are fixed points. The permutation is an involution.
pub fn flip_permutation() -> [usize; WINDOW_CHANNELS] {
    let mut perm = [0usize; WINDOW_CHANNELS];
    let pairs = [
        ("FP1", "FP2"),
        ("F3", "F4"),
        ("C3", "C4"),
        ("P3", "P4"),
        ("O1", "O2"),
        ("F7", "F8"),
        ("T7", "T8"),
        ("P7", "P8"),
        ("A1", "A2"),
        ("T1", "T2"),
    ];
    let row = |label: &str| {
        MONTAGE_LABELS
            .iter()
            .position(|l| *l == label)
            .expect("montage label")
    };
    for (i, p) in perm.iter_mut().enumerate() {
        *p = i;
    }
    for (a, b) in pairs {
        let (ia, ib) = (row(a), row(b));
        perm[ia] = ib;
        perm[ib] = ia;
    }
    perm
}

/// Swap left/right hemisphere rows of a scaled or raw window in place.
pub fn flip_electrodes<T: Copy>(window: &mut [T], channels: usize) {
    let samples = window.len() / channels;
    let perm = flip_permutation();
    for (c, &target) in perm.iter().enumerate() {
        if target > c {
            let (lo, hi) = window.split_at_mut(target * samples);
            lo[c * samples..(c + 1) * samples].swap_with_slice(&mut hi[..samples]);
        }
    }
}

/// Provenance of one window.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WindowSource {
    pub file: String,
    pub start_sample: u64,
}

/// A batch of scaled windows ready for training, `[n, channels, samples]`
/// row-major f32 with every value in [-1, 1].
#[derive(Debug, Clone, Default)]
pub struct WindowSet {
    pub n: usize,
    pub channels: usize,
    pub samples: usize,
    pub data: Vec<f32>,
    pub sources: Vec<WindowSource>,
}

impl WindowSet {
    pub fn new(channels: usize, samples: usize) -> Self {
        Self {
            n: 0,
            channels,
            samples,
            data: Vec::new(),
            sources: Vec::new(),
        }
    }

    pub fn push(&mut self, window: &[f32], source: WindowSource) {
        assert_eq!(window.len(), self.channels * self.samples);
        self.data.extend_from_slice(window);
        self.sources.push(source);
        self.n += 1;
    }

    pub fn window(&self, i: usize) -> &[f32] {
        let len = self.channels * self.samples;
        &self.data[i * len..(i + 1) * len]
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }
}
