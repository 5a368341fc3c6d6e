//! Per-recording preprocessing: channel cleaning, resampling to the base
//! rate, 0.5-70 Hz bandpass + 60 Hz notch filtering, and average-montage
//! re-referencing.
//!
//! The stage order is fixed: clean, resample, bandpass, notch, montage.

mod filter;
mod resample;

pub use filter::{
    apply_filter, design_bandpass, design_notch, measure_sine_gain, Biquad, BiquadCascade,
    FilterError,
};
pub use resample::{resample_cubic, NaturalCubicSpline, ResampleError};

use crate::signal_io::{ChannelSignal, Recording};
use thiserror::Error;

/// The 23 scalp electrodes of the montage, in the fixed row order used
/// everywhere downstream.
pub const MONTAGE_LABELS: [&str; 23] = [
    "FP1", "FP2", "F3", "F4", "C3", "C4", "P3", "P4", "O1", "O2", "F7", "F8", "T7", "T8", "P7",
    "P8", "Fz", "Cz", "Pz", "A1", "A2", "T1", "T2",
];

/// Base sampling rate all recordings are unified to.
pub const TARGET_FS: f64 = 256.0;

#[derive(Debug, Error)]
pub enum PreprocessError {
    #[error("recording is missing montage channels: {}", .0.join(", "))]
    MissingChannels(Vec<String>),
    #[error("channels disagree in rate or length after resampling")]
    InconsistentChannels,
    #[error(transparent)]
    Resample(#[from] ResampleError),
    #[error(transparent)]
    Filter(#[from] FilterError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reference {
    Average,
}

/// Electrode selection and referencing scheme.
#[derive(Debug, Clone)]
pub struct MontageSpec {
    pub required_labels: Vec<&'static str>,
    pub reference: Reference,
}

impl Default for MontageSpec {
    fn default() -> Self {
        Self {
            required_labels: MONTAGE_LABELS.to_vec(),
            reference: Reference::Average,
        }
    }
}

impl MontageSpec {
    pub fn channel_count(&self) -> usize {
        self.required_labels.len()
    }

    pub fn row_of(&self, label: &str) -> Option<usize> {
        self.required_labels.iter().position(|l| *l == label)
    }
}

/// A channels-x-time matrix in microvolts, rows ordered per [`MontageSpec`].
#[derive(Debug, Clone)]
pub struct Montaged {
    pub channels: usize,
    pub samples: usize,
    pub fs: f64,
    /// Row-major `[channels * samples]`.
    pub data: Vec<f64>,
}

impl Montaged {
    pub fn row(&self, c: usize) -> &[f64] {
        &self.data[c * self.samples..(c + 1) * self.samples]
    }
}

/// Map a raw channel label onto its canonical montage name.
///
/// Decorations are stripped ("EEG " prefix, "-REF"/"-LE" suffixes), matching
/// is case-insensitive, and the old 10-20 temporal names map onto the modern
/// ones (T3->T7, T4->T8, T5->P7, T6->P8). Anything that does not land on a
/// montage electrode — intracranial SP1/SP2, ECG/EKG, respiration, photic
/// and other auxiliary signals — returns `None`.
pub fn normalize_label(raw: &str) -> Option<&'static str> {
    let mut name = raw.trim().to_ascii_uppercase();
    if let Some(rest) = name.strip_prefix("EEG ") {
        name = rest.to_string();
    }
    for suffix in ["-REF", "-LE"] {
        if let Some(rest) = name.strip_suffix(suffix) {
            name = rest.to_string();
        }
    }
    let name = match name.as_str() {
        "T3" => "T7",
        "T4" => "T8",
        "T5" => "P7",
        "T6" => "P8",
        other => other,
    };
    MONTAGE_LABELS
        .iter()
        .find(|l| l.eq_ignore_ascii_case(name))
        .copied()
}

/// Drop channels that do not belong on the scalp montage and canonicalize
/// the labels of those that do. Never fails; the result may be empty.
///
/// If two raw labels normalize to the same electrode the first wins.
pub fn clean_channels(rec: Recording) -> Recording {
    let mut seen: Vec<&'static str> = Vec::new();
    let channels = rec
        .channels
        .into_iter()
        .filter_map(|ch| {
            let canonical = normalize_label(&ch.label)?;
            if seen.contains(&canonical) {
                return None;
            }
            seen.push(canonical);
            Some(ChannelSignal {
                label: canonical.to_string(),
                fs: ch.fs,
                samples: ch.samples,
            })
        })
        .collect();
    Recording {
        patient_id: rec.patient_id,
        channels,
        duration_s: rec.duration_s,
    }
}

/// Re-reference to the average montage.
///
/// Requires every montage electrode at a common rate and length; output rows
/// follow the spec order, and each time sample has the cross-channel mean
/// subtracted (columns sum to zero).
pub fn average_montage(rec: &Recording, spec: &MontageSpec) -> Result<Montaged, PreprocessError> {
    let missing: Vec<String> = spec
        .required_labels
        .iter()
        .filter(|l| rec.channel(l).is_none())
        .map(|l| l.to_string())
        .collect();
    if !missing.is_empty() {
        return Err(PreprocessError::MissingChannels(missing));
    }

    let rows: Vec<&ChannelSignal> = spec
        .required_labels
        .iter()
        .map(|l| rec.channel(l).expect("checked above"))
        .collect();
    let fs = rows[0].fs;
    let samples = rows[0].samples.len();
    if rows.iter().any(|c| c.fs != fs || c.samples.len() != samples) {
        return Err(PreprocessError::InconsistentChannels);
    }

    let channels = rows.len();
    let mut data = vec![0.0; channels * samples];
    for (c, row) in rows.iter().enumerate() {
        data[c * samples..(c + 1) * samples].copy_from_slice(&row.samples);
    }
    for t in 0..samples {
        let mut mean = 0.0;
        for c in 0..channels {
            mean += data[c * samples + t];
        }
        mean /= channels as f64;
        for c in 0..channels {
            data[c * samples + t] -= mean;
        }
    }
    Ok(Montaged {
        channels,
        samples,
        fs,
        data,
    })
}

/// Run the fixed preprocessing chain on one recording:
/// clean -> resample to 256 Hz -> bandpass -> notch -> average montage.
pub fn preprocess_recording(
    rec: Recording,
    spec: &MontageSpec,
    params: &FilterParams,
) -> Result<Montaged, PreprocessError> {
    let cleaned = clean_channels(rec);
    let bandpass = design_bandpass_with(params, TARGET_FS)?;
    let notch = design_notch(TARGET_FS, params.notch_hz, params.notch_bandwidth_hz)?;

    let mut channels = Vec::with_capacity(cleaned.channels.len());
    for ch in cleaned.channels {
        let resampled = if (ch.fs - TARGET_FS).abs() < 1e-9 {
            ch
        } else {
            resample_cubic(&ch, TARGET_FS)?
        };
        let filtered = apply_filter(&notch, &apply_filter(&bandpass, &resampled));
        channels.push(filtered);
    }
    let duration_s = channels
        .first()
        .map(|c: &ChannelSignal| c.duration_s())
        .unwrap_or(0.0);
    let rec = Recording {
        patient_id: String::new(),
        channels,
        duration_s,
    };
    average_montage(&rec, spec)
}

/// Filter corner parameters; defaults follow the pipeline definition.
#[derive(Debug, Clone)]
pub struct FilterParams {
    pub band_lo_hz: f64,
    pub band_hi_hz: f64,
    pub notch_hz: f64,
    pub notch_bandwidth_hz: f64,
}

impl Default for FilterParams {
    fn default() -> Self {
        Self {
            band_lo_hz: 0.5,
            band_hi_hz: 70.0,
            notch_hz: 60.0,
            notch_bandwidth_hz: 2.0,
        }
    }
}

fn design_bandpass_with(params: &FilterParams, fs: f64) -> Result<BiquadCascade, FilterError> {
    filter::design_bandpass_corners(fs, params.band_lo_hz, params.band_hi_hz)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_normalization_covers_decorations_and_synonyms() {
        assert_eq!(normalize_label("EEG FP1-REF"), Some("FP1"));
        assert_eq!(normalize_label("EEG FZ-LE"), Some("Fz"));
        assert_eq!(normalize_label("T3"), Some("T7"));
        assert_eq!(normalize_label("EEG T5-REF"), Some("P7"));
        assert_eq!(normalize_label("EEG SP1-REF"), None);
        assert_eq!(normalize_label("ECG EKG-REF"), None);
        assert_eq!(normalize_label("PHOTIC-REF"), None);
        assert_eq!(normalize_label("BURSTS"), None);
    }

    #[test]
    fn clean_keeps_only_montage_channels() {
        let mk = |label: &str| ChannelSignal {
            label: label.into(),
            fs: 256.0,
            samples: vec![0.0; 16],
        };
        let rec = Recording {
            patient_id: "p".into(),
            channels: vec![mk("EEG FP1-REF"), mk("EEG SP1-REF"), mk("ECG EKG-REF")],
            duration_s: 0.0625,
        };
        let cleaned = clean_channels(rec);
        assert_eq!(cleaned.channels.len(), 1);
        assert_eq!(cleaned.channels[0].label, "FP1");
    }

    #[test]
    fn clean_maps_tusz_style_label_set() {
        // The 31-channel TUSZ-style set: every montage electrode in decorated
        // form (old temporal names) plus auxiliary channels that must vanish.
        let raw = [
            "EEG FP1-REF", "EEG FP2-REF", "EEG F3-REF", "EEG F4-REF", "EEG C3-REF", "EEG C4-REF",
            "EEG P3-REF", "EEG P4-REF", "EEG O1-REF", "EEG O2-REF", "EEG F7-REF", "EEG F8-REF",
            "EEG T3-REF", "EEG T4-REF", "EEG T5-REF", "EEG T6-REF", "EEG FZ-REF", "EEG CZ-REF",
            "EEG PZ-REF", "EEG A1-REF", "EEG A2-REF", "EEG T1-REF", "EEG T2-REF", "EEG SP1-REF",
            "EEG SP2-REF", "EEG EKG1-REF", "EEG RESP1-REF", "EEG LOC-REF", "EEG ROC-REF",
            "PHOTIC-REF", "IBI",
        ];
        let rec = Recording {
            patient_id: "p".into(),
            channels: raw
                .iter()
                .map(|l| ChannelSignal {
                    label: l.to_string(),
                    fs: 256.0,
                    samples: vec![0.0; 8],
                })
                .collect(),
            duration_s: 8.0 / 256.0,
        };
        let cleaned = clean_channels(rec);
        let mut labels: Vec<&str> = cleaned.channels.iter().map(|c| c.label.as_str()).collect();
        labels.sort_unstable();
        let mut expected: Vec<&str> = MONTAGE_LABELS.to_vec();
        expected.sort_unstable();
        assert_eq!(labels, expected);
    }

    fn full_recording(make: impl Fn(usize, usize) -> f64, samples: usize) -> Recording {
        let channels = MONTAGE_LABELS
            .iter()
            .enumerate()
            .map(|(c, label)| ChannelSignal {
                label: label.to_string(),
                fs: 256.0,
                samples: (0..samples).map(|t| make(c, t)).collect(),
            })
            .collect();
        Recording {
            patient_id: "p".into(),
            channels,
            duration_s: samples as f64 / 256.0,
        }
    }

    #[test]
    fn identical_channels_montage_to_zero() {
        let rec = full_recording(|_, t| (t as f64).sin() * 10.0, 64);
        let m = average_montage(&rec, &MontageSpec::default()).unwrap();
        assert!(m.data.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn montage_columns_sum_to_zero() {
        let rec = full_recording(|c, t| ((c * 31 + t * 7) % 13) as f64 - 6.0, 40);
        let m = average_montage(&rec, &MontageSpec::default()).unwrap();
        for t in 0..m.samples {
            let col: f64 = (0..m.channels).map(|c| m.data[c * m.samples + t]).sum();
            assert!(col.abs() < 1e-9, "column {t} sums to {col}");
        }
    }

    #[test]
    fn montage_matches_subtract_column_mean_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let samples = 32;
        let values: Vec<Vec<f64>> = (0..23)
            .map(|_| (0..samples).map(|_| rng.gen_range(-100.0..100.0)).collect())
            .collect();
        let rec = Recording {
            patient_id: "p".into(),
            channels: MONTAGE_LABELS
                .iter()
                .enumerate()
                .map(|(c, label)| ChannelSignal {
                    label: label.to_string(),
                    fs: 256.0,
                    samples: values[c].clone(),
                })
                .collect(),
            duration_s: samples as f64 / 256.0,
        };
        let m = average_montage(&rec, &MontageSpec::default()).unwrap();
        for t in 0..samples {
            let mean: f64 = (0..23).map(|c| values[c][t]).sum::<f64>() / 23.0;
            for c in 0..23 {
                let expect = values[c][t] - mean;
                assert_eq!(m.data[c * samples + t], expect);
            }
        }
    }

    #[test]
    fn montage_reports_missing_channels() {
        let rec = Recording {
            patient_id: "p".into(),
            channels: vec![ChannelSignal {
                label: "FP1".into(),
                fs: 256.0,
                samples: vec![0.0; 8],
            }],
            duration_s: 8.0 / 256.0,
        };
        match average_montage(&rec, &MontageSpec::default()) {
            Err(PreprocessError::MissingChannels(missing)) => {
                assert_eq!(missing.len(), 22);
                assert!(missing.contains(&"Cz".to_string()));
            }
            other => panic!("expected MissingChannels, got {other:?}"),
        }
    }
}
