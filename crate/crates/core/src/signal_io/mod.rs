//! Recording ingestion and the internal binary tensor format.
//!
//! A [`Recording`] is the unit of ingestion: per-channel physical-unit
//! signals (microvolts) with their own sampling rates. Mixed-rate files are
//! legal here; the preprocessing stage unifies them by resampling.

mod edf;
mod tensor_file;

pub use edf::{read_edf, write_edf_subset, EdfError, EdfReadResult};
pub use tensor_file::{read_tensor, write_tensor, TensorFileError, TENSOR_MAGIC, TENSOR_VERSION};

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

/// One electrode's signal in physical units.
#[derive(Debug, Clone)]
pub struct ChannelSignal {
    /// Electrode name; the discrimination key for channel cleaning.
    pub label: String,
    /// Sampling rate in Hz, strictly positive.
    pub fs: f64,
    /// Samples in microvolts.
    pub samples: Vec<f64>,
}

impl ChannelSignal {
    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.fs
    }
}

/// A multichannel physical-unit recording.
///
/// Invariants: channel labels are unique, and all channels cover the same
/// duration to within one sample period.
#[derive(Debug, Clone)]
pub struct Recording {
    pub patient_id: String,
    pub channels: Vec<ChannelSignal>,
    pub duration_s: f64,
}

impl Recording {
    pub fn channel(&self, label: &str) -> Option<&ChannelSignal> {
        self.channels.iter().find(|c| c.label == label)
    }

    /// Largest per-channel sampling rate, the file's rate for census purposes.
    pub fn max_fs(&self) -> Option<f64> {
        self.channels
            .iter()
            .map(|c| c.fs)
            .fold(None, |acc, fs| Some(acc.map_or(fs, |a: f64| a.max(fs))))
    }
}

/// Census of initial sampling rates across a corpus.
///
/// Counts are keyed by the maximum channel rate of each file, in millihertz
/// so the map key is exact and ordered. Unreadable files are reported
/// separately and never counted.
#[derive(Debug, Default, Clone)]
pub struct CensusReport {
    counts_mhz: BTreeMap<u64, usize>,
    pub unreadable: Vec<(PathBuf, String)>,
}

impl CensusReport {
    pub fn count_file(&mut self, fs: f64) {
        *self.counts_mhz.entry(fs_key(fs)).or_insert(0) += 1;
    }

    /// (rate in Hz, file count), ascending by rate.
    pub fn counts(&self) -> Vec<(f64, usize)> {
        self.counts_mhz
            .iter()
            .map(|(&k, &n)| (k as f64 / 1000.0, n))
            .collect()
    }

    pub fn count_for(&self, fs: f64) -> usize {
        self.counts_mhz.get(&fs_key(fs)).copied().unwrap_or(0)
    }

    pub fn total_counted(&self) -> usize {
        self.counts_mhz.values().sum()
    }
}

fn fs_key(fs: f64) -> u64 {
    (fs * 1000.0).round() as u64
}

/// Count files per initial sampling rate. Per-file read errors are collected
/// in the report, never fatal.
pub fn sampling_rate_census(paths: &[PathBuf]) -> CensusReport {
    let outcomes = read_rates(paths);
    let mut report = CensusReport::default();
    for (path, outcome) in paths.iter().zip(outcomes) {
        match outcome {
            Ok(Some(fs)) => report.count_file(fs),
            Ok(None) => report
                .unreadable
                .push((path.clone(), "no channels".to_string())),
            Err(msg) => report.unreadable.push((path.clone(), msg)),
        }
    }
    report
}

#[cfg(feature = "parallel")]
fn read_rates(paths: &[PathBuf]) -> Vec<Result<Option<f64>, String>> {
    use rayon::prelude::*;
    paths.par_iter().map(|p| read_rate(p)).collect()
}

#[cfg(not(feature = "parallel"))]
fn read_rates(paths: &[PathBuf]) -> Vec<Result<Option<f64>, String>> {
    paths.iter().map(|p| read_rate(p)).collect()
}

fn read_rate(path: &Path) -> Result<Option<f64>, String> {
    match read_edf(path) {
        Ok(result) => Ok(result.recording.max_fs()),
        Err(e) => Err(e.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine_recording(fs: f64, freq: f64, amp: f64, secs: usize) -> Recording {
        let n = (fs as usize) * secs;
        let samples: Vec<f64> = (0..n)
            .map(|i| amp * (2.0 * std::f64::consts::PI * freq * i as f64 / fs).sin())
            .collect();
        Recording {
            patient_id: "synthetic".into(),
            channels: vec![
                ChannelSignal {
                    label: "FP1".into(),
                    fs,
                    samples: samples.clone(),
                },
                ChannelSignal {
                    label: "FP2".into(),
                    fs,
                    samples,
                },
            ],
            duration_s: secs as f64,
        }
    }

    #[test]
    fn census_counts_by_max_rate() {
        let dir = tempfile::tempdir().unwrap();
        let mut paths = Vec::new();
        for (i, fs) in [256.0, 256.0, 256.0, 250.0].iter().enumerate() {
            let rec = sine_recording(*fs, 10.0, 100.0, 1);
            let path = dir.path().join(format!("r{i}.edf"));
            write_edf_subset(&rec, &path, -1000.0, 1000.0).unwrap();
            paths.push(path);
        }
        let report = sampling_rate_census(&paths);
        assert_eq!(report.count_for(256.0), 3);
        assert_eq!(report.count_for(250.0), 1);
        assert!(report.unreadable.is_empty());
    }

    #[test]
    fn census_empty_list() {
        let report = sampling_rate_census(&[]);
        assert!(report.counts().is_empty());
        assert_eq!(report.total_counted(), 0);
    }

    #[test]
    fn census_isolates_unreadable_files() {
        let dir = tempfile::tempdir().unwrap();
        let good = dir.path().join("good.edf");
        write_edf_subset(&sine_recording(256.0, 10.0, 100.0, 1), &good, -1000.0, 1000.0).unwrap();
        let bad = dir.path().join("bad.edf");
        std::fs::write(&bad, b"not an edf file at all").unwrap();
        let report = sampling_rate_census(&[good, bad.clone()]);
        assert_eq!(report.total_counted(), 1);
        assert_eq!(report.unreadable.len(), 1);
        assert_eq!(report.unreadable[0].0, bad);
    }
}
