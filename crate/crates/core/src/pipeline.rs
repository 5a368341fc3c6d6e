//! Corpus-level preprocessing: per-file fan-out of the fixed chain
//! (clean, resample, bandpass, notch, montage), windowing with the
//! plausibility screen, scaler fitting on the training split, and scaled
//! window assembly.

use crate::preprocess::{preprocess_recording, FilterParams, MontageSpec, PreprocessError};
use crate::signal_io::read_edf;
use crate::windowing::{
    plausibility_check, segment_windows, HistogramScaler, RawWindow, RejectReason, WindowSet,
    WindowSource,
};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("no windows were accepted from the corpus")]
    NoWindows,
    #[error(transparent)]
    Scaler(#[from] crate::windowing::ScalerError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Tunables of the preprocessing chain; defaults are the pipeline values
/// (256 Hz, 0.5-70 Hz band, 60/2 Hz notch, 2 s windows at 50 % overlap,
/// 1 uV scaler bins).
#[derive(Debug, Clone)]
pub struct PipelineParams {
    pub filter: FilterParams,
    pub window_samples: usize,
    pub window_hop: usize,
    pub scaler_bin_width: f64,
}

impl Default for PipelineParams {
    fn default() -> Self {
        Self {
            filter: FilterParams::default(),
            window_samples: crate::windowing::WINDOW_SAMPLES,
            window_hop: crate::windowing::WINDOW_HOP,
            scaler_bin_width: HistogramScaler::DEFAULT_BIN_WIDTH,
        }
    }
}

/// Per-file outcome for the rejection report.
#[derive(Debug, Clone)]
pub struct FileReport {
    pub file: String,
    pub windows_kept: usize,
    pub rejected_std_high: usize,
    pub rejected_std_low: usize,
    pub rejected_degenerate_scale: usize,
    pub missing_channels: bool,
    pub too_short: bool,
    pub unreadable: bool,
    pub detail: String,
}

impl FileReport {
    fn clean(file: String) -> Self {
        Self {
            file,
            windows_kept: 0,
            rejected_std_high: 0,
            rejected_std_low: 0,
            rejected_degenerate_scale: 0,
            missing_channels: false,
            too_short: false,
            unreadable: false,
            detail: String::new(),
        }
    }
}

/// Scaled windows, scaler and per-file reports for one split.
pub struct PreprocessOutput {
    pub windows: WindowSet,
    pub scaler: HistogramScaler,
    pub reports: Vec<FileReport>,
}

struct FileWindows {
    report: FileReport,
    accepted: Vec<RawWindow>,
}

fn process_file(path: &Path, params: &PipelineParams) -> FileWindows {
    let name = path
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string());
    let mut report = FileReport::clean(name);
    let mut accepted = Vec::new();

    let recording = match read_edf(path) {
        Ok(result) => result.recording,
        Err(e) => {
            report.unreadable = true;
            report.detail = e.to_string();
            return FileWindows { report, accepted };
        }
    };
    let montaged = match preprocess_recording(recording, &MontageSpec::default(), &params.filter) {
        Ok(m) => m,
        Err(PreprocessError::MissingChannels(labels)) => {
            report.missing_channels = true;
            report.detail = format!("missing channels: {}", labels.join(" "));
            return FileWindows { report, accepted };
        }
        Err(e) => {
            report.unreadable = true;
            report.detail = e.to_string();
            return FileWindows { report, accepted };
        }
    };
    let windows = match segment_windows(&montaged, params.window_samples, params.window_hop) {
        Ok(w) => w,
        Err(e) => {
            report.too_short = true;
            report.detail = e.to_string();
            return FileWindows { report, accepted };
        }
    };
    for window in windows {
        match plausibility_check(&window.data, montaged.channels) {
            Ok(()) => accepted.push(window),
            Err(RejectReason::StdHigh) => report.rejected_std_high += 1,
            Err(RejectReason::StdLow) => report.rejected_std_low += 1,
        }
    }
    report.windows_kept = accepted.len();
    FileWindows { report, accepted }
}

#[cfg(feature = "parallel")]
fn process_files(paths: &[PathBuf], params: &PipelineParams) -> Vec<FileWindows> {
    use rayon::prelude::*;
    paths.par_iter().map(|p| process_file(p, params)).collect()
}

#[cfg(not(feature = "parallel"))]
fn process_files(paths: &[PathBuf], params: &PipelineParams) -> Vec<FileWindows> {
    paths.iter().map(|p| process_file(p, params)).collect()
}

/// Preprocess one split of the corpus.
///
/// With `scaler = None` the histogram scaler is fitted on this split's
/// accepted windows (the training path); otherwise the supplied fit is
/// applied unchanged (dev/eval splits share the training statistics).
pub fn preprocess_split(
    paths: &[PathBuf],
    params: &PipelineParams,
    scaler: Option<&HistogramScaler>,
) -> Result<PreprocessOutput, PipelineError> {
    let mut processed = process_files(paths, params);
    let total_accepted: usize = processed.iter().map(|f| f.accepted.len()).sum();
    if total_accepted == 0 {
        return Err(PipelineError::NoWindows);
    }

    let scaler = match scaler {
        Some(existing) => existing.clone(),
        None => {
            let mut fitted = HistogramScaler::new(
                &crate::preprocess::MONTAGE_LABELS,
                params.scaler_bin_width,
            );
            for file in &processed {
                for window in &file.accepted {
                    fitted.observe_window(&window.data);
                }
            }
            fitted
        }
    };

    let channels = crate::preprocess::MONTAGE_LABELS.len();
    let mut windows = WindowSet::new(channels, params.window_samples);
    for (path, file) in paths.iter().zip(processed.iter_mut()) {
        for window in &file.accepted {
            match scaler.apply(&window.data) {
                Ok(scaled) => windows.push(
                    &scaled,
                    WindowSource {
                        file: path
                            .file_name()
                            .map(|s| s.to_string_lossy().into_owned())
                            .unwrap_or_else(|| path.display().to_string()),
                        start_sample: window.start_sample as u64,
                    },
                ),
                Err(crate::windowing::ScalerError::DegenerateScale(_, _)) => {
                    file.report.rejected_degenerate_scale += 1;
                    file.report.windows_kept -= 1;
                }
                Err(e) => return Err(e.into()),
            }
        }
    }
    if windows.is_empty() {
        return Err(PipelineError::NoWindows);
    }

    Ok(PreprocessOutput {
        windows,
        scaler,
        reports: processed.into_iter().map(|f| f.report).collect(),
    })
}

/// EDF files directly inside `dir`, sorted by name for deterministic order.
pub fn list_edf_files(dir: &Path) -> std::io::Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|entry| entry.ok())
        .map(|entry| entry.path())
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .map(|e| e.eq_ignore_ascii_case("edf"))
                    .unwrap_or(false)
        })
        .collect();
    files.sort();
    Ok(files)
}
