//! Seeded synthetic EEG-like corpora with a manifest oracle.
//!
//! Each file combines, per channel: pink noise (spectrally shaped white
//! noise with a 1/sqrt(f) magnitude profile), a set of band oscillations,
//! sparse biphasic 70 ms transients, and white sensor noise. Homologous
//! left/right electrodes share a pair component mixed by the correlation
//! `rho`, so hemisphere symmetry is controllable. Labels are written in
//! decorated TUSZ style (`EEG FP1-REF`, old temporal names T3/T4/T5/T6)
//! plus two auxiliary channels, exercising the cleaning stage.
//!
//! Regeneration with the same seed is bit-identical; per-file RNG streams
//! derive from `(seed, file index)` so generation parallelizes freely.

use crate::preprocess::MONTAGE_LABELS;
use crate::signal_io::{write_edf_subset, ChannelSignal, EdfError, Recording};
use crate::spectral::{Cx, FftPlan};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::io::Write;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Edf(#[from] EdfError),
    #[error("malformed manifest: {0}")]
    Manifest(String),
}

/// Physical range declared in generated EDF headers; generated values are
/// clamped inside it.
pub const SYNTH_RANGE_UV: f64 = 2000.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OscSpec {
    pub freq_hz: f64,
    pub amplitude_uv: f64,
}

#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub n_files: usize,
    /// Whole seconds per file.
    pub duration_s: usize,
    /// (rate, probability) pairs; probabilities need not be normalized.
    pub rate_mix: Vec<(f64, f64)>,
    /// RMS of the pink-noise component per channel.
    pub pink_level_uv: f64,
    pub oscillations: Vec<OscSpec>,
    pub spike_rate_per_min: f64,
    pub spike_amplitude_uv: f64,
    /// Left-right correlation of homologous electrode pairs in [0, 1].
    pub lr_correlation: f64,
    /// Independent white sensor noise RMS per channel.
    pub sensor_noise_uv: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_files: 10,
            duration_s: 60,
            rate_mix: vec![(256.0, 0.7), (250.0, 0.2), (400.0, 0.05), (512.0, 0.05)],
            pink_level_uv: 40.0,
            oscillations: vec![
                OscSpec {
                    freq_hz: 10.0,
                    amplitude_uv: 30.0,
                },
                OscSpec {
                    freq_hz: 22.0,
                    amplitude_uv: 12.0,
                },
            ],
            spike_rate_per_min: 2.0,
            spike_amplitude_uv: 120.0,
            lr_correlation: 0.6,
            sensor_noise_uv: 5.0,
            seed: 0,
        }
    }
}

/// One generated file as recorded in the manifest (the test oracle).
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub file: String,
    pub fs: f64,
    pub file_seed: u64,
    pub duration_s: usize,
    pub channels: usize,
}

fn file_seed(seed: u64, index: usize) -> u64 {
    seed ^ (index as u64 + 1).wrapping_mul(0xD1B5_4A32_D192_ED03)
}

fn sub_rng(file_seed: u64, tag: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(file_seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(1e-12..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Pink noise of length `n`: white complex spectrum shaped by 1/sqrt(f),
/// inverse-transformed and scaled to the requested RMS.
fn pink_noise(rng: &mut ChaCha8Rng, n: usize, fs: f64, rms: f64) -> Vec<f64> {
    if rms == 0.0 {
        return vec![0.0; n];
    }
    let m = n.next_power_of_two().max(8);
    let mut spectrum = vec![Cx::<f64>::zero(); m];
    for k in 1..m / 2 {
        let f = k as f64 * fs / m as f64;
        let scale = 1.0 / f.sqrt();
        spectrum[k] = Cx {
            re: gaussian(rng) * scale,
            im: gaussian(rng) * scale,
        };
        spectrum[m - k] = Cx {
            re: spectrum[k].re,
            im: -spectrum[k].im,
        };
    }
    spectrum[m / 2] = Cx {
        re: gaussian(rng),
        im: 0.0,
    };
    // Forward transform of the conjugated Hermitian spectrum gives a real
    // signal; normalization is irrelevant because of the RMS rescale below.
    let plan = FftPlan::new(m);
    for bin in spectrum.iter_mut() {
        bin.im = -bin.im;
    }
    plan.fft_in_place(&mut spectrum);
    let mut signal: Vec<f64> = spectrum[..n].iter().map(|c| c.re).collect();
    let mean = signal.iter().sum::<f64>() / n as f64;
    let var = signal.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    let scale = if var > 0.0 { rms / var.sqrt() } else { 0.0 };
    for v in signal.iter_mut() {
        *v = (*v - mean) * scale;
    }
    signal
}

/// Poisson draw via Knuth's product-of-uniforms.
fn poisson(rng: &mut ChaCha8Rng, lambda: f64) -> usize {
    if lambda <= 0.0 {
        return 0;
    }
    let limit = (-lambda).exp();
    let mut k = 0usize;
    let mut p = 1.0f64;
    loop {
        p *= rng.gen::<f64>();
        if p <= limit {
            return k;
        }
        k += 1;
    }
}

/// Shared-or-individual signal component: pink noise plus the oscillation
/// set with stream-specific phases.
fn component(rng: &mut ChaCha8Rng, spec: &SynthSpec, n: usize, fs: f64) -> Vec<f64> {
    let mut signal = pink_noise(rng, n, fs, spec.pink_level_uv);
    for osc in &spec.oscillations {
        let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        for (t, v) in signal.iter_mut().enumerate() {
            *v += osc.amplitude_uv
                * (std::f64::consts::TAU * osc.freq_hz * t as f64 / fs + phase).sin();
        }
    }
    signal
}

fn add_spikes(rng: &mut ChaCha8Rng, signal: &mut [f64], spec: &SynthSpec, fs: f64) {
    let duration_s = signal.len() as f64 / fs;
    let count = poisson(rng, spec.spike_rate_per_min * duration_s / 60.0);
    let width = (0.070 * fs).round() as usize;
    for _ in 0..count {
        let start = rng.gen_range(0..signal.len());
        let amp = spec.spike_amplitude_uv * rng.gen_range(0.6..1.0);
        for i in 0..width {
            let Some(v) = signal.get_mut(start + i) else { break };
            let tau = i as f64 / width as f64;
            // biphasic transient: one full cycle under a Hann envelope
            let envelope = 0.5 * (1.0 - (std::f64::consts::TAU * tau).cos());
            *v += amp * (std::f64::consts::TAU * tau).sin() * envelope;
        }
    }
}

/// Index of the homologous pair a montage row belongs to, if any.
/// Pairs are adjacent rows; Fz/Cz/Pz (rows 16..18) are unpaired.
fn pair_of(row: usize) -> Option<usize> {
    match row {
        0..=15 => Some(row / 2),
        19..=22 => Some(8 + (row - 19) / 2),
        _ => None,
    }
}

/// Deterministically generate file `index` of the corpus.
pub fn generate_recording(spec: &SynthSpec, index: usize) -> (Recording, ManifestEntry) {
    let fseed = file_seed(spec.seed, index);
    let mut meta_rng = sub_rng(fseed, 1);

    let total: f64 = spec.rate_mix.iter().map(|(_, p)| p).sum();
    let mut draw = meta_rng.gen_range(0.0..total.max(f64::MIN_POSITIVE));
    let mut fs = spec.rate_mix.last().map(|(r, _)| *r).unwrap_or(256.0);
    for &(rate, p) in &spec.rate_mix {
        if draw < p {
            fs = rate;
            break;
        }
        draw -= p;
    }

    let n = spec.duration_s * fs as usize;
    let rho = spec.lr_correlation.clamp(0.0, 1.0);
    let indep = (1.0 - rho * rho).sqrt();

    // Pair components are generated once per pair and reused by both
    // electrodes, so rho = 1 makes homologous channels identical before
    // spikes and sensor noise.
    let pair_components: Vec<Vec<f64>> = (0..11)
        .map(|pair| component(&mut sub_rng(fseed, 0x100 + pair as u64), spec, n, fs))
        .collect();

    let mut channels = Vec::with_capacity(MONTAGE_LABELS.len() + 2);
    for (row, label) in MONTAGE_LABELS.iter().enumerate() {
        let own = component(&mut sub_rng(fseed, 0x200 + row as u64), spec, n, fs);
        let mut samples: Vec<f64> = match pair_of(row) {
            Some(pair) => pair_components[pair]
                .iter()
                .zip(&own)
                .map(|(&s, &o)| rho * s + indep * o)
                .collect(),
            None => own,
        };
        add_spikes(&mut sub_rng(fseed, 0x300 + row as u64), &mut samples, spec, fs);
        if spec.sensor_noise_uv > 0.0 {
            let mut noise_rng = sub_rng(fseed, 0x400 + row as u64);
            for v in samples.iter_mut() {
                *v += spec.sensor_noise_uv * gaussian(&mut noise_rng);
            }
        }
        for v in samples.iter_mut() {
            *v = v.clamp(-SYNTH_RANGE_UV, SYNTH_RANGE_UV);
        }
        channels.push(ChannelSignal {
            label: decorated_label(label),
            fs,
            samples,
        });
    }

    // Auxiliary channels that the cleaning stage must discard.
    let mut aux_rng = sub_rng(fseed, 0x500);
    let ecg: Vec<f64> = (0..n)
        .map(|t| {
            let beat = (t as f64 / fs) % 0.8;
            let qrs = if beat < 0.05 {
                600.0 * (std::f64::consts::PI * beat / 0.05).sin()
            } else {
                0.0
            };
            (qrs + 10.0 * gaussian(&mut aux_rng)).clamp(-SYNTH_RANGE_UV, SYNTH_RANGE_UV)
        })
        .collect();
    channels.push(ChannelSignal {
        label: "EEG EKG1-REF".to_string(),
        fs,
        samples: ecg,
    });
    channels.push(ChannelSignal {
        label: "PHOTIC-REF".to_string(),
        fs,
        samples: vec![0.0; n],
    });

    let entry = ManifestEntry {
        file: format!("synth_{index:04}.edf"),
        fs,
        file_seed: fseed,
        duration_s: spec.duration_s,
        channels: channels.len(),
    };
    (
        Recording {
            patient_id: format!("synthetic-{index:04}"),
            channels,
            duration_s: spec.duration_s as f64,
        },
        entry,
    )
}

/// TUSZ-style decoration, with the old temporal names on the wire.
fn decorated_label(canonical: &str) -> String {
    let on_wire = match canonical {
        "T7" => "T3",
        "T8" => "T4",
        "P7" => "T5",
        "P8" => "T6",
        other => other,
    };
    format!("EEG {}-REF", on_wire.to_ascii_uppercase())
}

/// Generate the corpus into `out_dir` and write `manifest.csv` next to the
/// EDF files. Fans out per file under the `parallel` feature.
pub fn generate_corpus(spec: &SynthSpec, out_dir: &Path) -> Result<Vec<ManifestEntry>, SynthError> {
    std::fs::create_dir_all(out_dir)?;
    let results = generate_all(spec, out_dir)?;
    write_manifest(&results, &out_dir.join("manifest.csv"))?;
    Ok(results)
}

#[cfg(feature = "parallel")]
fn generate_all(spec: &SynthSpec, out_dir: &Path) -> Result<Vec<ManifestEntry>, SynthError> {
    use rayon::prelude::*;
    (0..spec.n_files)
        .into_par_iter()
        .map(|i| generate_one(spec, i, out_dir))
        .collect()
}

#[cfg(not(feature = "parallel"))]
fn generate_all(spec: &SynthSpec, out_dir: &Path) -> Result<Vec<ManifestEntry>, SynthError> {
    (0..spec.n_files)
        .map(|i| generate_one(spec, i, out_dir))
        .collect()
}

fn generate_one(
    spec: &SynthSpec,
    index: usize,
    out_dir: &Path,
) -> Result<ManifestEntry, SynthError> {
    let (recording, entry) = generate_recording(spec, index);
    write_edf_subset(
        &recording,
        &out_dir.join(&entry.file),
        -SYNTH_RANGE_UV,
        SYNTH_RANGE_UV,
    )?;
    Ok(entry)
}

pub fn write_manifest(entries: &[ManifestEntry], path: &Path) -> Result<(), SynthError> {
    let mut file = std::fs::File::create(path)?;
    writeln!(file, "file,fs_hz,file_seed,duration_s,channels")?;
    for e in entries {
        writeln!(
            file,
            "{},{},{},{},{}",
            e.file, e.fs, e.file_seed, e.duration_s, e.channels
        )?;
    }
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>, SynthError> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| SynthError::Manifest("empty file".to_string()))?;
    if header != "file,fs_hz,file_seed,duration_s,channels" {
        return Err(SynthError::Manifest(format!(
            "unexpected header {header:?}"
        )));
    }
    lines
        .map(|line| {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 5 {
                return Err(SynthError::Manifest(format!("bad row {line:?}")));
            }
            Ok(ManifestEntry {
                file: fields[0].to_string(),
                fs: fields[1]
                    .parse()
                    .map_err(|_| SynthError::Manifest(format!("bad fs in {line:?}")))?,
                file_seed: fields[2]
                    .parse()
                    .map_err(|_| SynthError::Manifest(format!("bad seed in {line:?}")))?,
                duration_s: fields[3]
                    .parse()
                    .map_err(|_| SynthError::Manifest(format!("bad duration in {line:?}")))?,
                channels: fields[4]
                    .parse()
                    .map_err(|_| SynthError::Manifest(format!("bad channels in {line:?}")))?,
            })
        })
        .collect()
}
