//! Reader and writer for a well-defined EDF subset.
//!
//! Supported: classic continuous EDF (and EDF+C) with 16-bit two's-complement
//! little-endian samples, 256-byte main header, 256 bytes per signal header.
//! Discontinuous EDF+D files are rejected; annotation streams are ignored.

use super::{ChannelSignal, Recording};
use std::fs;
use std::io::Write;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EdfError {
    #[error("malformed EDF header: {0}")]
    MalformedHeader(String),
    #[error("unsupported EDF feature: {0}")]
    UnsupportedFeature(String),
    #[error("sample {value} uV outside declared physical range [{min}, {max}] in channel {label}")]
    RangeOverflow {
        label: String,
        value: f64,
        min: f64,
        max: f64,
    },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// A parsed recording plus non-fatal per-channel warnings (e.g. channels
/// dropped for degenerate calibration).
#[derive(Debug)]
pub struct EdfReadResult {
    pub recording: Recording,
    pub warnings: Vec<String>,
}

const MAIN_HEADER_LEN: usize = 256;
const SIGNAL_HEADER_LEN: usize = 256;
const DIG_MIN: i32 = -32768;
const DIG_MAX: i32 = 32767;

struct SignalHeader {
    label: String,
    phys_min: f64,
    phys_max: f64,
    dig_min: i32,
    dig_max: i32,
    samples_per_record: usize,
}

/// Read a continuous EDF file into physical units.
///
/// Digital samples convert via the declared per-channel calibration:
/// `phys = (dig - digMin) * (physMax - physMin) / (digMax - digMin) + physMin`.
/// Channels with `digMax == digMin` cannot be calibrated and are dropped with
/// a warning rather than failing the file.
pub fn read_edf(path: &Path) -> Result<EdfReadResult, EdfError> {
    let bytes = fs::read(path)?;
    if bytes.len() < MAIN_HEADER_LEN {
        return Err(EdfError::MalformedHeader(format!(
            "file is {} bytes, shorter than the 256-byte main header",
            bytes.len()
        )));
    }

    let field = |range: std::ops::Range<usize>| -> String {
        String::from_utf8_lossy(&bytes[range]).trim().to_string()
    };

    let version_raw = &bytes[0..8];
    if version_raw != b"0       " {
        return Err(EdfError::MalformedHeader(format!(
            "version field is {:?}, expected \"0       \"",
            String::from_utf8_lossy(version_raw)
        )));
    }

    let patient_id = field(8..88);
    let reserved = field(192..236);
    if reserved.starts_with("EDF+D") {
        return Err(EdfError::UnsupportedFeature(
            "discontinuous EDF+D layout".to_string(),
        ));
    }

    let header_bytes: usize = parse_int(&field(184..192), "header byte count")?;
    let mut n_records: i64 = parse_int(&field(236..244), "record count")?;
    let record_duration: f64 = parse_float(&field(244..252), "record duration")?;
    let ns: usize = parse_int(&field(252..256), "signal count")?;

    if record_duration <= 0.0 {
        return Err(EdfError::MalformedHeader(format!(
            "record duration {record_duration} must be positive"
        )));
    }
    let expected_header = MAIN_HEADER_LEN + ns * SIGNAL_HEADER_LEN;
    if header_bytes != expected_header {
        return Err(EdfError::MalformedHeader(format!(
            "header byte count {header_bytes} does not match 256 + {ns} * 256 = {expected_header}"
        )));
    }
    if bytes.len() < expected_header {
        return Err(EdfError::MalformedHeader(
            "file truncated inside signal headers".to_string(),
        ));
    }

    let signals = parse_signal_headers(&bytes[MAIN_HEADER_LEN..expected_header], ns)?;
    let record_samples: usize = signals.iter().map(|s| s.samples_per_record).sum();
    let record_bytes = record_samples * 2;

    if n_records < 0 {
        // Record count unknown ("-1"): infer from the data section length.
        if record_bytes == 0 {
            return Err(EdfError::MalformedHeader(
                "unknown record count with empty records".to_string(),
            ));
        }
        n_records = ((bytes.len() - expected_header) / record_bytes) as i64;
    }
    let n_records = n_records as usize;
    let data = &bytes[expected_header..];
    if data.len() < n_records * record_bytes {
        return Err(EdfError::MalformedHeader(format!(
            "data section holds {} bytes, header declares {} records of {} bytes",
            data.len(),
            n_records,
            record_bytes
        )));
    }

    let mut warnings = Vec::new();
    let mut channels: Vec<ChannelSignal> = Vec::with_capacity(ns);
    let mut keep = vec![true; ns];
    for (i, sig) in signals.iter().enumerate() {
        if sig.dig_max == sig.dig_min {
            warnings.push(format!(
                "channel {} dropped: degenerate calibration (digMin == digMax == {})",
                sig.label, sig.dig_min
            ));
            keep[i] = false;
        }
    }

    for (i, sig) in signals.iter().enumerate() {
        if !keep[i] {
            continue;
        }
        if channels.iter().any(|c| c.label == sig.label) {
            return Err(EdfError::MalformedHeader(format!(
                "duplicate channel label {}",
                sig.label
            )));
        }
        let gain = (sig.phys_max - sig.phys_min) / (sig.dig_max - sig.dig_min) as f64;
        let mut samples = Vec::with_capacity(n_records * sig.samples_per_record);
        let offset_in_record: usize = signals[..i].iter().map(|s| s.samples_per_record * 2).sum();
        for r in 0..n_records {
            let base = r * record_bytes + offset_in_record;
            for k in 0..sig.samples_per_record {
                let lo = data[base + 2 * k];
                let hi = data[base + 2 * k + 1];
                let dig = i16::from_le_bytes([lo, hi]) as i32;
                samples.push((dig - sig.dig_min) as f64 * gain + sig.phys_min);
            }
        }
        channels.push(ChannelSignal {
            label: sig.label.clone(),
            fs: sig.samples_per_record as f64 / record_duration,
            samples,
        });
    }

    Ok(EdfReadResult {
        recording: Recording {
            patient_id,
            channels,
            duration_s: n_records as f64 * record_duration,
        },
        warnings,
    })
}

fn parse_signal_headers(block: &[u8], ns: usize) -> Result<Vec<SignalHeader>, EdfError> {
    let grab = |start: usize, width: usize, i: usize| -> String {
        let lo = start + i * width;
        String::from_utf8_lossy(&block[lo..lo + width]).trim().to_string()
    };
    // Field blocks are grouped by field, not by signal.
    let labels_at = 0;
    let phys_min_at = ns * (16 + 80 + 8);
    let phys_max_at = phys_min_at + ns * 8;
    let dig_min_at = phys_max_at + ns * 8;
    let dig_max_at = dig_min_at + ns * 8;
    let spr_at = dig_max_at + ns * 8 + ns * 80;

    let mut out = Vec::with_capacity(ns);
    for i in 0..ns {
        let label = grab(labels_at, 16, i);
        let phys_min = parse_float(&grab(phys_min_at, 8, i), "physical minimum")?;
        let phys_max = parse_float(&grab(phys_max_at, 8, i), "physical maximum")?;
        let dig_min = parse_int(&grab(dig_min_at, 8, i), "digital minimum")?;
        let dig_max = parse_int(&grab(dig_max_at, 8, i), "digital maximum")?;
        let samples_per_record = parse_int(&grab(spr_at, 8, i), "samples per record")?;
        out.push(SignalHeader {
            label,
            phys_min,
            phys_max,
            dig_min,
            dig_max,
            samples_per_record,
        });
    }
    Ok(out)
}

fn parse_float(s: &str, what: &str) -> Result<f64, EdfError> {
    s.parse()
        .map_err(|_| EdfError::MalformedHeader(format!("cannot parse {what} from {s:?}")))
}

fn parse_int<T: std::str::FromStr>(s: &str, what: &str) -> Result<T, EdfError> {
    s.parse()
        .map_err(|_| EdfError::MalformedHeader(format!("cannot parse {what} from {s:?}")))
}

/// Write a recording as classic continuous EDF with the full digital range
/// (-32768..32767) mapped onto `[phys_min, phys_max]` microvolts.
///
/// Records are one second long, so every channel rate must be a positive
/// integer and signals are truncated to whole records. Quantization bounds
/// the round-trip error at `(phys_max - phys_min) / 65535` per sample.
pub fn write_edf_subset(
    rec: &Recording,
    path: &Path,
    phys_min: f64,
    phys_max: f64,
) -> Result<(), EdfError> {
    if rec.channels.is_empty() {
        return Err(EdfError::UnsupportedFeature(
            "cannot write a recording with no channels".to_string(),
        ));
    }
    if phys_max <= phys_min {
        return Err(EdfError::UnsupportedFeature(format!(
            "physical range [{phys_min}, {phys_max}] is empty"
        )));
    }
    for ch in &rec.channels {
        if ch.fs <= 0.0 || ch.fs.fract() != 0.0 {
            return Err(EdfError::UnsupportedFeature(format!(
                "channel {} rate {} Hz: one-second records need integer rates",
                ch.label, ch.fs
            )));
        }
        for &v in &ch.samples {
            if v < phys_min || v > phys_max || !v.is_finite() {
                return Err(EdfError::RangeOverflow {
                    label: ch.label.clone(),
                    value: v,
                    min: phys_min,
                    max: phys_max,
                });
            }
        }
    }

    let n_records = rec
        .channels
        .iter()
        .map(|c| c.samples.len() / c.fs as usize)
        .min()
        .unwrap_or(0);
    if n_records == 0 {
        return Err(EdfError::UnsupportedFeature(
            "recording shorter than one full record".to_string(),
        ));
    }

    let ns = rec.channels.len();
    let mut header = Vec::with_capacity(MAIN_HEADER_LEN + ns * SIGNAL_HEADER_LEN);
    push_field(&mut header, "0", 8);
    push_field(&mut header, &rec.patient_id, 80);
    push_field(&mut header, "Startdate 01-JAN-2000", 80);
    push_field(&mut header, "01.01.00", 8);
    push_field(&mut header, "00.00.00", 8);
    push_field(
        &mut header,
        &(MAIN_HEADER_LEN + ns * SIGNAL_HEADER_LEN).to_string(),
        8,
    );
    push_field(&mut header, "", 44);
    push_field(&mut header, &n_records.to_string(), 8);
    push_field(&mut header, "1", 8);
    push_field(&mut header, &ns.to_string(), 4);

    for ch in &rec.channels {
        push_field(&mut header, &ch.label, 16);
    }
    for _ in &rec.channels {
        push_field(&mut header, "synthetic", 80);
    }
    for _ in &rec.channels {
        push_field(&mut header, "uV", 8);
    }
    for _ in &rec.channels {
        push_numeric_field(&mut header, phys_min)?;
    }
    for _ in &rec.channels {
        push_numeric_field(&mut header, phys_max)?;
    }
    for _ in &rec.channels {
        push_field(&mut header, &DIG_MIN.to_string(), 8);
    }
    for _ in &rec.channels {
        push_field(&mut header, &DIG_MAX.to_string(), 8);
    }
    for _ in &rec.channels {
        push_field(&mut header, "", 80);
    }
    for ch in &rec.channels {
        push_field(&mut header, &(ch.fs as usize).to_string(), 8);
    }
    for _ in &rec.channels {
        push_field(&mut header, "", 32);
    }

    let gain = (DIG_MAX - DIG_MIN) as f64 / (phys_max - phys_min);
    let mut data = Vec::new();
    for r in 0..n_records {
        for ch in &rec.channels {
            let spr = ch.fs as usize;
            for k in 0..spr {
                let v = ch.samples[r * spr + k];
                let dig = ((v - phys_min) * gain + DIG_MIN as f64).round() as i32;
                let dig = dig.clamp(DIG_MIN, DIG_MAX) as i16;
                data.extend_from_slice(&dig.to_le_bytes());
            }
        }
    }

    let mut file = fs::File::create(path)?;
    file.write_all(&header)?;
    file.write_all(&data)?;
    Ok(())
}

fn push_field(buf: &mut Vec<u8>, value: &str, width: usize) {
    let mut bytes: Vec<u8> = value.bytes().take(width).collect();
    bytes.resize(width, b' ');
    buf.extend_from_slice(&bytes);
}

fn push_numeric_field(buf: &mut Vec<u8>, value: f64) -> Result<(), EdfError> {
    let mut s = format!("{value}");
    if s.len() > 8 {
        s.truncate(8);
        if s.parse::<f64>().is_err() {
            return Err(EdfError::UnsupportedFeature(format!(
                "physical bound {value} does not fit the 8-character header field"
            )));
        }
    }
    push_field(buf, &s, 8);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const TWO_PI: f64 = std::f64::consts::TAU;

    fn sine(fs: f64, freq: f64, amp: f64, secs: usize) -> Vec<f64> {
        (0..(fs as usize) * secs)
            .map(|i| amp * (TWO_PI * freq * i as f64 / fs).sin())
            .collect()
    }

    fn two_channel_sine() -> Recording {
        Recording {
            patient_id: "p0".into(),
            channels: vec![
                ChannelSignal {
                    label: "FP1".into(),
                    fs: 256.0,
                    samples: sine(256.0, 10.0, 100.0, 2),
                },
                ChannelSignal {
                    label: "FP2".into(),
                    fs: 256.0,
                    samples: sine(256.0, 17.0, 80.0, 2),
                },
            ],
            duration_s: 2.0,
        }
    }

    #[test]
    fn calibration_is_affine() {
        // phys = (dig - digMin) * (physMax - physMin) / (digMax - digMin) + physMin
        let gain = 2000.0 / 65535.0;
        let phys = (0 - (-32768)) as f64 * gain + (-1000.0);
        assert!((phys - 0.015259).abs() < 1e-5, "got {phys}");
        let at_min = ((-32768) - (-32768)) as f64 * gain + (-1000.0);
        assert_eq!(at_min, -1000.0);
    }

    #[test]
    fn round_trip_error_within_one_quantization_step() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sine.edf");
        let rec = two_channel_sine();
        write_edf_subset(&rec, &path, -1000.0, 1000.0).unwrap();
        let back = read_edf(&path).unwrap().recording;
        assert_eq!(back.channels.len(), 2);
        let step = 2000.0 / 65535.0;
        for (orig, read) in rec.channels.iter().zip(&back.channels) {
            assert_eq!(orig.label, read.label);
            assert_eq!(orig.fs, read.fs);
            assert_eq!(orig.samples.len(), read.samples.len());
            let max_err = orig
                .samples
                .iter()
                .zip(&read.samples)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(max_err <= step, "max error {max_err} exceeds step {step}");
        }
    }

    #[test]
    fn zero_signal_quantizes_to_constant() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("zero.edf");
        let rec = Recording {
            patient_id: "p0".into(),
            channels: vec![ChannelSignal {
                label: "FP1".into(),
                fs: 256.0,
                samples: vec![0.0; 256],
            }],
            duration_s: 1.0,
        };
        write_edf_subset(&rec, &path, -1000.0, 1000.0).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let data = &bytes[512..];
        assert_eq!(data.len(), 512, "256 samples * 2 bytes");
        let first = i16::from_le_bytes([data[0], data[1]]);
        for pair in data.chunks_exact(2) {
            assert_eq!(i16::from_le_bytes([pair[0], pair[1]]), first);
        }
    }

    #[test]
    fn range_overflow_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let rec = Recording {
            patient_id: "p0".into(),
            channels: vec![ChannelSignal {
                label: "FP1".into(),
                fs: 256.0,
                samples: vec![1500.0; 256],
            }],
            duration_s: 1.0,
        };
        let err = write_edf_subset(&rec, &dir.path().join("x.edf"), -1000.0, 1000.0).unwrap_err();
        assert!(matches!(err, EdfError::RangeOverflow { .. }));
    }

    #[test]
    fn rejects_edf_plus_d() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.edf");
        let rec = two_channel_sine();
        write_edf_subset(&rec, &path, -1000.0, 1000.0).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[192..197].copy_from_slice(b"EDF+D");
        std::fs::write(&path, &bytes).unwrap();
        let err = read_edf(&path).unwrap_err();
        assert!(matches!(err, EdfError::UnsupportedFeature(_)));
    }

    #[test]
    fn rejects_bad_version_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.edf");
        write_edf_subset(&two_channel_sine(), &path, -1000.0, 1000.0).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        let mut bad_version = bytes.clone();
        bad_version[0] = b'9';
        std::fs::write(&path, &bad_version).unwrap();
        assert!(matches!(
            read_edf(&path).unwrap_err(),
            EdfError::MalformedHeader(_)
        ));

        std::fs::write(&path, &bytes[..bytes.len() - 100]).unwrap();
        assert!(matches!(
            read_edf(&path).unwrap_err(),
            EdfError::MalformedHeader(_)
        ));
    }

    #[test]
    fn degenerate_calibration_drops_channel_with_warning() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("deg.edf");
        write_edf_subset(&two_channel_sine(), &path, -1000.0, 1000.0).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        // Overwrite FP1's digital max (first slot of the dig-max block) to
        // equal its digital min.
        let ns = 2;
        let dig_max_at = 256 + ns * (16 + 80 + 8 + 8 + 8 + 8);
        bytes[dig_max_at..dig_max_at + 8].copy_from_slice(b"-32768  ");
        std::fs::write(&path, &bytes).unwrap();

        let result = read_edf(&path).unwrap();
        assert_eq!(result.recording.channels.len(), 1);
        assert_eq!(result.recording.channels[0].label, "FP2");
        assert_eq!(result.warnings.len(), 1);
        assert!(result.warnings[0].contains("FP1"));
    }

    #[test]
    fn mixed_rate_files_are_legal() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mixed.edf");
        let rec = Recording {
            patient_id: "p0".into(),
            channels: vec![
                ChannelSignal {
                    label: "FP1".into(),
                    fs: 256.0,
                    samples: sine(256.0, 10.0, 50.0, 1),
                },
                ChannelSignal {
                    label: "FP2".into(),
                    fs: 250.0,
                    samples: sine(250.0, 10.0, 50.0, 1),
                },
            ],
            duration_s: 1.0,
        };
        write_edf_subset(&rec, &path, -1000.0, 1000.0).unwrap();
        let back = read_edf(&path).unwrap().recording;
        assert_eq!(back.channels[0].fs, 256.0);
        assert_eq!(back.channels[1].fs, 250.0);
        assert_eq!(back.max_fs(), Some(256.0));
    }
}
