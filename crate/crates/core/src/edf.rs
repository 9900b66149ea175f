//! EDF / EDF+C reader and writer.
//!
//! A file is a 256-byte ASCII header, one 256-byte block of per-signal
//! fields (stored field-major, `ns` entries per field), then `n` data
//! records of little-endian 16-bit samples. EDF+ annotation signals carry
//! time-stamped annotation lists (TALs) as raw bytes instead of samples.
//!
//! Ordinary signals are decoded into physical units with the per-channel
//! linear calibration. Annotation signals are removed from the channel list
//! and decoded into [`Annotation`]s. Discontinuous EDF+D files and 24-bit
//! BDF files are rejected as unsupported.

use std::fmt::Display;

use chrono::{Datelike, NaiveDate, NaiveDateTime, NaiveTime, Timelike};
use thiserror::Error;

const HEADER_LEN: usize = 256;
const ANNOTATION_LABEL: &str = "EDF Annotations";
const TAL_DURATION: u8 = 0x15;
const TAL_SEP: u8 = 0x14;

#[derive(Debug, Error, PartialEq)]
pub enum EdfError {
    #[error("malformed header field `{field}` at byte {offset}: {reason}")]
    Field {
        field: String,
        offset: usize,
        reason: String,
    },
    #[error("truncated file: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("unexpected trailing data: expected {expected} bytes, found {actual}")]
    TrailingData { expected: usize, actual: usize },
    #[error("unsupported EDF variant: {0}")]
    Unsupported(String),
    #[error("bad annotation list at byte {offset}: {reason}")]
    Annotation { offset: usize, reason: String },
    #[error("invalid recording: {0}")]
    Invalid(String),
    #[error("channel {channel} sample {index}: physical value {value} outside [{min}, {max}]")]
    Range {
        channel: usize,
        index: usize,
        value: f64,
        min: f64,
        max: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdfVariant {
    /// Plain EDF, no annotation signal.
    Edf,
    /// EDF+ continuous recording.
    EdfPlusContinuous,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EdfHeader {
    pub variant: EdfVariant,
    pub patient_id: String,
    pub recording_id: String,
    pub start: NaiveDateTime,
    pub record_count: usize,
    /// Seconds per data record.
    pub record_duration: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EdfChannel {
    pub label: String,
    pub transducer: String,
    pub physical_dimension: String,
    pub physical_min: f64,
    pub physical_max: f64,
    pub digital_min: i32,
    pub digital_max: i32,
    pub prefilter: String,
    pub samples_per_record: usize,
    /// Calibrated samples, `record_count × samples_per_record` of them.
    pub samples: Vec<f64>,
}

impl EdfChannel {
    fn gain(&self) -> f64 {
        (self.physical_max - self.physical_min) / f64::from(self.digital_max - self.digital_min)
    }

    pub fn to_physical(&self, digital: i16) -> f64 {
        self.physical_min + f64::from(i32::from(digital) - self.digital_min) * self.gain()
    }

    /// Inverse calibration, rounded to the nearest code. `None` when the
    /// value falls outside the digital range.
    pub fn to_digital(&self, physical: f64) -> Option<i16> {
        if !physical.is_finite() {
            return None;
        }
        let d = ((physical - self.physical_min) / self.gain() + f64::from(self.digital_min)).round();
        if d < f64::from(self.digital_min) || d > f64::from(self.digital_max) {
            return None;
        }
        Some(d as i16)
    }

    /// Samples per second.
    pub fn sample_rate(&self, record_duration: f64) -> f64 {
        self.samples_per_record as f64 / record_duration
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Annotation {
    /// Seconds from recording start.
    pub onset: f64,
    pub duration: Option<f64>,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EdfRecording {
    pub header: EdfHeader,
    pub channels: Vec<EdfChannel>,
    pub annotations: Vec<Annotation>,
}

impl EdfRecording {
    pub fn channel_count(&self) -> usize {
        self.channels.len()
    }

    /// Checks the structural invariants shared by parser and writer.
    pub fn validate(&self) -> Result<(), EdfError> {
        if self.channels.is_empty() {
            return Err(EdfError::Invalid("recording has no signal channels".into()));
        }
        if !(self.header.record_duration.is_finite() && self.header.record_duration > 0.0) {
            return Err(EdfError::Invalid(format!(
                "record duration must be positive, got {}",
                self.header.record_duration
            )));
        }
        for (i, ch) in self.channels.iter().enumerate() {
            if ch.digital_min >= ch.digital_max {
                return Err(EdfError::Invalid(format!(
                    "channel {i} ({}): digital min {} is not below digital max {}",
                    ch.label, ch.digital_min, ch.digital_max
                )));
            }
            if ch.digital_min < i32::from(i16::MIN) || ch.digital_max > i32::from(i16::MAX) {
                return Err(EdfError::Invalid(format!(
                    "channel {i} ({}): digital range [{}, {}] exceeds 16 bits",
                    ch.label, ch.digital_min, ch.digital_max
                )));
            }
            if ch.physical_min == ch.physical_max || !ch.physical_min.is_finite() || !ch.physical_max.is_finite() {
                return Err(EdfError::Invalid(format!(
                    "channel {i} ({}): degenerate physical range [{}, {}]",
                    ch.label, ch.physical_min, ch.physical_max
                )));
            }
            if ch.samples_per_record == 0 {
                return Err(EdfError::Invalid(format!("channel {i} ({}): zero samples per record", ch.label)));
            }
            let expected = self.header.record_count * ch.samples_per_record;
            if ch.samples.len() != expected {
                return Err(EdfError::Invalid(format!(
                    "channel {i} ({}): {} samples, expected {expected}",
                    ch.label,
                    ch.samples.len()
                )));
            }
        }
        let mut prev = 0.0;
        for a in &self.annotations {
            if !(a.onset.is_finite() && a.onset >= 0.0) {
                return Err(EdfError::Invalid(format!("annotation onset {} is negative", a.onset)));
            }
            if a.onset < prev {
                return Err(EdfError::Invalid(format!(
                    "annotation onsets decrease ({} after {prev})",
                    a.onset
                )));
            }
            prev = a.onset;
        }
        Ok(())
    }
}

// --- reading -------------------------------------------------------------

struct Cursor<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> Cursor<'a> {
    fn field(&mut self, name: &str, width: usize) -> Result<(&'a str, usize), EdfError> {
        let start = self.offset;
        let raw = self.bytes.get(start..start + width).ok_or_else(|| EdfError::Field {
            field: name.to_string(),
            offset: start,
            reason: format!("header ends before this {width}-byte field"),
        })?;
        if let Some(pos) = raw.iter().position(|b| !(0x20..=0x7e).contains(b)) {
            return Err(EdfError::Field {
                field: name.to_string(),
                offset: start + pos,
                reason: format!("non-printable byte 0x{:02x}", raw[pos]),
            });
        }
        self.offset += width;
        let text = std::str::from_utf8(raw).expect("printable ASCII");
        Ok((text.trim_end(), start))
    }

    fn number<T: std::str::FromStr>(&mut self, name: &str, width: usize) -> Result<T, EdfError> {
        let (text, offset) = self.field(name, width)?;
        text.trim().parse::<T>().map_err(|_| EdfError::Field {
            field: name.to_string(),
            offset,
            reason: format!("`{text}` is not a valid number"),
        })
    }
}

fn parse_start(date: &str, date_at: usize, time: &str, time_at: usize) -> Result<NaiveDateTime, EdfError> {
    let bad = |field: &str, offset: usize, text: &str| EdfError::Field {
        field: field.to_string(),
        offset,
        reason: format!("`{text}` is not in dd.mm.yy / hh.mm.ss form"),
    };
    let parts = |s: &str| -> Option<(u32, u32, u32)> {
        let mut it = s.split('.');
        let a = it.next()?.parse().ok()?;
        let b = it.next()?.parse().ok()?;
        let c = it.next()?.parse().ok()?;
        if it.next().is_some() || s.len() != 8 {
            return None;
        }
        Some((a, b, c))
    };
    let (dd, mm, yy) = parts(date).ok_or_else(|| bad("start date", date_at, date))?;
    let (h, mi, s) = parts(time).ok_or_else(|| bad("start time", time_at, time))?;
    // EDF two-digit years: 85–99 are 19xx, 00–84 are 20xx
    let year = if yy >= 85 { 1900 + yy } else { 2000 + yy };
    let d = NaiveDate::from_ymd_opt(year as i32, mm, dd).ok_or_else(|| bad("start date", date_at, date))?;
    let t = NaiveTime::from_hms_opt(h, mi, s).ok_or_else(|| bad("start time", time_at, time))?;
    Ok(NaiveDateTime::new(d, t))
}

struct RawSignal {
    label: String,
    transducer: String,
    physical_dimension: String,
    physical_min: f64,
    physical_max: f64,
    digital_min: i32,
    digital_max: i32,
    prefilter: String,
    samples_per_record: usize,
}

/// Decodes a complete EDF or EDF+C file.
pub fn parse_edf(bytes: &[u8]) -> Result<EdfRecording, EdfError> {
    if bytes.len() < HEADER_LEN {
        return Err(EdfError::Truncated {
            expected: HEADER_LEN,
            actual: bytes.len(),
        });
    }
    if bytes[0] == 0xff {
        return Err(EdfError::Unsupported("24-bit BDF file (version byte 0xff)".into()));
    }
    let mut cur = Cursor { bytes, offset: 0 };
    let (version, _) = cur.field("version", 8)?;
    if version.trim() != "0" {
        return Err(EdfError::Field {
            field: "version".into(),
            offset: 0,
            reason: format!("expected `0`, found `{version}`"),
        });
    }
    let patient_id = cur.field("patient id", 80)?.0.to_string();
    let recording_id = cur.field("recording id", 80)?.0.to_string();
    let (date, date_at) = cur.field("start date", 8)?;
    let (time, time_at) = cur.field("start time", 8)?;
    let start = parse_start(date, date_at, time, time_at)?;
    let header_bytes: usize = cur.number("header bytes", 8)?;
    let (reserved, _) = cur.field("reserved", 44)?;
    let variant = if reserved.starts_with("EDF+D") {
        return Err(EdfError::Unsupported("discontinuous EDF+D recording".into()));
    } else if reserved.starts_with("EDF+C") {
        EdfVariant::EdfPlusContinuous
    } else {
        EdfVariant::Edf
    };
    let record_at = cur.offset;
    let record_count: i64 = cur.number("number of data records", 8)?;
    if record_count < 0 {
        return Err(EdfError::Unsupported(format!(
            "record count {record_count} (recording still in progress)"
        )));
    }
    let record_count = usize::try_from(record_count).map_err(|_| EdfError::Field {
        field: "number of data records".into(),
        offset: record_at,
        reason: "out of range".into(),
    })?;
    let duration_at = cur.offset;
    let record_duration: f64 = cur.number("record duration", 8)?;
    if !(record_duration.is_finite() && record_duration > 0.0) {
        return Err(EdfError::Field {
            field: "record duration".into(),
            offset: duration_at,
            reason: format!("must be positive, got {record_duration}"),
        });
    }
    let ns_at = cur.offset;
    let ns: usize = cur.number("number of signals", 4)?;
    if ns == 0 {
        return Err(EdfError::Field {
            field: "number of signals".into(),
            offset: ns_at,
            reason: "must be at least 1".into(),
        });
    }
    if header_bytes != HEADER_LEN * (ns + 1) {
        return Err(EdfError::Field {
            field: "header bytes".into(),
            offset: 184,
            reason: format!("declares {header_bytes}, but {ns} signals need {}", HEADER_LEN * (ns + 1)),
        });
    }
    if bytes.len() < header_bytes {
        return Err(EdfError::Truncated {
            expected: header_bytes,
            actual: bytes.len(),
        });
    }

    let texts = |cur: &mut Cursor, name: &str, width: usize| -> Result<Vec<String>, EdfError> {
        (0..ns).map(|i| cur.field(&format!("{name}[{i}]"), width).map(|(t, _)| t.to_string())).collect()
    };
    let numbers_f = |cur: &mut Cursor, name: &str| -> Result<Vec<f64>, EdfError> {
        (0..ns).map(|i| cur.number::<f64>(&format!("{name}[{i}]"), 8)).collect()
    };
    let numbers_i = |cur: &mut Cursor, name: &str| -> Result<Vec<i32>, EdfError> {
        (0..ns).map(|i| cur.number::<i32>(&format!("{name}[{i}]"), 8)).collect()
    };
    let labels = texts(&mut cur, "label", 16)?;
    let transducers = texts(&mut cur, "transducer", 80)?;
    let dims = texts(&mut cur, "physical dimension", 8)?;
    let pmins = numbers_f(&mut cur, "physical min")?;
    let pmaxs = numbers_f(&mut cur, "physical max")?;
    let dmins = numbers_i(&mut cur, "digital min")?;
    let dmaxs = numbers_i(&mut cur, "digital max")?;
    let prefilters = texts(&mut cur, "prefilter", 80)?;
    let sprs: Vec<usize> = (0..ns)
        .map(|i| cur.number::<usize>(&format!("samples per record[{i}]"), 8))
        .collect::<Result<_, _>>()?;
    let _ = texts(&mut cur, "signal reserved", 32)?;

    let signals: Vec<RawSignal> = (0..ns)
        .map(|i| RawSignal {
            label: labels[i].clone(),
            transducer: transducers[i].clone(),
            physical_dimension: dims[i].clone(),
            physical_min: pmins[i],
            physical_max: pmaxs[i],
            digital_min: dmins[i],
            digital_max: dmaxs[i],
            prefilter: prefilters[i].clone(),
            samples_per_record: sprs[i],
        })
        .collect();
    let is_annotation: Vec<bool> = signals
        .iter()
        .map(|s| variant == EdfVariant::EdfPlusContinuous && s.label == ANNOTATION_LABEL)
        .collect();

    let record_bytes: usize = sprs.iter().sum::<usize>() * 2;
    let expected = header_bytes + record_count * record_bytes;
    if bytes.len() < expected {
        return Err(EdfError::Truncated {
            expected,
            actual: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(EdfError::TrailingData {
            expected,
            actual: bytes.len(),
        });
    }

    let mut channels: Vec<EdfChannel> = signals
        .iter()
        .zip(&is_annotation)
        .filter(|(_, &a)| !a)
        .map(|(s, _)| EdfChannel {
            label: s.label.clone(),
            transducer: s.transducer.clone(),
            physical_dimension: s.physical_dimension.clone(),
            physical_min: s.physical_min,
            physical_max: s.physical_max,
            digital_min: s.digital_min,
            digital_max: s.digital_max,
            prefilter: s.prefilter.clone(),
            samples_per_record: s.samples_per_record,
            samples: Vec::with_capacity(record_count * s.samples_per_record),
        })
        .collect();
    if channels.is_empty() {
        return Err(EdfError::Invalid("file contains only annotation signals".into()));
    }
    for ch in &channels {
        if ch.digital_min >= ch.digital_max
            || ch.digital_min < i32::from(i16::MIN)
            || ch.digital_max > i32::from(i16::MAX)
        {
            return Err(EdfError::Invalid(format!(
                "channel {}: bad digital range [{}, {}]",
                ch.label, ch.digital_min, ch.digital_max
            )));
        }
        if ch.physical_min == ch.physical_max {
            return Err(EdfError::Invalid(format!(
                "channel {}: physical min equals physical max ({})",
                ch.label, ch.physical_min
            )));
        }
    }

    let mut annotations = Vec::new();
    let mut offset = header_bytes;
    for _ in 0..record_count {
        let mut ch_idx = 0;
        for (s, &annot) in signals.iter().zip(&is_annotation) {
            let len = s.samples_per_record * 2;
            let block = &bytes[offset..offset + len];
            if annot {
                parse_tals(block, offset, &mut annotations)?;
            } else {
                let ch = &mut channels[ch_idx];
                for pair in block.chunks_exact(2) {
                    let d = i16::from_le_bytes([pair[0], pair[1]]);
                    let p = ch.to_physical(d);
                    ch.samples.push(p);
                }
                ch_idx += 1;
            }
            offset += len;
        }
    }

    let recording = EdfRecording {
        header: EdfHeader {
            variant,
            patient_id,
            recording_id,
            start,
            record_count,
            record_duration,
        },
        channels,
        annotations,
    };
    recording.validate()?;
    Ok(recording)
}

fn parse_tal_number(raw: &[u8], at: usize, what: &str) -> Result<f64, EdfError> {
    let text = std::str::from_utf8(raw).map_err(|_| EdfError::Annotation {
        offset: at,
        reason: format!("{what} is not ASCII"),
    })?;
    text.parse::<f64>().map_err(|_| EdfError::Annotation {
        offset: at,
        reason: format!("{what} `{text}` is not a number"),
    })
}

fn parse_tals(block: &[u8], base: usize, out: &mut Vec<Annotation>) -> Result<(), EdfError> {
    let mut pos = 0;
    while pos < block.len() {
        if block[pos] == 0 {
            pos += 1;
            continue;
        }
        let end = block[pos..].iter().position(|&b| b == 0).map_or(block.len(), |e| pos + e);
        let tal = &block[pos..end];
        let at = base + pos;
        if tal[0] != b'+' && tal[0] != b'-' {
            return Err(EdfError::Annotation {
                offset: at,
                reason: "onset must start with `+` or `-`".into(),
            });
        }
        let time_end = tal.iter().position(|&b| b == TAL_SEP).ok_or_else(|| EdfError::Annotation {
            offset: at,
            reason: "missing 0x14 after onset".into(),
        })?;
        let time = &tal[..time_end];
        let (onset, duration) = match time.iter().position(|&b| b == TAL_DURATION) {
            Some(d) => (
                parse_tal_number(&time[..d], at, "onset")?,
                Some(parse_tal_number(&time[d + 1..], at + d + 1, "duration")?),
            ),
            None => (parse_tal_number(time, at, "onset")?, None),
        };
        for text in tal[time_end + 1..].split(|&b| b == TAL_SEP) {
            if text.is_empty() {
                continue;
            }
            let text = String::from_utf8(text.to_vec()).map_err(|_| EdfError::Annotation {
                offset: at,
                reason: "annotation text is not UTF-8".into(),
            })?;
            out.push(Annotation { onset, duration, text });
        }
        pos = end;
    }
    Ok(())
}

// --- writing -------------------------------------------------------------

fn put_text(out: &mut Vec<u8>, field: &str, text: &str, width: usize) -> Result<(), EdfError> {
    if text.len() > width || !text.bytes().all(|b| (0x20..=0x7e).contains(&b)) {
        return Err(EdfError::Field {
            field: field.to_string(),
            offset: out.len(),
            reason: format!("`{text}` does not fit {width} printable ASCII bytes"),
        });
    }
    out.extend_from_slice(text.as_bytes());
    out.extend(std::iter::repeat_n(b' ', width - text.len()));
    Ok(())
}

fn put_number(out: &mut Vec<u8>, field: &str, value: impl Display, width: usize) -> Result<(), EdfError> {
    put_text(out, field, &value.to_string(), width)
}

struct SignalHeader<'a> {
    label: &'a str,
    transducer: &'a str,
    dimension: &'a str,
    physical_min: f64,
    physical_max: f64,
    digital_min: i32,
    digital_max: i32,
    prefilter: &'a str,
    samples_per_record: usize,
}

fn build_tals(rec: &EdfRecording) -> Result<Vec<Vec<u8>>, EdfError> {
    let n = rec.header.record_count;
    let dur = rec.header.record_duration;
    if n == 0 && !rec.annotations.is_empty() {
        return Err(EdfError::Invalid("annotations need at least one data record".into()));
    }
    let mut records: Vec<Vec<u8>> = (0..n)
        .map(|k| {
            let mut r = format!("+{}", k as f64 * dur).into_bytes();
            r.extend_from_slice(&[TAL_SEP, TAL_SEP, 0]);
            r
        })
        .collect();
    for a in &rec.annotations {
        if a.text.is_empty() || a.text.bytes().any(|b| b == 0 || b == TAL_SEP || b == TAL_DURATION) {
            return Err(EdfError::Invalid(format!("annotation text {:?} cannot be encoded", a.text)));
        }
        let k = ((a.onset / dur).floor() as usize).min(n - 1);
        let r = &mut records[k];
        r.extend_from_slice(format!("+{}", a.onset).as_bytes());
        if let Some(d) = a.duration {
            if !(d.is_finite() && d >= 0.0) {
                return Err(EdfError::Invalid(format!("annotation duration {d} is invalid")));
            }
            r.push(TAL_DURATION);
            r.extend_from_slice(d.to_string().as_bytes());
        }
        r.push(TAL_SEP);
        r.extend_from_slice(a.text.as_bytes());
        r.extend_from_slice(&[TAL_SEP, 0]);
    }
    Ok(records)
}

fn format_date(start: &NaiveDateTime) -> Result<(String, String), EdfError> {
    let y = start.year();
    if !(1985..=2084).contains(&y) {
        return Err(EdfError::Invalid(format!("start year {y} not representable as EDF yy (1985–2084)")));
    }
    Ok((
        format!("{:02}.{:02}.{:02}", start.day(), start.month(), y % 100),
        format!("{:02}.{:02}.{:02}", start.hour(), start.minute(), start.second()),
    ))
}

/// Encodes a recording. Physical samples are quantised with the channel
/// calibration; values outside the declared range are an error.
pub fn serialize_edf(rec: &EdfRecording) -> Result<Vec<u8>, EdfError> {
    rec.validate()?;
    if rec.header.variant == EdfVariant::Edf && !rec.annotations.is_empty() {
        return Err(EdfError::Invalid("plain EDF cannot carry annotations; use EDF+".into()));
    }
    if rec.header.start.nanosecond() != 0 {
        return Err(EdfError::Invalid("start time has sub-second precision".into()));
    }

    let tals = match rec.header.variant {
        EdfVariant::EdfPlusContinuous => Some(build_tals(rec)?),
        EdfVariant::Edf => None,
    };
    let mut signals: Vec<SignalHeader> = rec
        .channels
        .iter()
        .map(|c| SignalHeader {
            label: &c.label,
            transducer: &c.transducer,
            dimension: &c.physical_dimension,
            physical_min: c.physical_min,
            physical_max: c.physical_max,
            digital_min: c.digital_min,
            digital_max: c.digital_max,
            prefilter: &c.prefilter,
            samples_per_record: c.samples_per_record,
        })
        .collect();
    let tal_spr = tals
        .as_ref()
        .map(|t| t.iter().map(Vec::len).max().unwrap_or(2).div_ceil(2).max(1));
    if let Some(spr) = tal_spr {
        signals.push(SignalHeader {
            label: ANNOTATION_LABEL,
            transducer: "",
            dimension: "",
            physical_min: -1.0,
            physical_max: 1.0,
            digital_min: -32768,
            digital_max: 32767,
            prefilter: "",
            samples_per_record: spr,
        });
    }
    let ns = signals.len();

    let mut out = Vec::with_capacity(HEADER_LEN * (ns + 1));
    put_text(&mut out, "version", "0", 8)?;
    put_text(&mut out, "patient id", &rec.header.patient_id, 80)?;
    put_text(&mut out, "recording id", &rec.header.recording_id, 80)?;
    let (date, time) = format_date(&rec.header.start)?;
    put_text(&mut out, "start date", &date, 8)?;
    put_text(&mut out, "start time", &time, 8)?;
    put_number(&mut out, "header bytes", HEADER_LEN * (ns + 1), 8)?;
    let reserved = match rec.header.variant {
        EdfVariant::Edf => "",
        EdfVariant::EdfPlusContinuous => "EDF+C",
    };
    put_text(&mut out, "reserved", reserved, 44)?;
    put_number(&mut out, "number of data records", rec.header.record_count, 8)?;
    put_number(&mut out, "record duration", rec.header.record_duration, 8)?;
    put_number(&mut out, "number of signals", ns, 4)?;
    for s in &signals {
        put_text(&mut out, "label", s.label, 16)?;
    }
    for s in &signals {
        put_text(&mut out, "transducer", s.transducer, 80)?;
    }
    for s in &signals {
        put_text(&mut out, "physical dimension", s.dimension, 8)?;
    }
    for s in &signals {
        put_number(&mut out, "physical min", s.physical_min, 8)?;
    }
    for s in &signals {
        put_number(&mut out, "physical max", s.physical_max, 8)?;
    }
    for s in &signals {
        put_number(&mut out, "digital min", s.digital_min, 8)?;
    }
    for s in &signals {
        put_number(&mut out, "digital max", s.digital_max, 8)?;
    }
    for s in &signals {
        put_text(&mut out, "prefilter", s.prefilter, 80)?;
    }
    for s in &signals {
        put_number(&mut out, "samples per record", s.samples_per_record, 8)?;
    }
    for _ in &signals {
        put_text(&mut out, "signal reserved", "", 32)?;
    }
    debug_assert_eq!(out.len(), HEADER_LEN * (ns + 1));

    // quantise everything first so a range error leaves no partial output
    let mut digital: Vec<Vec<i16>> = Vec::with_capacity(rec.channels.len());
    for (ci, ch) in rec.channels.iter().enumerate() {
        let mut d = Vec::with_capacity(ch.samples.len());
        for (i, &p) in ch.samples.iter().enumerate() {
            d.push(ch.to_digital(p).ok_or(EdfError::Range {
                channel: ci,
                index: i,
                value: p,
                min: ch.physical_min.min(ch.physical_max),
                max: ch.physical_min.max(ch.physical_max),
            })?);
        }
        digital.push(d);
    }

    for r in 0..rec.header.record_count {
        for (ch, d) in rec.channels.iter().zip(&digital) {
            let spr = ch.samples_per_record;
            for v in &d[r * spr..(r + 1) * spr] {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        if let (Some(tals), Some(spr)) = (&tals, tal_spr) {
            let t = &tals[r];
            out.extend_from_slice(t);
            out.extend(std::iter::repeat_n(0u8, spr * 2 - t.len()));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn start() -> NaiveDateTime {
        NaiveDate::from_ymd_opt(2009, 8, 12)
            .unwrap()
            .and_hms_opt(16, 15, 0)
            .unwrap()
    }

    fn identity_channel(label: &str, samples: Vec<f64>, spr: usize) -> EdfChannel {
        EdfChannel {
            label: label.into(),
            transducer: String::new(),
            physical_dimension: "uV".into(),
            physical_min: -32768.0,
            physical_max: 32767.0,
            digital_min: -32768,
            digital_max: 32767,
            prefilter: String::new(),
            samples_per_record: spr,
            samples,
        }
    }

    /// Hand-assembled single-channel file: 1 record of 4 samples.
    fn minimal_file() -> Vec<u8> {
        let mut b = Vec::new();
        let mut f = |s: &str, w: usize| {
            let mut v = s.as_bytes().to_vec();
            v.resize(w, b' ');
            b.extend(v);
        };
        f("0", 8);
        f("X", 80);
        f("Startdate X", 80);
        f("12.08.09", 8);
        f("16.15.00", 8);
        f("512", 8);
        f("", 44);
        f("1", 8);
        f("1", 8);
        f("1", 4);
        f("Fc5.", 16);
        f("", 80);
        f("uV", 8);
        f("-32768", 8);
        f("32767", 8);
        f("-32768", 8);
        f("32767", 8);
        f("", 80);
        f("4", 8);
        f("", 32);
        for v in [1i16, -2, 300, -32768] {
            b.extend_from_slice(&v.to_le_bytes());
        }
        b
    }

    #[test]
    fn minimal_identity_file() {
        let rec = parse_edf(&minimal_file()).unwrap();
        assert_eq!(rec.header.variant, EdfVariant::Edf);
        assert_eq!(rec.header.start, start());
        assert_eq!(rec.channel_count(), 1);
        assert_eq!(rec.channels[0].label, "Fc5.");
        assert_eq!(rec.channels[0].samples, vec![1.0, -2.0, 300.0, -32768.0]);
        assert!(rec.annotations.is_empty());
        // our own writer reproduces the hand-built bytes exactly
        assert_eq!(serialize_edf(&rec).unwrap(), minimal_file());
    }

    #[test]
    fn truncated_data_names_lengths() {
        let mut b = minimal_file();
        b.pop();
        assert_eq!(
            parse_edf(&b).unwrap_err(),
            EdfError::Truncated { expected: 520, actual: 519 }
        );
        b.extend([0, 0, 0]);
        assert!(matches!(parse_edf(&b), Err(EdfError::TrailingData { .. })));
    }

    #[test]
    fn non_numeric_count_reports_offset() {
        let mut b = minimal_file();
        b[236..244].copy_from_slice(b"abc     ");
        match parse_edf(&b).unwrap_err() {
            EdfError::Field { offset, field, .. } => {
                assert_eq!(offset, 236);
                assert_eq!(field, "number of data records");
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn unsupported_variants() {
        let mut b = minimal_file();
        b[192..197].copy_from_slice(b"EDF+D");
        assert!(matches!(parse_edf(&b), Err(EdfError::Unsupported(_))));
        let mut b = minimal_file();
        b[0] = 0xff;
        assert!(matches!(parse_edf(&b), Err(EdfError::Unsupported(_))));
        let mut b = minimal_file();
        b[236..244].copy_from_slice(b"-1      ");
        assert!(matches!(parse_edf(&b), Err(EdfError::Unsupported(_))));
    }

    #[test]
    fn bad_header_byte_count() {
        let mut b = minimal_file();
        b[184..192].copy_from_slice(b"768     ");
        assert!(matches!(parse_edf(&b), Err(EdfError::Field { offset: 184, .. })));
    }

    #[test]
    fn inverted_digital_range_rejected() {
        let mut b = minimal_file();
        // digital min field of signal 0 sits after label/transducer/dim/pmin/pmax
        let at = 256 + 16 + 80 + 8 + 8 + 8;
        b[at..at + 8].copy_from_slice(b"32767   ");
        assert!(matches!(parse_edf(&b), Err(EdfError::Invalid(_))));
    }

    #[test]
    fn plain_edf_declares_no_annotation_signal() {
        let rec = EdfRecording {
            header: EdfHeader {
                variant: EdfVariant::Edf,
                patient_id: "P".into(),
                recording_id: "R".into(),
                start: start(),
                record_count: 2,
                record_duration: 0.5,
            },
            channels: vec![identity_channel("C3", vec![0.0, 1.0, 2.0, 3.0], 2)],
            annotations: vec![],
        };
        let bytes = serialize_edf(&rec).unwrap();
        assert_eq!(&bytes[252..256], b"1   ");
        assert_eq!(parse_edf(&bytes).unwrap(), rec);
    }

    #[test]
    fn annotations_round_trip() {
        let rec = EdfRecording {
            header: EdfHeader {
                variant: EdfVariant::EdfPlusContinuous,
                patient_id: "X X X X".into(),
                recording_id: "Startdate 12-AUG-2009 X X X".into(),
                start: start(),
                record_count: 3,
                record_duration: 1.0,
            },
            channels: vec![identity_channel("Cz", (0..12).map(f64::from).collect(), 4)],
            annotations: vec![
                Annotation { onset: 0.0, duration: Some(1.5), text: "T0".into() },
                Annotation { onset: 1.5, duration: Some(0.25), text: "T2".into() },
                Annotation { onset: 2.75, duration: None, text: "marker".into() },
            ],
        };
        let bytes = serialize_edf(&rec).unwrap();
        let back = parse_edf(&bytes).unwrap();
        assert_eq!(back, rec);
    }

    #[test]
    fn out_of_range_physical_value() {
        let mut ch = identity_channel("C3", vec![0.0, 1.0], 2);
        ch.physical_min = -10.0;
        ch.physical_max = 10.0;
        ch.samples[1] = 10.5;
        let rec = EdfRecording {
            header: EdfHeader {
                variant: EdfVariant::Edf,
                patient_id: String::new(),
                recording_id: String::new(),
                start: start(),
                record_count: 1,
                record_duration: 1.0,
            },
            channels: vec![ch],
            annotations: vec![],
        };
        assert!(matches!(serialize_edf(&rec), Err(EdfError::Range { channel: 0, index: 1, .. })));
    }

    #[test]
    fn plain_edf_refuses_annotations() {
        let rec = EdfRecording {
            header: EdfHeader {
                variant: EdfVariant::Edf,
                patient_id: String::new(),
                recording_id: String::new(),
                start: start(),
                record_count: 1,
                record_duration: 1.0,
            },
            channels: vec![identity_channel("C3", vec![0.0], 1)],
            annotations: vec![Annotation { onset: 0.0, duration: None, text: "T1".into() }],
        };
        assert!(serialize_edf(&rec).is_err());
    }
}
