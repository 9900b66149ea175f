//! Labelled EEG samples: extraction from annotated recordings, the
//! train/test split driven by the batch count, and the CSV table format
//! used to exchange datasets between subcommands.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::edf::EdfRecording;

/// EEG channels per sample.
pub const CHANNELS: usize = 64;
/// Number of intent classes.
pub const CLASSES: usize = 5;
/// Samples kept per subject.
pub const SAMPLES_PER_SUBJECT: usize = 28_000;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("label mapping: {0}")]
    Config(String),
    #[error("cannot split {total} samples into {parts} equal parts (n_b = {n_b}); the total must be divisible by {parts}")]
    Split { total: usize, n_b: usize, parts: usize },
    #[error("label {0} outside 1..=5")]
    Label(i64),
    #[error("table line {line}: {reason}")]
    Table { line: usize, reason: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Intent class, 1 through 5 (eyes closed, left fist, right fist, both
/// fists, both feet).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct IntentLabel(u8);

impl IntentLabel {
    pub fn new(label: u8) -> Result<Self, DatasetError> {
        if (1..=CLASSES as u8).contains(&label) {
            Ok(Self(label))
        } else {
            Err(DatasetError::Label(i64::from(label)))
        }
    }

    /// From a zero-based class index.
    pub fn from_index(index: usize) -> Result<Self, DatasetError> {
        if index < CLASSES {
            Ok(Self(index as u8 + 1))
        } else {
            Err(DatasetError::Label(index as i64 + 1))
        }
    }

    pub fn get(self) -> u8 {
        self.0
    }

    /// Zero-based class index.
    pub fn index(self) -> usize {
        usize::from(self.0 - 1)
    }

    pub fn all() -> impl Iterator<Item = IntentLabel> {
        (1..=CLASSES as u8).map(IntentLabel)
    }
}

impl TryFrom<u8> for IntentLabel {
    type Error = DatasetError;
    fn try_from(v: u8) -> Result<Self, Self::Error> {
        Self::new(v)
    }
}

impl From<IntentLabel> for u8 {
    fn from(l: IntentLabel) -> u8 {
        l.0
    }
}

impl fmt::Display for IntentLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// One 64-channel reading (µV) and its intent.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub features: [f64; CHANNELS],
    pub label: IntentLabel,
}

impl LabeledSample {
    pub fn new(features: &[f64], label: IntentLabel) -> Result<Self, DatasetError> {
        let features: [f64; CHANNELS] = features.try_into().map_err(|_| {
            DatasetError::Shape(format!("expected {CHANNELS} features, got {}", features.len()))
        })?;
        Ok(Self { features, label })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelRule {
    pub runs: Vec<u32>,
    pub annotation: String,
    pub label: IntentLabel,
}

/// Which (run, annotation code) pairs become which intent. Unmatched
/// annotations are skipped.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMapping {
    #[serde(rename = "rule")]
    pub rules: Vec<LabelRule>,
}

impl Default for LabelMapping {
    /// Motor movement/imagery database layout: run 2 is the eyes-closed
    /// baseline (`T0`); runs 4, 8, 12 are left/right fist imagery; runs 6,
    /// 10, 14 are both-fists/both-feet imagery.
    fn default() -> Self {
        let rule = |runs: &[u32], annotation: &str, label: u8| LabelRule {
            runs: runs.to_vec(),
            annotation: annotation.to_string(),
            label: IntentLabel(label),
        };
        Self {
            rules: vec![
                rule(&[2], "T0", 1),
                rule(&[4, 8, 12], "T1", 2),
                rule(&[4, 8, 12], "T2", 3),
                rule(&[6, 10, 14], "T1", 4),
                rule(&[6, 10, 14], "T2", 5),
            ],
        }
    }
}

impl LabelMapping {
    pub fn from_toml(text: &str) -> Result<Self, DatasetError> {
        let m: Self = toml::from_str(text).map_err(|e| DatasetError::Config(e.to_string()))?;
        m.validate()?;
        Ok(m)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("mapping serialises")
    }

    /// Rejects rule sets that send one (run, code) pair to two labels.
    pub fn validate(&self) -> Result<(), DatasetError> {
        let mut seen: BTreeMap<(u32, &str), IntentLabel> = BTreeMap::new();
        for r in &self.rules {
            for &run in &r.runs {
                if let Some(&prev) = seen.get(&(run, r.annotation.as_str())) {
                    if prev != r.label {
                        return Err(DatasetError::Config(format!(
                            "run {run} annotation `{}` maps to both {prev} and {}",
                            r.annotation, r.label
                        )));
                    }
                }
                seen.insert((run, r.annotation.as_str()), r.label);
            }
        }
        Ok(())
    }

    pub fn lookup(&self, run: u32, annotation: &str) -> Option<IntentLabel> {
        self.rules
            .iter()
            .find(|r| r.annotation == annotation && r.runs.contains(&run))
            .map(|r| r.label)
    }

    /// Every run number mentioned by some rule, ascending.
    pub fn runs(&self) -> Vec<u32> {
        let mut runs: Vec<u32> = self.rules.iter().flat_map(|r| r.runs.iter().copied()).collect();
        runs.sort_unstable();
        runs.dedup();
        runs
    }
}

// A time point i belongs to a window when onset <= i/fs < onset + duration.
// The epsilon absorbs decimal onsets such as 4.2 s that are not exact in
// binary.
const WINDOW_EPS: f64 = 1e-9;

fn first_index_at_or_after(seconds: f64, fs: f64) -> usize {
    (seconds * fs - WINDOW_EPS).ceil().max(0.0) as usize
}

/// Turns every time point inside a mapped annotation window into one
/// sample, in recording order. Overlapping windows never emit a time point
/// twice; the earlier annotation wins.
pub fn label_samples(
    recording: &EdfRecording,
    run: u32,
    mapping: &LabelMapping,
) -> Result<Vec<LabeledSample>, DatasetError> {
    mapping.validate()?;
    if recording.channels.len() < CHANNELS {
        return Err(DatasetError::Shape(format!(
            "recording has {} channels, at least {CHANNELS} are required",
            recording.channels.len()
        )));
    }
    let eeg = &recording.channels[..CHANNELS];
    let spr = eeg[0].samples_per_record;
    if let Some(c) = eeg.iter().find(|c| c.samples_per_record != spr) {
        return Err(DatasetError::Shape(format!(
            "channel {} samples at a different rate ({} vs {spr} per record)",
            c.label, c.samples_per_record
        )));
    }
    let fs = eeg[0].sample_rate(recording.header.record_duration);
    let len = eeg[0].samples.len();

    let mut out = Vec::new();
    let mut cursor = 0usize;
    for a in &recording.annotations {
        let Some(label) = mapping.lookup(run, &a.text) else {
            continue;
        };
        let start = first_index_at_or_after(a.onset, fs).max(cursor).min(len);
        let end = first_index_at_or_after(a.onset + a.duration.unwrap_or(0.0), fs).min(len);
        for t in start..end {
            let mut features = [0.0; CHANNELS];
            for (f, ch) in features.iter_mut().zip(eeg) {
                *f = ch.samples[t];
            }
            out.push(LabeledSample { features, label });
        }
        cursor = cursor.max(end);
    }
    Ok(out)
}

/// Concatenates the labelled samples of one subject's runs (in the order
/// given) and keeps the first `limit` of them.
pub fn assemble_subject(
    runs: &[(u32, EdfRecording)],
    mapping: &LabelMapping,
    limit: Option<usize>,
) -> Result<Vec<LabeledSample>, DatasetError> {
    let mut all = Vec::new();
    for (run, rec) in runs {
        all.extend(label_samples(rec, *run, mapping)?);
        if limit.is_some_and(|l| all.len() >= l) {
            break;
        }
    }
    if let Some(limit) = limit {
        if all.len() < limit {
            return Err(DatasetError::Shape(format!(
                "only {} labelled samples available, {limit} requested",
                all.len()
            )));
        }
        all.truncate(limit);
    }
    Ok(all)
}

/// Per-subject train/test partition. The training part is `n_b`
/// consecutive batches of `batch_size` samples; the test part is one more.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<LabeledSample>,
    pub test: Vec<LabeledSample>,
    pub n_b: usize,
    pub batch_size: usize,
}

impl DatasetSplit {
    pub fn batches(&self) -> std::slice::Chunks<'_, LabeledSample> {
        self.train.chunks(self.batch_size)
    }
}

fn check_split(total: usize, n_b: usize) -> Result<usize, DatasetError> {
    let parts = n_b + 1;
    if n_b == 0 || total == 0 || !total.is_multiple_of(parts) {
        return Err(DatasetError::Split { total, n_b, parts });
    }
    Ok(total / parts)
}

/// Contiguous split: the first `n_b/(n_b+1)` of the samples train, the rest
/// test. Order is preserved.
pub fn split(samples: &[LabeledSample], n_b: usize) -> Result<DatasetSplit, DatasetError> {
    let batch_size = check_split(samples.len(), n_b)?;
    let cut = n_b * batch_size;
    Ok(DatasetSplit {
        train: samples[..cut].to_vec(),
        test: samples[cut..].to_vec(),
        n_b,
        batch_size,
    })
}

/// Like [`split`], but the samples are first permuted with a seeded
/// generator. Breaks temporal order; meant for sensitivity studies only.
pub fn split_shuffled(samples: &[LabeledSample], n_b: usize, seed: u64) -> Result<DatasetSplit, DatasetError> {
    check_split(samples.len(), n_b)?;
    let mut shuffled = samples.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    split(&shuffled, n_b)
}

/// Per-channel `(mean, std)` statistics.
pub type ChannelStats = Vec<(f64, f64)>;

/// Standardises each channel in place to zero mean and unit variance.
/// Channels with zero variance are only centred.
pub fn zscore_per_channel(samples: &mut [LabeledSample]) -> ChannelStats {
    let n = samples.len().max(1) as f64;
    let mut stats = Vec::with_capacity(CHANNELS);
    for ch in 0..CHANNELS {
        let mean = samples.iter().map(|s| s.features[ch]).sum::<f64>() / n;
        let var = samples.iter().map(|s| (s.features[ch] - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        for s in samples.iter_mut() {
            s.features[ch] -= mean;
            if std > 0.0 {
                s.features[ch] /= std;
            }
        }
        stats.push((mean, std));
    }
    stats
}

// --- table format --------------------------------------------------------

pub fn table_header() -> Vec<String> {
    (1..=CHANNELS).map(|i| format!("ch{i}")).chain(["label".to_string()]).collect()
}

/// Writes `ch1,…,ch64,label` rows. Values use the shortest decimal
/// representation that reads back to the identical `f64`.
pub fn write_table<W: Write>(samples: &[LabeledSample], out: W) -> Result<(), DatasetError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(table_header())?;
    let mut row: Vec<String> = Vec::with_capacity(CHANNELS + 1);
    for s in samples {
        row.clear();
        row.extend(s.features.iter().map(|v| v.to_string()));
        row.push(s.label.to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_table<R: Read>(input: R) -> Result<Vec<LabeledSample>, DatasetError> {
    let mut r = csv::Reader::from_reader(input);
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != table_header() {
        return Err(DatasetError::Table {
            line: 1,
            reason: format!("expected header ch1..ch{CHANNELS},label ({} columns)", CHANNELS + 1),
        });
    }
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        let bad = |reason: String| DatasetError::Table { line, reason };
        if rec.len() != CHANNELS + 1 {
            return Err(bad(format!("{} columns", rec.len())));
        }
        let mut features = [0.0f64; CHANNELS];
        for (f, field) in features.iter_mut().zip(rec.iter()) {
            *f = field.trim().parse().map_err(|_| bad(format!("`{field}` is not a number")))?;
            if !f.is_finite() {
                return Err(bad(format!("non-finite value `{field}`")));
            }
        }
        let label: u8 = rec[CHANNELS]
            .trim()
            .parse()
            .map_err(|_| bad(format!("label `{}` is not an integer", &rec[CHANNELS])))?;
        let label = IntentLabel::new(label).map_err(|e| bad(e.to_string()))?;
        out.push(LabeledSample { features, label });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::edf::{Annotation, EdfChannel, EdfHeader, EdfVariant};

    fn sample(v: f64, label: u8) -> LabeledSample {
        LabeledSample {
            features: [v; CHANNELS],
            label: IntentLabel::new(label).unwrap(),
        }
    }

    fn recording(channels: usize, len: usize, annotations: Vec<Annotation>) -> EdfRecording {
        EdfRecording {
            header: EdfHeader {
                variant: EdfVariant::EdfPlusContinuous,
                patient_id: String::new(),
                recording_id: String::new(),
                start: chrono::NaiveDate::from_ymd_opt(2009, 1, 1).unwrap().and_hms_opt(0, 0, 0).unwrap(),
                record_count: 1,
                record_duration: len as f64 / 16.0,
            },
            channels: (0..channels)
                .map(|c| EdfChannel {
                    label: format!("C{c}"),
                    transducer: String::new(),
                    physical_dimension: "uV".into(),
                    physical_min: -100.0,
                    physical_max: 100.0,
                    digital_min: -32768,
                    digital_max: 32767,
                    prefilter: String::new(),
                    samples_per_record: len,
                    samples: (0..len).map(|t| (t * 100 + c) as f64).collect(),
                })
                .collect(),
            annotations,
        }
    }

    #[test]
    fn single_window() {
        // 16 Hz, 10 samples = 0.625 s
        let rec = recording(64, 32, vec![Annotation { onset: 0.0, duration: Some(0.625), text: "T1".into() }]);
        let s = label_samples(&rec, 4, &LabelMapping::default()).unwrap();
        assert_eq!(s.len(), 10);
        assert!(s.iter().all(|x| x.label.get() == 2));
        assert_eq!(s[3].features[5], 305.0);
    }

    #[test]
    fn too_few_channels() {
        let rec = recording(63, 8, vec![]);
        assert!(matches!(label_samples(&rec, 4, &LabelMapping::default()), Err(DatasetError::Shape(_))));
    }

    #[test]
    fn ambiguous_mapping_rejected() {
        let mut m = LabelMapping::default();
        m.rules.push(LabelRule { runs: vec![4], annotation: "T1".into(), label: IntentLabel::new(5).unwrap() });
        assert!(matches!(m.validate(), Err(DatasetError::Config(_))));
        let rec = recording(64, 8, vec![]);
        assert!(label_samples(&rec, 4, &m).is_err());
    }

    #[test]
    fn unmatched_runs_are_skipped() {
        let rec = recording(64, 32, vec![Annotation { onset: 0.0, duration: Some(1.0), text: "T1".into() }]);
        assert!(label_samples(&rec, 3, &LabelMapping::default()).unwrap().is_empty());
    }

    #[test]
    fn mapping_toml_round_trip() {
        let m = LabelMapping::default();
        let text = m.to_toml();
        assert_eq!(LabelMapping::from_toml(&text).unwrap(), m);
        assert!(LabelMapping::from_toml("[[rule]]\nruns=[1]\nannotation=\"T0\"\nlabel=9\n").is_err());
    }

    #[test]
    fn split_counts() {
        let data: Vec<_> = (0..28).map(|i| sample(i as f64, 1)).collect();
        let s = split(&data, 13).unwrap();
        assert_eq!((s.train.len(), s.test.len(), s.batch_size), (26, 2, 2));
        assert_eq!(s.batches().count(), 13);
        let err = split(&data[..27], 3).unwrap_err().to_string();
        assert!(err.contains("divisible by 4"), "{err}");
        assert!(split(&data, 0).is_err());
    }

    #[test]
    fn shuffled_split_is_seeded() {
        let data: Vec<_> = (0..40).map(|i| sample(i as f64, 1)).collect();
        let a = split_shuffled(&data, 3, 9).unwrap();
        let b = split_shuffled(&data, 3, 9).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.train, split(&data, 3).unwrap().train);
    }

    #[test]
    fn zscore_standardises() {
        let mut data: Vec<_> = (0..10).map(|i| sample(i as f64, 1)).collect();
        let stats = zscore_per_channel(&mut data);
        assert!((stats[0].0 - 4.5).abs() < 1e-12);
        let mean: f64 = data.iter().map(|s| s.features[7]).sum::<f64>() / 10.0;
        let var: f64 = data.iter().map(|s| s.features[7].powi(2)).sum::<f64>() / 10.0;
        assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-12);
    }

    #[test]
    fn table_round_trip_and_errors() {
        let mut a = sample(0.0, 3);
        a.features[0] = -123.456789012345;
        a.features[63] = 1e-7;
        let data = vec![a, sample(2.5, 5)];
        let mut buf = Vec::new();
        write_table(&data, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("ch1,ch2,"));
        assert!(text.lines().next().unwrap().ends_with("ch64,label"));
        assert_eq!(read_table(&buf[..]).unwrap(), data);

        let bad = text.replacen(",3\n", ",7\n", 1);
        assert!(matches!(read_table(bad.as_bytes()), Err(DatasetError::Table { line: 2, .. })));
    }
}
