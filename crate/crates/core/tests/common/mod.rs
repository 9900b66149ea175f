//! Fixtures shared by several test targets.
#![allow(dead_code)]

use chrono::NaiveDate;
use mindctl::dataset::{split, IntentLabel, LabeledSample, CHANNELS};
use mindctl::edf::{Annotation, EdfChannel, EdfHeader, EdfRecording, EdfVariant};
use mindctl::model::{build, train, HyperParams, ModelParams, TrainingSchedule};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// The intent table: label, robot action, appliance action.
pub const INTENT_TABLE: [(i64, &str, &str); 5] = [
    (1, "Walk Ahead", "Turn on Blue LEDs"),
    (2, "Turn Left", "Turn on White LED"),
    (3, "Turn Right", "Turn on Yellow LED"),
    (4, "Grasp", "Turn on Red LED"),
    (5, "Unloose", "Turn on All LEDs"),
];

/// Five well-separated classes; each class owns a channel and arrives in
/// runs of eight samples.
pub fn five_class_data(n: usize, seed: u64) -> Vec<LabeledSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let c = (i / 8) % 5;
            let mut f = [0.0; CHANNELS];
            for v in f.iter_mut() {
                *v = rng.random_range(-0.1..0.1);
            }
            f[c * 3] += 2.0;
            LabeledSample::new(&f, IntentLabel::from_index(c).unwrap()).unwrap()
        })
        .collect()
}

/// A small model trained on [`five_class_data`].
pub fn five_class_model() -> ModelParams {
    let hp = HyperParams { lambda: 0.0, lr: 0.02, width: 8, layers: 5, n_b: 1 };
    let data = five_class_data(400, 1);
    let schedule = TrainingSchedule { max_epochs: 60, patience: 60, bptt_window: 40, ..TrainingSchedule::default() };
    train(build(&hp, 3).unwrap(), &[split(&data, 1).unwrap()], hp.lambda, hp.lr, &schedule).unwrap().model
}

fn channel() -> impl Strategy<Value = (String, i32, i32, i32, i32, usize)> {
    (
        "[A-Za-z][A-Za-z0-9.]{0,14}",
        -3000i32..0,
        1i32..3000,
        -32768i32..0,
        1i32..32768,
        1usize..6,
    )
}

prop_compose! {
    /// Recordings whose samples sit exactly on the digital grid, so a
    /// write/read cycle must reproduce them bit for bit.
    pub fn recording()(
        plus in any::<bool>(),
        patient in "[A-Za-z0-9_]{0,30}",
        recording_id in "[A-Za-z0-9_]{0,30}",
        year in 1985i32..2085,
        day in 1u32..29,
        month in 1u32..13,
        secs in 0u32..86400,
        record_count in 1usize..5,
        duration in prop::sample::select(vec![0.5, 1.0, 2.0, 4.0]),
        specs in prop::collection::vec(channel(), 1..4),
        seed in any::<u64>(),
        notes in prop::collection::vec(
            (0u32..100, prop::option::of(0u32..20), "[A-Z][0-9]{1,2}"),
            0..5,
        ),
    ) -> EdfRecording {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let channels = specs
            .into_iter()
            .map(|(label, pmin, pmax, dmin, dmax, spr)| {
                let mut ch = EdfChannel {
                    label,
                    transducer: "AgAgCl electrode".into(),
                    physical_dimension: "uV".into(),
                    physical_min: pmin as f64,
                    physical_max: pmax as f64,
                    digital_min: dmin,
                    digital_max: dmax,
                    prefilter: "HP:0.1Hz".into(),
                    samples_per_record: spr,
                    samples: Vec::new(),
                };
                ch.samples = (0..record_count * spr)
                    .map(|_| ch.to_physical(rng.random_range(dmin..=dmax) as i16))
                    .collect();
                ch
            })
            .collect();
        let total = record_count as f64 * duration;
        let mut annotations: Vec<Annotation> = if plus {
            notes
                .into_iter()
                .map(|(q, d, text)| Annotation {
                    onset: (q as f64 / 100.0 * total / 0.25).floor() * 0.25,
                    duration: d.map(|d| d as f64 * 0.5),
                    text,
                })
                .collect()
        } else {
            Vec::new()
        };
        annotations.sort_by(|a, b| a.onset.total_cmp(&b.onset));
        EdfRecording {
            header: EdfHeader {
                variant: if plus { EdfVariant::EdfPlusContinuous } else { EdfVariant::Edf },
                patient_id: patient,
                recording_id,
                start: NaiveDate::from_ymd_opt(year, month, day)
                    .unwrap()
                    .and_hms_opt(secs / 3600, secs / 60 % 60, secs % 60)
                    .unwrap(),
                record_count,
                record_duration: duration,
            },
            channels,
            annotations,
        }
    }
}

prop_compose! {
    /// Built models with perturbed weights and arbitrary training metadata.
    pub fn model_case()(
        lambda in 0.0f64..0.1,
        lr in 1e-4f64..0.1,
        width in 1usize..7,
        layers in 4usize..8,
        n_b in 1usize..14,
        seed in any::<u64>(),
        epochs in 0usize..400,
        final_loss in prop::option::of(0.0f64..10.0),
        accuracy in prop::option::of(0.0f64..=1.0),
        jitter in any::<u64>(),
    ) -> ModelParams {
        let mut m = build(&HyperParams { lambda, lr, width, layers, n_b }, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(jitter);
        for block in m.network.blocks_mut() {
            for v in block.iter_mut() {
                *v += rng.random_range(-1e3..1e3) * rng.random::<f64>().powi(8);
            }
        }
        m.meta.epochs_run = epochs;
        m.meta.final_loss = final_loss;
        m.meta.test_accuracy = accuracy;
        m
    }
}

/// Every parameter of `m` as raw bits.
pub fn parameter_bits(m: &ModelParams) -> Vec<u64> {
    m.network.blocks().iter().flat_map(|b| b.values.iter().map(|v| v.to_bits()).collect::<Vec<_>>()).collect()
}
