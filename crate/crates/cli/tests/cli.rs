use std::fs::{self, File};
use std::io::{BufRead, BufReader, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use chrono::NaiveDate;
use mindctl::dataset::{write_table, IntentLabel, LabeledSample, CHANNELS};
use mindctl::edf::{serialize_edf, Annotation, EdfChannel, EdfHeader, EdfRecording, EdfVariant};
use tempfile::TempDir;

fn mindctl() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_mindctl"));
    c.env_remove("MINDCTL_OUT").env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    mindctl().args(args).output().expect("spawn mindctl")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn rows(path: &Path) -> usize {
    fs::read_to_string(path).unwrap().lines().count() - 1
}

/// `n` samples in runs of ten, two separable classes.
fn table(dir: &Path, name: &str, n: usize) -> PathBuf {
    let samples: Vec<LabeledSample> = (0..n)
        .map(|i| {
            let c = (i / 10) % 2;
            let mut f = [0.0; CHANNELS];
            f[0] = if c == 0 { 1.0 } else { -1.0 };
            f[1] = (i % 7) as f64 / 7.0;
            LabeledSample::new(&f, IntentLabel::from_index(c).unwrap()).unwrap()
        })
        .collect();
    let path = dir.join(name);
    write_table(&samples, File::create(&path).unwrap()).unwrap();
    path
}

/// Trains a small model into `out` and returns the checkpoint path.
fn small_model(data: &Path, out: &Path, seed: &str) -> PathBuf {
    ok(&[
        "--out", s(out), "train", "--data", s(data), "--width", "4", "--layers", "5", "--n-b", "1", "--seed", seed,
        "--epochs", "3", "--bptt", "20",
    ]);
    out.join("model.mctl")
}

#[test]
fn tune_on_stub_accuracies_picks_expected_levels() {
    let dir = TempDir::new().unwrap();
    let acc = [
        0.689, 0.91, 0.893, 0.667, 0.925, 0.717, 0.848, 0.77, 0.926, 0.826, 0.322, 0.367, 0.93, 0.422, 0.684, 0.404,
    ];
    let stub = dir.path().join("stub.csv");
    let mut f = File::create(&stub).unwrap();
    writeln!(f, "run,accuracy").unwrap();
    for (i, a) in acc.iter().enumerate() {
        writeln!(f, "{},{a}", i + 1).unwrap();
    }
    drop(f);
    let out = dir.path().join("out");
    ok(&["--out", s(&out), "tune", "--stub-accuracies", s(&stub)]);

    let text = fs::read_to_string(out.join("analysis.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("factor,R1,R2,R3,R4,range,best_level,best_value"));
    let best: Vec<(String, f64)> = lines
        .map(|l| {
            let cells: Vec<&str> = l.split(',').collect();
            (cells[0].to_string(), cells[7].parse().unwrap())
        })
        .collect();
    let want = [("lambda", 0.004), ("lr", 0.005), ("width", 64.0), ("layers", 7.0), ("n_b", 3.0)];
    assert_eq!(best, want.map(|(n, v)| (n.to_string(), v)));
    assert_eq!(rows(&out.join("tune_results.csv")), 16);
    assert!(fs::read_to_string(out.join("run.toml")).unwrap().contains("command = \"tune\""));
}

#[test]
fn split_of_28000_rows_with_three_batches() {
    let dir = TempDir::new().unwrap();
    let data = table(dir.path(), "all.csv", 28_000);
    let out = dir.path().join("out");
    ok(&["--out", s(&out), "split", "--data", s(&data), "--n-b", "3"]);
    assert_eq!(rows(&out.join("train.csv")), 21_000);
    assert_eq!(rows(&out.join("test.csv")), 7_000);
    // The input is left alone.
    assert_eq!(rows(&data), 28_000);
}

#[test]
fn seeded_training_is_byte_identical_and_config_replays() {
    let dir = TempDir::new().unwrap();
    let data = table(dir.path(), "s1.csv", 200);
    let a = small_model(&data, &dir.path().join("a"), "7");
    let b = small_model(&data, &dir.path().join("b"), "7");
    let c = small_model(&data, &dir.path().join("c"), "8");
    let bytes = fs::read(&a).unwrap();
    assert_eq!(bytes, fs::read(&b).unwrap());
    assert_ne!(bytes, fs::read(&c).unwrap());
    assert_eq!(rows(&dir.path().join("a/history.csv")), 4);

    let cfg = dir.path().join("a/run.toml");
    let text = fs::read_to_string(&cfg).unwrap();
    assert!(text.contains("seed = 7"), "{text}");
    let again = dir.path().join("again");
    ok(&["--out", s(&again), "train", "--config", s(&cfg)]);
    assert_eq!(fs::read(again.join("model.mctl")).unwrap(), bytes);
}

#[test]
fn usage_errors_exit_2() {
    for (args, usage) in [
        (vec!["frobnicate"], true),
        (vec!["split", "--bogus"], true),
        (vec!["split", "--data", "x.csv"], true),
        (vec!["replay", "--checkpoint", "m", "--data", "d", "--profile", "toaster"], false),
    ] {
        let out = run(&args);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
        let err = String::from_utf8_lossy(&out.stderr);
        assert!(err.starts_with("error: "), "{args:?}: {err}");
        assert_eq!(err.contains("Usage: mindctl"), usage, "{args:?}: {err}");
    }
    let dir = TempDir::new().unwrap();
    let data = table(dir.path(), "d.csv", 40);
    let out = run(&["--out", s(dir.path()), "train", "--data", s(&data), "--layers", "3"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn data_errors_exit_3() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("out");
    let missing = run(&["--out", s(&out), "split", "--data", s(&dir.path().join("nope.csv")), "--n-b", "3"]);
    assert_eq!(missing.status.code(), Some(3));

    let data = table(dir.path(), "odd.csv", 101);
    assert_eq!(run(&["--out", s(&out), "split", "--data", s(&data), "--n-b", "3"]).status.code(), Some(3));

    let junk = dir.path().join("junk.csv");
    fs::write(&junk, "a,b\n1,2\n").unwrap();
    assert_eq!(run(&["--out", s(&out), "split", "--data", s(&junk), "--n-b", "1"]).status.code(), Some(3));

    let bad_ckpt = dir.path().join("bad.mctl");
    fs::write(&bad_ckpt, b"not a checkpoint").unwrap();
    let data = table(dir.path(), "ok.csv", 20);
    let r = run(&["--out", s(&out), "predict", "--checkpoint", s(&bad_ckpt), "--data", s(&data)]);
    assert_eq!(r.status.code(), Some(3));
}

#[test]
fn diverging_training_exits_4() {
    let dir = TempDir::new().unwrap();
    let data = table(dir.path(), "d.csv", 40);
    let out = run(&[
        "--out", s(dir.path()), "train", "--data", s(&data), "--width", "2", "--layers", "4", "--n-b", "1", "--lr",
        "1e300", "--epochs", "5", "--bptt", "5",
    ]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn output_dir_from_environment() {
    let dir = TempDir::new().unwrap();
    let data = table(dir.path(), "d.csv", 60);
    let out = dir.path().join("from-env");
    let r = mindctl().env("MINDCTL_OUT", &out).args(["split", "--data", s(&data), "--n-b", "2"]).output().unwrap();
    assert!(r.status.success());
    assert_eq!(rows(&out.join("train.csv")), 40);
    let cfg = fs::read_to_string(out.join("run.toml")).unwrap();
    assert!(cfg.contains("command = \"split\""));
}

fn edf(run: u32, notes: &[(f64, f64, &str)]) -> Vec<u8> {
    let channels = (0..CHANNELS)
        .map(|c| EdfChannel {
            label: format!("C{c}"),
            transducer: String::new(),
            physical_dimension: "uV".into(),
            physical_min: -100.0,
            physical_max: 100.0,
            digital_min: -2048,
            digital_max: 2047,
            prefilter: String::new(),
            samples_per_record: 160,
            samples: vec![c as f64 * 0.5 + run as f64 * 0.25 - 10.0; 4 * 160],
        })
        .collect();
    let mut rec = EdfRecording {
        header: EdfHeader {
            variant: EdfVariant::EdfPlusContinuous,
            patient_id: "X".into(),
            recording_id: "Y".into(),
            start: NaiveDate::from_ymd_opt(2009, 8, 12).unwrap().and_hms_opt(16, 15, 0).unwrap(),
            record_count: 4,
            record_duration: 1.0,
        },
        channels,
        annotations: notes.iter().map(|&(o, d, t)| Annotation { onset: o, duration: Some(d), text: t.into() }).collect(),
    };
    // Snap to the digital grid so the table holds exactly what was written.
    for ch in &mut rec.channels {
        let v = ch.to_physical(ch.to_digital(ch.samples[0]).unwrap());
        ch.samples.iter_mut().for_each(|x| *x = v);
    }
    serialize_edf(&rec).unwrap()
}

#[test]
fn ingest_labels_edf_runs() {
    let dir = TempDir::new().unwrap();
    let r04 = dir.path().join("S001R04.edf");
    let r02 = dir.path().join("S001R02.edf");
    fs::write(&r04, edf(4, &[(0.0, 1.0, "T1"), (1.0, 1.0, "T0"), (2.0, 2.0, "T2")])).unwrap();
    fs::write(&r02, edf(2, &[(0.0, 4.0, "T0")])).unwrap();
    let out = dir.path().join("out");
    ok(&["--out", s(&out), "ingest", s(&r04), s(&r02), "--limit", "0"]);
    let text = fs::read_to_string(out.join("dataset.csv")).unwrap();
    let labels: Vec<&str> = text.lines().skip(1).map(|l| l.rsplit(',').next().unwrap()).collect();
    // Run 2 comes first whatever the argument order.
    assert_eq!(labels.len(), 640 + 160 + 320);
    assert!(labels[..640].iter().all(|&l| l == "1"));
    assert!(labels[640..800].iter().all(|&l| l == "2"));
    assert!(labels[800..].iter().all(|&l| l == "3"));

    ok(&["--out", s(&out), "ingest", s(&r04), "--limit", "100", "--name", "capped.csv"]);
    assert_eq!(rows(&out.join("capped.csv")), 100);

    let bad = dir.path().join("notes.edf");
    fs::write(&bad, b"0       garbage").unwrap();
    assert_eq!(run(&["--out", s(&out), "ingest", s(&bad)]).status.code(), Some(2));
    let broken = dir.path().join("S001R06.edf");
    fs::write(&broken, b"0       garbage").unwrap();
    assert_eq!(run(&["--out", s(&out), "ingest", s(&broken)]).status.code(), Some(3));
}

#[test]
fn eval_predict_and_export() {
    let dir = TempDir::new().unwrap();
    let data = table(dir.path(), "d.csv", 200);
    let ckpt = small_model(&data, &dir.path().join("m"), "1");
    let out = dir.path().join("eval");
    ok(&["--out", s(&out), "eval", "--checkpoint", s(&ckpt), "--data", s(&data), "--n-b", "1", "--knn", "3"]);
    let confusion = fs::read_to_string(out.join("confusion.csv")).unwrap();
    assert_eq!(confusion.lines().next(), Some("predicted\\truth,1,2,3,4,5"));
    let total: u64 = confusion
        .lines()
        .skip(1)
        .flat_map(|l| l.split(',').skip(1).map(|n| n.parse::<u64>().unwrap()).collect::<Vec<_>>())
        .sum();
    assert_eq!(total, 100);
    let report = fs::read_to_string(out.join("report.csv")).unwrap();
    assert_eq!(report.lines().count(), 1 + 5 + 2);
    // Only classes 1 and 2 occur, so only they have ROC curves.
    assert!(out.join("roc_1.csv").exists() && out.join("roc_2.csv").exists());
    assert!(!out.join("roc_3.csv").exists());
    let knn = fs::read_to_string(out.join("knn_report.csv")).unwrap();
    assert!(knn.lines().last().unwrap().starts_with("accuracy,1.000000"), "{knn}");

    ok(&["--out", s(&out), "predict", "--checkpoint", s(&ckpt), "--data", s(&data)]);
    let preds = fs::read_to_string(out.join("predictions.csv")).unwrap();
    assert_eq!(preds.lines().next(), Some("index,label,predicted,p1,p2,p3,p4,p5"));
    assert_eq!(preds.lines().count(), 201);

    ok(&["--out", s(&out), "export-activations", "--checkpoint", s(&ckpt), "--data", s(&data), "--layer", "3"]);
    let acts = fs::read_to_string(out.join("activations_layer3.csv")).unwrap();
    assert_eq!(acts.lines().next(), Some("index,label,a1,a2,a3,a4"));
    assert_eq!(acts.lines().count(), 201);
    let r = run(&["--out", s(&out), "export-activations", "--checkpoint", s(&ckpt), "--data", s(&data), "--layer", "6"]);
    assert_eq!(r.status.code(), Some(2));
}

#[test]
fn replay_in_process_writes_transcript() {
    let dir = TempDir::new().unwrap();
    let data = table(dir.path(), "d.csv", 200);
    let ckpt = small_model(&data, &dir.path().join("m"), "2");
    let out = dir.path().join("replay");
    ok(&["--out", s(&out), "replay", "--checkpoint", s(&ckpt), "--data", s(&data), "--samples", "80"]);
    let text = fs::read_to_string(out.join("transcript.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "t_ms,seq,label,action,ack");
    assert_eq!(lines.len(), 81);
    for (k, l) in lines[1..].iter().enumerate() {
        let cells: Vec<&str> = l.split(',').collect();
        assert_eq!(cells[0], (2500 * k).to_string());
        assert_eq!(cells[1], (k + 1).to_string());
        assert_eq!(cells[4], cells[1]);
        let action = match cells[2] {
            "1" => "Turn on Blue LEDs",
            "2" => "Turn on White LED",
            other => panic!("unexpected label {other}"),
        };
        assert_eq!(cells[3], action);
    }

    ok(&["--out", s(&out), "replay", "--checkpoint", s(&ckpt), "--data", s(&data), "--window", "10", "--profile", "robot"]);
    assert_eq!(rows(&out.join("transcript.csv")), 20);
}

#[test]
fn replay_against_served_device() {
    let dir = TempDir::new().unwrap();
    let data = table(dir.path(), "d.csv", 200);
    let ckpt = small_model(&data, &dir.path().join("m"), "3");
    let dev_out = dir.path().join("device");
    let mut server = mindctl()
        .args(["--out", s(&dev_out), "serve-device", "--bind", "127.0.0.1:0", "--sessions", "1"])
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let mut stderr = BufReader::new(server.stderr.take().unwrap());
    let mut line = String::new();
    let addr = loop {
        line.clear();
        assert!(stderr.read_line(&mut line).unwrap() > 0, "server exited early");
        if let Some(a) = line.trim().strip_prefix("listening on ") {
            break a.to_string();
        }
    };
    let out = dir.path().join("client");
    ok(&["--out", s(&out), "replay", "--checkpoint", s(&ckpt), "--data", s(&data), "--samples", "12", "--connect", &addr]);
    assert!(server.wait().unwrap().success());
    assert_eq!(rows(&out.join("transcript.csv")), 12);
    let log = fs::read_to_string(dev_out.join("device_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 13);
    assert!(fs::read_to_string(dev_out.join("run.toml")).unwrap().contains("serve-device"));
}

#[test]
fn bad_device_reply_exits_5() {
    let dir = TempDir::new().unwrap();
    let data = table(dir.path(), "d.csv", 40);
    let ckpt = small_model(&data, &dir.path().join("m"), "4");
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    let fake = std::thread::spawn(move || {
        let (mut stream, _) = listener.accept().unwrap();
        let mut reader = BufReader::new(stream.try_clone().unwrap());
        let mut line = String::new();
        reader.read_line(&mut line).unwrap();
        stream.write_all(b"NOPE\n").unwrap();
        line
    });
    let out = dir.path().join("out");
    let r = run(&["--out", s(&out), "replay", "--checkpoint", s(&ckpt), "--data", s(&data), "--connect", &addr]);
    assert_eq!(r.status.code(), Some(5), "{}", String::from_utf8_lossy(&r.stderr));
    assert!(fake.join().unwrap().starts_with("CMD 1 "));
}
