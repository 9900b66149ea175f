mod common;

use std::io::{BufRead, BufReader, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::{Arc, Mutex};

use mindctl::actuation::{
    decode_ack, decode_command, decisions, encode_command, map_intent, replay, serve, Action, ActuationError,
    Cadence, Command, CommandProfile, DeviceEvent, DeviceSimulator, Endpoint, Led, Loopback, ReplayConfig,
    TcpTransport, Transport,
};
use common::{five_class_data, five_class_model, INTENT_TABLE};
use mindctl::dataset::IntentLabel;
use mindctl::model::{build, HyperParams};
use proptest::prelude::*;

fn label(l: u8) -> IntentLabel {
    IntentLabel::new(l).unwrap()
}

fn shared(profile: CommandProfile) -> Arc<Mutex<DeviceSimulator>> {
    Arc::new(Mutex::new(DeviceSimulator::new(profile)))
}

#[test]
fn intents_map_to_their_actions() {
    for (l, robot, appliance) in INTENT_TABLE {
        assert_eq!(map_intent(l, &CommandProfile::robot()).unwrap(), robot);
        assert_eq!(map_intent(l, &CommandProfile::appliance()).unwrap(), appliance);
    }
    for bad in [0, 6, -1] {
        assert!(matches!(map_intent(bad, &CommandProfile::appliance()), Err(ActuationError::Label(b)) if b == bad));
    }
}

#[test]
fn red_led_holds_for_two_seconds() {
    let mut dev = DeviceSimulator::new(CommandProfile::appliance());
    dev.apply_text("Turn on Red LED", 0).unwrap();
    assert!(dev.led_on(Led::Red, 0));
    assert!(dev.led_on(Led::Red, 1999));
    assert!(!dev.led_on(Led::Red, 2000));
    assert!(!dev.led_on(Led::Blue, 0));
    dev.process(DeviceEvent::Tick(2000)).unwrap();
    assert_eq!(dev.leds_now(), [false; 4]);
}

#[test]
fn all_leds_light_together() {
    let mut dev = DeviceSimulator::new(CommandProfile::appliance());
    dev.apply_text("Turn on All LEDs", 100).unwrap();
    assert_eq!(dev.leds_now(), [true; 4]);
    assert!(Led::ALL.iter().all(|&l| dev.on_intervals(l) == [(100, 2100)]));
}

#[test]
fn repeated_command_extends_the_deadline() {
    let mut dev = DeviceSimulator::new(CommandProfile::appliance());
    dev.apply(Action::Yellow, 1000).unwrap();
    dev.apply(Action::Yellow, 1500).unwrap();
    assert_eq!(dev.on_intervals(Led::Yellow), [(1000, 3500)]);
    assert!(dev.led_on(Led::Yellow, 3499));
    assert!(!dev.led_on(Led::Yellow, 3500));
}

#[test]
fn device_rejects_foreign_actions_and_backward_time() {
    let mut robot = DeviceSimulator::new(CommandProfile::robot());
    assert!(matches!(robot.apply(Action::Red, 0), Err(ActuationError::UnknownAction(_))));
    assert!(matches!(robot.apply_text("Fly", 0), Err(ActuationError::UnknownAction(_))));
    robot.apply_text("Grasp", 10).unwrap();
    robot.apply_text("Turn Left", 20).unwrap();
    assert!(matches!(robot.apply(Action::Ahead, 5), Err(ActuationError::Clock { t_ms: 5, clock_ms: 20 })));
    assert_eq!(robot.action_log(), [(10, Action::Grasp), (20, Action::Left)]);
}

#[test]
fn wire_format() {
    let c = Command::new(1, label(3), &CommandProfile::robot(), 0);
    assert_eq!(encode_command(&c), "CMD 1 3 RIGHT 0\n");
    let a = Command::new(12, label(5), &CommandProfile::appliance(), 250_000);
    assert_eq!(encode_command(&a), "CMD 12 5 ALL 250000\n");

    for bad in [
        "CMD 1 9 X 0\n",
        "CMD 1 9 RIGHT 0\n",
        "CMD 1 3 RIGHT 0",
        "CMD 1 3 RIGHT 0\r\n",
        "CMD 01 3 RIGHT 0\n",
        "CMD 1 3 RIGHT -4\n",
        "CMD 1  3 RIGHT 0\n",
        "CMD 1 3 LEFT 0\n",
        "CMD 1 3 right 0\n",
        "ACK 1\n",
        "",
    ] {
        assert!(matches!(decode_command(bad.as_bytes()), Err(ActuationError::Protocol(_))), "{bad:?}");
    }
    assert_eq!(decode_ack(b"ACK 7\n").unwrap(), 7);
    assert!(matches!(decode_ack(b"ERR label out of range\n"), Err(ActuationError::Protocol(m)) if m.contains("label out of range")));
    assert!(decode_ack(b"ACK 07\n").is_err());
}

fn command() -> impl Strategy<Value = Command> {
    (any::<u64>(), 1u8..=5, any::<bool>(), any::<u64>()).prop_map(|(seq, l, robot, t_ms)| {
        let profile = if robot { CommandProfile::robot() } else { CommandProfile::appliance() };
        Command::new(seq, label(l), &profile, t_ms)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn codec_round_trips(c in command()) {
        let line = encode_command(&c);
        let back = decode_command(line.as_bytes()).unwrap();
        prop_assert_eq!(back, c);
        prop_assert_eq!(encode_command(&back), line);
    }

    #[test]
    fn mutated_lines_never_decode_to_something_else(c in command(), at in any::<prop::sample::Index>(), byte in any::<u8>()) {
        let mut line = encode_command(&c).into_bytes();
        let i = at.index(line.len());
        prop_assume!(line[i] != byte);
        line[i] = byte;
        if let Ok(d) = decode_command(&line) {
            // Only a digit swap can still parse; it must re-encode to the mutated bytes.
            prop_assert_eq!(encode_command(&d).into_bytes(), line);
        }
    }
}

/// Builds the on-set of each LED by brute force from the command list.
fn led_oracle(schedule: &[(u64, Action)], led: Led, t: u64) -> bool {
    schedule.iter().any(|&(s, a)| a.leds().contains(&led) && s <= t && t < s + 2000)
}

fn schedule() -> impl Strategy<Value = Vec<(u64, Action)>> {
    let actions = vec![Action::Blue, Action::White, Action::Yellow, Action::Red, Action::All];
    prop::collection::vec((0u64..3000, prop::sample::select(actions)), 0..40).prop_map(|steps| {
        let mut t = 0;
        steps
            .into_iter()
            .map(|(gap, a)| {
                t += gap;
                (t, a)
            })
            .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn led_state_is_the_union_of_hold_windows(events in schedule()) {
        let mut dev = DeviceSimulator::new(CommandProfile::appliance());
        for &(t, a) in &events {
            dev.apply(a, t).unwrap();
        }
        let mut probes: Vec<u64> = events.iter().flat_map(|&(t, _)| [t.saturating_sub(1), t, t + 1999, t + 2000, t + 2001]).collect();
        probes.push(0);
        for led in Led::ALL {
            for &t in &probes {
                prop_assert_eq!(dev.led_on(led, t), led_oracle(&events, led, t), "{:?} at {}", led, t);
            }
            // Intervals are disjoint, non-touching and sorted.
            for w in dev.on_intervals(led).windows(2) {
                prop_assert!(w[0].1 < w[1].0);
            }
        }
    }
}

#[test]
fn endpoint_enforces_increasing_sequence_numbers() {
    let dev = shared(CommandProfile::appliance());
    let mut ep = Endpoint::new(Arc::clone(&dev));
    assert_eq!(ep.respond(b"CMD 4 1 BLUE 0\n"), "ACK 4\n");
    assert!(ep.respond(b"CMD 4 2 WHITE 10\n").starts_with("ERR "));
    assert!(ep.respond(b"CMD 3 2 WHITE 10\n").starts_with("ERR "));
    assert!(ep.respond(b"CMD 5 2 GRASP 10\n").starts_with("ERR "));
    assert_eq!(ep.respond(b"CMD 9 2 WHITE 10\n"), "ACK 9\n");
    assert_eq!(ep.acknowledged(), 2);
    assert!(dev.lock().unwrap().led_on(Led::White, 10));

    // A fresh session starts its own numbering.
    let mut other = Endpoint::new(dev);
    assert_eq!(other.respond(b"CMD 1 4 RED 20\n"), "ACK 1\n");
}

#[test]
fn tcp_session_acknowledges_every_command() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let dev = shared(CommandProfile::robot());
    let server = serve(listener, Arc::clone(&dev), Some(2));

    let profile = CommandProfile::robot();
    let mut client = TcpTransport::connect(addr).unwrap();
    for k in 0..10u64 {
        let c = Command::new(k + 1, label((k % 5) as u8 + 1), &profile, k * 100);
        assert_eq!(client.send(&c).unwrap(), k + 1);
    }
    drop(client);

    // A raw second session gets an ERR line for garbage and keeps going.
    let mut raw = TcpStream::connect(addr).unwrap();
    let mut reader = BufReader::new(raw.try_clone().unwrap());
    let mut line = String::new();
    raw.write_all(b"HELLO\n").unwrap();
    reader.read_line(&mut line).unwrap();
    assert!(line.starts_with("ERR "), "{line}");
    line.clear();
    raw.write_all(b"CMD 1 1 AHEAD 5000\n").unwrap();
    reader.read_line(&mut line).unwrap();
    assert_eq!(line, "ACK 1\n");
    drop((raw, reader));

    assert_eq!(server.join().unwrap(), vec![Ok(10), Ok(1)]);
    let log: Vec<Action> = dev.lock().unwrap().action_log().iter().map(|e| e.1).collect();
    assert_eq!(log.len(), 11);
    assert_eq!(log[..5], [Action::Ahead, Action::Left, Action::Right, Action::Grasp, Action::Unloose]);
}

#[test]
fn majority_decisions() {
    let p: Vec<IntentLabel> = [1, 2, 2, 3, 3, 3, 4, 5].map(label).to_vec();
    let t: Vec<IntentLabel> = [1, 1, 2, 3, 3, 4, 4, 4].map(label).to_vec();
    let d = decisions(&p, &t, Cadence::Majority { window: 3 }).unwrap();
    assert_eq!(d, vec![(0, label(2), label(1)), (3, label(3), label(3)), (6, label(4), label(4))]);
    assert_eq!(decisions(&p, &t, Cadence::PerSample).unwrap().len(), 8);
    assert!(decisions(&p, &t, Cadence::Majority { window: 0 }).is_err());
}

#[test]
fn replay_of_eighty_samples() {
    let model = five_class_model();
    let samples = five_class_data(80, 99);
    let dev = shared(CommandProfile::appliance());
    let mut link = Loopback::new(Arc::clone(&dev));
    let log = replay(&model, &samples, &CommandProfile::appliance(), &mut link, &ReplayConfig::default()).unwrap();

    assert_eq!(log.entries.len(), 80);
    let mut seen = [false; 5];
    for (k, e) in log.entries.iter().enumerate() {
        assert_eq!(e.seq, k as u64 + 1);
        assert_eq!(e.ack, Some(e.seq));
        assert_eq!(e.t_ms, 2500 * k as u64);
        assert_eq!(e.action.text(), INTENT_TABLE[e.label.index()].2);
        assert_eq!(e.truth, samples[k].label);
        seen[e.label.index()] = true;
    }
    assert!(seen.iter().all(|&s| s), "every label exercised: {seen:?}");
    assert!(log.match_rate().unwrap() > 0.9);

    let d = dev.lock().unwrap();
    let events: Vec<(u64, Action)> = log.entries.iter().map(|e| (e.t_ms, e.action)).collect();
    assert_eq!(d.action_log(), events.as_slice());
    for &(t, a) in &events {
        for &led in a.leds() {
            assert!(d.led_on(led, t + 1999));
            assert!(!d.led_on(led, t + 2000));
        }
    }

    let mut csv = Vec::new();
    log.write_transcript(&mut csv).unwrap();
    let text = String::from_utf8(csv).unwrap();
    assert_eq!(text.lines().count(), 81);
    assert_eq!(text.lines().next(), Some("t_ms,seq,label,action,ack"));
}

#[test]
fn replay_is_deterministic_and_empty_input_sends_nothing() {
    let model = build(&HyperParams { lambda: 0.0, lr: 0.01, width: 4, layers: 5, n_b: 1 }, 5).unwrap();
    let samples = five_class_data(30, 4);
    let config = ReplayConfig { cadence: Cadence::Majority { window: 4 }, start_ms: 1000, interval_ms: 700 };
    let run = || {
        let dev = shared(CommandProfile::robot());
        let mut link = Loopback::new(Arc::clone(&dev));
        let log = replay(&model, &samples, &CommandProfile::robot(), &mut link, &config).unwrap();
        let state = dev.lock().unwrap().clone();
        (log, state)
    };
    let (a, da) = run();
    let (b, db) = run();
    assert_eq!(a, b);
    assert_eq!(da, db);
    assert_eq!(a.entries.len(), 8);
    assert_eq!(a.entries[1].t_ms, 1700);

    let dev = shared(CommandProfile::robot());
    let mut link = Loopback::new(Arc::clone(&dev));
    let empty = replay(&model, &[], &CommandProfile::robot(), &mut link, &config).unwrap();
    assert!(empty.entries.is_empty());
    assert_eq!(empty.match_rate(), None);
    assert!(dev.lock().unwrap().action_log().is_empty());
}

/// A transport that refuses the third command.
struct Flaky(u64);

impl Transport for Flaky {
    fn send(&mut self, c: &Command) -> Result<u64, ActuationError> {
        self.0 += 1;
        if self.0 == 3 {
            return Err(ActuationError::Protocol("link down".into()));
        }
        Ok(c.seq)
    }
}

#[test]
fn replay_reports_the_failing_sample() {
    let model = build(&HyperParams { lambda: 0.0, lr: 0.01, width: 4, layers: 4, n_b: 1 }, 5).unwrap();
    let samples = five_class_data(10, 4);
    let err = replay(&model, &samples, &CommandProfile::robot(), &mut Flaky(0), &ReplayConfig::default()).unwrap_err();
    assert!(matches!(err, ActuationError::Replay { index: 2, ref reason } if reason.contains("link down")), "{err}");
}
