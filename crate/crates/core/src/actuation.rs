//! Turning recognised intents into device commands.
//!
//! Commands travel as newline-terminated ASCII lines:
//!
//! ```text
//! CMD <seq> <label> <action-id> <t_ms>\n     client → device
//! ACK <seq>\n                                device → client
//! ERR <reason>\n                             device → client
//! ```
//!
//! Time is simulated milliseconds carried in each command, so device
//! behaviour is deterministic.

use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{IntentLabel, LabeledSample, CLASSES};
use crate::model::ModelParams;

/// How long an LED stays lit after a command.
pub const LED_HOLD_MS: u64 = 2000;

#[derive(Debug, Error)]
pub enum ActuationError {
    #[error("label {0} outside 1..=5")]
    Label(i64),
    #[error("protocol: {0}")]
    Protocol(String),
    #[error("unknown action `{0}` for this device")]
    UnknownAction(String),
    #[error("command at {t_ms} ms precedes device clock {clock_ms} ms")]
    Clock { t_ms: u64, clock_ms: u64 },
    #[error("sequence number {got} does not follow {last}")]
    Sequence { last: u64, got: u64 },
    #[error("profile: {0}")]
    Profile(String),
    #[error("replay at sample {index}: {reason}")]
    Replay { index: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Led {
    Blue,
    White,
    Yellow,
    Red,
}

impl Led {
    pub const ALL: [Led; 4] = [Led::Blue, Led::White, Led::Yellow, Led::Red];

    fn index(self) -> usize {
        self as usize
    }
}

/// Every action either profile can issue.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Action {
    Ahead,
    Left,
    Right,
    Grasp,
    Unloose,
    Blue,
    White,
    Yellow,
    Red,
    All,
}

impl Action {
    const TABLE: [(Action, &'static str, &'static str); 10] = [
        (Action::Ahead, "AHEAD", "Walk Ahead"),
        (Action::Left, "LEFT", "Turn Left"),
        (Action::Right, "RIGHT", "Turn Right"),
        (Action::Grasp, "GRASP", "Grasp"),
        (Action::Unloose, "UNLOOSE", "Unloose"),
        (Action::Blue, "BLUE", "Turn on Blue LEDs"),
        (Action::White, "WHITE", "Turn on White LED"),
        (Action::Yellow, "YELLOW", "Turn on Yellow LED"),
        (Action::Red, "RED", "Turn on Red LED"),
        (Action::All, "ALL", "Turn on All LEDs"),
    ];

    fn entry(self) -> &'static (Action, &'static str, &'static str) {
        Self::TABLE.iter().find(|e| e.0 == self).expect("every action is listed")
    }

    /// Wire identifier, e.g. `RIGHT`.
    pub fn id(self) -> &'static str {
        self.entry().1
    }

    /// Human-readable action, e.g. `Turn Right`.
    pub fn text(self) -> &'static str {
        self.entry().2
    }

    pub fn from_id(id: &str) -> Option<Action> {
        Self::TABLE.iter().find(|e| e.1 == id).map(|e| e.0)
    }

    pub fn from_text(text: &str) -> Option<Action> {
        Self::TABLE.iter().find(|e| e.2 == text).map(|e| e.0)
    }

    /// LEDs lit by this action; empty for robot actions.
    pub fn leds(self) -> &'static [Led] {
        match self {
            Action::Blue => &[Led::Blue],
            Action::White => &[Led::White],
            Action::Yellow => &[Led::Yellow],
            Action::Red => &[Led::Red],
            Action::All => &Led::ALL,
            _ => &[],
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.text())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProfileName {
    Robot,
    Appliance,
}

impl std::str::FromStr for ProfileName {
    type Err = ActuationError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "robot" => Ok(Self::Robot),
            "appliance" => Ok(Self::Appliance),
            _ => Err(ActuationError::Profile(format!("unknown profile `{s}`"))),
        }
    }
}

/// Label-to-action mapping for one device.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommandProfile {
    name: ProfileName,
    actions: [Action; CLASSES],
}

impl CommandProfile {
    pub fn robot() -> Self {
        use Action::*;
        Self { name: ProfileName::Robot, actions: [Ahead, Left, Right, Grasp, Unloose] }
    }

    pub fn appliance() -> Self {
        use Action::*;
        Self { name: ProfileName::Appliance, actions: [Blue, White, Yellow, Red, All] }
    }

    pub fn named(name: ProfileName) -> Self {
        match name {
            ProfileName::Robot => Self::robot(),
            ProfileName::Appliance => Self::appliance(),
        }
    }

    /// A custom mapping; must be injective and use only actions the named
    /// device understands.
    pub fn new(name: ProfileName, actions: [Action; CLASSES]) -> Result<Self, ActuationError> {
        let allowed = Self::named(name).actions;
        for (i, a) in actions.iter().enumerate() {
            if !allowed.contains(a) {
                return Err(ActuationError::Profile(format!("{a} is not a {name:?} action")));
            }
            if actions[..i].contains(a) {
                return Err(ActuationError::Profile(format!("{a} mapped twice")));
            }
        }
        Ok(Self { name, actions })
    }

    pub fn name(&self) -> ProfileName {
        self.name
    }

    pub fn action(&self, label: IntentLabel) -> Action {
        self.actions[label.index()]
    }

    pub fn label_of(&self, action: Action) -> Option<IntentLabel> {
        self.actions
            .iter()
            .position(|&a| a == action)
            .map(|i| IntentLabel::from_index(i).expect("five actions"))
    }

    pub fn accepts(&self, action: Action) -> bool {
        self.actions.contains(&action)
    }
}

/// Action text for `label` (1..=5) under `profile`.
pub fn map_intent(label: i64, profile: &CommandProfile) -> Result<&'static str, ActuationError> {
    let label = u8::try_from(label)
        .ok()
        .and_then(|l| IntentLabel::new(l).ok())
        .ok_or(ActuationError::Label(label))?;
    Ok(profile.action(label).text())
}

/// One outbound command.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Command {
    pub seq: u64,
    pub label: IntentLabel,
    pub action: Action,
    pub t_ms: u64,
}

impl Command {
    pub fn new(seq: u64, label: IntentLabel, profile: &CommandProfile, t_ms: u64) -> Self {
        Self { seq, label, action: profile.action(label), t_ms }
    }
}

pub fn encode_command(c: &Command) -> String {
    format!("CMD {} {} {} {}\n", c.seq, c.label, c.action.id(), c.t_ms)
}

pub fn encode_ack(seq: u64) -> String {
    format!("ACK {seq}\n")
}

fn malformed(line: &[u8], why: &str) -> ActuationError {
    ActuationError::Protocol(format!("{why} in \"{}\"", line.escape_ascii()))
}

fn fields<'a>(line: &'a [u8], verb: &str, n: usize) -> Result<Vec<&'a str>, ActuationError> {
    let body = line
        .strip_suffix(b"\n")
        .ok_or_else(|| malformed(line, "missing newline"))?;
    let text = std::str::from_utf8(body)
        .ok()
        .filter(|t| t.is_ascii())
        .ok_or_else(|| malformed(line, "non-ASCII bytes"))?;
    let parts: Vec<&str> = text.split(' ').collect();
    if parts.len() != n + 1 || parts[0] != verb {
        return Err(malformed(line, &format!("expected `{verb}` with {n} fields")));
    }
    Ok(parts[1..].to_vec())
}

/// Canonical unsigned decimal: digits only, no leading zero.
fn number(line: &[u8], field: &str, what: &str) -> Result<u64, ActuationError> {
    let canonical = !field.is_empty()
        && field.bytes().all(|b| b.is_ascii_digit())
        && (field == "0" || !field.starts_with('0'));
    if !canonical {
        return Err(malformed(line, &format!("bad {what} `{field}`")));
    }
    field.parse().map_err(|_| malformed(line, &format!("{what} overflows")))
}

/// Parses one `CMD` line. The action must be the one the robot or the
/// appliance profile binds to the label.
pub fn decode_command(line: &[u8]) -> Result<Command, ActuationError> {
    let f = fields(line, "CMD", 4)?;
    let seq = number(line, f[0], "sequence number")?;
    let raw = number(line, f[1], "label")?;
    let label = u8::try_from(raw)
        .ok()
        .and_then(|l| IntentLabel::new(l).ok())
        .ok_or_else(|| malformed(line, &format!("label {raw} out of range")))?;
    let action = Action::from_id(f[2]).ok_or_else(|| malformed(line, &format!("unknown action `{}`", f[2])))?;
    let consistent = [CommandProfile::robot(), CommandProfile::appliance()]
        .iter()
        .any(|p| p.action(label) == action);
    if !consistent {
        return Err(malformed(line, &format!("action {} does not belong to label {label}", f[2])));
    }
    let t_ms = number(line, f[3], "time")?;
    Ok(Command { seq, label, action, t_ms })
}

pub fn decode_ack(line: &[u8]) -> Result<u64, ActuationError> {
    if line.starts_with(b"ERR ") {
        let msg = String::from_utf8_lossy(line.strip_suffix(b"\n").unwrap_or(line));
        return Err(ActuationError::Protocol(format!("device refused: {}", &msg[4..])));
    }
    let f = fields(line, "ACK", 1)?;
    number(line, f[0], "sequence number")
}

/// Inputs to the device event loop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DeviceEvent {
    Command(Command),
    /// Advances the clock without acting.
    Tick(u64),
}

/// Simulated LED bank or robot, driven by a monotonic millisecond clock.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviceSimulator {
    profile: CommandProfile,
    clock_ms: u64,
    /// Merged `[start, end)` on-intervals per LED.
    intervals: [Vec<(u64, u64)>; 4],
    actions: Vec<(u64, Action)>,
}

impl DeviceSimulator {
    pub fn new(profile: CommandProfile) -> Self {
        Self { profile, clock_ms: 0, intervals: Default::default(), actions: Vec::new() }
    }

    pub fn profile(&self) -> &CommandProfile {
        &self.profile
    }

    pub fn clock_ms(&self) -> u64 {
        self.clock_ms
    }

    fn advance(&mut self, t_ms: u64) -> Result<(), ActuationError> {
        if t_ms < self.clock_ms {
            return Err(ActuationError::Clock { t_ms, clock_ms: self.clock_ms });
        }
        self.clock_ms = t_ms;
        Ok(())
    }

    /// Performs `action` at `now`. LEDs stay lit until `now + LED_HOLD_MS`;
    /// an LED already lit has its deadline extended.
    pub fn apply(&mut self, action: Action, now: u64) -> Result<(), ActuationError> {
        if !self.profile.accepts(action) {
            return Err(ActuationError::UnknownAction(action.text().into()));
        }
        self.advance(now)?;
        for led in action.leds() {
            let list = &mut self.intervals[led.index()];
            let end = now + LED_HOLD_MS;
            match list.last_mut() {
                Some(last) if last.1 >= now => last.1 = last.1.max(end),
                _ => list.push((now, end)),
            }
        }
        self.actions.push((now, action));
        Ok(())
    }

    /// Like [`apply`](Self::apply) with the action given as display text.
    pub fn apply_text(&mut self, text: &str, now: u64) -> Result<(), ActuationError> {
        let action = Action::from_text(text).ok_or_else(|| ActuationError::UnknownAction(text.into()))?;
        self.apply(action, now)
    }

    pub fn process(&mut self, event: DeviceEvent) -> Result<(), ActuationError> {
        match event {
            DeviceEvent::Command(c) => self.apply(c.action, c.t_ms),
            DeviceEvent::Tick(t) => self.advance(t),
        }
    }

    /// Whether `led` is lit at time `t_ms`.
    pub fn led_on(&self, led: Led, t_ms: u64) -> bool {
        self.intervals[led.index()].iter().any(|&(a, b)| a <= t_ms && t_ms < b)
    }

    /// Lit state of every LED at the current clock, in [`Led::ALL`] order.
    pub fn leds_now(&self) -> [bool; 4] {
        Led::ALL.map(|l| self.led_on(l, self.clock_ms))
    }

    pub fn on_intervals(&self, led: Led) -> &[(u64, u64)] {
        &self.intervals[led.index()]
    }

    /// Every accepted action with its time, in order.
    pub fn action_log(&self) -> &[(u64, Action)] {
        &self.actions
    }
}

/// Protocol endpoint for one session: enforces increasing sequence numbers
/// and answers each line with `ACK` or `ERR`.
#[derive(Debug)]
pub struct Endpoint {
    device: Arc<Mutex<DeviceSimulator>>,
    last_seq: Option<u64>,
    acked: u64,
}

impl Endpoint {
    pub fn new(device: Arc<Mutex<DeviceSimulator>>) -> Self {
        Self { device, last_seq: None, acked: 0 }
    }

    pub fn handle(&mut self, line: &[u8]) -> Result<u64, ActuationError> {
        let cmd = decode_command(line)?;
        if let Some(last) = self.last_seq {
            if cmd.seq <= last {
                return Err(ActuationError::Sequence { last, got: cmd.seq });
            }
        }
        self.device.lock().expect("device lock").process(DeviceEvent::Command(cmd))?;
        self.last_seq = Some(cmd.seq);
        self.acked += 1;
        Ok(cmd.seq)
    }

    /// The response line for `line`.
    pub fn respond(&mut self, line: &[u8]) -> String {
        match self.handle(line) {
            Ok(seq) => encode_ack(seq),
            Err(e) => format!("ERR {}\n", e.to_string().replace('\n', " ")),
        }
    }

    pub fn acknowledged(&self) -> u64 {
        self.acked
    }
}

/// Sends a command and returns the acknowledged sequence number.
pub trait Transport {
    fn send(&mut self, command: &Command) -> Result<u64, ActuationError>;
}

fn check_ack(command: &Command, seq: u64) -> Result<u64, ActuationError> {
    if seq != command.seq {
        return Err(ActuationError::Protocol(format!("ACK {seq} for command {}", command.seq)));
    }
    Ok(seq)
}

/// In-process transport; lines still go through the codec byte for byte.
#[derive(Debug)]
pub struct Loopback {
    endpoint: Endpoint,
}

impl Loopback {
    pub fn new(device: Arc<Mutex<DeviceSimulator>>) -> Self {
        Self { endpoint: Endpoint::new(device) }
    }
}

impl Transport for Loopback {
    fn send(&mut self, command: &Command) -> Result<u64, ActuationError> {
        let reply = self.endpoint.respond(encode_command(command).as_bytes());
        check_ack(command, decode_ack(reply.as_bytes())?)
    }
}

/// Client side of a TCP session.
#[derive(Debug)]
pub struct TcpTransport {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
}

impl TcpTransport {
    pub fn connect(addr: impl ToSocketAddrs) -> Result<Self, ActuationError> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        Ok(Self { reader: BufReader::new(stream.try_clone()?), writer: stream })
    }
}

impl Transport for TcpTransport {
    fn send(&mut self, command: &Command) -> Result<u64, ActuationError> {
        self.writer.write_all(encode_command(command).as_bytes())?;
        let mut line = Vec::new();
        if self.reader.read_until(b'\n', &mut line)? == 0 {
            return Err(ActuationError::Protocol("device closed the connection".into()));
        }
        check_ack(command, decode_ack(&line)?)
    }
}

fn serve_connection(stream: TcpStream, device: Arc<Mutex<DeviceSimulator>>) -> Result<u64, ActuationError> {
    let mut endpoint = Endpoint::new(device);
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut writer = stream;
    let mut line = Vec::new();
    loop {
        line.clear();
        if reader.read_until(b'\n', &mut line)? == 0 {
            return Ok(endpoint.acknowledged());
        }
        writer.write_all(endpoint.respond(&line).as_bytes())?;
    }
}

/// Accepts sessions on `listener`, one thread each, all sharing `device`.
/// Stops after `max_sessions` connections when given; the handle yields the
/// number of commands acknowledged per session.
pub fn serve(
    listener: TcpListener,
    device: Arc<Mutex<DeviceSimulator>>,
    max_sessions: Option<usize>,
) -> JoinHandle<Vec<Result<u64, String>>> {
    std::thread::spawn(move || {
        let mut sessions = Vec::new();
        for stream in listener.incoming() {
            match stream {
                Ok(s) => {
                    let device = Arc::clone(&device);
                    sessions.push(std::thread::spawn(move || serve_connection(s, device)));
                }
                Err(e) => log::warn!("accept failed: {e}"),
            }
            if max_sessions.is_some_and(|m| sessions.len() >= m) {
                break;
            }
        }
        sessions
            .into_iter()
            .map(|h| match h.join() {
                Ok(r) => r.map_err(|e| e.to_string()),
                Err(_) => Err("session thread panicked".into()),
            })
            .collect()
    })
}

/// How predictions become commands.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Cadence {
    /// One command per sample.
    PerSample,
    /// One command per `window` consecutive samples, carrying the most
    /// frequent prediction (ties to the lower label). A short final window
    /// still issues a command.
    Majority { window: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplayConfig {
    pub cadence: Cadence,
    /// Simulated time of the first command.
    pub start_ms: u64,
    /// Simulated time between commands.
    pub interval_ms: u64,
}

impl Default for ReplayConfig {
    fn default() -> Self {
        Self { cadence: Cadence::PerSample, start_ms: 0, interval_ms: 2500 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogEntry {
    pub t_ms: u64,
    pub seq: u64,
    pub label: IntentLabel,
    pub action: Action,
    /// Ground-truth label of the samples behind this command.
    pub truth: IntentLabel,
    pub ack: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ReplayLog {
    pub entries: Vec<LogEntry>,
}

impl ReplayLog {
    /// Fraction of commands whose label matches the ground truth.
    pub fn match_rate(&self) -> Option<f64> {
        if self.entries.is_empty() {
            return None;
        }
        let hits = self.entries.iter().filter(|e| e.label == e.truth).count();
        Some(hits as f64 / self.entries.len() as f64)
    }

    /// Writes `t_ms,seq,label,action,ack`.
    pub fn write_transcript<W: Write>(&self, out: W) -> Result<(), ActuationError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t_ms", "seq", "label", "action", "ack"])?;
        for e in &self.entries {
            w.write_record([
                e.t_ms.to_string(),
                e.seq.to_string(),
                e.label.to_string(),
                e.action.text().to_string(),
                e.ack.map(|a| a.to_string()).unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn majority(labels: impl Iterator<Item = IntentLabel>) -> IntentLabel {
    let mut votes = [0usize; CLASSES];
    labels.for_each(|l| votes[l.index()] += 1);
    let mut best = 0;
    for (i, &v) in votes.iter().enumerate() {
        if v > votes[best] {
            best = i;
        }
    }
    IntentLabel::from_index(best).expect("five classes")
}

/// Groups per-sample labels into decisions; returns `(first sample,
/// decided label, true label)` per command.
pub fn decisions(
    predicted: &[IntentLabel],
    truth: &[IntentLabel],
    cadence: Cadence,
) -> Result<Vec<(usize, IntentLabel, IntentLabel)>, ActuationError> {
    match cadence {
        Cadence::PerSample => Ok(predicted
            .iter()
            .zip(truth)
            .enumerate()
            .map(|(i, (&p, &t))| (i, p, t))
            .collect()),
        Cadence::Majority { window: 0 } => Err(ActuationError::Profile("majority window must be positive".into())),
        Cadence::Majority { window } => Ok(predicted
            .chunks(window)
            .zip(truth.chunks(window))
            .enumerate()
            .map(|(k, (p, t))| (k * window, majority(p.iter().copied()), majority(t.iter().copied())))
            .collect()),
    }
}

/// Classifies `samples` with `model`, turns the predictions into commands
/// under `profile` and sends each through `transport`.
pub fn replay(
    model: &ModelParams,
    samples: &[LabeledSample],
    profile: &CommandProfile,
    transport: &mut dyn Transport,
    config: &ReplayConfig,
) -> Result<ReplayLog, ActuationError> {
    let predictions = model
        .predict(samples)
        .map_err(|e| ActuationError::Replay { index: 0, reason: e.to_string() })?;
    let predicted: Vec<IntentLabel> = predictions.iter().map(|p| p.label).collect();
    let truth: Vec<IntentLabel> = samples.iter().map(|s| s.label).collect();
    let mut log = ReplayLog::default();
    for (k, (index, label, truth)) in decisions(&predicted, &truth, config.cadence)?.into_iter().enumerate() {
        let cmd = Command::new(k as u64 + 1, label, profile, config.start_ms + k as u64 * config.interval_ms);
        let ack = transport
            .send(&cmd)
            .map_err(|e| ActuationError::Replay { index, reason: e.to_string() })?;
        log.entries.push(LogEntry {
            t_ms: cmd.t_ms,
            seq: cmd.seq,
            label,
            action: cmd.action,
            truth,
            ack: Some(ack),
        });
    }
    Ok(log)
}
