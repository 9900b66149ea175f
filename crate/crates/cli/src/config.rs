//! Persisted run configuration and error-to-exit-code mapping.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use mindctl::actuation::{ActuationError, ProfileName};
use mindctl::dataset::DatasetError;
use mindctl::edf::EdfError;
use mindctl::eval::EvalError;
use mindctl::model::{CheckpointError, HyperParams, ModelError, TrainError, TrainingSchedule};
use mindctl::nn::NnError;
use mindctl::oa::OaError;

pub const CONFIG_FILE: &str = "run.toml";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Paths {
    #[serde(default)]
    pub data: Vec<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mapping: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    pub out_dir: PathBuf,
}

/// Everything a run was started with, written beside its outputs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub command: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub profile: Option<ProfileName>,
    pub paths: Paths,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hyper: Option<HyperParams>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub schedule: Option<TrainingSchedule>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extra: BTreeMap<String, String>,
}

impl RunConfig {
    pub fn new(command: &str, out: &Path) -> Self {
        Self {
            command: command.into(),
            paths: Paths { out_dir: out.to_path_buf(), ..Default::default() },
            ..Default::default()
        }
    }

    pub fn data(mut self, data: Vec<PathBuf>) -> Self {
        self.paths.data = data;
        self
    }

    pub fn mapping(mut self, mapping: Option<PathBuf>) -> Self {
        self.paths.mapping = mapping;
        self
    }

    pub fn checkpoint(mut self, path: PathBuf) -> Self {
        self.paths.checkpoint = Some(path);
        self
    }

    pub fn hyper(mut self, hp: HyperParams) -> Self {
        self.hyper = Some(hp);
        self
    }

    pub fn schedule(mut self, s: TrainingSchedule) -> Self {
        self.schedule = Some(s);
        self
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn profile(mut self, p: ProfileName) -> Self {
        self.profile = Some(p);
        self
    }

    pub fn extra(mut self, key: &str, value: impl fmt::Display) -> Self {
        self.extra.insert(key.into(), value.to_string());
        self
    }

    pub fn write(&self) -> Result<()> {
        let text = toml::to_string(self).context("serialising run config")?;
        fs::create_dir_all(&self.paths.out_dir)?;
        let path = self.paths.out_dir.join(CONFIG_FILE);
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text)
            .map_err(|e| Failure::Usage.wrap(anyhow::anyhow!("{}: {e}", path.display())))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Failure {
    Usage,
    Data,
    Numeric,
    Protocol,
}

impl Failure {
    pub fn code(self) -> u8 {
        match self {
            Failure::Usage => 2,
            Failure::Data => 3,
            Failure::Numeric => 4,
            Failure::Protocol => 5,
        }
    }

    /// Tags `err` so [`exit_code`] reports this failure class.
    pub fn wrap(self, err: anyhow::Error) -> anyhow::Error {
        anyhow::Error::new(Classified { kind: self, inner: err })
    }
}

#[derive(Debug)]
struct Classified {
    kind: Failure,
    inner: anyhow::Error,
}

impl fmt::Display for Classified {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.inner)
    }
}

impl std::error::Error for Classified {}

fn classify_model(e: &ModelError) -> Failure {
    match e {
        ModelError::HyperParams(_) | ModelError::Topology(_) | ModelError::LayerIndex { .. } => Failure::Usage,
        ModelError::Nn(NnError::NonFiniteGradient { .. }) => Failure::Numeric,
        _ => Failure::Data,
    }
}

fn classify(e: &(dyn std::error::Error + 'static)) -> Option<Failure> {
    if let Some(c) = e.downcast_ref::<Classified>() {
        return Some(c.kind);
    }
    if let Some(t) = e.downcast_ref::<TrainError>() {
        return Some(match t {
            TrainError::NonFinite { .. } => Failure::Numeric,
            TrainError::Schedule(_) => Failure::Usage,
            TrainError::NoData => Failure::Data,
            TrainError::Model(m) => classify_model(m),
        });
    }
    if let Some(m) = e.downcast_ref::<ModelError>() {
        return Some(classify_model(m));
    }
    if let Some(n) = e.downcast_ref::<NnError>() {
        return Some(match n {
            NnError::NonFiniteGradient { .. } => Failure::Numeric,
            _ => Failure::Data,
        });
    }
    if e.is::<ActuationError>() {
        return Some(Failure::Protocol);
    }
    if e.is::<EdfError>()
        || e.is::<DatasetError>()
        || e.is::<CheckpointError>()
        || e.is::<OaError>()
        || e.is::<EvalError>()
        || e.is::<csv::Error>()
        || e.is::<std::io::Error>()
    {
        return Some(Failure::Data);
    }
    None
}

/// Exit status for a failed run: the first classifiable error in the chain
/// decides.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    err.chain().find_map(classify).map(Failure::code).unwrap_or(1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use mindctl::model::TrainingSchedule;

    #[test]
    fn config_round_trips_through_toml() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig::new("train", dir.path())
            .data(vec!["a.csv".into(), "b.csv".into()])
            .hyper(HyperParams::TUNED)
            .schedule(TrainingSchedule::default())
            .seed(7)
            .profile(ProfileName::Robot)
            .extra("window", 5);
        cfg.write().unwrap();
        let back = RunConfig::read(&dir.path().join(CONFIG_FILE)).unwrap();
        assert_eq!(toml::to_string(&back).unwrap(), toml::to_string(&cfg).unwrap());
        assert_eq!(back.hyper, Some(HyperParams::TUNED));
        assert_eq!(back.seed, Some(7));
    }

    #[test]
    fn exit_codes_follow_the_error_chain() {
        let io = anyhow::Error::new(std::io::Error::other("disk")).context("reading table");
        assert_eq!(exit_code(&io), 3);
        assert_eq!(exit_code(&Failure::Usage.wrap(io)), 2);
        let protocol: anyhow::Error = ActuationError::Protocol("bad".into()).into();
        assert_eq!(exit_code(&protocol), 5);
        let no_data: anyhow::Error = TrainError::NoData.into();
        assert_eq!(exit_code(&no_data), 3);
        assert_eq!(exit_code(&anyhow::anyhow!("plain")), 1);
        let nested = Err::<(), _>(ModelError::Topology("few".into())).context("building").unwrap_err();
        assert_eq!(exit_code(&nested), 2);
    }
}
