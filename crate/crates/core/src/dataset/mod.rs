//! Corpus files, featurization, synthetic generation and splitting.

pub mod features;
pub mod split;
pub mod synth;

use std::collections::BTreeMap;
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::concept_net::{ConceptNet, NetError};
use crate::paths::PathError;
use crate::records::{Behavior, Sample, UserProfile};

pub use features::{build_model_input, build_model_input_traced, featurize_behavior, ModelInput, PathFeature, PathNode, SamplerConfig, Vocab};
pub use split::{split_by_day, Split, SplitConfig};
pub use synth::{generate_synthetic, SynthConfig, SynthOutput};

pub const NET_FILE: &str = "conceptnet.jsonl";
pub const USERS_FILE: &str = "users.jsonl";
pub const BEHAVIORS_FILE: &str = "behaviors.jsonl";
pub const SAMPLES_FILE: &str = "samples.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum DataError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Path(#[from] PathError),
    #[error("behavior at {time} is later than the snapshot {now}")]
    FutureBehavior { time: i64, now: i64 },
    #[error("unknown user {0}")]
    UnknownUser(u32),
    #[error("unknown concept {0}")]
    UnknownConcept(u32),
    #[error("invalid config field `{field}`: {reason}")]
    InvalidConfig { field: &'static str, reason: String },
    #[error("infeasible config: {0}")]
    Infeasible(String),
    #[error("samples span {found} distinct days but at least {needed} are required")]
    InsufficientDays { found: usize, needed: usize },
    #[error("{file} line {line}: {message}")]
    Parse { file: String, line: usize, message: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Reads one JSON value per non-blank line.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, DataError> {
    let file = std::fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (n, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| DataError::Parse {
            file: path.display().to_string(),
            line: n + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn write_jsonl<'a, T: Serialize + 'a>(path: &Path, items: impl IntoIterator<Item = &'a T>) -> Result<usize, DataError> {
    let mut w = BufWriter::new(std::fs::File::create(path).map_err(io_err(path))?);
    let mut n = 0;
    for item in items {
        serde_json::to_writer(&mut w, item).map_err(|e| DataError::Io {
            path: path.display().to_string(),
            source: e.into(),
        })?;
        w.write_all(b"\n").map_err(io_err(path))?;
        n += 1;
    }
    w.flush().map_err(io_err(path))?;
    Ok(n)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), DataError> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    std::fs::write(path, text).map_err(io_err(path))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, DataError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| DataError::Parse {
        file: path.display().to_string(),
        line: e.line(),
        message: e.to_string(),
    })
}

/// Line counts of each corpus file.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub conceptnet: usize,
    pub users: usize,
    pub behaviors: usize,
    pub samples: usize,
    pub positives: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub config: SynthConfig,
    pub counts: Counts,
}

/// A loaded dataset directory.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub net: ConceptNet,
    pub profiles: BTreeMap<u32, UserProfile>,
    /// Per user, ascending by time.
    pub behaviors: BTreeMap<u32, Vec<Behavior>>,
    pub samples: Vec<Sample>,
}

impl Corpus {
    /// Groups and sorts behaviors, then checks cross-references.
    pub fn new(net: ConceptNet, profiles: Vec<UserProfile>, behaviors: Vec<Behavior>, samples: Vec<Sample>) -> Result<Self, DataError> {
        let mut by_user: BTreeMap<u32, Vec<Behavior>> = BTreeMap::new();
        for b in behaviors {
            by_user.entry(b.user).or_default().push(b);
        }
        for list in by_user.values_mut() {
            list.sort_by_key(|b| (b.time, b.item, b.kind));
        }
        let mut map = BTreeMap::new();
        for p in profiles {
            if let Some(w) = p.bad_weight() {
                return Err(DataError::InvalidConfig {
                    field: "preference weight",
                    reason: format!("user {} has weight {w} outside (0, 1]", p.user),
                });
            }
            map.insert(p.user, p);
        }
        for s in &samples {
            if s.label > 1 {
                return Err(DataError::InvalidConfig {
                    field: "label",
                    reason: format!("sample for user {} has label {}", s.user, s.label),
                });
            }
            if !map.contains_key(&s.user) {
                return Err(DataError::UnknownUser(s.user));
            }
            if net.concept(s.concept).is_none() {
                return Err(DataError::UnknownConcept(s.concept));
            }
        }
        Ok(Self {
            net,
            profiles: map,
            behaviors: by_user,
            samples,
        })
    }

    pub fn load(dir: &Path) -> Result<Self, DataError> {
        let net = ConceptNet::load(&dir.join(NET_FILE))?;
        let profiles = read_jsonl(&dir.join(USERS_FILE))?;
        let behaviors = read_jsonl(&dir.join(BEHAVIORS_FILE))?;
        let samples = read_jsonl(&dir.join(SAMPLES_FILE))?;
        Self::new(net, profiles, behaviors, samples)
    }

    /// Writes the four data files and returns their line counts.
    pub fn save(&self, dir: &Path) -> Result<Counts, DataError> {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        self.net.save(&dir.join(NET_FILE))?;
        Ok(Counts {
            conceptnet: self.net.records().len(),
            users: write_jsonl(&dir.join(USERS_FILE), self.profiles.values())?,
            behaviors: write_jsonl(&dir.join(BEHAVIORS_FILE), self.behaviors.values().flatten())?,
            samples: write_jsonl(&dir.join(SAMPLES_FILE), &self.samples)?,
            positives: self.samples.iter().filter(|s| s.label == 1).count(),
        })
    }

    pub fn profile(&self, user: u32) -> Result<&UserProfile, DataError> {
        self.profiles.get(&user).ok_or(DataError::UnknownUser(user))
    }

    pub fn user_behaviors(&self, user: u32) -> &[Behavior] {
        self.behaviors.get(&user).map_or(&[], Vec::as_slice)
    }

    pub fn model_input(&self, user: u32, concept: u32, now: i64, cfg: SamplerConfig) -> Result<ModelInput, DataError> {
        build_model_input(self.profile(user)?, self.user_behaviors(user), concept, &self.net, now, cfg)
    }

    pub fn model_inputs(&self, samples: &[Sample], cfg: SamplerConfig) -> Result<Vec<ModelInput>, DataError> {
        samples.iter().map(|s| self.model_input(s.user, s.concept, s.time, cfg)).collect()
    }

    /// Latest snapshot time among samples, used as "now" for inference.
    pub fn latest_time(&self) -> Option<i64> {
        self.samples.iter().map(|s| s.time).max()
    }
}
