//! The three-tower concept model.
//!
//! A user tower (behavior transformer plus profile aspects), a concept tower
//! (id plus schema aspects) and a path tower (one CNN per meta-path) are
//! coupled by an attention cube that weighs profile aspects, meta-paths and
//! schema aspects against each other. An MLP scores the concatenation.

mod forward;

use std::fmt;
use std::str::FromStr;

use ecn_tensor::{ParamId, ParamStore, Real, Tensor, TensorError};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::features::{Vocab, BEHAVIOR_TYPES, DAY_GAP_BUCKETS};
use crate::paths::{MetaPath, PathKind};
use crate::records::{ConceptSchema, UserProfile};

pub use forward::{attention_cube, attention_pool, bce_loss, BatchOutput, ForwardTrace};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid model config `{field}`: {reason}")]
    Config { field: &'static str, reason: String },
    #[error("{feature} index {index} out of vocabulary (size {size})")]
    Index {
        feature: &'static str,
        index: usize,
        size: usize,
    },
    #[error("{meta_path} instance has a {found} node at position {position}")]
    NodeKind {
        meta_path: MetaPath,
        position: usize,
        found: String,
    },
    #[error("{meta_path} has {count} instances, more than k_paths = {limit}")]
    TooManyPaths {
        meta_path: MetaPath,
        count: usize,
        limit: usize,
    },
    #[error("{count} behaviors exceed seq_len = {limit}")]
    TooManyBehaviors { count: usize, limit: usize },
    #[error("label {0} is not 0 or 1")]
    Label(u8),
    #[error("empty batch")]
    EmptyBatch,
    #[error("parameter `{name}` {problem}")]
    Census { name: String, problem: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    #[default]
    Cube,
    /// Uniform weights everywhere; the cube matrices are ignored.
    Average,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Index spaces of the net the model is trained on.
    pub vocab: Vocab,
    pub d_entity: usize,
    pub d_type: usize,
    pub d_day_gap: usize,
    pub d_output: usize,
    pub seq_len: usize,
    pub k_paths: usize,
    /// Meta-paths fed to the model. The cube always keeps five slots;
    /// a disabled meta-path is an absent one.
    pub meta_paths: Vec<MetaPath>,
    pub layers: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub d_path: usize,
    pub kernel_width: usize,
    pub mlp: Vec<usize>,
    pub attention: AttentionMode,
    pub use_behavior_seq: bool,
    /// With the profile off the cube's user axis collapses to one zero slot.
    pub use_profile: bool,
    pub use_schema: bool,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab: Vocab {
                categories: 0,
                brands: 0,
                shops: 0,
                concepts: 0,
            },
            d_entity: 20,
            d_type: 4,
            d_day_gap: 4,
            d_output: 32,
            seq_len: 15,
            k_paths: 50,
            meta_paths: MetaPath::ALL.to_vec(),
            layers: 1,
            heads: 2,
            d_ff: 64,
            d_path: 20,
            kernel_width: 2,
            mlp: vec![64, 32],
            attention: AttentionMode::Cube,
            use_behavior_seq: true,
            use_profile: true,
            use_schema: true,
            init_std: 0.01,
        }
    }
}

impl ModelConfig {
    pub fn for_vocab(vocab: Vocab) -> Self {
        Self {
            vocab,
            ..Self::default()
        }
    }

    /// Width of one concatenated behavior row.
    pub fn d_behavior(&self) -> usize {
        3 * self.d_entity + self.d_type + self.d_day_gap
    }

    /// Transformer width: the behavior width rounded up to a multiple of
    /// `heads`; the extra columns are zero padding.
    pub fn d_model(&self) -> usize {
        self.d_behavior().div_ceil(self.heads) * self.heads
    }

    pub fn uses(&self, mp: MetaPath) -> bool {
        self.meta_paths.contains(&mp)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |field, reason: &str| {
            Err(ModelError::Config {
                field,
                reason: reason.to_string(),
            })
        };
        for (field, v) in [
            ("d_entity", self.d_entity),
            ("d_type", self.d_type),
            ("d_day_gap", self.d_day_gap),
            ("d_output", self.d_output),
            ("seq_len", self.seq_len),
            ("k_paths", self.k_paths),
            ("heads", self.heads),
            ("d_ff", self.d_ff),
            ("d_path", self.d_path),
            ("kernel_width", self.kernel_width),
            ("vocab.concepts", self.vocab.concepts),
        ] {
            if v == 0 {
                return bad(field, "must be positive");
            }
        }
        if self.mlp.contains(&0) {
            return bad("mlp", "hidden sizes must be positive");
        }
        if self.kernel_width > 3 {
            return bad("kernel_width", "the shortest meta-path has 3 nodes");
        }
        if !(self.init_std >= 0.0 && self.init_std.is_finite()) {
            return bad("init_std", "must be finite and non-negative");
        }
        Ok(())
    }
}

/// Named ablations, each a switch on [`ModelConfig`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Full,
    NoBehaviorPaths,
    NoPreferencePaths,
    NoAllPaths,
    NoBehaviorSeq,
    NoProfile,
    NoSchema,
    NoAttCube,
}

impl Variant {
    pub const ALL: [Variant; 8] = [
        Variant::Full,
        Variant::NoBehaviorPaths,
        Variant::NoPreferencePaths,
        Variant::NoAllPaths,
        Variant::NoBehaviorSeq,
        Variant::NoProfile,
        Variant::NoSchema,
        Variant::NoAttCube,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoBehaviorPaths => "no-behavior-paths",
            Variant::NoPreferencePaths => "no-preference-paths",
            Variant::NoAllPaths => "no-all-paths",
            Variant::NoBehaviorSeq => "no-behavior-seq",
            Variant::NoProfile => "no-profile",
            Variant::NoSchema => "no-schema",
            Variant::NoAttCube => "no-att-cube",
        }
    }

    pub fn apply(self, mut cfg: ModelConfig) -> ModelConfig {
        match self {
            Variant::Full => {}
            Variant::NoBehaviorPaths => cfg.meta_paths.retain(|m| m.kind() != PathKind::Behavior),
            Variant::NoPreferencePaths => cfg.meta_paths.retain(|m| m.kind() != PathKind::Preference),
            Variant::NoAllPaths => cfg.meta_paths.clear(),
            Variant::NoBehaviorSeq => cfg.use_behavior_seq = false,
            Variant::NoProfile => cfg.use_profile = false,
            Variant::NoSchema => cfg.use_schema = false,
            Variant::NoAttCube => cfg.attention = AttentionMode::Average,
        }
        cfg
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Error)]
#[error("unknown variant `{0}`")]
pub struct UnknownVariant(pub String);

impl FromStr for Variant {
    type Err = UnknownVariant;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| UnknownVariant(s.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    Normal,
    Zeros,
    Ones,
}

/// One entry of the parameter census.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

pub const BEHAVIOR_FEATURES: [&str; 5] = ["category", "brand", "shop", "type", "day_gap"];
pub const PROFILE_ASPECTS: [&str; 4] = ["gender", "age_level", "kid_gender", "kid_life_stage"];
pub const SCHEMA_ASPECTS: [&str; 3] = ["gender", "life_stage", "age_level"];
pub const NODE_TYPES: [&str; 5] = ["user", "item", "category", "brand", "concept"];
const LAYER_PARAMS: [&str; 12] = [
    "wq", "wk", "wv", "wo", "ln1.gain", "ln1.bias", "ff1.weight", "ff1.bias", "ff2.weight", "ff2.bias", "ln2.gain",
    "ln2.bias",
];

/// Every tensor of the model with its shape, in creation order. The set is
/// the same for all ablations; switched-off parts simply get no gradient.
pub fn parameter_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let v = cfg.vocab;
    let (de, dm, dp, dout) = (cfg.d_entity, cfg.d_model(), cfg.d_path, cfg.d_output);
    let mut out = Vec::new();
    let mut add = |name: String, shape: Vec<usize>, init: Init| out.push(ParamSpec { name, shape, init });
    let behavior_rows = [v.categories + 1, v.brands + 1, v.shops + 1, BEHAVIOR_TYPES, DAY_GAP_BUCKETS];
    let behavior_dims = [de, de, de, cfg.d_type, cfg.d_day_gap];
    for i in 0..5 {
        add(format!("behavior.{}", BEHAVIOR_FEATURES[i]), vec![behavior_rows[i], behavior_dims[i]], Init::Normal);
    }
    for (name, rows) in PROFILE_ASPECTS.iter().zip(UserProfile::vocab_sizes()) {
        add(format!("profile.{name}"), vec![rows, de], Init::Normal);
    }
    for (name, rows) in SCHEMA_ASPECTS.iter().zip(ConceptSchema::vocab_sizes()) {
        add(format!("schema.{name}"), vec![rows, de], Init::Normal);
    }
    add("concept.id".into(), vec![v.concepts, de], Init::Normal);
    add("path.category_id".into(), vec![v.categories + 1, de], Init::Normal);
    add("path.brand_id".into(), vec![v.brands + 1, de], Init::Normal);
    add("encoder.position".into(), vec![cfg.seq_len, dm], Init::Normal);
    for l in 0..cfg.layers {
        for p in LAYER_PARAMS {
            let (shape, init) = match p {
                "wq" | "wk" | "wv" | "wo" => (vec![dm, dm], Init::Normal),
                "ln1.gain" | "ln2.gain" => (vec![dm], Init::Ones),
                "ln1.bias" | "ln2.bias" | "ff2.bias" => (vec![dm], Init::Zeros),
                "ff1.weight" => (vec![dm, cfg.d_ff], Init::Normal),
                "ff1.bias" => (vec![cfg.d_ff], Init::Zeros),
                "ff2.weight" => (vec![cfg.d_ff, dm], Init::Normal),
                _ => unreachable!(),
            };
            add(format!("encoder.{l}.{p}"), shape, init);
        }
    }
    let node_in = [dm, 3 * de, de, de, de];
    for (name, d_in) in NODE_TYPES.iter().zip(node_in) {
        add(format!("path.proj.{name}"), vec![d_in, dp], Init::Normal);
    }
    for mp in MetaPath::ALL {
        let key = mp.name().to_lowercase();
        add(format!("path.cnn.{key}.kernel"), vec![cfg.kernel_width, dp, dp], Init::Normal);
        add(format!("path.cnn.{key}.bias"), vec![dp], Init::Zeros);
    }
    add("cube.w1".into(), vec![de, dp], Init::Normal);
    add("cube.w2".into(), vec![dp, de], Init::Normal);
    add("cube.w3".into(), vec![de, de], Init::Normal);
    add("user_fc.weight".into(), vec![dm + de, dout], Init::Normal);
    add("user_fc.bias".into(), vec![dout], Init::Zeros);
    add("concept_fc.weight".into(), vec![2 * de, dout], Init::Normal);
    add("concept_fc.bias".into(), vec![dout], Init::Zeros);
    let mut d_in = 2 * dout + dp;
    for (i, &h) in cfg.mlp.iter().chain(&[1]).enumerate() {
        add(format!("mlp.{i}.weight"), vec![d_in, h], Init::Normal);
        add(format!("mlp.{i}.bias"), vec![h], Init::Zeros);
        d_in = h;
    }
    out
}

pub(crate) struct LayerIds {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub ln1: (ParamId, ParamId),
    pub ff1: (ParamId, ParamId),
    pub ff2: (ParamId, ParamId),
    pub ln2: (ParamId, ParamId),
}

/// Resolved handles into the parameter store.
pub(crate) struct Ids {
    pub behavior: [ParamId; 5],
    pub profile: [ParamId; 4],
    pub schema: [ParamId; 3],
    pub concept: ParamId,
    pub path_category: ParamId,
    pub path_brand: ParamId,
    pub position: ParamId,
    pub layers: Vec<LayerIds>,
    pub proj: [ParamId; 5],
    pub cnn: [(ParamId, ParamId); 5],
    pub cube: [ParamId; 3],
    pub user_fc: (ParamId, ParamId),
    pub concept_fc: (ParamId, ParamId),
    pub mlp: Vec<(ParamId, ParamId)>,
}

impl Ids {
    fn resolve<T: Real>(cfg: &ModelConfig, store: &ParamStore<T>) -> Result<Self, ModelError> {
        let id = |name: String| {
            store.id(&name).ok_or(ModelError::Census {
                name,
                problem: "is missing".into(),
            })
        };
        let arr = |prefix: &str, names: &[&str]| -> Result<Vec<ParamId>, ModelError> {
            names.iter().map(|n| id(format!("{prefix}.{n}"))).collect()
        };
        let pair = |prefix: String, a: &str, b: &str| -> Result<(ParamId, ParamId), ModelError> {
            Ok((id(format!("{prefix}.{a}"))?, id(format!("{prefix}.{b}"))?))
        };
        let layers = (0..cfg.layers)
            .map(|l| {
                let p = |n: &str| id(format!("encoder.{l}.{n}"));
                Ok(LayerIds {
                    wq: p("wq")?,
                    wk: p("wk")?,
                    wv: p("wv")?,
                    wo: p("wo")?,
                    ln1: pair(format!("encoder.{l}.ln1"), "gain", "bias")?,
                    ff1: pair(format!("encoder.{l}.ff1"), "weight", "bias")?,
                    ff2: pair(format!("encoder.{l}.ff2"), "weight", "bias")?,
                    ln2: pair(format!("encoder.{l}.ln2"), "gain", "bias")?,
                })
            })
            .collect::<Result<_, ModelError>>()?;
        let cnn = MetaPath::ALL
            .map(|mp| pair(format!("path.cnn.{}", mp.name().to_lowercase()), "kernel", "bias"));
        let [c0, c1, c2, c3, c4] = cnn;
        Ok(Self {
            behavior: arr("behavior", &BEHAVIOR_FEATURES)?.try_into().unwrap(),
            profile: arr("profile", &PROFILE_ASPECTS)?.try_into().unwrap(),
            schema: arr("schema", &SCHEMA_ASPECTS)?.try_into().unwrap(),
            concept: id("concept.id".into())?,
            path_category: id("path.category_id".into())?,
            path_brand: id("path.brand_id".into())?,
            position: id("encoder.position".into())?,
            layers,
            proj: arr("path.proj", &NODE_TYPES)?.try_into().unwrap(),
            cnn: [c0?, c1?, c2?, c3?, c4?],
            cube: arr("cube", &["w1", "w2", "w3"])?.try_into().unwrap(),
            user_fc: pair("user_fc".into(), "weight", "bias")?,
            concept_fc: pair("concept_fc".into(), "weight", "bias")?,
            mlp: (0..=cfg.mlp.len())
                .map(|i| pair(format!("mlp.{i}"), "weight", "bias"))
                .collect::<Result<_, _>>()?,
        })
    }
}

/// Configuration plus parameters.
pub struct Model<T: Real> {
    config: ModelConfig,
    params: ParamStore<T>,
    ids: Ids,
}

impl<T: Real> Model<T> {
    /// Fresh parameters: Gaussian(0, init_std) weights, zero biases, unit
    /// layer-norm gains.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for spec in parameter_specs(&config) {
            let t = match spec.init {
                Init::Normal => Tensor::randn(spec.shape, config.init_std, &mut rng),
                Init::Zeros => Tensor::zeros(spec.shape),
                Init::Ones => Tensor::ones(spec.shape),
            };
            params.insert(spec.name, t);
        }
        Self::from_params(config, params)
    }

    /// Wraps existing parameters after checking them against the census.
    pub fn from_params(config: ModelConfig, params: ParamStore<T>) -> Result<Self, ModelError> {
        config.validate()?;
        let specs = parameter_specs(&config);
        for spec in &specs {
            match params.by_name(&spec.name) {
                None => {
                    return Err(ModelError::Census {
                        name: spec.name.clone(),
                        problem: "is missing".into(),
                    })
                }
                Some(t) if t.shape() != spec.shape.as_slice() => {
                    return Err(ModelError::Census {
                        name: spec.name.clone(),
                        problem: format!("has shape {:?}, config expects {:?}", t.shape(), spec.shape),
                    })
                }
                Some(_) => {}
            }
        }
        if params.len() != specs.len() {
            let extra = params
                .iter()
                .map(|(_, n, _)| n)
                .find(|n| !specs.iter().any(|s| s.name == *n))
                .unwrap_or_default()
                .to_string();
            return Err(ModelError::Census {
                name: extra,
                problem: "is not part of the model".into(),
            });
        }
        let ids = Ids::resolve(&config, &params)?;
        Ok(Self { config, params, ids })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore<T> {
        self.params
    }
}
