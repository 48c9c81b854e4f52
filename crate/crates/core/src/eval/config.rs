use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::calibration::{CalibrationTrainConfig, Toggles};
use crate::distillation::DistillConfig;
use crate::error::{Error, Result};
use crate::eval::metrics::GroupThresholds;

/// One of the eight ablation rows, named by which server components are on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AblationRow {
    A,
    B,
    C,
    D,
    E,
    F,
    G,
    H,
}

impl AblationRow {
    pub const ALL: [AblationRow; 8] = [Self::A, Self::B, Self::C, Self::D, Self::E, Self::F, Self::G, Self::H];
    /// Rows that stop at the teacher.
    pub const TEACHER_ONLY: [AblationRow; 4] = [Self::A, Self::B, Self::C, Self::D];

    fn bits(self) -> u8 {
        self as u8
    }

    pub fn fine_tune(self) -> bool {
        self.bits() & 1 != 0
    }

    pub fn logit_adjust(self) -> bool {
        self.bits() & 2 != 0
    }

    pub fn distill(self) -> bool {
        self.bits() & 4 != 0
    }

    pub fn toggles(self) -> Toggles {
        Toggles {
            fine_tune: self.fine_tune(),
            logit_adjust: self.logit_adjust(),
        }
    }

    pub fn letter(self) -> char {
        (b'a' + self.bits()) as char
    }

    pub fn from_letter(c: char) -> Option<Self> {
        Self::ALL.into_iter().find(|r| r.letter() == c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    FedAvg,
    /// Every server component on; same as ablation row `h`.
    Fedic,
    Ablation(AblationRow),
}

impl Method {
    /// Server plan: teacher toggles and whether to distill. `None` for FedAvg.
    pub fn server_plan(self) -> Option<(Toggles, bool)> {
        match self {
            Method::FedAvg => None,
            Method::Fedic => Some((Toggles::ALL, true)),
            Method::Ablation(r) => Some((r.toggles(), r.distill())),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::FedAvg => f.write_str("fedavg"),
            Method::Fedic => f.write_str("fedic"),
            Method::Ablation(r) => write!(f, "ablation-{}", r.letter()),
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fedavg" => Ok(Method::FedAvg),
            "fedic" => Ok(Method::Fedic),
            _ => s
                .strip_prefix("ablation-")
                .and_then(|rest| {
                    let mut chars = rest.chars();
                    match (chars.next(), chars.next()) {
                        (Some(c), None) => AblationRow::from_letter(c),
                        _ => None,
                    }
                })
                .map(Method::Ablation)
                .ok_or_else(|| Error::Config(format!("unknown method {s:?}; expected fedavg, fedic or ablation-a..h"))),
        }
    }
}

impl Serialize for Method {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Method {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// Gaussian clusters drawn per seed. The labeled pool holds `pool_per_class`
    /// samples per class before the test/aux splits and long-tail shaping.
    Synthetic {
        class_count: usize,
        feature_dim: usize,
        cluster_spread: f64,
        #[serde(default)]
        pool_per_class: Option<usize>,
    },
    /// Pre-generated FLTD files. `pool` must be balanced enough to supply the
    /// aux split and the head count.
    Files {
        pool: PathBuf,
        test: PathBuf,
        unlabeled: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LongTailSettings {
    pub imbalance_factor: f64,
    pub head_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    /// Held out per class before shaping; ignored for file sources.
    #[serde(default)]
    pub test_per_class: usize,
    #[serde(default = "default_aux_per_class")]
    pub aux_per_class: usize,
    /// Number of unlabeled server samples; ignored for file sources.
    #[serde(default)]
    pub ulb_size: usize,
    pub long_tail: LongTailSettings,
}

fn default_aux_per_class() -> usize {
    32
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionSettings {
    pub client_count: usize,
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSettings {
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoundSettings {
    pub total_rounds: usize,
    pub active_ratio: f64,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub local_lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub partition: PartitionSettings,
    pub model: ModelSettings,
    pub rounds: RoundSettings,
    #[serde(default)]
    pub calibration: CalibrationTrainConfig,
    #[serde(default)]
    pub distillation: DistillConfig,
    pub method: Method,
    #[serde(default)]
    pub groups: GroupThresholds,
    pub seeds: Vec<u64>,
    /// Evaluate every n-th round; the final round is always evaluated.
    #[serde(default = "one")]
    pub eval_every: usize,
    /// Also evaluate teacher rows a..d on the final round's local models.
    #[serde(default)]
    pub evaluate_ablation_teachers: bool,
    /// Write final local, aggregated and global checkpoints per seed.
    #[serde(default)]
    pub save_models: bool,
    /// Record real per-round wall time. Off by default so result files stay
    /// byte-identical across runs; `wall_ms` is then 0.
    #[serde(default)]
    pub record_wall_time: bool,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

fn one() -> usize {
    1
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn class_count(&self) -> Option<usize> {
        match &self.data.source {
            DataSource::Synthetic { class_count, .. } => Some(*class_count),
            DataSource::Files { .. } => None,
        }
    }

    /// Pool size per class for synthetic sources.
    pub fn pool_per_class(&self) -> usize {
        match &self.data.source {
            DataSource::Synthetic {
                pool_per_class: Some(n), ..
            } => *n,
            _ => self.data.test_per_class + self.data.aux_per_class + self.data.long_tail.head_count,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.seeds.is_empty() {
            return bad("seeds must not be empty".into());
        }
        if self.eval_every == 0 {
            return bad("eval_every must be >= 1".into());
        }
        if self.model.feature_dim == 0 || self.model.hidden.contains(&0) {
            return bad("model widths must be positive".into());
        }
        if self.groups.few_below > self.groups.many_above + 1 {
            return bad(format!(
                "groups.few_below ({}) must not exceed groups.many_above + 1 ({})",
                self.groups.few_below,
                self.groups.many_above + 1
            ));
        }
        if let DataSource::Synthetic {
            class_count,
            feature_dim,
            cluster_spread,
            ..
        } = &self.data.source
        {
            if *class_count < 2 || *feature_dim == 0 {
                return bad("synthetic source needs class_count >= 2 and feature_dim >= 1".into());
            }
            if !(*cluster_spread >= 0.0) || !cluster_spread.is_finite() {
                return bad(format!("cluster_spread must be finite and >= 0, got {cluster_spread}"));
            }
            if self.data.test_per_class == 0 {
                return bad("synthetic source needs test_per_class >= 1".into());
            }
            let need = self.data.test_per_class + self.data.aux_per_class + self.data.long_tail.head_count;
            if self.pool_per_class() < need {
                return bad(format!(
                    "pool_per_class {} is below test_per_class + aux_per_class + head_count = {need}",
                    self.pool_per_class()
                ));
            }
        }
        let lt = &self.data.long_tail;
        if !(lt.imbalance_factor >= 1.0) || !lt.imbalance_factor.is_finite() || lt.head_count == 0 {
            return bad("long_tail needs imbalance_factor >= 1 and head_count >= 1".into());
        }
        if self.partition.client_count == 0 || !(self.partition.alpha > 0.0) || !self.partition.alpha.is_finite() {
            return bad("partition needs client_count >= 1 and alpha > 0".into());
        }
        self.round_config(0).validate().map_err(|e| Error::Config(e.to_string()))?;
        if let Some((_, kd)) = self.method.server_plan() {
            if self.data.aux_per_class == 0 {
                return bad(format!("method {} needs aux_per_class >= 1", self.method));
            }
            self.calibration.validate().map_err(|e| Error::Config(e.to_string()))?;
            if kd {
                self.distillation.validate().map_err(|e| Error::Config(e.to_string()))?;
                if self.distillation.lambda > 0.0 && self.data.ulb_size == 0 && self.class_count().is_some() {
                    return bad(format!("method {} distills with lambda > 0 and needs ulb_size >= 1", self.method));
                }
            }
        }
        if self.evaluate_ablation_teachers && self.data.aux_per_class == 0 {
            return bad("evaluate_ablation_teachers needs aux_per_class >= 1".into());
        }
        Ok(())
    }

    pub fn round_config(&self, seed: u64) -> crate::fed::RoundConfig {
        crate::fed::RoundConfig {
            total_rounds: self.rounds.total_rounds,
            client_count: self.partition.client_count,
            active_ratio: self.rounds.active_ratio,
            local_epochs: self.rounds.local_epochs,
            batch_size: self.rounds.batch_size,
            local_lr: self.rounds.local_lr,
            seed,
        }
    }
}

/// Input for `gen-data`: one FLTD file drawn from Gaussian clusters. Files
/// sharing `cluster_seed` share class means, so a pool, a test set and an
/// unlabeled corpus for one task differ only in `sample_seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenDataSpec {
    pub class_count: usize,
    pub feature_dim: usize,
    pub per_class: usize,
    pub cluster_spread: f64,
    pub cluster_seed: u64,
    pub sample_seed: u64,
    #[serde(default)]
    pub long_tail: Option<LongTailSettings>,
    /// Drop labels and write an unlabeled file.
    #[serde(default)]
    pub unlabeled: bool,
}

impl GenDataSpec {
    pub fn generate(&self) -> Result<crate::data::Dataset> {
        use crate::data::{make_unlabeled, shape_long_tail, GaussianClusters, LongTailSpec};
        if self.per_class == 0 {
            return Err(Error::invalid("per_class must be positive"));
        }
        let clusters = GaussianClusters::draw(self.class_count, self.feature_dim, self.cluster_seed)?;
        let mut ds = clusters.sample(self.per_class, self.cluster_spread, self.sample_seed)?;
        if let Some(lt) = &self.long_tail {
            let spec = LongTailSpec {
                imbalance_factor: lt.imbalance_factor,
                head_count: lt.head_count,
                class_count: self.class_count,
            };
            ds = shape_long_tail(&ds, &spec, self.sample_seed)?;
        }
        Ok(if self.unlabeled {
            make_unlabeled(&ds).into()
        } else {
            ds.into()
        })
    }
}
