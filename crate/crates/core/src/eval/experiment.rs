use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::index;
use rayon::prelude::*;
use serde::Serialize;

use crate::calibration::{train_calibration, CalibrationParams, CalibrationTrainConfig, TeacherState, Toggles};
use crate::data::{
    dirichlet_partition, load_dataset, shape_long_tail, split_aux, Dataset, GaussianClusters, LabeledDataset,
    LongTailSpec, Partition, PartitionSpec, UnlabeledDataset,
};
use crate::distillation::{distill, DistillConfig};
use crate::error::{Error, Result, StageExt};
use crate::eval::checkpoint::save_model;
use crate::eval::config::{AblationRow, DataSource, ExperimentConfig};
use crate::eval::metrics::{evaluate, group_classes, EvalMetrics, Group};
use crate::fed::{run_round, FederationState, ServerContext, ServerStage};
use crate::nn::{Architecture, MlpModel};
use crate::rng::{derive_seed, rng_for, stream};

/// Everything a seed's run needs, built from the config.
#[derive(Debug, Clone)]
pub struct PreparedData {
    /// Long-tailed training set before partitioning.
    pub train: LabeledDataset,
    pub aux: LabeledDataset,
    pub test: LabeledDataset,
    pub ulb: UnlabeledDataset,
    pub partition: Partition,
    pub groups: Vec<Group>,
}

fn load_labeled(path: &Path) -> Result<LabeledDataset> {
    match load_dataset(path)? {
        Dataset::Labeled(d) => Ok(d),
        Dataset::Unlabeled(_) => Err(Error::invalid(format!("{} is unlabeled, expected labels", path.display()))),
    }
}

fn load_unlabeled(path: &Path) -> Result<UnlabeledDataset> {
    match load_dataset(path)? {
        Dataset::Unlabeled(d) => Ok(d),
        Dataset::Labeled(d) => Ok(crate::data::make_unlabeled(&d)),
    }
}

/// pool → test split → balanced aux split → long-tail shaping → partition;
/// the unlabeled corpus is drawn separately.
pub fn prepare_data(cfg: &ExperimentConfig, seed: u64) -> Result<PreparedData> {
    let (pool, test, ulb) = match &cfg.data.source {
        DataSource::Synthetic {
            class_count,
            feature_dim,
            cluster_spread,
            ..
        } => {
            let clusters = GaussianClusters::draw(*class_count, *feature_dim, derive_seed(seed, &[stream::DATA_POOL]))?;
            let pool = clusters.sample(cfg.pool_per_class(), *cluster_spread, derive_seed(seed, &[stream::DATA_POOL, 1]))?;
            let (test, rest) = split_aux(&pool, cfg.data.test_per_class, derive_seed(seed, &[stream::SPLIT_TEST]))?;
            let per_class = cfg.data.ulb_size.div_ceil(*class_count);
            let drawn = clusters.sample(per_class, *cluster_spread, derive_seed(seed, &[stream::UNLABELED]))?;
            let mut rng = rng_for(seed, &[stream::UNLABELED, 1]);
            let mut keep = index::sample(&mut rng, drawn.len(), cfg.data.ulb_size).into_vec();
            keep.sort_unstable();
            let ulb = crate::data::make_unlabeled(&drawn.select(&keep));
            (rest, test, ulb)
        }
        DataSource::Files { pool, test, unlabeled } => (load_labeled(pool)?, load_labeled(test)?, load_unlabeled(unlabeled)?),
    };
    if test.feature_dim() != pool.feature_dim() || test.class_count() != pool.class_count() {
        return Err(Error::invalid("test set shape does not match the training pool"));
    }
    if !ulb.is_empty() && ulb.feature_dim() != pool.feature_dim() {
        return Err(Error::invalid("unlabeled set feature_dim does not match the training pool"));
    }
    let (aux, rest) = split_aux(&pool, cfg.data.aux_per_class, derive_seed(seed, &[stream::SPLIT_AUX]))?;
    let lt = LongTailSpec {
        imbalance_factor: cfg.data.long_tail.imbalance_factor,
        head_count: cfg.data.long_tail.head_count,
        class_count: pool.class_count(),
    };
    let train = shape_long_tail(&rest, &lt, derive_seed(seed, &[stream::LONG_TAIL]))?;
    let partition = dirichlet_partition(
        &train,
        &PartitionSpec {
            client_count: cfg.partition.client_count,
            alpha: cfg.partition.alpha,
            seed: derive_seed(seed, &[stream::PARTITION]),
        },
    )?;
    let groups = group_classes(train.class_counts(), &cfg.groups);
    Ok(PreparedData {
        train,
        aux,
        test,
        ulb,
        partition,
        groups,
    })
}

/// Calibration (and optionally distillation) applied after aggregation.
pub struct FedicStage<'a> {
    aux: &'a LabeledDataset,
    ulb: &'a UnlabeledDataset,
    calibration: CalibrationTrainConfig,
    distillation: Option<&'a DistillConfig>,
    seed: u64,
    carried: Option<CalibrationParams<f32>>,
    /// Calibration parameters the last round started from.
    pub last_init: Option<CalibrationParams<f32>>,
    pub last_teacher: Option<TeacherState<f32>>,
    /// Aux loss of `z'` before and after the last round's calibration.
    pub last_losses: Option<(f64, f64)>,
}

impl<'a> FedicStage<'a> {
    pub fn new(
        aux: &'a LabeledDataset,
        ulb: &'a UnlabeledDataset,
        calibration: &CalibrationTrainConfig,
        toggles: Toggles,
        distillation: Option<&'a DistillConfig>,
        seed: u64,
    ) -> Self {
        Self {
            aux,
            ulb,
            calibration: CalibrationTrainConfig {
                toggles,
                ..calibration.clone()
            },
            distillation,
            seed,
            carried: None,
            last_init: None,
            last_teacher: None,
            last_losses: None,
        }
    }

    pub fn round_seed(seed: u64, round: usize) -> u64 {
        derive_seed(seed, &[stream::ROUNDS, round as u64])
    }
}

impl ServerStage<f32> for FedicStage<'_> {
    fn apply(&mut self, ctx: &ServerContext<'_, f32>) -> Result<MlpModel<f32>> {
        let seed = Self::round_seed(self.seed, ctx.round);
        let init = match (&self.carried, self.calibration.persist) {
            (Some(p), true) => p.clone(),
            _ => CalibrationParams::identity(ctx.aggregated.class_count(), ctx.aggregated.feature_dim()),
        };
        let outcome = train_calibration(ctx.local_models, ctx.aggregated, self.aux, &self.calibration, init.clone(), seed)
            .stage("calibration")?;
        self.last_losses = Some((outcome.initial_loss as f64, outcome.final_loss as f64));
        let state = outcome.into_teacher_state(self.calibration.toggles);
        self.carried = Some(state.params.clone());
        self.last_init = Some(init);
        let next = match self.distillation {
            Some(dcfg) => {
                let teacher = state.teacher(ctx.local_models);
                distill(ctx.aggregated, |x| teacher.logits(x), self.aux, self.ulb, dcfg, seed).stage("distillation")?
            }
            None => ctx.aggregated.clone(),
        };
        self.last_teacher = Some(state);
        Ok(next)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundRecord {
    pub round: usize,
    pub method: String,
    pub seed: u64,
    /// Broadcast global model.
    pub student: EvalMetrics,
    /// Calibrated teacher, for methods with a server stage.
    pub teacher: Option<EvalMetrics>,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeedResult {
    pub seed: u64,
    pub rounds: Vec<RoundRecord>,
    pub final_student: EvalMetrics,
    pub final_teacher: Option<EvalMetrics>,
    /// Teacher rows a..d recomputed on the final round, keyed by letter.
    pub ablation_teachers: BTreeMap<String, EvalMetrics>,
    pub train_class_counts: Vec<usize>,
    pub empty_clients: Vec<usize>,
    /// Selected clients that trained nothing because they hold no data.
    pub no_op_selections: usize,
    pub final_calibration_loss: Option<(f64, f64)>,
}

/// Full multi-seed run: per-seed results in seed-list order.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub config: ExperimentConfig,
    pub seeds: Vec<SeedResult>,
}

fn architecture(cfg: &ExperimentConfig, data: &PreparedData) -> Architecture {
    Architecture {
        input_dim: data.train.feature_dim(),
        hidden: cfg.model.hidden.clone(),
        feature_dim: cfg.model.feature_dim,
        class_count: data.train.class_count(),
    }
}

fn model_dir(out: &Path, seed: u64) -> PathBuf {
    out.join("models").join(format!("seed-{seed}"))
}

/// Runs one seed end to end. Checkpoints go under `models_out` when
/// `save_models` is set.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64, models_out: Option<&Path>) -> Result<SeedResult> {
    let data = prepare_data(cfg, seed).stage("data")?;
    let global = MlpModel::<f32>::init(&architecture(cfg, &data), seed).stage("model init")?;
    let round_cfg = cfg.round_config(seed);
    let mut state = FederationState::new(global, data.partition.clients.clone());
    let plan = cfg.method.server_plan();
    let mut stage = plan.map(|(toggles, kd)| {
        FedicStage::new(
            &data.aux,
            &data.ulb,
            &cfg.calibration,
            toggles,
            kd.then_some(&cfg.distillation),
            seed,
        )
    });
    let method = cfg.method.to_string();
    let total = cfg.rounds.total_rounds;
    if total == 0 {
        return Err(Error::Config("rounds.total_rounds must be >= 1".into()));
    }
    let mut rounds = Vec::new();
    let mut no_op_selections = 0;
    let mut last = None;
    for r in 0..total {
        let started = Instant::now();
        let out = run_round(
            &mut state,
            &round_cfg,
            stage.as_mut().map(|s| s as &mut dyn ServerStage<f32>),
        )
        .stage("round")?;
        no_op_selections += out.no_op_clients.len();
        if (r + 1) % cfg.eval_every == 0 || r + 1 == total {
            let student = evaluate(|x| out.global.logits(x), &data.test, &data.groups).stage("evaluation")?;
            let teacher = match stage.as_ref().and_then(|s| s.last_teacher.as_ref()) {
                Some(t) => {
                    let teacher = t.teacher(&out.local_models);
                    Some(evaluate(|x| teacher.logits(x), &data.test, &data.groups).stage("evaluation")?)
                }
                None => None,
            };
            let wall_ms = if cfg.record_wall_time {
                started.elapsed().as_millis() as u64
            } else {
                0
            };
            rounds.push(RoundRecord {
                round: r,
                method: method.clone(),
                seed,
                student,
                teacher,
                wall_ms,
            });
        }
        last = Some(out);
    }
    let last = last.expect("total_rounds >= 1");
    let final_record = rounds.last().expect("final round is always evaluated").clone();

    let mut ablation_teachers = BTreeMap::new();
    if cfg.evaluate_ablation_teachers {
        let init = stage
            .as_ref()
            .and_then(|s| s.last_init.clone())
            .unwrap_or_else(|| CalibrationParams::identity(last.aggregated.class_count(), last.aggregated.feature_dim()));
        let round_seed = FedicStage::round_seed(seed, last.round);
        for row in AblationRow::TEACHER_ONLY {
            let ccfg = CalibrationTrainConfig {
                toggles: row.toggles(),
                ..cfg.calibration.clone()
            };
            let outcome = train_calibration(&last.local_models, &last.aggregated, &data.aux, &ccfg, init.clone(), round_seed)
                .stage("calibration")?;
            let state = outcome.into_teacher_state(row.toggles());
            let teacher = state.teacher(&last.local_models);
            let m = evaluate(|x| teacher.logits(x), &data.test, &data.groups).stage("evaluation")?;
            ablation_teachers.insert(row.letter().to_string(), m);
        }
    }

    if cfg.save_models {
        if let Some(out) = models_out {
            let dir = model_dir(out, seed);
            std::fs::create_dir_all(&dir).map_err(Error::from).stage("output")?;
            for (k, m) in last.selected.iter().zip(&last.local_models) {
                save_model(m, &dir.join(format!("local-{k:03}.fltm"))).stage("output")?;
            }
            save_model(&last.aggregated, &dir.join("aggregated.fltm")).stage("output")?;
            save_model(&last.global, &dir.join("global.fltm")).stage("output")?;
        }
    }

    Ok(SeedResult {
        seed,
        final_student: final_record.student,
        final_teacher: final_record.teacher,
        rounds,
        ablation_teachers,
        train_class_counts: data.train.class_counts().to_vec(),
        empty_clients: data.partition.empty_clients.clone(),
        no_op_selections,
        final_calibration_loss: stage.as_ref().and_then(|s| s.last_losses),
    })
}

/// Runs every seed (in parallel) and, when `out` is given, writes the metrics
/// CSV and the JSON summary there.
pub fn run_experiment(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<MetricsReport> {
    cfg.validate()?;
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(Error::from).stage("output")?;
    }
    let seeds = cfg
        .seeds
        .par_iter()
        .map(|&s| run_seed(cfg, s, out))
        .collect::<Result<Vec<_>>>()?;
    let report = MetricsReport {
        config: cfg.clone(),
        seeds,
    };
    if let Some(dir) = out {
        crate::eval::report::write_outputs(&report, dir).stage("output")?;
    }
    Ok(report)
}
