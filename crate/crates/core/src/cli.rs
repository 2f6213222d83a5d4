//! Experiment configuration, named presets and the pipeline stages behind
//! the command-line tool.
//!
//! Every stage reads its inputs from and writes its outputs to a per-seed
//! directory, so running the stages one by one over the same directory
//! produces the same files as a single pipeline run. Timings are kept apart
//! in `timings.json`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::avae::{prediction_error, train_avae, write_curve_csv, AvaeConfig, AvaeModel, LatentModel, ModelError};
use crate::cluster::{cluster_actions, ActionPartition, ClusterError, ThresholdMode};
use crate::env::{
    gen_full_transitions, ood_split, ood_split_rightmost, subsample_iid, EnvError, Renderer, TransitionDataset,
};
use crate::gmavae::{column_entropies, train_gmavae, GmavaeConfig, GmavaeModel};
use crate::group::{ActionCatalog, FactorSpec, GroupElement, GroupError, GroupSpec};
use crate::metrics::{
    ari, block_independence, equivariance_error, infer_owner, mig, rollout_curve, sap, select_model, Equivariance,
    LatentFactorTable, MetricsError,
};
use crate::nn::{derive_seed, rng};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("missing input {}: run the {stage} stage first", path.display())]
    MissingInput { path: PathBuf, stage: &'static str },
    #[error(transparent)]
    Group(#[from] GroupError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CliError {
    /// Short machine-readable error class.
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) | CliError::Json(_) => "config",
            CliError::MissingInput { .. } => "missing_input",
            CliError::Model(ModelError::Diverged { .. }) => "diverged",
            CliError::Model(ModelError::Checkpoint(_)) => "checkpoint",
            CliError::Group(_) | CliError::Env(_) => "environment",
            CliError::Model(_) => "model",
            CliError::Cluster(_) => "cluster",
            CliError::Metrics(_) => "metrics",
            CliError::Io(_) => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

/// How the action set is built.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CatalogConfig {
    /// `+1` and `-1` for cyclic factors, every non-identity element of
    /// symmetric ones.
    PlusMinus {},
    /// One or two random elements per factor, drawn per seed until the
    /// composition requirement holds.
    Random {
        #[serde(default = "default_per_factor")]
        max_per_factor: usize,
        #[serde(default)]
        include_identity: bool,
    },
    Explicit { actions: Vec<ExplicitAction> },
}

fn default_per_factor() -> usize {
    2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExplicitAction {
    pub element: GroupElement,
    pub true_factor: usize,
}

/// Which transitions the models are trained on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetMode {
    Full {},
    /// `n_a` distinct actions per state.
    Iid { n_a: usize },
    /// Only transitions whose action id is listed.
    Ood { allowed: Vec<usize> },
    /// Only rotations of an object sitting in the rightmost tile, plus every
    /// permutation (dials renderer).
    OodRightmost {},
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterConfig {
    #[serde(default = "default_max_power")]
    pub max_power: usize,
    #[serde(default)]
    pub threshold: ThresholdMode,
}

fn default_max_power() -> usize {
    2
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig { max_power: default_max_power(), threshold: ThresholdMode::default() }
    }
}

/// Where the masked model's action clusters come from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionSource {
    /// The clustering stage's output.
    #[default]
    Recovered,
    /// The catalog's true factors, for studying the masked model alone.
    GroundTruth,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RolloutConfig {
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    #[serde(default = "default_sequences")]
    pub n_sequences: usize,
}

fn default_horizon() -> usize {
    100
}
fn default_sequences() -> usize {
    32
}

impl Default for RolloutConfig {
    fn default() -> Self {
        RolloutConfig { horizon: default_horizon(), n_sequences: default_sequences() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub group: GroupSpec,
    pub renderer: Renderer,
    pub catalog: CatalogConfig,
    #[serde(default = "default_dataset")]
    pub dataset: DatasetMode,
    #[serde(default)]
    pub avae: AvaeConfig,
    #[serde(default)]
    pub gmavae: GmavaeConfig,
    #[serde(default)]
    pub cluster: ClusterConfig,
    #[serde(default)]
    pub gmavae_partition: PartitionSource,
    #[serde(default)]
    pub rollout: RolloutConfig,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

fn default_dataset() -> DatasetMode {
    DatasetMode::Full {}
}
fn default_seeds() -> Vec<u64> {
    vec![1]
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.group.validate()?;
        self.renderer.check(&self.group)?;
        self.avae.validate()?;
        self.gmavae.validate()?;
        if self.seeds.is_empty() {
            return Err(CliError::Config("at least one seed is required".into()));
        }
        if self.cluster.max_power == 0 {
            return Err(CliError::Config("cluster.max_power must be at least 1".into()));
        }
        if self.rollout.horizon == 0 || self.rollout.n_sequences == 0 {
            return Err(CliError::Config("rollout horizon and sequence count must be positive".into()));
        }
        if self.avae.latent_dim != self.gmavae.model.latent_dim && self.gmavae.warm_start {
            return Err(CliError::Config("warm start needs equal latent sizes".into()));
        }
        Ok(())
    }

    fn with_partition(mut self, source: PartitionSource) -> Self {
        self.gmavae_partition = source;
        self
    }

    /// Pretty JSON with every default filled in.
    pub fn resolved_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn build_catalog(&self, seed: u64) -> Result<ActionCatalog> {
        let m = self.cluster.max_power;
        Ok(match &self.catalog {
            CatalogConfig::PlusMinus {} => ActionCatalog::plus_minus(&self.group, m)?,
            CatalogConfig::Random { max_per_factor, include_identity } => {
                let mut r = rng(derive_seed(seed, "catalog"));
                ActionCatalog::random_compliant(&self.group, &mut r, *max_per_factor, m, *include_identity)?
            }
            CatalogConfig::Explicit { actions } => {
                ActionCatalog::new(&self.group, actions.iter().map(|a| (a.element.clone(), a.true_factor)).collect(), m)?
            }
        })
    }
}

/// Names accepted by [`preset`].
pub const PRESETS: [&str; 4] = ["flc", "flp", "dials2", "dials3"];

fn training(steps: usize, lambda_dis: f64) -> (AvaeConfig, GmavaeConfig) {
    let avae = AvaeConfig { steps, act_warmup: 3000, lr_decay_start: Some(0.8), ..AvaeConfig::default() };
    let gmavae = GmavaeConfig { model: avae.clone(), lambda_dis, ..GmavaeConfig::default() };
    (avae, gmavae)
}

/// Built-in experiments: two colored-disk worlds and two rotating-dial worlds.
pub fn preset(name: &str) -> Option<ExperimentConfig> {
    let base = |group: Vec<FactorSpec>, renderer: Renderer, catalog: CatalogConfig, dataset: DatasetMode, steps: usize, lambda_dis: f64| {
        let (avae, gmavae) = training(steps, lambda_dis);
        ExperimentConfig {
            group: GroupSpec { factors: group },
            renderer,
            catalog,
            dataset,
            avae,
            gmavae,
            cluster: ClusterConfig::default(),
            gmavae_partition: PartitionSource::Recovered,
            rollout: RolloutConfig::default(),
            seeds: vec![1, 2, 3, 4, 5],
            output_dir: Some(PathBuf::from(format!("runs/{name}"))),
        }
    };
    use FactorSpec::{Cyclic, Symmetric};
    Some(match name {
        "flc" => base(vec![Cyclic(5), Cyclic(5), Cyclic(3)], Renderer::OneHot {}, CatalogConfig::PlusMinus {}, DatasetMode::Full {}, 60_000, 0.01),
        "flp" => base(
            vec![Cyclic(5), Cyclic(5), Symmetric(3)],
            Renderer::flatland_default(vec![[1.0 / 3.0, 2.0 / 3.0, 1.0]]),
            CatalogConfig::PlusMinus {},
            DatasetMode::Full {},
            60_000,
            1.0,
        ),
        "dials2" => base(
            vec![Symmetric(2), Cyclic(7), Cyclic(5)],
            Renderer::Dials { angles: vec![7, 5], tile_px: 12 },
            CatalogConfig::PlusMinus {},
            DatasetMode::OodRightmost {},
            60_000,
            1.0,
        )
        .with_partition(PartitionSource::GroundTruth),
        "dials3" => base(
            vec![Symmetric(3), Cyclic(5), Cyclic(5), Cyclic(3)],
            Renderer::Dials { angles: vec![5, 5, 3], tile_px: 12 },
            CatalogConfig::Random { max_per_factor: 2, include_identity: false },
            DatasetMode::Iid { n_a: 2 },
            60_000,
            1.0,
        ),
        _ => return None,
    })
}

/// Files of one seed's run.
#[derive(Clone, Debug)]
pub struct StageDirs {
    pub root: PathBuf,
}

impl StageDirs {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        StageDirs { root: root.into() }
    }

    /// `<out>/seed_<seed>`.
    pub fn for_seed(out: &Path, seed: u64) -> Self {
        Self::new(out.join(format!("seed_{seed}")))
    }

    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }
    pub fn heldout(&self) -> PathBuf {
        self.root.join("heldout")
    }
    pub fn avae(&self) -> PathBuf {
        self.root.join("avae")
    }
    pub fn partition(&self) -> PathBuf {
        self.root.join("partition.json")
    }
    pub fn gmavae(&self) -> PathBuf {
        self.root.join("gmavae")
    }
    pub fn report(&self) -> PathBuf {
        self.root.join("report.json")
    }
    pub fn timings(&self) -> PathBuf {
        self.root.join("timings.json")
    }
}

fn require(path: PathBuf, stage: &'static str) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(CliError::MissingInput { path, stage })
    }
}

fn record_time(dirs: &StageDirs, stage: &str, start: Instant) -> Result<()> {
    let path = dirs.timings();
    let mut t: BTreeMap<String, f64> = match fs::read_to_string(&path) {
        Ok(s) => serde_json::from_str(&s)?,
        Err(_) => BTreeMap::new(),
    };
    t.insert(stage.into(), start.elapsed().as_secs_f64());
    fs::write(path, serde_json::to_string_pretty(&t)?)?;
    Ok(())
}

fn load_timings(dirs: &StageDirs) -> BTreeMap<String, f64> {
    fs::read_to_string(dirs.timings()).ok().and_then(|s| serde_json::from_str(&s).ok()).unwrap_or_default()
}

fn load_data(dirs: &StageDirs) -> Result<TransitionDataset> {
    Ok(TransitionDataset::load(require(dirs.data(), "gen-data")?)?)
}

fn load_heldout(dirs: &StageDirs) -> Result<TransitionDataset> {
    Ok(TransitionDataset::load(require(dirs.heldout(), "gen-data")?)?)
}

/// Training and held-out transition sets for one seed.
pub fn make_datasets(cfg: &ExperimentConfig, seed: u64) -> Result<(TransitionDataset, TransitionDataset)> {
    let catalog = cfg.build_catalog(seed)?;
    let full = gen_full_transitions(&cfg.group, &catalog, &cfg.renderer)?;
    Ok(match &cfg.dataset {
        DatasetMode::Full {} => {
            let empty = full.with_transitions(Vec::new());
            (full, empty)
        }
        DatasetMode::Iid { n_a } => {
            let train = subsample_iid(&full, *n_a, derive_seed(seed, "iid"))?;
            let kept: BTreeSet<_> = train.transitions.iter().copied().collect();
            let rest = full.transitions.iter().copied().filter(|t| !kept.contains(t)).collect();
            (train, full.with_transitions(rest))
        }
        DatasetMode::Ood { allowed } => ood_split(&full, &allowed.iter().copied().collect())?,
        DatasetMode::OodRightmost {} => ood_split_rightmost(&full)?,
    })
}

pub fn stage_gen_data(cfg: &ExperimentConfig, seed: u64, dirs: &StageDirs) -> Result<()> {
    let start = Instant::now();
    let (train, held) = make_datasets(cfg, seed)?;
    train.save(dirs.data())?;
    held.save(dirs.heldout())?;
    record_time(dirs, "gen_data", start)
}

pub fn stage_train_avae(cfg: &ExperimentConfig, seed: u64, dirs: &StageDirs) -> Result<()> {
    let start = Instant::now();
    let ds = load_data(dirs)?;
    let (model, curve) = train_avae(&cfg.avae, &ds, seed)?;
    model.save(dirs.avae(), seed)?;
    write_curve_csv(dirs.root.join("avae_curve.csv"), &curve, false)?;
    record_time(dirs, "train_avae", start)
}

pub fn stage_cluster(cfg: &ExperimentConfig, dirs: &StageDirs) -> Result<ActionPartition> {
    let start = Instant::now();
    let ds = load_data(dirs)?;
    let model = AvaeModel::load(require(dirs.avae(), "train-avae")?)?;
    let p = cluster_actions(&model, &ds, cfg.cluster.max_power, cfg.cluster.threshold, model.sigma)?;
    fs::write(dirs.partition(), serde_json::to_string_pretty(&p)?)?;
    fs::write(dirs.root.join("distances.csv"), p.distance_csv(true))?;
    record_time(dirs, "cluster", start)?;
    Ok(p)
}

fn load_partition(dirs: &StageDirs) -> Result<ActionPartition> {
    Ok(serde_json::from_str(&fs::read_to_string(require(dirs.partition(), "cluster")?)?)?)
}

pub fn stage_train_gmavae(cfg: &ExperimentConfig, seed: u64, dirs: &StageDirs) -> Result<()> {
    let start = Instant::now();
    let ds = load_data(dirs)?;
    let partition = match cfg.gmavae_partition {
        PartitionSource::Recovered => load_partition(dirs)?,
        PartitionSource::GroundTruth => ActionPartition::from_clusters(ds.catalog.ground_truth_partition()),
    };
    let warm = if cfg.gmavae.warm_start { Some(AvaeModel::load(require(dirs.avae(), "train-avae")?)?) } else { None };
    let (model, curve) = train_gmavae(&cfg.gmavae, &ds, &partition, seed, warm.as_ref())?;
    model.save(dirs.gmavae(), seed, &partition)?;
    write_curve_csv(dirs.root.join("gmavae_curve.csv"), &curve, true)?;
    record_time(dirs, "train_gmavae", start)
}

/// Scores of one trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelScores {
    pub equivariance: Equivariance,
    pub block_independence: f64,
    pub mig: f64,
    pub sap: f64,
    pub prediction_error_seen: f64,
    /// Absent when every transition was used for training.
    pub prediction_error_unseen: Option<f64>,
    /// Mean rollout error at the horizon; absent if any rollout diverged.
    pub rollout_error: Option<f64>,
    pub rollout_first_divergence: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub eta: f64,
    pub epsilon: f64,
    pub r: f64,
    pub max_power: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub seed: u64,
    pub threads: usize,
    pub ari: f64,
    pub clusters: Vec<Vec<usize>>,
    pub ground_truth: Vec<Vec<usize>>,
    pub diagnostics: Diagnostics,
    /// Scores of the masked model with hard masks.
    #[serde(flatten)]
    pub gmavae: ModelScores,
    /// Largest soft-mask column entropy at the end of training.
    pub mask_entropy_max: f64,
    pub blocks: Vec<Vec<usize>>,
    pub rollout_horizon: usize,
    /// Scores of the unmasked model; block independence uses inferred blocks.
    pub avae: ModelScores,
    pub wall_times: BTreeMap<String, f64>,
}

fn score(
    cfg: &ExperimentConfig,
    model: &dyn LatentModel,
    ds: &TransitionDataset,
    held: &TransitionDataset,
    cluster_of: &[usize],
    owner: &[usize],
    seed: u64,
) -> Result<ModelScores> {
    let mats = model.eval_matrices();
    let table = LatentFactorTable::from_model(model, ds)?;
    let curve = rollout_curve(model, ds, cfg.rollout.horizon, cfg.rollout.n_sequences, derive_seed(seed, "rollout"))?;
    let at = curve.at(cfg.rollout.horizon);
    Ok(ModelScores {
        equivariance: equivariance_error(model, ds),
        block_independence: block_independence(model, ds, cluster_of, owner)?,
        mig: mig(&table, 20)?,
        sap: sap(&table)?,
        prediction_error_seen: prediction_error(model, ds, &mats),
        prediction_error_unseen: (!held.is_empty()).then(|| prediction_error(model, held, &mats)),
        rollout_error: at.is_finite().then_some(at),
        rollout_first_divergence: curve.first_divergence,
    })
}

fn rollout_csv(cfg: &ExperimentConfig, model: &dyn LatentModel, ds: &TransitionDataset, seed: u64, path: PathBuf) -> Result<()> {
    let curve = rollout_curve(model, ds, cfg.rollout.horizon, cfg.rollout.n_sequences, derive_seed(seed, "rollout"))?;
    fs::write(path, curve.to_csv())?;
    Ok(())
}

/// Writes the rollout error curves of both models.
pub fn stage_rollout(cfg: &ExperimentConfig, seed: u64, dirs: &StageDirs) -> Result<()> {
    let ds = load_data(dirs)?;
    let avae = AvaeModel::load(require(dirs.avae(), "train-avae")?)?;
    let (gma, _) = GmavaeModel::load(require(dirs.gmavae(), "train-gmavae")?)?;
    rollout_csv(cfg, &avae, &ds, seed, dirs.root.join("rollout_avae.csv"))?;
    rollout_csv(cfg, &gma, &ds, seed, dirs.root.join("rollout_gmavae.csv"))
}

pub fn stage_evaluate(cfg: &ExperimentConfig, seed: u64, dirs: &StageDirs) -> Result<Report> {
    let start = Instant::now();
    let ds = load_data(dirs)?;
    let held = load_heldout(dirs)?;
    let avae = AvaeModel::load(require(dirs.avae(), "train-avae")?)?;
    let partition = load_partition(dirs)?;
    let (gma, _) = GmavaeModel::load(require(dirs.gmavae(), "train-gmavae")?)?;
    let truth = ActionPartition::from_clusters(ds.catalog.ground_truth_partition());
    let owner = gma.owner.clone().ok_or_else(|| CliError::Config("masked model has no hard masks".into()))?;
    let gscores = score(cfg, &gma, &ds, &held, &gma.cluster_of, &owner, seed)?;
    let avae_owner = infer_owner(&avae, &ds, &gma.cluster_of, gma.n_masks())?;
    let ascores = score(cfg, &avae, &ds, &held, &gma.cluster_of, &avae_owner, seed)?;
    stage_rollout(cfg, seed, dirs)?;
    let d = &partition.diagnostics;
    record_time(dirs, "evaluate", start)?;
    let report = Report {
        seed,
        threads: rayon::current_num_threads(),
        ari: ari(&partition, &truth)?,
        clusters: partition.clusters.clone(),
        ground_truth: truth.clusters,
        diagnostics: Diagnostics {
            eta: partition.threshold_used as f64,
            epsilon: d.epsilon as f64,
            r: d.r as f64,
            max_power: d.max_power,
        },
        gmavae: gscores,
        mask_entropy_max: column_entropies(&gma.probs()).into_iter().fold(0.0, f64::max),
        blocks: gma.blocks().unwrap_or_default(),
        rollout_horizon: cfg.rollout.horizon,
        avae: ascores,
        wall_times: load_timings(dirs),
    };
    fs::write(dirs.report(), serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}

/// All stages in order for one seed.
pub fn run_pipeline(cfg: &ExperimentConfig, seed: u64, dirs: &StageDirs) -> Result<Report> {
    fs::create_dir_all(&dirs.root)?;
    stage_gen_data(cfg, seed, dirs)?;
    stage_train_avae(cfg, seed, dirs)?;
    stage_cluster(cfg, dirs)?;
    stage_train_gmavae(cfg, seed, dirs)?;
    stage_evaluate(cfg, seed, dirs)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub seeds: Vec<u64>,
    pub prediction_errors: Vec<f64>,
    pub selected_index: usize,
    pub selected_seed: u64,
}

/// Picks among the seeds' masked models by one-step prediction error on the
/// first seed's held-out transitions, or its training transitions when
/// nothing was held out.
pub fn stage_select(seeds: &[u64], out: &Path) -> Result<Selection> {
    if seeds.is_empty() {
        return Err(CliError::Config("no seeds to select from".into()));
    }
    let first = StageDirs::for_seed(out, seeds[0]);
    let held = load_heldout(&first)?;
    let eval = if held.is_empty() { load_data(&first)? } else { held };
    let models = seeds
        .iter()
        .map(|&s| Ok(GmavaeModel::load(require(StageDirs::for_seed(out, s).gmavae(), "train-gmavae")?)?.0))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&dyn LatentModel> = models.iter().map(|m| m as &dyn LatentModel).collect();
    let idx = select_model(&refs, &eval)?;
    let sel = Selection {
        seeds: seeds.to_vec(),
        prediction_errors: models.iter().map(|m| prediction_error(m, &eval, &m.eval_matrices())).collect(),
        selected_index: idx,
        selected_seed: seeds[idx],
    };
    fs::write(out.join("selection.json"), serde_json::to_string_pretty(&sel)?)?;
    Ok(sel)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ExperimentConfig {
        let mut cfg = preset("flc").unwrap();
        cfg.group = GroupSpec { factors: vec![FactorSpec::Cyclic(3), FactorSpec::Cyclic(2)] };
        cfg.avae = AvaeConfig { latent_dim: 4, hidden: vec![8], steps: 40, act_warmup: 0, ..AvaeConfig::default() };
        cfg.gmavae.model = cfg.avae.clone();
        cfg.rollout = RolloutConfig { horizon: 5, n_sequences: 3 };
        cfg.seeds = vec![1, 2];
        cfg
    }

    #[test]
    fn presets_are_valid_and_round_trip() {
        for name in PRESETS {
            let cfg = preset(name).unwrap();
            cfg.validate().unwrap();
            assert_eq!(ExperimentConfig::from_json(&cfg.resolved_json()).unwrap(), cfg);
        }
        assert!(preset("nope").is_none());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut v: serde_json::Value = serde_json::from_str(&preset("flc").unwrap().resolved_json()).unwrap();
        v["avae"]["bogus"] = 1.into();
        assert!(matches!(ExperimentConfig::from_json(&v.to_string()), Err(CliError::Json(_))));
        let minimal = r#"{"group":{"factors":[{"cyclic":3}]},"renderer":{"kind":"one_hot"},"catalog":{"kind":"plus_minus"}}"#;
        let cfg = ExperimentConfig::from_json(minimal).unwrap();
        assert_eq!(cfg.seeds, vec![1]);
        assert_eq!(cfg.dataset, DatasetMode::Full {});
        assert!(ExperimentConfig::from_json(&minimal.replace("plus_minus", "nope")).is_err());
    }

    #[test]
    fn stages_compose_like_the_pipeline() {
        let cfg = tiny();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let whole = run_pipeline(&cfg, 1, &StageDirs::new(a.path())).unwrap();
        let dirs = StageDirs::new(b.path());
        stage_gen_data(&cfg, 1, &dirs).unwrap();
        stage_train_avae(&cfg, 1, &dirs).unwrap();
        stage_cluster(&cfg, &dirs).unwrap();
        stage_train_gmavae(&cfg, 1, &dirs).unwrap();
        let staged = stage_evaluate(&cfg, 1, &dirs).unwrap();
        assert_eq!(Report { wall_times: BTreeMap::new(), ..whole.clone() }, Report { wall_times: BTreeMap::new(), ..staged });
        for f in ["data/observations.gmat", "avae/action_params.gmat", "gmavae/masks.gmat", "partition.json", "rollout_gmavae.csv"] {
            assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
        }
        assert!(whole.wall_times.contains_key("train_avae"));
    }

    #[test]
    fn missing_stage_input_is_reported() {
        let d = tempfile::tempdir().unwrap();
        let err = stage_cluster(&tiny(), &StageDirs::new(d.path())).unwrap_err();
        assert_eq!(err.kind(), "missing_input");
    }

    #[test]
    fn held_out_sets_follow_the_mode() {
        let mut cfg = tiny();
        cfg.dataset = DatasetMode::Iid { n_a: 2 };
        let (train, held) = make_datasets(&cfg, 3).unwrap();
        assert_eq!(train.len(), 6 * 2);
        assert_eq!(train.len() + held.len(), 6 * 3);
        cfg.dataset = DatasetMode::Ood { allowed: vec![0, 1] };
        let (train, held) = make_datasets(&cfg, 3).unwrap();
        assert!(train.transitions.iter().all(|t| t.action < 2));
        assert!(held.transitions.iter().all(|t| t.action == 2));
    }

    #[test]
    fn random_catalog_depends_on_seed_only() {
        let cfg = preset("dials3").unwrap();
        assert_eq!(cfg.build_catalog(4).unwrap(), cfg.build_catalog(4).unwrap());
    }

    #[test]
    fn selection_writes_a_pick() {
        let cfg = tiny();
        let d = tempfile::tempdir().unwrap();
        for &s in &cfg.seeds {
            run_pipeline(&cfg, s, &StageDirs::for_seed(d.path(), s)).unwrap();
        }
        let sel = stage_select(&cfg.seeds, d.path()).unwrap();
        assert!(sel.selected_index < 2);
        assert!(d.path().join("selection.json").exists());
    }
}
