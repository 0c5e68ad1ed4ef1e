//! Experiment configuration: one TOML file, every key optional.
//!
//! ```toml
//! seed = 7
//! dataset.kind = "gaussian-blobs"
//! dataset.n = 500
//! model.arch = "mlp"
//! model.hidden = [32]
//! audit.runs = 6
//! ```

use std::path::{Path, PathBuf};

use ibis_core::audit::AuditConfig;
use ibis_core::bilevel::BilevelConfig;
use ibis_core::influence::{IhvpSolver, InfluenceConfig};
use ibis_core::model::{Activation, Arch};
use ibis_core::trainer::{DpConfig, FitConfig, TrainConfig};
use ibis_core::{SynthKind, Task};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Output directory. Not part of the config hash.
    #[serde(skip_serializing)]
    pub out: Option<PathBuf>,
    pub dataset: DatasetSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub dp: DpSection,
    pub influence: InfluenceSection,
    pub bilevel: BilevelSection,
    pub audit: AuditSection,
    pub interfere: InterfereSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: None,
            dataset: DatasetSection::default(),
            model: ModelSection::default(),
            train: TrainSection::default(),
            dp: DpSection::default(),
            influence: InfluenceSection::default(),
            bilevel: BilevelSection::default(),
            audit: AuditSection::default(),
            interfere: InterfereSection::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetSource {
    Synth,
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SynthFamily {
    GaussianBlobs,
    LinearGaussian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Classification,
    Regression,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub source: DatasetSource,
    pub kind: SynthFamily,
    pub n: usize,
    pub d: usize,
    /// Classes for blobs, and for CSV classification data.
    pub k: usize,
    pub separation: f64,
    pub noise_std: f64,
    pub path: Option<PathBuf>,
    /// Task of CSV data; synthetic data implies it.
    pub task: TaskKind,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            source: DatasetSource::Synth,
            kind: SynthFamily::GaussianBlobs,
            n: 2000,
            d: 20,
            k: 2,
            separation: 2.0,
            noise_std: 0.1,
            path: None,
            task: TaskKind::Classification,
        }
    }
}

impl DatasetSection {
    pub fn synth_kind(&self) -> SynthKind {
        match self.kind {
            SynthFamily::GaussianBlobs => SynthKind::GaussianBlobs {
                k: self.k,
                d: self.d,
                n: self.n,
                separation: self.separation,
            },
            SynthFamily::LinearGaussian => SynthKind::LinearGaussian {
                d: self.d,
                n: self.n,
                noise_std: self.noise_std,
            },
        }
    }

    pub fn task(&self) -> Task {
        let classification = match self.source {
            DatasetSource::Synth => self.kind == SynthFamily::GaussianBlobs,
            DatasetSource::Csv => self.task == TaskKind::Classification,
        };
        if classification {
            Task::Classification { num_classes: self.k }
        } else {
            Task::Regression
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArchKind {
    LeastSquares,
    Logistic,
    Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub arch: ArchKind,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub l2: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            arch: ArchKind::Mlp,
            hidden: vec![32],
            activation: Activation::Tanh,
            l2: 1e-2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub step_size: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            step_size: 0.2,
            batch_size: 32,
            epochs: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DpSection {
    pub enabled: bool,
    pub clip_norm: f64,
    pub noise_multiplier: f64,
    pub delta: f64,
    /// When set, the noise multiplier is calibrated to this epsilon.
    pub target_epsilon: Option<f64>,
}

impl Default for DpSection {
    fn default() -> Self {
        Self {
            enabled: false,
            clip_norm: 1.0,
            noise_multiplier: 1.0,
            delta: 1e-5,
            target_epsilon: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolverKind {
    Cg,
    Dense,
}

impl From<SolverKind> for IhvpSolver {
    fn from(s: SolverKind) -> Self {
        match s {
            SolverKind::Cg => IhvpSolver::ConjugateGradient,
            SolverKind::Dense => IhvpSolver::Dense,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InfluenceSection {
    /// Defaults to 0 for convex models and 1e-2 for the MLP.
    pub damping: Option<f64>,
    pub cg_tol: f64,
    pub cg_max_iters: usize,
    pub p: usize,
    pub m: usize,
    pub denom_floor: f64,
    pub solver: SolverKind,
    pub grad_tol: f64,
    pub max_newton_iters: usize,
}

impl Default for InfluenceSection {
    fn default() -> Self {
        Self {
            damping: None,
            cg_tol: 1e-8,
            cg_max_iters: 1000,
            p: 256,
            m: 64,
            denom_floor: 1e-8,
            solver: SolverKind::Cg,
            grad_tol: 1e-8,
            max_newton_iters: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BilevelSection {
    pub inner_step: f64,
    pub outer_step: f64,
    pub reg_strength: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub v_refresh_epochs: usize,
    pub refresh_theta: bool,
    pub log_every: usize,
    pub box_projection: bool,
}

impl Default for BilevelSection {
    fn default() -> Self {
        Self {
            inner_step: 0.05,
            outer_step: 0.01,
            reg_strength: 1e-3,
            epochs: 20,
            batch_size: 64,
            v_refresh_epochs: 10,
            refresh_theta: false,
            log_every: 1,
            box_projection: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CanarySource {
    Random,
    Influence,
    Ibis,
    File,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AuditSection {
    pub runs: usize,
    /// Explicit per-run seeds; defaults to `seed, seed + 1, ...`.
    pub seeds: Option<Vec<u64>>,
    pub alphas: Vec<f64>,
    pub confidence: f64,
    pub delta_report: f64,
    pub canaries: CanarySource,
    pub canary_file: Option<PathBuf>,
    /// Worker threads for concurrent runs; all cores when unset.
    pub workers: Option<usize>,
}

impl Default for AuditSection {
    fn default() -> Self {
        let a = AuditConfig::default();
        Self {
            runs: 6,
            seeds: None,
            alphas: a.alphas,
            confidence: a.confidence,
            delta_report: a.delta_report,
            canaries: CanarySource::Influence,
            canary_file: None,
            workers: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DesignKind {
    /// `X = I_d`, so `K = X'X = I`.
    Identity,
    /// `n x d` standard normal design.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InterfereSection {
    pub design: DesignKind,
    pub n: usize,
    pub d: usize,
    /// Number of angles between the two canaries, evenly spaced over [0, 180] degrees.
    pub angles: usize,
    pub radius: f64,
    pub y1: f64,
    pub y2: f64,
}

impl Default for InterfereSection {
    fn default() -> Self {
        Self {
            design: DesignKind::Identity,
            n: 50,
            d: 5,
            angles: 13,
            radius: 1.0,
            y1: 1.0,
            y2: 1.0,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Seeds of the audit runs, in run order.
    pub fn audit_seeds(&self) -> Vec<u64> {
        match &self.audit.seeds {
            Some(s) => s.clone(),
            None => (0..self.audit.runs as u64).map(|i| self.seed.wrapping_add(i)).collect(),
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        let ds = &self.dataset;
        if ds.source == DatasetSource::Csv && ds.path.is_none() {
            return bad("dataset.path is required for csv sources".into());
        }
        if let Some(p) = &ds.path {
            if ds.source == DatasetSource::Csv && !p.exists() {
                return bad(format!("dataset file {} does not exist", p.display()));
            }
        }
        if self.influence.m > self.influence.p {
            return bad(format!(
                "influence.m = {} exceeds influence.p = {}",
                self.influence.m, self.influence.p
            ));
        }
        if ds.source == DatasetSource::Synth && self.influence.p > ds.n {
            return bad(format!("influence.p = {} exceeds dataset.n = {}", self.influence.p, ds.n));
        }
        let seeds = self.audit_seeds();
        if let Some(s) = &self.audit.seeds {
            if s.len() != self.audit.runs {
                return bad(format!("audit.seeds has {} entries for {} runs", s.len(), self.audit.runs));
            }
        }
        let mut sorted = seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != seeds.len() {
            return bad("audit seeds must be distinct".into());
        }
        if self.audit.canaries == CanarySource::File {
            match &self.audit.canary_file {
                None => return bad("audit.canary_file is required when audit.canaries = \"file\"".into()),
                Some(p) if !p.exists() => return bad(format!("canary file {} does not exist", p.display())),
                _ => {}
            }
        }
        if self.audit.alphas.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return bad("audit.alphas must lie in [0, 1]".into());
        }
        if self.audit.workers == Some(0) {
            return bad("audit.workers must be positive".into());
        }
        if self.interfere.angles < 2 {
            return bad("interfere.angles must be at least 2".into());
        }
        if self.interfere.d < 2 {
            return bad("interfere.d must be at least 2".into());
        }
        self.influence_config().validate()?;
        self.bilevel_config().validate()?;
        if self.dp.enabled {
            self.dp_config().validate()?;
        }
        self.arch().validate()?;
        self.arch().check_task(ds.task())?;
        Ok(())
    }

    pub fn arch(&self) -> Arch {
        let k = match self.dataset.task() {
            Task::Classification { num_classes } => num_classes,
            Task::Regression => 1,
        };
        match self.model.arch {
            ArchKind::LeastSquares => Arch::LeastSquares,
            ArchKind::Logistic => Arch::Logistic {
                num_classes: k,
                l2: self.model.l2,
            },
            ArchKind::Mlp => Arch::Mlp {
                hidden: self.model.hidden.clone(),
                num_classes: k,
                activation: self.model.activation,
                l2: self.model.l2,
            },
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            step_size: self.train.step_size,
            batch_size: self.train.batch_size,
            epochs: self.train.epochs,
            seed: self.seed,
        }
    }

    pub fn fit_config(&self) -> FitConfig {
        FitConfig {
            grad_tol: self.influence.grad_tol,
            max_newton_iters: self.influence.max_newton_iters,
            sgd: self.train_config(),
        }
    }

    pub fn dp_config(&self) -> DpConfig {
        DpConfig {
            clip_norm: self.dp.clip_norm,
            noise_multiplier: self.dp.noise_multiplier,
            delta: self.dp.delta,
            target_epsilon: self.dp.target_epsilon,
        }
    }

    fn damping(&self) -> f64 {
        self.influence
            .damping
            .unwrap_or(if self.arch().is_strongly_convex() { 0.0 } else { 1e-2 })
    }

    pub fn influence_config(&self) -> InfluenceConfig {
        let s = &self.influence;
        InfluenceConfig {
            damping: self.damping(),
            cg_tol: s.cg_tol,
            cg_max_iters: s.cg_max_iters,
            preselect_p: s.p,
            num_canaries_m: s.m,
            denom_floor: s.denom_floor,
            solver: s.solver.into(),
        }
    }

    pub fn bilevel_config(&self) -> BilevelConfig {
        let b = &self.bilevel;
        BilevelConfig {
            inner_step: b.inner_step,
            outer_step: b.outer_step,
            reg_strength: b.reg_strength,
            epochs: b.epochs,
            batch_size: b.batch_size,
            v_refresh_epochs: b.v_refresh_epochs,
            refresh_theta: b.refresh_theta,
            log_every: b.log_every,
            box_projection: b.box_projection,
            damping: self.damping(),
            cg_tol: self.influence.cg_tol,
            cg_max_iters: self.influence.cg_max_iters,
            solver: self.influence.solver.into(),
            fit: self.fit_config(),
            seed: self.seed,
        }
    }

    pub fn audit_config(&self) -> AuditConfig {
        AuditConfig {
            confidence: self.audit.confidence,
            alphas: self.audit.alphas.clone(),
            delta_report: self.audit.delta_report,
        }
    }

    /// Canonical JSON of the resolved configuration (output directory
    /// excluded).
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serialises")
    }

    /// Hex SHA-256 of [`Self::canonical_json`].
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_json().as_bytes()))
    }
}
