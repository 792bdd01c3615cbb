//! Experiment orchestration: config, dataset and model lifecycle, sampling,
//! and the NFE ablation grid written as CSV.

use std::io::Write;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

use crate::critic::{generate_cid, train_critic, CriticModel};
use crate::denoiser::{train_denoiser, Architecture, BayesOracle, Denoiser, DenoiserOutput, LearnedDenoiser, TrainConfig};
use crate::error::{Error, Result};
use crate::graph::{generate_dataset, load_graphs, save_graphs, GraphInstance, SizeHistogram, ToyFamily};
use crate::metrics::evaluate_batch;
use crate::mpnn::MpnnConfig;
use crate::noising::{NoiseKind, NoiseSpec};
use crate::prob::{RngStream, Schedule, ScheduleKind};
use crate::samplers::{generate, SamplerKind, SamplerSpec};

pub const CONFIG_VERSION: u32 = 1;
pub const CSV_HEADER: &str = "sampler,nfe,validity,unique,novel,degree_tv,seed";

pub const DATASET_FILE: &str = "dataset.jsonl";
pub const DENOISER_FILE: &str = "denoiser.json";
pub const CRITIC_FILE: &str = "critic.json";

// RNG stream ids, one per pipeline stage.
const STREAM_DATA: u64 = 1;
const STREAM_DENOISER: u64 = 2;
const STREAM_CRITIC: u64 = 3;
const STREAM_SAMPLING: u64 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DenoiserKind {
    BayesOracle,
    Tabular,
    Mpnn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserConfig {
    pub kind: DenoiserKind,
    #[serde(default)]
    pub mpnn: MpnnConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CriticConfig {
    #[serde(default)]
    pub mpnn: MpnnConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerChoice {
    Sid,
    Ddm,
    Dfm,
    Corrector,
    Cid,
}

impl std::str::FromStr for SamplerChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Self::Sid, Self::Ddm, Self::Dfm, Self::Corrector, Self::Cid]
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown sampler '{s}' (expected sid, ddm, dfm, corrector or cid)")))
    }
}

impl SamplerChoice {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Sid => "sid",
            Self::Ddm => "ddm",
            Self::Dfm => "dfm",
            Self::Corrector => "corrector",
            Self::Cid => "cid",
        }
    }

    fn kind(&self) -> Option<SamplerKind> {
        match self {
            Self::Sid => Some(SamplerKind::Sid),
            Self::Ddm => Some(SamplerKind::DdmExact),
            Self::Dfm => Some(SamplerKind::DfmRate),
            Self::Corrector => Some(SamplerKind::Corrector),
            Self::Cid => None,
        }
    }
}

/// A complete experiment description, read from JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub family: ToyFamily,
    pub dataset_size: usize,
    pub noise: NoiseKind,
    pub schedule: ScheduleKind,
    pub denoiser: DenoiserConfig,
    /// Present when a critic should be trained (mask noise only).
    #[serde(default)]
    pub critic: Option<CriticConfig>,
    pub samplers: Vec<SamplerChoice>,
    pub nfe: Vec<usize>,
    pub samples_per_cell: usize,
    pub seed: u64,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!("unsupported config version {}", self.version)));
        }
        if self.nfe.is_empty() || self.nfe.contains(&0) {
            return Err(Error::Config("nfe list must be non-empty with every entry >= 1".into()));
        }
        if self.samples_per_cell == 0 || self.dataset_size == 0 {
            return Err(Error::Config("samples_per_cell and dataset_size must be at least 1".into()));
        }
        if self.samplers.is_empty() {
            return Err(Error::Config("at least one sampler is required".into()));
        }
        if self.samplers.contains(&SamplerChoice::Cid) && self.critic.is_none() {
            return Err(Error::Config("the cid sampler needs a critic section".into()));
        }
        if self.critic.is_some() && self.noise != NoiseKind::Mask {
            return Err(Error::Config("a critic requires mask noise".into()));
        }
        if self.denoiser.kind == DenoiserKind::Mpnn {
            self.denoiser.mpnn.validate()?;
        }
        self.denoiser.train.validate()?;
        if let Some(c) = &self.critic {
            c.mpnn.validate()?;
            c.train.validate()?;
        }
        Ok(())
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn schedule(&self) -> Schedule {
        Schedule::new(self.schedule)
    }

    fn rng(&self, stream: u64) -> RngStream {
        RngStream::new(self.seed, stream)
    }
}

/// Either the exact oracle or a learned model.
pub enum AnyDenoiser {
    Oracle(BayesOracle),
    Learned(LearnedDenoiser),
}

impl Denoiser for AnyDenoiser {
    fn predict(&self, z_t: &GraphInstance, alpha: f64) -> Result<DenoiserOutput> {
        match self {
            Self::Oracle(o) => o.predict(z_t, alpha),
            Self::Learned(l) => l.predict(z_t, alpha),
        }
    }

    fn noise(&self) -> &NoiseSpec {
        match self {
            Self::Oracle(o) => o.noise(),
            Self::Learned(l) => l.noise(),
        }
    }
}

/// Dataset plus the models trained (or loaded) for it.
pub struct Artifacts {
    pub dataset: Vec<GraphInstance>,
    pub denoiser: AnyDenoiser,
    pub critic: Option<CriticModel>,
}

pub fn build_dataset(config: &ExperimentConfig) -> Result<Vec<GraphInstance>> {
    generate_dataset(&config.family, config.dataset_size, &mut config.rng(STREAM_DATA))
}

pub fn noise_spec(config: &ExperimentConfig, dataset: &[GraphInstance]) -> Result<NoiseSpec> {
    NoiseSpec::build(config.noise, config.family.schema(false), dataset)
}

/// Generates the dataset and trains every model the config asks for.
pub fn train_all(config: &ExperimentConfig) -> Result<Artifacts> {
    config.validate()?;
    let dataset = build_dataset(config)?;
    info!("dataset: {} graphs", dataset.len());
    let noise = noise_spec(config, &dataset)?;
    let schedule = config.schedule();
    let denoiser = match config.denoiser.kind {
        DenoiserKind::BayesOracle => AnyDenoiser::Oracle(BayesOracle::new(&config.family, noise.clone())?),
        kind => {
            let mut rng = config.rng(STREAM_DENOISER);
            let arch = if kind == DenoiserKind::Tabular { Architecture::Tabular } else { Architecture::Mpnn(config.denoiser.mpnn) };
            let mut model = LearnedDenoiser::new(arch, noise.clone(), &mut rng)?;
            train_denoiser(&mut model, &dataset, &schedule, &config.denoiser.train, &mut rng)?;
            AnyDenoiser::Learned(model)
        }
    };
    let critic = match &config.critic {
        Some(c) => {
            let mut rng = config.rng(STREAM_CRITIC);
            let mut critic = CriticModel::mpnn(c.mpnn, noise.clone(), &mut rng)?;
            train_critic(&mut critic, &dataset, &denoiser, &schedule, &c.train, &mut rng)?;
            Some(critic)
        }
        None => None,
    };
    Ok(Artifacts { dataset, denoiser, critic })
}

/// Writes the dataset and learned models into `dir`.
pub fn save_artifacts(artifacts: &Artifacts, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    save_graphs(&dir.join(DATASET_FILE), &artifacts.dataset)?;
    if let AnyDenoiser::Learned(model) = &artifacts.denoiser {
        model.save(&dir.join(DENOISER_FILE))?;
    }
    if let Some(critic) = &artifacts.critic {
        critic.save(&dir.join(CRITIC_FILE))?;
    }
    Ok(())
}

/// Reads what [`save_artifacts`] wrote; the oracle is rebuilt from the family.
pub fn load_artifacts(config: &ExperimentConfig, dir: &Path) -> Result<Artifacts> {
    let path = |f: &str| -> Result<PathBuf> {
        let p = dir.join(f);
        if !p.exists() {
            return Err(Error::MissingModel(p.display().to_string()));
        }
        Ok(p)
    };
    let dataset = load_graphs(&path(DATASET_FILE)?)?;
    let denoiser = match config.denoiser.kind {
        DenoiserKind::BayesOracle => AnyDenoiser::Oracle(BayesOracle::new(&config.family, noise_spec(config, &dataset)?)?),
        _ => AnyDenoiser::Learned(LearnedDenoiser::load(&path(DENOISER_FILE)?)?),
    };
    let critic = match config.critic {
        Some(_) => Some(CriticModel::load(&path(CRITIC_FILE)?)?),
        None => None,
    };
    Ok(Artifacts { dataset, denoiser, critic })
}

/// Samples of one `(sampler, nfe)` cell, drawn from `stream`.
pub fn sample_cell(
    config: &ExperimentConfig,
    artifacts: &Artifacts,
    sampler: SamplerChoice,
    nfe: usize,
    count: usize,
    stream: &RngStream,
) -> Result<Vec<GraphInstance>> {
    let sizes = SizeHistogram::from_dataset(&artifacts.dataset)?;
    let schedule = config.schedule();
    match sampler.kind() {
        Some(kind) => {
            let spec = SamplerSpec::new(kind, nfe, artifacts.denoiser.noise().clone(), schedule)?;
            generate(&artifacts.denoiser, &spec, count, &sizes, stream)
        }
        None => {
            let critic = artifacts.critic.as_ref().ok_or_else(|| Error::MissingModel("critic".into()))?;
            generate_cid(&artifacts.denoiser, critic, nfe, &schedule, count, &sizes, stream)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRow {
    pub sampler: String,
    pub nfe: usize,
    pub validity: f64,
    pub unique: f64,
    pub novel: f64,
    pub degree_tv: f64,
    pub seed: u64,
}

impl MetricsRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{:.6},{:.6},{:.6},{:.6},{}",
            self.sampler, self.nfe, self.validity, self.unique, self.novel, self.degree_tv, self.seed
        )
    }
}

/// One row per `(sampler, nfe)` cell in config order. Cell `c` samples from
/// the stream `fork(c)` of the sampling stream, so rows do not depend on each other.
pub fn run_ablation(config: &ExperimentConfig, artifacts: &Artifacts) -> Result<Vec<MetricsRow>> {
    config.validate()?;
    let base = config.rng(STREAM_SAMPLING);
    let mut rows = Vec::new();
    for (si, sampler) in config.samplers.iter().enumerate() {
        for (ni, &nfe) in config.nfe.iter().enumerate() {
            let cell = (si * config.nfe.len() + ni) as u64;
            let samples = sample_cell(config, artifacts, *sampler, nfe, config.samples_per_cell, &base.fork(cell))?;
            let m = evaluate_batch(&samples, &artifacts.dataset, &config.family)?;
            if m.approximate {
                info!("{} nfe={nfe}: uniqueness uses approximate canonical forms", sampler.name());
            }
            info!("{} nfe={nfe}: validity {:.4}", sampler.name(), m.validity);
            rows.push(MetricsRow {
                sampler: sampler.name().into(),
                nfe,
                validity: m.validity,
                unique: m.unique,
                novel: m.novel,
                degree_tv: m.degree_tv,
                seed: config.seed,
            });
        }
    }
    Ok(rows)
}

pub fn write_csv<W: Write>(mut w: W, rows: &[MetricsRow]) -> Result<()> {
    writeln!(w, "{CSV_HEADER}")?;
    for row in rows {
        writeln!(w, "{}", row.csv_line())?;
    }
    Ok(())
}

pub fn save_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut buf = Vec::new();
    write_csv(&mut buf, rows)?;
    std::fs::write(path, buf)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ExperimentConfig {
        ExperimentConfig::from_json(
            r#"{
                "version": 1,
                "family": {"kind": "triangle_free4"},
                "dataset_size": 50,
                "noise": "mask",
                "schedule": "cosine",
                "denoiser": {"kind": "bayes_oracle"},
                "samplers": ["sid", "ddm"],
                "nfe": [2, 4, 8],
                "samples_per_cell": 20,
                "seed": 3
            }"#,
        )
        .unwrap()
    }

    #[test]
    fn config_validation() {
        let base = tiny();
        assert!(ExperimentConfig { nfe: vec![], ..base.clone() }.validate().is_err());
        assert!(ExperimentConfig { nfe: vec![4, 0], ..base.clone() }.validate().is_err());
        assert!(ExperimentConfig { samples_per_cell: 0, ..base.clone() }.validate().is_err());
        assert!(ExperimentConfig { version: 2, ..base.clone() }.validate().is_err());
        assert!(ExperimentConfig { samplers: vec![SamplerChoice::Cid], ..base.clone() }.validate().is_err());
        assert!(matches!(ExperimentConfig::from_json("{\"version\": 1}"), Err(Error::Config(_))));
        let text = serde_json::to_string(&base).unwrap();
        assert_eq!(ExperimentConfig::from_json(&text).unwrap(), base);
    }

    #[test]
    fn ablation_grid_shape_and_determinism() {
        let config = tiny();
        let artifacts = train_all(&config).unwrap();
        let rows = run_ablation(&config, &artifacts).unwrap();
        assert_eq!(rows.len(), 6);
        let (mut a, mut b) = (Vec::new(), Vec::new());
        write_csv(&mut a, &rows).unwrap();
        write_csv(&mut b, &run_ablation(&config, &artifacts).unwrap()).unwrap();
        assert_eq!(a, b);
        let text = String::from_utf8(a).unwrap();
        assert_eq!(text.lines().count(), 7);
        assert!(text.starts_with("sampler,nfe,validity,unique,novel,degree_tv,seed\nsid,2,"));
        assert!(!text.contains('\r'));
    }

    #[test]
    fn missing_models_are_reported() {
        let mut config = tiny();
        config.denoiser.kind = DenoiserKind::Tabular;
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_artifacts(&config, dir.path()), Err(Error::MissingModel(_))));
    }
}
