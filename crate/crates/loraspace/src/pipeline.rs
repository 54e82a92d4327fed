//! End-to-end orchestration: one configuration object wiring the dataset,
//! encoders, denoiser, adapter space, training, and evaluation together,
//! plus the full pipeline runner used by the CLI and the acceptance suite.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::denoiser::DenoiserConfig;
use crate::encoders::{train_id_encoder, EncoderConfig, IdTrainConfig};
use crate::error::{Error, Result};
use crate::eval::{full_report, EvalConfig, EvalReport};
use crate::hypernet::HyperConfig;
use crate::lora::LoraLayout;
use crate::synthdata::Dataset;
use crate::trainer::{
    run_stage1, run_stage2, run_stage3, train_base_model, Nets, StageOutcome, TrainConfig,
    TrainLog,
};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct DatasetConfig {
    pub n_identities: usize,
    pub per_identity: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            n_identities: 2000,
            per_identity: 4,
        }
    }
}

/// Adapter-space dimensions; the layout itself is derived from the denoiser.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct AdapterSpaceConfig {
    pub rank_id: usize,
    pub rank_base: usize,
    pub k_basis: usize,
}

impl Default for AdapterSpaceConfig {
    fn default() -> Self {
        AdapterSpaceConfig {
            rank_id: 8,
            rank_base: 4,
            k_basis: 16,
        }
    }
}

/// Everything needed to run the pipeline, JSON-serializable. The root seed
/// propagates into every subsystem's RNG streams.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Default)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub denoiser: DenoiserConfig,
    pub hyper: HyperConfig,
    pub adapter_space: AdapterSpaceConfig,
    pub encoders: EncoderConfig,
    pub id_train: IdTrainConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl PipelineConfig {
    /// Push the root seed into every subsystem.
    pub fn propagate_seed(&mut self) {
        self.train.seed = self.seed;
        self.eval.seed = self.seed;
        self.id_train.seed = self.seed;
    }

    pub fn layout(&self) -> LoraLayout {
        LoraLayout::dense(
            self.denoiser.n_blocks,
            self.denoiser.d_model,
            self.adapter_space.rank_id,
            self.adapter_space.rank_base,
            self.adapter_space.k_basis,
        )
    }

    pub fn validate(&self) -> Result<()> {
        self.denoiser.validate()?;
        self.layout().validate()?;
        self.train.validate()?;
        if self.hyper.embed_dim != self.encoders.embed_dim {
            return Err(Error::InvalidConfig(format!(
                "hyper.embed_dim {} must match encoders.embed_dim {}",
                self.hyper.embed_dim, self.encoders.embed_dim
            )));
        }
        if self.hyper.d_feat != self.encoders.d_feat {
            return Err(Error::InvalidConfig(format!(
                "hyper.d_feat {} must match encoders.d_feat {}",
                self.hyper.d_feat, self.encoders.d_feat
            )));
        }
        Ok(())
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<PipelineConfig> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::MissingArtifact(path.display().to_string())
            } else {
                Error::io(path.display().to_string(), e)
            }
        })?;
        let mut cfg: PipelineConfig = serde_json::from_str(&text)?;
        cfg.propagate_seed();
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Generate the dataset if `path` does not exist yet, then load it.
pub fn ensure_dataset(cfg: &PipelineConfig, path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    if !path.exists() {
        crate::synthdata::make_dataset(
            cfg.dataset.n_identities,
            cfg.dataset.per_identity,
            cfg.seed,
            path,
        )?;
    }
    Dataset::load(path)
}

/// Train the identity encoder and initialize the full network state.
pub fn init_nets(cfg: &PipelineConfig, dataset: &Dataset) -> Result<(Nets, f64, f64)> {
    let (id_encoder, report) = train_id_encoder(dataset, &cfg.encoders, &cfg.id_train)?;
    let nets = Nets::init(
        &cfg.denoiser,
        &cfg.hyper,
        &cfg.layout(),
        &cfg.encoders,
        id_encoder,
        cfg.seed,
    )?;
    Ok((nets, report.validation_r2, report.triple_accuracy))
}

/// Outcomes of a complete pipeline run.
pub struct PipelineRun {
    pub nets: Nets,
    pub id_encoder_r2: f64,
    pub id_encoder_triples: f64,
    pub base: StageOutcome,
    pub stage1: StageOutcome,
    pub stage2: StageOutcome,
    pub stage3: StageOutcome,
    pub report: EvalReport,
}

/// Dataset, identity encoder, base pretraining, stages 1-3, evaluation.
pub fn run_full_pipeline(
    cfg: &PipelineConfig,
    dataset_path: impl AsRef<Path>,
    checkpoint_dir: impl AsRef<Path>,
    report_dir: impl AsRef<Path>,
) -> Result<PipelineRun> {
    cfg.validate()?;
    let checkpoint_dir = checkpoint_dir.as_ref();
    std::fs::create_dir_all(checkpoint_dir)
        .map_err(|e| Error::io(checkpoint_dir.display().to_string(), e))?;
    let dataset = ensure_dataset(cfg, dataset_path)?;
    let (mut nets, r2, triples) = init_nets(cfg, &dataset)?;

    let mut log = TrainLog::to_file(checkpoint_dir.join("train_log.jsonl"))?;
    let base = train_base_model(&mut nets, &dataset, &cfg.train, Some(checkpoint_dir), &mut log)?;
    let stage1 = run_stage1(&mut nets, &dataset, &cfg.train, Some(checkpoint_dir), &mut log)?;
    let stage2 = run_stage2(&mut nets, &dataset, &cfg.train, Some(checkpoint_dir), &mut log)?;
    let stage3 = run_stage3(&mut nets, &dataset, &cfg.train, Some(checkpoint_dir), &mut log)?;

    let report = full_report(&nets, &cfg.eval, report_dir)?;
    Ok(PipelineRun {
        nets,
        id_encoder_r2: r2,
        id_encoder_triples: triples,
        base,
        stage1,
        stage2,
        stage3,
        report,
    })
}

/// Load a checkpoint with the shapes the configuration implies.
pub fn load_nets(cfg: &PipelineConfig, path: impl AsRef<Path>) -> Result<Nets> {
    Nets::load(
        path,
        &cfg.denoiser,
        &cfg.hyper,
        &cfg.layout(),
        &cfg.encoders,
    )
}
