//! Command-line entry point tying the pipeline together: dataset
//! generation, base pretraining, the three adapter training stages, adapter
//! generation/merging, sampling, interpolation, slider edits, and
//! evaluation.
//!
//! Exit codes: 0 success, 2 missing config, 3 missing artifact,
//! 4 validation failure, 5 runtime failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use loraspace::archive::{self, Archive};
use loraspace::denoiser::sample;
use loraspace::error::Error;
use loraspace::eval::{full_report, personalized_model, prompt_caption};
use loraspace::hypernet::generate_lora;
use loraspace::img::{BBox, Image};
use loraspace::lora::{
    average, combine, delta, interp, materialize, scale_weights, slider, AdapterKind,
    LoraCoefficients,
};
use loraspace::pipeline::{ensure_dataset, init_nets, load_nets, PipelineConfig};
use loraspace::synthdata::{reference_scene, Dataset, N_BACKGROUNDS, N_CLOTHING};
use loraspace::trainer::{
    run_stage1, run_stage2, run_stage3, train_base_model, Nets, TrainLog,
};

/// Paths plus the full pipeline configuration; the CLI's `--config` file.
#[derive(Clone, Debug, Serialize, Deserialize, Default)]
#[serde(default)]
struct RunConfig {
    paths: RunPaths,
    #[serde(flatten)]
    pipeline: PipelineConfig,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
struct RunPaths {
    dataset: PathBuf,
    checkpoints: PathBuf,
    reports: PathBuf,
}

impl Default for RunPaths {
    fn default() -> Self {
        RunPaths {
            dataset: PathBuf::from("runs/dataset.hlra"),
            checkpoints: PathBuf::from("runs/checkpoints"),
            reports: PathBuf::from("runs/reports"),
        }
    }
}

#[derive(Parser)]
#[command(name = "loraspace", version, about = "Image-conditioned low-rank adapter pipeline")]
struct Cli {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed override; propagates to every random stream.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct PromptArgs {
    /// Background word: red, green, blue, yellow, magenta.
    #[arg(long, default_value = "red")]
    prompt_bg: String,
    /// Clothing word: white, black, orange, cyan.
    #[arg(long, default_value = "white")]
    prompt_cloth: String,
    /// Guidance scale.
    #[arg(long, default_value_t = 5.0)]
    cfg: f32,
    /// Sampling steps (at most the diffusion step count).
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic dataset archive.
    DatasetGen {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the identity encoder and the base denoiser; writes a full
    /// checkpoint.
    TrainBase {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Adapter warm-up: base branch only.
    TrainStage1 {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Identity branch joins under the three training situations.
    TrainStage2 {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fine-tune only the identity-embedding attention blocks.
    TrainStage3 {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Map reference image(s) to adapter coefficients.
    GenLora {
        /// One or more reference images (PPM). Multiple images are
        /// coefficient-averaged.
        #[arg(long, num_args = 1.., required = true)]
        images: Vec<PathBuf>,
        /// Face boxes as x,y,w,h per image; full frame when omitted.
        #[arg(long, num_args = 0..)]
        bboxes: Vec<String>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Merge generated coefficients into the base model weights.
    Merge {
        #[arg(long)]
        lora: PathBuf,
        /// Base-adapter weight of the mix.
        #[arg(long, default_value_t = 0.4)]
        base_weight: f32,
        #[arg(long, default_value_t = 1.0)]
        id_weight: f32,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate an image, optionally through an adapter.
    Sample {
        #[command(flatten)]
        prompt: PromptArgs,
        /// Adapter coefficients to apply (from gen-lora).
        #[arg(long)]
        lora: Option<PathBuf>,
        #[arg(long, default_value_t = 0.4)]
        base_weight: f32,
        #[arg(long, default_value_t = 1.0)]
        id_weight: f32,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Identity interpolation between two references.
    Interp {
        #[arg(long)]
        image_a: PathBuf,
        #[arg(long)]
        image_b: PathBuf,
        #[arg(long)]
        bbox_a: Option<String>,
        #[arg(long)]
        bbox_b: Option<String>,
        /// Number of interpolation frames.
        #[arg(long, default_value_t = 5)]
        frames: usize,
        #[command(flatten)]
        prompt: PromptArgs,
        #[arg(long, default_value_t = 0.4)]
        base_weight: f32,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Output directory for the interpolated frames.
        #[arg(long)]
        out: PathBuf,
    },
    /// Attribute slider from an (original, edited) reference pair, applied
    /// on a host reference.
    Slider {
        #[arg(long)]
        original: PathBuf,
        #[arg(long)]
        edited: PathBuf,
        #[arg(long)]
        host: PathBuf,
        #[arg(long)]
        bbox_original: Option<String>,
        #[arg(long)]
        bbox_edited: Option<String>,
        #[arg(long)]
        bbox_host: Option<String>,
        /// Slider scales to render.
        #[arg(long, num_args = 1.., default_values_t = [-1.0, 0.0, 1.0])]
        scales: Vec<f32>,
        #[command(flatten)]
        prompt: PromptArgs,
        #[arg(long, default_value_t = 0.4)]
        base_weight: f32,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the evaluation suites and write the report.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::MissingArtifact(_) => 3,
        Error::InvalidConfig(_)
        | Error::InvalidDimensions { .. }
        | Error::ShapeMismatch { .. }
        | Error::KindMismatch { .. }
        | Error::MissingSite { .. }
        | Error::MissingParameter { .. }
        | Error::MissingMetadata { .. } => 4,
        _ => 5,
    }
}

fn load_run_config(cli: &Cli) -> Result<RunConfig, (u8, String)> {
    let mut rc: RunConfig = match &cli.config {
        Some(path) => {
            if !path.exists() {
                return Err((2, format!("config file not found: {}", path.display())));
            }
            let text = std::fs::read_to_string(path)
                .map_err(|e| (2, format!("cannot read config: {e}")))?;
            serde_json::from_str(&text).map_err(|e| (2, format!("invalid config JSON: {e}")))?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        rc.pipeline.seed = seed;
    }
    rc.pipeline.propagate_seed();
    rc.pipeline
        .validate()
        .map_err(|e| (4, format!("invalid configuration: {e}")))?;
    Ok(rc)
}

fn parse_bbox(spec: &str) -> Result<BBox, Error> {
    let parts: Vec<&str> = spec.split(',').collect();
    if parts.len() != 4 {
        return Err(Error::InvalidConfig(format!(
            "bbox `{spec}` must be x,y,w,h"
        )));
    }
    let nums: Vec<usize> = parts
        .iter()
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| Error::InvalidConfig(format!("bbox `{spec}` must be integers")))
        })
        .collect::<Result<_, _>>()?;
    Ok(BBox {
        x: nums[0],
        y: nums[1],
        w: nums[2],
        h: nums[3],
    })
}

fn bbox_or_full(spec: Option<&String>, img: &Image) -> Result<BBox, Error> {
    match spec {
        Some(s) => parse_bbox(s),
        None => Ok(BBox::full(img.width, img.height)),
    }
}

fn word_class(word: &str, words: &[&str], what: &str) -> Result<usize, Error> {
    words
        .iter()
        .position(|w| *w == word)
        .ok_or_else(|| Error::InvalidConfig(format!("unknown {what} `{word}`, one of {words:?}")))
}

fn prompt_scene(prompt: &PromptArgs) -> Result<loraspace::synthdata::SceneParams, Error> {
    let bg = word_class(
        &prompt.prompt_bg,
        &["red", "green", "blue", "yellow", "magenta"],
        "background",
    )?;
    let cloth = word_class(
        &prompt.prompt_cloth,
        &["white", "black", "orange", "cyan"],
        "clothing",
    )?;
    debug_assert!(bg < N_BACKGROUNDS && cloth < N_CLOTHING);
    Ok(reference_scene(bg, cloth))
}

fn default_checkpoint(paths: &RunPaths, name: &str) -> PathBuf {
    paths.checkpoints.join(name)
}

fn load_checkpoint(
    cfg: &PipelineConfig,
    paths: &RunPaths,
    explicit: Option<&PathBuf>,
    default_name: &str,
) -> Result<Nets, Error> {
    let path = explicit
        .cloned()
        .unwrap_or_else(|| default_checkpoint(paths, default_name));
    load_nets(cfg, path)
}

fn load_dataset(cfg: &PipelineConfig, paths: &RunPaths) -> Result<Dataset, Error> {
    ensure_dataset(cfg, &paths.dataset)
}

/// Coefficients for one or more reference images; multiple images are
/// coefficient-averaged.
fn coeffs_from_images(
    nets: &Nets,
    images: &[PathBuf],
    bboxes: &[String],
) -> Result<(LoraCoefficients, LoraCoefficients), Error> {
    let mut ids = Vec::new();
    let mut bases = Vec::new();
    for (i, path) in images.iter().enumerate() {
        let img = Image::load_ppm(path)?;
        let bbox = bbox_or_full(bboxes.get(i), &img)?;
        let (ci, cb) = generate_lora(&img, bbox, &nets.hyper_id, &nets.hyper_base, &nets.encoders)?;
        ids.push(ci);
        bases.push(cb);
    }
    Ok((average(&ids)?, average(&bases)?))
}

fn load_lora_file(path: &Path, nets: &Nets) -> Result<(LoraCoefficients, LoraCoefficients), Error> {
    let tensors = archive::load_archive(path)?;
    let get = |kind: AdapterKind| -> Result<LoraCoefficients, Error> {
        let key = LoraCoefficients::archive_key(kind);
        let t = tensors
            .get(&key)
            .ok_or_else(|| Error::MissingParameter { name: key.clone() })?;
        let c = LoraCoefficients::from_tensor(kind, t)?;
        c.check_layout(nets.layout())?;
        Ok(c)
    };
    get(AdapterKind::Id).and_then(|ci| get(AdapterKind::Base).map(|cb| (ci, cb)))
}

fn run(cli: Cli) -> Result<(), (u8, String)> {
    let rc = load_run_config(&cli)?;
    let cfg = &rc.pipeline;
    let paths = &rc.paths;
    let fail = |e: Error| (exit_code_for(&e), e.to_string());

    match cli.cmd {
        Cmd::DatasetGen { out } => {
            let path = out.unwrap_or_else(|| paths.dataset.clone());
            let n = loraspace::synthdata::make_dataset(
                cfg.dataset.n_identities,
                cfg.dataset.per_identity,
                cfg.seed,
                &path,
            )
            .map_err(fail)?;
            println!("wrote {n} samples to {}", path.display());
        }
        Cmd::TrainBase { out } => {
            let dataset = load_dataset(cfg, paths).map_err(fail)?;
            let (mut nets, r2, triples) = init_nets(cfg, &dataset).map_err(fail)?;
            println!("id encoder: validation R2 {r2:.3}, triple accuracy {triples:.3}");
            let mut log =
                TrainLog::to_file(paths.checkpoints.join("train_log.jsonl")).map_err(fail)?;
            let outcome =
                train_base_model(&mut nets, &dataset, &cfg.train, Some(&paths.checkpoints), &mut log)
                    .map_err(fail)?;
            println!(
                "base model: loss {:.4} -> {:.4}",
                outcome.mean_first_losses, outcome.mean_last_losses
            );
            let path = out.unwrap_or_else(|| default_checkpoint(paths, "base_final.hlra"));
            nets.save(&path).map_err(fail)?;
            println!("checkpoint: {}", path.display());
        }
        Cmd::TrainStage1 { checkpoint, out } => {
            let dataset = load_dataset(cfg, paths).map_err(fail)?;
            let mut nets =
                load_checkpoint(cfg, paths, checkpoint.as_ref(), "base_final.hlra").map_err(fail)?;
            let mut log =
                TrainLog::to_file(paths.checkpoints.join("train_log.jsonl")).map_err(fail)?;
            let outcome = run_stage1(&mut nets, &dataset, &cfg.train, Some(&paths.checkpoints), &mut log)
                .map_err(fail)?;
            println!(
                "stage1: loss {:.4} -> {:.4}",
                outcome.mean_first_losses, outcome.mean_last_losses
            );
            let path = out.unwrap_or_else(|| default_checkpoint(paths, "stage1_final.hlra"));
            nets.save(&path).map_err(fail)?;
            println!("checkpoint: {}", path.display());
        }
        Cmd::TrainStage2 { checkpoint, out } => {
            let dataset = load_dataset(cfg, paths).map_err(fail)?;
            let mut nets = load_checkpoint(cfg, paths, checkpoint.as_ref(), "stage1_final.hlra")
                .map_err(fail)?;
            let mut log =
                TrainLog::to_file(paths.checkpoints.join("train_log.jsonl")).map_err(fail)?;
            let outcome = run_stage2(&mut nets, &dataset, &cfg.train, Some(&paths.checkpoints), &mut log)
                .map_err(fail)?;
            println!(
                "stage2: loss {:.4} -> {:.4} (situations {:?})",
                outcome.mean_first_losses, outcome.mean_last_losses, outcome.situation_counts
            );
            let path = out.unwrap_or_else(|| default_checkpoint(paths, "stage2_final.hlra"));
            nets.save(&path).map_err(fail)?;
            println!("checkpoint: {}", path.display());
        }
        Cmd::TrainStage3 { checkpoint, out } => {
            let dataset = load_dataset(cfg, paths).map_err(fail)?;
            let mut nets = load_checkpoint(cfg, paths, checkpoint.as_ref(), "stage2_final.hlra")
                .map_err(fail)?;
            let mut log =
                TrainLog::to_file(paths.checkpoints.join("train_log.jsonl")).map_err(fail)?;
            let outcome = run_stage3(&mut nets, &dataset, &cfg.train, Some(&paths.checkpoints), &mut log)
                .map_err(fail)?;
            println!(
                "stage3: loss {:.4} -> {:.4}",
                outcome.mean_first_losses, outcome.mean_last_losses
            );
            let path = out.unwrap_or_else(|| default_checkpoint(paths, "stage3_final.hlra"));
            nets.save(&path).map_err(fail)?;
            println!("checkpoint: {}", path.display());
        }
        Cmd::GenLora {
            images,
            bboxes,
            checkpoint,
            out,
        } => {
            let nets = load_checkpoint(cfg, paths, checkpoint.as_ref(), "stage3_final.hlra")
                .map_err(fail)?;
            let (ci, cb) = coeffs_from_images(&nets, &images, &bboxes).map_err(fail)?;
            let mut tensors = Archive::new();
            tensors.insert(LoraCoefficients::archive_key(AdapterKind::Id), ci.to_tensor());
            tensors.insert(LoraCoefficients::archive_key(AdapterKind::Base), cb.to_tensor());
            archive::save_archive(&out, &tensors).map_err(fail)?;
            println!("wrote adapter coefficients to {}", out.display());
        }
        Cmd::Merge {
            lora,
            base_weight,
            id_weight,
            checkpoint,
            out,
        } => {
            let nets = load_checkpoint(cfg, paths, checkpoint.as_ref(), "stage3_final.hlra")
                .map_err(fail)?;
            let (ci, cb) = load_lora_file(&lora, &nets).map_err(fail)?;
            let wi = materialize(&nets.basis_id, &ci).map_err(fail)?;
            let wb = materialize(&nets.basis_base, &cb).map_err(fail)?;
            let d = delta(&combine(&wb, &wi, base_weight, id_weight).map_err(fail)?).map_err(fail)?;
            let merged = loraspace::lora::merge(&nets.denoiser, &d, 1.0).map_err(fail)?;
            archive::save_archive(&out, &archive::params_to_tensors(&merged.params))
                .map_err(fail)?;
            println!("wrote merged model to {}", out.display());
        }
        Cmd::Sample {
            prompt,
            lora,
            base_weight,
            id_weight,
            checkpoint,
            out,
        } => {
            let nets = load_checkpoint(cfg, paths, checkpoint.as_ref(), "stage3_final.hlra")
                .map_err(fail)?;
            let scene = prompt_scene(&prompt).map_err(fail)?;
            let model = match &lora {
                Some(path) => {
                    let (ci, cb) = load_lora_file(path, &nets).map_err(fail)?;
                    personalized_model(&nets, Some(&ci), Some(&cb), base_weight, id_weight)
                        .map_err(fail)?
                }
                None => nets.denoiser.clone(),
            };
            let steps = prompt.steps.unwrap_or(cfg.denoiser.t_steps);
            let img = sample(
                &model,
                &nets.schedule,
                &prompt_caption(&nets, &scene),
                prompt.cfg,
                steps,
                cfg.seed,
                None,
            )
            .map_err(fail)?;
            img.save_ppm(&out).map_err(fail)?;
            println!("wrote {}", out.display());
        }
        Cmd::Interp {
            image_a,
            image_b,
            bbox_a,
            bbox_b,
            frames,
            prompt,
            base_weight,
            checkpoint,
            out,
        } => {
            let nets = load_checkpoint(cfg, paths, checkpoint.as_ref(), "stage3_final.hlra")
                .map_err(fail)?;
            let img_a = Image::load_ppm(&image_a).map_err(fail)?;
            let img_b = Image::load_ppm(&image_b).map_err(fail)?;
            let ba = bbox_or_full(bbox_a.as_ref(), &img_a).map_err(fail)?;
            let bb = bbox_or_full(bbox_b.as_ref(), &img_b).map_err(fail)?;
            let (cia, cba) =
                generate_lora(&img_a, ba, &nets.hyper_id, &nets.hyper_base, &nets.encoders)
                    .map_err(fail)?;
            let (cib, cbb) =
                generate_lora(&img_b, bb, &nets.hyper_id, &nets.hyper_base, &nets.encoders)
                    .map_err(fail)?;
            let scene = prompt_scene(&prompt).map_err(fail)?;
            let sample_steps = prompt.steps.unwrap_or(cfg.denoiser.t_steps);
            for i in 0..frames {
                let t = i as f32 / (frames - 1).max(1) as f32;
                let ci = interp(&[cia.clone(), cib.clone()], &[1.0 - t, t]).map_err(fail)?;
                let cb = interp(&[cba.clone(), cbb.clone()], &[1.0 - t, t]).map_err(fail)?;
                let model = personalized_model(&nets, Some(&ci), Some(&cb), base_weight, 1.0)
                    .map_err(fail)?;
                let img = sample(
                    &model,
                    &nets.schedule,
                    &prompt_caption(&nets, &scene),
                    prompt.cfg,
                    sample_steps,
                    cfg.seed,
                    None,
                )
                .map_err(fail)?;
                img.save_ppm(out.join(format!("interp_{i:02}.ppm"))).map_err(fail)?;
            }
            println!("wrote {frames} frames to {}", out.display());
        }
        Cmd::Slider {
            original,
            edited,
            host,
            bbox_original,
            bbox_edited,
            bbox_host,
            scales,
            prompt,
            base_weight,
            checkpoint,
            out,
        } => {
            let nets = load_checkpoint(cfg, paths, checkpoint.as_ref(), "stage3_final.hlra")
                .map_err(fail)?;
            let orig_img = Image::load_ppm(&original).map_err(fail)?;
            let edit_img = Image::load_ppm(&edited).map_err(fail)?;
            let host_img = Image::load_ppm(&host).map_err(fail)?;
            let bo = bbox_or_full(bbox_original.as_ref(), &orig_img).map_err(fail)?;
            let be = bbox_or_full(bbox_edited.as_ref(), &edit_img).map_err(fail)?;
            let bh = bbox_or_full(bbox_host.as_ref(), &host_img).map_err(fail)?;
            let (co, _) =
                generate_lora(&orig_img, bo, &nets.hyper_id, &nets.hyper_base, &nets.encoders)
                    .map_err(fail)?;
            let (ce, _) =
                generate_lora(&edit_img, be, &nets.hyper_id, &nets.hyper_base, &nets.encoders)
                    .map_err(fail)?;
            let (ch, cbh) =
                generate_lora(&host_img, bh, &nets.hyper_id, &nets.hyper_base, &nets.encoders)
                    .map_err(fail)?;
            let slide = slider(&ce, &co).map_err(fail)?;
            let scene = prompt_scene(&prompt).map_err(fail)?;
            let sample_steps = prompt.steps.unwrap_or(cfg.denoiser.t_steps);
            for (i, &s) in scales.iter().enumerate() {
                let shifted = interp(&[ch.clone(), slide.clone()], &[1.0, s]).map_err(fail)?;
                let wi = materialize(&nets.basis_id, &shifted).map_err(fail)?;
                let wb = materialize(&nets.basis_base, &cbh).map_err(fail)?;
                let d =
                    delta(&combine(&wb, &wi, base_weight, 1.0).map_err(fail)?).map_err(fail)?;
                let _ = scale_weights(&wi, 1.0);
                let model = loraspace::lora::merge(&nets.denoiser, &d, 1.0).map_err(fail)?;
                let img = sample(
                    &model,
                    &nets.schedule,
                    &prompt_caption(&nets, &scene),
                    prompt.cfg,
                    sample_steps,
                    cfg.seed,
                    None,
                )
                .map_err(fail)?;
                img.save_ppm(out.join(format!("slider_{i:02}_scale_{s}.ppm")))
                    .map_err(fail)?;
            }
            println!("wrote {} frames to {}", scales.len(), out.display());
        }
        Cmd::Eval { checkpoint, out } => {
            let nets = load_checkpoint(cfg, paths, checkpoint.as_ref(), "stage3_final.hlra")
                .map_err(fail)?;
            let dir = out.unwrap_or_else(|| paths.reports.clone());
            let report = full_report(&nets, &cfg.eval, &dir).map_err(fail)?;
            println!(
                "id-sim margin {:.3}; multi-image {:.3} vs single {:.3}; editability id-only {:.3} vs full {:.3}",
                report.fidelity.id_sim_margin,
                report.multi_image.mean_id_sim_multi,
                report.multi_image.mean_id_sim_single,
                report.editability.mean_with_without_id_only,
                report.editability.mean_with_without_full,
            );
            println!("report: {}", dir.join("report.json").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err((code, message)) => {
            eprintln!("error[{code}]: {message}");
            ExitCode::from(code)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bbox_parsing() {
        assert_eq!(
            parse_bbox("1,2,3,4").unwrap(),
            BBox { x: 1, y: 2, w: 3, h: 4 }
        );
        assert!(parse_bbox("1,2,3").is_err());
        assert!(parse_bbox("a,b,c,d").is_err());
    }

    #[test]
    fn cli_parses_subcommands() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
        let cli = Cli::parse_from([
            "loraspace", "sample", "--prompt-bg", "red", "--cfg", "5", "--seed", "7", "--out",
            "x.ppm",
        ]);
        assert_eq!(cli.seed, Some(7));
        match cli.cmd {
            Cmd::Sample { prompt, .. } => {
                assert_eq!(prompt.prompt_bg, "red");
                assert_eq!(prompt.cfg, 5.0);
            }
            _ => panic!("expected sample"),
        }
    }

    #[test]
    fn unknown_flags_are_rejected() {
        assert!(Cli::try_parse_from(["loraspace", "eval", "--bogus"]).is_err());
    }

    #[test]
    fn run_config_defaults_parse() {
        let rc: RunConfig = serde_json::from_str(r#"{"seed": 5}"#).unwrap();
        assert_eq!(rc.pipeline.seed, 5);
        assert_eq!(rc.paths.dataset, PathBuf::from("runs/dataset.hlra"));
    }
}
