//! Fidelity and editability metrics, interpolation and slider evaluation,
//! CFG-range sweep, and structured report emission.
//!
//! The metric analogs are exact by construction: structural similarity is
//! the cosine of pooled frozen features, identity similarity is the cosine
//! of trained identity embeddings, and prompt following is nearest-mean-color
//! classification against the generator's known background palette.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::denoiser::{sample, DenoiserModel};
use crate::encoders::{full_frame, EncoderStack, FeatureEncoder};
use crate::error::{Error, Result};
use crate::hypernet::generate_lora;
use crate::img::{BBox, Image};
use crate::lora::{
    average, combine, delta, interp, materialize, scale_weights, slider, LoraCoefficients,
};
use crate::numerics::{cosine, label_id, RngStream};
use crate::synthdata::{
    self, caption, classify_background, gen_identity, gen_scene, pad_caption, reference_scene,
    render, IdentityParams, SceneParams, N_BACKGROUNDS, N_CLOTHING,
};
use crate::trainer::Nets;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct EvalConfig {
    /// Identities never seen in any training stage.
    pub held_out_identities: usize,
    pub prompts_per_identity: usize,
    pub sample_steps: usize,
    pub cfg_scale: f32,
    /// Base-adapter weight of the full inference mix.
    pub base_weight: f32,
    pub id_weight: f32,
    pub multi_image_inputs: usize,
    pub interp_pairs: usize,
    pub interp_steps: usize,
    pub slider_pairs: usize,
    pub slider_scales: Vec<f32>,
    pub cfg_sweep_scales: Vec<f32>,
    pub cfg_sweep_seeds: usize,
    pub seed: u64,
    /// Emit every generated image as a PPM file under the run directory.
    pub save_images: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            held_out_identities: 20,
            prompts_per_identity: 4,
            sample_steps: 50,
            cfg_scale: 5.0,
            base_weight: 0.4,
            id_weight: 1.0,
            multi_image_inputs: 4,
            interp_pairs: 3,
            interp_steps: 5,
            slider_pairs: 20,
            slider_scales: vec![-1.0, 0.0, 1.0],
            cfg_sweep_scales: vec![3.0, 4.0, 5.0, 6.0, 7.0],
            cfg_sweep_seeds: 2,
            seed: 7,
            save_images: true,
        }
    }
}

/// Cosine of pooled structural features of two images.
pub fn clip_i(features: &FeatureEncoder, a: &Image, b: &Image) -> Result<f32> {
    let fa = features.pooled(a)?;
    let fb = features.pooled(b)?;
    cosine(&fa, &fb)
}

/// Cosine of identity embeddings of two face crops. Images without a known
/// face box (generated ones) use the full frame.
pub fn id_sim(
    stack: &EncoderStack,
    a: &Image,
    a_bbox: Option<BBox>,
    b: &Image,
    b_bbox: Option<BBox>,
) -> Result<f32> {
    let crop = |img: &Image, bbox: Option<BBox>| -> Result<_> {
        match bbox {
            Some(bb) => {
                if bb.is_empty() {
                    return Err(Error::InvalidConfig("empty face bbox".into()));
                }
                stack.crop(img, bb)
            }
            None => Ok(full_frame(&stack.cfg, img)),
        }
    };
    let ea = stack.id_encoder.embed(&crop(a, a_bbox)?)?;
    let eb = stack.id_encoder.embed(&crop(b, b_bbox)?)?;
    cosine(&ea, &eb)
}

/// Merge the selected adapters into a fresh copy of the base model.
///
/// With both coefficient sets present this is the "full" mix: the two
/// materialized adapters are combined slotwise at the given weights before
/// the low-rank product. With only one present, that adapter is scaled by
/// its weight.
pub fn personalized_model(
    nets: &Nets,
    coeffs_id: Option<&LoraCoefficients>,
    coeffs_base: Option<&LoraCoefficients>,
    w_base: f32,
    w_id: f32,
) -> Result<DenoiserModel> {
    let d = match (coeffs_id, coeffs_base) {
        (Some(ci), Some(cb)) => {
            let wi = materialize(&nets.basis_id, ci)?;
            let wb = materialize(&nets.basis_base, cb)?;
            delta(&combine(&wb, &wi, w_base, w_id)?)?
        }
        (Some(ci), None) => delta(&scale_weights(&materialize(&nets.basis_id, ci)?, w_id))?,
        (None, Some(cb)) => delta(&scale_weights(&materialize(&nets.basis_base, cb)?, w_base))?,
        (None, None) => return Ok(nets.denoiser.clone()),
    };
    crate::lora::merge(&nets.denoiser, &d, 1.0)
}

/// Trigger-prefixed caption for a generation prompt.
pub fn prompt_caption(nets: &Nets, scene: &SceneParams) -> Vec<u32> {
    pad_caption(&caption(scene, true), nets.denoiser.cfg.max_caption_len)
}

fn generate(
    nets: &Nets,
    model: &DenoiserModel,
    scene: &SceneParams,
    cfg: &EvalConfig,
    seed: u64,
) -> Result<Image> {
    sample(
        model,
        &nets.schedule,
        &prompt_caption(nets, scene),
        cfg.cfg_scale,
        cfg.sample_steps,
        seed,
        None,
    )
}

/// Editability probe: generate at the same seed with and without the
/// adapter; report the structural similarity between the two generations
/// and whether the background followed the prompt.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EditabilityOutcome {
    pub with_without_sim: f32,
    pub attr_follow: bool,
}

pub fn editability_pair(
    nets: &Nets,
    model: &DenoiserModel,
    scene: &SceneParams,
    cfg: &EvalConfig,
    seed: u64,
) -> Result<EditabilityOutcome> {
    let with_adapter = generate(nets, model, scene, cfg, seed)?;
    let without = generate(nets, &nets.denoiser, scene, cfg, seed)?;
    Ok(EditabilityOutcome {
        with_without_sim: clip_i(&nets.encoders.features, &with_adapter, &without)?,
        attr_follow: classify_background(&with_adapter, None) == scene.background,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InterpPoint {
    pub t: f32,
    pub sim_to_a: f32,
    pub sim_to_b: f32,
}

/// Sweep the coefficient line between two identities and record identity
/// similarity to both endpoints.
#[allow(clippy::too_many_arguments)]
pub fn interp_curve(
    nets: &Nets,
    coeffs_a: (&LoraCoefficients, &LoraCoefficients),
    coeffs_b: (&LoraCoefficients, &LoraCoefficients),
    ref_a: (&Image, BBox),
    ref_b: (&Image, BBox),
    scene: &SceneParams,
    cfg: &EvalConfig,
    seed: u64,
) -> Result<Vec<InterpPoint>> {
    let mut out = Vec::with_capacity(cfg.interp_steps);
    for i in 0..cfg.interp_steps {
        let t = i as f32 / (cfg.interp_steps - 1).max(1) as f32;
        let ci = interp(
            &[coeffs_a.0.clone(), coeffs_b.0.clone()],
            &[1.0 - t, t],
        )?;
        let cb = interp(
            &[coeffs_a.1.clone(), coeffs_b.1.clone()],
            &[1.0 - t, t],
        )?;
        let model = personalized_model(nets, Some(&ci), Some(&cb), cfg.base_weight, cfg.id_weight)?;
        let img = generate(nets, &model, scene, cfg, seed)?;
        out.push(InterpPoint {
            t,
            sim_to_a: id_sim(&nets.encoders, &img, None, ref_a.0, Some(ref_a.1))?,
            sim_to_b: id_sim(&nets.encoders, &img, None, ref_b.0, Some(ref_b.1))?,
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SliderResult {
    /// Which identity dimension the pair edits.
    pub edited_dim: usize,
    /// Sign of the edit applied to the original identity.
    pub direction: f32,
    /// Regressed attribute value at each requested scale.
    pub values: Vec<f32>,
    pub monotonic: bool,
}

/// Apply slider coefficients (edited minus original) at several scales on
/// top of a third identity's adapter and regress the edited attribute from
/// each generation.
#[allow(clippy::too_many_arguments)]
pub fn slider_eval(
    nets: &Nets,
    original: (&Image, BBox),
    edited: (&Image, BBox),
    host_coeffs: (&LoraCoefficients, &LoraCoefficients),
    edited_dim: usize,
    direction: f32,
    scene: &SceneParams,
    cfg: &EvalConfig,
    seed: u64,
) -> Result<SliderResult> {
    let (c_orig, _) = generate_lora(
        original.0,
        original.1,
        &nets.hyper_id,
        &nets.hyper_base,
        &nets.encoders,
    )?;
    let (c_edit, _) = generate_lora(
        edited.0,
        edited.1,
        &nets.hyper_id,
        &nets.hyper_base,
        &nets.encoders,
    )?;
    let slide = slider(&c_edit, &c_orig)?;

    let mut values = Vec::with_capacity(cfg.slider_scales.len());
    for &s in &cfg.slider_scales {
        let shifted = interp(&[host_coeffs.0.clone(), slide.clone()], &[1.0, s])?;
        let model = personalized_model(
            nets,
            Some(&shifted),
            Some(host_coeffs.1),
            cfg.base_weight,
            cfg.id_weight,
        )?;
        let img = generate(nets, &model, scene, cfg, seed)?;
        let attrs = nets
            .encoders
            .id_encoder
            .regress(&full_frame(&nets.encoders.cfg, &img))?;
        values.push(attrs.data()[edited_dim]);
    }
    let monotonic = values.windows(2).all(|w| (w[1] - w[0]) * direction >= 0.0);
    Ok(SliderResult {
        edited_dim,
        direction,
        values,
        monotonic,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CfgPoint {
    pub w: f32,
    /// Fraction of output pixels at the clamp bounds.
    pub saturation: f64,
    pub attr_follow: f64,
}

/// Generate across the guidance range and report saturation and prompt
/// following per scale.
pub fn cfg_sweep(
    nets: &Nets,
    model: &DenoiserModel,
    scene: &SceneParams,
    cfg: &EvalConfig,
) -> Result<Vec<CfgPoint>> {
    let mut out = Vec::new();
    for &w in &cfg.cfg_sweep_scales {
        let mut saturation = 0.0;
        let mut follows = 0usize;
        for s in 0..cfg.cfg_sweep_seeds {
            let seed = label_id("cfg-sweep") ^ (s as u64) ^ (w.to_bits() as u64);
            let img = sample(
                model,
                &nets.schedule,
                &prompt_caption(nets, scene),
                w,
                cfg.sample_steps,
                seed,
                None,
            )?;
            let extreme = img
                .pixels
                .iter()
                .filter(|&&p| p == 0 || p == 255)
                .count();
            saturation += extreme as f64 / img.pixels.len() as f64;
            if classify_background(&img, None) == scene.background {
                follows += 1;
            }
        }
        out.push(CfgPoint {
            w,
            saturation: saturation / cfg.cfg_sweep_seeds as f64,
            attr_follow: follows as f64 / cfg.cfg_sweep_seeds as f64,
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct IdentityRow {
    pub identity: usize,
    pub prompt: usize,
    pub id_sim: f32,
    pub id_sim_shuffled: f32,
    pub clip_i: f32,
    pub with_without_id_only: f32,
    pub with_without_full: f32,
    pub attr_follow_id_only: bool,
    pub attr_follow_full: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FidelitySection {
    pub mean_clip_i: f64,
    pub mean_id_sim: f64,
    pub mean_id_sim_shuffled: f64,
    /// `mean_id_sim - mean_id_sim_shuffled`.
    pub id_sim_margin: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MultiImageSection {
    pub mean_id_sim_single: f64,
    pub mean_id_sim_multi: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EditabilitySection {
    pub mean_with_without_id_only: f64,
    pub mean_with_without_full: f64,
    pub attr_follow_id_only: f64,
    pub attr_follow_full: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SliderSection {
    pub monotonic_fraction: f64,
    pub results: Vec<SliderResult>,
}

/// The complete evaluation report; serialized as `report.json`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub config: EvalConfig,
    pub fidelity: FidelitySection,
    pub multi_image: MultiImageSection,
    pub editability: EditabilitySection,
    pub interpolation: Vec<Vec<InterpPoint>>,
    pub slider: SliderSection,
    pub cfg_sweep: Vec<CfgPoint>,
    pub rows: Vec<IdentityRow>,
}

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Held-out identity `i`: depends only on the eval seed, never on training
/// streams.
pub fn held_out_identity(seed: u64, i: usize) -> IdentityParams {
    let mut rng = RngStream::named(seed, "eval-holdout")
        .derive("identity")
        .derive_u64(i as u64);
    gen_identity(&mut rng)
}

/// Fixed prompt scenes cycling over background and clothing classes.
pub fn prompt_scene(j: usize) -> SceneParams {
    reference_scene(j % N_BACKGROUNDS, (j + 1) % N_CLOTHING)
}

struct PerIdentity {
    reference: Image,
    ref_bbox: BBox,
    coeffs_id: LoraCoefficients,
    coeffs_base: LoraCoefficients,
    multi_id: LoraCoefficients,
    multi_base: LoraCoefficients,
}

fn prepare_identity(nets: &Nets, cfg: &EvalConfig, i: usize) -> Result<PerIdentity> {
    let identity = held_out_identity(cfg.seed, i);
    let (reference, ref_bbox) = render(&identity, &reference_scene(0, 0));
    let (coeffs_id, coeffs_base) = generate_lora(
        &reference,
        ref_bbox,
        &nets.hyper_id,
        &nets.hyper_base,
        &nets.encoders,
    )?;

    // Multi-image inputs: the reference plus extra scenes of the same
    // identity, coefficient-averaged.
    let mut ids = vec![coeffs_id.clone()];
    let mut bases = vec![coeffs_base.clone()];
    let scene_rng = RngStream::named(cfg.seed, "eval-holdout")
        .derive("scenes")
        .derive_u64(i as u64);
    for j in 1..cfg.multi_image_inputs.max(1) {
        let mut rng = scene_rng.derive_u64(j as u64);
        let scene = gen_scene(&mut rng);
        let (img, bbox) = render(&identity, &scene);
        let (ci, cb) = generate_lora(&img, bbox, &nets.hyper_id, &nets.hyper_base, &nets.encoders)?;
        ids.push(ci);
        bases.push(cb);
    }
    Ok(PerIdentity {
        reference,
        ref_bbox,
        coeffs_id,
        coeffs_base,
        multi_id: average(&ids)?,
        multi_base: average(&bases)?,
    })
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Run every suite over the held-out identities and write `report.json`,
/// `metrics.csv`, and the generated images under `out_dir`.
pub fn full_report(nets: &Nets, cfg: &EvalConfig, out_dir: impl AsRef<Path>) -> Result<EvalReport> {
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;

    let n = cfg.held_out_identities;
    let identities: Vec<PerIdentity> = (0..n)
        .into_par_iter()
        .map(|i| prepare_identity(nets, cfg, i))
        .collect::<Result<_>>()?;

    // Fidelity and editability rows, one per identity x prompt, generated in
    // parallel; every seed is derived from stable labels.
    struct RowOut {
        row: IdentityRow,
        full_img: Image,
        multi_sim: Option<f32>,
    }
    let tasks: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| (0..cfg.prompts_per_identity).map(move |j| (i, j)))
        .collect();
    let rows: Vec<RowOut> = tasks
        .par_iter()
        .map(|&(i, j)| -> Result<RowOut> {
            let ident = &identities[i];
            let scene = prompt_scene(j);
            let seed = RngStream::named(cfg.seed, "eval-gen")
                .derive_u64(i as u64)
                .derive_u64(j as u64)
                .next_u64();

            let full_model = personalized_model(
                nets,
                Some(&ident.coeffs_id),
                Some(&ident.coeffs_base),
                cfg.base_weight,
                cfg.id_weight,
            )?;
            let id_model =
                personalized_model(nets, Some(&ident.coeffs_id), None, 0.0, cfg.id_weight)?;

            let full_img = generate(nets, &full_model, &scene, cfg, seed)?;
            let id_img = generate(nets, &id_model, &scene, cfg, seed)?;
            let plain_img = generate(nets, &nets.denoiser, &scene, cfg, seed)?;

            let shuffled = &identities[(i + 1) % n];
            let row = IdentityRow {
                identity: i,
                prompt: j,
                id_sim: id_sim(
                    &nets.encoders,
                    &full_img,
                    None,
                    &ident.reference,
                    Some(ident.ref_bbox),
                )?,
                id_sim_shuffled: id_sim(
                    &nets.encoders,
                    &full_img,
                    None,
                    &shuffled.reference,
                    Some(shuffled.ref_bbox),
                )?,
                clip_i: clip_i(&nets.encoders.features, &full_img, &ident.reference)?,
                with_without_id_only: clip_i(&nets.encoders.features, &id_img, &plain_img)?,
                with_without_full: clip_i(&nets.encoders.features, &full_img, &plain_img)?,
                attr_follow_id_only: classify_background(&id_img, None) == scene.background,
                attr_follow_full: classify_background(&full_img, None) == scene.background,
            };

            // Multi-image comparison on the first prompt only.
            let multi_sim = if j == 0 {
                let multi_model = personalized_model(
                    nets,
                    Some(&ident.multi_id),
                    Some(&ident.multi_base),
                    cfg.base_weight,
                    cfg.id_weight,
                )?;
                let multi_img = generate(nets, &multi_model, &scene, cfg, seed)?;
                Some(id_sim(
                    &nets.encoders,
                    &multi_img,
                    None,
                    &ident.reference,
                    Some(ident.ref_bbox),
                )?)
            } else {
                None
            };
            Ok(RowOut {
                row,
                full_img,
                multi_sim,
            })
        })
        .collect::<Result<_>>()?;

    if cfg.save_images {
        let img_dir = out_dir.join("images");
        for (t, r) in tasks.iter().zip(&rows) {
            r.full_img
                .save_ppm(img_dir.join(format!("id{:02}_p{}_full.ppm", t.0, t.1)))?;
        }
        for (i, ident) in identities.iter().enumerate() {
            ident
                .reference
                .save_ppm(img_dir.join(format!("id{i:02}_reference.ppm")))?;
        }
    }

    let fidelity = FidelitySection {
        mean_clip_i: mean(rows.iter().map(|r| r.row.clip_i as f64)),
        mean_id_sim: mean(rows.iter().map(|r| r.row.id_sim as f64)),
        mean_id_sim_shuffled: mean(rows.iter().map(|r| r.row.id_sim_shuffled as f64)),
        id_sim_margin: mean(rows.iter().map(|r| r.row.id_sim as f64))
            - mean(rows.iter().map(|r| r.row.id_sim_shuffled as f64)),
    };
    let multi_image = MultiImageSection {
        mean_id_sim_single: mean(
            rows.iter()
                .filter(|r| r.row.prompt == 0)
                .map(|r| r.row.id_sim as f64),
        ),
        mean_id_sim_multi: mean(rows.iter().filter_map(|r| r.multi_sim.map(f64::from))),
    };
    let editability = EditabilitySection {
        mean_with_without_id_only: mean(rows.iter().map(|r| r.row.with_without_id_only as f64)),
        mean_with_without_full: mean(rows.iter().map(|r| r.row.with_without_full as f64)),
        attr_follow_id_only: mean(
            rows.iter()
                .map(|r| if r.row.attr_follow_id_only { 1.0 } else { 0.0 }),
        ),
        attr_follow_full: mean(
            rows.iter()
                .map(|r| if r.row.attr_follow_full { 1.0 } else { 0.0 }),
        ),
    };

    // Interpolation curves between consecutive held-out identities.
    let interpolation: Vec<Vec<InterpPoint>> = (0..cfg.interp_pairs.min(n.saturating_sub(1)))
        .into_par_iter()
        .map(|p| {
            let a = &identities[p];
            let b = &identities[p + 1];
            let seed = RngStream::named(cfg.seed, "eval-interp")
                .derive_u64(p as u64)
                .next_u64();
            interp_curve(
                nets,
                (&a.coeffs_id, &a.coeffs_base),
                (&b.coeffs_id, &b.coeffs_base),
                (&a.reference, a.ref_bbox),
                (&b.reference, b.ref_bbox),
                &prompt_scene(0),
                cfg,
                seed,
            )
        })
        .collect::<Result<_>>()?;

    // Slider pairs: generator-constructed single-attribute edits, applied on
    // a host identity.
    let slider_results: Vec<SliderResult> = (0..cfg.slider_pairs)
        .into_par_iter()
        .map(|p| -> Result<SliderResult> {
            let mut rng = RngStream::named(cfg.seed, "eval-slider").derive_u64(p as u64);
            let identity = gen_identity(&mut rng);
            let dim = p % synthdata::IDENTITY_DIMS;
            let v = identity.to_vec()[dim];
            let direction = if v > 0.5 { -1.0f32 } else { 1.0 };
            let edited = identity.with_dim(dim, v + 0.45 * direction);
            let scene = reference_scene(0, 0);
            let (orig_img, orig_bbox) = render(&identity, &scene);
            let (edit_img, edit_bbox) = render(&edited, &scene);
            let host = &identities[p % n.max(1)];
            let seed = rng.next_u64();
            slider_eval(
                nets,
                (&orig_img, orig_bbox),
                (&edit_img, edit_bbox),
                (&host.coeffs_id, &host.coeffs_base),
                dim,
                direction,
                &prompt_scene(1),
                cfg,
                seed,
            )
        })
        .collect::<Result<_>>()?;
    let slider = SliderSection {
        monotonic_fraction: mean(
            slider_results
                .iter()
                .map(|r| if r.monotonic { 1.0 } else { 0.0 }),
        ),
        results: slider_results,
    };

    // CFG sweep on the first identity's full adapter.
    let sweep_model = personalized_model(
        nets,
        Some(&identities[0].coeffs_id),
        Some(&identities[0].coeffs_base),
        cfg.base_weight,
        cfg.id_weight,
    )?;
    let cfg_points = cfg_sweep(nets, &sweep_model, &prompt_scene(0), cfg)?;

    let report = EvalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        config: cfg.clone(),
        fidelity,
        multi_image,
        editability,
        interpolation,
        slider,
        cfg_sweep: cfg_points,
        rows: rows.into_iter().map(|r| r.row).collect(),
    };

    let json = serde_json::to_string_pretty(&report)?;
    std::fs::write(out_dir.join("report.json"), &json)
        .map_err(|e| Error::io("report.json", e))?;
    std::fs::write(out_dir.join("metrics.csv"), report_csv(&report))
        .map_err(|e| Error::io("metrics.csv", e))?;
    Ok(report)
}

/// One CSV row per identity x prompt.
pub fn report_csv(report: &EvalReport) -> String {
    let mut out = String::from(
        "identity,prompt,id_sim,id_sim_shuffled,clip_i,with_without_id_only,with_without_full,attr_follow_id_only,attr_follow_full\n",
    );
    for r in &report.rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.identity,
            r.prompt,
            r.id_sim,
            r.id_sim_shuffled,
            r.clip_i,
            r.with_without_id_only,
            r.with_without_full,
            r.attr_follow_id_only as u8,
            r.attr_follow_full as u8
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::DenoiserConfig;
    use crate::encoders::{EncoderConfig, IdEncoder};
    use crate::hypernet::HyperConfig;
    use crate::lora::{AdapterKind, LoraLayout};
    use crate::numerics::Array;

    fn tiny_nets(seed: u64) -> Nets {
        let dcfg = DenoiserConfig {
            image_size: 32,
            patch_size: 8,
            d_model: 16,
            n_blocks: 2,
            n_heads: 2,
            t_steps: 10,
            ff_mult: 2,
            ..DenoiserConfig::default()
        };
        let hcfg = HyperConfig {
            latent_count: 4,
            d_hidden: 16,
            n_layers: 2,
            id_tokens: 2,
            embed_dim: 16,
            d_feat: 64,
            ff_mult: 1,
        };
        let layout = LoraLayout::dense(dcfg.n_blocks, dcfg.d_model, 2, 1, 2);
        let ecfg = EncoderConfig::default();
        let idenc = IdEncoder::init(&ecfg, &RngStream::named(seed, "idenc"));
        Nets::init(&dcfg, &hcfg, &layout, &ecfg, idenc, seed).unwrap()
    }

    #[test]
    fn clip_i_identity_and_symmetry() {
        let nets = tiny_nets(1);
        let mut rng = RngStream::named(2, "imgs");
        let (a, _) = render(&gen_identity(&mut rng), &gen_scene(&mut rng));
        let (b, _) = render(&gen_identity(&mut rng), &gen_scene(&mut rng));
        assert!((clip_i(&nets.encoders.features, &a, &a).unwrap() - 1.0).abs() < 1e-6);
        assert_eq!(
            clip_i(&nets.encoders.features, &a, &b).unwrap(),
            clip_i(&nets.encoders.features, &b, &a).unwrap()
        );
    }

    #[test]
    fn clip_i_matches_scalar_cosine_oracle() {
        let nets = tiny_nets(3);
        let mut rng = RngStream::named(4, "imgs");
        let (a, _) = render(&gen_identity(&mut rng), &gen_scene(&mut rng));
        let (b, _) = render(&gen_identity(&mut rng), &gen_scene(&mut rng));
        let fa = nets.encoders.features.pooled(&a).unwrap();
        let fb = nets.encoders.features.pooled(&b).unwrap();
        let mut dot = 0.0f64;
        let mut na = 0.0f64;
        let mut nb = 0.0f64;
        for i in 0..fa.len() {
            dot += fa.data()[i] as f64 * fb.data()[i] as f64;
            na += (fa.data()[i] as f64).powi(2);
            nb += (fb.data()[i] as f64).powi(2);
        }
        let want = dot / (na.sqrt() * nb.sqrt());
        let got = clip_i(&nets.encoders.features, &a, &b).unwrap() as f64;
        assert!((got - want).abs() < 1e-6);
    }

    #[test]
    fn id_sim_bounds_and_self_similarity() {
        let nets = tiny_nets(5);
        let mut rng = RngStream::named(6, "imgs");
        let (a, ba) = render(&gen_identity(&mut rng), &gen_scene(&mut rng));
        let (b, bb) = render(&gen_identity(&mut rng), &gen_scene(&mut rng));
        let same = id_sim(&nets.encoders, &a, Some(ba), &a, Some(ba)).unwrap();
        assert!((same - 1.0).abs() < 1e-6);
        let cross = id_sim(&nets.encoders, &a, Some(ba), &b, Some(bb)).unwrap();
        assert!((-1.0..=1.0).contains(&cross));
        // Missing bbox falls back to the full frame rather than erroring;
        // an explicitly empty bbox is rejected.
        assert!(id_sim(&nets.encoders, &a, None, &b, Some(bb)).is_ok());
        let empty = BBox { x: 0, y: 0, w: 0, h: 0 };
        assert!(id_sim(&nets.encoders, &a, Some(empty), &b, Some(bb)).is_err());
    }

    #[test]
    fn zero_coefficient_adapter_means_identical_generations() {
        let nets = tiny_nets(7);
        let zero_id = LoraCoefficients::zeros(AdapterKind::Id, nets.layout());
        let model = personalized_model(&nets, Some(&zero_id), None, 0.0, 1.0).unwrap();
        let cfg = EvalConfig {
            sample_steps: 4,
            ..EvalConfig::default()
        };
        let out = editability_pair(&nets, &model, &prompt_scene(0), &cfg, 11).unwrap();
        assert_eq!(out.with_without_sim, 1.0);
    }

    #[test]
    fn interp_curve_endpoints_reproduce_coefficients() {
        let layout = tiny_nets(8).layout().clone();
        let mut rng = RngStream::named(9, "coef");
        let a = LoraCoefficients {
            kind: AdapterKind::Id,
            values: rng.normal_array(vec![layout.n_sites() * 8, layout.k_basis], 1.0),
        };
        let b = LoraCoefficients {
            kind: AdapterKind::Id,
            values: rng.normal_array(vec![layout.n_sites() * 8, layout.k_basis], 1.0),
        };
        let at0 = interp(&[a.clone(), b.clone()], &[1.0, 0.0]).unwrap();
        let at1 = interp(&[a.clone(), b.clone()], &[0.0, 1.0]).unwrap();
        assert_eq!(at0, a);
        assert_eq!(at1, b);
        // Affine along the line: c(t1) + c(t2) == c(t1 + t2) + c(0).
        let c = |t: f32| interp(&[a.clone(), b.clone()], &[1.0 - t, t]).unwrap();
        let lhs = c(0.25).values.add(&c(0.5).values).unwrap();
        let rhs = c(0.75).values.add(&c(0.0).values).unwrap();
        for (x, y) in lhs.data().iter().zip(rhs.data()) {
            assert!((x - y).abs() < 1e-5);
        }
    }

    #[test]
    fn cfg_sweep_outputs_are_clamped_and_logged() {
        let nets = tiny_nets(10);
        let cfg = EvalConfig {
            sample_steps: 3,
            cfg_sweep_scales: vec![3.0, 7.0],
            cfg_sweep_seeds: 1,
            ..EvalConfig::default()
        };
        let points = cfg_sweep(&nets, &nets.denoiser, &prompt_scene(0), &cfg).unwrap();
        assert_eq!(points.len(), 2);
        for p in &points {
            assert!(p.saturation.is_finite());
            assert!((0.0..=1.0).contains(&p.saturation));
            assert!((0.0..=1.0).contains(&p.attr_follow));
        }
    }

    #[test]
    fn report_round_trips_through_schema() {
        let nets = tiny_nets(11);
        let cfg = EvalConfig {
            held_out_identities: 2,
            prompts_per_identity: 1,
            sample_steps: 2,
            multi_image_inputs: 2,
            interp_pairs: 1,
            interp_steps: 2,
            slider_pairs: 1,
            cfg_sweep_scales: vec![3.0],
            cfg_sweep_seeds: 1,
            save_images: false,
            ..EvalConfig::default()
        };
        let dir = std::env::temp_dir().join("loraspace-eval-test");
        let report = full_report(&nets, &cfg, &dir).unwrap();
        let json = std::fs::read_to_string(dir.join("report.json")).unwrap();
        let parsed: EvalReport = serde_json::from_str(&json).unwrap();
        assert_eq!(parsed.schema_version, REPORT_SCHEMA_VERSION);
        assert_eq!(parsed.rows.len(), report.rows.len());
        assert!(report.fidelity.mean_id_sim.is_finite());
        // Cosine metrics bounded.
        for r in &report.rows {
            assert!((-1.0..=1.0).contains(&r.id_sim));
            assert!((-1.0..=1.0).contains(&r.clip_i));
        }
        let csv = std::fs::read_to_string(dir.join("metrics.csv")).unwrap();
        assert_eq!(csv.lines().count(), 1 + report.rows.len());
    }

    #[test]
    fn report_bytes_are_deterministic() {
        let nets = tiny_nets(12);
        let cfg = EvalConfig {
            held_out_identities: 2,
            prompts_per_identity: 1,
            sample_steps: 2,
            multi_image_inputs: 2,
            interp_pairs: 1,
            interp_steps: 2,
            slider_pairs: 1,
            cfg_sweep_scales: vec![3.0],
            cfg_sweep_seeds: 1,
            save_images: false,
            ..EvalConfig::default()
        };
        let d1 = std::env::temp_dir().join("loraspace-eval-det-1");
        let d2 = std::env::temp_dir().join("loraspace-eval-det-2");
        full_report(&nets, &cfg, &d1).unwrap();
        full_report(&nets, &cfg, &d2).unwrap();
        assert_eq!(
            std::fs::read(d1.join("report.json")).unwrap(),
            std::fs::read(d2.join("report.json")).unwrap()
        );
        assert_eq!(
            std::fs::read(d1.join("metrics.csv")).unwrap(),
            std::fs::read(d2.join("metrics.csv")).unwrap()
        );
    }

    #[test]
    fn held_out_identities_are_seed_stable() {
        let a = held_out_identity(5, 3);
        let b = held_out_identity(5, 3);
        assert_eq!(a, b);
        let c = held_out_identity(6, 3);
        assert_ne!(a.to_vec(), c.to_vec());
    }

    #[test]
    fn slider_scale_zero_reproduces_host_exactly() {
        // interp with weights (1, 0) returns the host coefficients bit-exact,
        // so the scale-0 generation equals the unmodified one.
        let nets = tiny_nets(13);
        let layout = nets.layout().clone();
        let mut rng = RngStream::named(14, "host");
        let host = LoraCoefficients {
            kind: AdapterKind::Id,
            values: rng.normal_array(vec![layout.n_sites() * 8, layout.k_basis], 0.5),
        };
        let slide = LoraCoefficients {
            kind: AdapterKind::Id,
            values: rng.normal_array(vec![layout.n_sites() * 8, layout.k_basis], 0.5),
        };
        let shifted = interp(&[host.clone(), slide], &[1.0, 0.0]).unwrap();
        assert_eq!(shifted, host);
        let _ = Array::<f32>::zeros(vec![1]);
    }
}
