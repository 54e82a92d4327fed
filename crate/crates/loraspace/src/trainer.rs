//! Base-model pretraining and the three adapter training stages.
//!
//! Stage 1 warms up the identity-free branch: only the base hypernetwork and
//! base basis train, on trigger-word reconstruction, with the blurred crop as
//! input. Stage 2 adds the identity branch and samples the three training
//! situations. Stage 3 narrows the trainable set to the identity-embedding
//! attention blocks. The denoiser and both encoders stay frozen throughout,
//! enforced by parameter hashes.

use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::archive::{self, Archive};
use crate::denoiser::{
    self, bind_denoiser, forward_eps, patchify, predict_eps, q_sample, BoundAdapter,
    DenoiserConfig, DenoiserModel, NoiseSchedule,
};
use crate::encoders::{EncoderConfig, EncoderStack, IdEncoder};
use crate::error::{Error, Result};
use crate::hypernet::{bind_hyper, bind_lowrank_adapter, hyper_forward, HyperConfig, HyperNetwork};
use crate::lora::{delta, materialize, AdapterKind, LoraBasis, LoraCoefficients, LoraDelta, LoraLayout};
use crate::numerics::{Array, Graph, RngStream, Scalar};
use crate::params::{grad_map_add, grad_map_scale, Binding, GradMap, Params};
use crate::synthdata::{self, Dataset, FaceSample};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub accumulation_steps: usize,
    pub batch_size: usize,
    pub stage1_iters: usize,
    pub stage2_iters: usize,
    pub stage3_iters: usize,
    /// `(S1, S2, S3)` sampling probabilities.
    pub situation_probs: [f64; 3],
    pub seed: u64,
    /// Optimizer steps for base-model pretraining.
    pub base_iters: usize,
    pub base_batch_size: usize,
    pub base_learning_rate: f64,
    /// Checkpoint cadence in optimizer steps.
    pub checkpoint_every: usize,
    /// Stage-2 rule: freeze the structural-token attention once its
    /// reconstruction loss stops improving by this fraction...
    pub clip_freeze_threshold: f64,
    /// ...measured on a moving average of this many steps...
    pub clip_freeze_window: usize,
    /// ...compared against the average this many steps earlier.
    pub clip_freeze_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            weight_decay: 1e-4,
            accumulation_steps: 8,
            batch_size: 1,
            stage1_iters: 2000,
            stage2_iters: 1500,
            stage3_iters: 5500,
            situation_probs: [0.9, 0.05, 0.05],
            seed: 7,
            base_iters: 3000,
            base_batch_size: 16,
            base_learning_rate: 3e-4,
            checkpoint_every: 500,
            clip_freeze_threshold: 0.01,
            clip_freeze_window: 200,
            clip_freeze_interval: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let sum: f64 = self.situation_probs.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || self.situation_probs.iter().any(|&p| p < 0.0) {
            return Err(Error::InvalidConfig(format!(
                "situation probabilities {:?} must be non-negative and sum to 1",
                self.situation_probs
            )));
        }
        if self.accumulation_steps == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch and accumulation must be >= 1".into()));
        }
        if self.stage1_iters == 0 || self.stage2_iters == 0 || self.stage3_iters == 0 {
            return Err(Error::InvalidConfig("stage iteration counts must be >= 1".into()));
        }
        Ok(())
    }
}

/// The three trigger-word training situations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Situation {
    S1,
    S2,
    S3,
}

impl Situation {
    pub fn tag(self) -> &'static str {
        match self {
            Situation::S1 => "S1",
            Situation::S2 => "S2",
            Situation::S3 => "S3",
        }
    }
}

/// Threshold rule: S1 below `p1`, S2 below `p1 + p2`, S3 otherwise.
pub fn situation_from_uniform(u: f64, probs: [f64; 3]) -> Situation {
    if u < probs[0] {
        Situation::S1
    } else if u < probs[0] + probs[1] {
        Situation::S2
    } else {
        Situation::S3
    }
}

pub fn sample_situation(rng: &mut RngStream, probs: [f64; 3]) -> Situation {
    situation_from_uniform(rng.uniform(), probs)
}

/// What the noise-prediction loss is regressed onto.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TargetKind {
    /// The true noise used to form `x_t`.
    TrueNoise,
    /// The frozen base model's prediction, no adapters.
    BasePrediction,
    /// The frozen base model's prediction with only the base adapter merged.
    BaseOnlyPrediction,
}

/// Caption, active adapter set, and target kind for one training sample.
#[derive(Clone, Debug, PartialEq)]
pub struct SituationPlan {
    pub caption: Vec<u32>,
    pub base_active: bool,
    pub id_active: bool,
    pub target: TargetKind,
}

/// S1: trigger caption, both adapters, reconstruct the true noise.
/// S2: plain caption, id adapter only, match the base model.
/// S3: plain caption, both adapters, match the base-adapter-only model.
pub fn situation_batch(sample: &FaceSample, sit: Situation, caption_len: usize) -> SituationPlan {
    match sit {
        Situation::S1 => SituationPlan {
            caption: synthdata::pad_caption(&synthdata::caption(&sample.scene, true), caption_len),
            base_active: true,
            id_active: true,
            target: TargetKind::TrueNoise,
        },
        Situation::S2 => SituationPlan {
            caption: synthdata::pad_caption(&synthdata::caption(&sample.scene, false), caption_len),
            base_active: false,
            id_active: true,
            target: TargetKind::BasePrediction,
        },
        Situation::S3 => SituationPlan {
            caption: synthdata::pad_caption(&synthdata::caption(&sample.scene, false), caption_len),
            base_active: true,
            id_active: true,
            target: TargetKind::BaseOnlyPrediction,
        },
    }
}

/// Everything trainable plus the frozen context, in one place.
#[derive(Clone, Debug)]
pub struct Nets {
    pub denoiser: DenoiserModel,
    pub schedule: NoiseSchedule,
    pub hyper_id: HyperNetwork,
    pub hyper_base: HyperNetwork,
    pub basis_id: LoraBasis,
    pub basis_base: LoraBasis,
    pub encoders: EncoderStack,
}

impl Nets {
    pub fn init(
        dcfg: &DenoiserConfig,
        hcfg: &HyperConfig,
        layout: &LoraLayout,
        ecfg: &EncoderConfig,
        id_encoder: IdEncoder,
        seed: u64,
    ) -> Result<Nets> {
        layout.validate()?;
        let root = RngStream::named(seed, "nets-init");
        Ok(Nets {
            denoiser: DenoiserModel::init(dcfg, &root.derive("denoiser"))?,
            schedule: denoiser::build_schedule(dcfg)?,
            hyper_id: HyperNetwork::init(AdapterKind::Id, hcfg, layout, &root.derive("hyper-id")),
            hyper_base: HyperNetwork::init(
                AdapterKind::Base,
                hcfg,
                layout,
                &root.derive("hyper-base"),
            ),
            basis_id: LoraBasis::init(AdapterKind::Id, layout, &root.derive("basis-id")),
            basis_base: LoraBasis::init(AdapterKind::Base, layout, &root.derive("basis-base")),
            encoders: EncoderStack::new(ecfg, id_encoder),
        })
    }

    pub fn layout(&self) -> &LoraLayout {
        &self.hyper_id.layout
    }

    fn components(&self) -> [&Params<f32>; 5] {
        [
            &self.denoiser.params,
            &self.hyper_id.params,
            &self.hyper_base.params,
            &self.basis_id.params,
            &self.basis_base.params,
        ]
    }

    fn components_mut(&mut self) -> [&mut Params<f32>; 5] {
        [
            &mut self.denoiser.params,
            &mut self.hyper_id.params,
            &mut self.hyper_base.params,
            &mut self.basis_id.params,
            &mut self.basis_base.params,
        ]
    }

    /// Apply an update to every parameter selected by `pred`.
    fn for_trainable(
        &mut self,
        pred: &dyn Fn(&str) -> bool,
        mut f: impl FnMut(&str, &mut Array<f32>),
    ) {
        for comp in self.components_mut() {
            for (name, value) in comp.iter_mut() {
                if pred(name) {
                    f(name, value);
                }
            }
        }
    }

    /// Hash of every parameter NOT selected by `pred`, plus both frozen
    /// encoders.
    pub fn hash_frozen(&self, pred: &dyn Fn(&str) -> bool) -> [u8; 32] {
        let mut hasher = Sha256::new();
        for comp in self.components() {
            hasher.update(comp.hash_subset(|n| !pred(n)));
        }
        hasher.update(self.encoders.id_encoder.hash());
        hasher.update(self.encoders.features.weight_hash());
        hasher.finalize().into()
    }

    /// Full snapshot: denoiser, both hypernetworks, both bases, id encoder,
    /// coefficient-free. Keys follow the archive naming scheme.
    pub fn to_archive(&self) -> Archive {
        let mut out = Archive::new();
        out.extend(archive::params_to_tensors(&self.denoiser.params));
        out.extend(archive::params_to_tensors(&self.hyper_id.params));
        out.extend(archive::params_to_tensors(&self.hyper_base.params));
        out.extend(self.basis_id.to_tensors());
        out.extend(self.basis_base.to_tensors());
        out.extend(self.encoders.id_encoder.to_tensors());
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        archive::save_archive(path, &self.to_archive())
    }

    pub fn load(
        path: impl AsRef<Path>,
        dcfg: &DenoiserConfig,
        hcfg: &HyperConfig,
        layout: &LoraLayout,
        ecfg: &EncoderConfig,
    ) -> Result<Nets> {
        let tensors = archive::load_archive(path)?;
        let denoiser_params = archive::tensors_to_params(&tensors, |k| k.starts_with("denoiser."))?;
        let hyper_id_params = archive::tensors_to_params(&tensors, |k| k.starts_with("hypernet.id."))?;
        let hyper_base_params =
            archive::tensors_to_params(&tensors, |k| k.starts_with("hypernet.base."))?;
        Ok(Nets {
            denoiser: DenoiserModel {
                cfg: dcfg.clone(),
                params: denoiser_params,
            },
            schedule: denoiser::build_schedule(dcfg)?,
            hyper_id: HyperNetwork {
                kind: AdapterKind::Id,
                cfg: hcfg.clone(),
                layout: layout.clone(),
                params: hyper_id_params,
            },
            hyper_base: HyperNetwork {
                kind: AdapterKind::Base,
                cfg: hcfg.clone(),
                layout: layout.clone(),
                params: hyper_base_params,
            },
            basis_id: LoraBasis::from_tensors(AdapterKind::Id, layout, &tensors)?,
            basis_base: LoraBasis::from_tensors(AdapterKind::Base, layout, &tensors)?,
            encoders: EncoderStack::new(ecfg, IdEncoder::from_tensors(ecfg, &tensors)?),
        })
    }

    /// Base-adapter coefficients for a sample, computed without gradients.
    pub fn base_coeffs_detached(&self, sample: &FaceSample) -> Result<LoraCoefficients> {
        let crop = self.encoders.crop(&sample.image, sample.bbox)?;
        let blurred = self.encoders.blur(&crop)?;
        let clip = self.encoders.features.tokens(&blurred)?;
        let mut g: Graph<f32> = Graph::new();
        let binding = Binding::bind(&mut g, &self.hyper_base.params, |_| false);
        let bound = bind_hyper(&mut g, AdapterKind::Base, &self.hyper_base.cfg, &binding)?;
        let clip_node = g.constant(clip);
        let c = hyper_forward(
            &mut g,
            &self.hyper_base.cfg,
            self.layout(),
            &bound,
            clip_node,
            None,
        )?;
        Ok(LoraCoefficients {
            kind: AdapterKind::Base,
            values: g.value(c).clone(),
        })
    }
}

/// The regression target for one situation. S2/S3 targets come from frozen
/// forward passes and carry no gradient.
pub fn situation_target(
    nets: &Nets,
    sit: Situation,
    xt: &Array<f32>,
    t: usize,
    caption: &[u32],
    base_delta: Option<&LoraDelta>,
    eps: &Array<f32>,
) -> Result<Array<f32>> {
    match sit {
        Situation::S1 => Ok(eps.clone()),
        Situation::S2 => predict_eps(&nets.denoiser, xt, t, caption, None),
        Situation::S3 => {
            let d = base_delta.ok_or_else(|| {
                Error::InvalidConfig("S3 target needs the detached base delta".into())
            })?;
            predict_eps(&nets.denoiser, xt, t, caption, Some(std::slice::from_ref(d)))
        }
    }
}

/// Adam with decoupled weight decay over named parameters.
pub struct AdamW {
    pub learning_rate: f64,
    pub weight_decay: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    moments: std::collections::BTreeMap<String, (Array<f32>, Array<f32>)>,
}

impl AdamW {
    pub fn new(learning_rate: f64, weight_decay: f64) -> Self {
        AdamW {
            learning_rate,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: std::collections::BTreeMap::new(),
        }
    }

    /// One update from a (mean) gradient map. Parameters without gradients
    /// are left untouched.
    pub fn step(&mut self, nets: &mut Nets, pred: &dyn Fn(&str) -> bool, grads: &GradMap<f32>) {
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        let (b1, b2, eps, lr, wd) = (
            self.beta1,
            self.beta2,
            self.eps,
            self.learning_rate,
            self.weight_decay,
        );
        let moments = &mut self.moments;
        nets.for_trainable(pred, |name, value| {
            let Some(grad) = grads.get(name) else { return };
            let (m, v) = moments
                .entry(name.to_string())
                .or_insert_with(|| {
                    (
                        Array::zeros(value.shape().to_vec()),
                        Array::zeros(value.shape().to_vec()),
                    )
                });
            for i in 0..value.len() {
                let gi = grad.data()[i] as f64;
                let mi = b1 * m.data()[i] as f64 + (1.0 - b1) * gi;
                let vi = b2 * v.data()[i] as f64 + (1.0 - b2) * gi * gi;
                m.data_mut()[i] = mi as f32;
                v.data_mut()[i] = vi as f32;
                let update = (mi / bc1) / ((vi / bc2).sqrt() + eps);
                let pv = value.data()[i] as f64;
                value.data_mut()[i] = (pv - lr * (update + wd * pv)) as f32;
            }
        });
    }
}

/// Gradient accumulation: parameters move only every `k` micro-batches,
/// using the mean gradient across them.
pub struct GradAccumulator {
    k: usize,
    count: usize,
    sum: GradMap<f32>,
}

impl GradAccumulator {
    pub fn new(k: usize) -> Self {
        GradAccumulator {
            k,
            count: 0,
            sum: GradMap::new(),
        }
    }

    /// Feed one micro-batch gradient; yields the mean every `k` pushes.
    pub fn push(&mut self, grads: &GradMap<f32>) -> Option<GradMap<f32>> {
        grad_map_add(&mut self.sum, grads);
        self.count += 1;
        if self.count == self.k {
            let mut mean = std::mem::take(&mut self.sum);
            grad_map_scale(&mut mean, 1.0 / self.k as f32);
            self.count = 0;
            Some(mean)
        } else {
            None
        }
    }

    pub fn pending(&self) -> usize {
        self.count
    }
}

/// One training-step log line, written as JSON per micro-iteration.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: u64,
    pub stage: String,
    pub situation: String,
    pub loss: f64,
    pub lr: f64,
}

/// Line-delimited JSON training log.
pub struct TrainLog {
    file: Option<std::fs::File>,
    pub entries: Vec<LogEntry>,
}

impl TrainLog {
    pub fn to_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)
                    .map_err(|e| Error::io(parent.display().to_string(), e))?;
            }
        }
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(TrainLog {
            file: Some(file),
            entries: Vec::new(),
        })
    }

    pub fn in_memory() -> Self {
        TrainLog {
            file: None,
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, entry: LogEntry) -> Result<()> {
        if let Some(f) = &mut self.file {
            let line = serde_json::to_string(&entry)?;
            writeln!(f, "{line}").map_err(|e| Error::io("train log", e))?;
        }
        self.entries.push(entry);
        Ok(())
    }
}

/// Inputs for one micro-batch sample, precomputed outside the graph.
pub struct StepInputs {
    pub plan: SituationPlan,
    pub situation: Situation,
    pub t: usize,
    pub xt_tokens: Array<f32>,
    pub target_tokens: Array<f32>,
    pub clip_tokens: Array<f32>,
    pub id_embed: Array<f32>,
    pub blur_clip_tokens: Array<f32>,
}

/// Assemble the inputs for one sample draw: augmentation, noising, encoder
/// features, situation plan, and the (detached) regression target.
pub fn build_step_inputs(
    nets: &Nets,
    sample: &FaceSample,
    sit: Situation,
    rng: &mut RngStream,
) -> Result<StepInputs> {
    let dcfg = &nets.denoiser.cfg;
    let plan = situation_batch(sample, sit, dcfg.max_caption_len);

    let augmented = synthdata::augment_crop(&sample.image, sample.bbox, rng)?;
    let x0 = augmented.to_signed();
    let t = 1 + rng.below(dcfg.t_steps);
    let eps: Array<f32> = rng.normal_array(x0.shape().to_vec(), 1.0);
    let xt = q_sample(&nets.schedule, &x0, t, &eps)?;

    let crop = nets.encoders.crop(&sample.image, sample.bbox)?;
    let clip_tokens = nets.encoders.features.tokens(&crop)?;
    let m = nets.encoders.cfg.embed_dim;
    let id_embed = nets.encoders.id_encoder.embed(&crop)?.reshape(vec![1, m])?;
    let blurred = nets.encoders.blur(&crop)?;
    let blur_clip_tokens = nets.encoders.features.tokens(&blurred)?;

    let base_delta = if sit == Situation::S3 {
        let coeffs = nets.base_coeffs_detached(sample)?;
        Some(delta(&materialize(&nets.basis_base, &coeffs)?)?)
    } else {
        None
    };
    let target = situation_target(nets, sit, &xt, t, &plan.caption, base_delta.as_ref(), &eps)?;

    Ok(StepInputs {
        plan,
        situation: sit,
        t,
        xt_tokens: patchify(&xt, dcfg.patch_size)?,
        target_tokens: patchify(&target, dcfg.patch_size)?,
        clip_tokens,
        id_embed,
        blur_clip_tokens,
    })
}

/// All parameters of the adapter stack bound into one graph.
pub struct BoundNets<'a> {
    pub denoiser_binding: Binding,
    pub hyper_id_binding: Binding,
    pub hyper_base_binding: Binding,
    pub basis_id_binding: Binding,
    pub basis_base_binding: Binding,
    pub layout: &'a LoraLayout,
}

/// Parameter stores for one graph build; `f32` for training, `f64` for the
/// finite-difference check of the identical graph.
pub struct NetParams<T: Scalar> {
    pub denoiser: Params<T>,
    pub hyper_id: Params<T>,
    pub hyper_base: Params<T>,
    pub basis_id: Params<T>,
    pub basis_base: Params<T>,
}

impl Nets {
    pub fn cast_params<T: Scalar>(&self) -> NetParams<T> {
        NetParams {
            denoiser: self.denoiser.params.cast(),
            hyper_id: self.hyper_id.params.cast(),
            hyper_base: self.hyper_base.params.cast(),
            basis_id: self.basis_id.params.cast(),
            basis_base: self.basis_base.params.cast(),
        }
    }
}

pub fn bind_nets<'a, T: Scalar>(
    g: &mut Graph<T>,
    params: &NetParams<T>,
    layout: &'a LoraLayout,
    trainable: &dyn Fn(&str) -> bool,
) -> BoundNets<'a> {
    BoundNets {
        denoiser_binding: Binding::bind(g, &params.denoiser, |n| trainable(n)),
        hyper_id_binding: Binding::bind(g, &params.hyper_id, |n| trainable(n)),
        hyper_base_binding: Binding::bind(g, &params.hyper_base, |n| trainable(n)),
        basis_id_binding: Binding::bind(g, &params.basis_id, |n| trainable(n)),
        basis_base_binding: Binding::bind(g, &params.basis_base, |n| trainable(n)),
        layout,
    }
}

impl<'a> BoundNets<'a> {
    pub fn collect_grads<T: Scalar>(&self, g: &Graph<T>, grads: &mut crate::numerics::Grads<T>) -> GradMap<T> {
        let mut out = GradMap::new();
        for b in [
            &self.denoiser_binding,
            &self.hyper_id_binding,
            &self.hyper_base_binding,
            &self.basis_id_binding,
            &self.basis_base_binding,
        ] {
            for (name, grad) in b.collect_grads(g, grads) {
                out.insert(name, grad);
            }
        }
        out
    }
}

/// Build the full loss graph for one sample: hypernetworks, adapter
/// materialization, injected denoiser forward, and the DDPM loss against
/// the situation target.
pub fn situation_loss_graph<T: Scalar>(
    g: &mut Graph<T>,
    dcfg: &DenoiserConfig,
    hcfg: &HyperConfig,
    bound: &BoundNets<'_>,
    inputs: &StepInputs,
) -> Result<crate::numerics::Node> {
    let mut adapters: Vec<BoundAdapter> = Vec::new();
    if inputs.plan.base_active {
        let bound_base = bind_hyper(g, AdapterKind::Base, hcfg, &bound.hyper_base_binding)?;
        let clip = g.constant(inputs.blur_clip_tokens.cast());
        let coeffs = hyper_forward(g, hcfg, bound.layout, &bound_base, clip, None)?;
        adapters.push(bind_lowrank_adapter(
            g,
            bound.layout,
            AdapterKind::Base,
            &bound.basis_base_binding,
            coeffs,
        )?);
    }
    if inputs.plan.id_active {
        let bound_id = bind_hyper(g, AdapterKind::Id, hcfg, &bound.hyper_id_binding)?;
        let clip = g.constant(inputs.clip_tokens.cast());
        let embed = g.constant(inputs.id_embed.cast());
        let coeffs = hyper_forward(g, hcfg, bound.layout, &bound_id, clip, Some(embed))?;
        adapters.push(bind_lowrank_adapter(
            g,
            bound.layout,
            AdapterKind::Id,
            &bound.basis_id_binding,
            coeffs,
        )?);
    }

    let bound_denoiser = bind_denoiser(g, dcfg, &Params::new(), &bound.denoiser_binding)?;
    let xt = g.constant(inputs.xt_tokens.cast());
    let adapter_refs: Vec<&BoundAdapter> = adapters.iter().collect();
    let pred = forward_eps(
        g,
        dcfg,
        &bound_denoiser,
        xt,
        inputs.t,
        &inputs.plan.caption,
        &adapter_refs,
    )?;
    let target = g.constant(inputs.target_tokens.cast());
    g.mse(pred, target)
}

/// Loss and gradient for one sample in `f32`.
pub fn sample_loss_grads(
    nets: &Nets,
    inputs: &StepInputs,
    trainable: &dyn Fn(&str) -> bool,
) -> Result<(f64, GradMap<f32>)> {
    let params = NetParams {
        denoiser: nets.denoiser.params.clone(),
        hyper_id: nets.hyper_id.params.clone(),
        hyper_base: nets.hyper_base.params.clone(),
        basis_id: nets.basis_id.params.clone(),
        basis_base: nets.basis_base.params.clone(),
    };
    let mut g: Graph<f32> = Graph::new();
    let bound = bind_nets(&mut g, &params, nets.layout(), trainable);
    let loss = situation_loss_graph(&mut g, &nets.denoiser.cfg, &nets.hyper_id.cfg, &bound, inputs)?;
    let loss_value = g.scalar_value(loss) as f64;
    let mut grads = g.backward(loss);
    Ok((loss_value, bound.collect_grads(&g, &mut grads)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageId {
    Stage1,
    Stage2,
    Stage3,
}

impl StageId {
    pub fn tag(self) -> &'static str {
        match self {
            StageId::Stage1 => "stage1",
            StageId::Stage2 => "stage2",
            StageId::Stage3 => "stage3",
        }
    }

    fn iters(self, cfg: &TrainConfig) -> usize {
        match self {
            StageId::Stage1 => cfg.stage1_iters,
            StageId::Stage2 => cfg.stage2_iters,
            StageId::Stage3 => cfg.stage3_iters,
        }
    }
}

/// Trainable-parameter predicate for a stage. `clip_frozen` is the stage-2
/// rule that stops training the structural-token attention blocks.
pub fn stage_trainable(stage: StageId, clip_frozen: bool) -> impl Fn(&str) -> bool {
    move |name: &str| match stage {
        StageId::Stage1 => name.starts_with("hypernet.base.") || name.starts_with("basis.base."),
        StageId::Stage2 => {
            let base = name.starts_with("hypernet.base.")
                || name.starts_with("basis.base.")
                || name.starts_with("hypernet.id.")
                || name.starts_with("basis.id.");
            if clip_frozen && name.starts_with("hypernet.id.") && name.contains(".attn1.") {
                return false;
            }
            base
        }
        StageId::Stage3 => name.starts_with("hypernet.id.") && name.contains(".attn2."),
    }
}

/// Outcome of one stage run.
#[derive(Debug)]
pub struct StageOutcome {
    pub mean_first_losses: f64,
    pub mean_last_losses: f64,
    pub situation_counts: [usize; 3],
    pub checkpoints: Vec<PathBuf>,
    /// Optimizer step at which the stage-2 rule froze the structural
    /// attention, if it fired.
    pub clip_frozen_at: Option<usize>,
}

struct StageDriver<'a> {
    nets: &'a mut Nets,
    dataset: &'a Dataset,
    cfg: &'a TrainConfig,
    stage: StageId,
    checkpoint_dir: Option<&'a Path>,
}

impl<'a> StageDriver<'a> {
    fn run(self, log: &mut TrainLog) -> Result<StageOutcome> {
        self.cfg.validate()?;
        if self.dataset.is_empty() {
            return Err(Error::InvalidConfig("empty dataset".into()));
        }
        let stage = self.stage;
        let frozen_hash_before = {
            let pred = stage_trainable(stage, false);
            self.nets.hash_frozen(&pred)
        };

        let iters = stage.iters(self.cfg);
        let k = self.cfg.accumulation_steps;
        let b = self.cfg.batch_size;
        let root = RngStream::named(self.cfg.seed, stage.tag());
        let mut optimizer = AdamW::new(self.cfg.learning_rate, self.cfg.weight_decay);
        let mut situation_counts = [0usize; 3];
        let mut checkpoints = Vec::new();
        let mut clip_frozen_at: Option<usize> = None;
        let mut s1_losses: Vec<f64> = Vec::new();
        let mut first_losses = Vec::new();
        let mut last_losses = Vec::new();
        let mut micro_step: u64 = 0;

        for step in 0..iters {
            let clip_frozen = clip_frozen_at.is_some();
            let trainable = stage_trainable(stage, clip_frozen);
            let mut accumulator = GradAccumulator::new(k);
            let step_rng = root.derive_u64(step as u64);

            for micro in 0..k {
                let micro_rng = step_rng.derive_u64(micro as u64);
                // Per-sample inputs are precomputed serially (cheap), the
                // loss/backward passes run in parallel deterministically.
                let mut batch = Vec::with_capacity(b);
                for slot in 0..b {
                    let mut rng = micro_rng.derive_u64(slot as u64);
                    let sit = match stage {
                        StageId::Stage1 => Situation::S1,
                        _ => sample_situation(&mut rng, self.cfg.situation_probs),
                    };
                    let idx = rng.below(self.dataset.len());
                    let inputs =
                        build_step_inputs(self.nets, &self.dataset.samples[idx], sit, &mut rng)?;
                    situation_counts[match sit {
                        Situation::S1 => 0,
                        Situation::S2 => 1,
                        Situation::S3 => 2,
                    }] += 1;
                    batch.push(inputs);
                }
                let nets_ref: &Nets = self.nets;
                let results: Vec<Result<(f64, GradMap<f32>)>> = batch
                    .par_iter()
                    .map(|inputs| sample_loss_grads(nets_ref, inputs, &trainable))
                    .collect();

                let mut micro_grads = GradMap::new();
                let mut micro_loss = 0.0;
                for (inputs, r) in batch.iter().zip(results) {
                    let (loss, grads) = r?;
                    if !loss.is_finite() {
                        return Err(Error::Diverged {
                            step: micro_step,
                            loss,
                        });
                    }
                    grad_map_add(&mut micro_grads, &grads);
                    micro_loss += loss;
                    if inputs.situation == Situation::S1 {
                        s1_losses.push(loss);
                    }
                }
                grad_map_scale(&mut micro_grads, 1.0 / b as f32);
                micro_loss /= b as f64;

                if step == 0 {
                    first_losses.push(micro_loss);
                }
                if step + 1 == iters {
                    last_losses.push(micro_loss);
                }
                log.push(LogEntry {
                    step: micro_step,
                    stage: stage.tag().to_string(),
                    situation: batch
                        .first()
                        .map(|i| i.situation.tag().to_string())
                        .unwrap_or_default(),
                    loss: micro_loss,
                    lr: self.cfg.learning_rate,
                })?;
                micro_step += 1;

                if let Some(mean) = accumulator.push(&micro_grads) {
                    optimizer.step(self.nets, &trainable, &mean);
                }
            }

            // Stage-2 rule: freeze structural-token attention once the
            // moving-average reconstruction loss stops improving.
            if stage == StageId::Stage2
                && clip_frozen_at.is_none()
                && step > 0
                && step % self.cfg.clip_freeze_interval == 0
            {
                let w = self.cfg.clip_freeze_window;
                if s1_losses.len() >= w + self.cfg.clip_freeze_interval {
                    let recent: f64 =
                        s1_losses[s1_losses.len() - w..].iter().sum::<f64>() / w as f64;
                    let past_end = s1_losses.len() - self.cfg.clip_freeze_interval;
                    if past_end >= w {
                        let past: f64 =
                            s1_losses[past_end - w..past_end].iter().sum::<f64>() / w as f64;
                        if past.is_finite() && (past - recent) / past.max(1e-12) < self.cfg.clip_freeze_threshold
                        {
                            clip_frozen_at = Some(step);
                        }
                    }
                }
            }

            if (step + 1) % self.cfg.checkpoint_every == 0 && step + 1 != iters {
                if let Some(dir) = self.checkpoint_dir {
                    let path = dir.join(format!("{}_step{:06}.hlra", stage.tag(), step + 1));
                    self.nets.save(&path)?;
                    checkpoints.push(path);
                }
            }
        }

        let frozen_hash_after = {
            let pred = stage_trainable(stage, false);
            self.nets.hash_frozen(&pred)
        };
        if frozen_hash_before != frozen_hash_after {
            return Err(Error::InvalidConfig(format!(
                "{} mutated frozen parameters",
                stage.tag()
            )));
        }

        if let Some(dir) = self.checkpoint_dir {
            let path = dir.join(format!("{}_final.hlra", stage.tag()));
            self.nets.save(&path)?;
            checkpoints.push(path);
        }

        let mean = |v: &[f64]| {
            if v.is_empty() {
                f64::NAN
            } else {
                v.iter().sum::<f64>() / v.len() as f64
            }
        };
        Ok(StageOutcome {
            mean_first_losses: mean(&first_losses),
            mean_last_losses: mean(&last_losses),
            situation_counts,
            checkpoints,
            clip_frozen_at,
        })
    }
}

/// Stage 1: base-branch warm-up on trigger-word reconstruction.
pub fn run_stage1(
    nets: &mut Nets,
    dataset: &Dataset,
    cfg: &TrainConfig,
    checkpoint_dir: Option<&Path>,
    log: &mut TrainLog,
) -> Result<StageOutcome> {
    StageDriver {
        nets,
        dataset,
        cfg,
        stage: StageId::Stage1,
        checkpoint_dir,
    }
    .run(log)
}

/// Stage 2: identity branch joins, situations sampled per the configured
/// probabilities; the base branch keeps training.
pub fn run_stage2(
    nets: &mut Nets,
    dataset: &Dataset,
    cfg: &TrainConfig,
    checkpoint_dir: Option<&Path>,
    log: &mut TrainLog,
) -> Result<StageOutcome> {
    StageDriver {
        nets,
        dataset,
        cfg,
        stage: StageId::Stage2,
        checkpoint_dir,
    }
    .run(log)
}

/// Stage 3: only the identity-embedding attention blocks stay trainable.
pub fn run_stage3(
    nets: &mut Nets,
    dataset: &Dataset,
    cfg: &TrainConfig,
    checkpoint_dir: Option<&Path>,
    log: &mut TrainLog,
) -> Result<StageOutcome> {
    StageDriver {
        nets,
        dataset,
        cfg,
        stage: StageId::Stage3,
        checkpoint_dir,
    }
    .run(log)
}

/// Pretrain the frozen "foundation" denoiser with the DDPM objective on the
/// dataset's stored captions.
pub fn train_base_model(
    nets: &mut Nets,
    dataset: &Dataset,
    cfg: &TrainConfig,
    checkpoint_dir: Option<&Path>,
    log: &mut TrainLog,
) -> Result<StageOutcome> {
    if dataset.is_empty() {
        return Err(Error::InvalidConfig("empty dataset".into()));
    }
    let root = RngStream::named(cfg.seed, "base-train");
    let mut optimizer = AdamW::new(cfg.base_learning_rate, cfg.weight_decay);
    let trainable = |name: &str| name.starts_with("denoiser.");
    let mut first_losses = Vec::new();
    let mut last_losses = Vec::new();
    let mut checkpoints = Vec::new();

    let dcfg = nets.denoiser.cfg.clone();
    for step in 0..cfg.base_iters {
        let step_rng = root.derive_u64(step as u64);
        let mut batch = Vec::with_capacity(cfg.base_batch_size);
        for slot in 0..cfg.base_batch_size {
            let mut rng = step_rng.derive_u64(slot as u64);
            let idx = rng.below(dataset.len());
            let sample = &dataset.samples[idx];
            let augmented = synthdata::augment_crop(&sample.image, sample.bbox, &mut rng)?;
            let x0 = augmented.to_signed();
            let t = 1 + rng.below(dcfg.t_steps);
            let eps: Array<f32> = rng.normal_array(x0.shape().to_vec(), 1.0);
            let xt = q_sample(&nets.schedule, &x0, t, &eps)?;
            batch.push((
                patchify(&xt, dcfg.patch_size)?,
                t,
                sample.caption.clone(),
                patchify(&eps, dcfg.patch_size)?,
            ));
        }

        let denoiser = &nets.denoiser;
        let results: Vec<Result<(f64, GradMap<f32>)>> = batch
            .par_iter()
            .map(|(xt_tokens, t, caption, eps_tokens)| {
                let mut g: Graph<f32> = Graph::new();
                let binding = Binding::bind(&mut g, &denoiser.params, |n| trainable(n));
                let bound = bind_denoiser(&mut g, &dcfg, &denoiser.params, &binding)?;
                let xt = g.constant(xt_tokens.clone());
                let pred = forward_eps(&mut g, &dcfg, &bound, xt, *t, caption, &[])?;
                let target = g.constant(eps_tokens.clone());
                let loss = g.mse(pred, target)?;
                let v = g.scalar_value(loss) as f64;
                let mut grads = g.backward(loss);
                Ok((v, binding.collect_grads(&g, &mut grads)))
            })
            .collect();

        let mut grads = GradMap::new();
        let mut loss_sum = 0.0;
        for r in results {
            let (loss, g) = r?;
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    step: step as u64,
                    loss,
                });
            }
            loss_sum += loss;
            grad_map_add(&mut grads, &g);
        }
        grad_map_scale(&mut grads, 1.0 / cfg.base_batch_size as f32);
        let loss = loss_sum / cfg.base_batch_size as f64;
        if step == 0 {
            first_losses.push(loss);
        }
        if step + 1 == cfg.base_iters {
            last_losses.push(loss);
        }
        log.push(LogEntry {
            step: step as u64,
            stage: "base".to_string(),
            situation: Situation::S1.tag().to_string(),
            loss,
            lr: cfg.base_learning_rate,
        })?;

        optimizer.step(nets, &trainable, &grads);

        if (step + 1) % cfg.checkpoint_every == 0 && step + 1 != cfg.base_iters {
            if let Some(dir) = checkpoint_dir {
                let path = dir.join(format!("base_step{:06}.hlra", step + 1));
                nets.save(&path)?;
                checkpoints.push(path);
            }
        }
    }
    if let Some(dir) = checkpoint_dir {
        let path = dir.join("base_final.hlra");
        nets.save(&path)?;
        checkpoints.push(path);
    }

    let mean = |v: &[f64]| {
        if v.is_empty() {
            f64::NAN
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    Ok(StageOutcome {
        mean_first_losses: mean(&first_losses),
        mean_last_losses: mean(&last_losses),
        situation_counts: [cfg.base_iters, 0, 0],
        checkpoints,
        clip_frozen_at: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lora::SLOTS_PER_SITE;

    fn tiny_setup(seed: u64) -> (Nets, Dataset, TrainConfig) {
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
        let mut nets = Nets::init(&dcfg, &hcfg, &layout, &ecfg, idenc, seed).unwrap();
        // Stand-in for a pretrained base model: the zero output head of a
        // fresh denoiser blocks every upstream gradient.
        let mut rng = RngStream::named(seed, "head-fill");
        let shape = nets.denoiser.params.get("denoiser.head.w").unwrap().shape().to_vec();
        *nets.denoiser.params.get_mut("denoiser.head.w").unwrap() =
            rng.normal_array(shape, 0.05);
        let dataset = Dataset::generate(6, 2, seed).unwrap();
        let cfg = TrainConfig {
            stage1_iters: 2,
            stage2_iters: 2,
            stage3_iters: 2,
            accumulation_steps: 2,
            batch_size: 1,
            base_iters: 2,
            base_batch_size: 2,
            checkpoint_every: 1000,
            seed,
            ..TrainConfig::default()
        };
        (nets, dataset, cfg)
    }

    #[test]
    fn situation_thresholds() {
        let probs = [0.9, 0.05, 0.05];
        assert_eq!(situation_from_uniform(0.5, probs), Situation::S1);
        assert_eq!(situation_from_uniform(0.92, probs), Situation::S2);
        assert_eq!(situation_from_uniform(0.97, probs), Situation::S3);
    }

    #[test]
    fn situation_frequencies_match_probs() {
        let probs = [0.9, 0.05, 0.05];
        let mut rng = RngStream::named(1, "sits");
        let mut counts = [0usize; 3];
        let n = 100_000;
        for _ in 0..n {
            let s = sample_situation(&mut rng, probs);
            counts[match s {
                Situation::S1 => 0,
                Situation::S2 => 1,
                Situation::S3 => 2,
            }] += 1;
        }
        for (c, p) in counts.iter().zip(probs) {
            assert!((*c as f64 / n as f64 - p).abs() < 0.01);
        }
    }

    #[test]
    fn situation_batch_contracts() {
        let (_, dataset, _) = tiny_setup(2);
        let s = &dataset.samples[0];
        let len = synthdata::MAX_CAPTION_LEN;

        let p1 = situation_batch(s, Situation::S1, len);
        assert_eq!(&p1.caption[..3], &synthdata::TRIGGER_TOKENS);
        assert!(p1.base_active && p1.id_active);
        assert_eq!(p1.target, TargetKind::TrueNoise);

        let p2 = situation_batch(s, Situation::S2, len);
        assert!(!p2.base_active && p2.id_active);
        assert!(p2.caption.iter().all(|t| !synthdata::TRIGGER_TOKENS.contains(t)));
        assert_eq!(p2.target, TargetKind::BasePrediction);

        let p3 = situation_batch(s, Situation::S3, len);
        assert!(p3.base_active && p3.id_active);
        assert_eq!(p3.target, TargetKind::BaseOnlyPrediction);
    }

    #[test]
    fn s1_target_is_the_sampled_noise() {
        let (nets, dataset, _) = tiny_setup(3);
        let s = &dataset.samples[0];
        let mut rng = RngStream::named(4, "t");
        let eps: Array<f32> = rng.normal_array(vec![32, 32, 3], 1.0);
        let xt: Array<f32> = rng.normal_array(vec![32, 32, 3], 1.0);
        let target =
            situation_target(&nets, Situation::S1, &xt, 1, &s.caption, None, &eps).unwrap();
        assert_eq!(target, eps);
    }

    #[test]
    fn s2_and_s3_losses_are_exactly_zero_with_zero_id_coefficients() {
        let (mut nets, dataset, _) = tiny_setup(5);
        // Zero the id coefficient head so the id adapter materializes to zero.
        let p = HyperNetwork::prefix(AdapterKind::Id);
        let head = format!("{p}.head.w");
        let shape = nets.hyper_id.params.get(&head).unwrap().shape().to_vec();
        *nets.hyper_id.params.get_mut(&head).unwrap() = Array::zeros(shape);
        let bias = format!("{p}.head.b");
        let shape = nets.hyper_id.params.get(&bias).unwrap().shape().to_vec();
        *nets.hyper_id.params.get_mut(&bias).unwrap() = Array::zeros(shape);

        for sit in [Situation::S2, Situation::S3] {
            let mut rng = RngStream::named(6, "zero-loss");
            let inputs = build_step_inputs(&nets, &dataset.samples[0], sit, &mut rng).unwrap();
            let (loss, _) = sample_loss_grads(&nets, &inputs, &|_| false).unwrap();
            assert_eq!(loss, 0.0, "{sit:?}");
        }
    }

    #[test]
    fn accumulator_k1_is_plain_stepping() {
        let mut acc = GradAccumulator::new(1);
        let mut g = GradMap::new();
        g.insert("w".into(), Array::filled(vec![2], 3.0f32));
        let out = acc.push(&g).expect("k=1 yields immediately");
        assert_eq!(out.get("w").unwrap().data(), &[3.0, 3.0]);
    }

    #[test]
    fn accumulator_holds_until_k() {
        let mut acc = GradAccumulator::new(3);
        let mut g = GradMap::new();
        g.insert("w".into(), Array::filled(vec![1], 1.0f32));
        assert!(acc.push(&g).is_none());
        assert!(acc.push(&g).is_none());
        assert_eq!(acc.pending(), 2);
        let out = acc.push(&g).unwrap();
        assert_eq!(out.get("w").unwrap().data(), &[1.0]);
        assert_eq!(acc.pending(), 0);
    }

    #[test]
    fn accumulation_matches_full_batch_on_linear_least_squares() {
        // Closed form: grad of mean (x_i . w - y_i)^2 over the batch equals
        // (2/n) X^T (X w - y); accumulating 4 single-sample gradients must
        // match both the closed form and the batch-of-4 gradient.
        let mut rng = RngStream::named(7, "lls");
        let x: Array<f64> = rng.normal_array(vec![4, 3], 1.0);
        let y: Array<f64> = rng.normal_array(vec![4, 1], 1.0);
        let w: Array<f64> = rng.normal_array(vec![3, 1], 1.0);

        let grad_for = |rows: std::ops::Range<usize>| -> Array<f64> {
            let n = rows.len();
            let xs = x.slice_rows(rows.start, rows.end).unwrap();
            let ys = y.slice_rows(rows.start, rows.end).unwrap();
            let mut g: Graph<f64> = Graph::new();
            let wn = g.param(w.clone());
            let xn = g.constant(xs);
            let yn = g.constant(ys);
            let pred = g.matmul(xn, wn).unwrap();
            let loss = g.mse(pred, yn).unwrap();
            let _ = n;
            let grads = g.backward(loss);
            grads.get(wn).unwrap().clone()
        };

        // Accumulated mean of per-sample grads.
        let mut acc_sum = Array::zeros(vec![3, 1]);
        for i in 0..4 {
            acc_sum.axpy(0.25, &grad_for(i..i + 1)).unwrap();
        }
        let batch = grad_for(0..4);
        // Closed form.
        let resid = x.matmul(&w).unwrap().sub(&y).unwrap();
        let closed = x.transpose().unwrap().matmul(&resid).unwrap().scale(2.0 / 4.0);

        for i in 0..3 {
            assert!((acc_sum.data()[i] - closed.data()[i]).abs() < 1e-10);
            assert!((batch.data()[i] - closed.data()[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn gradients_reach_the_zero_initialized_attention() {
        let (mut nets, dataset, cfg) = tiny_setup(8);
        let p = HyperNetwork::prefix(AdapterKind::Id);
        let wo_name = format!("{p}.layer0.attn2.wo");
        assert!(nets
            .hyper_id
            .params
            .get(&wo_name)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));

        // Two optimizer steps on S1 batches with everything id-side
        // trainable: the first step can only move the zero up-basis (the
        // coefficient gradient passes through it), the second reaches the
        // zero-initialized attention output.
        let trainable = stage_trainable(StageId::Stage2, false);
        let mut opt = AdamW::new(cfg.learning_rate, cfg.weight_decay);
        for round in 0..2 {
            let mut rng = RngStream::named(9 + round, "flow");
            let inputs =
                build_step_inputs(&nets, &dataset.samples[0], Situation::S1, &mut rng).unwrap();
            let (_, grads) = sample_loss_grads(&nets, &inputs, &trainable).unwrap();
            opt.step(&mut nets, &trainable, &grads);
        }
        assert!(nets
            .hyper_id
            .params
            .get(&wo_name)
            .unwrap()
            .data()
            .iter()
            .any(|&v| v != 0.0));
    }

    #[test]
    fn stage1_trains_base_only_and_freezes_id() {
        let (mut nets, dataset, cfg) = tiny_setup(10);
        let id_hash_before = nets.hyper_id.hash();
        let base_hash_before = nets.hyper_base.hash();
        let denoiser_hash_before = nets.denoiser.params.hash_all();

        let mut log = TrainLog::in_memory();
        let outcome = run_stage1(&mut nets, &dataset, &cfg, None, &mut log).unwrap();
        assert_eq!(nets.hyper_id.hash(), id_hash_before);
        assert_eq!(nets.denoiser.params.hash_all(), denoiser_hash_before);
        assert_ne!(nets.hyper_base.hash(), base_hash_before);
        assert_eq!(outcome.situation_counts[1] + outcome.situation_counts[2], 0);
        assert!(log.entries.iter().all(|e| e.stage == "stage1"));
    }

    #[test]
    fn stage3_trains_only_id_attn2() {
        let (mut nets, dataset, cfg) = tiny_setup(11);
        let mut log = TrainLog::in_memory();
        // Bring the nets into a plausible state first.
        run_stage1(&mut nets, &dataset, &cfg, None, &mut log).unwrap();
        run_stage2(&mut nets, &dataset, &cfg, None, &mut log).unwrap();

        let pred = stage_trainable(StageId::Stage3, false);
        let frozen_before = nets.hash_frozen(&pred);
        let attn2_before = nets
            .hyper_id
            .params
            .hash_subset(|n| n.contains(".attn2."));
        run_stage3(&mut nets, &dataset, &cfg, None, &mut log).unwrap();
        assert_eq!(nets.hash_frozen(&pred), frozen_before);
        assert_ne!(
            nets.hyper_id.params.hash_subset(|n| n.contains(".attn2.")),
            attn2_before
        );
    }

    #[test]
    fn training_is_deterministic() {
        let run = || {
            let (mut nets, dataset, cfg) = tiny_setup(12);
            let mut log = TrainLog::in_memory();
            train_base_model(&mut nets, &dataset, &cfg, None, &mut log).unwrap();
            run_stage1(&mut nets, &dataset, &cfg, None, &mut log).unwrap();
            run_stage2(&mut nets, &dataset, &cfg, None, &mut log).unwrap();
            let losses: Vec<f64> = log.entries.iter().map(|e| e.loss).collect();
            (
                crate::archive::to_bytes(&nets.to_archive()).unwrap(),
                losses,
            )
        };
        let (a_bytes, a_losses) = run();
        let (b_bytes, b_losses) = run();
        assert_eq!(a_losses, b_losses);
        assert_eq!(a_bytes, b_bytes);
    }

    #[test]
    fn base_training_reduces_loss_on_tiny_run() {
        let (mut nets, dataset, mut cfg) = tiny_setup(13);
        cfg.base_iters = 40;
        cfg.base_batch_size = 4;
        cfg.base_learning_rate = 2e-3;
        let mut log = TrainLog::in_memory();
        let outcome = train_base_model(&mut nets, &dataset, &cfg, None, &mut log).unwrap();
        assert!(log.entries.iter().all(|e| e.loss.is_finite()));
        assert!(
            outcome.mean_last_losses < outcome.mean_first_losses,
            "{} -> {}",
            outcome.mean_first_losses,
            outcome.mean_last_losses
        );
    }

    #[test]
    fn coefficient_grid_shape_is_layout_sized() {
        let (nets, dataset, _) = tiny_setup(14);
        let c = nets.base_coeffs_detached(&dataset.samples[0]).unwrap();
        let layout = nets.layout();
        assert_eq!(
            c.values.shape(),
            &[layout.n_sites() * SLOTS_PER_SITE, layout.k_basis]
        );
    }

}
