//! The toy "foundation model": a text-conditioned patch-transformer denoiser
//! over 32x32 RGB images trained with the DDPM objective, plus DDPM/CFG
//! ancestral sampling and the LoRA injection points.
//!
//! Adapters enter through exactly one door: optional per-projection deltas
//! applied as `(W + dW) x`, either merged into the weights beforehand or
//! evaluated as a low-rank side branch. The sampler itself never sees a
//! hypernetwork.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::img::Image;
use crate::lora::{AttentionKind, LoraDelta, Site};
use crate::numerics::{Array, Graph, Node, RngStream, Scalar};
use crate::params::{Binding, Params};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct DenoiserConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub d_model: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub max_caption_len: usize,
    /// Diffusion step count `T`.
    pub t_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Feed-forward hidden width as a multiple of `d_model`.
    pub ff_mult: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            image_size: 32,
            patch_size: 8,
            d_model: 64,
            n_blocks: 4,
            n_heads: 4,
            vocab_size: crate::synthdata::VOCAB_SIZE,
            max_caption_len: crate::synthdata::MAX_CAPTION_LEN,
            t_steps: 100,
            beta_start: 1e-4,
            beta_end: 0.02,
            ff_mult: 4,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size % self.patch_size != 0 {
            return Err(Error::InvalidConfig(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.t_steps < 2 {
            return Err(Error::InvalidConfig("t_steps must be at least 2".into()));
        }
        if !(0.0 < self.beta_start && self.beta_start <= self.beta_end && self.beta_end < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "beta range ({}, {}) invalid",
                self.beta_start, self.beta_end
            )));
        }
        Ok(())
    }

    pub fn n_patches(&self) -> usize {
        let per_side = self.image_size / self.patch_size;
        per_side * per_side
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    pub fn ff_hidden(&self) -> usize {
        self.ff_mult * self.d_model
    }
}

/// Linear-beta DDPM noise schedule.
#[derive(Clone, Debug)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

/// Linear betas from `beta_start` to `beta_end`; `alpha_bar_t = prod(1 - beta_s)`.
pub fn build_schedule(cfg: &DenoiserConfig) -> Result<NoiseSchedule> {
    cfg.validate()?;
    let t_steps = cfg.t_steps;
    let mut betas = Vec::with_capacity(t_steps);
    for i in 0..t_steps {
        let frac = i as f64 / (t_steps - 1) as f64;
        betas.push(cfg.beta_start + (cfg.beta_end - cfg.beta_start) * frac);
    }
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bars = Vec::with_capacity(t_steps);
    let mut acc = 1.0;
    for a in &alphas {
        acc *= a;
        alpha_bars.push(acc);
    }
    Ok(NoiseSchedule {
        betas,
        alphas,
        alpha_bars,
    })
}

impl NoiseSchedule {
    pub fn t_max(&self) -> usize {
        self.betas.len()
    }

    /// `alpha_bar` at 1-based step `t`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t - 1]
    }
}

/// `sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps`.
pub fn q_sample(
    schedule: &NoiseSchedule,
    x0: &Array<f32>,
    t: usize,
    eps: &Array<f32>,
) -> Result<Array<f32>> {
    if t < 1 || t > schedule.t_max() {
        return Err(Error::InvalidConfig(format!(
            "step {t} outside [1, {}]",
            schedule.t_max()
        )));
    }
    let ab = schedule.alpha_bar(t);
    let a = x0.scale(ab.sqrt() as f32);
    let b = eps.scale((1.0 - ab).sqrt() as f32);
    a.add(&b)
}

/// Mean squared error between a prediction and the true noise.
pub fn ddpm_loss(eps_pred: &Array<f32>, eps_true: &Array<f32>) -> Result<f32> {
    let d = eps_pred.sub(eps_true)?;
    Ok(d.mul_elem(&d)?.mean())
}

/// `eps_uncond + w * (eps_cond - eps_uncond)`.
///
/// The endpoints are returned exactly: `w = 0` is the unconditional
/// prediction and `w = 1` the conditional one, with no float round-trip.
pub fn cfg_combine(eps_uncond: &Array<f32>, eps_cond: &Array<f32>, w: f32) -> Result<Array<f32>> {
    if eps_uncond.shape() != eps_cond.shape() {
        return Err(Error::ShapeMismatch {
            op: "cfg_combine",
            left: eps_uncond.shape().to_vec(),
            right: eps_cond.shape().to_vec(),
        });
    }
    if w == 0.0 {
        return Ok(eps_uncond.clone());
    }
    if w == 1.0 {
        return Ok(eps_cond.clone());
    }
    let diff = eps_cond.sub(eps_uncond)?;
    eps_uncond.add(&diff.scale(w))
}

/// The denoiser's parameters plus its configuration. Parameter names form
/// exactly the `denoiser.*` archive key set.
#[derive(Clone, Debug)]
pub struct DenoiserModel {
    pub cfg: DenoiserConfig,
    pub params: Params<f32>,
}

impl DenoiserModel {
    pub fn init(cfg: &DenoiserConfig, rng: &RngStream) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let mut params = Params::new();
        let mut put = |name: String, value: Array<f32>| params.insert(name, value);
        let normal = |name: &str, shape: Vec<usize>, std: f64| -> Array<f32> {
            rng.derive(name).normal_array(shape, std)
        };

        let proj_std = 1.0 / (d as f64).sqrt();
        let resid_std = proj_std / (2.0 * cfg.n_blocks as f64).sqrt();

        put(
            "denoiser.patch_embed.w".into(),
            normal(
                "denoiser.patch_embed.w",
                vec![cfg.patch_dim(), d],
                1.0 / (cfg.patch_dim() as f64).sqrt(),
            ),
        );
        put("denoiser.patch_embed.b".into(), Array::zeros(vec![d]));
        put(
            "denoiser.tok_embed".into(),
            normal("denoiser.tok_embed", vec![cfg.vocab_size, d], proj_std),
        );

        for b in 0..cfg.n_blocks {
            for (ln, _) in [("ln1", 0), ("ln2", 1), ("ln3", 2)] {
                put(
                    format!("denoiser.block{b}.{ln}.g"),
                    Array::filled(vec![d], 1.0),
                );
                put(format!("denoiser.block{b}.{ln}.b"), Array::zeros(vec![d]));
            }
            for attn in ["self", "cross"] {
                for proj in ["wq", "wk", "wv"] {
                    let name = format!("denoiser.block{b}.{attn}.{proj}");
                    put(name.clone(), normal(&name, vec![d, d], proj_std));
                }
                let name = format!("denoiser.block{b}.{attn}.wo");
                put(name.clone(), normal(&name, vec![d, d], resid_std));
            }
            let w1 = format!("denoiser.block{b}.ff.w1");
            put(w1.clone(), normal(&w1, vec![d, cfg.ff_hidden()], proj_std));
            put(format!("denoiser.block{b}.ff.b1"), Array::zeros(vec![cfg.ff_hidden()]));
            let w2 = format!("denoiser.block{b}.ff.w2");
            put(
                w2.clone(),
                normal(&w2, vec![cfg.ff_hidden(), d], 1.0 / (cfg.ff_hidden() as f64).sqrt()
                    / (2.0 * cfg.n_blocks as f64).sqrt()),
            );
            put(format!("denoiser.block{b}.ff.b2"), Array::zeros(vec![d]));
        }

        put("denoiser.head.ln.g".into(), Array::filled(vec![d], 1.0));
        put("denoiser.head.ln.b".into(), Array::zeros(vec![d]));
        // Zero head: the untrained model predicts zero noise.
        put("denoiser.head.w".into(), Array::zeros(vec![d, cfg.patch_dim()]));
        put("denoiser.head.b".into(), Array::zeros(vec![cfg.patch_dim()]));

        Ok(DenoiserModel {
            cfg: cfg.clone(),
            params,
        })
    }

    /// The injection sites this model exposes, in layout order.
    pub fn sites(&self) -> Vec<Site> {
        let mut out = Vec::new();
        for b in 0..self.cfg.n_blocks {
            out.push(Site {
                block_index: b,
                attention_kind: AttentionKind::SelfAttn,
                d_model: self.cfg.d_model,
            });
            out.push(Site {
                block_index: b,
                attention_kind: AttentionKind::CrossAttn,
                d_model: self.cfg.d_model,
            });
        }
        out
    }
}

/// Split a signed `[h, w, 3]` image into row-major patch tokens
/// `[n_patches, patch*patch*3]`.
pub fn patchify(img: &Array<f32>, patch: usize) -> Result<Array<f32>> {
    if img.shape().len() != 3 || img.shape()[2] != 3 {
        return Err(Error::InvalidDimensions {
            op: "patchify",
            message: format!("expected [h, w, 3], got {:?}", img.shape()),
        });
    }
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let (ph, pw) = (h / patch, w / patch);
    let mut data = Vec::with_capacity(h * w * 3);
    for py in 0..ph {
        for px in 0..pw {
            for y in 0..patch {
                for x in 0..patch {
                    let iy = py * patch + y;
                    let ix = px * patch + x;
                    let off = (iy * w + ix) * 3;
                    data.extend_from_slice(&img.data()[off..off + 3]);
                }
            }
        }
    }
    Array::from_vec(vec![ph * pw, patch * patch * 3], data)
}

/// Inverse of [`patchify`].
pub fn unpatchify(tokens: &Array<f32>, image_size: usize, patch: usize) -> Result<Array<f32>> {
    let per_side = image_size / patch;
    if tokens.rows() != per_side * per_side || tokens.cols() != patch * patch * 3 {
        return Err(Error::InvalidDimensions {
            op: "unpatchify",
            message: format!("token shape {:?}", tokens.shape()),
        });
    }
    let mut img = Array::zeros(vec![image_size, image_size, 3]);
    for (p, row) in (0..tokens.rows()).map(|p| (p, tokens.row(p))) {
        let py = p / per_side;
        let px = p % per_side;
        for y in 0..patch {
            for x in 0..patch {
                let src = (y * patch + x) * 3;
                let iy = py * patch + y;
                let ix = px * patch + x;
                let dst = (iy * image_size + ix) * 3;
                img.data_mut()[dst..dst + 3].copy_from_slice(&row[src..src + 3]);
            }
        }
    }
    Ok(img)
}

fn sin_embedding<T: Scalar>(pos: f64, dim: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(dim);
    let half = dim / 2;
    for i in 0..half {
        let freq = 1.0 / 10000f64.powf(i as f64 / half as f64);
        out.push(T::of_f64((pos * freq).sin()));
        out.push(T::of_f64((pos * freq).cos()));
    }
    while out.len() < dim {
        out.push(T::zero());
    }
    out
}

fn pos_table<T: Scalar>(n: usize, dim: usize) -> Array<T> {
    let mut data = Vec::with_capacity(n * dim);
    for i in 0..n {
        data.extend(sin_embedding::<T>(i as f64, dim));
    }
    Array::from_vec(vec![n, dim], data).expect("shape matches by construction")
}

/// One injected adapter bound into a graph: per site, per projection, either
/// a low-rank `(down, up)` pair or a full `d x d` delta matrix.
pub enum SiteDelta {
    LowRank { down: Node, up: Node },
    Full(Node),
}

pub struct BoundAdapter {
    pub sites: Vec<Site>,
    /// Site-major, projections in `q, k, v, o` order.
    pub entries: Vec<SiteDelta>,
}

impl BoundAdapter {
    pub fn from_delta<T: Scalar>(g: &mut Graph<T>, d: &LoraDelta) -> Self {
        let entries = d
            .mats
            .iter()
            .map(|m| SiteDelta::Full(g.constant(m.cast())))
            .collect();
        BoundAdapter {
            sites: d.sites.clone(),
            entries,
        }
    }

    fn site_index(&self, block: usize, kind: AttentionKind) -> Option<usize> {
        self.sites
            .iter()
            .position(|s| s.block_index == block && s.attention_kind == kind)
    }
}

struct BoundAttn {
    wq: Node,
    wk: Node,
    wv: Node,
    wo: Node,
}

struct BoundBlock {
    ln1: (Node, Node),
    self_attn: BoundAttn,
    ln2: (Node, Node),
    cross_attn: BoundAttn,
    ln3: (Node, Node),
    ff: (Node, Node, Node, Node),
}

/// Denoiser parameters bound into a graph.
pub struct BoundDenoiser {
    patch_w: Node,
    patch_b: Node,
    tok_embed: Node,
    blocks: Vec<BoundBlock>,
    head_ln: (Node, Node),
    head_w: Node,
    head_b: Node,
}

pub fn bind_denoiser<T: Scalar>(
    g: &mut Graph<T>,
    cfg: &DenoiserConfig,
    params: &Params<T>,
    binding: &Binding,
) -> Result<BoundDenoiser> {
    let _ = params;
    let n = |name: String| binding.try_node(&name);
    let mut blocks = Vec::with_capacity(cfg.n_blocks);
    for b in 0..cfg.n_blocks {
        blocks.push(BoundBlock {
            ln1: (
                n(format!("denoiser.block{b}.ln1.g"))?,
                n(format!("denoiser.block{b}.ln1.b"))?,
            ),
            self_attn: BoundAttn {
                wq: n(format!("denoiser.block{b}.self.wq"))?,
                wk: n(format!("denoiser.block{b}.self.wk"))?,
                wv: n(format!("denoiser.block{b}.self.wv"))?,
                wo: n(format!("denoiser.block{b}.self.wo"))?,
            },
            ln2: (
                n(format!("denoiser.block{b}.ln2.g"))?,
                n(format!("denoiser.block{b}.ln2.b"))?,
            ),
            cross_attn: BoundAttn {
                wq: n(format!("denoiser.block{b}.cross.wq"))?,
                wk: n(format!("denoiser.block{b}.cross.wk"))?,
                wv: n(format!("denoiser.block{b}.cross.wv"))?,
                wo: n(format!("denoiser.block{b}.cross.wo"))?,
            },
            ln3: (
                n(format!("denoiser.block{b}.ln3.g"))?,
                n(format!("denoiser.block{b}.ln3.b"))?,
            ),
            ff: (
                n(format!("denoiser.block{b}.ff.w1"))?,
                n(format!("denoiser.block{b}.ff.b1"))?,
                n(format!("denoiser.block{b}.ff.w2"))?,
                n(format!("denoiser.block{b}.ff.b2"))?,
            ),
        });
    }
    let _ = g;
    Ok(BoundDenoiser {
        patch_w: n("denoiser.patch_embed.w".into())?,
        patch_b: n("denoiser.patch_embed.b".into())?,
        tok_embed: n("denoiser.tok_embed".into())?,
        blocks,
        head_ln: (n("denoiser.head.ln.g".into())?, n("denoiser.head.ln.b".into())?),
        head_w: n("denoiser.head.w".into())?,
        head_b: n("denoiser.head.b".into())?,
    })
}

const LN_EPS: f64 = 1e-5;

/// Projection `x @ w` plus the side branches of every adapter that injects
/// at `(block, kind, proj)`.
fn project<T: Scalar>(
    g: &mut Graph<T>,
    x: Node,
    w: Node,
    adapters: &[&BoundAdapter],
    block: usize,
    kind: AttentionKind,
    proj: usize,
) -> Result<Node> {
    let mut y = g.matmul(x, w)?;
    for a in adapters {
        if let Some(site) = a.site_index(block, kind) {
            let extra = match &a.entries[site * 4 + proj] {
                SiteDelta::LowRank { down, up } => {
                    let h = g.matmul(x, *up)?;
                    g.matmul(h, *down)?
                }
                SiteDelta::Full(m) => g.matmul(x, *m)?,
            };
            y = g.add(y, extra)?;
        }
    }
    Ok(y)
}

fn multihead<T: Scalar>(
    g: &mut Graph<T>,
    q: Node,
    k: Node,
    v: Node,
    n_heads: usize,
) -> Result<Node> {
    let d = g.value(q).cols();
    let dh = d / n_heads;
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qs = g.slice_cols(q, h * dh, (h + 1) * dh)?;
        let ks = g.slice_cols(k, h * dh, (h + 1) * dh)?;
        let vs = g.slice_cols(v, h * dh, (h + 1) * dh)?;
        heads.push(g.attention(qs, ks, vs)?);
    }
    g.concat_cols(&heads)
}

#[allow(clippy::too_many_arguments)]
fn attn_sublayer<T: Scalar>(
    g: &mut Graph<T>,
    x: Node,
    ctx: Node,
    attn: &BoundAttn,
    adapters: &[&BoundAdapter],
    block: usize,
    kind: AttentionKind,
    n_heads: usize,
) -> Result<Node> {
    let q = project(g, x, attn.wq, adapters, block, kind, 0)?;
    let k = project(g, ctx, attn.wk, adapters, block, kind, 1)?;
    let v = project(g, ctx, attn.wv, adapters, block, kind, 2)?;
    let mixed = multihead(g, q, k, v, n_heads)?;
    project(g, mixed, attn.wo, adapters, block, kind, 3)
}

/// Noise prediction as patch tokens `[n_patches, patch_dim]`.
///
/// `xt_tokens` is the patchified noisy image; adapters contribute
/// `(W + dW) x` at their injection sites and nothing else.
pub fn forward_eps<T: Scalar>(
    g: &mut Graph<T>,
    cfg: &DenoiserConfig,
    bound: &BoundDenoiser,
    xt_tokens: Node,
    t: usize,
    caption: &[u32],
    adapters: &[&BoundAdapter],
) -> Result<Node> {
    if caption.len() > cfg.max_caption_len {
        return Err(Error::InvalidConfig(format!(
            "caption length {} exceeds max {}",
            caption.len(),
            cfg.max_caption_len
        )));
    }
    let ids: Vec<usize> = caption
        .iter()
        .map(|&c| {
            let c = c as usize;
            if c >= cfg.vocab_size {
                Err(Error::InvalidConfig(format!(
                    "token {c} outside vocab {}",
                    cfg.vocab_size
                )))
            } else {
                Ok(c)
            }
        })
        .collect::<Result<_>>()?;

    // Patch tokens: linear embed + fixed position encoding + timestep encoding.
    let mut h = g.linear(xt_tokens, bound.patch_w, bound.patch_b)?;
    let pos = g.constant(pos_table::<T>(cfg.n_patches(), cfg.d_model));
    h = g.add(h, pos)?;
    let t_emb = g.constant(
        Array::from_vec(vec![cfg.d_model], sin_embedding::<T>(t as f64, cfg.d_model))
            .expect("embedding length matches"),
    );
    h = g.add_row(h, t_emb)?;

    // Caption context tokens.
    let mut ctx = g.gather_rows(bound.tok_embed, &ids)?;
    let cap_pos = g.constant(pos_table::<T>(ids.len(), cfg.d_model));
    ctx = g.add(ctx, cap_pos)?;

    let eps = T::of_f64(LN_EPS);
    for (b, block) in bound.blocks.iter().enumerate() {
        let a = g.layer_norm(h, block.ln1.0, block.ln1.1, eps)?;
        let s = attn_sublayer(
            g,
            a,
            a,
            &block.self_attn,
            adapters,
            b,
            AttentionKind::SelfAttn,
            cfg.n_heads,
        )?;
        h = g.add(h, s)?;

        let a = g.layer_norm(h, block.ln2.0, block.ln2.1, eps)?;
        let c = attn_sublayer(
            g,
            a,
            ctx,
            &block.cross_attn,
            adapters,
            b,
            AttentionKind::CrossAttn,
            cfg.n_heads,
        )?;
        h = g.add(h, c)?;

        let a = g.layer_norm(h, block.ln3.0, block.ln3.1, eps)?;
        let f1 = g.linear(a, block.ff.0, block.ff.1)?;
        let f1 = g.gelu(f1);
        let f2 = g.linear(f1, block.ff.2, block.ff.3)?;
        h = g.add(h, f2)?;
    }

    let a = g.layer_norm(h, bound.head_ln.0, bound.head_ln.1, eps)?;
    g.linear(a, bound.head_w, bound.head_b)
}

/// Noise prediction on plain arrays. Deterministic in its inputs; with
/// `deltas` given, each injected projection computes `(W + dW) x`.
pub fn predict_eps(
    model: &DenoiserModel,
    xt: &Array<f32>,
    t: usize,
    caption: &[u32],
    deltas: Option<&[LoraDelta]>,
) -> Result<Array<f32>> {
    if t < 1 || t > model.cfg.t_steps {
        return Err(Error::InvalidConfig(format!(
            "step {t} outside [1, {}]",
            model.cfg.t_steps
        )));
    }
    let mut g: Graph<f32> = Graph::new();
    let binding = Binding::bind(&mut g, &model.params, |_| false);
    let bound = bind_denoiser(&mut g, &model.cfg, &model.params, &binding)?;
    let tokens = patchify(xt, model.cfg.patch_size)?;
    let xt_node = g.constant(tokens);
    let bound_adapters: Vec<BoundAdapter> = deltas
        .unwrap_or(&[])
        .iter()
        .map(|d| BoundAdapter::from_delta(&mut g, d))
        .collect();
    let refs: Vec<&BoundAdapter> = bound_adapters.iter().collect();
    let out = forward_eps(&mut g, &model.cfg, &bound, xt_node, t, caption, &refs)?;
    unpatchify(g.value(out), model.cfg.image_size, model.cfg.patch_size)
}

/// Empty caption: all padding tokens. This is the CFG unconditional branch.
pub fn empty_caption(cfg: &DenoiserConfig) -> Vec<u32> {
    vec![crate::synthdata::PAD_TOKEN; cfg.max_caption_len]
}

/// DDPM ancestral sampling from pure noise with classifier-free guidance.
///
/// `steps <= T` selects an evenly spaced sub-schedule. Deterministic given
/// `seed`; the returned image is clamped to the valid pixel range.
pub fn sample(
    model: &DenoiserModel,
    schedule: &NoiseSchedule,
    caption: &[u32],
    cfg_scale: f32,
    steps: usize,
    seed: u64,
    deltas: Option<&[LoraDelta]>,
) -> Result<Image> {
    let t_max = schedule.t_max();
    if steps == 0 || steps > t_max {
        return Err(Error::InvalidConfig(format!(
            "steps {steps} outside [1, {t_max}]"
        )));
    }
    if cfg_scale < 0.0 {
        return Err(Error::InvalidConfig(format!(
            "cfg_scale {cfg_scale} must be non-negative"
        )));
    }
    // Evenly spaced 1-based timesteps, descending, always ending at 1.
    let mut ts: Vec<usize> = (0..steps)
        .map(|i| ((i + 1) * t_max + steps - 1) / steps)
        .collect();
    ts.dedup();
    ts.reverse();

    let mut rng = RngStream::new(seed, crate::numerics::label_id("denoiser.sample"));
    let shape = vec![model.cfg.image_size, model.cfg.image_size, 3];
    let mut x: Array<f32> = rng.normal_array(shape, 1.0);
    let uncond = empty_caption(&model.cfg);

    for (i, &t) in ts.iter().enumerate() {
        let eps_u = predict_eps(model, &x, t, &uncond, deltas)?;
        let eps_c = predict_eps(model, &x, t, caption, deltas)?;
        let eps = cfg_combine(&eps_u, &eps_c, cfg_scale)?;

        let ab_t = schedule.alpha_bar(t);
        // Predicted clean image, clamped to the valid signed pixel range.
        let x0 = x
            .sub(&eps.scale((1.0 - ab_t).sqrt() as f32))?
            .scale((1.0 / ab_t.sqrt()) as f32)
            .map(|v| v.clamp(-1.0, 1.0));

        if i + 1 == ts.len() {
            x = x0;
        } else {
            let s = ts[i + 1];
            let ab_s = schedule.alpha_bar(s);
            let var = (1.0 - ab_s) / (1.0 - ab_t) * (1.0 - ab_t / ab_s);
            let sigma = var.max(0.0).sqrt();
            let dir = (1.0 - ab_s - var).max(0.0).sqrt();
            let z: Array<f32> = rng.normal_array(x.shape().to_vec(), 1.0);
            x = x0
                .scale(ab_s.sqrt() as f32)
                .add(&eps.scale(dir as f32))?
                .add(&z.scale(sigma as f32))?;
        }
    }
    Image::from_signed(&x)
}
