//! The hypernetwork pair that maps a reference face to adapter coefficients.
//!
//! Each variant is an ID projector (id variant only), a 4-layer perceiver
//! resampler whose learned latent queries cross-attend to structural tokens
//! (and, in the id variant, to projected identity tokens through a second
//! attention block), and a linear head from pooled latents to the `N x 8 x K`
//! coefficient grid. The second attention block's output projections start
//! at exactly zero, so an untrained network ignores the identity embedding.

use serde::{Deserialize, Serialize};

use crate::denoiser::{BoundAdapter, SiteDelta};
use crate::encoders::EncoderStack;
use crate::error::{Error, Result};
use crate::img::{BBox, Image};
use crate::lora::{slot_parts, AdapterKind, Direction, LoraCoefficients, LoraLayout, SLOTS_PER_SITE};
use crate::numerics::{Array, Graph, Node, RngStream, Scalar};
use crate::params::{Binding, Params};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct HyperConfig {
    /// Learned latent query count `Q`.
    pub latent_count: usize,
    /// Latent width.
    pub d_hidden: usize,
    /// Resampler depth.
    pub n_layers: usize,
    /// Tokens produced by the ID projector.
    pub id_tokens: usize,
    /// Identity embedding width (matches the encoder's `embed_dim`).
    pub embed_dim: usize,
    /// Structural token width (matches the encoder's `d_feat`).
    pub d_feat: usize,
    /// Feed-forward hidden width multiple.
    pub ff_mult: usize,
}

impl Default for HyperConfig {
    fn default() -> Self {
        HyperConfig {
            latent_count: 16,
            d_hidden: 64,
            n_layers: 4,
            id_tokens: 4,
            embed_dim: 16,
            d_feat: 64,
            ff_mult: 2,
        }
    }
}

impl HyperConfig {
    pub fn ff_hidden(&self) -> usize {
        self.ff_mult * self.d_hidden
    }
}

/// One hypernetwork variant with its parameters. Parameter names form the
/// `hypernet.{id|base}.*` archive key set.
#[derive(Clone, Debug)]
pub struct HyperNetwork {
    pub kind: AdapterKind,
    pub cfg: HyperConfig,
    pub layout: LoraLayout,
    pub params: Params<f32>,
}

impl HyperNetwork {
    pub fn prefix(kind: AdapterKind) -> String {
        format!("hypernet.{}", kind.tag())
    }

    pub fn init(
        kind: AdapterKind,
        cfg: &HyperConfig,
        layout: &LoraLayout,
        rng: &RngStream,
    ) -> Self {
        let p = Self::prefix(kind);
        let d = cfg.d_hidden;
        let mut params = Params::new();
        let mut norm = |name: String, shape: Vec<usize>, std: f64| {
            params.insert(name.clone(), rng.derive(&name).normal_array::<f32>(shape, std));
        };
        let proj_std = 1.0 / (d as f64).sqrt();
        let resid_std = proj_std / (2.0 * cfg.n_layers as f64).sqrt();

        norm(format!("{p}.latents"), vec![cfg.latent_count, d], 0.02);
        if kind == AdapterKind::Id {
            norm(
                format!("{p}.idproj.w"),
                vec![cfg.embed_dim, cfg.id_tokens * d],
                1.0 / (cfg.embed_dim as f64).sqrt(),
            );
        }
        for i in 0..cfg.n_layers {
            norm(format!("{p}.layer{i}.attn1.wq"), vec![d, d], proj_std);
            norm(
                format!("{p}.layer{i}.attn1.wk"),
                vec![cfg.d_feat, d],
                1.0 / (cfg.d_feat as f64).sqrt(),
            );
            norm(
                format!("{p}.layer{i}.attn1.wv"),
                vec![cfg.d_feat, d],
                1.0 / (cfg.d_feat as f64).sqrt(),
            );
            norm(format!("{p}.layer{i}.attn1.wo"), vec![d, d], resid_std);
            if kind == AdapterKind::Id {
                norm(format!("{p}.layer{i}.attn2.wq"), vec![d, d], proj_std);
                norm(format!("{p}.layer{i}.attn2.wk"), vec![d, d], proj_std);
                norm(format!("{p}.layer{i}.attn2.wv"), vec![d, d], proj_std);
            }
            norm(format!("{p}.layer{i}.ff.w1"), vec![d, cfg.ff_hidden()], proj_std);
            norm(
                format!("{p}.layer{i}.ff.w2"),
                vec![cfg.ff_hidden(), d],
                1.0 / (cfg.ff_hidden() as f64).sqrt() / (2.0 * cfg.n_layers as f64).sqrt(),
            );
        }
        let coeff_dim = layout.n_sites() * SLOTS_PER_SITE * layout.k_basis;
        norm(format!("{p}.head.w"), vec![d, coeff_dim], 0.02);

        // Zero-filled tensors, after the random ones so draw streams stay
        // name-addressed.
        if kind == AdapterKind::Id {
            params.insert(format!("{p}.idproj.b"), Array::zeros(vec![cfg.id_tokens * d]));
            params.insert(format!("{p}.idproj.ln.g"), Array::filled(vec![d], 1.0));
            params.insert(format!("{p}.idproj.ln.b"), Array::zeros(vec![d]));
        }
        for i in 0..cfg.n_layers {
            if kind == AdapterKind::Id {
                // Zero output projection: identity tokens are invisible at
                // initialization.
                params.insert(format!("{p}.layer{i}.attn2.wo"), Array::zeros(vec![d, d]));
            }
            params.insert(format!("{p}.layer{i}.ff.b1"), Array::zeros(vec![cfg.ff_hidden()]));
            params.insert(format!("{p}.layer{i}.ff.b2"), Array::zeros(vec![d]));
        }
        params.insert(format!("{p}.head.b"), Array::zeros(vec![coeff_dim]));

        HyperNetwork {
            kind,
            cfg: cfg.clone(),
            layout: layout.clone(),
            params,
        }
    }

    pub fn hash(&self) -> [u8; 32] {
        self.params.hash_all()
    }
}

struct BoundLayer {
    attn1: (Node, Node, Node, Node),
    attn2: Option<(Node, Node, Node, Node)>,
    ff: (Node, Node, Node, Node),
}

/// Hypernetwork parameters bound into a graph.
pub struct BoundHyper {
    kind: AdapterKind,
    latents: Node,
    idproj: Option<(Node, Node, Node, Node)>,
    layers: Vec<BoundLayer>,
    head: (Node, Node),
}

pub fn bind_hyper<T: Scalar>(
    _g: &mut Graph<T>,
    net_kind: AdapterKind,
    cfg: &HyperConfig,
    binding: &Binding,
) -> Result<BoundHyper> {
    let p = HyperNetwork::prefix(net_kind);
    let n = |name: String| binding.try_node(&name);
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for i in 0..cfg.n_layers {
        layers.push(BoundLayer {
            attn1: (
                n(format!("{p}.layer{i}.attn1.wq"))?,
                n(format!("{p}.layer{i}.attn1.wk"))?,
                n(format!("{p}.layer{i}.attn1.wv"))?,
                n(format!("{p}.layer{i}.attn1.wo"))?,
            ),
            attn2: if net_kind == AdapterKind::Id {
                Some((
                    n(format!("{p}.layer{i}.attn2.wq"))?,
                    n(format!("{p}.layer{i}.attn2.wk"))?,
                    n(format!("{p}.layer{i}.attn2.wv"))?,
                    n(format!("{p}.layer{i}.attn2.wo"))?,
                ))
            } else {
                None
            },
            ff: (
                n(format!("{p}.layer{i}.ff.w1"))?,
                n(format!("{p}.layer{i}.ff.b1"))?,
                n(format!("{p}.layer{i}.ff.w2"))?,
                n(format!("{p}.layer{i}.ff.b2"))?,
            ),
        });
    }
    Ok(BoundHyper {
        kind: net_kind,
        latents: n(format!("{p}.latents"))?,
        idproj: if net_kind == AdapterKind::Id {
            Some((
                n(format!("{p}.idproj.w"))?,
                n(format!("{p}.idproj.b"))?,
                n(format!("{p}.idproj.ln.g"))?,
                n(format!("{p}.idproj.ln.b"))?,
            ))
        } else {
            None
        },
        layers,
        head: (n(format!("{p}.head.w"))?, n(format!("{p}.head.b"))?),
    })
}

const LN_EPS: f64 = 1e-5;

/// Linear, reshape to `id_tokens x d_hidden`, layer-norm per token.
pub fn id_project<T: Scalar>(
    g: &mut Graph<T>,
    cfg: &HyperConfig,
    bound: &BoundHyper,
    id_embed: Node,
) -> Result<Node> {
    let (w, b, ln_g, ln_b) = bound.idproj.ok_or_else(|| {
        Error::InvalidConfig("base hypernetwork has no id projector".into())
    })?;
    if g.value(id_embed).len() != cfg.embed_dim {
        return Err(Error::ShapeMismatch {
            op: "id_project",
            left: g.value(id_embed).shape().to_vec(),
            right: vec![1, cfg.embed_dim],
        });
    }
    let flat = g.linear(id_embed, w, b)?;
    let tokens = g.reshape(flat, vec![cfg.id_tokens, cfg.d_hidden])?;
    g.layer_norm(tokens, ln_g, ln_b, T::of_f64(LN_EPS))
}

fn resampler_attn<T: Scalar>(
    g: &mut Graph<T>,
    x: Node,
    ctx: Node,
    w: (Node, Node, Node, Node),
) -> Result<Node> {
    let q = g.matmul(x, w.0)?;
    let k = g.matmul(ctx, w.1)?;
    let v = g.matmul(ctx, w.2)?;
    let mixed = g.attention(q, k, v)?;
    g.matmul(mixed, w.3)
}

/// Four resampler layers: cross-attention to structural tokens with a
/// residual, then (id variant) cross-attention to identity tokens with a
/// residual, then a feed-forward with a residual.
pub fn resample<T: Scalar>(
    g: &mut Graph<T>,
    bound: &BoundHyper,
    clip_tokens: Node,
    id_tokens: Option<Node>,
) -> Result<Node> {
    if bound.kind == AdapterKind::Id && id_tokens.is_none() {
        return Err(Error::InvalidConfig(
            "id variant resampler needs identity tokens".into(),
        ));
    }
    let mut h = bound.latents;
    for layer in &bound.layers {
        let a = resampler_attn(g, h, clip_tokens, layer.attn1)?;
        h = g.add(h, a)?;
        if let Some(attn2) = layer.attn2 {
            let toks = id_tokens.expect("checked above");
            let a2 = resampler_attn(g, h, toks, attn2)?;
            h = g.add(h, a2)?;
        }
        let f = g.linear(h, layer.ff.0, layer.ff.1)?;
        let f = g.gelu(f);
        let f = g.linear(f, layer.ff.2, layer.ff.3)?;
        h = g.add(h, f)?;
    }
    Ok(h)
}

/// Mean-pool the latents and map them to the coefficient grid `[N*8, K]`.
pub fn coeff_head<T: Scalar>(
    g: &mut Graph<T>,
    layout: &LoraLayout,
    bound: &BoundHyper,
    latents: Node,
) -> Result<Node> {
    let q = g.value(latents).rows();
    let pool_w = g.constant(Array::filled(vec![1, q], T::of_f64(1.0 / q as f64)));
    let pooled = g.matmul(pool_w, latents)?;
    let flat = g.linear(pooled, bound.head.0, bound.head.1)?;
    g.reshape(flat, vec![layout.n_sites() * SLOTS_PER_SITE, layout.k_basis])
}

/// Full coefficient prediction for one variant.
pub fn hyper_forward<T: Scalar>(
    g: &mut Graph<T>,
    cfg: &HyperConfig,
    layout: &LoraLayout,
    bound: &BoundHyper,
    clip_tokens: Node,
    id_embed: Option<Node>,
) -> Result<Node> {
    let id_tokens = match (bound.kind, id_embed) {
        (AdapterKind::Id, Some(e)) => Some(id_project(g, cfg, bound, e)?),
        (AdapterKind::Id, None) => {
            return Err(Error::InvalidConfig(
                "id variant needs an identity embedding".into(),
            ))
        }
        (AdapterKind::Base, _) => None,
    };
    let latents = resample(g, bound, clip_tokens, id_tokens)?;
    coeff_head(g, layout, bound, latents)
}

/// Materialize adapter slot matrices on the graph from basis parameters and
/// a coefficient node, yielding low-rank `(down, up)` pairs per projection.
pub fn bind_lowrank_adapter<T: Scalar>(
    g: &mut Graph<T>,
    layout: &LoraLayout,
    kind: AdapterKind,
    basis_binding: &Binding,
    coeffs: Node,
) -> Result<BoundAdapter> {
    let rank = layout.rank_of(kind);
    let mut entries = Vec::with_capacity(layout.n_sites() * 4);
    for site in 0..layout.n_sites() {
        let d = layout.sites[site].d_model;
        let mut slot_nodes = Vec::with_capacity(SLOTS_PER_SITE);
        for slot in 0..SLOTS_PER_SITE {
            let stack = basis_binding.try_node(&layout.slot_name(kind, site, slot))?;
            let row_idx = site * SLOTS_PER_SITE + slot;
            let row = g.slice_rows(coeffs, row_idx, row_idx + 1)?;
            let flat = g.matmul(row, stack)?;
            let shaped = match slot_parts(slot).1 {
                Direction::Down => g.reshape(flat, vec![rank, d])?,
                Direction::Up => g.reshape(flat, vec![d, rank])?,
            };
            slot_nodes.push(shaped);
        }
        for proj in 0..4 {
            entries.push(SiteDelta::LowRank {
                down: slot_nodes[proj * 2],
                up: slot_nodes[proj * 2 + 1],
            });
        }
    }
    Ok(BoundAdapter {
        sites: layout.sites.clone(),
        entries,
    })
}

/// Deterministic inference: reference image to coefficient pair.
///
/// ID path: structural tokens of the face crop plus projected identity
/// embedding. Base path: structural tokens of the blurred crop only.
pub fn generate_lora(
    image: &Image,
    bbox: BBox,
    hyper_id: &HyperNetwork,
    hyper_base: &HyperNetwork,
    encoders: &EncoderStack,
) -> Result<(LoraCoefficients, LoraCoefficients)> {
    let crop = encoders.crop(image, bbox)?;
    let clip = encoders.features.tokens(&crop)?;
    let embed = encoders.id_encoder.embed(&crop)?;
    let blurred = encoders.blur(&crop)?;
    let clip_blur = encoders.features.tokens(&blurred)?;

    let mut g: Graph<f32> = Graph::new();
    let id_binding = Binding::bind(&mut g, &hyper_id.params, |_| false);
    let bound_id = bind_hyper(&mut g, AdapterKind::Id, &hyper_id.cfg, &id_binding)?;
    let clip_node = g.constant(clip);
    let m = embed.len();
    let embed_node = g.constant(embed.reshape(vec![1, m])?);
    let coeffs_id = hyper_forward(
        &mut g,
        &hyper_id.cfg,
        &hyper_id.layout,
        &bound_id,
        clip_node,
        Some(embed_node),
    )?;

    let base_binding = Binding::bind(&mut g, &hyper_base.params, |_| false);
    let bound_base = bind_hyper(&mut g, AdapterKind::Base, &hyper_base.cfg, &base_binding)?;
    let clip_blur_node = g.constant(clip_blur);
    let coeffs_base = hyper_forward(
        &mut g,
        &hyper_base.cfg,
        &hyper_base.layout,
        &bound_base,
        clip_blur_node,
        None,
    )?;

    Ok((
        LoraCoefficients {
            kind: AdapterKind::Id,
            values: g.value(coeffs_id).clone(),
        },
        LoraCoefficients {
            kind: AdapterKind::Base,
            values: g.value(coeffs_base).clone(),
        },
    ))
}
