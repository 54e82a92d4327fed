//! The low-dimensional linear LoRA space.
//!
//! Every adapter matrix is a coefficient-weighted sum over a trainable basis:
//! a layout of `N` injection sites contributes 8 matrix slots per site
//! (down/up for each of query, key, value, output), each slot carries `K`
//! basis matrices, and an adapter is fully described by `N x 8 x K`
//! coefficients. Materialization, adapter algebra (combine, interpolate,
//! average, slider), merging into the denoiser, and archive serialization
//! all live here.

use std::fmt;

use crate::archive::{Archive, NamedTensor};
use crate::denoiser::DenoiserModel;
use crate::error::{Error, Result};
use crate::numerics::{Array, RngStream};
use crate::params::Params;

/// Which of the two adapters a basis or coefficient set belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum AdapterKind {
    Id,
    Base,
}

impl AdapterKind {
    pub fn tag(self) -> &'static str {
        match self {
            AdapterKind::Id => "id",
            AdapterKind::Base => "base",
        }
    }
}

impl fmt::Display for AdapterKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum AttentionKind {
    SelfAttn,
    CrossAttn,
}

impl AttentionKind {
    pub fn tag(self) -> &'static str {
        match self {
            AttentionKind::SelfAttn => "self",
            AttentionKind::CrossAttn => "cross",
        }
    }
}

/// One LoRA injection site: an attention module inside the denoiser.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Site {
    pub block_index: usize,
    pub attention_kind: AttentionKind,
    pub d_model: usize,
}

pub const PROJECTIONS: [&str; 4] = ["q", "k", "v", "o"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Down,
    Up,
}

impl Direction {
    pub fn tag(self) -> &'static str {
        match self {
            Direction::Down => "down",
            Direction::Up => "up",
        }
    }
}

/// Canonical slot order within a site: projection-major, down before up.
pub const SLOTS_PER_SITE: usize = 8;

pub fn slot_parts(slot: usize) -> (&'static str, Direction) {
    let proj = PROJECTIONS[slot / 2];
    let dir = if slot % 2 == 0 {
        Direction::Down
    } else {
        Direction::Up
    };
    (proj, dir)
}

/// Injection sites plus the adapter ranks and basis size.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LoraLayout {
    pub sites: Vec<Site>,
    pub rank_id: usize,
    pub rank_base: usize,
    pub k_basis: usize,
}

impl LoraLayout {
    /// Sites at the query/key/value/output projections of both self- and
    /// cross-attention of every denoiser block.
    pub fn dense(n_blocks: usize, d_model: usize, rank_id: usize, rank_base: usize, k_basis: usize) -> Self {
        let mut sites = Vec::with_capacity(n_blocks * 2);
        for b in 0..n_blocks {
            sites.push(Site {
                block_index: b,
                attention_kind: AttentionKind::SelfAttn,
                d_model,
            });
            sites.push(Site {
                block_index: b,
                attention_kind: AttentionKind::CrossAttn,
                d_model,
            });
        }
        LoraLayout {
            sites,
            rank_id,
            rank_base,
            k_basis,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sites.is_empty() {
            return Err(Error::InvalidConfig("layout needs at least one site".into()));
        }
        if self.rank_id == 0 || self.rank_base == 0 || self.k_basis == 0 {
            return Err(Error::InvalidConfig("ranks and K must be positive".into()));
        }
        if self.rank_base > self.rank_id {
            return Err(Error::InvalidConfig(format!(
                "rank_base {} exceeds rank_id {}",
                self.rank_base, self.rank_id
            )));
        }
        // When the basis is smaller than a full-rank update per site, the
        // coefficient space must compress: check it does.
        let compresses = self
            .sites
            .iter()
            .all(|s| 8 * self.k_basis < 8 * self.rank_id * s.d_model);
        if compresses && self.dof() >= self.full_param_count(self.rank_id) {
            return Err(Error::InvalidConfig(
                "coefficient space does not compress the adapter parameters".into(),
            ));
        }
        Ok(())
    }

    pub fn n_sites(&self) -> usize {
        self.sites.len()
    }

    pub fn rank_of(&self, kind: AdapterKind) -> usize {
        match kind {
            AdapterKind::Id => self.rank_id,
            AdapterKind::Base => self.rank_base,
        }
    }

    /// Degrees of freedom of one adapter in coefficient space: `N x 8K`.
    pub fn dof(&self) -> usize {
        self.n_sites() * SLOTS_PER_SITE * self.k_basis
    }

    /// Parameter count of an uncompressed adapter at the given rank.
    pub fn full_param_count(&self, rank: usize) -> usize {
        self.sites.iter().map(|s| 4 * 2 * rank * s.d_model).sum()
    }

    /// `[rows, cols]` of a slot matrix for the given kind.
    pub fn slot_shape(&self, kind: AdapterKind, site: usize, slot: usize) -> Vec<usize> {
        let d = self.sites[site].d_model;
        let r = self.rank_of(kind);
        match slot_parts(slot).1 {
            Direction::Down => vec![r, d],
            Direction::Up => vec![d, r],
        }
    }

    pub fn slot_name(&self, kind: AdapterKind, site: usize, slot: usize) -> String {
        let (proj, dir) = slot_parts(slot);
        format!("basis.{}.site{:02}.{}.{}", kind.tag(), site, proj, dir.tag())
    }
}

/// Trainable basis matrices: `K` per slot, stored stacked as `[K, rank*d]`.
///
/// Up-direction stacks start at exactly zero so a freshly initialized
/// adapter is a no-op regardless of its coefficients.
#[derive(Clone, Debug)]
pub struct LoraBasis {
    pub kind: AdapterKind,
    pub layout: LoraLayout,
    pub params: Params<f32>,
}

impl LoraBasis {
    pub fn init(kind: AdapterKind, layout: &LoraLayout, rng: &RngStream) -> Self {
        let mut params = Params::new();
        let rank = layout.rank_of(kind);
        for site in 0..layout.n_sites() {
            let d = layout.sites[site].d_model;
            for slot in 0..SLOTS_PER_SITE {
                let name = layout.slot_name(kind, site, slot);
                let value = match slot_parts(slot).1 {
                    Direction::Down => {
                        let std = (1.0 / rank as f64).sqrt();
                        rng.derive(&name).normal_array(vec![layout.k_basis, rank * d], std)
                    }
                    Direction::Up => Array::zeros(vec![layout.k_basis, rank * d]),
                };
                params.insert(name, value);
            }
        }
        LoraBasis {
            kind,
            layout: layout.clone(),
            params,
        }
    }

    pub fn slot(&self, site: usize, slot: usize) -> &Array<f32> {
        self.params
            .get(&self.layout.slot_name(self.kind, site, slot))
            .expect("basis holds every slot by construction")
    }

    /// Split each `[K, rank*d]` stack into `K` archive tensors keyed
    /// `basis.{kind}.site{ii}.{proj}.{dir}.k{kk}`.
    pub fn to_tensors(&self) -> Archive {
        let mut out = Archive::new();
        for site in 0..self.layout.n_sites() {
            for slot in 0..SLOTS_PER_SITE {
                let stack = self.slot(site, slot);
                let shape = self.layout.slot_shape(self.kind, site, slot);
                let per = shape.iter().product::<usize>();
                let name = self.layout.slot_name(self.kind, site, slot);
                for k in 0..self.layout.k_basis {
                    let data = stack.row(k)[..per].to_vec();
                    out.insert(
                        format!("{name}.k{k:03}"),
                        NamedTensor::f32(shape.clone(), data),
                    );
                }
            }
        }
        out
    }

    pub fn from_tensors(
        kind: AdapterKind,
        layout: &LoraLayout,
        tensors: &Archive,
    ) -> Result<Self> {
        let mut params = Params::new();
        for site in 0..layout.n_sites() {
            let d = layout.sites[site].d_model;
            let rank = layout.rank_of(kind);
            for slot in 0..SLOTS_PER_SITE {
                let name = layout.slot_name(kind, site, slot);
                let mut data = Vec::with_capacity(layout.k_basis * rank * d);
                for k in 0..layout.k_basis {
                    let key = format!("{name}.k{k:03}");
                    let t = tensors
                        .get(&key)
                        .ok_or_else(|| Error::MissingParameter { name: key.clone() })?;
                    let expect = layout.slot_shape(kind, site, slot);
                    if t.shape != expect {
                        return Err(Error::ShapeMismatch {
                            op: "LoraBasis::from_tensors",
                            left: t.shape.clone(),
                            right: expect,
                        });
                    }
                    data.extend_from_slice(t.to_array()?.data());
                }
                params.insert(name, Array::from_vec(vec![layout.k_basis, rank * d], data)?);
            }
        }
        Ok(LoraBasis {
            kind,
            layout: layout.clone(),
            params,
        })
    }
}

/// Combination coefficients for one adapter: logically `[N, 8, K]`,
/// stored row-major as `[N*8, K]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraCoefficients {
    pub kind: AdapterKind,
    pub values: Array<f32>,
}

impl LoraCoefficients {
    pub fn zeros(kind: AdapterKind, layout: &LoraLayout) -> Self {
        LoraCoefficients {
            kind,
            values: Array::zeros(vec![layout.n_sites() * SLOTS_PER_SITE, layout.k_basis]),
        }
    }

    pub fn check_layout(&self, layout: &LoraLayout) -> Result<()> {
        let want = vec![layout.n_sites() * SLOTS_PER_SITE, layout.k_basis];
        if self.values.shape() != want.as_slice() {
            return Err(Error::ShapeMismatch {
                op: "LoraCoefficients::check_layout",
                left: self.values.shape().to_vec(),
                right: want,
            });
        }
        Ok(())
    }

    pub fn archive_key(kind: AdapterKind) -> String {
        format!("coeffs.{}", kind.tag())
    }

    pub fn to_tensor(&self) -> NamedTensor {
        NamedTensor::from_array(&self.values)
    }

    pub fn from_tensor(kind: AdapterKind, t: &NamedTensor) -> Result<Self> {
        Ok(LoraCoefficients {
            kind,
            values: t.to_array()?,
        })
    }
}

/// Materialized adapter matrices, one per slot, site-major in slot order.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraWeights {
    pub layout: LoraLayout,
    pub slots: Vec<Array<f32>>,
}

impl LoraWeights {
    pub fn slot(&self, site: usize, slot: usize) -> &Array<f32> {
        &self.slots[site * SLOTS_PER_SITE + slot]
    }
}

/// Merged-form update per site and projection: `dW = up @ down`, `d x d`.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraDelta {
    pub sites: Vec<Site>,
    /// Site-major, projections in `q, k, v, o` order.
    pub mats: Vec<Array<f32>>,
}

impl LoraDelta {
    pub fn mat(&self, site: usize, proj: usize) -> &Array<f32> {
        &self.mats[site * 4 + proj]
    }

    pub fn zeros(layout: &LoraLayout) -> Self {
        LoraDelta {
            sites: layout.sites.clone(),
            mats: layout
                .sites
                .iter()
                .flat_map(|s| (0..4).map(move |_| Array::zeros(vec![s.d_model, s.d_model])))
                .collect(),
        }
    }
}

/// `slot = sum_k c_k * B_k` for every slot.
pub fn materialize(basis: &LoraBasis, coeffs: &LoraCoefficients) -> Result<LoraWeights> {
    if basis.kind != coeffs.kind {
        return Err(Error::KindMismatch {
            expected: basis.kind.tag().into(),
            got: coeffs.kind.tag().into(),
        });
    }
    coeffs.check_layout(&basis.layout)?;
    let layout = &basis.layout;
    let mut slots = Vec::with_capacity(layout.n_sites() * SLOTS_PER_SITE);
    for site in 0..layout.n_sites() {
        for slot in 0..SLOTS_PER_SITE {
            let stack = basis.slot(site, slot);
            let row = coeffs.values.row(site * SLOTS_PER_SITE + slot);
            let c = Array::from_vec(vec![1, layout.k_basis], row.to_vec())?;
            let flat = c.matmul(stack)?;
            let shape = layout.slot_shape(basis.kind, site, slot);
            slots.push(flat.reshape(shape)?);
        }
    }
    Ok(LoraWeights {
        layout: layout.clone(),
        slots,
    })
}

fn pad_slot(mat: &Array<f32>, dir: Direction, rank_out: usize) -> Array<f32> {
    match dir {
        Direction::Down => {
            let (r, d) = (mat.shape()[0], mat.shape()[1]);
            if r == rank_out {
                return mat.clone();
            }
            let mut out = Array::zeros(vec![rank_out, d]);
            out.data_mut()[..r * d].copy_from_slice(mat.data());
            out
        }
        Direction::Up => {
            let (d, r) = (mat.shape()[0], mat.shape()[1]);
            if r == rank_out {
                return mat.clone();
            }
            let mut out = Array::zeros(vec![d, rank_out]);
            for i in 0..d {
                out.data_mut()[i * rank_out..i * rank_out + r].copy_from_slice(mat.row(i));
            }
            out
        }
    }
}

/// Slotwise `w_base * base + w_id * id`.
///
/// Slots of different rank are zero-padded to the larger rank first, so the
/// base adapter (rank 4 by default) combines with the id adapter (rank 8).
pub fn combine(
    base_w: &LoraWeights,
    id_w: &LoraWeights,
    w_base: f32,
    w_id: f32,
) -> Result<LoraWeights> {
    if base_w.layout.sites != id_w.layout.sites || base_w.layout.k_basis != id_w.layout.k_basis {
        return Err(Error::InvalidConfig("combine: layouts differ".into()));
    }
    let layout = id_w.layout.clone();
    let mut slots = Vec::with_capacity(base_w.slots.len());
    for site in 0..layout.n_sites() {
        for slot in 0..SLOTS_PER_SITE {
            let dir = slot_parts(slot).1;
            let a = base_w.slot(site, slot);
            let b = id_w.slot(site, slot);
            let rank_out = match dir {
                Direction::Down => a.shape()[0].max(b.shape()[0]),
                Direction::Up => a.shape()[1].max(b.shape()[1]),
            };
            let a = pad_slot(a, dir, rank_out);
            let b = pad_slot(b, dir, rank_out);
            slots.push(a.scale(w_base).add(&b.scale(w_id))?);
        }
    }
    Ok(LoraWeights { layout, slots })
}

/// Low-rank product per projection: `dW = up @ down`, scale 1.
pub fn delta(w: &LoraWeights) -> Result<LoraDelta> {
    let mut mats = Vec::with_capacity(w.layout.n_sites() * 4);
    for site in 0..w.layout.n_sites() {
        for proj in 0..4 {
            let down = w.slot(site, proj * 2);
            let up = w.slot(site, proj * 2 + 1);
            mats.push(up.matmul(down)?);
        }
    }
    Ok(LoraDelta {
        sites: w.layout.sites.clone(),
        mats,
    })
}

/// Returns a model whose targeted projection matrices are `W + scale * dW`.
/// Architecture and parameter count are unchanged.
pub fn merge(model: &DenoiserModel, d: &LoraDelta, scale: f32) -> Result<DenoiserModel> {
    let mut out = model.clone();
    for (i, site) in d.sites.iter().enumerate() {
        for (proj, tag) in PROJECTIONS.iter().enumerate() {
            let name = format!(
                "denoiser.block{}.{}.w{}",
                site.block_index,
                site.attention_kind.tag(),
                tag
            );
            let w = out
                .params
                .get_mut(&name)
                .map_err(|_| Error::MissingSite { site: name.clone() })?;
            w.axpy(scale, d.mat(i, proj)).map_err(|_| Error::ShapeMismatch {
                op: "merge",
                left: w.shape().to_vec(),
                right: d.mat(i, proj).shape().to_vec(),
            })?;
        }
    }
    Ok(out)
}

/// Elementwise weighted sum of coefficient sets.
pub fn interp(coeff_list: &[LoraCoefficients], weights: &[f32]) -> Result<LoraCoefficients> {
    if coeff_list.is_empty() || coeff_list.len() != weights.len() {
        return Err(Error::InvalidConfig(format!(
            "interp: {} coefficient sets, {} weights",
            coeff_list.len(),
            weights.len()
        )));
    }
    let kind = coeff_list[0].kind;
    let mut values = Array::zeros(coeff_list[0].values.shape().to_vec());
    for (c, &w) in coeff_list.iter().zip(weights) {
        if c.kind != kind {
            return Err(Error::KindMismatch {
                expected: kind.tag().into(),
                got: c.kind.tag().into(),
            });
        }
        values.axpy(w, &c.values)?;
    }
    Ok(LoraCoefficients { kind, values })
}

/// Equal-weight average of coefficient sets.
pub fn average(coeff_list: &[LoraCoefficients]) -> Result<LoraCoefficients> {
    let w = 1.0 / coeff_list.len() as f32;
    interp(coeff_list, &vec![w; coeff_list.len()])
}

/// Slotwise scaling of materialized weights.
pub fn scale_weights(w: &LoraWeights, c: f32) -> LoraWeights {
    LoraWeights {
        layout: w.layout.clone(),
        slots: w.slots.iter().map(|s| s.scale(c)).collect(),
    }
}

/// Slider coefficients: `edited - original`.
pub fn slider(edited: &LoraCoefficients, original: &LoraCoefficients) -> Result<LoraCoefficients> {
    if edited.kind != original.kind {
        return Err(Error::KindMismatch {
            expected: edited.kind.tag().into(),
            got: original.kind.tag().into(),
        });
    }
    Ok(LoraCoefficients {
        kind: edited.kind,
        values: edited.values.sub(&original.values)?,
    })
}
