//! Frozen perception stack standing in for the pretrained image encoders:
//! face cropping, face blurring, a fixed seeded patch projection producing
//! dense structural tokens, and a small identity encoder trained once on the
//! synthetic set and frozen afterwards.

use serde::{Deserialize, Serialize};

use crate::archive::Archive;
use crate::error::{Error, Result};
use crate::img::{BBox, Image};
use crate::numerics::{cosine, gelu, Array, Graph, RngStream};
use crate::params::{Binding, Params};
use crate::synthdata::{self, Dataset};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct EncoderConfig {
    /// Face crops are resized to this square resolution.
    pub crop_size: usize,
    /// Patch side for the structural token projection.
    pub patch_size: usize,
    /// Width of structural feature tokens.
    pub d_feat: usize,
    /// Identity embedding width `m`.
    pub embed_dim: usize,
    /// Hidden width of the identity encoder trunk.
    pub id_hidden: usize,
    /// Seed defining the frozen structural projection.
    pub feature_seed: u64,
    /// Box blur radius used for the identity-free branch.
    pub blur_radius: usize,
    /// Margin used when cropping reference faces.
    pub crop_margin: f32,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            crop_size: 32,
            patch_size: 8,
            d_feat: 64,
            embed_dim: 16,
            id_hidden: 128,
            feature_seed: 0x5eed_fea7,
            blur_radius: 4,
            crop_margin: 0.15,
        }
    }
}

impl EncoderConfig {
    pub fn n_tokens(&self) -> usize {
        let per = self.crop_size / self.patch_size;
        per * per
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    pub fn crop_pixels(&self) -> usize {
        self.crop_size * self.crop_size * 3
    }
}

/// A face region resized to the configured crop resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct FaceCrop {
    pub image: Image,
    /// The rectangle that was cut from the source image.
    pub source_bbox: BBox,
}

/// Crop `bbox` expanded by `margin`, clipped to the image, resized to the
/// crop resolution.
pub fn crop_face(
    cfg: &EncoderConfig,
    image: &Image,
    bbox: BBox,
    margin: f32,
) -> Result<FaceCrop> {
    if bbox.is_empty() {
        return Err(Error::InvalidConfig("empty face bbox".into()));
    }
    if margin < 0.0 {
        return Err(Error::InvalidConfig(format!("negative margin {margin}")));
    }
    if bbox.x + bbox.w > image.width || bbox.y + bbox.h > image.height {
        return Err(Error::InvalidDimensions {
            op: "crop_face",
            message: format!("bbox {bbox:?} outside {}x{}", image.width, image.height),
        });
    }
    let rect = bbox.expand(margin, image.width, image.height);
    let cropped = image.crop(rect)?;
    Ok(FaceCrop {
        image: cropped.resize_bilinear(cfg.crop_size, cfg.crop_size),
        source_bbox: rect,
    })
}

/// Whole image as a crop (used when no face box is known).
pub fn full_frame(cfg: &EncoderConfig, image: &Image) -> FaceCrop {
    FaceCrop {
        image: image.resize_bilinear(cfg.crop_size, cfg.crop_size),
        source_bbox: BBox::full(image.width, image.height),
    }
}

/// Box blur applied separably per channel. Windows are clamped to the image
/// bounds and renormalized, so a radius covering the whole crop averages it
/// exactly.
pub fn blur_face(crop: &FaceCrop, radius: usize) -> Result<FaceCrop> {
    if radius == 0 {
        return Err(Error::InvalidConfig("blur radius must be at least 1".into()));
    }
    let img = &crop.image;
    let (w, h) = (img.width, img.height);
    let r = radius as i64;

    let mut horiz = vec![0.0f32; w * h * 3];
    for y in 0..h {
        for x in 0..w {
            let x0 = (x as i64 - r).max(0) as usize;
            let x1 = ((x as i64 + r).min(w as i64 - 1)) as usize;
            for c in 0..3 {
                let mut acc = 0.0f32;
                for sx in x0..=x1 {
                    acc += img.get(sx, y)[c] as f32;
                }
                horiz[(y * w + x) * 3 + c] = acc / (x1 - x0 + 1) as f32;
            }
        }
    }
    let mut out = Image::new(w, h);
    for y in 0..h {
        let y0 = (y as i64 - r).max(0) as usize;
        let y1 = ((y as i64 + r).min(h as i64 - 1)) as usize;
        for x in 0..w {
            let mut rgb = [0u8; 3];
            for c in 0..3 {
                let mut acc = 0.0f32;
                for sy in y0..=y1 {
                    acc += horiz[(sy * w + x) * 3 + c];
                }
                rgb[c] = (acc / (y1 - y0 + 1) as f32).round().clamp(0.0, 255.0) as u8;
            }
            out.set(x, y, rgb);
        }
    }
    Ok(FaceCrop {
        image: out,
        source_bbox: crop.source_bbox,
    })
}

/// Frozen structural feature extractor: a fixed seeded linear projection of
/// each image patch. Deterministic, never trained, never receives gradients.
#[derive(Clone, Debug)]
pub struct FeatureEncoder {
    pub cfg: EncoderConfig,
    weights: Array<f32>,
}

impl FeatureEncoder {
    pub fn new(cfg: &EncoderConfig) -> Self {
        let mut rng = RngStream::named(cfg.feature_seed, "feature-encoder");
        let std = 1.0 / (cfg.patch_dim() as f64).sqrt();
        FeatureEncoder {
            cfg: cfg.clone(),
            weights: rng.normal_array(vec![cfg.patch_dim(), cfg.d_feat], std),
        }
    }

    /// Sum of the projection weights; a cheap frozen-weights fingerprint.
    pub fn weight_hash(&self) -> [u8; 32] {
        let mut p = Params::new();
        p.insert("feature.w", self.weights.clone());
        p.hash_all()
    }

    /// Per-patch projected tokens, `[n_tokens, d_feat]`.
    pub fn tokens(&self, crop: &FaceCrop) -> Result<Array<f32>> {
        let img = &crop.image;
        if img.width != self.cfg.crop_size || img.height != self.cfg.crop_size {
            return Err(Error::InvalidDimensions {
                op: "FeatureEncoder::tokens",
                message: format!("expected {0}x{0} crop", self.cfg.crop_size),
            });
        }
        let patches = crate::denoiser::patchify(&img.to_unit(), self.cfg.patch_size)?;
        patches.matmul(&self.weights)
    }

    /// Mean token, unit-normalized: the pooled structural feature of an image.
    pub fn pooled(&self, image: &Image) -> Result<Array<f32>> {
        let tokens = self.tokens(&full_frame(&self.cfg, image))?;
        let (n, d) = (tokens.rows(), tokens.cols());
        let mut mean = Array::zeros(vec![d]);
        for i in 0..n {
            for j in 0..d {
                mean.data_mut()[j] += tokens.at2(i, j) / n as f32;
            }
        }
        let norm = mean.norm();
        if norm > 0.0 {
            mean = mean.scale(1.0 / norm);
        }
        Ok(mean)
    }
}

/// Identity encoder: a small trained regressor from face crops to identity
/// parameters. The penultimate activations, unit-normalized, serve as the
/// identity embedding; the final head doubles as an attribute regressor.
#[derive(Clone, Debug)]
pub struct IdEncoder {
    pub cfg: EncoderConfig,
    pub params: Params<f32>,
}

/// Flattened, per-image standardized pixels: brightness shifts cancel here,
/// which is what makes the embedding brightness-invariant.
fn standardize(image: &Image) -> Array<f32> {
    let unit = image.to_unit();
    let n = unit.len() as f32;
    let mean = unit.data().iter().sum::<f32>() / n;
    let var = unit.data().iter().map(|&v| (v - mean) * (v - mean)).sum::<f32>() / n;
    let inv = 1.0 / (var + 1e-6).sqrt();
    Array::from_vec(
        vec![1, unit.len()],
        unit.data().iter().map(|&v| (v - mean) * inv).collect(),
    )
    .expect("length preserved")
}

impl IdEncoder {
    pub fn init(cfg: &EncoderConfig, rng: &RngStream) -> Self {
        let mut params = Params::new();
        let d_in = cfg.crop_pixels();
        let h = cfg.id_hidden;
        let m = cfg.embed_dim;
        let mut norm = |name: &str, shape: Vec<usize>, std: f64| {
            params.insert(name, rng.derive(name).normal_array::<f32>(shape, std));
        };
        norm("idenc.fc1.w", vec![d_in, h], 1.0 / (d_in as f64).sqrt());
        norm("idenc.fc2.w", vec![h, h], 1.0 / (h as f64).sqrt());
        norm("idenc.fc3.w", vec![h, h], 1.0 / (h as f64).sqrt());
        norm("idenc.embed.w", vec![h, m], 1.0 / (h as f64).sqrt());
        norm("idenc.head.w", vec![m, synthdata::IDENTITY_DIMS], 1.0 / (m as f64).sqrt());
        params.insert("idenc.fc1.b", Array::zeros(vec![h]));
        params.insert("idenc.fc2.b", Array::zeros(vec![h]));
        params.insert("idenc.fc3.b", Array::zeros(vec![h]));
        params.insert("idenc.embed.b", Array::zeros(vec![m]));
        params.insert(
            "idenc.head.b",
            Array::filled(vec![synthdata::IDENTITY_DIMS], 0.5),
        );
        IdEncoder {
            cfg: cfg.clone(),
            params,
        }
    }

    fn forward_batch(&self, inputs: &Array<f32>) -> (Array<f32>, Array<f32>) {
        let p = &self.params;
        let lin = |x: &Array<f32>, w: &str, b: &str| {
            let mut y = x.matmul(p.get(w).expect("param exists")).expect("shapes");
            let bias = p.get(b).expect("param exists");
            for i in 0..y.rows() {
                for j in 0..y.cols() {
                    let v = y.at2(i, j) + bias.data()[j];
                    y.set2(i, j, v);
                }
            }
            y
        };
        let h1 = gelu(&lin(inputs, "idenc.fc1.w", "idenc.fc1.b"));
        let h2 = gelu(&lin(&h1, "idenc.fc2.w", "idenc.fc2.b"));
        let h3 = gelu(&lin(&h2, "idenc.fc3.w", "idenc.fc3.b"));
        let embed = lin(&h3, "idenc.embed.w", "idenc.embed.b");
        let attrs = lin(&embed, "idenc.head.w", "idenc.head.b");
        (embed, attrs)
    }

    /// Unit-normalized identity embedding of a crop.
    pub fn embed(&self, crop: &FaceCrop) -> Result<Array<f32>> {
        self.check_crop(crop)?;
        let (e, _) = self.forward_batch(&standardize(&crop.image));
        let flat = e.reshape(vec![self.cfg.embed_dim])?;
        let norm = flat.norm();
        Ok(if norm > 0.0 {
            flat.scale(1.0 / norm)
        } else {
            flat
        })
    }

    /// Regressed identity parameters of a crop.
    pub fn regress(&self, crop: &FaceCrop) -> Result<Array<f32>> {
        self.check_crop(crop)?;
        let (_, a) = self.forward_batch(&standardize(&crop.image));
        a.reshape(vec![synthdata::IDENTITY_DIMS])
    }

    fn check_crop(&self, crop: &FaceCrop) -> Result<()> {
        if crop.image.width != self.cfg.crop_size || crop.image.height != self.cfg.crop_size {
            return Err(Error::InvalidDimensions {
                op: "IdEncoder",
                message: format!("expected {0}x{0} crop", self.cfg.crop_size),
            });
        }
        Ok(())
    }

    pub fn hash(&self) -> [u8; 32] {
        self.params.hash_all()
    }

    pub fn to_tensors(&self) -> Archive {
        crate::archive::params_to_tensors(&self.params)
    }

    pub fn from_tensors(cfg: &EncoderConfig, tensors: &Archive) -> Result<Self> {
        let params = crate::archive::tensors_to_params(tensors, |k| k.starts_with("idenc."))?;
        if params.is_empty() {
            return Err(Error::MissingArtifact("idenc.* keys".into()));
        }
        Ok(IdEncoder {
            cfg: cfg.clone(),
            params,
        })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct IdTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub holdout_fraction: f64,
    pub seed: u64,
}

impl Default for IdTrainConfig {
    fn default() -> Self {
        IdTrainConfig {
            steps: 5000,
            batch_size: 32,
            learning_rate: 1e-3,
            holdout_fraction: 0.1,
            seed: 0x1dec,
        }
    }
}

/// Training outcome: the frozen encoder plus its validation measurements.
#[derive(Debug, Clone)]
pub struct IdTrainReport {
    pub validation_r2: f64,
    pub per_dim_r2: Vec<f64>,
    pub triple_accuracy: f64,
    pub final_loss: f64,
}

fn crop_variant(
    cfg: &EncoderConfig,
    sample: &crate::synthdata::FaceSample,
    rng: &mut RngStream,
) -> Result<FaceCrop> {
    if rng.uniform() < 0.5 {
        crop_face(cfg, &sample.image, sample.bbox, cfg.crop_margin)
    } else {
        let img = synthdata::augment_crop(&sample.image, sample.bbox, rng)?;
        Ok(full_frame(cfg, &img))
    }
}

/// Train the identity encoder on rendered crops against ground-truth
/// identity parameters, validating on held-out identities. The returned
/// encoder is frozen from here on.
pub fn train_id_encoder(
    dataset: &Dataset,
    cfg: &EncoderConfig,
    train_cfg: &IdTrainConfig,
) -> Result<(IdEncoder, IdTrainReport)> {
    let n_ids = dataset.n_identities.max(1);
    let per = dataset.per_identity.max(1);
    let holdout_ids = ((n_ids as f64 * train_cfg.holdout_fraction).ceil() as usize).max(1);
    let train_ids = n_ids.saturating_sub(holdout_ids);
    if train_ids == 0 || dataset.len() < 2 {
        return Err(Error::InvalidConfig(
            "dataset too small to train the id encoder".into(),
        ));
    }
    let sample_at = |id: usize, scene: usize| &dataset.samples[id * per + scene];

    let mut enc = IdEncoder::init(cfg, &RngStream::named(train_cfg.seed, "idenc-init"));
    let root = RngStream::named(train_cfg.seed, "idenc-train");

    // Adam with decoupled weight decay over the flat parameter map.
    let (b1, b2, eps, wd) = (0.9f64, 0.999f64, 1e-8f64, 1e-4f64);
    let mut moments: std::collections::BTreeMap<String, (Array<f32>, Array<f32>)> = enc
        .params
        .iter()
        .map(|(k, v)| {
            (
                k.to_string(),
                (Array::zeros(v.shape().to_vec()), Array::zeros(v.shape().to_vec())),
            )
        })
        .collect();

    let mut final_loss = f64::NAN;
    for step in 0..train_cfg.steps {
        let mut rng = root.derive_u64(step as u64);
        let mut inputs = Vec::with_capacity(train_cfg.batch_size * cfg.crop_pixels());
        let mut targets = Vec::with_capacity(train_cfg.batch_size * synthdata::IDENTITY_DIMS);
        for _ in 0..train_cfg.batch_size {
            let id = rng.below(train_ids);
            let scene = rng.below(per);
            let s = sample_at(id, scene);
            let crop = crop_variant(cfg, s, &mut rng)?;
            inputs.extend_from_slice(standardize(&crop.image).data());
            targets.extend_from_slice(&s.identity.to_vec());
        }
        let x = Array::from_vec(vec![train_cfg.batch_size, cfg.crop_pixels()], inputs)?;
        let y = Array::from_vec(vec![train_cfg.batch_size, synthdata::IDENTITY_DIMS], targets)?;

        let mut g: Graph<f32> = Graph::new();
        let binding = Binding::bind(&mut g, &enc.params, |_| true);
        let xn = g.constant(x);
        let yn = g.constant(y);
        let h1 = g.linear(xn, binding.node("idenc.fc1.w"), binding.node("idenc.fc1.b"))?;
        let h1 = g.gelu(h1);
        let h2 = g.linear(h1, binding.node("idenc.fc2.w"), binding.node("idenc.fc2.b"))?;
        let h2 = g.gelu(h2);
        let h3 = g.linear(h2, binding.node("idenc.fc3.w"), binding.node("idenc.fc3.b"))?;
        let h3 = g.gelu(h3);
        let e = g.linear(h3, binding.node("idenc.embed.w"), binding.node("idenc.embed.b"))?;
        let a = g.linear(e, binding.node("idenc.head.w"), binding.node("idenc.head.b"))?;
        let loss = g.mse(a, yn)?;
        final_loss = g.scalar_value(loss) as f64;
        if !final_loss.is_finite() {
            return Err(Error::Diverged {
                step: step as u64,
                loss: final_loss,
            });
        }
        let mut grads = g.backward(loss);
        let grad_map = binding.collect_grads(&g, &mut grads);

        // Cosine decay to a tenth of the initial rate.
        let progress = step as f64 / train_cfg.steps as f64;
        let lr = train_cfg.learning_rate
            * (0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()));
        let t = (step + 1) as f64;
        let bc1 = 1.0 - b1.powf(t);
        let bc2 = 1.0 - b2.powf(t);
        for (name, grad) in &grad_map {
            let (m, v) = moments.get_mut(name).expect("moment exists");
            let p = enc.params.get_mut(name)?;
            for i in 0..p.len() {
                let gi = grad.data()[i] as f64;
                let mi = b1 * m.data()[i] as f64 + (1.0 - b1) * gi;
                let vi = b2 * v.data()[i] as f64 + (1.0 - b2) * gi * gi;
                m.data_mut()[i] = mi as f32;
                v.data_mut()[i] = vi as f32;
                let update = (mi / bc1) / ((vi / bc2).sqrt() + eps);
                let pv = p.data()[i] as f64;
                p.data_mut()[i] = (pv - lr * (update + wd * pv)) as f32;
            }
        }
    }

    // Validation on held-out identities.
    let mut preds: Vec<[f32; synthdata::IDENTITY_DIMS]> = Vec::new();
    let mut truths: Vec<[f32; synthdata::IDENTITY_DIMS]> = Vec::new();
    let mut embeds: Vec<(usize, Array<f32>)> = Vec::new();
    for id in train_ids..n_ids {
        for scene in 0..per {
            let s = sample_at(id, scene);
            let crop = crop_face(cfg, &s.image, s.bbox, cfg.crop_margin)?;
            let pred = enc.regress(&crop)?;
            preds.push(pred.data().try_into().expect("dims fixed"));
            truths.push(s.identity.to_vec());
            embeds.push((id, enc.embed(&crop)?));
        }
    }
    let per_dim_r2 = r_squared(&preds, &truths);
    let validation_r2 = per_dim_r2.iter().sum::<f64>() / per_dim_r2.len() as f64;
    let triple_accuracy = triple_accuracy(&embeds, &RngStream::named(train_cfg.seed, "triples"));

    let report = IdTrainReport {
        validation_r2,
        per_dim_r2,
        triple_accuracy,
        final_loss,
    };
    Ok((enc, report))
}

fn r_squared(
    preds: &[[f32; synthdata::IDENTITY_DIMS]],
    truths: &[[f32; synthdata::IDENTITY_DIMS]],
) -> Vec<f64> {
    let n = truths.len() as f64;
    (0..synthdata::IDENTITY_DIMS)
        .map(|d| {
            let mean = truths.iter().map(|t| t[d] as f64).sum::<f64>() / n;
            let ss_tot: f64 = truths.iter().map(|t| (t[d] as f64 - mean).powi(2)).sum();
            let ss_res: f64 = truths
                .iter()
                .zip(preds)
                .map(|(t, p)| (t[d] as f64 - p[d] as f64).powi(2))
                .sum();
            if ss_tot == 0.0 {
                0.0
            } else {
                1.0 - ss_res / ss_tot
            }
        })
        .collect()
}

/// Fraction of (anchor, same-identity, other-identity) triples where the
/// same-identity cosine exceeds the cross-identity cosine.
pub fn triple_accuracy(embeds: &[(usize, Array<f32>)], rng: &RngStream) -> f64 {
    let mut rng = rng.clone();
    let mut hits = 0usize;
    let mut total = 0usize;
    for _ in 0..2000 {
        let a = rng.below(embeds.len());
        let (ida, ea) = &embeds[a];
        let same: Vec<usize> = (0..embeds.len())
            .filter(|&i| embeds[i].0 == *ida && i != a)
            .collect();
        let diff: Vec<usize> = (0..embeds.len()).filter(|&i| embeds[i].0 != *ida).collect();
        if same.is_empty() || diff.is_empty() {
            continue;
        }
        let s = same[rng.below(same.len())];
        let d = diff[rng.below(diff.len())];
        let cs = cosine(ea, &embeds[s].1).unwrap_or(0.0);
        let cd = cosine(ea, &embeds[d].1).unwrap_or(0.0);
        if cs > cd {
            hits += 1;
        }
        total += 1;
    }
    if total == 0 {
        0.0
    } else {
        hits as f64 / total as f64
    }
}

/// The full frozen perception stack used by the hypernetworks and metrics.
#[derive(Clone, Debug)]
pub struct EncoderStack {
    pub cfg: EncoderConfig,
    pub features: FeatureEncoder,
    pub id_encoder: IdEncoder,
}

impl EncoderStack {
    pub fn new(cfg: &EncoderConfig, id_encoder: IdEncoder) -> Self {
        EncoderStack {
            cfg: cfg.clone(),
            features: FeatureEncoder::new(cfg),
            id_encoder,
        }
    }

    pub fn crop(&self, image: &Image, bbox: BBox) -> Result<FaceCrop> {
        crop_face(&self.cfg, image, bbox, self.cfg.crop_margin)
    }

    pub fn blur(&self, crop: &FaceCrop) -> Result<FaceCrop> {
        blur_face(crop, self.cfg.blur_radius)
    }
}

/// Mean absolute 4-neighbor Laplacian: the high-frequency energy oracle.
pub fn laplacian_energy(image: &Image) -> f64 {
    let mut acc = 0.0f64;
    let mut count = 0usize;
    for y in 1..image.height - 1 {
        for x in 1..image.width - 1 {
            for c in 0..3 {
                let center = image.get(x, y)[c] as f64;
                let lap = image.get(x - 1, y)[c] as f64
                    + image.get(x + 1, y)[c] as f64
                    + image.get(x, y - 1)[c] as f64
                    + image.get(x, y + 1)[c] as f64
                    - 4.0 * center;
                acc += lap.abs();
                count += 1;
            }
        }
    }
    acc / count as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{gen_identity, gen_scene, render};

    fn cfg() -> EncoderConfig {
        EncoderConfig::default()
    }

    fn sample_image(seed: u64) -> (Image, BBox) {
        let mut rng = RngStream::named(seed, "enc-test");
        let id = gen_identity(&mut rng);
        let scene = gen_scene(&mut rng);
        render(&id, &scene)
    }

    #[test]
    fn crop_face_full_image_is_resize() {
        let (img, _) = sample_image(1);
        let crop = crop_face(&cfg(), &img, BBox::full(img.width, img.height), 0.0).unwrap();
        assert_eq!(crop.image, img.resize_bilinear(32, 32));
        assert_eq!(crop.source_bbox, BBox::full(img.width, img.height));
    }

    #[test]
    fn crop_face_huge_margin_clips_to_image() {
        let (img, bbox) = sample_image(2);
        let crop = crop_face(&cfg(), &img, bbox, 100.0).unwrap();
        assert_eq!(crop.source_bbox, BBox::full(img.width, img.height));
    }

    #[test]
    fn crop_face_covers_the_face_region() {
        // The crop rectangle always contains the generator bbox.
        for seed in 0..20 {
            let (img, bbox) = sample_image(seed);
            let crop = crop_face(&cfg(), &img, bbox, 0.15).unwrap();
            let r = crop.source_bbox;
            assert!(r.x <= bbox.x && r.y <= bbox.y);
            assert!(r.x + r.w >= bbox.x + bbox.w);
            assert!(r.y + r.h >= bbox.y + bbox.h);
        }
    }

    #[test]
    fn crop_face_rejects_empty_bbox() {
        let (img, _) = sample_image(3);
        let empty = BBox { x: 1, y: 1, w: 0, h: 3 };
        assert!(crop_face(&cfg(), &img, empty, 0.0).is_err());
    }

    #[test]
    fn blur_constant_image_unchanged() {
        let mut img = Image::new(32, 32);
        for p in img.pixels.iter_mut() {
            *p = 120;
        }
        let crop = full_frame(&cfg(), &img);
        let blurred = blur_face(&crop, 4).unwrap();
        assert_eq!(blurred.image, img);
    }

    #[test]
    fn blur_large_radius_is_near_uniform() {
        let (img, _) = sample_image(4);
        let crop = full_frame(&cfg(), &img);
        let blurred = blur_face(&crop, 32).unwrap();
        for c in 0..3 {
            let vals: Vec<u8> = blurred
                .image
                .pixels
                .iter()
                .skip(c)
                .step_by(3)
                .copied()
                .collect();
            let max = *vals.iter().max().unwrap() as f64;
            let min = *vals.iter().min().unwrap() as f64;
            assert!(max - min <= 0.05 * 255.0, "channel {c}: {min}..{max}");
        }
    }

    #[test]
    fn blur_reduces_laplacian_energy_and_preserves_sum() {
        for seed in 0..10 {
            let (img, _) = sample_image(seed + 100);
            let crop = full_frame(&cfg(), &img);
            let blurred = blur_face(&crop, 4).unwrap();
            assert!(laplacian_energy(&blurred.image) < laplacian_energy(&crop.image));

            let sum_in: f64 = crop.image.pixels.iter().map(|&p| p as f64).sum();
            let sum_out: f64 = blurred.image.pixels.iter().map(|&p| p as f64).sum();
            assert!((sum_out - sum_in).abs() / sum_in < 0.01, "{sum_in} vs {sum_out}");
        }
    }

    #[test]
    fn feature_tokens_deterministic_and_local() {
        let enc = FeatureEncoder::new(&cfg());
        let (img, _) = sample_image(5);
        let crop = full_frame(&cfg(), &img);
        assert_eq!(enc.tokens(&crop).unwrap(), enc.tokens(&crop).unwrap());

        // Change one pixel inside patch (1, 1): only that token row moves.
        let mut other = img.clone();
        let before = other.get(10, 10);
        other.set(10, 10, [before[0].wrapping_add(40), before[1], before[2]]);
        let t0 = enc.tokens(&crop).unwrap();
        let t1 = enc.tokens(&full_frame(&cfg(), &other)).unwrap();
        let changed_patch = (10 / 8) * (32 / 8) + (10 / 8);
        for row in 0..t0.rows() {
            let same = t0.row(row) == t1.row(row);
            assert_eq!(same, row != changed_patch, "row {row}");
        }
    }

    #[test]
    fn feature_tokens_match_scalar_projection_oracle() {
        let c = cfg();
        let enc = FeatureEncoder::new(&c);
        let (img, _) = sample_image(6);
        let crop = full_frame(&c, &img);
        let tokens = enc.tokens(&crop).unwrap();
        let patches = crate::denoiser::patchify(&crop.image.to_unit(), c.patch_size).unwrap();
        for i in 0..tokens.rows() {
            for j in 0..tokens.cols() {
                let mut acc = 0.0f32;
                for k in 0..c.patch_dim() {
                    acc += patches.at2(i, k) * enc.weights.at2(k, j);
                }
                assert!((tokens.at2(i, j) - acc).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn pooled_feature_cosine_properties() {
        let enc = FeatureEncoder::new(&cfg());
        let (img, _) = sample_image(7);
        let a = enc.pooled(&img).unwrap();
        assert!((cosine(&a, &a).unwrap() - 1.0).abs() < 1e-6);

        // Channel-permuted copy differs.
        let mut permuted = img.clone();
        for y in 0..img.height {
            for x in 0..img.width {
                let [r, g, b] = img.get(x, y);
                permuted.set(x, y, [g, b, r]);
            }
        }
        let b = enc.pooled(&permuted).unwrap();
        assert!(cosine(&a, &b).unwrap() < 1.0 - 1e-4);
        assert_eq!(cosine(&a, &b).unwrap(), cosine(&b, &a).unwrap());
    }

    #[test]
    fn id_embedding_is_unit_norm_and_deterministic() {
        let c = cfg();
        let enc = IdEncoder::init(&c, &RngStream::named(8, "idenc"));
        for seed in 0..10 {
            let (img, bbox) = sample_image(seed + 20);
            let crop = crop_face(&c, &img, bbox, 0.15).unwrap();
            let e1 = enc.embed(&crop).unwrap();
            let e2 = enc.embed(&crop).unwrap();
            assert_eq!(e1, e2);
            assert!((e1.norm() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn untrained_encoder_triples_are_near_chance() {
        let c = cfg();
        let ds = Dataset::generate(30, 4, 31).unwrap();
        let enc = IdEncoder::init(&c, &RngStream::named(9, "idenc-chance"));
        let mut embeds = Vec::new();
        for (i, s) in ds.samples.iter().enumerate() {
            let crop = crop_face(&c, &s.image, s.bbox, 0.15).unwrap();
            embeds.push((i / 4, enc.embed(&crop).unwrap()));
        }
        let acc = triple_accuracy(&embeds, &RngStream::named(10, "t"));
        assert!((acc - 0.5).abs() < 0.2, "near-chance expected, got {acc}");
    }

    #[test]
    fn trained_encoder_beats_untrained_on_triples() {
        let c = cfg();
        let ds = Dataset::generate(60, 3, 32).unwrap();
        let tc = IdTrainConfig {
            steps: 250,
            ..IdTrainConfig::default()
        };
        let (_, report) = train_id_encoder(&ds, &c, &tc).unwrap();
        assert!(
            report.triple_accuracy > 0.7,
            "triple accuracy {}",
            report.triple_accuracy
        );
        assert!(report.final_loss.is_finite());
    }

    #[test]
    fn brightness_shift_keeps_embedding() {
        let c = cfg();
        let enc = IdEncoder::init(&c, &RngStream::named(11, "idenc-bright"));
        let mut rng = RngStream::named(12, "bright");
        let id = gen_identity(&mut rng);
        let mut scene = gen_scene(&mut rng);
        scene.brightness = 0.92;
        let (img_lo, bbox) = render(&id, &scene);
        scene.brightness = 1.08;
        let (img_hi, _) = render(&id, &scene);
        let e_lo = enc.embed(&crop_face(&c, &img_lo, bbox, 0.15).unwrap()).unwrap();
        let e_hi = enc.embed(&crop_face(&c, &img_hi, bbox, 0.15).unwrap()).unwrap();
        assert!(cosine(&e_lo, &e_hi).unwrap() >= 0.99);
    }

    #[test]
    fn id_encoder_tensor_round_trip() {
        let c = cfg();
        let enc = IdEncoder::init(&c, &RngStream::named(13, "idenc-ser"));
        let back = IdEncoder::from_tensors(&c, &enc.to_tensors()).unwrap();
        assert_eq!(enc.hash(), back.hash());
    }
}
