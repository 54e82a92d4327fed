//! Procedural face-sprite dataset with ground-truth identity parameters.
//!
//! Every sample is rendered as a pure function of an identity vector and a
//! scene description, so identity similarity metrics downstream have an exact
//! reference. Captions are built from a tiny fixed vocabulary; three reserved
//! trigger tokens mark identity-reconstruction prompts and never appear in
//! plain scene captions.

use serde::{Deserialize, Serialize};

use crate::archive::{self, Archive, NamedTensor, TensorData};
use crate::error::{Error, Result};
use crate::img::{BBox, Image};
use crate::numerics::RngStream;

pub const PAD_TOKEN: u32 = 0;
pub const TRIGGER_TOKENS: [u32; 3] = [1, 2, 3];
pub const VOCAB_SIZE: usize = 20;
pub const MAX_CAPTION_LEN: usize = 12;

pub const IDENTITY_DIMS: usize = 8;
pub const SCENE_DIMS: usize = 6;
pub const IMAGE_SIZE: usize = 32;
/// Rows at and below this line may contain clothing.
pub const CLOTHING_TOP: usize = 24;

pub const N_BACKGROUNDS: usize = 5;
pub const N_CLOTHING: usize = 4;

/// Background palette, unit RGB. Kept below 0.87 so the brightness range
/// never clips.
pub const BG_COLORS: [[f32; 3]; N_BACKGROUNDS] = [
    [0.80, 0.10, 0.10], // red
    [0.10, 0.70, 0.15], // green
    [0.10, 0.20, 0.80], // blue
    [0.85, 0.80, 0.10], // yellow
    [0.80, 0.12, 0.78], // magenta
];

pub const CLOTH_COLORS: [[f32; 3]; N_CLOTHING] = [
    [0.85, 0.85, 0.85], // white
    [0.05, 0.05, 0.05], // black
    [0.85, 0.45, 0.05], // orange
    [0.05, 0.75, 0.80], // cyan
];

const WORDS: [&str; VOCAB_SIZE] = [
    "<pad>", "qzv", "xkr", "vbq", // trigger triplet
    "portrait", "of", "a", "person", "on", // template
    "red", "green", "blue", "yellow", "magenta", // backgrounds
    "background", "wearing", // template
    "white", "black", "orange", "cyan", // clothing
];

const BG_WORD_BASE: u32 = 9;
const CLOTH_WORD_BASE: u32 = 16;

pub fn word(token: u32) -> &'static str {
    WORDS[token as usize]
}

/// Continuous identity vector; rendering is fully determined by it plus the
/// scene.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentityParams {
    pub face_hue: f32,
    pub face_aspect: f32,
    pub eye_spacing: f32,
    pub eye_size: f32,
    pub mouth_width: f32,
    pub nose_length: f32,
    pub brow_angle: f32,
    pub skin_tone: f32,
}

impl IdentityParams {
    pub fn to_vec(self) -> [f32; IDENTITY_DIMS] {
        [
            self.face_hue,
            self.face_aspect,
            self.eye_spacing,
            self.eye_size,
            self.mouth_width,
            self.nose_length,
            self.brow_angle,
            self.skin_tone,
        ]
    }

    pub fn from_vec(v: &[f32]) -> Result<Self> {
        if v.len() != IDENTITY_DIMS {
            return Err(Error::InvalidDimensions {
                op: "IdentityParams::from_vec",
                message: format!("expected {IDENTITY_DIMS} dims, got {}", v.len()),
            });
        }
        Ok(IdentityParams {
            face_hue: v[0],
            face_aspect: v[1],
            eye_spacing: v[2],
            eye_size: v[3],
            mouth_width: v[4],
            nose_length: v[5],
            brow_angle: v[6],
            skin_tone: v[7],
        })
    }

    /// Replace one dimension, clamped to `[0, 1]`.
    pub fn with_dim(mut self, dim: usize, value: f32) -> Self {
        let mut v = self.to_vec();
        v[dim] = value.clamp(0.0, 1.0);
        self = IdentityParams::from_vec(&v).expect("dims fixed");
        self
    }
}

/// Uniform draws in `[0, 1]` per dimension.
pub fn gen_identity(rng: &mut RngStream) -> IdentityParams {
    let v: Vec<f32> = (0..IDENTITY_DIMS).map(|_| rng.uniform() as f32).collect();
    IdentityParams::from_vec(&v).expect("dims fixed")
}

/// Identity-irrelevant content: background, clothing, framing, lighting.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneParams {
    pub background: usize,
    pub clothing: usize,
    pub offset_x: f32,
    pub offset_y: f32,
    pub scale: f32,
    pub brightness: f32,
}

impl SceneParams {
    pub fn to_vec(self) -> [f32; SCENE_DIMS] {
        [
            self.background as f32,
            self.clothing as f32,
            self.offset_x,
            self.offset_y,
            self.scale,
            self.brightness,
        ]
    }

    pub fn from_vec(v: &[f32]) -> Result<Self> {
        if v.len() != SCENE_DIMS {
            return Err(Error::InvalidDimensions {
                op: "SceneParams::from_vec",
                message: format!("expected {SCENE_DIMS} dims, got {}", v.len()),
            });
        }
        Ok(SceneParams {
            background: v[0] as usize,
            clothing: v[1] as usize,
            offset_x: v[2],
            offset_y: v[3],
            scale: v[4],
            brightness: v[5],
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.background >= N_BACKGROUNDS || self.clothing >= N_CLOTHING {
            return Err(Error::InvalidConfig(format!(
                "scene classes out of range: bg {} cloth {}",
                self.background, self.clothing
            )));
        }
        Ok(())
    }
}

pub fn gen_scene(rng: &mut RngStream) -> SceneParams {
    SceneParams {
        background: rng.below(N_BACKGROUNDS),
        clothing: rng.below(N_CLOTHING),
        offset_x: rng.uniform_in(-1.0, 1.0) as f32,
        offset_y: rng.uniform_in(-1.0, 1.0) as f32,
        scale: rng.uniform() as f32,
        brightness: rng.uniform_in(0.9, 1.1) as f32,
    }
}

/// Neutral scene used for reference renders.
pub fn reference_scene(background: usize, clothing: usize) -> SceneParams {
    SceneParams {
        background,
        clothing,
        offset_x: 0.0,
        offset_y: 0.0,
        scale: 0.5,
        brightness: 1.0,
    }
}

fn face_color(id: &IdentityParams) -> [f32; 3] {
    let light = [0.95, 0.84, 0.70];
    let dark = [0.45, 0.30, 0.18];
    let t = id.skin_tone;
    let mut base = [0.0f32; 3];
    for c in 0..3 {
        base[c] = light[c] + (dark[c] - light[c]) * t;
    }
    let tau = std::f32::consts::TAU;
    let h = id.face_hue;
    let tint = [
        (h * tau).sin(),
        (h * tau + 2.094).sin(),
        (h * tau + 4.189).sin(),
    ];
    let mut out = [0.0f32; 3];
    for c in 0..3 {
        out[c] = (base[c] * (1.0 + 0.35 * tint[c])).clamp(0.02, 0.87);
    }
    out
}

fn to_rgb(c: [f32; 3], brightness: f32) -> [u8; 3] {
    let mut out = [0u8; 3];
    for i in 0..3 {
        out[i] = ((c[i] * brightness).clamp(0.0, 1.0) * 255.0).round() as u8;
    }
    out
}

/// Deterministic sprite render. Returns the image and the face bounding box.
pub fn render(id: &IdentityParams, scene: &SceneParams) -> (Image, BBox) {
    let size = IMAGE_SIZE;
    let mut img = Image::new(size, size);
    let b = scene.brightness;

    let bg = BG_COLORS[scene.background];
    let cloth = CLOTH_COLORS[scene.clothing];
    for y in 0..size {
        for x in 0..size {
            let is_cloth = y >= CLOTHING_TOP + 3 || (y >= CLOTHING_TOP && x >= 8 && x < 24);
            img.set(x, y, to_rgb(if is_cloth { cloth } else { bg }, b));
        }
    }

    // Face ellipse.
    let cx = 15.5 + scene.offset_x * 3.0;
    let cy = 12.5 + scene.offset_y * 2.0;
    let r = 6.0 + scene.scale * 3.0;
    let rx = r * (0.75 + 0.50 * id.face_aspect);
    let ry = r * (1.30 - 0.45 * id.face_aspect);
    let skin = face_color(id);
    // Facial features draw only inside the ellipse, so the bbox always
    // contains every identity-dependent pixel.
    let set_face = |img: &mut Image, x: i64, y: i64, c: [f32; 3]| {
        if x >= 0 && y >= 0 && (x as usize) < size && (y as usize) < size {
            let dx = (x as f32 - cx) / rx;
            let dy = (y as f32 - cy) / ry;
            if dx * dx + dy * dy <= 1.0 {
                img.set(x as usize, y as usize, to_rgb(c, b));
            }
        }
    };
    for y in 0..size {
        for x in 0..size {
            let dx = (x as f32 - cx) / rx;
            let dy = (y as f32 - cy) / ry;
            if dx * dx + dy * dy <= 1.0 {
                img.set(x, y, to_rgb(skin, b));
            }
        }
    }

    let dark = [0.06, 0.06, 0.10];
    // Eyes.
    let eye_dx = rx * (0.25 + 0.35 * id.eye_spacing);
    let eye_y = cy - ry * 0.28;
    let er = 0.8 + id.eye_size * 1.8;
    for side in [-1.0f32, 1.0] {
        let ex = cx + side * eye_dx;
        let x0 = (ex - er).floor() as i64;
        let x1 = (ex + er).ceil() as i64;
        let y0 = (eye_y - er * 0.8).floor() as i64;
        let y1 = (eye_y + er * 0.8).ceil() as i64;
        for y in y0..=y1 {
            for x in x0..=x1 {
                let ddx = (x as f32 - ex) / er.max(0.5);
                let ddy = (y as f32 - eye_y) / (er * 0.8).max(0.5);
                if ddx * ddx + ddy * ddy <= 1.0 {
                    set_face(&mut img, x, y, dark);
                }
            }
        }
        // Brow: thick stroke above the eye, slope set by brow_angle.
        let slope = (id.brow_angle - 0.5) * 2.2 * side;
        let brow_y = (eye_y - er * 0.8 - 2.0).max(cy - ry + 1.0);
        for step in -3i64..=3 {
            let x = (ex + step as f32).round() as i64;
            let y = (brow_y + slope * step as f32).round() as i64;
            set_face(&mut img, x, y, dark);
            set_face(&mut img, x, y - 1, dark);
        }
    }

    // Nose: a downward wedge; both its length and its base width grow with
    // the attribute so the pixel mass is a strong monotone signal.
    let nose_len = 1.0 + id.nose_length * ry * 0.42;
    let nose_color = [skin[0] * 0.35, skin[1] * 0.35, skin[2] * 0.35];
    let steps = nose_len.round() as i64;
    for step in 0..=steps {
        let y = (cy + step as f32).round() as i64;
        let half_w = 0.5 + (1.8 * id.nose_length) * (step as f32 / steps.max(1) as f32);
        for dx in (-half_w).floor() as i64..=(half_w).ceil() as i64 {
            if (dx as f32).abs() <= half_w {
                set_face(&mut img, cx.round() as i64 + dx, y, nose_color);
            }
        }
    }

    // Mouth: horizontal bar, clear of the longest nose.
    let mouth_y = cy + ry * 0.64;
    let mw = rx * (0.12 + 0.55 * id.mouth_width);
    let mouth_color = [0.55, 0.10, 0.10];
    for x in (cx - mw).floor() as i64..=(cx + mw).ceil() as i64 {
        set_face(&mut img, x, mouth_y.round() as i64, mouth_color);
        set_face(&mut img, x, mouth_y.round() as i64 + 1, mouth_color);
    }

    // Face bounds, clipped to the canvas.
    let x0 = ((cx - rx).floor().max(0.0)) as usize;
    let y0 = ((cy - ry).floor().max(0.0)) as usize;
    let x1 = ((cx + rx).ceil() as usize + 1).min(size);
    let y1 = ((cy + ry).ceil() as usize + 1).min(size);
    let bbox = BBox {
        x: x0,
        y: y0,
        w: x1 - x0,
        h: y1 - y0,
    };
    (img, bbox)
}

/// Template caption tokens for a scene; trigger tokens prefixed iff requested.
pub fn caption(scene: &SceneParams, with_trigger: bool) -> Vec<u32> {
    let mut out = Vec::with_capacity(MAX_CAPTION_LEN);
    if with_trigger {
        out.extend_from_slice(&TRIGGER_TOKENS);
    }
    out.extend_from_slice(&[4, 5, 6, 7, 8]); // "portrait of a person on"
    out.push(BG_WORD_BASE + scene.background as u32);
    out.push(14); // "background"
    out.push(15); // "wearing"
    out.push(CLOTH_WORD_BASE + scene.clothing as u32);
    out
}

/// Pad with `PAD_TOKEN` to a fixed model length.
pub fn pad_caption(tokens: &[u32], len: usize) -> Vec<u32> {
    let mut out = tokens.to_vec();
    out.truncate(len);
    out.resize(len, PAD_TOKEN);
    out
}

/// Recover `(background, clothing)` classes from caption tokens.
pub fn parse_caption(tokens: &[u32]) -> Option<(usize, usize)> {
    let mut bg = None;
    let mut cloth = None;
    for &t in tokens {
        if (BG_WORD_BASE..BG_WORD_BASE + N_BACKGROUNDS as u32).contains(&t) {
            bg = Some((t - BG_WORD_BASE) as usize);
        }
        if (CLOTH_WORD_BASE..CLOTH_WORD_BASE + N_CLOTHING as u32).contains(&t) {
            cloth = Some((t - CLOTH_WORD_BASE) as usize);
        }
    }
    Some((bg?, cloth?))
}

pub fn caption_text(tokens: &[u32]) -> String {
    tokens
        .iter()
        .filter(|&&t| t != PAD_TOKEN)
        .map(|&t| word(t))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Random crop rectangle that always contains the full bbox.
pub fn pick_crop_rect(rng: &mut RngStream, bbox: BBox, width: usize, height: usize) -> BBox {
    let x0 = rng.below(bbox.x + 1);
    let y0 = rng.below(bbox.y + 1);
    let x1 = bbox.x + bbox.w + rng.below(width - (bbox.x + bbox.w) + 1);
    let y1 = bbox.y + bbox.h + rng.below(height - (bbox.y + bbox.h) + 1);
    BBox {
        x: x0,
        y: y0,
        w: x1 - x0,
        h: y1 - y0,
    }
}

/// Random crop around the face, resized back to the training resolution.
pub fn augment_crop(image: &Image, bbox: BBox, rng: &mut RngStream) -> Result<Image> {
    if bbox.is_empty() || bbox.x + bbox.w > image.width || bbox.y + bbox.h > image.height {
        return Err(Error::InvalidDimensions {
            op: "augment_crop",
            message: format!("bbox {bbox:?} outside {}x{}", image.width, image.height),
        });
    }
    let rect = pick_crop_rect(rng, bbox, image.width, image.height);
    Ok(image.crop(rect)?.resize_bilinear(image.width, image.height))
}

/// Classify the background of an image by nearest mean color over the
/// region above the clothing band and outside the face bbox (border ring
/// when no bbox is known).
pub fn classify_background(image: &Image, face: Option<BBox>) -> usize {
    let mut sum = [0.0f64; 3];
    let mut count = 0usize;
    for y in 0..CLOTHING_TOP.min(image.height) {
        for x in 0..image.width {
            let inside = match face {
                Some(b) => b.contains(x, y),
                // Without a bbox, trust only the outer ring.
                None => x >= 4 && x < image.width - 4 && y >= 4,
            };
            if inside {
                continue;
            }
            let p = image.get(x, y);
            for c in 0..3 {
                sum[c] += p[c] as f64 / 255.0;
            }
            count += 1;
        }
    }
    if count == 0 {
        return 0;
    }
    let mean = [sum[0] / count as f64, sum[1] / count as f64, sum[2] / count as f64];
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, c) in BG_COLORS.iter().enumerate() {
        let d: f64 = (0..3).map(|k| (mean[k] - c[k] as f64).powi(2)).sum();
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

/// Per-sample metadata in the shape the filtering pipeline expects.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub width: u32,
    pub height: u32,
    pub aesthetic_score: f32,
    pub face_ratio: f32,
    pub n_faces: u32,
    pub caption_text: String,
}

/// Metadata as parsed from external sources; any field may be missing.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct RawMeta {
    pub width: Option<u32>,
    pub height: Option<u32>,
    pub aesthetic_score: Option<f32>,
    pub face_ratio: Option<f32>,
    pub n_faces: Option<u32>,
    pub caption_text: Option<String>,
}

impl RawMeta {
    pub fn validate(&self) -> Result<SampleMeta> {
        let field = |name: &str| Error::MissingMetadata {
            field: name.to_string(),
        };
        Ok(SampleMeta {
            width: self.width.ok_or_else(|| field("width"))?,
            height: self.height.ok_or_else(|| field("height"))?,
            aesthetic_score: self.aesthetic_score.ok_or_else(|| field("aesthetic_score"))?,
            face_ratio: self.face_ratio.ok_or_else(|| field("face_ratio"))?,
            n_faces: self.n_faces.ok_or_else(|| field("n_faces"))?,
            caption_text: self
                .caption_text
                .clone()
                .ok_or_else(|| field("caption_text"))?,
        })
    }
}

impl From<&SampleMeta> for RawMeta {
    fn from(m: &SampleMeta) -> Self {
        RawMeta {
            width: Some(m.width),
            height: Some(m.height),
            aesthetic_score: Some(m.aesthetic_score),
            face_ratio: Some(m.face_ratio),
            n_faces: Some(m.n_faces),
            caption_text: Some(m.caption_text.clone()),
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct FilterThresholds {
    pub min_res: u32,
    pub min_aesthetic: f32,
    pub min_face_ratio: f32,
}

impl FilterThresholds {
    /// Toy-scale analogs used when building the synthetic dataset.
    pub fn toy() -> Self {
        FilterThresholds {
            min_res: 32,
            min_aesthetic: 5.5,
            min_face_ratio: 0.03,
        }
    }

    /// The production-scale thresholds the filter was designed around.
    pub fn production() -> Self {
        FilterThresholds {
            min_res: 768,
            min_aesthetic: 5.5,
            min_face_ratio: 0.03,
        }
    }
}

const PLURAL_PRONOUNS: [&str; 8] = ["they", "them", "their", "theirs", "we", "us", "our", "ours"];

fn has_plural_pronoun(caption: &str) -> bool {
    caption
        .split_whitespace()
        .any(|w| PLURAL_PRONOUNS.contains(&w.to_ascii_lowercase().as_str()))
}

/// Keep exactly the samples passing every predicate, order preserved:
/// resolution at least `min_res`, aesthetic score strictly above
/// `min_aesthetic`, exactly one face, face ratio strictly above
/// `min_face_ratio`, and no plural personal pronoun in the caption.
pub fn filter_chain(metas: &[RawMeta], thresholds: &FilterThresholds) -> Result<Vec<usize>> {
    let mut kept = Vec::new();
    for (i, raw) in metas.iter().enumerate() {
        let m = raw.validate()?;
        let pass = m.width >= thresholds.min_res
            && m.height >= thresholds.min_res
            && m.aesthetic_score > thresholds.min_aesthetic
            && m.n_faces == 1
            && m.face_ratio > thresholds.min_face_ratio
            && !has_plural_pronoun(&m.caption_text);
        if pass {
            kept.push(i);
        }
    }
    Ok(kept)
}

/// One rendered sample with its ground truth.
#[derive(Clone, Debug)]
pub struct FaceSample {
    pub image: Image,
    pub identity: IdentityParams,
    pub scene: SceneParams,
    pub bbox: BBox,
    /// Caption as stored in the dataset (trigger prefix on ~90% of samples).
    pub caption: Vec<u32>,
    pub meta: SampleMeta,
}

#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub samples: Vec<FaceSample>,
    pub n_identities: usize,
    pub per_identity: usize,
}

/// Fraction of stored captions that carry the trigger prefix, mirroring the
/// dominant reconstruction situation during training.
pub const TRIGGER_CAPTION_RATE: f64 = 0.9;

fn render_sample(identity: IdentityParams, scene: SceneParams, rng: &mut RngStream) -> FaceSample {
    let (image, bbox) = render(&identity, &scene);
    let with_trigger = rng.uniform() < TRIGGER_CAPTION_RATE;
    let tokens = caption(&scene, with_trigger);
    let meta = SampleMeta {
        width: image.width as u32,
        height: image.height as u32,
        aesthetic_score: (5.6 + 1.4 * rng.uniform()) as f32,
        face_ratio: bbox.area() as f32 / (image.width * image.height) as f32,
        n_faces: 1,
        caption_text: caption_text(&tokens),
    };
    FaceSample {
        image,
        identity,
        scene,
        bbox,
        caption: pad_caption(&tokens, MAX_CAPTION_LEN),
        meta,
    }
}

impl Dataset {
    /// Deterministic generation: identity `i`, scene `j` depend only on
    /// `(seed, i, j)`.
    pub fn generate(n_identities: usize, per_identity: usize, seed: u64) -> Result<Dataset> {
        if n_identities == 0 || per_identity == 0 {
            return Err(Error::InvalidConfig("counts must be at least 1".into()));
        }
        let root = RngStream::named(seed, "synthdata");
        let mut samples = Vec::with_capacity(n_identities * per_identity);
        for i in 0..n_identities {
            let id_stream = root.derive("identity").derive_u64(i as u64);
            let identity = gen_identity(&mut id_stream.clone());
            for j in 0..per_identity {
                let mut s = id_stream.derive("scene").derive_u64(j as u64);
                let scene = gen_scene(&mut s);
                samples.push(render_sample(identity, scene, &mut s));
            }
        }
        // The toy thresholds pass every honestly rendered sample; the chain
        // still runs so planted violations would be dropped.
        let raw: Vec<RawMeta> = samples.iter().map(|s| RawMeta::from(&s.meta)).collect();
        let kept = filter_chain(&raw, &FilterThresholds::toy())?;
        let samples = kept.into_iter().map(|i| samples[i].clone()).collect();
        Ok(Dataset {
            samples,
            n_identities,
            per_identity,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn to_archive(&self) -> Result<Archive> {
        let n = self.samples.len();
        let mut images = Vec::with_capacity(n * IMAGE_SIZE * IMAGE_SIZE * 3);
        let mut ids = Vec::with_capacity(n * IDENTITY_DIMS);
        let mut scenes = Vec::with_capacity(n * SCENE_DIMS);
        let mut captions = Vec::with_capacity(n * MAX_CAPTION_LEN);
        let mut bboxes = Vec::with_capacity(n * 4);
        let mut metas = Vec::with_capacity(n);
        for s in &self.samples {
            images.extend_from_slice(&s.image.pixels);
            ids.extend_from_slice(&s.identity.to_vec());
            scenes.extend_from_slice(&s.scene.to_vec());
            captions.extend(s.caption.iter().map(|&t| t as i32));
            bboxes.extend_from_slice(&[
                s.bbox.x as i32,
                s.bbox.y as i32,
                s.bbox.w as i32,
                s.bbox.h as i32,
            ]);
            metas.push(s.meta.clone());
        }
        let mut archive = Archive::new();
        archive.insert(
            "images".into(),
            NamedTensor {
                shape: vec![n, IMAGE_SIZE, IMAGE_SIZE, 3],
                data: TensorData::U8(images),
            },
        );
        archive.insert(
            "identity_params".into(),
            NamedTensor::f32(vec![n, IDENTITY_DIMS], ids),
        );
        archive.insert(
            "scene_params".into(),
            NamedTensor::f32(vec![n, SCENE_DIMS], scenes),
        );
        archive.insert(
            "captions".into(),
            NamedTensor {
                shape: vec![n, MAX_CAPTION_LEN],
                data: TensorData::I32(captions),
            },
        );
        archive.insert(
            "bboxes".into(),
            NamedTensor {
                shape: vec![n, 4],
                data: TensorData::I32(bboxes),
            },
        );
        archive.insert(
            "meta".into(),
            NamedTensor::text(&serde_json::to_string(&metas)?),
        );
        Ok(archive)
    }

    pub fn from_archive(archive: &Archive) -> Result<Dataset> {
        let get = |key: &str| {
            archive.get(key).ok_or_else(|| Error::MissingParameter {
                name: key.to_string(),
            })
        };
        let images = get("images")?;
        let ids = get("identity_params")?;
        let scenes = get("scene_params")?;
        let captions = get("captions")?;
        let bboxes = get("bboxes")?;
        let metas: Vec<SampleMeta> = serde_json::from_str(&get("meta")?.as_text()?)?;

        let n = images.shape[0];
        let TensorData::U8(img_data) = &images.data else {
            return Err(Error::InvalidDimensions {
                op: "Dataset::from_archive",
                message: "images must be u8".into(),
            });
        };
        let TensorData::F32(id_data) = &ids.data else {
            return Err(Error::InvalidDimensions {
                op: "Dataset::from_archive",
                message: "identity_params must be f32".into(),
            });
        };
        let TensorData::F32(scene_data) = &scenes.data else {
            return Err(Error::InvalidDimensions {
                op: "Dataset::from_archive",
                message: "scene_params must be f32".into(),
            });
        };
        let TensorData::I32(cap_data) = &captions.data else {
            return Err(Error::InvalidDimensions {
                op: "Dataset::from_archive",
                message: "captions must be i32".into(),
            });
        };
        let TensorData::I32(bbox_data) = &bboxes.data else {
            return Err(Error::InvalidDimensions {
                op: "Dataset::from_archive",
                message: "bboxes must be i32".into(),
            });
        };

        let px = IMAGE_SIZE * IMAGE_SIZE * 3;
        let mut samples = Vec::with_capacity(n);
        for i in 0..n {
            let image = Image {
                width: IMAGE_SIZE,
                height: IMAGE_SIZE,
                pixels: img_data[i * px..(i + 1) * px].to_vec(),
            };
            let identity =
                IdentityParams::from_vec(&id_data[i * IDENTITY_DIMS..(i + 1) * IDENTITY_DIMS])?;
            let scene = SceneParams::from_vec(&scene_data[i * SCENE_DIMS..(i + 1) * SCENE_DIMS])?;
            let caption = cap_data[i * MAX_CAPTION_LEN..(i + 1) * MAX_CAPTION_LEN]
                .iter()
                .map(|&t| t as u32)
                .collect();
            let bbox = BBox {
                x: bbox_data[i * 4] as usize,
                y: bbox_data[i * 4 + 1] as usize,
                w: bbox_data[i * 4 + 2] as usize,
                h: bbox_data[i * 4 + 3] as usize,
            };
            samples.push(FaceSample {
                image,
                identity,
                scene,
                bbox,
                caption,
                meta: metas[i].clone(),
            });
        }
        // Samples are identity-major; recover the grouping from runs of
        // identical identity vectors.
        let mut per_identity = samples.len();
        for (i, s) in samples.iter().enumerate().skip(1) {
            if s.identity != samples[0].identity {
                per_identity = i;
                break;
            }
        }
        let n_identities = if per_identity == 0 {
            0
        } else {
            samples.len() / per_identity
        };
        Ok(Dataset {
            samples,
            n_identities,
            per_identity,
        })
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        archive::save_archive(path, &self.to_archive()?)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Dataset> {
        Dataset::from_archive(&archive::load_archive(path)?)
    }
}

/// Generate, filter, and write a dataset archive. Returns the sample count.
pub fn make_dataset(
    n_identities: usize,
    per_identity: usize,
    seed: u64,
    out_path: impl AsRef<std::path::Path>,
) -> Result<usize> {
    let ds = Dataset::generate(n_identities, per_identity, seed)?;
    ds.save(out_path)?;
    Ok(ds.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gen_identity_is_seeded_and_uniform() {
        let mut a = RngStream::named(5, "id");
        let mut b = RngStream::named(5, "id");
        assert_eq!(gen_identity(&mut a), gen_identity(&mut b));

        let mut rng = RngStream::named(6, "id-stats");
        let mut sums = [0.0f64; IDENTITY_DIMS];
        let n = 10_000;
        for _ in 0..n {
            let v = gen_identity(&mut rng).to_vec();
            for (s, x) in sums.iter_mut().zip(v) {
                assert!((0.0..=1.0).contains(&x));
                *s += x as f64;
            }
        }
        for s in sums {
            assert!((s / n as f64 - 0.5).abs() < 0.02);
        }
    }

    #[test]
    fn render_is_deterministic() {
        let mut rng = RngStream::named(7, "render");
        let id = gen_identity(&mut rng);
        let scene = gen_scene(&mut rng);
        let (a, ba) = render(&id, &scene);
        let (b, bb) = render(&id, &scene);
        assert_eq!(a, b);
        assert_eq!(ba, bb);
    }

    #[test]
    fn eye_size_changes_stay_inside_bbox() {
        let mut rng = RngStream::named(8, "render-local");
        for _ in 0..10 {
            let id = gen_identity(&mut rng);
            let scene = gen_scene(&mut rng);
            let edited = id.with_dim(3, (id.eye_size + 0.4).min(1.0));
            let (a, bbox) = render(&id, &scene);
            let (b, _) = render(&edited, &scene);
            for y in 0..IMAGE_SIZE {
                for x in 0..IMAGE_SIZE {
                    if a.get(x, y) != b.get(x, y) {
                        assert!(bbox.contains(x, y), "difference outside bbox at {x},{y}");
                    }
                }
            }
        }
    }

    #[test]
    fn background_classification_is_exact_on_clean_renders() {
        let mut rng = RngStream::named(9, "render-bg");
        for trial in 0..60 {
            let id = gen_identity(&mut rng);
            let mut scene = gen_scene(&mut rng);
            scene.background = trial % N_BACKGROUNDS;
            let (img, bbox) = render(&id, &scene);
            assert_eq!(
                classify_background(&img, Some(bbox)),
                scene.background,
                "trial {trial}"
            );
        }
    }

    #[test]
    fn caption_trigger_placement() {
        let scene = reference_scene(2, 1);
        let with = caption(&scene, true);
        assert_eq!(&with[..3], &TRIGGER_TOKENS);
        let without = caption(&scene, false);
        assert!(without.iter().all(|t| !TRIGGER_TOKENS.contains(t)));
        assert_eq!(caption(&scene, false), without);
        assert_eq!(parse_caption(&with), Some((2, 1)));
        assert_eq!(parse_caption(&without), Some((2, 1)));
    }

    #[test]
    fn caption_round_trip_all_classes() {
        for bg in 0..N_BACKGROUNDS {
            for cl in 0..N_CLOTHING {
                let tokens = caption(&reference_scene(bg, cl), false);
                assert_eq!(parse_caption(&tokens), Some((bg, cl)));
            }
        }
    }

    #[test]
    fn augment_crop_contains_bbox_and_varies() {
        let mut rng = RngStream::named(10, "aug");
        let id = gen_identity(&mut rng);
        let scene = gen_scene(&mut rng);
        let (img, bbox) = render(&id, &scene);

        let mut offsets = std::collections::BTreeSet::new();
        for _ in 0..1000 {
            let rect = pick_crop_rect(&mut rng, bbox, img.width, img.height);
            assert!(rect.x <= bbox.x && rect.y <= bbox.y);
            assert!(rect.x + rect.w >= bbox.x + bbox.w);
            assert!(rect.y + rect.h >= bbox.y + bbox.h);
            offsets.insert((rect.x, rect.y, rect.w, rect.h));
        }
        assert!(offsets.len() >= 3);

        let mut r1 = RngStream::named(11, "aug-det");
        let mut r2 = RngStream::named(11, "aug-det");
        assert_eq!(
            augment_crop(&img, bbox, &mut r1).unwrap(),
            augment_crop(&img, bbox, &mut r2).unwrap()
        );
    }

    fn meta(width: u32, height: u32, aes: f32, ratio: f32, faces: u32, cap: &str) -> RawMeta {
        RawMeta {
            width: Some(width),
            height: Some(height),
            aesthetic_score: Some(aes),
            face_ratio: Some(ratio),
            n_faces: Some(faces),
            caption_text: Some(cap.to_string()),
        }
    }

    #[test]
    fn filter_chain_production_thresholds() {
        let t = FilterThresholds::production();
        // Resolution below 768 is rejected.
        let m = vec![meta(512, 800, 6.0, 0.05, 1, "portrait of a person")];
        assert!(filter_chain(&m, &t).unwrap().is_empty());
        // Aesthetic score must be strictly above 5.5.
        let m = vec![meta(800, 800, 5.0, 0.05, 1, "portrait of a person")];
        assert!(filter_chain(&m, &t).unwrap().is_empty());
        let m = vec![meta(800, 800, 5.5, 0.05, 1, "portrait of a person")];
        assert!(filter_chain(&m, &t).unwrap().is_empty());
        // Kept: ratio 0.05 > 0.03, one face, clean caption.
        let m = vec![meta(800, 800, 6.0, 0.05, 1, "portrait of a person")];
        assert_eq!(filter_chain(&m, &t).unwrap(), vec![0]);
        // Plural pronouns are rejected.
        let m = vec![meta(800, 800, 6.0, 0.05, 1, "They pose for us")];
        assert!(filter_chain(&m, &t).unwrap().is_empty());
        // Multiple faces are rejected.
        let m = vec![meta(800, 800, 6.0, 0.05, 2, "portrait of a person")];
        assert!(filter_chain(&m, &t).unwrap().is_empty());
    }

    #[test]
    fn filter_chain_missing_field_names_it() {
        let mut m = meta(800, 800, 6.0, 0.05, 1, "ok");
        m.face_ratio = None;
        match filter_chain(&[m], &FilterThresholds::production()) {
            Err(Error::MissingMetadata { field }) => assert_eq!(field, "face_ratio"),
            other => panic!("expected metadata error, got {other:?}"),
        }
    }

    #[test]
    fn filter_chain_matches_predicate_conjunction_oracle() {
        // Independent re-evaluation of each predicate on a random corpus.
        let mut rng = RngStream::named(12, "filter-oracle");
        let t = FilterThresholds::production();
        let mut metas = Vec::new();
        for _ in 0..500 {
            let cap = if rng.uniform() < 0.2 {
                "they walk together"
            } else {
                "portrait of a person"
            };
            metas.push(meta(
                if rng.uniform() < 0.3 { 512 } else { 900 },
                if rng.uniform() < 0.3 { 512 } else { 900 },
                rng.uniform_in(4.0, 7.0) as f32,
                rng.uniform_in(0.0, 0.2) as f32,
                if rng.uniform() < 0.2 { 2 } else { 1 },
                cap,
            ));
        }
        let got = filter_chain(&metas, &t).unwrap();
        let want: Vec<usize> = metas
            .iter()
            .enumerate()
            .filter(|(_, m)| {
                let p1 = m.width.unwrap() >= t.min_res;
                let p2 = m.height.unwrap() >= t.min_res;
                let p3 = m.aesthetic_score.unwrap() > t.min_aesthetic;
                let p4 = m.n_faces.unwrap() == 1;
                let p5 = m.face_ratio.unwrap() > t.min_face_ratio;
                let p6 = !m
                    .caption_text
                    .as_ref()
                    .unwrap()
                    .split_whitespace()
                    .any(|w| PLURAL_PRONOUNS.contains(&w.to_ascii_lowercase().as_str()));
                p1 && p2 && p3 && p4 && p5 && p6
            })
            .map(|(i, _)| i)
            .collect();
        assert_eq!(got, want);
    }

    #[test]
    fn dataset_round_trip_and_determinism() {
        let ds = Dataset::generate(2, 3, 13).unwrap();
        assert_eq!(ds.len(), 6);

        let dir = std::env::temp_dir().join("loraspace-ds-test");
        std::fs::create_dir_all(&dir).unwrap();
        let p1 = dir.join("a.hlra");
        let p2 = dir.join("b.hlra");
        ds.save(&p1).unwrap();
        make_dataset(2, 3, 13, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());

        let back = Dataset::load(&p1).unwrap();
        assert_eq!(back.len(), 6);
        for (a, b) in ds.samples.iter().zip(&back.samples) {
            assert_eq!(a.image, b.image);
            assert_eq!(a.identity, b.identity);
            assert_eq!(a.caption, b.caption);
            assert_eq!(a.bbox, b.bbox);
            assert_eq!(a.meta, b.meta);
        }
    }

    #[test]
    fn trigger_rate_is_roughly_ninety_percent() {
        let ds = Dataset::generate(100, 2, 21).unwrap();
        let with = ds
            .samples
            .iter()
            .filter(|s| s.caption.starts_with(&TRIGGER_TOKENS))
            .count();
        let rate = with as f64 / ds.len() as f64;
        assert!((rate - 0.9).abs() < 0.08, "rate {rate}");
    }
}
