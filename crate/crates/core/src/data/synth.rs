//! Procedural pedestrian-like images with identity-level attributes.
//!
//! A figure is drawn from coloured blocks (head, hair, torso, arms, legs,
//! shoes) and per-attribute overlays placed in fixed template regions. Every
//! identity also gets cues that no attribute describes (exact shades, shoe
//! colour, a torso texture), and every image gets nuisance variation
//! (illumination, camera tint, translation jitter, pixel noise).
//!
//! Coordinates below are fractions of the image height (rows) and width
//! (columns), so templates carry over to any resolution.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::pnm::quantize;
use super::{Dataset, Sample, Split};
use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::schema::{AttributeSchema, OrderPolicy};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub identities: usize,
    pub per_identity: usize,
    /// Fraction of identities used for training; the rest are test identities.
    pub train_fraction: f64,
    /// Images per test identity that become queries; the rest form the gallery.
    pub queries_per_identity: usize,
    pub cameras: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub order: OrderPolicy,
    /// Global brightness multiplier range.
    pub illumination: (f64, f64),
    /// Maximum figure shift in pixels along each axis.
    pub jitter: usize,
    /// Standard deviation of per-pixel Gaussian noise.
    pub noise: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            identities: 20,
            per_identity: 10,
            train_fraction: 0.5,
            queries_per_identity: 2,
            cameras: 3,
            image_height: 96,
            image_width: 48,
            order: OrderPolicy::TopDown,
            illumination: (0.8, 1.2),
            jitter: 2,
            noise: 0.03,
        }
    }
}

impl SynthSpec {
    pub fn schema(&self) -> AttributeSchema {
        AttributeSchema::pedestrian(self.order)
    }

    pub fn train_identities(&self) -> usize {
        (self.identities as f64 * self.train_fraction).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        if self.identities < 2 {
            return bad(format!("need at least 2 identities, got {}", self.identities));
        }
        if self.per_identity < 2 {
            return bad(format!("need at least 2 images per identity, got {}", self.per_identity));
        }
        let train = self.train_identities();
        if train == 0 || train >= self.identities {
            return bad(format!(
                "train fraction {} leaves no identities on one side of the split",
                self.train_fraction
            ));
        }
        if self.queries_per_identity == 0 || self.queries_per_identity >= self.per_identity {
            return bad(format!(
                "{} queries per identity leaves no gallery among {} images",
                self.queries_per_identity, self.per_identity
            ));
        }
        if self.cameras == 0 {
            return bad("need at least one camera".into());
        }
        if self.image_height < 16 || self.image_width < 8 {
            return bad(format!("image {}x{} is too small", self.image_height, self.image_width));
        }
        if !(self.illumination.0 > 0.0 && self.illumination.0 <= self.illumination.1) {
            return bad(format!("bad illumination range {:?}", self.illumination));
        }
        if !(self.noise >= 0.0) {
            return bad(format!("bad noise level {}", self.noise));
        }
        Ok(())
    }

    pub fn apply(&mut self, kv: &KeyValues) -> Result<()> {
        if let Some(v) = kv.get("identities")? {
            self.identities = v;
        }
        if let Some(v) = kv.get("per_identity")? {
            self.per_identity = v;
        }
        if let Some(v) = kv.get("train_fraction")? {
            self.train_fraction = v;
        }
        if let Some(v) = kv.get("queries_per_identity")? {
            self.queries_per_identity = v;
        }
        if let Some(v) = kv.get("cameras")? {
            self.cameras = v;
        }
        if let Some(v) = kv.get("image_height")? {
            self.image_height = v;
        }
        if let Some(v) = kv.get("image_width")? {
            self.image_width = v;
        }
        if let Some(v) = kv.get_str("order") {
            self.order = v.parse()?;
        }
        if let Some(v) = kv.get("illumination_min")? {
            self.illumination.0 = v;
        }
        if let Some(v) = kv.get("illumination_max")? {
            self.illumination.1 = v;
        }
        if let Some(v) = kv.get("jitter")? {
            self.jitter = v;
        }
        if let Some(v) = kv.get("noise")? {
            self.noise = v;
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::default();
        kv.set("identities", self.identities.to_string());
        kv.set("per_identity", self.per_identity.to_string());
        kv.set("train_fraction", self.train_fraction.to_string());
        kv.set("queries_per_identity", self.queries_per_identity.to_string());
        kv.set("cameras", self.cameras.to_string());
        kv.set("image_height", self.image_height.to_string());
        kv.set("image_width", self.image_width.to_string());
        kv.set("order", self.order.name());
        kv.set("illumination_min", self.illumination.0.to_string());
        kv.set("illumination_max", self.illumination.1.to_string());
        kv.set("jitter", self.jitter.to_string());
        kv.set("noise", self.noise.to_string());
        kv
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut spec = Self::default();
        spec.apply(&KeyValues::load(path)?)?;
        spec.validate()?;
        Ok(spec)
    }
}

/// Axis-aligned box in fractional image coordinates, `[r0, r1) x [c0, c1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FracRect {
    pub r0: f64,
    pub r1: f64,
    pub c0: f64,
    pub c1: f64,
}

const fn fr(r0: f64, r1: f64, c0: f64, c1: f64) -> FracRect {
    FracRect { r0, r1, c0, c1 }
}

/// Where an attribute's evidence is drawn: a union of boxes.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionTemplate {
    pub rects: Vec<FracRect>,
}

impl RegionTemplate {
    /// Cells of an `h x w` grid whose centre falls inside the template.
    pub fn mask(&self, h: usize, w: usize) -> Vec<bool> {
        let mut m = vec![false; h * w];
        for r in 0..h {
            let y = (r as f64 + 0.5) / h as f64;
            for c in 0..w {
                let x = (c as f64 + 0.5) / w as f64;
                m[r * w + c] = self.rects.iter().any(|b| y >= b.r0 && y < b.r1 && x >= b.c0 && x < b.c1);
            }
        }
        m
    }

    pub fn area_fraction(&self, h: usize, w: usize) -> f64 {
        self.mask(h, w).iter().filter(|&&b| b).count() as f64 / (h * w) as f64
    }
}

/// Template region of a built-in attribute, by name.
pub fn template(name: &str) -> Option<RegionTemplate> {
    let rects = match name {
        "hat" => vec![fr(0.0, 0.12, 0.25, 0.75)],
        "hair_length" => vec![fr(0.04, 0.32, 0.29, 0.71)],
        "age" => vec![fr(0.06, 0.22, 0.33, 0.67)],
        "gender" => vec![fr(0.19, 0.38, 0.38, 0.62)],
        "upper_color" => vec![fr(0.22, 0.55, 0.25, 0.75)],
        "sleeve_length" => vec![fr(0.29, 0.53, 0.08, 0.27), fr(0.29, 0.53, 0.73, 0.92)],
        "backpack" => vec![fr(0.19, 0.47, 0.27, 0.73)],
        // training flips images, so side-carried items get mirrored templates
        "bag" => vec![fr(0.38, 0.65, 0.0, 0.25), fr(0.38, 0.65, 0.75, 1.0)],
        "handbag" => vec![fr(0.47, 0.66, 0.0, 0.25), fr(0.47, 0.66, 0.75, 1.0)],
        "lower_color" => vec![fr(0.55, 0.92, 0.25, 0.75)],
        "lower_length" => vec![fr(0.70, 0.93, 0.25, 0.75)],
        "lower_type" => vec![fr(0.55, 0.82, 0.2, 0.8)],
        _ => return None,
    };
    Some(RegionTemplate { rects })
}

/// Whether an attribute value puts visible evidence into its template:
/// class 1 for two-class attributes, always for multi-class ones.
pub fn is_present(classes: usize, value: usize) -> bool {
    classes > 2 || value == 1
}

type Rgb = [f64; 3];

const UPPER_PALETTE: [Rgb; 8] = [
    [0.08, 0.08, 0.08], // black
    [0.92, 0.92, 0.92], // white
    [0.85, 0.12, 0.12], // red
    [0.50, 0.15, 0.60], // purple
    [0.92, 0.85, 0.15], // yellow
    [0.50, 0.50, 0.50], // gray
    [0.15, 0.25, 0.85], // blue
    [0.15, 0.65, 0.20], // green
];

const LOWER_PALETTE: [Rgb; 9] = [
    [0.08, 0.08, 0.08], // black
    [0.92, 0.92, 0.92], // white
    [0.95, 0.55, 0.70], // pink
    [0.50, 0.15, 0.60], // purple
    [0.92, 0.85, 0.15], // yellow
    [0.50, 0.50, 0.50], // gray
    [0.15, 0.25, 0.85], // blue
    [0.15, 0.65, 0.20], // green
    [0.50, 0.30, 0.12], // brown
];

const FACE_TONES: [Rgb; 4] = [
    [0.98, 0.78, 0.72], // child
    [0.88, 0.68, 0.52], // young
    [0.70, 0.50, 0.36], // adult
    [0.62, 0.60, 0.58], // old
];

/// Everything about an identity's look that stays fixed across its images.
#[derive(Debug, Clone)]
struct Identity {
    attributes: Vec<usize>,
    skin: Rgb,
    face: Rgb,
    hair: Rgb,
    hat: Rgb,
    upper: Rgb,
    lower: Rgb,
    shoes: Rgb,
    bag: Rgb,
    backpack: Rgb,
    handbag: Rgb,
    /// Torso texture: horizontal stripes of this period (pixels at 96 rows),
    /// phase and contrast.
    stripe: (f64, f64, f64),
}

fn clamp01(v: f64) -> f64 {
    v.clamp(0.0, 0.999)
}

fn jitter_color<R: Rng>(rng: &mut R, c: Rgb, amount: f64) -> Rgb {
    c.map(|v| clamp01(v + rng.random_range(-amount..amount)))
}

fn random_color<R: Rng>(rng: &mut R) -> Rgb {
    [rng.random(), rng.random(), rng.random()].map(clamp01)
}

/// A colour at least `min_dist` away from every palette entry.
fn off_palette<R: Rng>(rng: &mut R, palette: &[Rgb], min_dist: f64) -> Rgb {
    loop {
        let c = random_color(rng);
        let far = palette
            .iter()
            .all(|p| p.iter().zip(&c).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt() >= min_dist);
        if far {
            return c;
        }
    }
}

fn pick_palette<R: Rng>(rng: &mut R, palette: &[Rgb], class: usize) -> Rgb {
    if class < palette.len() {
        jitter_color(rng, palette[class], 0.04)
    } else {
        off_palette(rng, palette, 0.3)
    }
}

fn make_identity<R: Rng>(rng: &mut R, schema: &AttributeSchema) -> Identity {
    let attributes: Vec<usize> = schema.attributes().iter().map(|a| rng.random_range(0..a.classes)).collect();
    let get = |name: &str| schema.index_of(name).map(|i| attributes[i]).unwrap_or(0);
    let skin_base = rng.random_range(0.55..0.85);
    Identity {
        skin: [skin_base + 0.1, skin_base - 0.05, skin_base - 0.2].map(clamp01),
        face: jitter_color(rng, FACE_TONES[get("age")], 0.02),
        hair: jitter_color(rng, [0.2, 0.13, 0.08], 0.08),
        hat: random_color(rng),
        upper: pick_palette(rng, &UPPER_PALETTE, get("upper_color")),
        lower: pick_palette(rng, &LOWER_PALETTE, get("lower_color")),
        shoes: random_color(rng),
        bag: random_color(rng),
        backpack: jitter_color(rng, [0.25, 0.2, 0.15], 0.1),
        handbag: random_color(rng),
        stripe: (rng.random_range(4.0..10.0), rng.random_range(0.0..1.0), rng.random_range(0.0..0.12)),
        attributes,
    }
}

/// Float canvas `[3, H, W]` with fractional-coordinate painting.
struct Canvas {
    h: usize,
    w: usize,
    data: Vec<f64>,
    dy: f64,
    dx: f64,
}

impl Canvas {
    fn span(&self, a: f64, b: f64, extent: usize, shift: f64) -> std::ops::Range<usize> {
        let lo = (a * extent as f64 + shift).round().clamp(0.0, extent as f64) as usize;
        let hi = (b * extent as f64 + shift).round().clamp(0.0, extent as f64) as usize;
        lo..hi.max(lo)
    }

    fn fill_with(&mut self, r: FracRect, mut color: impl FnMut(usize, usize) -> Rgb) {
        let rows = self.span(r.r0, r.r1, self.h, self.dy);
        let cols = self.span(r.c0, r.c1, self.w, self.dx);
        let plane = self.h * self.w;
        for y in rows {
            for x in cols.clone() {
                let c = color(y, x);
                for (k, v) in c.iter().enumerate() {
                    self.data[k * plane + y * self.w + x] = *v;
                }
            }
        }
    }

    fn fill(&mut self, r: FracRect, c: Rgb) {
        self.fill_with(r, |_, _| c);
    }
}

fn draw(id: &Identity, schema: &AttributeSchema, canvas: &mut Canvas) {
    let get = |name: &str| schema.index_of(name).map(|i| id.attributes[i]).unwrap_or(0);
    let h = canvas.h as f64;

    // legs / lower garment
    let short_lower = get("lower_length") == 1;
    let skirt = get("lower_type") == 1;
    let hem: f64 = if short_lower { 0.72 } else { 0.92 };
    if skirt {
        canvas.fill(fr(0.55, hem.min(0.80), 0.28, 0.72), id.lower);
        canvas.fill(fr(0.62, hem.min(0.80), 0.22, 0.78), id.lower);
        let below = hem.min(0.80);
        canvas.fill(fr(below, 0.92, 0.32, 0.46), id.skin);
        canvas.fill(fr(below, 0.92, 0.54, 0.68), id.skin);
        if !short_lower {
            canvas.fill(fr(0.80, 0.92, 0.32, 0.46), id.lower);
            canvas.fill(fr(0.80, 0.92, 0.54, 0.68), id.lower);
        }
    } else {
        canvas.fill(fr(0.55, 0.62, 0.30, 0.70), id.lower);
        canvas.fill(fr(0.62, hem, 0.30, 0.47), id.lower);
        canvas.fill(fr(0.62, hem, 0.53, 0.70), id.lower);
        canvas.fill(fr(hem, 0.92, 0.31, 0.46), id.skin);
        canvas.fill(fr(hem, 0.92, 0.54, 0.69), id.skin);
    }
    // shoes
    canvas.fill(fr(0.92, 0.96, 0.29, 0.47), id.shoes);
    canvas.fill(fr(0.92, 0.96, 0.53, 0.71), id.shoes);

    // torso with a faint per-identity stripe texture
    let (period, phase, contrast) = id.stripe;
    let upper = id.upper;
    canvas.fill_with(fr(0.22, 0.55, 0.28, 0.72), |y, _| {
        let t = ((y as f64 * 96.0 / h) / period + phase).fract();
        let d = if t < 0.5 { contrast } else { -contrast };
        upper.map(|v| clamp01(v + d))
    });
    // arms: sleeves cover the upper arm always, the forearm only when long
    let short_sleeve = get("sleeve_length") == 1;
    for (c0, c1) in [(0.16, 0.27), (0.73, 0.84)] {
        canvas.fill(fr(0.22, 0.31, c0, c1), id.upper);
        canvas.fill(fr(0.31, 0.52, c0, c1), if short_sleeve { id.skin } else { id.upper });
    }

    // head
    canvas.fill(fr(0.07, 0.21, 0.38, 0.62), id.face);
    canvas.fill(fr(0.19, 0.23, 0.45, 0.55), id.skin);
    canvas.fill(fr(0.05, 0.10, 0.36, 0.64), id.hair);
    if get("hair_length") == 1 {
        canvas.fill(fr(0.08, 0.31, 0.32, 0.38), id.hair);
        canvas.fill(fr(0.08, 0.31, 0.62, 0.68), id.hair);
    }
    if get("hat") == 1 {
        canvas.fill(fr(0.01, 0.09, 0.33, 0.67), id.hat);
        canvas.fill(fr(0.08, 0.11, 0.28, 0.72), id.hat);
    }

    // gender cue at the neckline: a tie or a necklace
    if get("gender") == 1 {
        canvas.fill(fr(0.22, 0.25, 0.40, 0.60), [0.95, 0.85, 0.30]);
        canvas.fill(fr(0.25, 0.29, 0.47, 0.53), [0.95, 0.85, 0.30]);
    } else {
        canvas.fill(fr(0.22, 0.36, 0.475, 0.525), [0.10, 0.10, 0.25]);
    }

    if get("backpack") == 1 {
        canvas.fill(fr(0.20, 0.23, 0.29, 0.71), id.backpack);
        canvas.fill(fr(0.22, 0.46, 0.31, 0.36), id.backpack);
        canvas.fill(fr(0.22, 0.46, 0.64, 0.69), id.backpack);
    }
    if get("bag") == 1 {
        canvas.fill(fr(0.45, 0.62, 0.03, 0.22), id.bag);
        canvas.fill(fr(0.40, 0.46, 0.12, 0.16), id.bag);
    }
    if get("handbag") == 1 {
        canvas.fill(fr(0.50, 0.63, 0.78, 0.97), id.handbag);
        canvas.fill(fr(0.48, 0.51, 0.84, 0.91), id.handbag);
    }
}

fn camera_tint(camera: usize) -> Rgb {
    // fixed, distinct per camera
    let phase = camera as f64 * 2.399;
    [1.0 + 0.08 * phase.sin(), 1.0 + 0.08 * (phase + 2.1).sin(), 1.0 + 0.08 * (phase + 4.2).sin()]
}

fn render<R: Rng>(id: &Identity, schema: &AttributeSchema, spec: &SynthSpec, camera: usize, rng: &mut R) -> Tensor {
    let (h, w) = (spec.image_height, spec.image_width);
    let j = spec.jitter as f64;
    let (dy, dx) = if spec.jitter > 0 {
        (rng.random_range(-j..=j).round(), rng.random_range(-j..=j).round())
    } else {
        (0.0, 0.0)
    };
    let tint = camera_tint(camera);
    let bg_base = [0.45, 0.47, 0.44].map(|v| v + rng.random_range(-0.08..0.08));
    let mut canvas = Canvas {
        h,
        w,
        data: vec![0.0; 3 * h * w],
        dy,
        dx,
    };
    let plane = h * w;
    for k in 0..3 {
        canvas.data[k * plane..(k + 1) * plane].fill(bg_base[k]);
    }
    draw(id, schema, &mut canvas);

    let light = rng.random_range(spec.illumination.0..=spec.illumination.1);
    let noise = Normal::new(0.0, spec.noise.max(1e-12)).expect("finite noise");
    let data = canvas
        .data
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let n = if spec.noise > 0.0 { noise.sample(rng) } else { 0.0 };
            quantize(clamp01(v * light * tint[i / plane] + n))
        })
        .collect();
    Tensor::new(&[3, h, w], data).expect("canvas shape")
}

/// Generates the full dataset. Each identity draws from its own RNG stream,
/// so one identity's images do not depend on how many others exist.
pub fn generate_dataset(spec: &SynthSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let schema = spec.schema();
    let mut order: Vec<usize> = (0..spec.identities).collect();
    let mut split_rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut split_rng);
    let mut is_train = vec![false; spec.identities];
    for &i in &order[..spec.train_identities()] {
        is_train[i] = true;
    }

    let mut samples = Vec::with_capacity(spec.identities * spec.per_identity);
    for (pid, &train) in is_train.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(pid as u64 + 1);
        let id = make_identity(&mut rng, &schema);
        for j in 0..spec.per_identity {
            let camera = j % spec.cameras;
            let split = match (train, j < spec.queries_per_identity) {
                (true, _) => Split::Train,
                (false, true) => Split::Query,
                (false, false) => Split::Gallery,
            };
            samples.push(Sample {
                filename: format!("{pid:04}_{j:02}.ppm"),
                split,
                identity: pid,
                camera,
                attributes: id.attributes.clone(),
                image: render(&id, &schema, spec, camera, &mut rng),
            });
        }
    }
    let ds = Dataset { schema, samples };
    ds.validate()?;
    Ok(ds)
}
