//! Synthetic triplet factory: sprite videos over flat backgrounds with
//! exact ground-truth masks, reference images built either in-pair (crops of
//! the target video) or cross-pair (re-renders of the same sprite identity
//! with different background, position, scale, and hue), confusion-free
//! prompt composition, and the data-pipeline matching algorithms
//! (dual-threshold pairing, greedy dedup, IOU calibration).

use crate::encoders::{vocab, PromptTokens, ReferenceImage, VideoClip};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, TensorData};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

// ── colors ───────────────────────────────────────────────────────────

/// Hue in degrees [0,360), s and v in [0,1] → RGB in [0,1].
pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(360.0);
    let c = v * s;
    let x = c * (1.0 - ((h / 60.0) % 2.0 - 1.0).abs());
    let m = v - c;
    let (r, g, b) = match h as u32 / 60 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    [r + m, g + m, b + m]
}

/// RGB in [0,1] → (hue degrees [0,360), saturation, value).
pub fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        60.0 * ((g - b) / d).rem_euclid(6.0)
    } else if max == g {
        60.0 * ((b - r) / d + 2.0)
    } else {
        60.0 * ((r - g) / d + 4.0)
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

/// Hue (degrees) of sprite palette entry `i`; entries are 45° apart.
pub fn palette_hue(i: usize) -> f64 {
    45.0 * (i % vocab::COLORS.len()) as f64
}

/// Fully saturated sprite color.
pub fn palette_rgb(i: usize) -> [f64; 3] {
    hsv_to_rgb(palette_hue(i), 1.0, 1.0)
}

/// Desaturated background grays: always separable from sprites by
/// saturation.
pub fn background_rgb(i: usize) -> [f64; 3] {
    let v = 0.15 + 0.14 * (i % vocab::BACKGROUNDS.len()) as f64;
    [v, v, v]
}

/// Saturation above this is sprite, below is background, by construction.
pub const SPRITE_SATURATION_MIN: f64 = 0.5;

// ── domain types ─────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Square,
    Circle,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Square, Shape::Circle, Shape::Triangle];

    pub fn token(self) -> u16 {
        vocab::SHAPE_BASE + self as u16
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Motion {
    Left,
    Right,
    Up,
    Down,
}

impl Motion {
    pub const ALL: [Motion; 4] = [Motion::Left, Motion::Right, Motion::Up, Motion::Down];

    pub fn token(self) -> u16 {
        vocab::MOTION_BASE + self as u16
    }

    /// Per-frame displacement (dy, dx) at unit speed. Rows grow downward,
    /// so "up" is negative dy.
    pub fn direction(self) -> (f64, f64) {
        match self {
            Motion::Left => (0.0, -1.0),
            Motion::Right => (0.0, 1.0),
            Motion::Up => (-1.0, 0.0),
            Motion::Down => (1.0, 0.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpriteSpec {
    pub shape: Shape,
    /// Palette index.
    pub color: usize,
    /// Half-extent in pixels.
    pub scale: f64,
    pub motion: Motion,
    /// Pixels per frame.
    pub speed: f64,
    /// Center (y, x) at frame 0.
    pub start: (f64, f64),
}

impl SpriteSpec {
    pub fn center_at(&self, frame: usize) -> (f64, f64) {
        let (dy, dx) = self.motion.direction();
        (
            self.start.0 + dy * self.speed * frame as f64,
            self.start.1 + dx * self.speed * frame as f64,
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub subjects: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            frames: 8,
            height: 32,
            width: 32,
            subjects: 1,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frames < 1 {
            return Err(Error::Config("scene needs at least one frame".into()));
        }
        if !(1..=crate::fusion::MAX_REFERENCES).contains(&self.subjects) {
            return Err(Error::Config(format!(
                "subject count {} outside [1, {}]",
                self.subjects,
                crate::fusion::MAX_REFERENCES
            )));
        }
        if self.height < 8 || self.width < 8 {
            return Err(Error::Config("scene smaller than 8x8".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairMode {
    InPair,
    CrossPair,
}

/// Binary subject mask over one frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mask {
    pub h: usize,
    pub w: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn empty(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            data: vec![false; h * w],
        }
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.w + x]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// Mean (y, x) of set pixels; None when empty.
    pub fn centroid(&self) -> Option<(f64, f64)> {
        let n = self.count();
        if n == 0 {
            return None;
        }
        let (mut sy, mut sx) = (0.0, 0.0);
        for y in 0..self.h {
            for x in 0..self.w {
                if self.get(y, x) {
                    sy += y as f64;
                    sx += x as f64;
                }
            }
        }
        Some((sy / n as f64, sx / n as f64))
    }

    pub fn iou_with(&self, other: &Mask) -> f64 {
        let mut inter = 0usize;
        let mut union = 0usize;
        for (a, b) in self.data.iter().zip(&other.data) {
            inter += usize::from(*a && *b);
            union += usize::from(*a || *b);
        }
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }

    /// Tight bounding box of set pixels.
    pub fn bbox(&self) -> Option<Box2D> {
        let (mut y0, mut x0, mut y1, mut x1) = (usize::MAX, usize::MAX, 0usize, 0usize);
        for y in 0..self.h {
            for x in 0..self.w {
                if self.get(y, x) {
                    y0 = y0.min(y);
                    x0 = x0.min(x);
                    y1 = y1.max(y + 1);
                    x1 = x1.max(x + 1);
                }
            }
        }
        if y0 == usize::MAX {
            None
        } else {
            Some(Box2D {
                x0: x0 as f64,
                y0: y0 as f64,
                x1: x1 as f64,
                y1: y1 as f64,
            })
        }
    }
}

/// Axis-aligned pixel box; open at (x1, y1).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Box2D {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Box2D {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        let b = Self { x0, y0, x1, y1 };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.x0 < self.x1 && self.y0 < self.y1) {
            return Err(Error::Contract(format!("degenerate box {self:?}")));
        }
        Ok(())
    }

    pub fn area(&self) -> f64 {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }
}

/// One training unit with full synthetic ground truth.
#[derive(Clone, Debug)]
pub struct TripletSample<T> {
    pub prompt: PromptTokens,
    pub refs: Vec<ReferenceImage<T>>,
    pub video: VideoClip<T>,
    pub mode: PairMode,
    pub specs: Vec<SpriteSpec>,
    /// masks[subject][frame]
    pub masks: Vec<Vec<Mask>>,
    /// Video background palette index.
    pub background: usize,
    /// Per-reference background index (== video background for in-pair).
    pub ref_backgrounds: Vec<usize>,
    /// Per-reference applied hue jitter in degrees (0 for in-pair).
    pub ref_hue_shifts: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairCandidate {
    pub a: usize,
    pub b: usize,
    #[serde(with = "score_serde")]
    pub score: ordered::Score,
}

// PairCandidate keeps its score as a plain f64 wrapper so Eq/serde stay
// simple while the score contract ([-1,1], symmetric) lives with the data
mod ordered {
    #[derive(Clone, Copy, Debug, PartialEq)]
    pub struct Score(pub f64);
    impl Eq for Score {}
}

mod score_serde {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};
    pub fn serialize<S: Serializer>(s: &super::ordered::Score, ser: S) -> Result<S::Ok, S::Error> {
        s.0.serialize(ser)
    }
    pub fn deserialize<'de, D: Deserializer<'de>>(
        de: D,
    ) -> Result<super::ordered::Score, D::Error> {
        Ok(super::ordered::Score(f64::deserialize(de)?))
    }
}

impl PairCandidate {
    pub fn new(a: usize, b: usize, score: f64) -> Self {
        Self {
            a,
            b,
            score: ordered::Score(score),
        }
    }

    pub fn score(&self) -> f64 {
        self.score.0
    }
}

// ── rendering ────────────────────────────────────────────────────────

fn shape_contains(shape: Shape, r: f64, dy: f64, dx: f64) -> bool {
    match shape {
        Shape::Square => dy.abs() <= r && dx.abs() <= r,
        Shape::Circle => dy * dy + dx * dx <= r * r,
        // apex-up isoceles triangle: width grows from apex downward
        Shape::Triangle => dy.abs() <= r && dx.abs() <= (dy + r) / 2.0,
    }
}

/// A sprite instance to draw: its spec plus a hue jitter in degrees.
#[derive(Clone, Debug)]
pub struct SpriteState {
    pub spec: SpriteSpec,
    pub hue_shift_deg: f64,
}

fn sprite_in_bounds(spec: &SpriteSpec, frame: usize, h: usize, w: usize) -> bool {
    let (cy, cx) = spec.center_at(frame);
    let r = spec.scale;
    cy - r >= 0.0 && cy + r <= (h - 1) as f64 && cx - r >= 0.0 && cx + r <= (w - 1) as f64
}

/// Render a full scene; every sprite must stay inside the frame over the
/// whole trajectory. Returns the clip and masks[subject][frame].
pub fn render_scene<T: Scalar>(
    scene: &SceneConfig,
    background: usize,
    sprites: &[SpriteState],
) -> Result<(VideoClip<T>, Vec<Vec<Mask>>)> {
    scene.validate()?;
    let (fh, fw, ft) = (scene.height, scene.width, scene.frames);
    for (si, s) in sprites.iter().enumerate() {
        for f in 0..ft {
            if !sprite_in_bounds(&s.spec, f, fh, fw) {
                return Err(Error::Generation(format!(
                    "sprite {si} leaves the frame at frame {f} (center {:?}, r {})",
                    s.spec.center_at(f),
                    s.spec.scale
                )));
            }
        }
    }
    let bg = background_rgb(background);
    let mut pixels = vec![T::zero(); ft * fh * fw * 3];
    let mut masks: Vec<Vec<Mask>> = sprites
        .iter()
        .map(|_| (0..ft).map(|_| Mask::empty(fh, fw)).collect())
        .collect();
    #[allow(clippy::needless_range_loop)]
    for f in 0..ft {
        for y in 0..fh {
            for x in 0..fw {
                let mut rgb = bg;
                // painter's order: later sprites draw over earlier ones
                for (si, s) in sprites.iter().enumerate() {
                    let (cy, cx) = s.spec.center_at(f);
                    if shape_contains(s.spec.shape, s.spec.scale, y as f64 - cy, x as f64 - cx) {
                        rgb = hsv_to_rgb(
                            palette_hue(s.spec.color) + s.hue_shift_deg,
                            1.0,
                            1.0,
                        );
                        masks[si][f].data[y * fw + x] = true;
                    }
                }
                let base = ((f * fh + y) * fw + x) * 3;
                for c in 0..3 {
                    pixels[base + c] = T::from_f64(rgb[c]);
                }
            }
        }
    }
    let clip = VideoClip::new(TensorData::new(vec![ft, fh, fw, 3], pixels)?)?;
    Ok((clip, masks))
}

/// Crop a rectangular region of one video frame into a reference image.
pub fn crop_frame<T: Scalar>(
    clip: &VideoClip<T>,
    frame: usize,
    b: &Box2D,
) -> Result<ReferenceImage<T>> {
    b.validate()?;
    let s = clip.tensor().shape();
    let (fh, fw) = (s[1], s[2]);
    let (y0, x0) = (b.y0 as usize, b.x0 as usize);
    let (y1, x1) = (b.y1 as usize, b.x1 as usize);
    if frame >= s[0] || y1 > fh || x1 > fw {
        return Err(Error::Contract(format!(
            "crop {b:?} of frame {frame} outside clip {s:?}"
        )));
    }
    let mut data = Vec::with_capacity((y1 - y0) * (x1 - x0) * 3);
    for y in y0..y1 {
        for x in x0..x1 {
            let base = ((frame * fh + y) * fw + x) * 3;
            data.extend_from_slice(&clip.tensor().data()[base..base + 3]);
        }
    }
    ReferenceImage::new(TensorData::new(vec![y1 - y0, x1 - x0, 3], data)?)
}

fn expand_clamped(b: &Box2D, margin: f64, h: usize, w: usize) -> Box2D {
    Box2D {
        x0: (b.x0 - margin).max(0.0),
        y0: (b.y0 - margin).max(0.0),
        x1: (b.x1 + margin).min(w as f64),
        y1: (b.y1 + margin).min(h as f64),
    }
}

fn boxes_overlap(a: &Box2D, b: &Box2D) -> bool {
    a.x0 < b.x1 && b.x0 < a.x1 && a.y0 < b.y1 && b.y0 < a.y1
}

// ── prompt composition ───────────────────────────────────────────────

/// One descriptor group ⟨color⟩⟨shape⟩⟨motion⟩ per subject in reference
/// order, separator-delimited. Colors always included, so any two subjects
/// sharing a shape are distinguished; identical (shape, color) pairs are
/// rejected as ambiguous.
pub fn compose_prompt(subjects: &[SpriteSpec]) -> Result<PromptTokens> {
    if subjects.is_empty() || subjects.len() > crate::fusion::MAX_REFERENCES {
        return Err(Error::Contract(format!(
            "prompt needs 1..={} subjects, got {}",
            crate::fusion::MAX_REFERENCES,
            subjects.len()
        )));
    }
    for i in 0..subjects.len() {
        for j in i + 1..subjects.len() {
            if subjects[i].shape == subjects[j].shape && subjects[i].color == subjects[j].color {
                return Err(Error::Ambiguous(format!(
                    "subjects {i} and {j} share shape {:?} and color {}",
                    subjects[i].shape, subjects[i].color
                )));
            }
        }
    }
    let mut ids = Vec::with_capacity(subjects.len() * 4 - 1);
    for (i, s) in subjects.iter().enumerate() {
        if i > 0 {
            ids.push(vocab::SEP);
        }
        ids.push(vocab::COLOR_BASE + s.color as u16);
        ids.push(s.shape.token());
        ids.push(s.motion.token());
    }
    PromptTokens::new(ids)
}

// ── triplet generation ───────────────────────────────────────────────

const PLACEMENT_RETRIES: usize = 64;

fn sample_span<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if hi <= lo {
        lo
    } else {
        rng.gen_range(lo..hi)
    }
}

fn sample_specs<R: Rng>(
    rng: &mut R,
    scene: &SceneConfig,
) -> Result<Vec<SpriteSpec>> {
    let dim = scene.height.min(scene.width) as f64;
    // distinct (shape, color) identities
    let mut identities: Vec<(Shape, usize)> = Vec::new();
    while identities.len() < scene.subjects {
        let id = (
            Shape::ALL[rng.gen_range(0..Shape::ALL.len())],
            rng.gen_range(0..vocab::COLORS.len()),
        );
        if !identities.contains(&id) {
            identities.push(id);
        }
    }
    for _ in 0..PLACEMENT_RETRIES {
        let mut specs = Vec::with_capacity(scene.subjects);
        for &(shape, color) in &identities {
            let r = dim * rng.gen_range(0.17..0.20);
            let motion = Motion::ALL[rng.gen_range(0..Motion::ALL.len())];
            let (dy, dx) = motion.direction();
            let along = if dx != 0.0 { scene.width } else { scene.height } as f64;
            let travel_max = along - 1.0 - 2.0 * r;
            if travel_max < 1.0 {
                return Err(Error::Generation(format!(
                    "scene {}x{} too small for sprite radius {r}",
                    scene.height, scene.width
                )));
            }
            // full-travel motion: the sprite always crosses the whole free
            // span, so the commanded direction pins the start position and
            // stays inferable even from heavily noised frames
            // the 1e-6 margin keeps the exact-touch endpoint inside the
            // strict bounds check despite floating-point rounding
            let speed = ((travel_max - 1e-6) / (scene.frames.max(2) - 1) as f64).min(2.5);
            let travel = speed * (scene.frames - 1) as f64;
            let start_along = if dx + dy > 0.0 {
                sample_span(rng, r, along - 1.0 - r - travel)
            } else {
                sample_span(rng, r + travel, along - 1.0 - r)
            };
            let cross_dim = if dx != 0.0 { scene.height } else { scene.width } as f64;
            // keep the cross-axis position in a band around the centerline:
            // the trajectory is then almost fully determined by the commanded
            // direction, which is what makes the direction word learnable
            let mid = (cross_dim - 1.0) / 2.0;
            let band = 0.08 * dim;
            let start_cross = sample_span(
                rng,
                (mid - band).max(r),
                (mid + band).min(cross_dim - 1.0 - r),
            );
            let start = if dx != 0.0 {
                (start_cross, start_along)
            } else {
                (start_along, start_cross)
            };
            specs.push(SpriteSpec {
                shape,
                color,
                scale: r,
                motion,
                speed,
                start,
            });
        }
        // frame-0 footprints (with crop margin) must be disjoint so in-pair
        // crops depict exactly one subject
        let boxes: Vec<Box2D> = specs
            .iter()
            .map(|s| {
                let (cy, cx) = s.start;
                Box2D {
                    x0: cx - s.scale - 1.0,
                    y0: cy - s.scale - 1.0,
                    x1: cx + s.scale + 1.0,
                    y1: cy + s.scale + 1.0,
                }
            })
            .collect();
        let disjoint = (0..boxes.len())
            .all(|i| (i + 1..boxes.len()).all(|j| !boxes_overlap(&boxes[i], &boxes[j])));
        if disjoint {
            return Ok(specs);
        }
    }
    Err(Error::Generation(format!(
        "could not place {} disjoint subjects in {} tries",
        scene.subjects, PLACEMENT_RETRIES
    )))
}

pub const CROSS_PAIR_MAX_HUE_SHIFT_DEG: f64 = 5.0;
pub const CROSS_PAIR_SCALE_JITTER: f64 = 0.2;

/// Generate one triplet. In-pair references are literal crops of video
/// frame 0; cross-pair references re-render each sprite identity alone with
/// a different background, position, ±20% scale, and ≤5° hue jitter.
pub fn gen_sprite_triplet<T: Scalar>(
    seed: u64,
    scene: &SceneConfig,
    mode: PairMode,
) -> Result<TripletSample<T>> {
    scene.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let background = rng.gen_range(0..vocab::BACKGROUNDS.len());
    let specs = sample_specs(&mut rng, scene)?;
    let states: Vec<SpriteState> = specs
        .iter()
        .map(|s| SpriteState {
            spec: s.clone(),
            hue_shift_deg: 0.0,
        })
        .collect();
    let (video, masks) = render_scene::<T>(scene, background, &states)?;
    let prompt = compose_prompt(&specs)?;

    let mut refs = Vec::with_capacity(specs.len());
    let mut ref_backgrounds = Vec::with_capacity(specs.len());
    let mut ref_hue_shifts = Vec::with_capacity(specs.len());
    for (si, spec) in specs.iter().enumerate() {
        match mode {
            PairMode::InPair => {
                let bbox = masks[si][0]
                    .bbox()
                    .ok_or_else(|| Error::Generation(format!("subject {si} invisible")))?;
                let crop_box = expand_clamped(&bbox, 1.0, scene.height, scene.width);
                refs.push(crop_frame(&video, 0, &crop_box)?);
                ref_backgrounds.push(background);
                ref_hue_shifts.push(0.0);
            }
            PairMode::CrossPair => {
                let ref_bg = {
                    let pick = rng.gen_range(0..vocab::BACKGROUNDS.len() - 1);
                    if pick >= background {
                        pick + 1
                    } else {
                        pick
                    }
                };
                let jitter = rng.gen_range(
                    -CROSS_PAIR_MAX_HUE_SHIFT_DEG..=CROSS_PAIR_MAX_HUE_SHIFT_DEG,
                );
                let scale = spec.scale
                    * rng.gen_range(1.0 - CROSS_PAIR_SCALE_JITTER..=1.0 + CROSS_PAIR_SCALE_JITTER);
                let scale = scale.min(scene.height.min(scene.width) as f64 / 2.0 - 1.0);
                let single = SceneConfig {
                    frames: 1,
                    subjects: 1,
                    ..scene.clone()
                };
                let cy = sample_span(&mut rng, scale, (scene.height - 1) as f64 - scale);
                let cx = sample_span(&mut rng, scale, (scene.width - 1) as f64 - scale);
                let alt = SpriteState {
                    spec: SpriteSpec {
                        scale,
                        speed: 0.0,
                        start: (cy, cx),
                        ..spec.clone()
                    },
                    hue_shift_deg: jitter,
                };
                let (alt_clip, alt_masks) = render_scene::<T>(&single, ref_bg, &[alt])?;
                let bbox = alt_masks[0][0]
                    .bbox()
                    .ok_or_else(|| Error::Generation(format!("subject {si} invisible")))?;
                let crop_box = expand_clamped(&bbox, 1.0, scene.height, scene.width);
                refs.push(crop_frame(&alt_clip, 0, &crop_box)?);
                ref_backgrounds.push(ref_bg);
                ref_hue_shifts.push(jitter);
            }
        }
    }

    Ok(TripletSample {
        prompt,
        refs,
        video,
        mode,
        specs,
        masks,
        background,
        ref_backgrounds,
        ref_hue_shifts,
    })
}

/// Index-addressable dataset: sample `index` of a dataset identified by
/// (seed, scene, mode), generated on demand.
pub fn dataset_sample<T: Scalar>(
    seed: u64,
    index: u64,
    scene: &SceneConfig,
    mode: PairMode,
) -> Result<TripletSample<T>> {
    let mixed = seed
        .wrapping_mul(0x9e3779b97f4a7c15)
        .wrapping_add(index.wrapping_mul(0xd1342543de82ef95))
        .wrapping_add(match mode {
            PairMode::InPair => 0x1,
            PairMode::CrossPair => 0x2,
        });
    gen_sprite_triplet(mixed, scene, mode)
}

// ── matching algorithms ──────────────────────────────────────────────

/// Keep candidates with score strictly inside (s_low, s_high): too high
/// suggests copy-paste, too low suggests different subjects. Input order
/// preserved.
pub fn cross_pair_match(
    candidates: &[PairCandidate],
    s_low: f64,
    s_high: f64,
) -> Result<Vec<PairCandidate>> {
    if s_low >= s_high {
        return Err(Error::Config(format!(
            "pairing thresholds inverted: s_low {s_low} >= s_high {s_high}"
        )));
    }
    Ok(candidates
        .iter()
        .filter(|p| p.score() > s_low && p.score() < s_high)
        .copied()
        .collect())
}

/// Greedy deduplication in input order: an image is dropped when its cosine
/// similarity to any already-retained image is ≥ threshold. Returns retained
/// indices; the first occurrence of a duplicate group always survives.
pub fn dedup_images<T: Scalar, E>(
    images: &[ReferenceImage<T>],
    embed: E,
    threshold: f64,
) -> Vec<usize>
where
    E: Fn(&ReferenceImage<T>) -> Vec<f64>,
{
    let embs: Vec<Vec<f64>> = images.iter().map(&embed).collect();
    let mut kept: Vec<usize> = Vec::new();
    'outer: for (i, e) in embs.iter().enumerate() {
        for &k in &kept {
            if cosine(e, &embs[k]) >= threshold {
                continue 'outer;
            }
        }
        kept.push(i);
    }
    kept
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Intersection over union of two boxes.
pub fn iou(a: &Box2D, b: &Box2D) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    let ix = (a.x1.min(b.x1) - a.x0.max(b.x0)).max(0.0);
    let iy = (a.y1.min(b.y1) - a.y0.max(b.y0)).max(0.0);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    Ok(inter / union)
}

/// Greedy one-to-one matching by descending IOU; pairs with IOU < iou_min
/// stay unmatched. Ties break on (detector index, caption index) so the
/// result is deterministic.
pub fn calibrate_detections(
    detector: &[Box2D],
    captions: &[Box2D],
    iou_min: f64,
) -> Result<Vec<(usize, usize)>> {
    if !(iou_min > 0.0 && iou_min <= 1.0) {
        return Err(Error::Config(format!("iou_min {iou_min} outside (0,1]")));
    }
    let mut scored = Vec::with_capacity(detector.len() * captions.len());
    for (i, d) in detector.iter().enumerate() {
        for (j, c) in captions.iter().enumerate() {
            let s = iou(d, c)?;
            if s >= iou_min {
                scored.push((s, i, j));
            }
        }
    }
    scored.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap()
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });
    let mut used_d = vec![false; detector.len()];
    let mut used_c = vec![false; captions.len()];
    let mut out = Vec::new();
    for (_, i, j) in scored {
        if !used_d[i] && !used_c[j] {
            used_d[i] = true;
            used_c[j] = true;
            out.push((i, j));
        }
    }
    Ok(out)
}

// ── dataset manifest ─────────────────────────────────────────────────

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: u64,
    pub mode: PairMode,
    pub prompt: Vec<u16>,
    pub refs: Vec<String>,
    pub video: String,
    pub ground_truth: String,
}

#[derive(Serialize, Deserialize)]
struct GroundTruth {
    specs: Vec<SpriteSpec>,
    background: usize,
    masks: Vec<Vec<Mask>>,
}

/// Write `count` samples (PNG media + JSON ground truth) and a line-delimited
/// JSON manifest; returns the manifest path.
pub fn write_dataset(
    dir: &std::path::Path,
    seed: u64,
    count: u64,
    scene: &SceneConfig,
    mode: PairMode,
) -> Result<std::path::PathBuf> {
    use std::io::Write;
    std::fs::create_dir_all(dir)?;
    let manifest_path = dir.join("manifest.jsonl");
    let mut manifest = std::fs::File::create(&manifest_path)?;
    for id in 0..count {
        let sample = dataset_sample::<f32>(seed, id, scene, mode)?;
        let sdir = dir.join(format!("sample_{id:06}"));
        let vdir = sdir.join("video");
        std::fs::create_dir_all(&vdir)?;
        crate::encoders::save_clip(&sample.video, &vdir)?;
        let mut ref_paths = Vec::new();
        for (i, r) in sample.refs.iter().enumerate() {
            let p = sdir.join(format!("ref_{i}.png"));
            crate::encoders::save_image(r, &p)?;
            ref_paths.push(p.to_string_lossy().into_owned());
        }
        let gt = GroundTruth {
            specs: sample.specs.clone(),
            background: sample.background,
            masks: sample.masks.clone(),
        };
        let gt_path = sdir.join("ground_truth.json");
        std::fs::write(&gt_path, serde_json::to_string(&gt)?)?;
        let rec = ManifestRecord {
            id,
            mode,
            prompt: sample.prompt.ids().to_vec(),
            refs: ref_paths,
            video: vdir.to_string_lossy().into_owned(),
            ground_truth: gt_path.to_string_lossy().into_owned(),
        };
        writeln!(manifest, "{}", serde_json::to_string(&rec)?)?;
    }
    Ok(manifest_path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn color_conversions_round_trip() {
        for i in 0..8 {
            let [r, g, b] = palette_rgb(i);
            let (h, s, v) = rgb_to_hsv(r, g, b);
            assert!((h - palette_hue(i)).abs() < 1e-9 || (h - palette_hue(i)).abs() > 359.9);
            assert!((s - 1.0).abs() < 1e-9);
            assert!((v - 1.0).abs() < 1e-9);
        }
        for i in 0..6 {
            let [r, g, b] = background_rgb(i);
            let (_, s, _) = rgb_to_hsv(r, g, b);
            assert!(s < SPRITE_SATURATION_MIN);
        }
    }

    #[test]
    fn triplets_are_seed_deterministic() {
        let scene = SceneConfig::default();
        let a = gen_sprite_triplet::<f64>(9, &scene, PairMode::InPair).unwrap();
        let b = gen_sprite_triplet::<f64>(9, &scene, PairMode::InPair).unwrap();
        assert_eq!(a.video.tensor(), b.video.tensor());
        assert_eq!(a.prompt, b.prompt);
        for (x, y) in a.refs.iter().zip(&b.refs) {
            assert_eq!(x.tensor(), y.tensor());
        }
    }

    #[test]
    fn in_pair_refs_are_exact_video_crops() {
        let scene = SceneConfig {
            subjects: 2,
            ..SceneConfig::default()
        };
        for seed in 0..5 {
            let s = gen_sprite_triplet::<f64>(seed, &scene, PairMode::InPair).unwrap();
            for (si, r) in s.refs.iter().enumerate() {
                let bbox = s.masks[si][0].bbox().unwrap();
                let crop_box = expand_clamped(&bbox, 1.0, scene.height, scene.width);
                let crop = crop_frame(&s.video, 0, &crop_box).unwrap();
                assert_eq!(r.tensor(), crop.tensor(), "seed {seed} subject {si}");
            }
        }
    }

    #[test]
    fn cross_pair_refs_change_background_but_barely_shift_hue() {
        let scene = SceneConfig::default();
        for seed in 0..10 {
            let s = gen_sprite_triplet::<f64>(seed, &scene, PairMode::CrossPair).unwrap();
            assert_ne!(s.ref_backgrounds[0], s.background, "seed {seed}");
            assert!(s.ref_hue_shifts[0].abs() <= CROSS_PAIR_MAX_HUE_SHIFT_DEG);
            // measure the rendered sprite hue inside the ref
            let t = s.refs[0].tensor();
            let mut max_dev = 0.0f64;
            let mut saw_bg = false;
            for px in t.data().chunks(3) {
                let (h, sat, _) = rgb_to_hsv(px[0], px[1], px[2]);
                if sat >= SPRITE_SATURATION_MIN {
                    let target = palette_hue(s.specs[0].color);
                    let mut d = (h - target).abs();
                    d = d.min(360.0 - d);
                    max_dev = max_dev.max(d);
                } else {
                    saw_bg = true;
                    // background pixel carries the alternate background color
                    let bg = background_rgb(s.ref_backgrounds[0]);
                    assert!((px[0] - bg[0]).abs() < 1e-9);
                }
            }
            assert!(max_dev <= CROSS_PAIR_MAX_HUE_SHIFT_DEG + 1e-6, "hue dev {max_dev}");
            assert!(saw_bg, "crop margin should include background pixels");
        }
    }

    #[test]
    fn sprite_out_of_bounds_is_a_generation_error() {
        let scene = SceneConfig::default();
        let state = SpriteState {
            spec: SpriteSpec {
                shape: Shape::Square,
                color: 0,
                scale: 4.0,
                motion: Motion::Right,
                speed: 5.0,
                start: (16.0, 16.0),
            },
            hue_shift_deg: 0.0,
        };
        assert!(matches!(
            render_scene::<f64>(&scene, 0, &[state]),
            Err(Error::Generation(_))
        ));
    }

    #[test]
    fn ground_truth_masks_track_the_commanded_motion() {
        let scene = SceneConfig::default();
        let s = gen_sprite_triplet::<f64>(3, &scene, PairMode::InPair).unwrap();
        let first = s.masks[0][0].centroid().unwrap();
        let last = s.masks[0][scene.frames - 1].centroid().unwrap();
        let (dy, dx) = (last.0 - first.0, last.1 - first.1);
        let (edy, edx) = s.specs[0].motion.direction();
        // dominant axis matches the command
        if edx != 0.0 {
            assert!(dx * edx > 0.0 && dx.abs() > dy.abs());
        } else {
            assert!(dy * edy > 0.0 && dy.abs() > dx.abs());
        }
    }

    #[test]
    fn compose_prompt_cases() {
        let base = SpriteSpec {
            shape: Shape::Square,
            color: 0,
            scale: 3.0,
            motion: Motion::Left,
            speed: 1.0,
            start: (10.0, 10.0),
        };
        let p = compose_prompt(std::slice::from_ref(&base)).unwrap();
        assert_eq!(
            p.ids(),
            &[vocab::COLOR_BASE, vocab::SHAPE_BASE, vocab::MOTION_BASE]
        );
        assert_eq!(p.words(), "red square left");

        let other = SpriteSpec {
            color: 2,
            ..base.clone()
        };
        let p2 = compose_prompt(&[base.clone(), other]).unwrap();
        // both groups carry a color token
        let colors: Vec<u16> = p2
            .ids()
            .iter()
            .copied()
            .filter(|&id| (vocab::COLOR_BASE..vocab::MOTION_BASE).contains(&id))
            .collect();
        assert_eq!(colors.len(), 2);

        assert!(matches!(
            compose_prompt(&[base.clone(), base]),
            Err(Error::Ambiguous(_))
        ));
    }

    #[test]
    fn cross_pair_match_threshold_semantics() {
        let cands = vec![
            PairCandidate::new(0, 1, 0.95),
            PairCandidate::new(0, 2, 0.7),
            PairCandidate::new(1, 2, 0.2),
        ];
        let kept = cross_pair_match(&cands, 0.3, 0.9).unwrap();
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].score(), 0.7);

        assert!(cross_pair_match(&[], 0.3, 0.9).unwrap().is_empty());
        let boundary = vec![PairCandidate::new(0, 1, 0.9)];
        assert!(cross_pair_match(&boundary, 0.3, 0.9).unwrap().is_empty());
        assert!(matches!(
            cross_pair_match(&cands, 0.9, 0.3),
            Err(Error::Config(_))
        ));
        // idempotence
        let again = cross_pair_match(&kept, 0.3, 0.9).unwrap();
        assert_eq!(again, kept);
    }

    fn flat_image(v: f64) -> ReferenceImage<f64> {
        ReferenceImage::new(TensorData::full(vec![4, 4, 3], v)).unwrap()
    }

    #[test]
    fn dedup_greedy_semantics_and_idempotence() {
        // embedding = mean pixel per channel plus a constant, so identical
        // images embed identically
        let embed = |img: &ReferenceImage<f64>| -> Vec<f64> {
            let mut e = vec![1.0; 4];
            for (i, px) in img.tensor().data().iter().enumerate() {
                e[i % 3] += px;
            }
            e
        };
        let imgs = vec![flat_image(0.2), flat_image(0.2), flat_image(0.9)];
        let kept = dedup_images(&imgs, embed, 0.999_999);
        assert_eq!(kept, vec![0, 2]);

        let distinct = vec![flat_image(0.1), flat_image(0.9)];
        // low threshold with near-parallel embeddings: second is dropped
        let kept2 = dedup_images(&distinct, embed, 0.5);
        assert_eq!(kept2, vec![0]);
        // threshold 1+eps keeps everything
        let kept3 = dedup_images(&imgs, embed, 1.0 + 1e-9);
        assert_eq!(kept3, vec![0, 1, 2]);

        // idempotence
        let survivors: Vec<_> = kept.iter().map(|&i| imgs[i].clone()).collect();
        let again = dedup_images(&survivors, embed, 0.999_999);
        assert_eq!(again.len(), survivors.len());
    }

    #[test]
    fn iou_cases() {
        let a = Box2D::new(0.0, 0.0, 2.0, 2.0).unwrap();
        assert!((iou(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let b = Box2D::new(5.0, 5.0, 6.0, 6.0).unwrap();
        assert_eq!(iou(&a, &b).unwrap(), 0.0);
        let c = Box2D::new(1.0, 1.0, 3.0, 3.0).unwrap();
        assert!((iou(&a, &c).unwrap() - 1.0 / 7.0).abs() < 1e-12);
        assert!((iou(&c, &a).unwrap() - iou(&a, &c).unwrap()).abs() < 1e-15);
        assert!(Box2D::new(2.0, 0.0, 2.0, 2.0).is_err());
    }

    #[test]
    fn calibrate_matches_greedy_oracle() {
        let d = vec![
            Box2D::new(0.0, 0.0, 2.0, 2.0).unwrap(),
            Box2D::new(4.0, 4.0, 6.0, 6.0).unwrap(),
            Box2D::new(8.0, 8.0, 10.0, 10.0).unwrap(),
        ];
        // identical sets → identity matching
        let m = calibrate_detections(&d, &d, 0.5).unwrap();
        assert_eq!(m, vec![(0, 0), (1, 1), (2, 2)]);
        // no overlap → empty
        let far = vec![Box2D::new(100.0, 100.0, 102.0, 102.0).unwrap()];
        assert!(calibrate_detections(&d, &far, 0.1).unwrap().is_empty());
        // 3x3 fixture: caption boxes shifted by different amounts
        let c = vec![
            Box2D::new(0.5, 0.0, 2.5, 2.0).unwrap(),  // best for d0
            Box2D::new(4.1, 4.0, 6.1, 6.0).unwrap(),  // best for d1
            Box2D::new(8.9, 8.9, 10.9, 10.9).unwrap(), // weak for d2
        ];
        let m = calibrate_detections(&d, &c, 0.15).unwrap();
        // manual greedy: (1,1) has highest IOU, then (0,0), then (2,2)
        assert_eq!(m.len(), 3);
        assert!(m.contains(&(0, 0)) && m.contains(&(1, 1)) && m.contains(&(2, 2)));
        assert_eq!(m[0], (1, 1));
        assert!(matches!(
            calibrate_detections(&d, &c, 0.0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let scene = SceneConfig {
            frames: 2,
            height: 16,
            width: 16,
            subjects: 1,
        };
        let path = write_dataset(dir.path(), 1, 2, &scene, PairMode::InPair).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let recs: Vec<ManifestRecord> = text
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(recs.len(), 2);
        assert!(std::path::Path::new(&recs[0].video).join("frame_0000.png").exists());
        assert!(std::path::Path::new(&recs[0].ground_truth).exists());
    }
}
