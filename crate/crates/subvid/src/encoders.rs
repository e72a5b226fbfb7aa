//! Desk-scale stand-ins for the frozen pretrained encoders: a lossless
//! space-to-depth video codec, a frozen random-convolution semantic image
//! embedder, and a learned-table text embedder over a closed vocabulary.

use crate::error::{Error, Result};
use crate::tensor::{Id, Scalar, Tape, TensorData};
use std::path::Path;

/// Where a latent grid came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    Video,
    Reference,
}

/// t × H × W × 3 pixels in [0,1].
#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip<T> {
    frames: TensorData<T>,
}

impl<T: Scalar> VideoClip<T> {
    pub fn new(frames: TensorData<T>) -> Result<Self> {
        let s = frames.shape();
        if s.len() != 4 || s[3] != 3 || s[0] == 0 {
            return Err(Error::Dimension(format!(
                "video clip must be [t,H,W,3] with t >= 1, got {s:?}"
            )));
        }
        if frames
            .data()
            .iter()
            .any(|&v| v < T::zero() || v > T::one())
        {
            return Err(Error::Contract("video pixel values outside [0,1]".into()));
        }
        Ok(Self { frames })
    }

    pub fn frame_count(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.frames.shape()[2]
    }

    pub fn tensor(&self) -> &TensorData<T> {
        &self.frames
    }

    /// One frame as an image.
    pub fn frame(&self, i: usize) -> ReferenceImage<T> {
        let (h, w) = (self.height(), self.width());
        let per = h * w * 3;
        let data = self.frames.data()[i * per..(i + 1) * per].to_vec();
        ReferenceImage {
            pixels: TensorData::new(vec![h, w, 3], data).expect("frame slice is consistent"),
        }
    }
}

/// H × W × 3 pixels in [0,1]; same spatial size as one video frame.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceImage<T> {
    pixels: TensorData<T>,
}

impl<T: Scalar> ReferenceImage<T> {
    pub fn new(pixels: TensorData<T>) -> Result<Self> {
        let s = pixels.shape();
        if s.len() != 3 || s[2] != 3 {
            return Err(Error::Dimension(format!(
                "reference image must be [H,W,3], got {s:?}"
            )));
        }
        if pixels
            .data()
            .iter()
            .any(|&v| v < T::zero() || v > T::one())
        {
            return Err(Error::Contract("image pixel values outside [0,1]".into()));
        }
        Ok(Self { pixels })
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn tensor(&self) -> &TensorData<T> {
        &self.pixels
    }

    pub fn pixel(&self, r: usize, c: usize) -> [T; 3] {
        let base = (r * self.width() + c) * 3;
        let d = self.pixels.data();
        [d[base], d[base + 1], d[base + 2]]
    }

    /// Nearest-neighbor letterbox to `h x w`, preserving aspect, black bars.
    pub fn letterbox(&self, h: usize, w: usize) -> ReferenceImage<T> {
        if self.height() == h && self.width() == w {
            return self.clone();
        }
        let (sh, sw) = (self.height(), self.width());
        let scale = (h as f64 / sh as f64).min(w as f64 / sw as f64);
        let nh = ((sh as f64 * scale).round() as usize).clamp(1, h);
        let nw = ((sw as f64 * scale).round() as usize).clamp(1, w);
        let oy = (h - nh) / 2;
        let ox = (w - nw) / 2;
        let mut out = TensorData::zeros(vec![h, w, 3]);
        for r in 0..nh {
            let sr = ((r as f64 + 0.5) / scale) as usize;
            let sr = sr.min(sh - 1);
            for c in 0..nw {
                let sc = ((c as f64 + 0.5) / scale) as usize;
                let sc = sc.min(sw - 1);
                let src = (sr * sw + sc) * 3;
                let dst = ((r + oy) * w + (c + ox)) * 3;
                for k in 0..3 {
                    out.data_mut()[dst + k] = self.pixels.data()[src + k];
                }
            }
        }
        ReferenceImage { pixels: out }
    }
}

/// f × h × w × c_lat latent frames plus provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentFrameGrid<T> {
    pub grid: TensorData<T>,
    pub provenance: Provenance,
}

impl<T: Scalar> LatentFrameGrid<T> {
    pub fn frame_count(&self) -> usize {
        self.grid.shape()[0]
    }
    pub fn h(&self) -> usize {
        self.grid.shape()[1]
    }
    pub fn w(&self) -> usize {
        self.grid.shape()[2]
    }
    pub fn c_lat(&self) -> usize {
        self.grid.shape()[3]
    }
}

/// Lossless space-to-depth encode: each p×p pixel patch becomes one latent
/// cell with 3·p² channels. Channel order within a cell is (patch row, patch
/// col, rgb), row-major.
pub fn encode_video<T: Scalar>(clip: &VideoClip<T>, patch: usize) -> Result<LatentFrameGrid<T>> {
    let grid = space_to_depth(clip.tensor(), patch)?;
    Ok(LatentFrameGrid {
        grid,
        provenance: Provenance::Video,
    })
}

/// Encode a single reference image as a one-frame latent grid.
pub fn encode_image<T: Scalar>(
    img: &ReferenceImage<T>,
    patch: usize,
) -> Result<LatentFrameGrid<T>> {
    let (h, w) = (img.height(), img.width());
    let as_clip = TensorData::new(vec![1, h, w, 3], img.tensor().data().to_vec())
        .expect("image data is consistent");
    let grid = space_to_depth(&as_clip, patch)?;
    Ok(LatentFrameGrid {
        grid,
        provenance: Provenance::Reference,
    })
}

/// Exact inverse of `encode_video`; pixel values clamped to [0,1] at emission.
pub fn decode_video<T: Scalar>(grid: &LatentFrameGrid<T>, patch: usize) -> Result<VideoClip<T>> {
    let s = grid.grid.shape();
    if s.len() != 4 {
        return Err(Error::Dimension(format!("latent grid must be rank 4, got {s:?}")));
    }
    let (f, h, w, c) = (s[0], s[1], s[2], s[3]);
    if c != 3 * patch * patch {
        return Err(Error::Dimension(format!(
            "latent channels {c} do not match 3*p^2 for p={patch}"
        )));
    }
    let (ph, pw) = (h * patch, w * patch);
    let mut out = TensorData::zeros(vec![f, ph, pw, 3]);
    {
        let src = grid.grid.data();
        let dst = out.data_mut();
        for fi in 0..f {
            for gy in 0..h {
                for gx in 0..w {
                    let cell = ((fi * h + gy) * w + gx) * c;
                    for py in 0..patch {
                        for px in 0..patch {
                            let ch = (py * patch + px) * 3;
                            let pix = ((fi * ph + gy * patch + py) * pw + gx * patch + px) * 3;
                            for k in 0..3 {
                                let v = src[cell + ch + k];
                                dst[pix + k] = v.max(T::zero()).min(T::one());
                            }
                        }
                    }
                }
            }
        }
    }
    VideoClip::new(out)
}

fn space_to_depth<T: Scalar>(frames: &TensorData<T>, patch: usize) -> Result<TensorData<T>> {
    let s = frames.shape();
    let (f, ph, pw) = (s[0], s[1], s[2]);
    if patch == 0 || ph % patch != 0 || pw % patch != 0 {
        return Err(Error::Dimension(format!(
            "frame size {ph}x{pw} not divisible by patch {patch}"
        )));
    }
    let (h, w) = (ph / patch, pw / patch);
    let c = 3 * patch * patch;
    let mut out = TensorData::zeros(vec![f, h, w, c]);
    {
        let src = frames.data();
        let dst = out.data_mut();
        for fi in 0..f {
            for gy in 0..h {
                for gx in 0..w {
                    let cell = ((fi * h + gy) * w + gx) * c;
                    for py in 0..patch {
                        for px in 0..patch {
                            let ch = (py * patch + px) * 3;
                            let pix = ((fi * ph + gy * patch + py) * pw + gx * patch + px) * 3;
                            dst[cell + ch..cell + ch + 3].copy_from_slice(&src[pix..pix + 3]);
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

// ── closed prompt vocabulary ─────────────────────────────────────────

/// Structured token vocabulary: a separator, subject shapes, palette colors,
/// motion verbs, and background descriptors.
pub mod vocab {
    pub const SEP: u16 = 0;
    pub const SHAPES: [&str; 3] = ["square", "circle", "triangle"];
    pub const COLORS: [&str; 8] = [
        "red", "orange", "yellow", "green", "cyan", "blue", "purple", "magenta",
    ];
    pub const MOTIONS: [&str; 4] = ["left", "right", "up", "down"];
    pub const BACKGROUNDS: [&str; 6] = [
        "charcoal", "slate", "ivory", "sand", "olive", "plum",
    ];

    pub const SHAPE_BASE: u16 = 1;
    pub const COLOR_BASE: u16 = SHAPE_BASE + SHAPES.len() as u16;
    pub const MOTION_BASE: u16 = COLOR_BASE + COLORS.len() as u16;
    pub const BACKGROUND_BASE: u16 = MOTION_BASE + MOTIONS.len() as u16;
    pub const SIZE: u16 = BACKGROUND_BASE + BACKGROUNDS.len() as u16;

    pub fn name(id: u16) -> Option<&'static str> {
        if id == SEP {
            return Some("<sep>");
        }
        let id = id as usize;
        let (shape_base, color_base, motion_base, bg_base) = (
            SHAPE_BASE as usize,
            COLOR_BASE as usize,
            MOTION_BASE as usize,
            BACKGROUND_BASE as usize,
        );
        if id < color_base {
            SHAPES.get(id - shape_base).copied()
        } else if id < motion_base {
            COLORS.get(id - color_base).copied()
        } else if id < bg_base {
            MOTIONS.get(id - motion_base).copied()
        } else {
            BACKGROUNDS.get(id - bg_base).copied()
        }
    }

    pub fn id_of(word: &str) -> Option<u16> {
        if word == "<sep>" {
            return Some(SEP);
        }
        for (i, s) in SHAPES.iter().enumerate() {
            if *s == word {
                return Some(SHAPE_BASE + i as u16);
            }
        }
        for (i, s) in COLORS.iter().enumerate() {
            if *s == word {
                return Some(COLOR_BASE + i as u16);
            }
        }
        for (i, s) in MOTIONS.iter().enumerate() {
            if *s == word {
                return Some(MOTION_BASE + i as u16);
            }
        }
        for (i, s) in BACKGROUNDS.iter().enumerate() {
            if *s == word {
                return Some(BACKGROUND_BASE + i as u16);
            }
        }
        None
    }
}

/// Default maximum prompt length.
pub const L1_MAX: usize = 16;

/// A prompt over the closed vocabulary.
#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct PromptTokens {
    ids: Vec<u16>,
}

impl PromptTokens {
    pub fn new(ids: Vec<u16>) -> Result<Self> {
        Self::with_limit(ids, L1_MAX)
    }

    pub fn with_limit(ids: Vec<u16>, l1_max: usize) -> Result<Self> {
        if ids.len() > l1_max {
            return Err(Error::Vocab(format!(
                "prompt length {} exceeds l1_max {}",
                ids.len(),
                l1_max
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id >= vocab::SIZE) {
            return Err(Error::Vocab(format!(
                "token id {bad} outside vocabulary of size {}",
                vocab::SIZE
            )));
        }
        Ok(Self { ids })
    }

    pub fn empty() -> Self {
        Self { ids: vec![] }
    }

    pub fn ids(&self) -> &[u16] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn words(&self) -> String {
        self.ids
            .iter()
            .map(|&id| vocab::name(id).unwrap_or("<?>"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

// ── text embedder ────────────────────────────────────────────────────

/// Learned token table plus learned positional table.
#[derive(Clone, Debug)]
pub struct TextEmbedParams<P> {
    pub table: P,
    pub pos: P,
}

impl<P> TextEmbedParams<P> {
    pub fn map_ref<Q>(&self, f: &mut impl FnMut(&str, &P) -> Q) -> TextEmbedParams<Q> {
        TextEmbedParams {
            table: f("text.table", &self.table),
            pos: f("text.pos", &self.pos),
        }
    }
}

impl<T: Scalar> TextEmbedParams<TensorData<T>> {
    pub fn init<R: rand::Rng>(vocab_size: usize, l1_max: usize, c: usize, rng: &mut R) -> Self {
        let scale = T::from_f64(0.02);
        let mut table = TensorData::randn(vec![vocab_size, c], rng);
        for v in table.data_mut() {
            *v = *v * scale;
        }
        let mut pos = TensorData::randn(vec![l1_max, c], rng);
        for v in pos.data_mut() {
            *v = *v * scale;
        }
        Self { table, pos }
    }
}

/// Row i of the output is `table[ids[i]] + pos[i]`. Empty prompts produce a
/// 0 × c feature matrix.
pub fn embed_text<T: Scalar>(
    tape: &mut Tape<T>,
    params: &TextEmbedParams<Id>,
    ids: &PromptTokens,
) -> Result<Id> {
    let vocab_size = tape.shape_of(params.table)[0];
    let c = tape.shape_of(params.table)[1];
    let l1_max = tape.shape_of(params.pos)[0];
    let l = ids.len();
    if l > l1_max {
        return Err(Error::Vocab(format!(
            "prompt length {l} exceeds positional table {l1_max}"
        )));
    }
    if let Some(&bad) = ids.ids().iter().find(|&&id| (id as usize) >= vocab_size) {
        return Err(Error::Vocab(format!(
            "token id {bad} outside vocabulary of size {vocab_size}"
        )));
    }
    if l == 0 {
        let empty = TensorData::zeros(vec![0, c]);
        return Ok(tape.constant(&empty));
    }
    // gather rows via a constant one-hot matrix: differentiable w.r.t. table
    let mut onehot = TensorData::<T>::zeros(vec![l, vocab_size]);
    for (i, &id) in ids.ids().iter().enumerate() {
        onehot.data_mut()[i * vocab_size + id as usize] = T::one();
    }
    let oh = tape.constant(&onehot);
    let rows = tape.matmul(oh, params.table)?;
    let pos = tape.slice(params.pos, 0, 0, l)?;
    tape.add(rows, pos)
}

// ── semantic image embedder ──────────────────────────────────────────

/// Two patchwise (stride = kernel) conv layers, global mean pooling, and a
/// linear head emitting `l2` tokens of model dim. Randomly initialized and
/// frozen by default, mirroring a frozen pretrained image encoder.
#[derive(Clone, Debug)]
pub struct SemanticParams<P> {
    pub w1: P,
    pub b1: P,
    pub w2: P,
    pub b2: P,
    pub head_w: P,
    pub head_b: P,
}

impl<P> SemanticParams<P> {
    pub fn map_ref<Q>(&self, f: &mut impl FnMut(&str, &P) -> Q) -> SemanticParams<Q> {
        SemanticParams {
            w1: f("semantic.w1", &self.w1),
            b1: f("semantic.b1", &self.b1),
            w2: f("semantic.w2", &self.w2),
            b2: f("semantic.b2", &self.b2),
            head_w: f("semantic.head_w", &self.head_w),
            head_b: f("semantic.head_b", &self.head_b),
        }
    }
}

pub const SEMANTIC_D1: usize = 16;
pub const SEMANTIC_D2: usize = 32;

impl<T: Scalar> SemanticParams<TensorData<T>> {
    pub fn init<R: rand::Rng>(l2: usize, c: usize, rng: &mut R) -> Self {
        let lin = |fan_in: usize, shape: Vec<usize>, rng: &mut R| {
            let mut t = TensorData::<T>::randn(shape, rng);
            let s = T::from_f64(1.0 / (fan_in as f64).sqrt());
            for v in t.data_mut() {
                *v = *v * s;
            }
            t
        };
        Self {
            w1: lin(12, vec![12, SEMANTIC_D1], rng),
            b1: TensorData::zeros(vec![SEMANTIC_D1]),
            w2: lin(4 * SEMANTIC_D1, vec![4 * SEMANTIC_D1, SEMANTIC_D2], rng),
            b2: TensorData::zeros(vec![SEMANTIC_D2]),
            head_w: lin(SEMANTIC_D2, vec![SEMANTIC_D2, l2 * c], rng),
            head_b: TensorData::zeros(vec![l2 * c]),
        }
    }
}

/// Space-to-depth by 2 on the tape: [h,w,c] -> [h/2, w/2, 4c].
fn s2d2<T: Scalar>(tape: &mut Tape<T>, x: Id) -> Result<Id> {
    let s = tape.shape_of(x).to_vec();
    let (h, w, c) = (s[0], s[1], s[2]);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Dimension(format!(
            "semantic embedder input {h}x{w} not divisible by 2"
        )));
    }
    let r = tape.reshape(x, &[h / 2, 2, w / 2, 2, c])?;
    let p = tape.permute(r, &[0, 2, 1, 3, 4])?;
    tape.reshape(p, &[h / 2, w / 2, 4 * c])
}

/// Embed one reference image into `l2` semantic tokens of model dim `c`.
pub fn embed_reference_semantic<T: Scalar>(
    tape: &mut Tape<T>,
    params: &SemanticParams<Id>,
    img: &ReferenceImage<T>,
    l2: usize,
    c: usize,
) -> Result<Id> {
    let (h, w) = (img.height(), img.width());
    if h % 4 != 0 || w % 4 != 0 {
        return Err(Error::Dimension(format!(
            "semantic embedder requires dims divisible by 4, got {h}x{w}"
        )));
    }
    if tape.shape_of(params.head_w)[1] != l2 * c {
        return Err(Error::Dimension(format!(
            "semantic head emits {} values, expected l2*c = {}",
            tape.shape_of(params.head_w)[1],
            l2 * c
        )));
    }
    let x = tape.constant(img.tensor());
    let d1 = s2d2(tape, x)?; // [h/2, w/2, 12]
    let flat1 = tape.reshape(d1, &[(h / 2) * (w / 2), 12])?;
    let y1 = tape.linear(flat1, params.w1, params.b1)?;
    let a1 = tape.silu(y1)?;
    let g1 = tape.reshape(a1, &[h / 2, w / 2, SEMANTIC_D1])?;
    let d2 = s2d2(tape, g1)?; // [h/4, w/4, 4*d1]
    let n2 = (h / 4) * (w / 4);
    let flat2 = tape.reshape(d2, &[n2, 4 * SEMANTIC_D1])?;
    let y2 = tape.linear(flat2, params.w2, params.b2)?;
    let a2 = tape.silu(y2)?;
    // global mean pool over spatial cells
    let ones = TensorData::full(vec![1, n2], T::from_f64(1.0 / n2 as f64));
    let pool_w = tape.constant(&ones);
    let pooled = tape.matmul(pool_w, a2)?; // [1, d2]
    let head = tape.linear(pooled, params.head_w, params.head_b)?; // [1, l2*c]
    tape.reshape(head, &[l2, c])
}

/// Convenience: embed outside any training tape, returning plain values.
pub fn embed_reference_semantic_value<T: Scalar>(
    params: &SemanticParams<TensorData<T>>,
    img: &ReferenceImage<T>,
    l2: usize,
    c: usize,
) -> Result<TensorData<T>> {
    let mut tape = Tape::new();
    let ids = params.map_ref(&mut |_, p| tape.constant(p));
    let out = embed_reference_semantic(&mut tape, &ids, img, l2, c)?;
    Ok(tape.to_tensor(out))
}

// ── PNG persistence ──────────────────────────────────────────────────

fn to_u8<T: Scalar>(v: T) -> u8 {
    (v.as_f64().clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn save_image<T: Scalar>(img: &ReferenceImage<T>, path: &Path) -> Result<()> {
    let (h, w) = (img.height(), img.width());
    let bytes: Vec<u8> = img.tensor().data().iter().map(|&v| to_u8(v)).collect();
    let buf = image::RgbImage::from_raw(w as u32, h as u32, bytes)
        .ok_or_else(|| Error::Contract("image buffer size mismatch".into()))?;
    buf.save(path)
        .map_err(|e| Error::Corrupt(format!("png write failed: {e}")))?;
    Ok(())
}

pub fn load_image<T: Scalar>(path: &Path) -> Result<ReferenceImage<T>> {
    let img = image::open(path)
        .map_err(|e| Error::Corrupt(format!("png read failed: {e}")))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let data: Vec<T> = img
        .into_raw()
        .into_iter()
        .map(|b| T::from_f64(b as f64 / 255.0))
        .collect();
    ReferenceImage::new(TensorData::new(vec![h as usize, w as usize, 3], data)?)
}

/// Persist a clip as a directory of zero-padded frame PNGs.
pub fn save_clip<T: Scalar>(clip: &VideoClip<T>, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for i in 0..clip.frame_count() {
        save_image(&clip.frame(i), &dir.join(format!("frame_{i:04}.png")))?;
    }
    Ok(())
}

pub fn load_clip<T: Scalar>(dir: &Path) -> Result<VideoClip<T>> {
    let mut frames: Vec<ReferenceImage<T>> = Vec::new();
    loop {
        let path = dir.join(format!("frame_{:04}.png", frames.len()));
        if !path.exists() {
            break;
        }
        frames.push(load_image(&path)?);
    }
    if frames.is_empty() {
        return Err(Error::Corrupt(format!(
            "no frame_0000.png under {}",
            dir.display()
        )));
    }
    let (h, w) = (frames[0].height(), frames[0].width());
    let mut data = Vec::with_capacity(frames.len() * h * w * 3);
    for f in &frames {
        if f.height() != h || f.width() != w {
            return Err(Error::Corrupt("inconsistent frame sizes in clip".into()));
        }
        data.extend_from_slice(f.tensor().data());
    }
    VideoClip::new(TensorData::new(vec![frames.len(), h, w, 3], data)?)
}
