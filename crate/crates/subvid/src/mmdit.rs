//! Dual-stream transformer with window attention over video tokens and
//! dynamic injection of reference and text tokens into every window.
//!
//! Per block: video Q/K/V are partitioned into fixed-size windows; the
//! reference-latent, text, and semantic-token Q/K/V are appended to every
//! window's attention group; self-attention runs independently per group;
//! the injected tokens' per-window outputs are averaged back into single
//! rows so stream lengths never change across a block.

use crate::encoders::{SemanticParams, TextEmbedParams};
use crate::error::{Error, Result};
use crate::tensor::{Id, Scalar, Tape, TensorData};
use serde::{Deserialize, Serialize};

/// Structural hyperparameters of the velocity model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Model channel dim c.
    pub channels: usize,
    pub heads: usize,
    pub depth: usize,
    /// Video tokens per attention window.
    pub window: usize,
    /// Video frames t.
    pub frames: usize,
    /// Latent grid height/width (pixels / patch).
    pub latent_h: usize,
    pub latent_w: usize,
    /// Codec patch size p; latent channels are 3·p².
    pub patch: usize,
    pub l1_max: usize,
    /// Semantic tokens per reference image.
    pub l2_per_ref: usize,
    pub mlp_ratio: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 64,
            heads: 4,
            depth: 4,
            window: 9,
            frames: 8,
            latent_h: 4,
            latent_w: 4,
            patch: 4,
            l1_max: crate::encoders::L1_MAX,
            l2_per_ref: 4,
            mlp_ratio: 4,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.heads == 0 || !self.channels.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "channels {} must be a positive multiple of heads {}",
                self.channels, self.heads
            )));
        }
        let hd = self.head_dim();
        if !hd.is_multiple_of(2) || hd < 6 {
            return Err(Error::Config(format!(
                "head dim {hd} cannot host three rotary axes (needs even, >= 6)"
            )));
        }
        if self.window < 1 {
            return Err(Error::Config("window size must be >= 1".into()));
        }
        if self.frames < 1 || self.latent_h < 1 || self.latent_w < 1 {
            return Err(Error::Config("latent grid must be non-empty".into()));
        }
        if self.patch < 1 {
            return Err(Error::Config("patch size must be >= 1".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }

    pub fn c_lat(&self) -> usize {
        3 * self.patch * self.patch
    }

    pub fn tokens_per_frame(&self) -> usize {
        self.latent_h * self.latent_w
    }

    pub fn video_tokens(&self) -> usize {
        self.frames * self.tokens_per_frame()
    }

    /// Rotary pairs per (frame, row, col) axis; remainder pairs go to the
    /// leading axes so any even head dim >= 6 is usable.
    pub fn rope_axis_pairs(&self) -> [usize; 3] {
        let pairs = self.head_dim() / 2;
        let base = pairs / 3;
        let rem = pairs % 3;
        [
            base + usize::from(rem > 0),
            base + usize::from(rem > 1),
            base,
        ]
    }

    /// Micro configuration used by gradient-fidelity checks.
    pub fn micro() -> Self {
        Self {
            channels: 24,
            heads: 2,
            depth: 2,
            window: 9,
            frames: 2,
            latent_h: 4,
            latent_w: 4,
            patch: 2,
            l1_max: 4,
            l2_per_ref: 4,
            mlp_ratio: 4,
        }
    }
}

// ── parameter containers ─────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct Linear<P> {
    pub w: P,
    pub b: P,
}

impl<P> Linear<P> {
    pub fn map_ref<Q>(&self, prefix: &str, f: &mut impl FnMut(&str, &P) -> Q) -> Linear<Q> {
        Linear {
            w: f(&format!("{prefix}.w"), &self.w),
            b: f(&format!("{prefix}.b"), &self.b),
        }
    }
}

#[derive(Clone, Debug)]
pub struct BlockParams<P> {
    pub vis_qkv: Linear<P>,
    pub vis_out: Linear<P>,
    pub vis_mlp1: Linear<P>,
    pub vis_mlp2: Linear<P>,
    pub vis_mod: Linear<P>,
    pub txt_qkv: Linear<P>,
    pub txt_out: Linear<P>,
    pub txt_mlp1: Linear<P>,
    pub txt_mlp2: Linear<P>,
    pub txt_mod: Linear<P>,
}

impl<P> BlockParams<P> {
    pub fn map_ref<Q>(&self, prefix: &str, f: &mut impl FnMut(&str, &P) -> Q) -> BlockParams<Q> {
        BlockParams {
            vis_qkv: self.vis_qkv.map_ref(&format!("{prefix}.vis_qkv"), f),
            vis_out: self.vis_out.map_ref(&format!("{prefix}.vis_out"), f),
            vis_mlp1: self.vis_mlp1.map_ref(&format!("{prefix}.vis_mlp1"), f),
            vis_mlp2: self.vis_mlp2.map_ref(&format!("{prefix}.vis_mlp2"), f),
            vis_mod: self.vis_mod.map_ref(&format!("{prefix}.vis_mod"), f),
            txt_qkv: self.txt_qkv.map_ref(&format!("{prefix}.txt_qkv"), f),
            txt_out: self.txt_out.map_ref(&format!("{prefix}.txt_out"), f),
            txt_mlp1: self.txt_mlp1.map_ref(&format!("{prefix}.txt_mlp1"), f),
            txt_mlp2: self.txt_mlp2.map_ref(&format!("{prefix}.txt_mlp2"), f),
            txt_mod: self.txt_mod.map_ref(&format!("{prefix}.txt_mod"), f),
        }
    }
}

#[derive(Clone, Debug)]
pub struct MmditParams<P> {
    pub patch_in: Linear<P>,
    pub patch_out: Linear<P>,
    pub time1: Linear<P>,
    pub time2: Linear<P>,
    pub blocks: Vec<BlockParams<P>>,
}

impl<P> MmditParams<P> {
    pub fn map_ref<Q>(&self, f: &mut impl FnMut(&str, &P) -> Q) -> MmditParams<Q> {
        MmditParams {
            patch_in: self.patch_in.map_ref("mmdit.patch_in", f),
            patch_out: self.patch_out.map_ref("mmdit.patch_out", f),
            time1: self.time1.map_ref("mmdit.time1", f),
            time2: self.time2.map_ref("mmdit.time2", f),
            blocks: self
                .blocks
                .iter()
                .enumerate()
                .map(|(i, b)| b.map_ref(&format!("mmdit.block{i}"), f))
                .collect(),
        }
    }
}

/// Every learnable tensor in the system: the transformer, the text embedder,
/// the (frozen by default) semantic embedder, and the learned null
/// conditions used by condition dropout and classifier-free guidance.
#[derive(Clone, Debug)]
pub struct ModelParameters<P> {
    pub mmdit: MmditParams<P>,
    pub text: TextEmbedParams<P>,
    pub semantic: SemanticParams<P>,
    /// Per-channel null reference latent, broadcast over a frame grid.
    pub null_latent: P,
    /// Null prompt row.
    pub null_text: P,
    /// Null semantic token row.
    pub null_refc: P,
}

impl<P> ModelParameters<P> {
    pub fn map_ref<Q>(&self, f: &mut impl FnMut(&str, &P) -> Q) -> ModelParameters<Q> {
        ModelParameters {
            mmdit: self.mmdit.map_ref(f),
            text: self.text.map_ref(f),
            semantic: self.semantic.map_ref(f),
            null_latent: f("null.latent", &self.null_latent),
            null_text: f("null.text", &self.null_text),
            null_refc: f("null.refc", &self.null_refc),
        }
    }
}

/// Parameter names under this prefix stay frozen unless explicitly unfrozen.
pub const SEMANTIC_PREFIX: &str = "semantic.";

impl<T: Scalar> ModelParameters<TensorData<T>> {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        use rand::SeedableRng;
        cfg.validate()?;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let c = cfg.channels;
        let c_lat = cfg.c_lat();
        let hidden = c * cfg.mlp_ratio;
        let lin = |fan_in: usize, fan_out: usize, rng: &mut rand_chacha::ChaCha8Rng| {
            let mut w = TensorData::<T>::randn(vec![fan_in, fan_out], rng);
            let s = T::from_f64(1.0 / (fan_in as f64).sqrt());
            for v in w.data_mut() {
                *v = *v * s;
            }
            Linear {
                w,
                b: TensorData::zeros(vec![fan_out]),
            }
        };
        // zero-initialized modulation: scale/shift/gate all start at zero,
        // which makes every block the identity at initialization
        let zero_lin = |fan_in: usize, fan_out: usize| Linear {
            w: TensorData::<T>::zeros(vec![fan_in, fan_out]),
            b: TensorData::zeros(vec![fan_out]),
        };
        let mut blocks = Vec::with_capacity(cfg.depth);
        for _ in 0..cfg.depth {
            blocks.push(BlockParams {
                vis_qkv: lin(c, 3 * c, &mut rng),
                vis_out: lin(c, c, &mut rng),
                vis_mlp1: lin(c, hidden, &mut rng),
                vis_mlp2: lin(hidden, c, &mut rng),
                vis_mod: zero_lin(c, 6 * c),
                txt_qkv: lin(c, 3 * c, &mut rng),
                txt_out: lin(c, c, &mut rng),
                txt_mlp1: lin(c, hidden, &mut rng),
                txt_mlp2: lin(hidden, c, &mut rng),
                txt_mod: zero_lin(c, 6 * c),
            });
        }
        let mmdit = MmditParams {
            patch_in: lin(c_lat, c, &mut rng),
            patch_out: lin(c, c_lat, &mut rng),
            time1: lin(c, c, &mut rng),
            time2: lin(c, c, &mut rng),
            blocks,
        };
        let text = TextEmbedParams::init(
            crate::encoders::vocab::SIZE as usize,
            cfg.l1_max,
            c,
            &mut rng,
        );
        let semantic = SemanticParams::init(cfg.l2_per_ref, c, &mut rng);
        let small = |shape: Vec<usize>, rng: &mut rand_chacha::ChaCha8Rng| {
            let mut t = TensorData::<T>::randn(shape, rng);
            for v in t.data_mut() {
                *v = *v * T::from_f64(0.02);
            }
            t
        };
        Ok(Self {
            mmdit,
            text,
            semantic,
            null_latent: small(vec![c_lat], &mut rng),
            null_text: small(vec![c], &mut rng),
            null_refc: small(vec![c], &mut rng),
        })
    }

    /// Deterministically ordered (name, tensor) view of all parameters.
    pub fn named(&self) -> Vec<(String, TensorData<T>)> {
        let mut out = Vec::new();
        self.map_ref(&mut |name, p: &TensorData<T>| {
            out.push((name.to_string(), p.clone()));
        });
        out
    }

    /// Replace parameter values from a flat list in `named()` order.
    pub fn assign_from(&mut self, flat: &[TensorData<T>]) -> Result<()> {
        let mut idx = 0usize;
        let mut err = None;
        let updated = self.map_ref(&mut |name, p: &TensorData<T>| {
            let nv = flat.get(idx).cloned();
            idx += 1;
            match nv {
                Some(v) if v.shape() == p.shape() => v,
                Some(v) => {
                    err.get_or_insert_with(|| {
                        Error::Dimension(format!(
                            "parameter {name}: stored shape {:?} != expected {:?}",
                            v.shape(),
                            p.shape()
                        ))
                    });
                    p.clone()
                }
                None => {
                    err.get_or_insert_with(|| {
                        Error::Corrupt("parameter list shorter than model".into())
                    });
                    p.clone()
                }
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        if idx != flat.len() {
            return Err(Error::Corrupt("parameter list longer than model".into()));
        }
        *self = updated;
        Ok(())
    }

    /// Leaf every parameter into a tape. `trainable` decides requires_grad
    /// per parameter name.
    pub fn leaf_into(
        &self,
        tape: &mut Tape<T>,
        trainable: &impl Fn(&str) -> bool,
    ) -> ModelParameters<Id> {
        self.map_ref(&mut |name, p: &TensorData<T>| tape.leaf(p, trainable(name)))
    }

    pub fn cast<U: Scalar>(&self) -> ModelParameters<TensorData<U>> {
        self.map_ref(&mut |_, p: &TensorData<T>| p.cast::<U>())
    }
}

// ── token positions and patchify ─────────────────────────────────────

/// Raster-order (frame, row, col) positions: frame-major, then row, then col.
pub fn token_positions(frames: usize, h: usize, w: usize) -> Vec<(usize, usize, usize)> {
    let mut out = Vec::with_capacity(frames * h * w);
    for f in 0..frames {
        for r in 0..h {
            for c in 0..w {
                out.push((f, r, c));
            }
        }
    }
    out
}

/// Positions matching the model's stream raster: the video span is rasterized
/// spatial-major (row, col, frame) so each attention window covers one latent
/// site across the whole clip; reference frames follow frame-major.
pub fn stream_positions(cfg: &ModelConfig, total_frames: usize) -> Vec<(usize, usize, usize)> {
    let mut out = Vec::with_capacity(total_frames * cfg.tokens_per_frame());
    for r in 0..cfg.latent_h {
        for c in 0..cfg.latent_w {
            for f in 0..cfg.frames {
                out.push((f, r, c));
            }
        }
    }
    for f in cfg.frames..total_frames {
        for r in 0..cfg.latent_h {
            for c in 0..cfg.latent_w {
                out.push((f, r, c));
            }
        }
    }
    out
}

/// Transpose the leading `leading × trailing` video span of a token matrix
/// (frame-major ↔ spatial-major raster); reference-tail rows stay in place.
fn permute_video_span<T: Scalar>(
    tape: &mut Tape<T>,
    tokens: Id,
    leading: usize,
    trailing: usize,
) -> Result<Id> {
    let rows = tape.shape_of(tokens)[0];
    let ch = tape.shape_of(tokens)[1];
    let span = leading * trailing;
    let vid = tape.slice(tokens, 0, 0, span)?;
    let vid = tape.reshape(vid, &[leading, trailing, ch])?;
    let vid = tape.permute(vid, &[1, 0, 2])?;
    let vid = tape.reshape(vid, &[span, ch])?;
    if span == rows {
        Ok(vid)
    } else {
        let tail = tape.slice(tokens, 0, span, rows)?;
        tape.concat(&[vid, tail], 0)
    }
}

/// Flatten a latent frame grid into tokens and project to model dim.
pub fn patchify<T: Scalar>(
    tape: &mut Tape<T>,
    grid: Id,
    patch_in: &Linear<Id>,
) -> Result<Id> {
    let s = tape.shape_of(grid).to_vec();
    if s.len() != 4 {
        return Err(Error::Dimension(format!(
            "patchify expects [frames,h,w,c_lat], got {s:?}"
        )));
    }
    let n = s[0] * s[1] * s[2];
    let flat = tape.reshape(grid, &[n, s[3]])?;
    tape.linear(flat, patch_in.w, patch_in.b)
}

/// Project tokens back to latent channels and restore the frame grid.
pub fn unpatchify<T: Scalar>(
    tape: &mut Tape<T>,
    tokens: Id,
    patch_out: &Linear<Id>,
    frames: usize,
    h: usize,
    w: usize,
) -> Result<Id> {
    let proj = tape.linear(tokens, patch_out.w, patch_out.b)?;
    let c_lat = tape.shape_of(proj)[1];
    tape.reshape(proj, &[frames, h, w, c_lat])
}

// ── rotary position embedding ────────────────────────────────────────

/// Per-token cos/sin tables for three-axis rotary embedding, shaped
/// [N, 1, head_dim] for broadcast over heads. Within each axis segment the
/// two halves are rotation pairs.
pub fn rope_tables<T: Scalar>(
    positions: &[(usize, usize, usize)],
    cfg: &ModelConfig,
) -> Result<(TensorData<T>, TensorData<T>)> {
    let hd = cfg.head_dim();
    if !hd.is_multiple_of(2) || hd < 6 {
        return Err(Error::Config(format!(
            "head dim {hd} cannot host three rotary axes"
        )));
    }
    let axis_pairs = cfg.rope_axis_pairs();
    let n = positions.len();
    let mut cos = TensorData::full(vec![n, 1, hd], T::one());
    let mut sin = TensorData::zeros(vec![n, 1, hd]);
    for (ti, &(f, r, c)) in positions.iter().enumerate() {
        let coords = [f as f64, r as f64, c as f64];
        let mut offset = 0usize;
        for (axis, &pairs) in axis_pairs.iter().enumerate() {
            for j in 0..pairs {
                let freq = 10000f64.powf(-(j as f64) / pairs as f64);
                let angle = coords[axis] * freq;
                let (s, co) = angle.sin_cos();
                let a = ti * hd + offset + j;
                let b = a + pairs;
                cos.data_mut()[a] = T::from_f64(co);
                cos.data_mut()[b] = T::from_f64(co);
                sin.data_mut()[a] = T::from_f64(s);
                sin.data_mut()[b] = T::from_f64(s);
            }
            offset += 2 * pairs;
        }
    }
    Ok((cos, sin))
}

/// Apply the rotation `x*cos + rotate_half(x)*sin` where rotate_half swaps
/// the two halves of each axis segment with a sign flip.
pub fn rope_rotate<T: Scalar>(
    tape: &mut Tape<T>,
    x: Id,
    cos: Id,
    sin: Id,
    cfg: &ModelConfig,
) -> Result<Id> {
    let s = tape.shape_of(x).to_vec();
    let hd = *s.last().unwrap();
    if hd != cfg.head_dim() {
        return Err(Error::Dimension(format!(
            "rope input last dim {hd} != head dim {}",
            cfg.head_dim()
        )));
    }
    let axis_pairs = cfg.rope_axis_pairs();
    let last = s.len() - 1;
    let mut pieces = Vec::with_capacity(6);
    let mut offset = 0usize;
    for &pairs in &axis_pairs {
        let first = tape.slice(x, last, offset, offset + pairs)?;
        let second = tape.slice(x, last, offset + pairs, offset + 2 * pairs)?;
        let neg_second = tape.scale(second, -T::one())?;
        pieces.push(neg_second);
        pieces.push(first);
        offset += 2 * pairs;
    }
    let rotated = tape.concat(&pieces, last)?;
    let xc = tape.mul(x, cos)?;
    let rs = tape.mul(rotated, sin)?;
    tape.add(xc, rs)
}

// ── window layout and injection ──────────────────────────────────────

/// One window of video tokens: a contiguous raster-order span, padded with
/// masked slots up to the window size in the final window.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WindowSpan {
    pub start: usize,
    pub end: usize,
}

impl WindowSpan {
    pub fn len(&self) -> usize {
        self.end - self.start
    }
    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WindowLayout {
    pub windows: Vec<WindowSpan>,
    pub window_size: usize,
    pub video_tokens: usize,
}

impl WindowLayout {
    /// Masked (padded) slot count of window `i`.
    pub fn pad(&self, i: usize) -> usize {
        self.window_size - self.windows[i].len()
    }
}

/// Partition `video_tokens` raster-ordered tokens into ceil(count/W) windows.
pub fn partition_windows(video_tokens: usize, window: usize) -> Result<WindowLayout> {
    if window < 1 {
        return Err(Error::Config("window size must be >= 1".into()));
    }
    if video_tokens == 0 {
        return Err(Error::Contract(
            "cannot partition an empty video token sequence".into(),
        ));
    }
    let mut windows = Vec::with_capacity(video_tokens.div_ceil(window));
    let mut start = 0;
    while start < video_tokens {
        let end = (start + window).min(video_tokens);
        windows.push(WindowSpan { start, end });
        start = end;
    }
    Ok(WindowLayout {
        windows,
        window_size: window,
        video_tokens,
    })
}

/// A window layout augmented with the injected token sets that join every
/// window's attention group: reference latent tokens, text tokens, and
/// semantic tokens, in that order after the video tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionGroups {
    pub layout: WindowLayout,
    pub ref_v_tokens: usize,
    pub text_tokens: usize,
    pub ref_c_tokens: usize,
}

pub fn inject_tokens(
    layout: WindowLayout,
    ref_v_tokens: usize,
    text_tokens: usize,
    ref_c_tokens: usize,
) -> AttentionGroups {
    AttentionGroups {
        layout,
        ref_v_tokens,
        text_tokens,
        ref_c_tokens,
    }
}

impl AttentionGroups {
    pub fn injected(&self) -> usize {
        self.ref_v_tokens + self.text_tokens + self.ref_c_tokens
    }

    /// Attention group size of any window, masked padding included.
    pub fn group_size(&self, _i: usize) -> usize {
        self.layout.window_size + self.injected()
    }
}

// ── windowed joint attention ─────────────────────────────────────────

const MASK_NEG: f64 = -1.0e30;

/// Per-window joint self-attention over augmented groups.
///
/// `q/k/v_vis` are [video+ref_v, heads, hd] (RoPE already applied to q/k);
/// `q/k/v_txt` are [l1+l2, heads, hd]. Returns flattened [N, c] outputs for
/// both streams, with injected-token outputs averaged across windows.
#[allow(clippy::too_many_arguments)]
pub fn windowed_joint_attention<T: Scalar>(
    tape: &mut Tape<T>,
    groups: &AttentionGroups,
    q_vis: Id,
    k_vis: Id,
    v_vis: Id,
    q_txt: Id,
    k_txt: Id,
    v_txt: Id,
) -> Result<(Id, Id)> {
    let layout = &groups.layout;
    if layout.windows.is_empty() {
        return Err(Error::Contract("window count zero".into()));
    }
    let (heads, hd) = {
        let s = tape.shape_of(q_vis);
        (s[1], s[2])
    };
    let nv = tape.shape_of(q_vis)[0];
    let nt = tape.shape_of(q_txt)[0];
    let video = layout.video_tokens;
    if nv != video + groups.ref_v_tokens {
        return Err(Error::Contract(format!(
            "visual sequence {nv} != video {video} + ref_v {}",
            groups.ref_v_tokens
        )));
    }
    if nt != groups.text_tokens + groups.ref_c_tokens {
        return Err(Error::Contract(format!(
            "text sequence {nt} != text {} + ref_c {}",
            groups.text_tokens, groups.ref_c_tokens
        )));
    }
    let scale = T::from_f64(1.0 / (hd as f64).sqrt());
    let l1 = groups.text_tokens;

    // injected slices are shared across windows
    let slice3 = |tape: &mut Tape<T>, x: Id, a: usize, b: usize| tape.slice(x, 0, a, b);
    let rq = slice3(tape, q_vis, video, nv)?;
    let rk = slice3(tape, k_vis, video, nv)?;
    let rv = slice3(tape, v_vis, video, nv)?;
    let tq = slice3(tape, q_txt, 0, l1)?;
    let tk = slice3(tape, k_txt, 0, l1)?;
    let tv = slice3(tape, v_txt, 0, l1)?;
    let cq = slice3(tape, q_txt, l1, nt)?;
    let ck = slice3(tape, k_txt, l1, nt)?;
    let cv = slice3(tape, v_txt, l1, nt)?;

    let mut video_outs = Vec::with_capacity(layout.windows.len());
    let mut injected_sum: Option<Id> = None;
    for (wi, span) in layout.windows.iter().enumerate() {
        let pad = layout.pad(wi);
        let build = |tape: &mut Tape<T>, base: Id, r: Id, t2: Id, c2: Id| -> Result<Id> {
            let win = tape.slice(base, 0, span.start, span.end)?;
            let mut parts = vec![win];
            if pad > 0 {
                let zeros = TensorData::zeros(vec![pad, heads, hd]);
                parts.push(tape.constant(&zeros));
            }
            parts.push(r);
            parts.push(t2);
            parts.push(c2);
            tape.concat(&parts, 0)
        };
        let qg = build(tape, q_vis, rq, tq, cq)?;
        let kg = build(tape, k_vis, rk, tk, ck)?;
        let vg = build(tape, v_vis, rv, tv, cv)?;
        let g = tape.shape_of(qg)[0];

        let qh = tape.permute(qg, &[1, 0, 2])?; // [heads, G, hd]
        let kt = tape.permute(kg, &[1, 2, 0])?; // [heads, hd, G]
        let vh = tape.permute(vg, &[1, 0, 2])?;
        let scores = tape.matmul(qh, kt)?;
        let scaled = tape.scale(scores, scale)?;
        let masked = if pad > 0 {
            // padded key slots get -inf-like logits so their softmax weight
            // underflows to exactly zero
            let mut mask = TensorData::zeros(vec![g]);
            for j in span.len()..span.len() + pad {
                mask.data_mut()[j] = T::from_f64(MASK_NEG);
            }
            let m = tape.constant(&mask);
            tape.add(scaled, m)?
        } else {
            scaled
        };
        let attn = tape.softmax(masked)?;
        let mixed = tape.matmul(attn, vh)?; // [heads, G, hd]
        let out = tape.permute(mixed, &[1, 0, 2])?; // [G, heads, hd]

        let vout = tape.slice(out, 0, 0, span.len())?;
        video_outs.push(vout);
        let inj = tape.slice(out, 0, span.len() + pad, g)?;
        injected_sum = Some(match injected_sum {
            Some(acc) => tape.add(acc, inj)?,
            None => inj,
        });
    }

    let video_part = tape.concat(&video_outs, 0)?;
    let k = layout.windows.len();
    let inj_avg = tape.scale(
        injected_sum.expect("at least one window"),
        T::from_f64(1.0 / k as f64),
    )?;
    let r_out = tape.slice(inj_avg, 0, 0, groups.ref_v_tokens)?;
    let t_out = tape.slice(
        inj_avg,
        0,
        groups.ref_v_tokens,
        groups.ref_v_tokens + l1,
    )?;
    let c_out = tape.slice(
        inj_avg,
        0,
        groups.ref_v_tokens + l1,
        groups.injected(),
    )?;

    let vis_seq = tape.concat(&[video_part, r_out], 0)?;
    let txt_seq = tape.concat(&[t_out, c_out], 0)?;
    let vis_flat = tape.reshape(vis_seq, &[nv, heads * hd])?;
    let txt_flat = tape.reshape(txt_seq, &[nt, heads * hd])?;
    Ok((vis_flat, txt_flat))
}

// ── transformer block and full model ─────────────────────────────────

struct Modulation {
    shift1: Id,
    scale1: Id,
    gate1: Id,
    shift2: Id,
    scale2: Id,
    gate2: Id,
}

fn modulation<T: Scalar>(tape: &mut Tape<T>, time_emb: Id, lin: &Linear<Id>) -> Result<Modulation> {
    let c = tape.shape_of(lin.w)[0];
    let all = tape.linear(time_emb, lin.w, lin.b)?; // [1, 6c]
    let mut parts = Vec::with_capacity(6);
    for i in 0..6 {
        parts.push(tape.slice(all, 1, i * c, (i + 1) * c)?);
    }
    Ok(Modulation {
        shift1: parts[0],
        scale1: parts[1],
        gate1: parts[2],
        shift2: parts[3],
        scale2: parts[4],
        gate2: parts[5],
    })
}

fn modulate<T: Scalar>(tape: &mut Tape<T>, x: Id, shift: Id, scale: Id) -> Result<Id> {
    let one = tape.scalar(T::one());
    let one_plus = tape.add(scale, one)?;
    let scaled = tape.mul(x, one_plus)?;
    tape.add(scaled, shift)
}

struct LnConsts {
    gamma: Id,
    beta: Id,
}

fn ln_consts<T: Scalar>(tape: &mut Tape<T>, c: usize) -> LnConsts {
    let gamma = tape.constant(&TensorData::full(vec![c], T::one()));
    let beta = tape.constant(&TensorData::zeros(vec![c]));
    LnConsts { gamma, beta }
}

const LN_EPS: f64 = 1e-6;

/// One dual-stream block: windowed joint attention with injection, then
/// per-stream MLPs, both as gated residual branches with timestep-adaptive
/// modulation. With zero-initialized modulation the block is the identity.
#[allow(clippy::too_many_arguments)]
pub fn mmdit_block<T: Scalar>(
    tape: &mut Tape<T>,
    vis: Id,
    txt: Id,
    time_emb: Id,
    bp: &BlockParams<Id>,
    cfg: &ModelConfig,
    groups: &AttentionGroups,
    rope_cos: Id,
    rope_sin: Id,
) -> Result<(Id, Id)> {
    let c = cfg.channels;
    let (heads, hd) = (cfg.heads, cfg.head_dim());
    let ln = ln_consts(tape, c);
    let eps = T::from_f64(LN_EPS);

    let vis_mod = modulation(tape, time_emb, &bp.vis_mod)?;
    let txt_mod = modulation(tape, time_emb, &bp.txt_mod)?;

    // attention sublayer
    let qkv = |tape: &mut Tape<T>,
               x: Id,
               m: &Modulation,
               lin: &Linear<Id>,
               ln: &LnConsts|
     -> Result<(Id, Id, Id)> {
        let n = tape.shape_of(x)[0];
        let normed = tape.layer_norm(x, ln.gamma, ln.beta, eps)?;
        let xm = modulate(tape, normed, m.shift1, m.scale1)?;
        let all = tape.linear(xm, lin.w, lin.b)?;
        let q = tape.slice(all, 1, 0, c)?;
        let k = tape.slice(all, 1, c, 2 * c)?;
        let v = tape.slice(all, 1, 2 * c, 3 * c)?;
        let q = tape.reshape(q, &[n, heads, hd])?;
        let k = tape.reshape(k, &[n, heads, hd])?;
        let v = tape.reshape(v, &[n, heads, hd])?;
        Ok((q, k, v))
    };
    let (qv, kv, vv) = qkv(tape, vis, &vis_mod, &bp.vis_qkv, &ln)?;
    let (qt, kt, vt) = qkv(tape, txt, &txt_mod, &bp.txt_qkv, &ln)?;
    // RoPE on visual tokens only
    let qv = rope_rotate(tape, qv, rope_cos, rope_sin, cfg)?;
    let kv = rope_rotate(tape, kv, rope_cos, rope_sin, cfg)?;

    let (attn_vis, attn_txt) =
        windowed_joint_attention(tape, groups, qv, kv, vv, qt, kt, vt)?;
    let vis_proj = tape.linear(attn_vis, bp.vis_out.w, bp.vis_out.b)?;
    let txt_proj = tape.linear(attn_txt, bp.txt_out.w, bp.txt_out.b)?;
    let vis_gated = tape.mul(vis_proj, vis_mod.gate1)?;
    let txt_gated = tape.mul(txt_proj, txt_mod.gate1)?;
    let vis = tape.add(vis, vis_gated)?;
    let txt = tape.add(txt, txt_gated)?;

    // MLP sublayer
    let mlp = |tape: &mut Tape<T>,
               x: Id,
               m: &Modulation,
               l1: &Linear<Id>,
               l2: &Linear<Id>,
               ln: &LnConsts|
     -> Result<Id> {
        let normed = tape.layer_norm(x, ln.gamma, ln.beta, eps)?;
        let xm = modulate(tape, normed, m.shift2, m.scale2)?;
        let h = tape.linear(xm, l1.w, l1.b)?;
        let a = tape.silu(h)?;
        let o = tape.linear(a, l2.w, l2.b)?;
        let gated = tape.mul(o, m.gate2)?;
        tape.add(x, gated)
    };
    let vis = mlp(tape, vis, &vis_mod, &bp.vis_mlp1, &bp.vis_mlp2, &ln)?;
    let txt = mlp(tape, txt, &txt_mod, &bp.txt_mlp1, &bp.txt_mlp2, &ln)?;
    Ok((vis, txt))
}

/// Sinusoidal features of a timestep, shaped [1, c].
pub fn timestep_features<T: Scalar>(t: f64, c: usize) -> TensorData<T> {
    let half = c / 2;
    let mut out = TensorData::zeros(vec![1, c]);
    for i in 0..half {
        let freq = 10000f64.powf(-(i as f64) / half as f64);
        let angle = t * 1000.0 * freq;
        out.data_mut()[i] = T::from_f64(angle.sin());
        out.data_mut()[half + i] = T::from_f64(angle.cos());
    }
    out
}

/// Full velocity model: patchify, timestep embedding, `depth` dual-stream
/// blocks, final norm and projection back to latent channels. The output
/// covers all t+n frames, reference tail included.
pub fn model_forward<T: Scalar>(
    tape: &mut Tape<T>,
    params: &MmditParams<Id>,
    cfg: &ModelConfig,
    vis_grid: Id,
    timestep: f64,
    txt: Id,
    l1: usize,
) -> Result<Id> {
    if !(timestep > 0.0 && timestep <= 1.0) {
        return Err(Error::Contract(format!(
            "timestep {timestep} outside (0, 1]"
        )));
    }
    let s = tape.shape_of(vis_grid).to_vec();
    if s.len() != 4 || s[1] != cfg.latent_h || s[2] != cfg.latent_w || s[3] != cfg.c_lat() {
        return Err(Error::Dimension(format!(
            "visual grid {s:?} does not match config grid [{}x{}x{}]",
            cfg.latent_h,
            cfg.latent_w,
            cfg.c_lat()
        )));
    }
    let total_frames = s[0];
    if total_frames < cfg.frames {
        return Err(Error::Dimension(format!(
            "stream has {total_frames} frames, fewer than configured t={}",
            cfg.frames
        )));
    }
    let txt_rows = tape.shape_of(txt)[0];
    if l1 > txt_rows {
        return Err(Error::Contract(format!(
            "l1 {l1} exceeds text rows {txt_rows}"
        )));
    }

    let mut vis = patchify(tape, vis_grid, &params.patch_in)?;
    // spatial-major video raster: windows then cover one latent site across
    // the whole clip, putting each trajectory inside a single window
    vis = permute_video_span(tape, vis, cfg.frames, cfg.tokens_per_frame())?;
    let mut txt_x = txt;

    let tf = timestep_features::<T>(timestep, cfg.channels);
    let tf = tape.constant(&tf);
    let h1 = tape.linear(tf, params.time1.w, params.time1.b)?;
    let a1 = tape.silu(h1)?;
    let time_emb = tape.linear(a1, params.time2.w, params.time2.b)?;

    let positions = stream_positions(cfg, total_frames);
    let (cos, sin) = rope_tables::<T>(&positions, cfg)?;
    let cos = tape.constant(&cos);
    let sin = tape.constant(&sin);

    let video_tokens = cfg.video_tokens();
    let ref_v_tokens = (total_frames - cfg.frames) * cfg.tokens_per_frame();
    let layout = partition_windows(video_tokens, cfg.window)?;
    let groups = inject_tokens(layout, ref_v_tokens, l1, txt_rows - l1);

    for bp in &params.blocks {
        let (nv, nt) = mmdit_block(tape, vis, txt_x, time_emb, bp, cfg, &groups, cos, sin)?;
        vis = nv;
        txt_x = nt;
    }

    vis = permute_video_span(tape, vis, cfg.tokens_per_frame(), cfg.frames)?;
    let ln = ln_consts(tape, cfg.channels);
    let eps = T::from_f64(LN_EPS);
    let normed = tape.layer_norm(vis, ln.gamma, ln.beta, eps)?;
    unpatchify(
        tape,
        normed,
        &params.patch_out,
        total_frames,
        cfg.latent_h,
        cfg.latent_w,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn token_positions_are_raster_ordered() {
        let pos = token_positions(2, 2, 2);
        assert_eq!(pos.len(), 8);
        assert_eq!(pos[0], (0, 0, 0));
        assert_eq!(pos[5], (1, 0, 1));
        assert_eq!(pos[7], (1, 1, 1));
    }

    #[test]
    fn partition_window_cases() {
        let l = partition_windows(18, 9).unwrap();
        assert_eq!(l.windows.len(), 2);
        assert!(l.windows.iter().all(|w| w.len() == 9));

        let l = partition_windows(9, 9).unwrap();
        assert_eq!(l.windows.len(), 1);
        assert_eq!(l.pad(0), 0);

        let l = partition_windows(20, 9).unwrap();
        assert_eq!(l.windows.len(), 3);
        assert_eq!(l.windows[2].len(), 2);
        assert_eq!(l.pad(2), 7);

        assert!(matches!(
            partition_windows(0, 9),
            Err(crate::error::Error::Contract(_))
        ));
    }

    #[test]
    fn partition_covers_every_token_exactly_once() {
        for count in 1..60usize {
            for window in 1..12usize {
                let l = partition_windows(count, window).unwrap();
                let mut seen = vec![0u8; count];
                for w in &l.windows {
                    assert!(w.len() <= window);
                    for s in &mut seen[w.start..w.end] {
                        *s += 1;
                    }
                }
                assert!(seen.iter().all(|&c| c == 1));
            }
        }
    }

    #[test]
    fn inject_group_sizes() {
        let l = partition_windows(9, 9).unwrap();
        let g = inject_tokens(l, 4, 4, 4);
        assert_eq!(g.group_size(0), 21);
        let l2 = partition_windows(18, 9).unwrap();
        let g2 = inject_tokens(l2, 0, 0, 0);
        assert_eq!(g2.injected(), 0);
        assert_eq!(g2.group_size(0), 9);
    }

    fn micro_cfg() -> ModelConfig {
        ModelConfig {
            channels: 12,
            heads: 2,
            depth: 1,
            window: 3,
            frames: 1,
            latent_h: 2,
            latent_w: 2,
            patch: 2,
            l1_max: 4,
            l2_per_ref: 2,
            mlp_ratio: 2,
        }
    }

    #[test]
    fn rope_identity_at_origin_and_isometry() {
        let cfg = micro_cfg();
        let hd = cfg.head_dim();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = TensorData::<f64>::randn(vec![3, 2, hd], &mut rng);
        let positions = vec![(0, 0, 0), (1, 2, 3), (4, 0, 1)];
        let (cos, sin) = rope_tables::<f64>(&positions, &cfg).unwrap();
        let mut tape = Tape::new();
        let xid = tape.constant(&x);
        let c = tape.constant(&cos);
        let s = tape.constant(&sin);
        let r = rope_rotate(&mut tape, xid, c, s, &cfg).unwrap();
        let out = tape.data_of(r);
        // token 0 at position (0,0,0) is unchanged
        assert_eq!(&out[..2 * hd], &x.data()[..2 * hd]);
        // rotation preserves norms per (token, head)
        for t in 0..3 {
            for h in 0..2 {
                let base = (t * 2 + h) * hd;
                let n_in: f64 = x.data()[base..base + hd].iter().map(|v| v * v).sum();
                let n_out: f64 = out[base..base + hd].iter().map(|v| v * v).sum();
                assert!((n_in.sqrt() - n_out.sqrt()).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn rope_attention_depends_only_on_relative_position() {
        // brute force: dot(rot(q,p1), rot(k,p2)) must match for pairs with
        // equal per-axis differences
        let cfg = micro_cfg();
        let hd = cfg.head_dim();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q = TensorData::<f64>::randn(vec![1, 1, hd], &mut rng);
        let k = TensorData::<f64>::randn(vec![1, 1, hd], &mut rng);
        let dot_at = |p1: (usize, usize, usize), p2: (usize, usize, usize)| -> f64 {
            let (c1, s1) = rope_tables::<f64>(&[p1], &cfg).unwrap();
            let (c2, s2) = rope_tables::<f64>(&[p2], &cfg).unwrap();
            let mut tape = Tape::new();
            let qi = tape.constant(&q);
            let ki = tape.constant(&k);
            let c1 = tape.constant(&c1);
            let s1 = tape.constant(&s1);
            let c2 = tape.constant(&c2);
            let s2 = tape.constant(&s2);
            let qr = rope_rotate(&mut tape, qi, c1, s1, &cfg).unwrap();
            let kr = rope_rotate(&mut tape, ki, c2, s2, &cfg).unwrap();
            tape.data_of(qr)
                .iter()
                .zip(tape.data_of(kr))
                .map(|(a, b)| a * b)
                .sum()
        };
        let d1 = dot_at((2, 3, 1), (4, 5, 2));
        let d2 = dot_at((0, 0, 0), (2, 2, 1));
        let d3 = dot_at((5, 1, 3), (7, 3, 4));
        assert!((d1 - d2).abs() < 1e-9, "{d1} vs {d2}");
        assert!((d1 - d3).abs() < 1e-9, "{d1} vs {d3}");
        // and it must differ for a different relative offset
        let d4 = dot_at((0, 0, 0), (1, 0, 0));
        assert!((d1 - d4).abs() > 1e-6);
    }

    fn randn3(n: usize, heads: usize, hd: usize, seed: u64) -> TensorData<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        TensorData::randn(vec![n, heads, hd], &mut rng)
    }

    /// Plain-f64 attention oracle over one group of row vectors.
    fn attention_oracle(q: &[Vec<f64>], k: &[Vec<f64>], v: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let d = q[0].len() as f64;
        let mut out = Vec::with_capacity(q.len());
        for qi in q {
            let logits: Vec<f64> = k
                .iter()
                .map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / d.sqrt())
                .collect();
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
            let z: f64 = exps.iter().sum();
            let mut row = vec![0.0; v[0].len()];
            for (w, vj) in exps.iter().zip(v) {
                for (r, x) in row.iter_mut().zip(vj) {
                    *r += w / z * x;
                }
            }
            out.push(row);
        }
        out
    }

    #[test]
    fn single_token_group_attention_is_identity_mixing() {
        let groups = inject_tokens(partition_windows(1, 9).unwrap(), 0, 0, 0);
        let q = randn3(1, 1, 6, 10);
        let k = randn3(1, 1, 6, 11);
        let v = randn3(1, 1, 6, 12);
        let mut tape = Tape::new();
        let qi = tape.constant(&q);
        let ki = tape.constant(&k);
        let vi = tape.constant(&v);
        let et = tape.constant(&TensorData::zeros(vec![0, 1, 6]));
        let (vis, _txt) =
            windowed_joint_attention(&mut tape, &groups, qi, ki, vi, et, et, et).unwrap();
        // softmax over a single key is 1, so the output equals V
        for (a, b) in tape.data_of(vis).iter().zip(v.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn three_token_group_matches_brute_force_oracle() {
        let groups = inject_tokens(partition_windows(3, 9).unwrap(), 0, 0, 0);
        let q = randn3(3, 1, 6, 20);
        let k = randn3(3, 1, 6, 21);
        let v = randn3(3, 1, 6, 22);
        let mut tape = Tape::new();
        let qi = tape.constant(&q);
        let ki = tape.constant(&k);
        let vi = tape.constant(&v);
        let et = tape.constant(&TensorData::zeros(vec![0, 1, 6]));
        let (vis, _) =
            windowed_joint_attention(&mut tape, &groups, qi, ki, vi, et, et, et).unwrap();
        let rows = |t: &TensorData<f64>| -> Vec<Vec<f64>> {
            t.data().chunks(6).map(|c| c.to_vec()).collect()
        };
        let expected = attention_oracle(&rows(&q), &rows(&k), &rows(&v));
        for (got, want) in tape.data_of(vis).chunks(6).zip(&expected) {
            for (a, b) in got.iter().zip(want) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn masked_padding_slots_contribute_zero_weight() {
        // 4 video tokens with window 3: second window has 1 real + 2 masked.
        // Outputs must match an oracle computed without any padding.
        let groups = inject_tokens(partition_windows(4, 3).unwrap(), 0, 0, 0);
        let q = randn3(4, 1, 6, 30);
        let k = randn3(4, 1, 6, 31);
        let v = randn3(4, 1, 6, 32);
        let mut tape = Tape::new();
        let qi = tape.constant(&q);
        let ki = tape.constant(&k);
        let vi = tape.constant(&v);
        let et = tape.constant(&TensorData::zeros(vec![0, 1, 6]));
        let (vis, _) =
            windowed_joint_attention(&mut tape, &groups, qi, ki, vi, et, et, et).unwrap();
        let rows = |t: &TensorData<f64>, a: usize, b: usize| -> Vec<Vec<f64>> {
            t.data()[a * 6..b * 6].chunks(6).map(|c| c.to_vec()).collect()
        };
        let w1 = attention_oracle(&rows(&q, 0, 3), &rows(&k, 0, 3), &rows(&v, 0, 3));
        let w2 = attention_oracle(&rows(&q, 3, 4), &rows(&k, 3, 4), &rows(&v, 3, 4));
        let expected: Vec<f64> = w1.into_iter().chain(w2).flatten().collect();
        for (a, b) in tape.data_of(vis).iter().zip(&expected) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn injected_tokens_join_every_window_and_average() {
        // 2 windows of video tokens plus 1 ref_v token; the ref_v output must
        // be the arithmetic mean of its per-window oracle outputs.
        let video = 4usize;
        let groups = inject_tokens(partition_windows(video, 2).unwrap(), 1, 0, 0);
        let q = randn3(5, 1, 6, 40); // 4 video + 1 ref_v
        let k = randn3(5, 1, 6, 41);
        let v = randn3(5, 1, 6, 42);
        let mut tape = Tape::new();
        let qi = tape.constant(&q);
        let ki = tape.constant(&k);
        let vi = tape.constant(&v);
        let et = tape.constant(&TensorData::zeros(vec![0, 1, 6]));
        let (vis, _) =
            windowed_joint_attention(&mut tape, &groups, qi, ki, vi, et, et, et).unwrap();
        let row = |t: &TensorData<f64>, i: usize| t.data()[i * 6..(i + 1) * 6].to_vec();
        let group = |idx: &[usize], t: &TensorData<f64>| -> Vec<Vec<f64>> {
            idx.iter().map(|&i| row(t, i)).collect()
        };
        // window 0 group: video {0,1} + ref {4}; window 1: video {2,3} + ref {4}
        let o0 = attention_oracle(&group(&[0, 1, 4], &q), &group(&[0, 1, 4], &k), &group(&[0, 1, 4], &v));
        let o1 = attention_oracle(&group(&[2, 3, 4], &q), &group(&[2, 3, 4], &k), &group(&[2, 3, 4], &v));
        let mut expected: Vec<f64> = Vec::new();
        expected.extend(&o0[0]);
        expected.extend(&o0[1]);
        expected.extend(&o1[0]);
        expected.extend(&o1[1]);
        // averaged ref_v output
        for j in 0..6 {
            expected.push((o0[2][j] + o1[2][j]) / 2.0);
        }
        for (a, b) in tape.data_of(vis).iter().zip(&expected) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    fn micro_streams(
        cfg: &ModelConfig,
        n_ref_frames: usize,
        l1: usize,
        l2: usize,
        seed: u64,
    ) -> (TensorData<f64>, TensorData<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid = TensorData::randn(
            vec![cfg.frames + n_ref_frames, cfg.latent_h, cfg.latent_w, cfg.c_lat()],
            &mut rng,
        );
        let txt = TensorData::randn(vec![l1 + l2, cfg.channels], &mut rng);
        (grid, txt)
    }

    #[test]
    fn block_is_identity_at_init() {
        let cfg = micro_cfg();
        let params = ModelParameters::<TensorData<f64>>::init(&cfg, 7).unwrap();
        let (grid, txt) = micro_streams(&cfg, 1, 2, 2, 50);
        let mut tape = Tape::new();
        let ids = params.leaf_into(&mut tape, &|_| false);
        let grid_id = tape.constant(&grid);
        let vis_tokens = patchify(&mut tape, grid_id, &ids.mmdit.patch_in).unwrap();
        let txt_id = tape.constant(&txt);
        let te = tape.constant(&TensorData::zeros(vec![1, cfg.channels]));
        let positions = token_positions(cfg.frames + 1, cfg.latent_h, cfg.latent_w);
        let (cos, sin) = rope_tables::<f64>(&positions, &cfg).unwrap();
        let cos = tape.constant(&cos);
        let sin = tape.constant(&sin);
        let layout = partition_windows(cfg.video_tokens(), cfg.window).unwrap();
        let groups = inject_tokens(layout, cfg.tokens_per_frame(), 2, 2);
        let (v2, t2) = mmdit_block(
            &mut tape, vis_tokens, txt_id, te, &ids.mmdit.blocks[0], &cfg, &groups, cos, sin,
        )
        .unwrap();
        assert_eq!(tape.data_of(v2), tape.data_of(vis_tokens));
        assert_eq!(tape.data_of(t2), tape.data_of(txt_id));
    }

    fn forward_once(
        cfg: &ModelConfig,
        params: &ModelParameters<TensorData<f64>>,
        grid: &TensorData<f64>,
        txt: &TensorData<f64>,
        l1: usize,
    ) -> TensorData<f64> {
        let mut tape = Tape::new();
        let ids = params.leaf_into(&mut tape, &|_| false);
        let g = tape.constant(grid);
        let tx = tape.constant(txt);
        let out = model_forward(&mut tape, &ids.mmdit, cfg, g, 0.5, tx, l1).unwrap();
        tape.to_tensor(out)
    }

    #[test]
    fn model_output_covers_all_frames_and_is_deterministic() {
        let mut cfg = micro_cfg();
        cfg.frames = 2;
        let params = ModelParameters::<TensorData<f64>>::init(&cfg, 3).unwrap();
        let (grid, txt) = micro_streams(&cfg, 2, 3, 2, 60);
        let out1 = forward_once(&cfg, &params, &grid, &txt, 3);
        assert_eq!(out1.shape(), &[4, cfg.latent_h, cfg.latent_w, cfg.c_lat()]);
        let out2 = forward_once(&cfg, &params, &grid, &txt, 3);
        assert_eq!(out1.data(), out2.data());
    }

    #[test]
    fn depth_zero_model_is_projection_composition() {
        let mut cfg = micro_cfg();
        cfg.depth = 0;
        let params = ModelParameters::<TensorData<f64>>::init(&cfg, 4).unwrap();
        let (grid, txt) = micro_streams(&cfg, 1, 2, 2, 70);
        let got = forward_once(&cfg, &params, &grid, &txt, 2);
        // oracle: layer_norm(patchify(grid) @ Win + bin) @ Wout + bout
        let mut tape = Tape::new();
        let ids = params.leaf_into(&mut tape, &|_| false);
        let g = tape.constant(&grid);
        let tokens = patchify(&mut tape, g, &ids.mmdit.patch_in).unwrap();
        let ln = ln_consts(&mut tape, cfg.channels);
        let normed = tape.layer_norm(tokens, ln.gamma, ln.beta, LN_EPS).unwrap();
        let expect = unpatchify(
            &mut tape,
            normed,
            &ids.mmdit.patch_out,
            cfg.frames + 1,
            cfg.latent_h,
            cfg.latent_w,
        )
        .unwrap();
        assert_eq!(got.data(), tape.data_of(expect));
    }

    #[test]
    fn timestep_out_of_range_is_a_contract_error() {
        let cfg = micro_cfg();
        let params = ModelParameters::<TensorData<f64>>::init(&cfg, 5).unwrap();
        let (grid, txt) = micro_streams(&cfg, 1, 2, 2, 80);
        let mut tape = Tape::new();
        let ids = params.leaf_into(&mut tape, &|_| false);
        let g = tape.constant(&grid);
        let tx = tape.constant(&txt);
        assert!(matches!(
            model_forward(&mut tape, &ids.mmdit, &cfg, g, 0.0, tx, 2),
            Err(crate::error::Error::Contract(_))
        ));
        assert!(matches!(
            model_forward(&mut tape, &ids.mmdit, &cfg, g, 1.5, tx, 2),
            Err(crate::error::Error::Contract(_))
        ));
    }

    #[test]
    fn unpatchify_with_identity_projections_recovers_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(90);
        let grid = TensorData::<f64>::randn(vec![2, 2, 2, 12], &mut rng);
        let mut tape = Tape::new();
        let eye = {
            let mut m = TensorData::<f64>::zeros(vec![12, 12]);
            for i in 0..12 {
                m.data_mut()[i * 12 + i] = 1.0;
            }
            m
        };
        let w = tape.constant(&eye);
        let b = tape.constant(&TensorData::zeros(vec![12]));
        let lin = Linear { w, b };
        let g = tape.constant(&grid);
        let tokens = patchify(&mut tape, g, &lin).unwrap();
        assert_eq!(tape.shape_of(tokens), &[8, 12]);
        let back = unpatchify(&mut tape, tokens, &lin, 2, 2, 2).unwrap();
        assert_eq!(tape.data_of(back), grid.data());
    }

    #[test]
    fn block_gradients_match_finite_differences() {
        // micro end-to-end: one block inside a full forward + mse loss
        let cfg = micro_cfg();
        let base = ModelParameters::<TensorData<f64>>::init(&cfg, 8).unwrap();
        // nudge modulation away from zero so gates actually flow gradient
        let mut params = base;
        {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            for b in &mut params.mmdit.blocks {
                for lin in [&mut b.vis_mod, &mut b.txt_mod] {
                    let r = TensorData::<f64>::randn(vec![lin.w.numel()], &mut rng);
                    for (v, n) in lin.w.data_mut().iter_mut().zip(r.data()) {
                        *v += 0.1 * n;
                    }
                }
            }
        }
        let (grid, txt) = micro_streams(&cfg, 1, 2, 2, 100);
        let mut rng = ChaCha8Rng::seed_from_u64(101);
        let target = TensorData::<f64>::randn(grid.shape().to_vec(), &mut rng);
        let named = params.named();
        let cfg2 = cfg.clone();
        let report = crate::tensor::grad_check(
            &named,
            move |tape, ids| {
                // rebuild the parameter structure from the flat leaf list
                let mut i = 0usize;
                let p = params.map_ref(&mut |_, _| {
                    let id = ids[i];
                    i += 1;
                    id
                });
                let g = tape.constant(&grid);
                let tx = tape.constant(&txt);
                let out = model_forward(tape, &p.mmdit, &cfg2, g, 0.5, tx, 2)?;
                let tgt = tape.constant(&target);
                tape.mse(out, tgt)
            },
            1e-5,
            7,
        )
        .unwrap();
        assert!(
            report.max_rel_err < 1e-4,
            "max rel err {}",
            report.max_rel_err
        );
    }
}
