//! Rectified-flow training: forward noising along the straight path
//! x_t = (1−t)·x₀ + t·ε, constant-velocity regression u = ε − x₀ with the
//! reference tail excluded from the loss, condition dropout, a decoupled
//! weight-decay Adam optimizer, and bitwise-lossless checkpointing.
//!
//! All randomness is derived statelessly per (seed, step, sample index), so
//! resuming from a checkpoint reproduces the uninterrupted trajectory
//! exactly.

use crate::encoders::{embed_reference_semantic, embed_text, PromptTokens, ReferenceImage};
use crate::error::{Error, Result};
use crate::fusion::SegmentMap;
use crate::mmdit::{model_forward, ModelConfig, ModelParameters, SEMANTIC_PREFIX};
use crate::tensor::{Id, Scalar, Tape, TensorData};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Total diffusion steps T (timesteps are continuous; T sets the grid
    /// resolution used by discrete-step consumers).
    pub total_diffusion_steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    /// Probability of replacing reference latent frames with the learned
    /// null frame (semantic tokens kept).
    pub vae_ref_dropout: f64,
    /// Probability of dropping text only (condition label I).
    pub text_dropout: f64,
    /// Probability of dropping text and all reference features (label ∅).
    pub all_dropout: f64,
    pub max_steps: usize,
    pub seed: u64,
    pub checkpoint_interval: usize,
    /// Unfreeze the semantic reference embedder.
    pub train_semantic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_diffusion_steps: 1000,
            batch_size: 16,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.95,
            weight_decay: 0.0,
            vae_ref_dropout: 0.7,
            text_dropout: 0.1,
            all_dropout: 0.1,
            max_steps: 1000,
            seed: 0,
            checkpoint_interval: 500,
            train_semantic: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("vae_ref_dropout", self.vae_ref_dropout),
            ("text_dropout", self.text_dropout),
            ("all_dropout", self.all_dropout),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} {p} outside [0,1]")));
            }
        }
        if self.total_diffusion_steps < 1 {
            return Err(Error::Config("total diffusion steps must be >= 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        Ok(())
    }
}

// ── randomness ───────────────────────────────────────────────────────

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Stateless per-(seed, step, index) RNG; makes the training trajectory a
/// pure function of (seed, config, data) and checkpoint resume trivial.
pub fn derive_rng(seed: u64, step: u64, index: u64) -> ChaCha8Rng {
    let mixed = splitmix64(splitmix64(splitmix64(seed) ^ step) ^ index.wrapping_mul(0xa24b));
    ChaCha8Rng::seed_from_u64(mixed)
}

/// Draw a timestep from the logit-normal(0,1) law: sigmoid of a standard
/// normal. Strictly inside (0,1).
pub fn sample_timestep<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
    1.0 / (1.0 + (-z).exp())
}

// ── noising and targets ──────────────────────────────────────────────

/// x_t = (1−t)·x₀ + t·ε, elementwise over the given (video-span) tensor.
pub fn noisify<T: Scalar>(
    x0: &TensorData<T>,
    eps: &TensorData<T>,
    t: f64,
) -> Result<TensorData<T>> {
    if x0.shape() != eps.shape() {
        return Err(Error::Dimension(format!(
            "noisify shapes differ: {:?} vs {:?}",
            x0.shape(),
            eps.shape()
        )));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Contract(format!("noising time {t} outside [0,1]")));
    }
    if t == 0.0 {
        return Ok(x0.clone());
    }
    if t == 1.0 {
        return Ok(eps.clone());
    }
    let (a, b) = (T::from_f64(1.0 - t), T::from_f64(t));
    let data = x0
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&x, &e)| a * x + b * e)
        .collect();
    TensorData::new(x0.shape().to_vec(), data)
}

/// Constant velocity of the straight path: u = ε − x₀.
pub fn velocity_target<T: Scalar>(
    x0: &TensorData<T>,
    eps: &TensorData<T>,
) -> Result<TensorData<T>> {
    if x0.shape() != eps.shape() {
        return Err(Error::Dimension(format!(
            "velocity shapes differ: {:?} vs {:?}",
            x0.shape(),
            eps.shape()
        )));
    }
    let data = x0
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&x, &e)| e - x)
        .collect();
    TensorData::new(x0.shape().to_vec(), data)
}

/// MSE over the video span only. The prediction covers t+n frames; the tail
/// is sliced away before the loss, so its gradients are exactly zero.
pub fn rf_loss<T: Scalar>(
    tape: &mut Tape<T>,
    predicted: Id,
    target: Id,
    map: &SegmentMap,
) -> Result<Id> {
    let ps = tape.shape_of(predicted).to_vec();
    let ts = tape.shape_of(target).to_vec();
    if ps.len() != 4 || ps[0] != map.frames() {
        return Err(Error::Contract(format!(
            "prediction frames {:?} do not cover t+n = {}",
            ps,
            map.frames()
        )));
    }
    if ts.len() != 4 || ts[0] != map.t || ts[1..] != ps[1..] {
        return Err(Error::Contract(format!(
            "target span {ts:?} does not match video span of {ps:?} (t={})",
            map.t
        )));
    }
    let video = tape.slice(predicted, 0, 0, map.t)?;
    tape.mse(video, target)
}

// ── condition dropout ────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ConditionMode {
    /// Text + image conditions present.
    Ti,
    /// Image conditions only (text nulled).
    I,
    /// Fully unconditional (text and all reference features nulled).
    Unconditional,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DropoutDecision {
    /// Replace reference latent frames with the learned null frame
    /// (semantic tokens unaffected).
    pub null_ref_v: bool,
    pub mode: ConditionMode,
}

/// Draw the per-sample condition dropout events: an independent VAE-path
/// event plus the mode label (∅ dominates I when both fire).
pub fn apply_condition_dropout<R: Rng>(rng: &mut R, cfg: &TrainConfig) -> DropoutDecision {
    let null_ref_v = rng.gen::<f64>() < cfg.vae_ref_dropout;
    let drop_all = rng.gen::<f64>() < cfg.all_dropout;
    let drop_text = rng.gen::<f64>() < cfg.text_dropout;
    let mode = if drop_all {
        ConditionMode::Unconditional
    } else if drop_text {
        ConditionMode::I
    } else {
        ConditionMode::Ti
    };
    DropoutDecision { null_ref_v, mode }
}

// ── stream assembly on tape ──────────────────────────────────────────

/// One training unit after encoding: clean video latents, per-reference
/// latent frames, prompt tokens, and the reference pixels for the semantic
/// path.
#[derive(Clone, Debug)]
pub struct PreparedSample<T> {
    /// [t, h, w, c_lat] clean video latent frames.
    pub video_latent: TensorData<T>,
    /// One [1, h, w, c_lat] latent grid per reference.
    pub ref_latents: Vec<TensorData<T>>,
    pub prompt: PromptTokens,
    /// Reference pixels, aligned with `ref_latents`.
    pub refs: Vec<ReferenceImage<T>>,
}

/// Encode a dataset triplet at the model's geometry: the video goes straight
/// through the codec, references are letterboxed to the model's pixel frame
/// first.
pub fn prepare_triplet<T: Scalar>(
    sample: &crate::dataforge::TripletSample<T>,
    cfg: &ModelConfig,
) -> Result<PreparedSample<T>> {
    let (ph, pw) = (cfg.latent_h * cfg.patch, cfg.latent_w * cfg.patch);
    let v = &sample.video;
    if v.frame_count() != cfg.frames || v.height() != ph || v.width() != pw {
        return Err(Error::Config(format!(
            "video {}x{}x{} does not match model geometry {}x{ph}x{pw}",
            v.frame_count(),
            v.height(),
            v.width(),
            cfg.frames
        )));
    }
    let video_latent = crate::encoders::encode_video(v, cfg.patch)?.grid;
    let mut refs = Vec::with_capacity(sample.refs.len());
    let mut ref_latents = Vec::with_capacity(sample.refs.len());
    for r in &sample.refs {
        let fitted = if r.height() == ph && r.width() == pw {
            r.clone()
        } else {
            r.letterbox(ph, pw)
        };
        ref_latents.push(crate::encoders::encode_image(&fitted, cfg.patch)?.grid);
        refs.push(fitted);
    }
    Ok(PreparedSample {
        video_latent,
        ref_latents,
        prompt: sample.prompt.clone(),
        refs,
    })
}

/// Broadcast a per-channel row parameter to `rows` rows on the tape,
/// preserving the gradient path into the null embedding.
fn broadcast_rows<T: Scalar>(tape: &mut Tape<T>, row: Id, rows: usize) -> Result<Id> {
    let c = tape.shape_of(row)[0];
    let ones = tape.constant(&TensorData::full(vec![rows, 1], T::one()));
    let out = tape.mul(ones, row)?;
    tape.reshape(out, &[rows, c])
}

/// Broadcast the per-channel null latent to a [frames, h, w, c_lat] grid.
fn broadcast_null_frames<T: Scalar>(
    tape: &mut Tape<T>,
    null_latent: Id,
    frames: usize,
    h: usize,
    w: usize,
) -> Result<Id> {
    let c = tape.shape_of(null_latent)[0];
    let ones = tape.constant(&TensorData::full(vec![frames, h, w, 1], T::one()));
    tape.mul(ones, null_latent).and_then(|x| tape.reshape(x, &[frames, h, w, c]))
}

/// Build the model's visual and text streams for one sample, applying the
/// dropout decision. `video_grid` is the (noised) video span on the tape.
pub fn build_streams<T: Scalar>(
    tape: &mut Tape<T>,
    params: &ModelParameters<Id>,
    cfg: &ModelConfig,
    video_grid: Id,
    sample: &PreparedSample<T>,
    decision: &DropoutDecision,
) -> Result<(Id, Id, SegmentMap)> {
    let refs = sample.ref_latents.len();
    if refs != sample.refs.len() {
        return Err(Error::Contract(format!(
            "latent refs ({refs}) and pixel refs ({}) disagree",
            sample.refs.len()
        )));
    }
    if refs > crate::fusion::MAX_REFERENCES {
        return Err(Error::Contract(format!(
            "{refs} references exceed the supported maximum {}",
            crate::fusion::MAX_REFERENCES
        )));
    }
    let (h, w) = (cfg.latent_h, cfg.latent_w);
    let null_refs =
        decision.null_ref_v || decision.mode == ConditionMode::Unconditional;

    // visual stream: video frames then one tail frame per reference
    let mut vis_parts = vec![video_grid];
    let mut ref_frame_counts = Vec::with_capacity(refs);
    for lat in &sample.ref_latents {
        let frames = lat.shape()[0];
        let part = if null_refs {
            broadcast_null_frames(tape, params.null_latent, frames, h, w)?
        } else {
            tape.constant(lat)
        };
        vis_parts.push(part);
        ref_frame_counts.push(frames);
    }
    let vis = tape.concat(&vis_parts, 0)?;

    // text stream: prompt rows then semantic tokens per reference
    let l1 = sample.prompt.len();
    let text_rows = if decision.mode == ConditionMode::Ti {
        embed_text(tape, &params.text, &sample.prompt)?
    } else {
        broadcast_rows(tape, params.null_text, l1)?
    };
    let mut txt_parts = vec![text_rows];
    let mut ref_c_counts = Vec::with_capacity(refs);
    for img in &sample.refs {
        let part = if decision.mode == ConditionMode::Unconditional {
            broadcast_rows(tape, params.null_refc, cfg.l2_per_ref)?
        } else {
            embed_reference_semantic(tape, &params.semantic, img, cfg.l2_per_ref, cfg.channels)?
        };
        txt_parts.push(part);
        ref_c_counts.push(cfg.l2_per_ref);
    }
    let txt = tape.concat(&txt_parts, 0)?;

    let map = SegmentMap::new(l1, ref_c_counts, cfg.frames, ref_frame_counts)?;
    Ok((vis, txt, map))
}

/// End-to-end gradient fidelity in f64: one synthetic sample through the
/// full forward pass and rectified-flow loss, analytic gradients against
/// central finite differences. `stride` checks every stride-th coordinate.
pub fn grad_fidelity(
    cfg: &ModelConfig,
    seed: u64,
    stride: usize,
    fd_step: f64,
) -> Result<crate::tensor::GradCheckReport> {
    use crate::dataforge::{gen_sprite_triplet, PairMode, SceneConfig};
    cfg.validate()?;
    let scene = SceneConfig {
        frames: cfg.frames,
        height: cfg.latent_h * cfg.patch,
        width: cfg.latent_w * cfg.patch,
        subjects: 1,
    };
    let triplet = gen_sprite_triplet::<f64>(seed, &scene, PairMode::InPair)?;
    let prepared = prepare_triplet(&triplet, cfg)?;
    let mut params = ModelParameters::<TensorData<f64>>::init(cfg, seed)?;
    // jitter every parameter so zero-initialized paths (adaLN modulation,
    // and through it the timestep MLP) also carry gradient signal
    let mut jitter_rng = derive_rng(seed, 1, 0);
    let jittered = params
        .named()
        .into_iter()
        .map(|(_, t)| {
            let noise = TensorData::<f64>::randn(t.shape().to_vec(), &mut jitter_rng);
            let data = t
                .data()
                .iter()
                .zip(noise.data())
                .map(|(a, n)| a + 0.02 * n)
                .collect();
            TensorData::new(t.shape().to_vec(), data)
        })
        .collect::<Result<Vec<_>>>()?;
    params.assign_from(&jittered)?;
    let named = params.named();
    // index template mirroring named() order, used to rebuild the parameter
    // tree from the oracle's leaf ids
    let mut counter = 0usize;
    let index = params.map_ref(&mut |_, _| {
        let k = counter;
        counter += 1;
        k
    });
    let mut rng = derive_rng(seed, 0, 0);
    let t = sample_timestep(&mut rng);
    let eps = TensorData::<f64>::randn(prepared.video_latent.shape().to_vec(), &mut rng);
    let x_t = noisify(&prepared.video_latent, &eps, t)?;
    let target = velocity_target(&prepared.video_latent, &eps)?;
    let decision = DropoutDecision {
        null_ref_v: false,
        mode: ConditionMode::Ti,
    };
    let cfg = cfg.clone();
    crate::tensor::grad_check(
        &named,
        move |tape, ids| {
            let pids = index.map_ref(&mut |_, &k| ids[k]);
            let video_grid = tape.constant(&x_t);
            let (vis, txt, map) =
                build_streams(tape, &pids, &cfg, video_grid, &prepared, &decision)?;
            let predicted = model_forward(tape, &pids.mmdit, &cfg, vis, t, txt, map.l1)?;
            let tgt = tape.constant(&target);
            rf_loss(tape, predicted, tgt, &map)
        },
        fd_step,
        stride,
    )
}

// ── optimizer ────────────────────────────────────────────────────────

const ADAM_EPS: f64 = 1e-8;

/// Decoupled weight-decay Adam state, aligned with `ModelParameters::named`
/// order.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub m: Vec<TensorData<T>>,
    pub v: Vec<TensorData<T>>,
    pub names: Vec<String>,
    pub step: usize,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(params: &ModelParameters<TensorData<T>>) -> Self {
        let named = params.named();
        Self {
            m: named
                .iter()
                .map(|(_, p)| TensorData::zeros(p.shape().to_vec()))
                .collect(),
            v: named
                .iter()
                .map(|(_, p)| TensorData::zeros(p.shape().to_vec()))
                .collect(),
            names: named.into_iter().map(|(n, _)| n).collect(),
            step: 0,
        }
    }

    /// One update. `grads[i]` may be `None` for frozen parameters.
    pub fn update(
        &mut self,
        params: &mut ModelParameters<TensorData<T>>,
        grads: &[Option<TensorData<T>>],
        cfg: &TrainConfig,
    ) -> Result<()> {
        if grads.len() != self.names.len() {
            return Err(Error::Contract(format!(
                "gradient list length {} != parameter count {}",
                grads.len(),
                self.names.len()
            )));
        }
        self.step += 1;
        let t = self.step as f64;
        let (b1, b2) = (T::from_f64(cfg.beta1), T::from_f64(cfg.beta2));
        let (ob1, ob2) = (
            T::from_f64(1.0 - cfg.beta1),
            T::from_f64(1.0 - cfg.beta2),
        );
        let bc1 = T::from_f64(1.0 - cfg.beta1.powf(t));
        let bc2 = T::from_f64(1.0 - cfg.beta2.powf(t));
        let lr = T::from_f64(cfg.learning_rate);
        let wd = T::from_f64(cfg.weight_decay);
        let eps = T::from_f64(ADAM_EPS);

        let mut flat: Vec<TensorData<T>> =
            params.named().into_iter().map(|(_, p)| p).collect();
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            if g.shape() != flat[i].shape() {
                return Err(Error::Dimension(format!(
                    "gradient shape {:?} != parameter {} shape {:?}",
                    g.shape(),
                    self.names[i],
                    flat[i].shape()
                )));
            }
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = flat[i].data_mut();
            for j in 0..p.len() {
                let gj = g.data()[j];
                m[j] = b1 * m[j] + ob1 * gj;
                v[j] = b2 * v[j] + ob2 * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p[j] = p[j] - lr * (mhat / (vhat.sqrt() + eps) + wd * p[j]);
            }
        }
        params.assign_from(&flat)
    }
}

// ── training step ────────────────────────────────────────────────────

#[derive(Clone, Debug, Serialize)]
pub struct StepStats {
    pub step: usize,
    pub loss: f64,
    /// (TI, I, ∅) sample counts in the batch.
    pub mode_counts: [usize; 3],
}

/// Whether a parameter is trainable under the given config.
pub fn is_trainable(name: &str, cfg: &TrainConfig) -> bool {
    cfg.train_semantic || !name.starts_with(SEMANTIC_PREFIX)
}

/// Forward + loss for one sample. Returns the loss node; callers decide
/// whether to run backward.
fn sample_loss<T: Scalar>(
    tape: &mut Tape<T>,
    params: &ModelParameters<Id>,
    model_cfg: &ModelConfig,
    sample: &PreparedSample<T>,
    timestep: f64,
    eps: &TensorData<T>,
    decision: &DropoutDecision,
) -> Result<Id> {
    let x_t = noisify(&sample.video_latent, eps, timestep)?;
    let target = velocity_target(&sample.video_latent, eps)?;
    let video_grid = tape.constant(&x_t);
    let (vis, txt, map) = build_streams(tape, params, model_cfg, video_grid, sample, decision)?;
    let predicted = model_forward(tape, &params.mmdit, model_cfg, vis, timestep, txt, map.l1)?;
    let tgt = tape.constant(&target);
    rf_loss(tape, predicted, tgt, &map)
}

/// One optimizer step over a batch: rayon-parallel per-sample forward and
/// backward passes, order-deterministic gradient accumulation, one Adam
/// update.
pub fn train_step<T: Scalar>(
    params: &mut ModelParameters<TensorData<T>>,
    opt: &mut AdamW<T>,
    batch: &[PreparedSample<T>],
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    step: usize,
) -> Result<StepStats> {
    use rayon::prelude::*;
    if batch.is_empty() {
        return Err(Error::Contract("training batch is empty".into()));
    }
    let trainable = |name: &str| is_trainable(name, train_cfg);
    let snapshot = &*params;
    type SampleOut<T> = (f64, ConditionMode, Vec<Option<TensorData<T>>>);
    let per_sample: Vec<SampleOut<T>> = batch
        .par_iter()
        .enumerate()
        .map(|(i, sample)| {
            let mut rng = derive_rng(train_cfg.seed, step as u64, i as u64);
            let timestep = sample_timestep(&mut rng);
            let decision = apply_condition_dropout(&mut rng, train_cfg);
            let eps = TensorData::<T>::randn(sample.video_latent.shape().to_vec(), &mut rng);
            let mut tape = Tape::new();
            let ids = snapshot.leaf_into(&mut tape, &trainable);
            let loss =
                sample_loss(&mut tape, &ids, model_cfg, sample, timestep, &eps, &decision)?;
            let grads = tape.backward(loss)?;
            let mut flat_ids = Vec::new();
            ids.map_ref(&mut |_, &id| flat_ids.push(id));
            let g: Vec<Option<TensorData<T>>> = flat_ids
                .iter()
                .map(|&id| {
                    grads.get(id).map(|gd| {
                        TensorData::new(tape.shape_of(id).to_vec(), gd.to_vec())
                            .expect("gradient matches leaf shape")
                    })
                })
                .collect();
            Ok((tape.data_of(loss)[0].as_f64(), decision.mode, g))
        })
        .collect::<Result<_>>()?;

    // accumulate in index order for determinism
    let n_params = opt.names.len();
    let mut acc: Vec<Option<TensorData<T>>> = vec![None; n_params];
    let mut loss_sum = 0.0;
    let mut mode_counts = [0usize; 3];
    let inv_b = T::from_f64(1.0 / batch.len() as f64);
    for (loss, mode, grads) in &per_sample {
        loss_sum += loss;
        mode_counts[match mode {
            ConditionMode::Ti => 0,
            ConditionMode::I => 1,
            ConditionMode::Unconditional => 2,
        }] += 1;
        for (slot, g) in acc.iter_mut().zip(grads) {
            let Some(g) = g else { continue };
            match slot {
                Some(a) => {
                    for (av, gv) in a.data_mut().iter_mut().zip(g.data()) {
                        *av = *av + *gv;
                    }
                }
                None => *slot = Some(g.clone()),
            }
        }
    }
    for slot in acc.iter_mut().flatten() {
        for v in slot.data_mut() {
            *v = *v * inv_b;
        }
    }
    let loss = loss_sum / batch.len() as f64;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite loss {loss} at step {step}; batch of {} with modes {mode_counts:?}",
            batch.len()
        )));
    }
    opt.update(params, &acc, train_cfg)?;
    Ok(StepStats {
        step,
        loss,
        mode_counts,
    })
}

// ── checkpointing ────────────────────────────────────────────────────

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PHLT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model_cfg: ModelConfig,
    pub train_cfg: TrainConfig,
    pub params: ModelParameters<TensorData<f32>>,
    pub opt: AdamW<f32>,
    pub step: usize,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    model: ModelConfig,
    train: TrainConfig,
    step: usize,
    opt_step: usize,
    param_count: usize,
}

fn write_section(out: &mut Vec<u8>, body: &[u8]) {
    out.extend_from_slice(&(body.len() as u64).to_le_bytes());
    out.extend_from_slice(body);
}

fn write_tensors(body: &mut Vec<u8>, tensors: &[(String, TensorData<f32>)]) {
    for (name, t) in tensors {
        let nb = name.as_bytes();
        body.extend_from_slice(&(nb.len() as u32).to_le_bytes());
        body.extend_from_slice(nb);
        body.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            body.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            body.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Corrupt("checkpoint truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn read_tensors(body: &[u8], expected: usize) -> Result<Vec<(String, TensorData<f32>)>> {
    let mut cur = Cursor { buf: body, pos: 0 };
    let mut out = Vec::with_capacity(expected);
    for _ in 0..expected {
        let nlen = cur.u32()? as usize;
        let name = String::from_utf8(cur.take(nlen)?.to_vec())
            .map_err(|_| Error::Corrupt("non-utf8 parameter name".into()))?;
        let ndim = cur.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(cur.u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = cur.take(4 * numel)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((name, TensorData::new(shape, data)?));
    }
    if cur.pos != body.len() {
        return Err(Error::Corrupt("trailing bytes in tensor section".into()));
    }
    Ok(out)
}

pub fn serialize_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    let named = ck.params.named();
    let header = CheckpointHeader {
        model: ck.model_cfg.clone(),
        train: ck.train_cfg.clone(),
        step: ck.step,
        opt_step: ck.opt.step,
        param_count: named.len(),
    };
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    write_section(&mut out, serde_json::to_string(&header)?.as_bytes());

    let mut body = Vec::new();
    write_tensors(&mut body, &named);
    write_section(&mut out, &body);

    // RNG state: training randomness is derived from (seed, step), so the
    // pair is the complete state
    let mut rng = Vec::new();
    rng.extend_from_slice(&ck.train_cfg.seed.to_le_bytes());
    rng.extend_from_slice(&(ck.step as u64).to_le_bytes());
    write_section(&mut out, &rng);

    let moments: Vec<(String, TensorData<f32>)> = ck
        .opt
        .names
        .iter()
        .cloned()
        .zip(ck.opt.m.iter().cloned())
        .chain(ck.opt.names.iter().cloned().zip(ck.opt.v.iter().cloned()))
        .collect();
    let mut body = Vec::new();
    write_tensors(&mut body, &moments);
    write_section(&mut out, &body);
    Ok(out)
}

pub fn deserialize_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut cur = Cursor { buf: bytes, pos: 0 };
    if cur.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Corrupt("bad checkpoint magic".into()));
    }
    let version = cur.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let section = |cur: &mut Cursor| -> Result<Vec<u8>> {
        let len = cur.u64()? as usize;
        Ok(cur.take(len)?.to_vec())
    };
    let header: CheckpointHeader = serde_json::from_slice(&section(&mut cur)?)
        .map_err(|e| Error::Corrupt(format!("checkpoint header: {e}")))?;
    header.model.validate()?;
    header.train.validate()?;

    let param_body = section(&mut cur)?;
    let named = read_tensors(&param_body, header.param_count)?;
    let mut params = ModelParameters::<TensorData<f32>>::init(&header.model, 0)?;
    let expected = params.named();
    if expected.len() != named.len() {
        return Err(Error::Corrupt(format!(
            "checkpoint has {} parameters, model needs {}",
            named.len(),
            expected.len()
        )));
    }
    for ((en, _), (gn, _)) in expected.iter().zip(&named) {
        if en != gn {
            return Err(Error::Corrupt(format!(
                "parameter order mismatch: expected {en}, found {gn}"
            )));
        }
    }
    let flat: Vec<TensorData<f32>> = named.into_iter().map(|(_, t)| t).collect();
    params.assign_from(&flat)?;

    let rng = section(&mut cur)?;
    if rng.len() != 16 {
        return Err(Error::Corrupt("bad RNG state section".into()));
    }
    let saved_seed = u64::from_le_bytes(rng[..8].try_into().unwrap());
    let saved_step = u64::from_le_bytes(rng[8..].try_into().unwrap());
    if saved_seed != header.train.seed || saved_step != header.step as u64 {
        return Err(Error::Corrupt("RNG state disagrees with header".into()));
    }

    let mom_body = section(&mut cur)?;
    let moments = read_tensors(&mom_body, 2 * header.param_count)?;
    let mut opt = AdamW::new(&params);
    opt.step = header.opt_step;
    for (i, (name, t)) in moments.into_iter().enumerate() {
        let (slot, idx) = if i < header.param_count {
            (&mut opt.m, i)
        } else {
            (&mut opt.v, i - header.param_count)
        };
        if name != opt.names[idx] || t.shape() != slot[idx].shape() {
            return Err(Error::Corrupt(format!(
                "optimizer moment mismatch at {name}"
            )));
        }
        slot[idx] = t;
    }
    if cur.pos != bytes.len() {
        return Err(Error::Corrupt("trailing bytes after checkpoint".into()));
    }
    Ok(Checkpoint {
        model_cfg: header.model,
        train_cfg: header.train,
        params,
        opt,
        step: header.step,
    })
}

pub fn save_checkpoint(ck: &Checkpoint, path: &std::path::Path) -> Result<()> {
    let bytes = serialize_checkpoint(ck)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: &std::path::Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    deserialize_checkpoint(&bytes)
}

// ── training log ─────────────────────────────────────────────────────

/// Append-only line-delimited JSON training log.
pub struct TrainLog {
    file: std::fs::File,
}

#[derive(Serialize)]
struct LogRecord<'a> {
    step: usize,
    loss: f64,
    mode_counts: &'a [usize; 3],
    wall_ms: u128,
}

impl TrainLog {
    pub fn create(path: &std::path::Path) -> Result<Self> {
        Ok(Self {
            file: std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)?,
        })
    }

    pub fn record(&mut self, stats: &StepStats, wall_ms: u128) -> Result<()> {
        let rec = LogRecord {
            step: stats.step,
            loss: stats.loss,
            mode_counts: &stats.mode_counts,
            wall_ms,
        };
        writeln!(self.file, "{}", serde_json::to_string(&rec)?)?;
        Ok(())
    }
}
