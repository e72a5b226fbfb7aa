//! Inference: Euler integration of the learned velocity field from t=1 to
//! t=0 over a uniform grid, with dual classifier-free guidance combining an
//! unconditional, an image-conditioned, and a text+image-conditioned branch
//! at every step. Guidance is applied to the velocity before the Euler
//! update, which is equivalent to guiding the denoised state under the
//! linear update rule.

use crate::encoders::{decode_video, encode_image, PromptTokens, ReferenceImage, VideoClip};
use crate::error::{Error, Result};
use crate::mmdit::{model_forward, ModelConfig, ModelParameters};
use crate::tensor::{Scalar, Tape, TensorData};
use crate::training::{build_streams, derive_rng, ConditionMode, DropoutDecision, PreparedSample};
use serde::{Deserialize, Serialize};
use sha2::Digest;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleConfig {
    pub steps: usize,
    /// Image-condition guidance weight ω₁.
    pub omega1: f64,
    /// Text-condition guidance weight ω₂.
    pub omega2: f64,
    pub seed: u64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            omega1: 3.0,
            omega2: 7.5,
            seed: 0,
        }
    }
}

impl SampleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps < 1 {
            return Err(Error::Config("sampler needs at least one step".into()));
        }
        Ok(())
    }
}

/// Dual guidance: x = x^∅ + ω₁(x^I − x^∅) + ω₂(x^TI − x^I), elementwise.
/// The unit- and zero-weight identities short-circuit so they hold bitwise.
pub fn cfg_combine<T: Scalar>(
    x_unc: &TensorData<T>,
    x_img: &TensorData<T>,
    x_text_img: &TensorData<T>,
    omega1: f64,
    omega2: f64,
) -> Result<TensorData<T>> {
    if x_unc.shape() != x_img.shape() || x_img.shape() != x_text_img.shape() {
        return Err(Error::Dimension(format!(
            "guidance branch shapes differ: {:?} / {:?} / {:?}",
            x_unc.shape(),
            x_img.shape(),
            x_text_img.shape()
        )));
    }
    if omega1 == 1.0 && omega2 == 1.0 {
        return Ok(x_text_img.clone());
    }
    if omega1 == 0.0 && omega2 == 0.0 {
        return Ok(x_unc.clone());
    }
    let (w1, w2) = (T::from_f64(omega1), T::from_f64(omega2));
    let data = x_unc
        .data()
        .iter()
        .zip(x_img.data())
        .zip(x_text_img.data())
        .map(|((&u, &i), &ti)| u + w1 * (i - u) + w2 * (ti - i))
        .collect();
    TensorData::new(x_unc.shape().to_vec(), data)
}

/// One explicit Euler step backwards in time: x_{t−Δt} = x − Δt·v.
pub fn euler_step<T: Scalar>(
    x: &TensorData<T>,
    v: &TensorData<T>,
    t: f64,
    dt: f64,
) -> Result<TensorData<T>> {
    if x.shape() != v.shape() {
        return Err(Error::Dimension(format!(
            "state {:?} and velocity {:?} shapes differ",
            x.shape(),
            v.shape()
        )));
    }
    if dt <= 0.0 {
        return Err(Error::Contract(format!("step size {dt} must be positive")));
    }
    if t - dt < -1e-12 {
        return Err(Error::Contract(format!(
            "euler step from t={t} by dt={dt} overshoots t=0"
        )));
    }
    let s = T::from_f64(dt);
    let data = x
        .data()
        .iter()
        .zip(v.data())
        .map(|(&xv, &vv)| xv - s * vv)
        .collect();
    TensorData::new(x.shape().to_vec(), data)
}

#[derive(Clone, Copy, Debug, Default)]
pub struct GenerationStats {
    pub model_evals: usize,
}

/// Evaluate the velocity field once for one condition branch, without
/// gradients, and return the video-span velocity.
fn eval_velocity<T: Scalar>(
    params: &ModelParameters<TensorData<T>>,
    cfg: &ModelConfig,
    x: &TensorData<T>,
    timestep: f64,
    sample: &PreparedSample<T>,
    decision: &DropoutDecision,
) -> Result<TensorData<T>> {
    let mut tape = Tape::new();
    let ids = params.leaf_into(&mut tape, &|_| false);
    let video_grid = tape.constant(x);
    let (vis, txt, map) = build_streams(&mut tape, &ids, cfg, video_grid, sample, decision)?;
    let out = model_forward(&mut tape, &ids.mmdit, cfg, vis, timestep, txt, map.l1)?;
    let video = tape.slice(out, 0, 0, cfg.frames)?;
    Ok(tape.to_tensor(video))
}

const BRANCHES: [DropoutDecision; 3] = [
    DropoutDecision {
        null_ref_v: true,
        mode: ConditionMode::Unconditional,
    },
    DropoutDecision {
        null_ref_v: false,
        mode: ConditionMode::I,
    },
    DropoutDecision {
        null_ref_v: false,
        mode: ConditionMode::Ti,
    },
];

/// Generate a clip: Gaussian video latents at t=1, reference tail clean,
/// `steps` uniform Euler steps with three model evaluations each (∅, I, TI)
/// combined by `cfg_combine`, then lossless decode of the video span.
pub fn generate<T: Scalar>(
    params: &ModelParameters<TensorData<T>>,
    model_cfg: &ModelConfig,
    sample_cfg: &SampleConfig,
    prompt: &PromptTokens,
    refs: &[ReferenceImage<T>],
) -> Result<(VideoClip<T>, GenerationStats)> {
    use rayon::prelude::*;
    model_cfg.validate()?;
    sample_cfg.validate()?;
    if refs.is_empty() || refs.len() > crate::fusion::MAX_REFERENCES {
        return Err(Error::Contract(format!(
            "reference count {} outside [1, {}]",
            refs.len(),
            crate::fusion::MAX_REFERENCES
        )));
    }
    let (ph, pw) = (
        model_cfg.latent_h * model_cfg.patch,
        model_cfg.latent_w * model_cfg.patch,
    );
    let mut ref_imgs = Vec::with_capacity(refs.len());
    let mut ref_latents = Vec::with_capacity(refs.len());
    for r in refs {
        let fitted = if r.height() == ph && r.width() == pw {
            r.clone()
        } else {
            r.letterbox(ph, pw)
        };
        ref_latents.push(encode_image(&fitted, model_cfg.patch)?.grid);
        ref_imgs.push(fitted);
    }
    let sample = PreparedSample {
        video_latent: TensorData::zeros(vec![
            model_cfg.frames,
            model_cfg.latent_h,
            model_cfg.latent_w,
            model_cfg.c_lat(),
        ]),
        ref_latents,
        prompt: prompt.clone(),
        refs: ref_imgs,
    };

    let mut rng = derive_rng(sample_cfg.seed, u64::MAX, 0);
    let mut x = TensorData::<T>::randn(
        vec![
            model_cfg.frames,
            model_cfg.latent_h,
            model_cfg.latent_w,
            model_cfg.c_lat(),
        ],
        &mut rng,
    );
    let mut stats = GenerationStats::default();
    let steps = sample_cfg.steps;
    let dt = 1.0 / steps as f64;
    for k in 0..steps {
        let t = 1.0 - k as f64 * dt;
        let vels: Vec<TensorData<T>> = BRANCHES
            .par_iter()
            .map(|d| eval_velocity(params, model_cfg, &x, t, &sample, d))
            .collect::<Result<_>>()?;
        stats.model_evals += BRANCHES.len();
        let guided = cfg_combine(
            &vels[0],
            &vels[1],
            &vels[2],
            sample_cfg.omega1,
            sample_cfg.omega2,
        )?;
        x = euler_step(&x, &guided, t, dt)?;
    }
    let clip = decode_video(
        &crate::encoders::LatentFrameGrid {
            grid: x,
            provenance: crate::encoders::Provenance::Video,
        },
        model_cfg.patch,
    )?;
    Ok((clip, stats))
}

// ── output artifacts ─────────────────────────────────────────────────

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Sidecar {
    pub seed: u64,
    pub config_hash: String,
    pub checkpoint_hash: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = sha2::Sha256::new();
    h.update(bytes);
    format!("{:x}", h.finalize())
}

/// Hash of everything that determines a generation besides the weights.
pub fn config_hash(
    model_cfg: &ModelConfig,
    sample_cfg: &SampleConfig,
    prompt: &PromptTokens,
) -> Result<String> {
    let blob = serde_json::to_vec(&(model_cfg, sample_cfg, prompt))?;
    Ok(sha256_hex(&blob))
}

/// Write PNG frames plus the JSON sidecar into `dir`.
pub fn write_generation<T: Scalar>(
    dir: &std::path::Path,
    clip: &VideoClip<T>,
    sidecar: &Sidecar,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    crate::encoders::save_clip(clip, dir)?;
    let json = serde_json::to_string_pretty(sidecar)?;
    std::fs::write(dir.join("generation.json"), json)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::vocab;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rnd(shape: Vec<usize>, seed: u64) -> TensorData<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        TensorData::randn(shape, &mut rng)
    }

    #[test]
    fn cfg_combine_identities_and_scalar_case() {
        let u = rnd(vec![3, 4], 1);
        let i = rnd(vec![3, 4], 2);
        let ti = rnd(vec![3, 4], 3);
        assert_eq!(cfg_combine(&u, &i, &ti, 1.0, 1.0).unwrap(), ti);
        assert_eq!(cfg_combine(&u, &i, &ti, 0.0, 0.0).unwrap(), u);
        let s = |v: f64| TensorData::<f64>::scalar(v);
        let out = cfg_combine(&s(0.0), &s(1.0), &s(2.0), 3.0, 7.5).unwrap();
        assert!((out.data()[0] - 10.5).abs() < 1e-12);
        let bad = rnd(vec![4, 3], 4);
        assert!(matches!(
            cfg_combine(&u, &bad, &ti, 1.0, 1.0),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn euler_step_basics_and_overshoot() {
        let x = rnd(vec![5], 5);
        let zero = TensorData::<f64>::zeros(vec![5]);
        assert_eq!(euler_step(&x, &zero, 1.0, 0.5).unwrap(), x);
        assert!(matches!(
            euler_step(&x, &zero, 0.3, 0.5),
            Err(Error::Contract(_))
        ));
        assert!(matches!(
            euler_step(&x, &zero, 0.3, 0.0),
            Err(Error::Contract(_))
        ));

        // one full step with the exact velocity recovers x0
        let x0 = rnd(vec![6], 6);
        let eps = rnd(vec![6], 7);
        let v = crate::training::velocity_target(&x0, &eps).unwrap();
        let back = euler_step(&eps, &v, 1.0, 1.0).unwrap();
        for (a, b) in back.data().iter().zip(x0.data()) {
            assert!((a - b).abs() < 1e-12);
        }

        // 50 uniform steps with the constant exact velocity
        let mut x = eps.clone();
        let mut t = 1.0;
        for _ in 0..50 {
            x = euler_step(&x, &v, t, 1.0 / 50.0).unwrap();
            t -= 1.0 / 50.0;
        }
        for (a, b) in x.data().iter().zip(x0.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    fn micro_setup() -> (
        ModelConfig,
        ModelParameters<TensorData<f64>>,
        PromptTokens,
        Vec<ReferenceImage<f64>>,
    ) {
        let cfg = ModelConfig {
            channels: 12,
            heads: 2,
            depth: 1,
            window: 5,
            frames: 2,
            latent_h: 2,
            latent_w: 2,
            patch: 2,
            l1_max: 4,
            l2_per_ref: 2,
            mlp_ratio: 2,
        };
        let params = ModelParameters::<TensorData<f64>>::init(&cfg, 9).unwrap();
        let prompt =
            PromptTokens::new(vec![vocab::COLOR_BASE, vocab::SHAPE_BASE, vocab::MOTION_BASE])
                .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let img = ReferenceImage::new(
            TensorData::new(
                vec![4, 4, 3],
                (0..48).map(|_| rng.gen::<f64>()).collect(),
            )
            .unwrap(),
        )
        .unwrap();
        (cfg, params, prompt, vec![img])
    }

    #[test]
    fn generation_is_deterministic_and_counts_evaluations() {
        let (cfg, params, prompt, refs) = micro_setup();
        let scfg = SampleConfig {
            steps: 5,
            seed: 11,
            ..SampleConfig::default()
        };
        let (clip1, stats) = generate(&params, &cfg, &scfg, &prompt, &refs).unwrap();
        assert_eq!(stats.model_evals, 3 * 5);
        assert_eq!(clip1.tensor().shape(), &[2, 4, 4, 3]);
        let (clip2, _) = generate(&params, &cfg, &scfg, &prompt, &refs).unwrap();
        assert_eq!(clip1.tensor(), clip2.tensor());
    }

    #[test]
    fn unit_weights_equal_ti_only_generation() {
        let (cfg, params, prompt, refs) = micro_setup();
        let scfg = SampleConfig {
            steps: 4,
            omega1: 1.0,
            omega2: 1.0,
            seed: 12,
        };
        let (clip, _) = generate(&params, &cfg, &scfg, &prompt, &refs).unwrap();

        // TI-only oracle loop
        let sample = PreparedSample {
            video_latent: TensorData::zeros(vec![2, 2, 2, 12]),
            ref_latents: refs
                .iter()
                .map(|r| encode_image(r, cfg.patch).unwrap().grid)
                .collect(),
            prompt: prompt.clone(),
            refs: refs.clone(),
        };
        let mut rng = derive_rng(12, u64::MAX, 0);
        let mut x = TensorData::<f64>::randn(vec![2, 2, 2, 12], &mut rng);
        let ti = DropoutDecision {
            null_ref_v: false,
            mode: ConditionMode::Ti,
        };
        for k in 0..4 {
            let t = 1.0 - k as f64 / 4.0;
            let v = eval_velocity(&params, &cfg, &x, t, &sample, &ti).unwrap();
            x = euler_step(&x, &v, t, 0.25).unwrap();
        }
        let oracle = decode_video(
            &crate::encoders::LatentFrameGrid {
                grid: x,
                provenance: crate::encoders::Provenance::Video,
            },
            cfg.patch,
        )
        .unwrap();
        assert_eq!(clip.tensor(), oracle.tensor());
    }

    #[test]
    fn reference_count_is_bounded() {
        let (cfg, params, prompt, refs) = micro_setup();
        let scfg = SampleConfig {
            steps: 1,
            ..SampleConfig::default()
        };
        assert!(matches!(
            generate(&params, &cfg, &scfg, &prompt, &[]),
            Err(Error::Contract(_))
        ));
        let five: Vec<_> = (0..5).map(|_| refs[0].clone()).collect();
        assert!(matches!(
            generate(&params, &cfg, &scfg, &prompt, &five),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn generation_artifacts_round_trip() {
        let (cfg, params, prompt, refs) = micro_setup();
        let scfg = SampleConfig {
            steps: 2,
            seed: 13,
            ..SampleConfig::default()
        };
        let (clip, _) = generate(&params, &cfg, &scfg, &prompt, &refs).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let sidecar = Sidecar {
            seed: scfg.seed,
            config_hash: config_hash(&cfg, &scfg, &prompt).unwrap(),
            checkpoint_hash: sha256_hex(b"test"),
        };
        write_generation(dir.path(), &clip, &sidecar).unwrap();
        assert!(dir.path().join("generation.json").exists());
        assert!(dir.path().join("frame_0000.png").exists());
        let parsed: Sidecar = serde_json::from_str(
            &std::fs::read_to_string(dir.path().join("generation.json")).unwrap(),
        )
        .unwrap();
        assert_eq!(parsed.config_hash, sidecar.config_hash);
    }
}
