//! Operator entry point: dataset generation, training, sampling, evaluation,
//! and gradient auditing, driven by a declarative TOML configuration with
//! flag overrides. Every run writes a resolved-config snapshot next to its
//! outputs. Exit codes: 0 success, 2 usage error, 3 config error, 1 runtime
//! failure. Set RAYON_NUM_THREADS to bound worker threads.

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use subvid::dataforge::{dataset_sample, write_dataset, PairMode, SceneConfig};
use subvid::encoders::{load_image, vocab, PromptTokens};
use subvid::eval::{build_report, evaluate_generated, write_report};
use subvid::mmdit::{ModelConfig, ModelParameters};
use subvid::sampling::{
    config_hash, generate, sha256_hex, write_generation, SampleConfig, Sidecar,
};
use subvid::training::{
    grad_fidelity, load_checkpoint, prepare_triplet, save_checkpoint, train_step, AdamW,
    Checkpoint, TrainConfig, TrainLog,
};
use subvid::{Error, Result};

#[derive(Parser)]
#[command(
    name = "subvid",
    version,
    about = "Subject-conditioned video generation lab",
    after_help = "Set RAYON_NUM_THREADS to bound worker threads."
)]
struct Cli {
    /// TOML run configuration; command-line flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic triplet dataset on disk.
    Datagen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
    },
    /// Train from scratch or resume from a checkpoint.
    Train {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Generate a clip from a checkpoint.
    Sample {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Reference image paths (repeatable, 1-4).
        #[arg(long)]
        refs: Vec<PathBuf>,
        /// Prompt words over the closed vocabulary, e.g. "red square left".
        #[arg(long)]
        prompt: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on held-out synthetic samples.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference audit of the full analytic gradient in f64.
    Gradcheck {
        /// Check every stride-th coordinate of each parameter.
        #[arg(long, default_value_t = 101)]
        stride: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Configuration utilities.
    Config {
        #[command(subcommand)]
        cmd: ConfigCmd,
    },
}

#[derive(Subcommand)]
enum ConfigCmd {
    /// Print the full default configuration as TOML.
    Dump,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    InPair,
    CrossPair,
}

impl From<ModeArg> for PairMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::InPair => PairMode::InPair,
            ModeArg::CrossPair => PairMode::CrossPair,
        }
    }
}

// ── configuration ────────────────────────────────────────────────────

const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct DataConfig {
    scene: SceneConfig,
    mode: PairMode,
    count: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        // geometry matches the default model (latent 4x4, patch 4, 8 frames)
        Self {
            scene: SceneConfig {
                frames: 8,
                height: 16,
                width: 16,
                subjects: 1,
            },
            mode: PairMode::InPair,
            count: 1000,
        }
    }
}

#[derive(Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct EvalConfig {
    count: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { count: 64 }
    }
}

#[derive(Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    schema_version: u32,
    /// Dataset seed; training/sampling noise seeds live in their sections.
    seed: u64,
    data: DataConfig,
    model: ModelConfig,
    train: TrainConfig,
    sample: SampleConfig,
    eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            sample: SampleConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<RunConfig> {
    let cfg: RunConfig = match path {
        None => RunConfig::default(),
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            toml::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
    };
    if cfg.schema_version != SCHEMA_VERSION {
        return Err(Error::Config(format!(
            "config schema version {} unsupported (expected {SCHEMA_VERSION})",
            cfg.schema_version
        )));
    }
    Ok(cfg)
}

fn write_snapshot(cfg: &RunConfig, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let text = toml::to_string_pretty(cfg)
        .map_err(|e| Error::Config(format!("serializing resolved config: {e}")))?;
    std::fs::write(dir.join("config_resolved.toml"), text)?;
    Ok(())
}

/// Scene pixels and frames must match what the model was built for.
fn check_geometry(scene: &SceneConfig, model: &ModelConfig) -> Result<()> {
    let (ph, pw) = (model.latent_h * model.patch, model.latent_w * model.patch);
    if scene.frames != model.frames || scene.height != ph || scene.width != pw {
        return Err(Error::Config(format!(
            "scene {}x{}x{} does not match model geometry {}x{ph}x{pw}",
            scene.frames, scene.height, scene.width, model.frames
        )));
    }
    Ok(())
}

// ── commands ─────────────────────────────────────────────────────────

fn cmd_datagen(
    mut cfg: RunConfig,
    out: PathBuf,
    count: Option<u64>,
    seed: Option<u64>,
    mode: Option<ModeArg>,
) -> Result<()> {
    if let Some(c) = count {
        cfg.data.count = c;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(m) = mode {
        cfg.data.mode = m.into();
    }
    cfg.data.scene.validate()?;
    write_snapshot(&cfg, &out)?;
    let manifest = write_dataset(&out, cfg.seed, cfg.data.count, &cfg.data.scene, cfg.data.mode)?;
    println!("wrote {} samples, manifest {}", cfg.data.count, manifest.display());
    Ok(())
}

fn cmd_train(
    mut cfg: RunConfig,
    out: PathBuf,
    resume: Option<PathBuf>,
    steps: Option<usize>,
    seed: Option<u64>,
) -> Result<()> {
    if let Some(s) = steps {
        cfg.train.max_steps = s;
    }
    if let Some(s) = seed {
        cfg.seed = s;
        cfg.train.seed = s;
    }
    cfg.model.validate()?;
    cfg.train.validate()?;
    check_geometry(&cfg.data.scene, &cfg.model)?;

    let (mut params, mut opt, start) = match &resume {
        Some(p) => {
            let ck = load_checkpoint(p)?;
            if ck.model_cfg != cfg.model {
                return Err(Error::Config(
                    "checkpoint model configuration differs from the run configuration".into(),
                ));
            }
            (ck.params, ck.opt, ck.step)
        }
        None => {
            let params = ModelParameters::init(&cfg.model, cfg.train.seed)?;
            let opt = AdamW::new(&params);
            (params, opt, 0)
        }
    };

    write_snapshot(&cfg, &out)?;
    let mut log = TrainLog::create(&out.join("train_log.jsonl"))?;
    let bs = cfg.train.batch_size;
    for step in start..cfg.train.max_steps {
        let t0 = std::time::Instant::now();
        let batch = (0..bs)
            .map(|i| {
                let idx = (step * bs + i) as u64 % cfg.data.count;
                let trip =
                    dataset_sample::<f32>(cfg.seed, idx, &cfg.data.scene, cfg.data.mode)?;
                prepare_triplet(&trip, &cfg.model)
            })
            .collect::<Result<Vec<_>>>()?;
        let stats = train_step(&mut params, &mut opt, &batch, &cfg.model, &cfg.train, step)?;
        log.record(&stats, t0.elapsed().as_millis())?;
        if (step + 1) % 50 == 0 || step + 1 == cfg.train.max_steps {
            eprintln!("step {:>6}  loss {:.6}", stats.step, stats.loss);
        }
        let done = step + 1;
        if cfg.train.checkpoint_interval > 0
            && done % cfg.train.checkpoint_interval == 0
            && done != cfg.train.max_steps
        {
            let ck = Checkpoint {
                model_cfg: cfg.model.clone(),
                train_cfg: cfg.train.clone(),
                params: params.clone(),
                opt: opt.clone(),
                step: done,
            };
            save_checkpoint(&ck, &out.join(format!("ckpt_{done:06}.bin")))?;
        }
    }
    let ck = Checkpoint {
        model_cfg: cfg.model.clone(),
        train_cfg: cfg.train.clone(),
        params,
        opt,
        step: cfg.train.max_steps,
    };
    let final_path = out.join("ckpt_final.bin");
    save_checkpoint(&ck, &final_path)?;
    println!("trained to step {}, checkpoint {}", ck.step, final_path.display());
    Ok(())
}

fn parse_prompt(text: &str, l1_max: usize) -> Result<PromptTokens> {
    let ids = text
        .split_whitespace()
        .map(|w| {
            vocab::id_of(w)
                .ok_or_else(|| Error::Config(format!("unknown prompt word {w:?}")))
        })
        .collect::<Result<Vec<u16>>>()?;
    PromptTokens::with_limit(ids, l1_max)
}

fn require_checkpoint(path: Option<PathBuf>) -> Result<(Checkpoint, String)> {
    let path = path.ok_or_else(|| Error::Config("missing --checkpoint path".into()))?;
    let bytes = std::fs::read(&path)
        .map_err(|e| Error::Config(format!("checkpoint {}: {e}", path.display())))?;
    let hash = sha256_hex(&bytes);
    let ck = load_checkpoint(&path)?;
    Ok((ck, hash))
}

fn cmd_sample(
    mut cfg: RunConfig,
    checkpoint: Option<PathBuf>,
    refs: Vec<PathBuf>,
    prompt: Option<String>,
    seed: Option<u64>,
    out: PathBuf,
) -> Result<()> {
    if let Some(s) = seed {
        cfg.sample.seed = s;
    }
    let (ck, checkpoint_hash) = require_checkpoint(checkpoint)?;
    if refs.is_empty() {
        return Err(Error::Config("at least one --refs image is required".into()));
    }
    let prompt_text =
        prompt.ok_or_else(|| Error::Config("missing --prompt".into()))?;
    let prompt = parse_prompt(&prompt_text, ck.model_cfg.l1_max)?;
    let images = refs
        .iter()
        .map(|p| load_image::<f32>(p))
        .collect::<Result<Vec<_>>>()?;
    let (clip, stats) = generate(&ck.params, &ck.model_cfg, &cfg.sample, &prompt, &images)?;
    let sidecar = Sidecar {
        seed: cfg.sample.seed,
        config_hash: config_hash(&ck.model_cfg, &cfg.sample, &prompt)?,
        checkpoint_hash,
    };
    write_snapshot(&cfg, &out)?;
    write_generation(&out, &clip, &sidecar)?;
    println!(
        "wrote {} frames to {} ({} model evaluations)",
        clip.frame_count(),
        out.display(),
        stats.model_evals
    );
    Ok(())
}

/// Held-out evaluation samples come from a salted stream disjoint from the
/// training index stream.
const HELD_OUT_SALT: u64 = 0x6865_6c64_5f6f_7574;

fn cmd_eval(
    mut cfg: RunConfig,
    checkpoint: Option<PathBuf>,
    count: Option<usize>,
    seed: Option<u64>,
    out: PathBuf,
) -> Result<()> {
    if let Some(c) = count {
        cfg.eval.count = c;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let (ck, checkpoint_hash) = require_checkpoint(checkpoint)?;
    check_geometry(&cfg.data.scene, &ck.model_cfg)?;
    if cfg.eval.count == 0 {
        return Err(Error::Config("eval count must be >= 1".into()));
    }
    let held_seed = cfg.seed ^ HELD_OUT_SALT;
    let mut per_sample = Vec::with_capacity(cfg.eval.count);
    for id in 0..cfg.eval.count as u64 {
        let trip = dataset_sample::<f32>(held_seed, id, &cfg.data.scene, cfg.data.mode)?;
        let scfg = SampleConfig {
            seed: cfg.sample.seed.wrapping_add(id),
            ..cfg.sample.clone()
        };
        let (clip, _) = generate(&ck.params, &ck.model_cfg, &scfg, &trip.prompt, &trip.refs)?;
        per_sample.push(evaluate_generated(id, &clip, &trip)?);
        if (id + 1) % 10 == 0 {
            eprintln!("evaluated {}/{}", id + 1, cfg.eval.count);
        }
    }
    let report = build_report(per_sample, cfg.eval.count, &checkpoint_hash)?;
    write_snapshot(&cfg, &out)?;
    write_report(&report, &out)?;
    let a = &report.aggregate;
    println!(
        "consistency {:.4}  motion {:.4}  leakage {:.4}  ({} samples) -> {}",
        a.subject_consistency,
        a.motion_accuracy,
        a.leakage,
        report.count,
        out.display()
    );
    Ok(())
}

fn cmd_gradcheck(cli_config: &Option<PathBuf>, stride: usize, seed: Option<u64>) -> Result<()> {
    // without an explicit config, audit the micro model; the full default
    // model makes central differences needlessly slow
    let (model, base_seed) = match cli_config {
        Some(_) => {
            let cfg = load_config(cli_config)?;
            (cfg.model, cfg.seed)
        }
        None => (ModelConfig::micro(), 0),
    };
    let seed = seed.unwrap_or(base_seed);
    let report = grad_fidelity(&model, seed, stride, 1e-4)?;
    let mut worst: Vec<_> = report.per_param.clone();
    worst.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
    for (name, err) in worst.iter().take(8) {
        println!("{err:>12.3e}  {name}");
    }
    println!(
        "max relative error {:.3e} over {} coordinates",
        report.max_rel_err, report.coords_checked
    );
    if report.passes(1e-4) {
        println!("PASS (tolerance 1e-4)");
        Ok(())
    } else {
        Err(Error::Numeric(format!(
            "gradient check failed: max relative error {:.3e} >= 1e-4",
            report.max_rel_err
        )))
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Config { cmd: ConfigCmd::Dump } => {
            let text = toml::to_string_pretty(&RunConfig::default())
                .map_err(|e| Error::Config(e.to_string()))?;
            print!("{text}");
            Ok(())
        }
        Cmd::Gradcheck { stride, seed } => cmd_gradcheck(&cli.config, stride, seed),
        Cmd::Datagen {
            out,
            count,
            seed,
            mode,
        } => cmd_datagen(load_config(&cli.config)?, out, count, seed, mode),
        Cmd::Train {
            out,
            resume,
            steps,
            seed,
        } => cmd_train(load_config(&cli.config)?, out, resume, steps, seed),
        Cmd::Sample {
            checkpoint,
            refs,
            prompt,
            seed,
            out,
        } => cmd_sample(load_config(&cli.config)?, checkpoint, refs, prompt, seed, out),
        Cmd::Eval {
            checkpoint,
            count,
            seed,
            out,
        } => cmd_eval(load_config(&cli.config)?, checkpoint, count, seed, out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => ExitCode::from(3),
                _ => ExitCode::from(1),
            }
        }
    }
}
