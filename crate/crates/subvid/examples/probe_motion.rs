use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use subvid::dataforge::{dataset_sample, PairMode, SceneConfig};
use subvid::encoders::PromptTokens;
use subvid::mmdit::model_forward;
use subvid::tensor::{Tape, TensorData};
use subvid::training::{
    build_streams, deserialize_checkpoint, noisify, prepare_triplet, rf_loss, velocity_target,
    ConditionMode, DropoutDecision,
};

fn flip_motion(p: &PromptTokens) -> PromptTokens {
    let ids: Vec<u16> = p
        .ids()
        .iter()
        .map(|&id| match id {
            12 => 13,
            13 => 12,
            14 => 15,
            15 => 14,
            x => x,
        })
        .collect();
    PromptTokens::new(ids).unwrap()
}

fn flip_color(p: &PromptTokens) -> PromptTokens {
    let ids: Vec<u16> = p
        .ids()
        .iter()
        .map(|&id| if id < 8 { (id + 4) % 8 } else { id })
        .collect();
    PromptTokens::new(ids).unwrap()
}

fn main() {
    let path = std::env::args().nth(1).expect("ckpt path");
    let bytes = std::fs::read(&path).unwrap();
    let ckpt = deserialize_checkpoint(&bytes).unwrap();
    let cfg = ckpt.model_cfg.clone();
    let scene = SceneConfig {
        frames: cfg.frames,
        height: cfg.latent_h * cfg.patch,
        width: cfg.latent_w * cfg.patch,
        subjects: 1,
    };
    let decision = DropoutDecision {
        null_ref_v: false,
        mode: ConditionMode::Ti,
    };
    for &t in &[0.5f64, 0.9, 0.97] {
        let mut sums = [0.0f64; 3]; // true, motion-flipped, color-flipped
        let n = 24;
        for s in 0..n {
            let trip = dataset_sample::<f32>(777, s, &scene, PairMode::InPair).unwrap();
            let base = prepare_triplet(&trip, &cfg).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let eps = TensorData::<f32>::randn(base.video_latent.shape().to_vec(), &mut rng);
            for (k, prompt) in [
                base.prompt.clone(),
                flip_motion(&base.prompt),
                flip_color(&base.prompt),
            ]
            .into_iter()
            .enumerate()
            {
                let mut sample = base.clone();
                sample.prompt = prompt;
                let x_t = noisify(&sample.video_latent, &eps, t).unwrap();
                let target = velocity_target(&sample.video_latent, &eps).unwrap();
                let mut tape = Tape::new();
                let ids = ckpt.params.leaf_into(&mut tape, &|_| false);
                let grid = tape.constant(&x_t);
                let (vis, txt, map) =
                    build_streams(&mut tape, &ids, &cfg, grid, &sample, &decision).unwrap();
                let pred = model_forward(&mut tape, &ids.mmdit, &cfg, vis, t, txt, map.l1).unwrap();
                let tg = tape.constant(&target);
                let loss = rf_loss(&mut tape, pred, tg, &map).unwrap();
                sums[k] += tape.data_of(loss)[0] as f64;
            }
        }
        println!(
            "t={t}: loss true {:.5}  motion-flip gap {:+.5}  color-flip gap {:+.5}",
            sums[0] / n as f64,
            (sums[1] - sums[0]) / n as f64,
            (sums[2] - sums[0]) / n as f64
        );
    }
}
