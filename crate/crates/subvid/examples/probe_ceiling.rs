use subvid::dataforge::{dataset_sample, PairMode, SceneConfig};
use subvid::mmdit::ModelConfig;
use subvid::training::prepare_triplet;

// How much of the clean-latent variance does the motion token explain?
// At t -> 1 the noised input carries no information, so the best
// direction-aware predictor beats the direction-agnostic one by exactly
// Var(E[x0 | direction]) per value. Same question for the color token.
fn main() {
    let cfg = ModelConfig::default();
    let scene = SceneConfig {
        frames: cfg.frames,
        height: cfg.latent_h * cfg.patch,
        width: cfg.latent_w * cfg.patch,
        subjects: 1,
    };
    let n = 400u64;
    let mut clips: Vec<(u16, u16, Vec<f64>)> = Vec::new();
    for s in 0..n {
        let trip = dataset_sample::<f64>(777, s, &scene, PairMode::InPair).unwrap();
        let sample = prepare_triplet(&trip, &cfg).unwrap();
        let ids = sample.prompt.ids().to_vec();
        let color = *ids.iter().find(|&&i| i < 8).unwrap();
        let motion = *ids.iter().find(|&&i| (12..16).contains(&i)).unwrap();
        clips.push((color, motion, sample.video_latent.data().to_vec()));
    }
    let d = clips[0].2.len();
    let var_about = |key: &dyn Fn(&(u16, u16, Vec<f64>)) -> u16| -> f64 {
        let mut groups: std::collections::HashMap<u16, (Vec<f64>, f64)> =
            std::collections::HashMap::new();
        for c in &clips {
            let e = groups.entry(key(c)).or_insert_with(|| (vec![0.0; d], 0.0));
            for (a, b) in e.0.iter_mut().zip(&c.2) {
                *a += b;
            }
            e.1 += 1.0;
        }
        for e in groups.values_mut() {
            for a in e.0.iter_mut() {
                *a /= e.1;
            }
        }
        let mut sse = 0.0;
        for c in &clips {
            let m = &groups[&key(c)].0;
            for (a, b) in c.2.iter().zip(m) {
                sse += (a - b) * (a - b);
            }
        }
        sse / (clips.len() * d) as f64
    };
    let total = var_about(&|_| 0);
    let by_motion = var_about(&|c| c.1);
    let by_color = var_about(&|c| c.0);
    let by_both = var_about(&|c| c.0 * 16 + c.1);
    println!("residual variance per value:");
    println!("  unconditional        {total:.5}");
    println!("  given motion token   {by_motion:.5}  (gap {:+.5})", total - by_motion);
    println!("  given color token    {by_color:.5}  (gap {:+.5})", total - by_color);
    println!("  given both           {by_both:.5}  (gap {:+.5})", total - by_both);
}
