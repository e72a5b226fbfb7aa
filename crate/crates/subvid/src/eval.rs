//! Evaluation metrics over generated clips: subject consistency against the
//! reference crop, motion-following via exact centroid trajectories, and
//! copy-paste leakage of reference backgrounds, plus report emission.
//! Segmentation and trajectories are exact in the synthetic sprite world, so
//! the metrics need no learned vision models.

use crate::dataforge::{
    palette_hue, rgb_to_hsv, Box2D, Mask, Motion, TripletSample, SPRITE_SATURATION_MIN,
};
use crate::encoders::{ReferenceImage, VideoClip};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, TensorData};
use serde::{Deserialize, Serialize};

/// Frames sampled per clip for frame-averaged metrics.
pub const EVAL_FRAMES: usize = 10;

/// A pixel matches a palette entry when its hue is within this tolerance
/// (palette hues are 45° apart; generation jitter is at most 5°).
pub const HUE_TOLERANCE_DEG: f64 = 18.0;

/// Smallest connected component accepted as a subject; anything below is
/// treated as the empty-subject signal.
pub const MIN_SUBJECT_PX: usize = 4;

// ── frame sampling ───────────────────────────────────────────────────

/// Uniform frame indices: min(k, t) frames at round(i·(t−1)/(k−1)),
/// deduplicated in order; k = 1 picks the middle frame.
pub fn sample_frames_uniform(t: usize, k: usize) -> Result<Vec<usize>> {
    if t == 0 {
        return Err(Error::Contract("cannot sample frames of an empty clip".into()));
    }
    if k == 0 {
        return Err(Error::Contract("frame sample count must be >= 1".into()));
    }
    let k = k.min(t);
    if k == 1 {
        return Ok(vec![t / 2]);
    }
    let mut out = Vec::with_capacity(k);
    for i in 0..k {
        let idx = ((i * (t - 1)) as f64 / (k - 1) as f64).round() as usize;
        if out.last() != Some(&idx) {
            out.push(idx);
        }
    }
    Ok(out)
}

// ── segmentation ─────────────────────────────────────────────────────

/// Subject segmentation result: the largest connected component of pixels
/// matching the palette entry, plus its tight crop.
#[derive(Clone, Debug)]
pub struct Segmented<T> {
    pub mask: Mask,
    pub crop: ReferenceImage<T>,
    pub bbox: Box2D,
}

fn pixel_matches(rgb: [f64; 3], color: usize) -> bool {
    let (h, s, _) = rgb_to_hsv(rgb[0], rgb[1], rgb[2]);
    if s < SPRITE_SATURATION_MIN {
        return false;
    }
    let target = palette_hue(color);
    let mut d = (h - target).abs();
    d = d.min(360.0 - d);
    d <= HUE_TOLERANCE_DEG
}

fn largest_component(raw: &Mask) -> Mask {
    let (h, w) = (raw.h, raw.w);
    let mut label = vec![usize::MAX; h * w];
    let mut sizes: Vec<usize> = Vec::new();
    for start in 0..h * w {
        if !raw.data[start] || label[start] != usize::MAX {
            continue;
        }
        let id = sizes.len();
        let mut queue = vec![start];
        label[start] = id;
        let mut size = 0usize;
        while let Some(p) = queue.pop() {
            size += 1;
            let (y, x) = (p / w, p % w);
            let mut push = |q: usize| {
                if raw.data[q] && label[q] == usize::MAX {
                    label[q] = id;
                    queue.push(q);
                }
            };
            if y > 0 {
                push(p - w);
            }
            if y + 1 < h {
                push(p + w);
            }
            if x > 0 {
                push(p - 1);
            }
            if x + 1 < w {
                push(p + 1);
            }
        }
        sizes.push(size);
    }
    let best = sizes
        .iter()
        .enumerate()
        .max_by_key(|(_, &s)| s)
        .map(|(i, _)| i)
        .unwrap();
    let mut out = Mask::empty(h, w);
    for (i, &l) in label.iter().enumerate() {
        out.data[i] = l == best;
    }
    out
}

fn crop_image<T: Scalar>(img: &ReferenceImage<T>, b: &Box2D) -> Result<ReferenceImage<T>> {
    let (y0, x0, y1, x1) = (b.y0 as usize, b.x0 as usize, b.y1 as usize, b.x1 as usize);
    let mut data = Vec::with_capacity((y1 - y0) * (x1 - x0) * 3);
    for y in y0..y1 {
        for x in x0..x1 {
            let base = (y * img.width() + x) * 3;
            data.extend_from_slice(&img.tensor().data()[base..base + 3]);
        }
    }
    ReferenceImage::new(TensorData::new(vec![y1 - y0, x1 - x0, 3], data)?)
}

/// Segment the subject rendered in palette entry `color`. Returns None when
/// no pixel matches (the empty-subject signal, not an error).
pub fn segment_subject<T: Scalar>(
    frame: &ReferenceImage<T>,
    color: usize,
) -> Result<Option<Segmented<T>>> {
    let (h, w) = (frame.height(), frame.width());
    let mut raw = Mask::empty(h, w);
    for y in 0..h {
        for x in 0..w {
            let px = frame.pixel(y, x);
            raw.data[y * w + x] =
                pixel_matches([px[0].as_f64(), px[1].as_f64(), px[2].as_f64()], color);
        }
    }
    if raw.count() == 0 {
        return Ok(None);
    }
    let mask = largest_component(&raw);
    // a real sprite occupies a solid region; a handful of stray matching
    // pixels is noise, not a subject
    if mask.count() < MIN_SUBJECT_PX {
        return Ok(None);
    }
    let bbox = mask.bbox().unwrap();
    let crop = crop_image(frame, &bbox)?;
    Ok(Some(Segmented { mask, crop, bbox }))
}

// ── toy embedding ────────────────────────────────────────────────────

/// Frozen hand-built embedding of a subject crop: centered mean RGB, a
/// centered 4×4×4 color histogram, and the crop aspect ratio. Deterministic;
/// two identical crops embed identically.
pub fn toy_embedding<T: Scalar>(crop: &ReferenceImage<T>) -> Vec<f64> {
    let (h, w) = (crop.height(), crop.width());
    let n = (h * w) as f64;
    let mut mean = [0.0f64; 3];
    let mut hist = vec![0.0f64; 64];
    for y in 0..h {
        for x in 0..w {
            let px = crop.pixel(y, x);
            let rgb = [px[0].as_f64(), px[1].as_f64(), px[2].as_f64()];
            let mut bin = 0usize;
            for c in 0..3 {
                mean[c] += rgb[c] / n;
                let q = ((rgb[c].clamp(0.0, 1.0) * 4.0) as usize).min(3);
                bin = bin * 4 + q;
            }
            hist[bin] += 1.0 / n;
        }
    }
    let ar = h as f64 / w as f64;
    // center each feature on its uninformative value so unrelated crops score
    // near zero cosine instead of inheriting the positivity of raw counts
    let mut e = Vec::with_capacity(3 + 64 + 1);
    e.extend(mean.iter().map(|m| m - 0.5));
    e.extend(hist.iter().map(|v| v - 1.0 / 64.0));
    e.push(ar.min(1.0 / ar) - 0.5);
    e
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

// ── metrics ──────────────────────────────────────────────────────────

/// Mean cosine similarity between the embedded reference crop and the
/// embedded subject crop of `k` uniformly sampled frames; frames where the
/// subject is missing contribute −1.
pub fn subject_consistency_score<T: Scalar>(
    ref_crop: &ReferenceImage<T>,
    clip: &VideoClip<T>,
    color: usize,
    k: usize,
) -> Result<f64> {
    let ref_emb = toy_embedding(ref_crop);
    let frames = sample_frames_uniform(clip.frame_count(), k)?;
    let mut total = 0.0;
    for &f in &frames {
        let frame = clip.frame(f);
        total += match segment_subject(&frame, color)? {
            Some(seg) => cosine(&ref_emb, &toy_embedding(&seg.crop)),
            None => -1.0,
        };
    }
    Ok(total / frames.len() as f64)
}

/// Quantize a displacement to one of the four commanded directions; None
/// when the displacement is zero or exactly diagonal.
pub fn quantize_direction(dy: f64, dx: f64) -> Option<Motion> {
    if dx.abs() > dy.abs() {
        Some(if dx > 0.0 { Motion::Right } else { Motion::Left })
    } else if dy.abs() > dx.abs() {
        Some(if dy > 0.0 { Motion::Down } else { Motion::Up })
    } else {
        None
    }
}

/// 1 iff the first→last valid-frame centroid displacement quantizes to the
/// commanded motion; None (indeterminate) with fewer than two valid frames
/// or a degenerate displacement.
pub fn motion_following_accuracy(masks: &[Mask], commanded: Motion) -> Option<bool> {
    let valid: Vec<(f64, f64)> = masks.iter().filter_map(|m| m.centroid()).collect();
    if valid.len() < 2 {
        return None;
    }
    let first = valid[0];
    let last = valid[valid.len() - 1];
    let dir = quantize_direction(last.0 - first.0, last.1 - first.1)?;
    Some(dir == commanded)
}

fn color_histogram(pixels: &[[f64; 3]]) -> Vec<f64> {
    let mut hist = vec![0.0f64; 512];
    for rgb in pixels {
        let mut bin = 0usize;
        for &c in rgb {
            bin = bin * 8 + ((c.clamp(0.0, 1.0) * 8.0) as usize).min(7);
        }
        hist[bin] += 1.0;
    }
    let n: f64 = hist.iter().sum();
    if n > 0.0 {
        for h in &mut hist {
            *h /= n;
        }
    }
    hist
}

fn histogram_intersection(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.min(*y)).sum()
}

fn background_pixels<T: Scalar>(img: &ReferenceImage<T>, mask: &Mask) -> Vec<[f64; 3]> {
    let mut out = Vec::new();
    for y in 0..img.height() {
        for x in 0..img.width() {
            if !mask.get(y, x) {
                let px = img.pixel(y, x);
                out.push([px[0].as_f64(), px[1].as_f64(), px[2].as_f64()]);
            }
        }
    }
    out
}

/// Normalized color-histogram intersection between the reference background
/// (mask complement) and the generated background, averaged over sampled
/// frames. Higher = more copy-paste. None when every frame is all-subject.
pub fn leakage_score<T: Scalar>(
    ref_image: &ReferenceImage<T>,
    ref_mask: &Mask,
    clip: &VideoClip<T>,
    clip_masks: &[Mask],
    k: usize,
) -> Result<Option<f64>> {
    if clip_masks.len() != clip.frame_count() {
        return Err(Error::Contract(format!(
            "{} masks for {} frames",
            clip_masks.len(),
            clip.frame_count()
        )));
    }
    let ref_bg = background_pixels(ref_image, ref_mask);
    if ref_bg.is_empty() {
        return Ok(None);
    }
    let ref_hist = color_histogram(&ref_bg);
    let mut total = 0.0;
    let mut counted = 0usize;
    for &f in &sample_frames_uniform(clip.frame_count(), k)? {
        let frame = clip.frame(f);
        let bg = background_pixels(&frame, &clip_masks[f]);
        if bg.is_empty() {
            continue;
        }
        total += histogram_intersection(&ref_hist, &color_histogram(&bg));
        counted += 1;
    }
    Ok((counted > 0).then(|| total / counted as f64))
}

// ── whole-sample evaluation ──────────────────────────────────────────

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SampleMetrics {
    pub id: u64,
    pub subject_consistency: f64,
    pub motion_accuracy: f64,
    pub leakage: f64,
}

/// Score one generated clip against the triplet's ground truth: consistency
/// and leakage per reference, motion per commanded subject, each averaged
/// over subjects. Indeterminate motion scores 0; indeterminate leakage
/// scores 0 (nothing measurable leaked).
pub fn evaluate_generated<T: Scalar>(
    id: u64,
    generated: &VideoClip<T>,
    sample: &TripletSample<T>,
) -> Result<SampleMetrics> {
    let n = sample.specs.len() as f64;
    let mut consistency = 0.0;
    let mut motion = 0.0;
    let mut leakage = 0.0;
    for (si, spec) in sample.specs.iter().enumerate() {
        let ref_seg = segment_subject(&sample.refs[si], spec.color)?;
        let (ref_crop, ref_mask) = match &ref_seg {
            Some(seg) => (seg.crop.clone(), seg.mask.clone()),
            None => {
                return Err(Error::Contract(format!(
                    "reference {si} contains no subject pixels"
                )))
            }
        };
        consistency +=
            subject_consistency_score(&ref_crop, generated, spec.color, EVAL_FRAMES)? / n;

        let gen_masks: Vec<Mask> = (0..generated.frame_count())
            .map(|f| {
                Ok(segment_subject(&generated.frame(f), spec.color)?
                    .map(|s| s.mask)
                    .unwrap_or_else(|| {
                        Mask::empty(generated.height(), generated.width())
                    }))
            })
            .collect::<Result<_>>()?;
        if motion_following_accuracy(&gen_masks, spec.motion) == Some(true) {
            motion += 1.0 / n;
        }
        // leakage compares the raw reference (with its own background) to
        // the generated background
        leakage += leakage_score(
            &sample.refs[si],
            &ref_mask,
            generated,
            &gen_masks,
            EVAL_FRAMES,
        )?
        .unwrap_or(0.0)
            / n;
    }
    Ok(SampleMetrics {
        id,
        subject_consistency: consistency,
        motion_accuracy: motion,
        leakage,
    })
}

// ── reporting ────────────────────────────────────────────────────────

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Aggregate {
    pub subject_consistency: f64,
    pub motion_accuracy: f64,
    pub leakage: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub config_hash: String,
    pub count: usize,
    pub aggregate: Aggregate,
    pub per_sample: Vec<SampleMetrics>,
}

/// Assemble the report; `expected_count` is the manifest's sample count and
/// must match the evaluated set exactly.
pub fn build_report(
    per_sample: Vec<SampleMetrics>,
    expected_count: usize,
    config_hash: &str,
) -> Result<MetricsReport> {
    if per_sample.len() != expected_count {
        return Err(Error::Contract(format!(
            "evaluated {} samples but the manifest lists {expected_count}",
            per_sample.len()
        )));
    }
    if per_sample.is_empty() {
        return Err(Error::Contract("cannot aggregate zero samples".into()));
    }
    let n = per_sample.len() as f64;
    let aggregate = Aggregate {
        subject_consistency: per_sample.iter().map(|s| s.subject_consistency).sum::<f64>() / n,
        motion_accuracy: per_sample.iter().map(|s| s.motion_accuracy).sum::<f64>() / n,
        leakage: per_sample.iter().map(|s| s.leakage).sum::<f64>() / n,
    };
    Ok(MetricsReport {
        schema_version: REPORT_SCHEMA_VERSION,
        config_hash: config_hash.to_string(),
        count: per_sample.len(),
        aggregate,
        per_sample,
    })
}

/// Emit `report.json` plus a human-readable `report.txt` table.
pub fn write_report(report: &MetricsReport, dir: &std::path::Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(
        dir.join("report.json"),
        serde_json::to_string_pretty(report)?,
    )?;
    let mut txt = String::new();
    txt.push_str(&format!(
        "samples: {}    config: {}\n",
        report.count, report.config_hash
    ));
    txt.push_str(&format!(
        "{:>8}  {:>12}  {:>8}  {:>8}\n",
        "sample", "consistency", "motion", "leakage"
    ));
    for s in &report.per_sample {
        txt.push_str(&format!(
            "{:>8}  {:>12.4}  {:>8.4}  {:>8.4}\n",
            s.id, s.subject_consistency, s.motion_accuracy, s.leakage
        ));
    }
    let a = &report.aggregate;
    txt.push_str(&format!(
        "{:>8}  {:>12.4}  {:>8.4}  {:>8.4}\n",
        "mean", a.subject_consistency, a.motion_accuracy, a.leakage
    ));
    std::fs::write(dir.join("report.txt"), txt)?;
    Ok(())
}

/// Score a sample's own video against its ground truth: the upper-leakage
/// baseline for in-pair data.
pub fn self_evaluation<T: Scalar>(id: u64, sample: &TripletSample<T>) -> Result<SampleMetrics> {
    evaluate_generated(id, &sample.video, sample)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataforge::{
        gen_sprite_triplet, render_scene, PairMode, SceneConfig, Shape, SpriteSpec, SpriteState,
    };

    #[test]
    fn frame_sampling_cases() {
        assert_eq!(
            sample_frames_uniform(10, 10).unwrap(),
            (0..10).collect::<Vec<_>>()
        );
        assert_eq!(
            sample_frames_uniform(8, 10).unwrap(),
            (0..8).collect::<Vec<_>>()
        );
        assert_eq!(sample_frames_uniform(9, 3).unwrap(), vec![0, 4, 8]);
        assert_eq!(sample_frames_uniform(9, 1).unwrap(), vec![4]);
        assert!(sample_frames_uniform(0, 3).is_err());
        assert!(sample_frames_uniform(5, 0).is_err());
    }

    fn static_state(shape: Shape, color: usize, r: f64, cy: f64, cx: f64) -> SpriteState {
        SpriteState {
            spec: SpriteSpec {
                shape,
                color,
                scale: r,
                motion: Motion::Right,
                speed: 0.0,
                start: (cy, cx),
            },
            hue_shift_deg: 0.0,
        }
    }

    #[test]
    fn segmentation_matches_generator_masks() {
        let scene = SceneConfig::default();
        for seed in 0..5 {
            let s = gen_sprite_triplet::<f64>(seed, &scene, PairMode::InPair).unwrap();
            let frame = s.video.frame(0);
            let seg = segment_subject(&frame, s.specs[0].color)
                .unwrap()
                .expect("subject visible");
            let iou = seg.mask.iou_with(&s.masks[0][0]);
            assert!(iou >= 0.95, "seed {seed}: IoU {iou}");
        }
    }

    #[test]
    fn background_only_frame_yields_empty_signal() {
        let scene = SceneConfig {
            frames: 1,
            ..SceneConfig::default()
        };
        let (clip, _) = render_scene::<f64>(&scene, 2, &[]).unwrap();
        let seg = segment_subject(&clip.frame(0), 0).unwrap();
        assert!(seg.is_none());
    }

    #[test]
    fn two_subject_masks_are_disjoint() {
        let scene = SceneConfig {
            frames: 1,
            subjects: 2,
            ..SceneConfig::default()
        };
        let sprites = vec![
            static_state(Shape::Square, 0, 4.0, 8.0, 8.0),
            static_state(Shape::Circle, 4, 4.0, 23.0, 23.0),
        ];
        let (clip, _) = render_scene::<f64>(&scene, 1, &sprites).unwrap();
        let a = segment_subject(&clip.frame(0), 0).unwrap().unwrap().mask;
        let b = segment_subject(&clip.frame(0), 4).unwrap().unwrap().mask;
        assert_eq!(a.iou_with(&b), 0.0);
        assert!(a.count() > 0 && b.count() > 0);
    }

    #[test]
    fn consistency_is_one_for_identical_crops_and_penalizes_absence() {
        let scene = SceneConfig::default();
        let sprites = vec![static_state(Shape::Square, 2, 4.0, 16.0, 16.0)];
        let (clip, _) = render_scene::<f64>(&scene, 0, &sprites).unwrap();
        let ref_crop = segment_subject(&clip.frame(0), 2).unwrap().unwrap().crop;
        let score = subject_consistency_score(&ref_crop, &clip, 2, EVAL_FRAMES).unwrap();
        assert!((score - 1.0).abs() < 1e-6, "score {score}");

        let (empty, _) = render_scene::<f64>(&scene, 0, &[]).unwrap();
        let score = subject_consistency_score(&ref_crop, &empty, 2, EVAL_FRAMES).unwrap();
        assert!((score + 1.0).abs() < 1e-12);
    }

    #[test]
    fn consistency_matches_independent_oracle_under_hue_jitter() {
        // same sprite rendered plain and with a 4° hue shift
        let scene = SceneConfig {
            frames: 1,
            ..SceneConfig::default()
        };
        let plain = vec![static_state(Shape::Circle, 5, 5.0, 16.0, 16.0)];
        let mut shifted = plain.clone();
        shifted[0].hue_shift_deg = 4.0;
        let (clip_a, _) = render_scene::<f64>(&scene, 0, &plain).unwrap();
        let (clip_b, _) = render_scene::<f64>(&scene, 0, &shifted).unwrap();
        let crop_a = segment_subject(&clip_a.frame(0), 5).unwrap().unwrap().crop;
        let score = subject_consistency_score(&crop_a, &clip_b, 5, 1).unwrap();

        // independent oracle: recompute the embeddings and cosine by hand
        let crop_b = segment_subject(&clip_b.frame(0), 5).unwrap().unwrap().crop;
        let (ea, eb) = (toy_embedding(&crop_a), toy_embedding(&crop_b));
        let dot: f64 = ea.iter().zip(&eb).map(|(x, y)| x * y).sum();
        let na = ea.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = eb.iter().map(|x| x * x).sum::<f64>().sqrt();
        let oracle = dot / (na * nb);
        assert!((score - oracle).abs() < 1e-4, "score {score} oracle {oracle}");
        assert!(score > 0.5, "hue jitter should stay similar, got {score}");
    }

    #[test]
    fn motion_accuracy_cases() {
        let scene = SceneConfig::default();
        let mover = SpriteState {
            spec: SpriteSpec {
                shape: Shape::Square,
                color: 0,
                scale: 3.0,
                motion: Motion::Right,
                speed: 1.5,
                start: (16.0, 5.0),
            },
            hue_shift_deg: 0.0,
        };
        let (_, masks) = render_scene::<f64>(&scene, 0, &[mover]).unwrap();
        assert_eq!(motion_following_accuracy(&masks[0], Motion::Right), Some(true));
        assert_eq!(motion_following_accuracy(&masks[0], Motion::Left), Some(false));

        // stationary sprite → indeterminate
        let still = static_state(Shape::Square, 0, 3.0, 16.0, 16.0);
        let (_, masks) = render_scene::<f64>(&scene, 0, &[still]).unwrap();
        assert_eq!(motion_following_accuracy(&masks[0], Motion::Right), None);

        // fewer than two valid frames → indeterminate
        let empties = vec![Mask::empty(4, 4), Mask::empty(4, 4)];
        assert_eq!(motion_following_accuracy(&empties, Motion::Up), None);
    }

    #[test]
    fn direction_quantization_matches_angle_bins() {
        // oracle: nearest of the four axis directions by angle; exact
        // diagonals are tie cases and are checked separately below
        for i in (0..360).filter(|i| i % 90 != 45) {
            let theta = (i as f64).to_radians();
            let (dy, dx) = (theta.sin() * 3.0, theta.cos() * 3.0);
            let got = quantize_direction(dy, dx);
            let candidates = [
                (Motion::Right, 0.0f64),
                (Motion::Down, 90.0),
                (Motion::Left, 180.0),
                (Motion::Up, 270.0),
            ];
            let deg = dy.atan2(dx).to_degrees().rem_euclid(360.0);
            let expect = candidates
                .iter()
                .min_by(|a, b| {
                    let da = (a.1 - deg).abs().min(360.0 - (a.1 - deg).abs());
                    let db = (b.1 - deg).abs().min(360.0 - (b.1 - deg).abs());
                    da.partial_cmp(&db).unwrap()
                })
                .map(|(m, _)| *m);
            assert_eq!(got, expect, "angle {i}");
        }
        assert_eq!(quantize_direction(2.0, 2.0), None);
        assert_eq!(quantize_direction(-1.0, 1.0), None);
        assert_eq!(quantize_direction(0.0, 0.0), None);
    }

    #[test]
    fn leakage_extremes() {
        let scene = SceneConfig {
            frames: 4,
            ..SceneConfig::default()
        };
        let sprites = vec![static_state(Shape::Square, 0, 4.0, 16.0, 16.0)];
        let (clip, masks) = render_scene::<f64>(&scene, 3, &sprites).unwrap();
        let frame0 = clip.frame(0);
        let ref_mask = &masks[0][0];

        // self comparison: identical backgrounds → exactly 1
        let score = leakage_score(&frame0, ref_mask, &clip, &masks[0], EVAL_FRAMES)
            .unwrap()
            .unwrap();
        assert!((score - 1.0).abs() < 1e-6, "self leakage {score}");

        // different background gray → near zero overlap
        let (other, other_masks) = render_scene::<f64>(&scene, 0, &sprites).unwrap();
        let score = leakage_score(&frame0, ref_mask, &other, &other_masks[0], EVAL_FRAMES)
            .unwrap()
            .unwrap();
        assert!(score <= 0.05, "disjoint-palette leakage {score}");
    }

    #[test]
    fn report_aggregation_and_round_trip() {
        let s = |id, v| SampleMetrics {
            id,
            subject_consistency: v,
            motion_accuracy: v,
            leakage: v,
        };
        let one = build_report(vec![s(0, 0.4)], 1, "h").unwrap();
        assert!((one.aggregate.leakage - 0.4).abs() < 1e-9);

        let two = build_report(vec![s(0, 0.2), s(1, 0.8)], 2, "h").unwrap();
        assert!((two.aggregate.subject_consistency - 0.5).abs() < 1e-9);

        assert!(matches!(
            build_report(vec![s(0, 0.2)], 3, "h"),
            Err(Error::Contract(_))
        ));

        let json = serde_json::to_string(&two).unwrap();
        let back: MetricsReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, two);

        // deterministic bytes
        let dir = tempfile::tempdir().unwrap();
        write_report(&two, dir.path()).unwrap();
        let b1 = std::fs::read(dir.path().join("report.json")).unwrap();
        write_report(&two, dir.path()).unwrap();
        let b2 = std::fs::read(dir.path().join("report.json")).unwrap();
        assert_eq!(b1, b2);
        assert!(dir.path().join("report.txt").exists());
    }

    #[test]
    fn self_evaluation_scores_ground_truth_high() {
        let scene = SceneConfig::default();
        let s = gen_sprite_triplet::<f64>(11, &scene, PairMode::InPair).unwrap();
        let m = self_evaluation(0, &s).unwrap();
        assert!(m.subject_consistency > 0.9, "consistency {}", m.subject_consistency);
        assert_eq!(m.motion_accuracy, 1.0);
        // in-pair refs share the video background, so leakage is near 1
        assert!(m.leakage > 0.9, "leakage {}", m.leakage);
    }
}
