//! Concatenation of the text stream (prompt features + per-reference
//! semantic tokens) and the visual stream (video latent frames + reference
//! latent frames), with a span map that later stages use to separate the
//! injected features again.

use crate::encoders::{LatentFrameGrid, Provenance};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, TensorData};

pub const MAX_REFERENCES: usize = 4;

/// Contiguous, disjoint spans covering both streams.
///
/// Text stream rows: `[0, l1)` prompt features, `[l1, l1+l2)` semantic
/// tokens. Visual stream frames: `[0, t)` video, `[t, t+n)` reference tail.
#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct SegmentMap {
    pub l1: usize,
    /// Semantic token count per reference, in reference order.
    pub ref_c_counts: Vec<usize>,
    pub t: usize,
    /// Latent frame count per reference (one per static reference image).
    pub ref_frame_counts: Vec<usize>,
}

impl SegmentMap {
    pub fn new(
        l1: usize,
        ref_c_counts: Vec<usize>,
        t: usize,
        ref_frame_counts: Vec<usize>,
    ) -> Result<Self> {
        if ref_c_counts.len() != ref_frame_counts.len() {
            return Err(Error::Contract(format!(
                "semantic token groups ({}) and latent frame groups ({}) disagree",
                ref_c_counts.len(),
                ref_frame_counts.len()
            )));
        }
        if ref_frame_counts.len() > MAX_REFERENCES {
            return Err(Error::Contract(format!(
                "{} references exceed the maximum of {MAX_REFERENCES}",
                ref_frame_counts.len()
            )));
        }
        Ok(Self {
            l1,
            ref_c_counts,
            t,
            ref_frame_counts,
        })
    }

    pub fn ref_count(&self) -> usize {
        self.ref_frame_counts.len()
    }

    /// Total semantic token rows (l2 of the text stream).
    pub fn l2(&self) -> usize {
        self.ref_c_counts.iter().sum()
    }

    /// Total reference latent frames (n of the visual stream).
    pub fn n(&self) -> usize {
        self.ref_frame_counts.iter().sum()
    }

    pub fn text_rows(&self) -> usize {
        self.l1 + self.l2()
    }

    pub fn frames(&self) -> usize {
        self.t + self.n()
    }

    /// Row span of the prompt features: [0, l1).
    pub fn text_span(&self) -> std::ops::Range<usize> {
        0..self.l1
    }

    /// Row span of all semantic tokens: [l1, l1+l2).
    pub fn ref_c_span(&self) -> std::ops::Range<usize> {
        self.l1..self.l1 + self.l2()
    }

    /// Frame span of the video: [0, t).
    pub fn video_frames(&self) -> std::ops::Range<usize> {
        0..self.t
    }

    /// Frame span of the reference tail: [t, t+n).
    pub fn ref_frames(&self) -> std::ops::Range<usize> {
        self.t..self.t + self.n()
    }

    /// Per-reference sub-span of semantic token rows.
    pub fn ref_c_subspan(&self, i: usize) -> std::ops::Range<usize> {
        let start = self.l1 + self.ref_c_counts[..i].iter().sum::<usize>();
        start..start + self.ref_c_counts[i]
    }

    /// Per-reference sub-span of tail frames.
    pub fn ref_frame_subspan(&self, i: usize) -> std::ops::Range<usize> {
        let start = self.t + self.ref_frame_counts[..i].iter().sum::<usize>();
        start..start + self.ref_frame_counts[i]
    }
}

/// (l1+l2) × c features with a span map.
#[derive(Clone, Debug, PartialEq)]
pub struct TextStream<T> {
    pub features: TensorData<T>,
    pub map: SegmentMap,
}

/// (t+n) × h × w × c_lat latent frames with a span map; reference frames
/// occupy the tail.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualStream<T> {
    pub frames: TensorData<T>,
    pub map: SegmentMap,
}

impl<T: Scalar> VisualStream<T> {
    pub fn h(&self) -> usize {
        self.frames.shape()[1]
    }
    pub fn w(&self) -> usize {
        self.frames.shape()[2]
    }
    pub fn c_lat(&self) -> usize {
        self.frames.shape()[3]
    }
}

/// Concatenate prompt features with per-reference semantic tokens, in
/// reference order. `text` is l1 × c, each ref entry l2_i × c.
pub fn merge_text_stream<T: Scalar>(
    text: &TensorData<T>,
    ref_c: &[TensorData<T>],
    map_hint: Option<(usize, Vec<usize>)>,
) -> Result<TextStream<T>> {
    if text.shape().len() != 2 {
        return Err(Error::Dimension(format!(
            "text features must be rank 2, got {:?}",
            text.shape()
        )));
    }
    let c = text.shape()[1];
    let l1 = text.shape()[0];
    let mut counts = Vec::with_capacity(ref_c.len());
    let mut data = text.data().to_vec();
    for r in ref_c {
        if r.shape().len() != 2 || r.shape()[1] != c {
            return Err(Error::Dimension(format!(
                "semantic tokens {:?} do not match channel dim {c}",
                r.shape()
            )));
        }
        counts.push(r.shape()[0]);
        data.extend_from_slice(r.data());
    }
    let (t, frame_counts) = match map_hint {
        Some((t, fc)) => (t, fc),
        None => (0, vec![1; ref_c.len()]),
    };
    let map = SegmentMap::new(l1, counts, t, frame_counts)?;
    let features = TensorData::new(vec![map.text_rows(), c], data)?;
    Ok(TextStream { features, map })
}

/// Concatenate video latent frames with reference latent frames along the
/// frame axis; references land at the tail in input order, one frame each.
pub fn merge_visual_stream<T: Scalar>(
    vid: &LatentFrameGrid<T>,
    refs: &[LatentFrameGrid<T>],
) -> Result<VisualStream<T>> {
    if refs.len() > MAX_REFERENCES {
        return Err(Error::Contract(format!(
            "{} references exceed the maximum of {MAX_REFERENCES}",
            refs.len()
        )));
    }
    let vs = vid.grid.shape();
    let (t, h, w, c) = (vs[0], vs[1], vs[2], vs[3]);
    let mut data = vid.grid.data().to_vec();
    let mut frame_counts = Vec::with_capacity(refs.len());
    for r in refs {
        if r.provenance != Provenance::Reference {
            return Err(Error::Contract(
                "tail frames must carry reference provenance".into(),
            ));
        }
        let rs = r.grid.shape();
        if rs[1] != h || rs[2] != w || rs[3] != c {
            return Err(Error::Dimension(format!(
                "reference grid {rs:?} does not match video grid [{t},{h},{w},{c}]"
            )));
        }
        frame_counts.push(rs[0]);
        data.extend_from_slice(r.grid.data());
    }
    let map = SegmentMap::new(0, vec![0; refs.len()], t, frame_counts)?;
    // the semantic counts here are placeholders; visual-only maps track frames
    let frames = TensorData::new(vec![map.frames(), h, w, c], data)?;
    Ok(VisualStream { frames, map })
}

/// Separate a visual stream into its video part and reference tail;
/// concatenating the parts reproduces the stream bitwise.
pub fn split_visual_stream<T: Scalar>(
    stream: &VisualStream<T>,
) -> Result<(TensorData<T>, TensorData<T>)> {
    let s = stream.frames.shape();
    if s[0] != stream.map.frames() {
        return Err(Error::Contract(format!(
            "segment map covers {} frames but stream has {}",
            stream.map.frames(),
            s[0]
        )));
    }
    let per = s[1] * s[2] * s[3];
    let t = stream.map.t;
    let n = stream.map.n();
    let video = TensorData::new(
        vec![t, s[1], s[2], s[3]],
        stream.frames.data()[..t * per].to_vec(),
    )?;
    let tail = TensorData::new(
        vec![n, s[1], s[2], s[3]],
        stream.frames.data()[t * per..].to_vec(),
    )?;
    Ok((video, tail))
}
