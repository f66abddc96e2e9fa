//! Event-level and segment-level scoring for sound event detection, plus
//! the post-processing that turns frame probabilities into events and the
//! reliability analysis for confidence estimates.
//!
//! Event matching follows the collar convention: an estimated event matches
//! a reference event of the same class when the onsets differ by at most
//! the onset collar and the offsets differ by at most max(offset collar,
//! ratio * reference duration). Matching is greedy and one-to-one in onset
//! order. Error rate is reported as deletions plus insertions relative to
//! the reference count, macro-averaged over classes that have at least one
//! reference event.

use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// One sound event, in seconds relative to the clip start. The span is
/// half-open: [onset_sec, offset_sec).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub class: usize,
    pub onset_sec: f64,
    pub offset_sec: f64,
}

impl Event {
    pub fn new(class: usize, onset_sec: f64, offset_sec: f64) -> Result<Self> {
        if !onset_sec.is_finite() || !offset_sec.is_finite() {
            return Err(Error::NonFinite("event boundaries"));
        }
        if onset_sec < 0.0 || offset_sec <= onset_sec {
            return Err(Error::InvalidInput("event needs 0 <= onset < offset"));
        }
        Ok(Self {
            class,
            onset_sec,
            offset_sec,
        })
    }

    pub fn duration(&self) -> f64 {
        self.offset_sec - self.onset_sec
    }
}

/// Matching tolerances for event-level scoring.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollarConfig {
    /// Maximum onset deviation, seconds.
    pub onset_collar_sec: f64,
    /// Minimum offset tolerance, seconds.
    pub offset_collar_sec: f64,
    /// Offset tolerance grows to this fraction of the reference duration.
    pub offset_collar_ratio: f64,
}

impl Default for CollarConfig {
    fn default() -> Self {
        Self {
            onset_collar_sec: 0.2,
            offset_collar_sec: 0.2,
            offset_collar_ratio: 0.2,
        }
    }
}

/// Match counts for one class, accumulated over clips.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub ntp: u64,
    pub nfp: u64,
    pub nfn: u64,
    pub nref: u64,
}

impl ClassCounts {
    pub fn deletion_rate(&self) -> f64 {
        self.nfn as f64 / self.nref as f64
    }

    pub fn insertion_rate(&self) -> f64 {
        self.nfp as f64 / self.nref as f64
    }

    /// Error rate, exactly deletions + insertions.
    pub fn error_rate(&self) -> f64 {
        self.deletion_rate() + self.insertion_rate()
    }

    pub fn f1(&self) -> f64 {
        let denom = 2 * self.ntp + self.nfp + self.nfn;
        if denom == 0 {
            return 0.0;
        }
        2.0 * self.ntp as f64 / denom as f64
    }
}

/// Per-class counts plus macro averages over classes with references.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreBlock {
    pub per_class: Vec<ClassCounts>,
}

impl ScoreBlock {
    fn macro_over(&self, f: impl Fn(&ClassCounts) -> f64) -> f64 {
        let scored: Vec<f64> = self
            .per_class
            .iter()
            .filter(|c| c.nref > 0)
            .map(f)
            .collect();
        if scored.is_empty() {
            return 0.0;
        }
        scored.iter().sum::<f64>() / scored.len() as f64
    }

    pub fn macro_error_rate(&self) -> f64 {
        self.macro_over(ClassCounts::error_rate)
    }

    pub fn macro_f1(&self) -> f64 {
        self.macro_over(ClassCounts::f1)
    }
}

/// Binary median filter with the window shrinking at the edges; the output
/// is 1 where strictly more than half the window is 1. The window must be
/// odd (1 is the identity).
pub fn median_filter(bits: &[bool], window: usize) -> Result<Vec<bool>> {
    if window == 0 || window % 2 == 0 {
        return Err(Error::InvalidInput("median window must be odd and >= 1"));
    }
    let r = window / 2;
    let n = bits.len();
    let mut out = vec![false; n];
    for i in 0..n {
        let lo = i.saturating_sub(r);
        let hi = (i + r + 1).min(n);
        let ones = bits[lo..hi].iter().filter(|&&b| b).count();
        out[i] = 2 * ones > hi - lo;
    }
    Ok(out)
}

/// Median window per class, proportional to the class's typical duration:
/// round(ratio * duration * frame_rate), forced odd by rounding down, at
/// least 1.
pub fn class_windows_from_durations(
    durations_sec: &[f64],
    frame_rate: f64,
    ratio: f64,
) -> Result<Vec<usize>> {
    if frame_rate <= 0.0 || ratio < 0.0 {
        return Err(Error::InvalidInput(
            "frame rate must be positive and ratio nonnegative",
        ));
    }
    durations_sec
        .iter()
        .map(|&d| {
            if !d.is_finite() || d <= 0.0 {
                return Err(Error::InvalidInput("durations must be positive"));
            }
            let mut w = libm::round(ratio * d * frame_rate) as usize;
            if w % 2 == 0 {
                w = w.saturating_sub(1);
            }
            Ok(w.max(1))
        })
        .collect()
}

/// Thresholds frame probabilities, median-filters each class with its own
/// window, and emits the remaining activity runs as events.
pub fn decode_events(
    frame_probs: &Matrix,
    threshold: f64,
    class_windows: &[usize],
    frame_rate: f64,
) -> Result<Vec<Event>> {
    if class_windows.len() != frame_probs.cols() {
        return Err(Error::ShapeMismatch {
            context: "decode_events windows",
            expected: (1, frame_probs.cols()),
            got: (1, class_windows.len()),
        });
    }
    if frame_rate <= 0.0 || !threshold.is_finite() {
        return Err(Error::InvalidInput("decode needs frame_rate > 0"));
    }
    let t_frames = frame_probs.rows();
    let mut events = Vec::new();
    let mut bits = vec![false; t_frames];
    for k in 0..frame_probs.cols() {
        for (t, b) in bits.iter_mut().enumerate() {
            *b = frame_probs.get(t, k) >= threshold;
        }
        let filtered = median_filter(&bits, class_windows[k])?;
        let mut t = 0;
        while t < t_frames {
            if filtered[t] {
                let start = t;
                while t < t_frames && filtered[t] {
                    t += 1;
                }
                events.push(Event {
                    class: k,
                    onset_sec: start as f64 / frame_rate,
                    offset_sec: t as f64 / frame_rate,
                });
            } else {
                t += 1;
            }
        }
    }
    Ok(events)
}

/// Frame-level 0/1 raster of an event list. Event boundaries are rounded to
/// the frame grid; decoding the raster back yields the same events when
/// they were frame-aligned and non-overlapping within a class.
pub fn rasterize_events(
    events: &[Event],
    num_frames: usize,
    num_classes: usize,
    frame_rate: f64,
) -> Result<Matrix> {
    if frame_rate <= 0.0 {
        return Err(Error::InvalidInput("rasterize needs frame_rate > 0"));
    }
    let mut out = Matrix::zeros(num_frames, num_classes);
    for e in events {
        if e.class >= num_classes {
            return Err(Error::InvalidInput("event class out of range"));
        }
        let start = (libm::round(e.onset_sec * frame_rate) as i64).max(0) as usize;
        let end = (libm::round(e.offset_sec * frame_rate) as i64).max(0) as usize;
        for t in start..end.min(num_frames) {
            out.set(t, e.class, 1.0);
        }
    }
    Ok(out)
}

/// Same-class events sorted by onset with touching or overlapping spans
/// merged. System output is always merged like this before matching;
/// reference lists keep their overlaps.
fn merged_class_events(events: &[Event], class: usize) -> Vec<(f64, f64)> {
    let mut spans: Vec<(f64, f64)> = events
        .iter()
        .filter(|e| e.class == class)
        .map(|e| (e.onset_sec, e.offset_sec))
        .collect();
    spans.sort_by(|a, b| a.partial_cmp(b).expect("finite event boundaries"));
    let mut merged: Vec<(f64, f64)> = Vec::with_capacity(spans.len());
    for (on, off) in spans {
        match merged.last_mut() {
            Some(last) if on <= last.1 => last.1 = last.1.max(off),
            _ => merged.push((on, off)),
        }
    }
    merged
}

/// Event-level scorer; call [`EventScorer::add_clip`] per clip and read the
/// accumulated counts at the end. Counts add across clips, so scoring a
/// corpus clip by clip equals scoring it in any other order.
#[derive(Clone, Debug)]
pub struct EventScorer {
    collar: CollarConfig,
    counts: Vec<ClassCounts>,
}

impl EventScorer {
    pub fn new(num_classes: usize, collar: CollarConfig) -> Self {
        Self {
            collar,
            counts: vec![ClassCounts::default(); num_classes],
        }
    }

    pub fn add_clip(&mut self, reference: &[Event], estimates: &[Event]) -> Result<()> {
        for e in reference.iter().chain(estimates) {
            if e.class >= self.counts.len() {
                return Err(Error::InvalidInput("event class out of range"));
            }
            if !e.onset_sec.is_finite() || !e.offset_sec.is_finite() {
                return Err(Error::NonFinite("event boundaries"));
            }
        }
        for class in 0..self.counts.len() {
            let mut refs: Vec<(f64, f64)> = reference
                .iter()
                .filter(|e| e.class == class)
                .map(|e| (e.onset_sec, e.offset_sec))
                .collect();
            refs.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
            let ests = merged_class_events(estimates, class);
            let mut used = vec![false; ests.len()];
            let mut ntp = 0u64;
            for &(ron, roff) in &refs {
                let off_tol = self
                    .collar
                    .offset_collar_sec
                    .max(self.collar.offset_collar_ratio * (roff - ron));
                for (ei, &(eon, eoff)) in ests.iter().enumerate() {
                    if used[ei] {
                        continue;
                    }
                    if (eon - ron).abs() <= self.collar.onset_collar_sec
                        && (eoff - roff).abs() <= off_tol
                    {
                        used[ei] = true;
                        ntp += 1;
                        break;
                    }
                }
            }
            let c = &mut self.counts[class];
            c.ntp += ntp;
            c.nref += refs.len() as u64;
            c.nfn += refs.len() as u64 - ntp;
            c.nfp += ests.len() as u64 - ntp;
        }
        Ok(())
    }

    pub fn scores(&self) -> ScoreBlock {
        ScoreBlock {
            per_class: self.counts.clone(),
        }
    }
}

/// Fixed-length segment scorer: a class is active in a segment when any of
/// its events overlaps the segment interval.
#[derive(Clone, Debug)]
pub struct SegmentScorer {
    segment_len_sec: f64,
    counts: Vec<ClassCounts>,
}

impl SegmentScorer {
    pub fn new(num_classes: usize, segment_len_sec: f64) -> Result<Self> {
        if segment_len_sec <= 0.0 {
            return Err(Error::InvalidInput("segment length must be positive"));
        }
        Ok(Self {
            segment_len_sec,
            counts: vec![ClassCounts::default(); num_classes],
        })
    }

    pub fn add_clip(
        &mut self,
        reference: &[Event],
        estimates: &[Event],
        clip_len_sec: f64,
    ) -> Result<()> {
        if clip_len_sec <= 0.0 {
            return Err(Error::InvalidInput("clip length must be positive"));
        }
        let segments = libm::ceil(clip_len_sec / self.segment_len_sec) as usize;
        let num_classes = self.counts.len();
        for e in reference.iter().chain(estimates) {
            if e.class >= num_classes {
                return Err(Error::InvalidInput("event class out of range"));
            }
        }
        let mut ref_active = vec![false; segments * num_classes];
        let mut est_active = vec![false; segments * num_classes];
        for (events, active) in [(reference, &mut ref_active), (estimates, &mut est_active)] {
            for e in events {
                let first = (e.onset_sec / self.segment_len_sec) as usize;
                let last = libm::ceil(e.offset_sec / self.segment_len_sec) as usize;
                for s in first..last.min(segments) {
                    let seg_start = s as f64 * self.segment_len_sec;
                    let seg_end = seg_start + self.segment_len_sec;
                    if e.onset_sec < seg_end && e.offset_sec > seg_start {
                        active[s * num_classes + e.class] = true;
                    }
                }
            }
        }
        for s in 0..segments {
            for k in 0..num_classes {
                let r = ref_active[s * num_classes + k];
                let e = est_active[s * num_classes + k];
                let c = &mut self.counts[k];
                match (r, e) {
                    (true, true) => {
                        c.ntp += 1;
                        c.nref += 1;
                    }
                    (true, false) => {
                        c.nfn += 1;
                        c.nref += 1;
                    }
                    (false, true) => c.nfp += 1,
                    (false, false) => {}
                }
            }
        }
        Ok(())
    }

    pub fn scores(&self) -> ScoreBlock {
        ScoreBlock {
            per_class: self.counts.clone(),
        }
    }
}

/// One reliability bin: how often predictions in this score range were
/// correct, against the mean score claimed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BinStat {
    pub count: u64,
    pub mean_score: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReliabilityReport {
    /// All frame/class entries binned by the confidence head's output;
    /// accuracy is agreement of the thresholded class output with truth.
    pub confidence_bins: Vec<BinStat>,
    /// Positive class predictions (probability >= 0.5) binned by that
    /// probability; accuracy is the fraction that were truly active.
    pub posterior_bins: Vec<BinStat>,
}

/// Accumulates reliability statistics over clips with 10 equal-width bins.
#[derive(Clone, Debug)]
pub struct ReliabilityAccumulator {
    conf: Vec<(u64, f64, u64)>,
    post: Vec<(u64, f64, u64)>,
}

pub const RELIABILITY_BINS: usize = 10;

impl Default for ReliabilityAccumulator {
    fn default() -> Self {
        Self::new()
    }
}

impl ReliabilityAccumulator {
    pub fn new() -> Self {
        Self {
            conf: vec![(0, 0.0, 0); RELIABILITY_BINS],
            post: vec![(0, 0.0, 0); RELIABILITY_BINS],
        }
    }

    fn bin(score: f64) -> usize {
        ((score * RELIABILITY_BINS as f64) as usize).min(RELIABILITY_BINS - 1)
    }

    pub fn add_clip(
        &mut self,
        frame_probs: &Matrix,
        confidence: &Matrix,
        truth: &Matrix,
    ) -> Result<()> {
        if frame_probs.shape() != confidence.shape() || frame_probs.shape() != truth.shape() {
            return Err(Error::ShapeMismatch {
                context: "reliability inputs",
                expected: frame_probs.shape(),
                got: truth.shape(),
            });
        }
        for ((&p, &c), &t) in frame_probs
            .data()
            .iter()
            .zip(confidence.data())
            .zip(truth.data())
        {
            if !p.is_finite() || !c.is_finite() {
                return Err(Error::NonFinite("reliability inputs"));
            }
            let predicted = p >= 0.5;
            let actual = t >= 0.5;
            let correct = predicted == actual;
            let cb = &mut self.conf[Self::bin(c)];
            cb.0 += 1;
            cb.1 += c;
            cb.2 += u64::from(correct);
            if predicted {
                let pb = &mut self.post[Self::bin(p)];
                pb.0 += 1;
                pb.1 += p;
                pb.2 += u64::from(actual);
            }
        }
        Ok(())
    }

    pub fn report(&self) -> ReliabilityReport {
        let to_stats = |bins: &[(u64, f64, u64)]| {
            bins.iter()
                .map(|&(count, score_sum, correct)| BinStat {
                    count,
                    mean_score: if count > 0 {
                        score_sum / count as f64
                    } else {
                        0.0
                    },
                    accuracy: if count > 0 {
                        correct as f64 / count as f64
                    } else {
                        0.0
                    },
                })
                .collect()
        };
        ReliabilityReport {
            confidence_bins: to_stats(&self.conf),
            posterior_bins: to_stats(&self.post),
        }
    }
}
