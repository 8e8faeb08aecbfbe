//! Vertebral level labelling: context volumes, probability-height maps and
//! the penalised beam search over level sequences.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use log::warn;
use ndarray::{s, Array2, Array3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::BackendError;
use crate::decode::Vertebra3D;
use crate::dicom::Volume;
use crate::interp::{sample_bicubic, Border};

/// Number of appearance classes, S1 up to C3.
pub const NUM_CLASSES: usize = 23;
/// `(slices, rows, cols)` of an appearance-network input.
pub const CONTEXT_DIMS: (usize, usize, usize) = (16, 224, 224);
pub const DEFAULT_SOFTMAX_T: f64 = 10.0;
pub const DEFAULT_BEAM_WIDTH: usize = 100;
pub const DEFAULT_SKIP_PENALTY: f64 = 0.1;
pub const DEFAULT_EXPAND_AXIAL_CORONAL: f64 = 1.0;
pub const DEFAULT_EXPAND_SAGITTAL: f64 = 0.5;
const RECALIBRATE_EPS: f64 = 1e-12;
const NORMALIZATION_TOL: f64 = 1e-6;

/// Vertebral levels, bottom to top. `S2` and `C2` only appear after anchor
/// relabelling; the remaining 23 are the classifier classes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Level {
    S2,
    S1,
    L5,
    L4,
    L3,
    L2,
    L1,
    T12,
    T11,
    T10,
    T9,
    T8,
    T7,
    T6,
    T5,
    T4,
    T3,
    T2,
    T1,
    C7,
    C6,
    C5,
    C4,
    C3,
    C2,
}

impl Level {
    pub const ALL: [Level; 25] = [
        Level::S2,
        Level::S1,
        Level::L5,
        Level::L4,
        Level::L3,
        Level::L2,
        Level::L1,
        Level::T12,
        Level::T11,
        Level::T10,
        Level::T9,
        Level::T8,
        Level::T7,
        Level::T6,
        Level::T5,
        Level::T4,
        Level::T3,
        Level::T2,
        Level::T1,
        Level::C7,
        Level::C6,
        Level::C5,
        Level::C4,
        Level::C3,
        Level::C2,
    ];

    /// Level for classifier class `i` (0 = S1, 22 = C3).
    pub fn from_class(i: usize) -> Option<Level> {
        (i < NUM_CLASSES).then(|| Level::ALL[i + 1])
    }

    /// Classifier class, `None` for S2 and C2.
    pub fn class(self) -> Option<usize> {
        match self {
            Level::S2 | Level::C2 => None,
            l => Some(l as usize - 1),
        }
    }

    /// The next level up the spine.
    pub fn above(self) -> Option<Level> {
        Level::ALL.get(self as usize + 1).copied()
    }

    pub fn name(self) -> &'static str {
        const NAMES: [&str; 25] = [
            "S2", "S1", "L5", "L4", "L3", "L2", "L1", "T12", "T11", "T10", "T9", "T8", "T7", "T6",
            "T5", "T4", "T3", "T2", "T1", "C7", "C6", "C5", "C4", "C3", "C2",
        ];
        NAMES[self as usize]
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Level {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Level::ALL
            .iter()
            .copied()
            .find(|l| l.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown level {s:?}"))
    }
}

impl Serialize for Level {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for Level {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Error)]
pub enum LabelError {
    #[error("vertebra has no polygons inside the volume")]
    EmptyDetection,
    #[error("detection rows {h1}..={h2} outside a map of height {height}")]
    OutOfRange { h1: usize, h2: usize, height: usize },
    #[error("no detections to label")]
    NoDetections,
    #[error("detection rows must run bottom to top (non-increasing), got {0:?}")]
    UnorderedDetections(Vec<usize>),
    #[error("beam width must be at least 1")]
    InvalidBeamWidth,
    #[error("refinement backend failed: {0}")]
    BackendFailure(#[from] BackendError),
}

/// Crop the expanded bounding box of `vert` from `volume` and resample it to
/// [`CONTEXT_DIMS`] (bicubic in-plane, linear across slices, zero outside).
///
/// Expansion fractions apply to each side, so an extent `e` grows to
/// `e * (1 + 2 f)`.
pub fn extract_vb_context_volume(
    volume: &Volume,
    vert: &Vertebra3D,
    expand_axial_coronal: f64,
    expand_sagittal: f64,
) -> Result<Array3<f64>, LabelError> {
    let (ns, h, w) = volume.dims();
    let b = vert.bounds;
    if vert.polygons.is_empty() || b.slice_lo >= ns || b.row_min >= h as f64 || b.col_min >= w as f64 {
        return Err(LabelError::EmptyDetection);
    }
    let er = b.row_max - b.row_min;
    let ec = b.col_max - b.col_min;
    let es = (b.slice_hi - b.slice_lo + 1) as f64;
    let row_a = b.row_min - expand_axial_coronal * er;
    let row_len = er * (1.0 + 2.0 * expand_axial_coronal);
    let col_a = b.col_min - expand_axial_coronal * ec;
    let col_len = ec * (1.0 + 2.0 * expand_axial_coronal);
    let sl_a = b.slice_lo as f64 - 0.5 - expand_sagittal * es;
    let sl_len = es * (1.0 + 2.0 * expand_sagittal);

    let (os, oh, ow) = CONTEXT_DIMS;
    let rows: Vec<f64> = (0..oh).map(|i| row_a + (i as f64 + 0.5) * row_len / oh as f64).collect();
    let cols: Vec<f64> = (0..ow).map(|j| col_a + (j as f64 + 0.5) * col_len / ow as f64).collect();

    let in_plane = |k: usize| -> Array2<f64> {
        let plane = volume.data.slice(s![k, .., ..]);
        Array2::from_shape_fn((oh, ow), |(i, j)| sample_bicubic(plane, rows[i], cols[j], Border::Zero))
    };
    let mut cache: HashMap<usize, Array2<f64>> = HashMap::new();
    let mut out = Array3::<f64>::zeros(CONTEXT_DIMS);
    for k in 0..os {
        let pos = sl_a + (k as f64 + 0.5) * sl_len / os as f64;
        if pos < -0.5 || pos > ns as f64 - 0.5 {
            continue;
        }
        let lo = pos.floor().clamp(0.0, (ns - 1) as f64) as usize;
        let hi = (lo + 1).min(ns - 1);
        let t = (pos - lo as f64).clamp(0.0, 1.0);
        let mut plane = cache.entry(lo).or_insert_with(|| in_plane(lo)).clone();
        if t > 0.0 && hi != lo {
            let upper = cache.entry(hi).or_insert_with(|| in_plane(hi));
            plane.zip_mut_with(upper, |a, &b| *a = (1.0 - t) * *a + t * b);
        }
        out.slice_mut(s![k, .., ..]).assign(&plane);
    }
    Ok(out)
}

/// Temperature-scaled softmax of log probabilities.
pub fn recalibrate(p: &[f64; NUM_CLASSES], temperature: f64) -> [f64; NUM_CLASSES] {
    let logits = p.map(|v| (v + RECALIBRATE_EPS).ln() / temperature);
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps = logits.map(|l| (l - max).exp());
    let z: f64 = exps.iter().sum();
    exps.map(|e| e / z)
}

/// `H × 23` level probabilities per scan row.
#[derive(Clone, Debug, PartialEq)]
pub struct HeightProbabilityMap {
    pub values: Array2<f64>,
}

impl HeightProbabilityMap {
    pub fn height(&self) -> usize {
        self.values.dim().0
    }

    /// Rows holding a probability vector (non-zero sum).
    pub fn covered_rows(&self) -> Vec<usize> {
        (0..self.height())
            .filter(|&r| self.values.row(r).iter().any(|&v| v != 0.0))
            .collect()
    }
}

/// Paint each detection's vector over its row span. Rows claimed by several
/// detections hold the renormalised mean.
pub fn build_height_map(
    detections: &[(usize, usize, [f64; NUM_CLASSES])],
    height: usize,
) -> Result<HeightProbabilityMap, LabelError> {
    let mut sum = Array2::<f64>::zeros((height, NUM_CLASSES));
    let mut count = vec![0usize; height];
    for &(h1, h2, ref p) in detections {
        if h1 > h2 || h2 >= height {
            return Err(LabelError::OutOfRange { h1, h2, height });
        }
        for r in h1..=h2 {
            count[r] += 1;
            for (dst, &v) in sum.row_mut(r).iter_mut().zip(p) {
                *dst += v;
            }
        }
    }
    for (r, &n) in count.iter().enumerate() {
        if n > 1 {
            let mut row = sum.row_mut(r);
            let total: f64 = row.sum();
            if total > 0.0 {
                row.mapv_inplace(|v| v / total);
            }
        }
    }
    Ok(HeightProbabilityMap { values: sum })
}

/// A context model that refines a probability-height map.
pub trait Refine {
    fn refine_map(&self, map: &HeightProbabilityMap) -> Result<Array2<f64>, BackendError> {
        Ok(map.values.clone())
    }
}

/// Pass-through refinement.
#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityRefiner;

impl Refine for IdentityRefiner {}

/// Run `backend` and check that it kept the map's shape and the row
/// normalisation of every covered row.
pub fn refine(
    map: &HeightProbabilityMap,
    backend: &(impl Refine + ?Sized),
) -> Result<HeightProbabilityMap, LabelError> {
    let refined = backend.refine_map(map)?;
    if refined.dim() != map.values.dim() {
        return Err(BackendError::ShapeMismatch {
            expected: vec![map.height(), NUM_CLASSES],
            found: refined.shape().to_vec(),
        }
        .into());
    }
    for r in map.covered_rows() {
        let row = refined.row(r);
        let total: f64 = row.sum();
        if row.iter().any(|v| !v.is_finite() || *v < 0.0) || (total - 1.0).abs() > NORMALIZATION_TOL {
            return Err(BackendError::NormalizationViolated { row: r, sum: total }.into());
        }
    }
    Ok(HeightProbabilityMap { values: refined })
}

/// Decoded labels for detections ordered bottom to top.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelSequence {
    pub labels: Vec<Level>,
    /// Sum of log probabilities and skip penalties.
    pub log_score: f64,
    /// Total number of levels skipped between consecutive detections.
    pub skipped_levels: usize,
    pub doubled_s1: bool,
    pub doubled_c3: bool,
    /// Every valid sequence had zero probability; labels are per-detection
    /// argmax.
    pub fallback_argmax: bool,
}

#[derive(Clone, Debug)]
struct Hypothesis {
    labels: Vec<u8>,
    score: f64,
    doubled: bool,
    skips: usize,
}

const S1_CLASS: u8 = 0;
const C3_CLASS: u8 = (NUM_CLASSES - 1) as u8;

fn better(a: &Hypothesis, b: &Hypothesis) -> std::cmp::Ordering {
    b.score.total_cmp(&a.score).then_with(|| a.labels.cmp(&b.labels))
}

/// Keep the best hypothesis per search state, then the top `width`.
fn prune(hyps: Vec<Hypothesis>, width: usize) -> Vec<Hypothesis> {
    let mut best: HashMap<(u8, bool), Hypothesis> = HashMap::new();
    for h in hyps {
        let key = (*h.labels.last().unwrap(), h.doubled);
        match best.get(&key) {
            Some(cur) if better(cur, &h).is_le() => {}
            _ => {
                best.insert(key, h);
            }
        }
    }
    let mut v: Vec<Hypothesis> = best.into_values().collect();
    v.sort_by(better);
    v.truncate(width);
    v
}

/// Most probable valid level sequence for detections at `rows` (scan rows,
/// bottom detection first).
///
/// Labels must increase up the spine; skipping `k` levels costs
/// `k * ln(skip_penalty)`. S1 may appear twice at the bottom and C3 twice at
/// the top without penalty; these doubles are relabelled S2,S1 and C3,C2.
/// Hypotheses sharing the same last label and doubling state are merged
/// before the beam is cut to `beam_width`.
pub fn beam_decode(
    map: &HeightProbabilityMap,
    rows: &[usize],
    beam_width: usize,
    skip_penalty: f64,
) -> Result<LevelSequence, LabelError> {
    if rows.is_empty() {
        return Err(LabelError::NoDetections);
    }
    if beam_width == 0 {
        return Err(LabelError::InvalidBeamWidth);
    }
    if rows.windows(2).any(|w| w[1] > w[0]) {
        return Err(LabelError::UnorderedDetections(rows.to_vec()));
    }
    if let Some(&r) = rows.iter().find(|&&r| r >= map.height()) {
        return Err(LabelError::OutOfRange { h1: r, h2: r, height: map.height() });
    }
    let probs: Vec<[f64; NUM_CLASSES]> = rows
        .iter()
        .map(|&r| {
            let mut p = [0.0; NUM_CLASSES];
            p.iter_mut().zip(map.values.row(r)).for_each(|(d, &v)| *d = v);
            p
        })
        .collect();
    let log_penalty = skip_penalty.ln();

    let mut beam: Vec<Hypothesis> = (0..NUM_CLASSES)
        .filter(|&c| probs[0][c] > 0.0)
        .map(|c| Hypothesis {
            labels: vec![c as u8],
            score: probs[0][c].ln(),
            doubled: false,
            skips: 0,
        })
        .collect();
    beam = prune(beam, beam_width);

    for p in probs.iter().skip(1) {
        if beam.is_empty() {
            break;
        }
        let mut next = Vec::with_capacity(beam.len() * NUM_CLASSES);
        for h in &beam {
            let last = *h.labels.last().unwrap();
            for c in last..NUM_CLASSES as u8 {
                let pc = p[c as usize];
                if pc <= 0.0 {
                    continue;
                }
                let (score, doubled, skips) = if c == last {
                    if h.doubled || !(c == S1_CLASS || c == C3_CLASS) {
                        continue;
                    }
                    (h.score + pc.ln(), true, h.skips)
                } else {
                    let k = (c - last - 1) as usize;
                    if k > 0 && !log_penalty.is_finite() {
                        continue;
                    }
                    let pen = if k > 0 { k as f64 * log_penalty } else { 0.0 };
                    (h.score + pc.ln() + pen, false, h.skips + k)
                };
                let mut labels = h.labels.clone();
                labels.push(c);
                next.push(Hypothesis { labels, score, doubled, skips });
            }
        }
        beam = prune(next, beam_width);
    }

    let Some(best) = beam.into_iter().min_by(better).filter(|h| h.labels.len() == rows.len()) else {
        warn!("every valid level sequence has zero probability; using per-detection argmax");
        let mut score = 0.0;
        let labels = probs
            .iter()
            .map(|p| {
                let (c, v) = p
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
                score += v.ln();
                Level::from_class(c).unwrap()
            })
            .collect();
        return Ok(LevelSequence {
            labels,
            log_score: score,
            skipped_levels: 0,
            doubled_s1: false,
            doubled_c3: false,
            fallback_argmax: true,
        });
    };

    let mut labels: Vec<Level> = best
        .labels
        .iter()
        .map(|&c| Level::from_class(c as usize).unwrap())
        .collect();
    let n = labels.len();
    let doubled_s1 = n >= 2 && labels[0] == Level::S1 && labels[1] == Level::S1;
    let doubled_c3 = n >= 2 && labels[n - 1] == Level::C3 && labels[n - 2] == Level::C3;
    if doubled_s1 {
        labels[0] = Level::S2;
    }
    if doubled_c3 {
        labels[n - 1] = Level::C2;
    }
    Ok(LevelSequence {
        labels,
        log_score: best.score,
        skipped_levels: best.skips,
        doubled_s1,
        doubled_c3,
        fallback_argmax: false,
    })
}
