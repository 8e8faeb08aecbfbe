//! Decoding of landmark tensors into vertebral-body quadrilaterals and 3D
//! vertebra instances.

use std::collections::{BTreeMap, HashMap};

use log::{debug, warn};
use ndarray::{s, ArrayView2, ArrayView3, ArrayView4};
use serde::{Deserialize, Serialize};

use crate::geometry::{polygon_iou, Point};
use crate::target::{LandmarkKind, CORNERS, DET_CHANNELS};

pub const DEFAULT_THRESHOLD: f64 = 0.5;
pub const DEFAULT_IOU_THRESHOLD: f64 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeParams {
    pub threshold: f64,
    pub iou_threshold: f64,
}

impl Default for DecodeParams {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_THRESHOLD,
            iou_threshold: DEFAULT_IOU_THRESHOLD,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Landmark {
    pub kind: LandmarkKind,
    pub pos: Point,
    pub response: f64,
}

/// A vertebral body in one slice. Corners are ordered TL, TR, BR, BL.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VBPolygon {
    pub slice_index: usize,
    pub corners: [Point; 4],
    pub centroid: Point,
    /// Mean response of the five landmarks.
    pub score: f64,
}

impl VBPolygon {
    /// Mean of the top (TL-TR) and bottom (BL-BR) edge lengths.
    pub fn width(&self) -> f64 {
        let [tl, tr, br, bl] = self.corners;
        0.5 * (tl.dist(tr) + bl.dist(br))
    }
}

/// Axis-aligned 3D box: inclusive slice range plus in-plane extent.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bounds3 {
    pub slice_lo: usize,
    pub slice_hi: usize,
    pub row_min: f64,
    pub row_max: f64,
    pub col_min: f64,
    pub col_max: f64,
}

/// A vertebra linked across a contiguous range of slices.
#[derive(Clone, Debug, PartialEq)]
pub struct Vertebra3D {
    pub polygons: BTreeMap<usize, VBPolygon>,
    /// `(slice, in-plane point)`, the mean of per-slice centroids.
    pub centroid_3d: (f64, Point),
    pub bounds: Bounds3,
}

impl Vertebra3D {
    /// Panics on an empty map; instances always hold at least one polygon.
    pub fn from_polygons(polygons: BTreeMap<usize, VBPolygon>) -> Self {
        assert!(!polygons.is_empty(), "vertebra without polygons");
        let n = polygons.len() as f64;
        let (mut s, mut r, mut c) = (0.0, 0.0, 0.0);
        let mut bounds = Bounds3 {
            slice_lo: *polygons.keys().next().unwrap(),
            slice_hi: *polygons.keys().next_back().unwrap(),
            row_min: f64::INFINITY,
            row_max: f64::NEG_INFINITY,
            col_min: f64::INFINITY,
            col_max: f64::NEG_INFINITY,
        };
        for (&k, p) in &polygons {
            s += k as f64;
            r += p.centroid.row;
            c += p.centroid.col;
            for q in &p.corners {
                bounds.row_min = bounds.row_min.min(q.row);
                bounds.row_max = bounds.row_max.max(q.row);
                bounds.col_min = bounds.col_min.min(q.col);
                bounds.col_max = bounds.col_max.max(q.col);
            }
        }
        Self {
            polygons,
            centroid_3d: (s / n, Point::new(r / n, c / n)),
            bounds,
        }
    }

    pub fn slice_range(&self) -> (usize, usize) {
        (self.bounds.slice_lo, self.bounds.slice_hi)
    }

    /// The polygon on the slice nearest the mean slice index (ties to the
    /// lower slice).
    pub fn central_polygon(&self) -> &VBPolygon {
        let mean = self.centroid_3d.0;
        self.polygons
            .iter()
            .min_by(|a, b| {
                (*a.0 as f64 - mean)
                    .abs()
                    .total_cmp(&(*b.0 as f64 - mean).abs())
                    .then(a.0.cmp(b.0))
            })
            .map(|(_, p)| p)
            .unwrap()
    }

    pub fn score(&self) -> f64 {
        self.polygons.values().map(|p| p.score).sum::<f64>() / self.polygons.len() as f64
    }
}

/// Per channel: threshold, find 8-connected components and emit the
/// maximal-response pixel of each (ties to the smallest `(row, col)`).
pub fn decode_landmarks(det: ArrayView3<f64>, threshold: f64) -> Vec<Landmark> {
    let channels = det.dim().0.min(DET_CHANNELS);
    let mut out = Vec::new();
    for (k, kind) in LandmarkKind::ALL.iter().enumerate().take(channels) {
        for (pos, response) in component_peaks(det.slice(s![k, .., ..]), threshold) {
            out.push(Landmark {
                kind: *kind,
                pos: Point::new(pos.0 as f64, pos.1 as f64),
                response,
            });
        }
    }
    out
}

fn component_peaks(plane: ArrayView2<f64>, threshold: f64) -> Vec<((usize, usize), f64)> {
    let (h, w) = plane.dim();
    let mut seen = vec![false; h * w];
    let mut peaks = Vec::new();
    let mut stack = Vec::new();
    for r0 in 0..h {
        for c0 in 0..w {
            if seen[r0 * w + c0] || !(plane[[r0, c0]] >= threshold) {
                continue;
            }
            seen[r0 * w + c0] = true;
            stack.push((r0, c0));
            let mut best = ((r0, c0), plane[[r0, c0]]);
            while let Some((r, c)) = stack.pop() {
                let v = plane[[r, c]];
                if v > best.1 || (v == best.1 && (r, c) < best.0) {
                    best = ((r, c), v);
                }
                for dr in -1isize..=1 {
                    for dc in -1isize..=1 {
                        let (nr, nc) = (r as isize + dr, c as isize + dc);
                        if nr < 0 || nc < 0 || nr >= h as isize || nc >= w as isize {
                            continue;
                        }
                        let (nr, nc) = (nr as usize, nc as usize);
                        let i = nr * w + nc;
                        if !seen[i] && plane[[nr, nc]] >= threshold {
                            seen[i] = true;
                            stack.push((nr, nc));
                        }
                    }
                }
            }
            peaks.push(best);
        }
    }
    peaks
}

/// Assign to each detected centroid the corner of each type whose arrow lands
/// nearest to it. Centroids lacking a corner type, or whose best arrow misses
/// by more than half its length, are dropped.
pub fn group_quadrilaterals(
    landmarks: &[Landmark],
    grp: ArrayView4<f64>,
    slice_index: usize,
) -> Vec<VBPolygon> {
    let (_, _, h, w) = grp.dim();
    // Arrow tip and length for each corner landmark.
    let mut by_kind: Vec<Vec<(usize, Point, f64)>> = vec![Vec::new(); CORNERS];
    for (i, lm) in landmarks.iter().enumerate() {
        if lm.kind == LandmarkKind::Centroid {
            continue;
        }
        let Some((r, c)) = lm.pos.to_pixel(h, w) else {
            continue;
        };
        let l = lm.kind as usize;
        let dx = grp[[l, 0, r, c]];
        let dy = grp[[l, 1, r, c]];
        by_kind[l].push((i, lm.pos.add(dy, dx), dx.hypot(dy)));
    }

    let mut polygons = Vec::new();
    let mut usage: HashMap<usize, usize> = HashMap::new();
    'centroids: for cen in landmarks.iter().filter(|l| l.kind == LandmarkKind::Centroid) {
        let mut chosen = [0usize; CORNERS];
        for l in 0..CORNERS {
            let best = by_kind[l]
                .iter()
                .map(|&(i, tip, len)| (i, tip.dist(cen.pos), len))
                .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
            match best {
                Some((i, d, len)) if d <= 0.5 * len => chosen[l] = i,
                _ => {
                    debug!("discarding spurious centroid at {:?}", cen.pos);
                    continue 'centroids;
                }
            }
        }
        for &i in &chosen {
            *usage.entry(i).or_default() += 1;
        }
        let corners = chosen.map(|i| landmarks[i].pos);
        let score = (chosen.iter().map(|&i| landmarks[i].response).sum::<f64>() + cen.response) / 5.0;
        polygons.push(VBPolygon {
            slice_index,
            corners,
            centroid: cen.pos,
            score,
        });
    }
    let shared = usage.values().filter(|&&n| n > 1).count();
    if shared > 0 {
        warn!("slice {slice_index}: {shared} corner(s) assigned to more than one centroid");
    }
    polygons
}

fn iou_or_zero(a: &VBPolygon, b: &VBPolygon) -> f64 {
    polygon_iou(&a.corners, &b.corners).unwrap_or_else(|e| {
        debug!("iou between slices {} and {}: {e}", a.slice_index, b.slice_index);
        0.0
    })
}

/// Link per-slice polygons into 3D instances by greedy descending-IOU
/// matching between neighbouring slices.
pub fn link_slices(per_slice: &[(usize, Vec<VBPolygon>)], iou_threshold: f64) -> Vec<Vertebra3D> {
    let mut instances: Vec<BTreeMap<usize, VBPolygon>> = Vec::new();
    // Instance indices extended in the previous slice, with that slice index.
    let mut open: Vec<usize> = Vec::new();
    let mut prev_slice: Option<usize> = None;

    for (slice, polys) in per_slice {
        let slice = *slice;
        let candidates: Vec<usize> = match prev_slice {
            Some(p) if p + 1 == slice => open.clone(),
            _ => Vec::new(),
        };
        let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
        for &inst in &candidates {
            let last = instances[inst].values().next_back().unwrap();
            for (j, poly) in polys.iter().enumerate() {
                let iou = iou_or_zero(last, poly);
                if iou > iou_threshold {
                    pairs.push((iou, inst, j));
                }
            }
        }
        pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

        let mut taken_inst = vec![false; instances.len()];
        let mut assigned: Vec<Option<usize>> = vec![None; polys.len()];
        for (_, inst, j) in pairs {
            if !taken_inst[inst] && assigned[j].is_none() {
                taken_inst[inst] = true;
                assigned[j] = Some(inst);
            }
        }
        let mut next_open = Vec::with_capacity(polys.len());
        for (j, poly) in polys.iter().enumerate() {
            let inst = match assigned[j] {
                Some(inst) => inst,
                None => {
                    instances.push(BTreeMap::new());
                    instances.len() - 1
                }
            };
            instances[inst].insert(slice, poly.clone());
            next_open.push(inst);
        }
        open = next_open;
        prev_slice = Some(slice);
    }
    instances.into_iter().map(Vertebra3D::from_polygons).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array3, Array4};

    fn poly(slice: usize, r0: f64, c0: f64, side: f64) -> VBPolygon {
        VBPolygon {
            slice_index: slice,
            corners: [
                Point::new(r0, c0),
                Point::new(r0, c0 + side),
                Point::new(r0 + side, c0 + side),
                Point::new(r0 + side, c0),
            ],
            centroid: Point::new(r0 + side / 2.0, c0 + side / 2.0),
            score: 1.0,
        }
    }

    #[test]
    fn zero_channel_has_no_landmarks() {
        let det = Array3::<f64>::zeros((5, 10, 10));
        assert!(decode_landmarks(det.view(), 0.5).is_empty());
    }

    #[test]
    fn plateau_tie_breaks_to_smallest_position() {
        let mut det = Array3::<f64>::zeros((5, 10, 10));
        det[[0, 5, 5]] = 0.9;
        det[[0, 5, 6]] = 0.9;
        det[[0, 6, 5]] = 0.7;
        let lms = decode_landmarks(det.view(), 0.5);
        assert_eq!(lms.len(), 1);
        assert_eq!(lms[0].pos, Point::new(5.0, 5.0));
        assert_eq!(lms[0].kind, LandmarkKind::TL);
    }

    #[test]
    fn diagonal_pixels_are_one_component() {
        let mut det = Array3::<f64>::zeros((5, 4, 4));
        det[[4, 1, 1]] = 0.6;
        det[[4, 2, 2]] = 0.8;
        let lms = decode_landmarks(det.view(), 0.5);
        assert_eq!(lms.len(), 1);
        assert_eq!(lms[0].pos, Point::new(2.0, 2.0));
    }

    fn landmark(kind: LandmarkKind, r: f64, c: f64) -> Landmark {
        Landmark { kind, pos: Point::new(r, c), response: 1.0 }
    }

    fn full_set(grp: &mut Array4<f64>, cen: (f64, f64), corners: [(f64, f64); 4]) -> Vec<Landmark> {
        let mut lms = vec![landmark(LandmarkKind::Centroid, cen.0, cen.1)];
        for (l, &(r, c)) in corners.iter().enumerate() {
            grp[[l, 0, r as usize, c as usize]] = cen.1 - c;
            grp[[l, 1, r as usize, c as usize]] = cen.0 - r;
            lms.push(landmark(LandmarkKind::CORNERS[l], r, c));
        }
        lms
    }

    #[test]
    fn exact_arrows_form_a_quadrilateral() {
        let mut grp = Array4::<f64>::zeros((4, 2, 20, 20));
        let lms = full_set(&mut grp, (10.0, 10.0), [(6.0, 6.0), (6.0, 14.0), (14.0, 14.0), (14.0, 6.0)]);
        let polys = group_quadrilaterals(&lms, grp.view(), 3);
        assert_eq!(polys.len(), 1);
        assert_eq!(polys[0].corners[0], Point::new(6.0, 6.0));
        assert_eq!(polys[0].slice_index, 3);
        assert_eq!(polys[0].score, 1.0);
    }

    #[test]
    fn zero_arrow_discards_centroid() {
        let mut grp = Array4::<f64>::zeros((4, 2, 20, 20));
        let lms = full_set(&mut grp, (10.0, 10.0), [(6.0, 6.0), (6.0, 14.0), (14.0, 14.0), (14.0, 6.0)]);
        grp[[0, 0, 6, 6]] = 0.0;
        grp[[0, 1, 6, 6]] = 0.0;
        assert!(group_quadrilaterals(&lms, grp.view(), 0).is_empty());
    }

    #[test]
    fn missing_corner_type_discards_centroid() {
        let mut grp = Array4::<f64>::zeros((4, 2, 20, 20));
        let mut lms = full_set(&mut grp, (10.0, 10.0), [(6.0, 6.0), (6.0, 14.0), (14.0, 14.0), (14.0, 6.0)]);
        lms.retain(|l| l.kind != LandmarkKind::BR);
        assert!(group_quadrilaterals(&lms, grp.view(), 0).is_empty());
    }

    #[test]
    fn same_polygon_across_slices_is_one_instance() {
        let per = vec![(0, vec![poly(0, 0.0, 0.0, 10.0)]), (1, vec![poly(1, 0.0, 0.0, 10.0)]), (2, vec![poly(2, 0.0, 0.0, 10.0)])];
        let v = link_slices(&per, 0.25);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].slice_range(), (0, 2));
        assert_eq!(v[0].centroid_3d, (1.0, Point::new(5.0, 5.0)));
    }

    #[test]
    fn gap_in_slices_breaks_instances() {
        let per = vec![(0, vec![poly(0, 0.0, 0.0, 10.0)]), (2, vec![poly(2, 0.0, 0.0, 10.0)])];
        assert_eq!(link_slices(&per, 0.25).len(), 2);
    }

    #[test]
    fn disjoint_polygons_never_merge() {
        let per: Vec<_> = (0..3)
            .map(|s| (s, vec![poly(s, 0.0, 0.0, 10.0), poly(s, 50.0, 50.0, 10.0)]))
            .collect();
        let v = link_slices(&per, 0.25);
        assert_eq!(v.len(), 2);
        assert!(v.iter().all(|x| x.polygons.len() == 3));
    }
}
