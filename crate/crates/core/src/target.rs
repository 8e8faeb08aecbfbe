//! Ground-truth landmark tensors and the detection/grouping losses.
//!
//! Channel layout of the flattened 13-channel tensor:
//!
//! | channels | content                                            |
//! |----------|----------------------------------------------------|
//! | 0..5     | heatmaps for TL, TR, BR, BL corners and centroid    |
//! | 5 + 2l   | column displacement (`dx`) of corner type `l`       |
//! | 6 + 2l   | row displacement (`dy`) of corner type `l`          |
//!
//! Inside the neighbourhood of a corner the field stores `centroid - p`, so
//! reading it at a detected corner yields the arrow to the owning centroid.

use ndarray::{s, Array2, Array3, Array4, ArrayView3, ArrayView4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{centroid_of_vertices, signed_area, Point, AREA_EPS};

pub const DET_CHANNELS: usize = 5;
pub const CORNERS: usize = 4;
pub const GRP_CHANNELS: usize = 2 * CORNERS;
pub const CHANNELS: usize = DET_CHANNELS + GRP_CHANNELS;

pub const DEFAULT_K_SIGMA: f64 = 0.002;
pub const DEFAULT_K_NBHD: f64 = 0.3;
/// Target threshold splitting positive and negative pixels for the weights.
pub const DEFAULT_ALPHA_T: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LandmarkKind {
    TL,
    TR,
    BR,
    BL,
    Centroid,
}

impl LandmarkKind {
    pub const ALL: [LandmarkKind; 5] = [Self::TL, Self::TR, Self::BR, Self::BL, Self::Centroid];
    pub const CORNERS: [LandmarkKind; 4] = [Self::TL, Self::TR, Self::BR, Self::BL];

    pub fn channel(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum TargetError {
    #[error("annotation {index} has a point outside the {dims:?} slice")]
    OutOfBounds { index: usize, dims: (usize, usize) },
    #[error("quadrilateral is self-intersecting")]
    SelfIntersecting,
    #[error("quadrilateral has zero area")]
    ZeroArea,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("threshold {0} outside (0, 1)")]
    InvalidThreshold(f64),
}

/// One annotated vertebral body: corners TL, TR, BR, BL in slice pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VBAnnotation {
    pub corners: [Point; 4],
    pub centroid: Point,
    pub area_px2: f64,
}

fn segments_cross(a: Point, b: Point, c: Point, d: Point) -> bool {
    let orient = |p: Point, q: Point, r: Point| {
        (q.col - p.col) * (r.row - p.row) - (q.row - p.row) * (r.col - p.col)
    };
    let d1 = orient(c, d, a);
    let d2 = orient(c, d, b);
    let d3 = orient(a, b, c);
    let d4 = orient(a, b, d);
    d1 * d2 < 0.0 && d3 * d4 < 0.0
}

impl VBAnnotation {
    pub fn new(corners: [Point; 4]) -> Result<Self, TargetError> {
        let [a, b, c, d] = corners;
        if segments_cross(a, b, c, d) || segments_cross(b, c, d, a) {
            return Err(TargetError::SelfIntersecting);
        }
        let area_px2 = signed_area(&corners).abs();
        if area_px2 <= AREA_EPS {
            return Err(TargetError::ZeroArea);
        }
        Ok(Self {
            corners,
            centroid: centroid_of_vertices(&corners),
            area_px2,
        })
    }

    pub fn landmark(&self, kind: LandmarkKind) -> Point {
        match kind {
            LandmarkKind::Centroid => self.centroid,
            k => self.corners[k as usize],
        }
    }

    /// Map into a resampled patch whose top-left pixel is `origin` and whose
    /// per-axis zoom is `scale`, keeping pixel centres aligned:
    /// `p' = (p - origin + 0.5) * scale - 0.5` on each axis.
    pub fn transformed(&self, origin: (f64, f64), scale: (f64, f64)) -> Self {
        let map = |p: Point| {
            Point::new(
                (p.row - origin.0 + 0.5) * scale.0 - 0.5,
                (p.col - origin.1 + 0.5) * scale.1 - 0.5,
            )
        };
        let corners = self.corners.map(map);
        Self {
            corners,
            centroid: map(self.centroid),
            area_px2: self.area_px2 * scale.0 * scale.1,
        }
    }

    fn inside(&self, (h, w): (usize, usize)) -> bool {
        self.corners.iter().chain(std::iter::once(&self.centroid)).all(|p| {
            p.row >= 0.0 && p.col >= 0.0 && p.row < h as f64 && p.col < w as f64
        })
    }
}

/// Detection heatmaps plus per-corner vector fields.
#[derive(Clone, Debug, PartialEq)]
pub struct LandmarkTensor {
    /// `5 × H × W`.
    pub det: Array3<f64>,
    /// `4 × 2 × H × W`; index 0 of the second axis is `dx` (columns), 1 is
    /// `dy` (rows).
    pub grp: Array4<f64>,
}

impl LandmarkTensor {
    pub fn zeros((h, w): (usize, usize)) -> Self {
        Self {
            det: Array3::zeros((DET_CHANNELS, h, w)),
            grp: Array4::zeros((CORNERS, 2, h, w)),
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        let (_, h, w) = self.det.dim();
        (h, w)
    }

    pub fn to_channels(&self) -> Array3<f64> {
        let (h, w) = self.dims();
        let mut out = Array3::zeros((CHANNELS, h, w));
        out.slice_mut(s![..DET_CHANNELS, .., ..]).assign(&self.det);
        let grp = self
            .grp
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((GRP_CHANNELS, h, w))
            .expect("standard layout");
        out.slice_mut(s![DET_CHANNELS.., .., ..]).assign(&grp);
        out
    }

    pub fn from_channels(t: ArrayView3<f64>) -> Result<Self, TargetError> {
        let (c, h, w) = t.dim();
        if c != CHANNELS {
            return Err(TargetError::ShapeMismatch(format!("expected {CHANNELS} channels, got {c}")));
        }
        let det = t.slice(s![..DET_CHANNELS, .., ..]).to_owned();
        let grp = t
            .slice(s![DET_CHANNELS.., .., ..])
            .to_owned()
            .into_shape_with_order((CORNERS, 2, h, w))
            .expect("contiguous channels");
        Ok(Self { det, grp })
    }
}

/// Rendering constants: `sigma^2 = k_sigma * area`, neighbourhood radius
/// `k_nbhd * sqrt(area)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderParams {
    pub k_sigma: f64,
    pub k_nbhd: f64,
}

impl Default for RenderParams {
    fn default() -> Self {
        Self {
            k_sigma: DEFAULT_K_SIGMA,
            k_nbhd: DEFAULT_K_NBHD,
        }
    }
}

/// For each corner type, the index of the annotation owning each pixel's
/// grouping neighbourhood (nearest corner wins, ties to the lower index).
pub fn neighbourhood_owners(
    annotations: &[VBAnnotation],
    (h, w): (usize, usize),
    k_nbhd: f64,
) -> Vec<Array2<Option<u32>>> {
    LandmarkKind::CORNERS
        .iter()
        .map(|&kind| {
            let mut owner = Array2::<Option<u32>>::from_elem((h, w), None);
            let mut best = Array2::<f64>::from_elem((h, w), f64::INFINITY);
            for (b, ann) in annotations.iter().enumerate() {
                let corner = ann.landmark(kind);
                let radius = k_nbhd * ann.area_px2.sqrt();
                let Some((r0, r1, c0, c1)) = window(corner, radius, (h, w)) else {
                    continue;
                };
                for r in r0..r1 {
                    for c in c0..c1 {
                        let d = corner.dist(Point::new(r as f64, c as f64));
                        if d <= radius && d < best[[r, c]] {
                            best[[r, c]] = d;
                            owner[[r, c]] = Some(b as u32);
                        }
                    }
                }
            }
            owner
        })
        .collect()
}

/// Pixel window `[r0,r1) × [c0,c1)` covering a disc, clipped to the slice.
fn window(center: Point, radius: f64, (h, w): (usize, usize)) -> Option<(usize, usize, usize, usize)> {
    let r0 = (center.row - radius).floor().max(0.0);
    let c0 = (center.col - radius).floor().max(0.0);
    let r1 = ((center.row + radius).ceil() + 1.0).min(h as f64);
    let c1 = ((center.col + radius).ceil() + 1.0).min(w as f64);
    if r0 >= r1 || c0 >= c1 {
        None
    } else {
        Some((r0 as usize, r1 as usize, c0 as usize, c1 as usize))
    }
}

/// Render without bounds checks: landmarks outside the slice contribute
/// whatever part of their response falls inside it.
pub fn render_target_clipped(
    annotations: &[VBAnnotation],
    dims: (usize, usize),
    params: RenderParams,
) -> LandmarkTensor {
    let mut t = LandmarkTensor::zeros(dims);
    for ann in annotations {
        let var = params.k_sigma * ann.area_px2;
        let sigma = var.sqrt();
        for kind in LandmarkKind::ALL {
            let p = ann.landmark(kind);
            let Some((r0, r1, c0, c1)) = window(p, (6.0 * sigma).ceil() + 1.0, dims) else {
                continue;
            };
            let mut plane = t.det.slice_mut(s![kind.channel(), .., ..]);
            for r in r0..r1 {
                let dr = r as f64 - p.row;
                for c in c0..c1 {
                    let dc = c as f64 - p.col;
                    let g = (-(dr * dr + dc * dc) / (2.0 * var)).exp();
                    if g > plane[[r, c]] {
                        plane[[r, c]] = g;
                    }
                }
            }
        }
    }
    let owners = neighbourhood_owners(annotations, dims, params.k_nbhd);
    for (l, owner) in owners.iter().enumerate() {
        for ((r, c), o) in owner.indexed_iter() {
            if let Some(b) = o {
                let cen = annotations[*b as usize].centroid;
                t.grp[[l, 0, r, c]] = cen.col - c as f64;
                t.grp[[l, 1, r, c]] = cen.row - r as f64;
            }
        }
    }
    t
}

/// Render the 13-channel target for annotations lying inside the slice.
pub fn render_target(
    annotations: &[VBAnnotation],
    dims: (usize, usize),
    params: RenderParams,
) -> Result<LandmarkTensor, TargetError> {
    if let Some(index) = annotations.iter().position(|a| !a.inside(dims)) {
        return Err(TargetError::OutOfBounds { index, dims });
    }
    Ok(render_target_clipped(annotations, dims, params))
}

/// Class-balancing weights for one target channel.
#[derive(Clone, Debug, PartialEq)]
pub struct AlphaWeights {
    pub weights: Array2<f64>,
    /// Set when the channel has only positives or only negatives, in which
    /// case the weights are uniform `1/(N+P)`.
    pub degenerate: bool,
}

pub fn alpha_weights(target: ndarray::ArrayView2<f64>, t: f64) -> Result<AlphaWeights, TargetError> {
    if !(t > 0.0 && t < 1.0) {
        return Err(TargetError::InvalidThreshold(t));
    }
    let total = target.len();
    let positives = target.iter().filter(|&&v| v >= t).count();
    let negatives = total - positives;
    let n_total = total as f64;
    if positives == 0 || negatives == 0 {
        return Ok(AlphaWeights {
            weights: Array2::from_elem(target.dim(), 1.0 / n_total),
            degenerate: true,
        });
    }
    let w_pos = negatives as f64 / n_total;
    let w_neg = positives as f64 / n_total;
    Ok(AlphaWeights {
        weights: target.mapv(|v| if v >= t { w_pos } else { w_neg }),
        degenerate: false,
    })
}

/// Weighted L1 loss over detection channels; `target` supplies the weights.
pub fn detection_loss(
    prediction: ArrayView3<f64>,
    target: ArrayView3<f64>,
    t: f64,
) -> Result<f64, TargetError> {
    if prediction.dim() != target.dim() {
        return Err(TargetError::ShapeMismatch(format!(
            "prediction {:?} vs target {:?}",
            prediction.dim(),
            target.dim()
        )));
    }
    let mut loss = 0.0;
    for k in 0..target.dim().0 {
        let tk = target.slice(s![k, .., ..]);
        let alpha = alpha_weights(tk, t)?;
        let pk = prediction.slice(s![k, .., ..]);
        loss += ndarray::Zip::from(&alpha.weights)
            .and(&pk)
            .and(&tk)
            .fold(0.0, |acc, &a, &y, &yh| acc + a * (y - yh).abs());
    }
    Ok(loss)
}

/// Unnormalised L2 loss of predicted vector fields over every corner
/// neighbourhood.
pub fn grouping_loss(
    fields: ArrayView4<f64>,
    annotations: &[VBAnnotation],
    k_nbhd: f64,
) -> Result<f64, TargetError> {
    let (l, two, h, w) = fields.dim();
    if l != CORNERS || two != 2 {
        return Err(TargetError::ShapeMismatch(format!(
            "expected {CORNERS}x2xHxW fields, got {:?}",
            fields.dim()
        )));
    }
    let owners = neighbourhood_owners(annotations, (h, w), k_nbhd);
    let mut loss = 0.0;
    for (l, owner) in owners.iter().enumerate() {
        for ((r, c), o) in owner.indexed_iter() {
            if let Some(b) = o {
                let cen = annotations[*b as usize].centroid;
                let ex = fields[[l, 0, r, c]] - (cen.col - c as f64);
                let ey = fields[[l, 1, r, c]] - (cen.row - r as f64);
                loss += ex * ex + ey * ey;
            }
        }
    }
    Ok(loss)
}

/// `detection_loss + grouping_loss`.
pub fn composite_loss(
    prediction: ArrayView3<f64>,
    target: ArrayView3<f64>,
    fields: ArrayView4<f64>,
    annotations: &[VBAnnotation],
    t: f64,
    k_nbhd: f64,
) -> Result<f64, TargetError> {
    Ok(detection_loss(prediction, target, t)? + grouping_loss(fields, annotations, k_nbhd)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr2, Array3};

    fn square(r0: f64, c0: f64, side: f64) -> VBAnnotation {
        VBAnnotation::new([
            Point::new(r0, c0),
            Point::new(r0, c0 + side),
            Point::new(r0 + side, c0 + side),
            Point::new(r0 + side, c0),
        ])
        .unwrap()
    }

    #[test]
    fn empty_annotations_render_zero() {
        let t = render_target(&[], (16, 12), RenderParams::default()).unwrap();
        assert!(t.det.iter().chain(t.grp.iter()).all(|&v| v == 0.0));
    }

    #[test]
    fn centroid_peak_is_one() {
        let ann = square(10.0, 10.0, 20.0);
        let t = render_target(&[ann], (48, 48), RenderParams::default()).unwrap();
        assert_eq!(t.det[[LandmarkKind::Centroid.channel(), 20, 20]], 1.0);
        assert_eq!(t.det[[LandmarkKind::TL.channel(), 10, 10]], 1.0);
    }

    #[test]
    fn corner_field_points_to_centroid() {
        let ann = square(10.0, 12.0, 20.0);
        let t = render_target(&[ann.clone()], (48, 48), RenderParams::default()).unwrap();
        assert_eq!(t.grp[[0, 0, 10, 12]], ann.centroid.col - 12.0);
        assert_eq!(t.grp[[0, 1, 10, 12]], ann.centroid.row - 10.0);
        // Far from any corner the field is zero.
        assert_eq!(t.grp[[0, 0, 20, 22]], 0.0);
    }

    #[test]
    fn out_of_bounds_annotation_is_rejected() {
        let ann = square(40.0, 10.0, 20.0);
        assert_eq!(
            render_target(&[ann], (48, 48), RenderParams::default()).unwrap_err(),
            TargetError::OutOfBounds { index: 0, dims: (48, 48) }
        );
    }

    #[test]
    fn self_intersecting_quad_is_rejected() {
        let bow = [
            Point::new(0.0, 0.0),
            Point::new(10.0, 10.0),
            Point::new(0.0, 10.0),
            Point::new(10.0, 0.0),
        ];
        assert_eq!(VBAnnotation::new(bow).unwrap_err(), TargetError::SelfIntersecting);
    }

    #[test]
    fn alpha_counts() {
        let ch = arr2(&[[1.0, 0.0], [0.0, 0.0]]);
        let a = alpha_weights(ch.view(), 0.01).unwrap();
        assert!(!a.degenerate);
        assert_eq!(a.weights, arr2(&[[0.75, 0.25], [0.25, 0.25]]));
    }

    #[test]
    fn alpha_degenerate_channels_are_uniform() {
        for v in [0.5, 0.0] {
            let a = alpha_weights(Array2::from_elem((2, 2), v).view(), 0.01).unwrap();
            assert!(a.degenerate);
            assert!(a.weights.iter().all(|&w| w == 0.25));
        }
    }

    #[test]
    fn alpha_sum_is_two_np_over_total() {
        let ch = Array2::from_shape_fn((5, 7), |(r, c)| if (r * 7 + c) % 4 == 0 { 0.8 } else { 0.0 });
        let p = ch.iter().filter(|&&v| v >= 0.01).count() as f64;
        let n = ch.len() as f64 - p;
        let a = alpha_weights(ch.view(), 0.01).unwrap();
        assert!((a.weights.sum() - 2.0 * n * p / (n + p)).abs() < 1e-12);
    }

    #[test]
    fn single_pixel_detection_loss() {
        let y = Array3::from_elem((1, 1, 1), 0.5);
        let yh = Array3::from_elem((1, 1, 1), 1.0);
        assert_eq!(detection_loss(y.view(), yh.view(), 0.01).unwrap(), 0.5);
    }

    #[test]
    fn detection_loss_shape_mismatch() {
        let a = Array3::<f64>::zeros((5, 2, 2));
        let b = Array3::<f64>::zeros((5, 2, 3));
        assert!(matches!(
            detection_loss(a.view(), b.view(), 0.01),
            Err(TargetError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn grouping_loss_of_target_is_zero_and_unit_perturbation_is_one() {
        let anns = vec![square(8.0, 8.0, 16.0), square(30.0, 10.0, 14.0)];
        let p = RenderParams::default();
        let t = render_target(&anns, (50, 40), p).unwrap();
        assert_eq!(grouping_loss(t.grp.view(), &anns, p.k_nbhd).unwrap(), 0.0);
        let mut v = t.grp.clone();
        v[[2, 1, 24, 24]] += 1.0; // BR corner of the first square.
        assert_eq!(grouping_loss(v.view(), &anns, p.k_nbhd).unwrap(), 1.0);
        assert_eq!(grouping_loss(t.grp.view(), &[], p.k_nbhd).unwrap(), 0.0);
    }

    #[test]
    fn channel_flattening_round_trips() {
        let anns = vec![square(8.0, 8.0, 16.0)];
        let t = render_target(&anns, (30, 30), RenderParams::default()).unwrap();
        let flat = t.to_channels();
        assert_eq!(flat.dim(), (CHANNELS, 30, 30));
        assert_eq!(flat[[DET_CHANNELS + 2, 8, 8]], t.grp[[1, 0, 8, 8]]);
        assert_eq!(LandmarkTensor::from_channels(flat.view()).unwrap(), t);
    }
}
