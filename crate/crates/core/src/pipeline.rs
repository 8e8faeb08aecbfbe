//! End-to-end orchestration: patches, detection, decoding, linking, level
//! labelling and disc grading.

use log::{info, warn};
use ndarray::{s, Array3, ArrayView3};
use thiserror::Error;

use crate::backend::{AppearanceInput, BackendError, GradingInput, ModelBackend, PatchInput};
use crate::config::{Mode, PipelineConfig};
use crate::decode::{decode_landmarks, group_quadrilaterals, link_slices, DecodeParams, VBPolygon, Vertebra3D};
use crate::exec::try_map;
use crate::grading::GradingScores;
use crate::ivv::{extract_ivv_volume, locate_ivv, IVV_DIMS};
use crate::level::{
    beam_decode, build_height_map, extract_vb_context_volume, recalibrate, refine, LabelError, Level, CONTEXT_DIMS,
    NUM_CLASSES,
};
use crate::patch::{extract_patch, merge_slice_frame, plan_patches, to_slice_frame, PatchError, PatchSpec};
use crate::report::{DetectionReport, IvvRecord, VertebraRecord};
use crate::target::{LandmarkTensor, CHANNELS};
use crate::dicom::Volume;

const APPEARANCE_TOL: f64 = 1e-6;

/// Levels whose disc with the level above is graded (S1-L5 up to L1-T12).
pub const GRADED_LOWER_LEVELS: [Level; 6] = [Level::S1, Level::L5, Level::L4, Level::L3, Level::L2, Level::L1];

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("volume has no voxels")]
    EmptyVolume,
    #[error(transparent)]
    Patch(#[from] PatchError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Label(#[from] LabelError),
    #[error("report has no consecutive vertebra pair between S1 and T12")]
    NoGradablePairs,
    #[error("grading.lumbar_only is set but the run is not in lumbar mode")]
    GradingRequiresLumbar,
}

impl PipelineError {
    /// Whether a backend broke its output contract (shape, normalisation,
    /// missing outputs).
    pub fn is_backend_violation(&self) -> bool {
        matches!(
            self,
            PipelineError::Backend(_) | PipelineError::Label(LabelError::BackendFailure(_))
        )
    }
}

fn check_shape(found: &[usize], expected: &[usize]) -> Result<(), BackendError> {
    if found != expected {
        return Err(BackendError::ShapeMismatch {
            expected: expected.to_vec(),
            found: found.to_vec(),
        });
    }
    Ok(())
}

/// Decode one slice's 13-channel tensor into quadrilaterals.
pub fn decode_slice(tensor: ArrayView3<f64>, slice_index: usize, params: &DecodeParams) -> Vec<VBPolygon> {
    let t = LandmarkTensor::from_channels(tensor).expect("13-channel tensor");
    let landmarks = decode_landmarks(t.det.view(), params.threshold);
    group_quadrilaterals(&landmarks, t.grp.view(), slice_index)
}

/// Run detection over every patch of slice `k` and merge the outputs.
pub fn detect_slice(
    volume: &Volume,
    k: usize,
    specs: &[PatchSpec],
    backend: &dyn ModelBackend,
    cfg: &PipelineConfig,
) -> Result<Array3<f64>, PipelineError> {
    let (_, h, w) = volume.dims();
    let slice = volume.data.slice(s![k, .., ..]);
    let out = (cfg.out_px, cfg.out_px);
    let backs = try_map(cfg.execution, specs, |spec| -> Result<_, BackendError> {
        let pixels = extract_patch(slice, spec, out);
        let y = backend.detect(&PatchInput {
            slice_index: k,
            spec,
            pixels: pixels.view(),
        })?;
        check_shape(y.shape(), &[CHANNELS, out.0, out.1])?;
        Ok((*spec, to_slice_frame(spec, y.view())))
    })?;
    Ok(merge_slice_frame(&backs, (h, w))?)
}

/// Detect, link and label every vertebra. The report lists vertebrae bottom
/// to top; a scan without detections gives an empty report.
pub fn run_detection_pipeline(
    volume: &Volume,
    backend: &dyn ModelBackend,
    cfg: &PipelineConfig,
) -> Result<DetectionReport, PipelineError> {
    let (ns, h, w) = volume.dims();
    if ns == 0 || h == 0 || w == 0 {
        return Err(PipelineError::EmptyVolume);
    }
    let grid = plan_patches((h, w), volume.pixel_spacing(), cfg.edge_mm, cfg.overlap_frac)?;
    info!("{} patches per slice over {ns} slices", grid.specs.len());

    let mut per_slice = Vec::with_capacity(ns);
    for k in 0..ns {
        let merged = detect_slice(volume, k, &grid.specs, backend, cfg)?;
        per_slice.push((k, decode_slice(merged.view(), k, &cfg.decode)));
    }
    let mut verts = link_slices(&per_slice, cfg.decode.iou_threshold);
    if verts.is_empty() {
        info!("no vertebrae detected");
        return Ok(DetectionReport::default());
    }
    verts.sort_by(|a, b| {
        let (sa, ca) = a.centroid_3d;
        let (sb, cb) = b.centroid_3d;
        cb.row.total_cmp(&ca.row).then(ca.col.total_cmp(&cb.col)).then(sa.total_cmp(&sb))
    });
    info!("{} vertebrae linked", verts.len());

    let label = cfg.label;
    let probs = try_map(cfg.execution, &verts, |v| -> Result<_, PipelineError> {
        let ctx = extract_vb_context_volume(volume, v, label.expand_axial_coronal, label.expand_sagittal)?;
        debug_assert_eq!(ctx.dim(), CONTEXT_DIMS);
        let p = backend.appearance(&AppearanceInput {
            vertebra: v,
            volume: ctx.view(),
        })?;
        check_shape(&[p.len()], &[NUM_CLASSES])?;
        let sum: f64 = p.iter().sum();
        if p.iter().any(|x| !x.is_finite() || *x < 0.0) || (sum - 1.0).abs() > APPEARANCE_TOL {
            return Err(BackendError::InvalidDistribution {
                what: "appearance output".into(),
                sum,
            }
            .into());
        }
        let mut arr = [0.0; NUM_CLASSES];
        arr.copy_from_slice(&p);
        Ok(recalibrate(&arr, label.softmax_t))
    })?;

    let last_row = (h - 1) as f64;
    let detections: Vec<_> = verts
        .iter()
        .zip(&probs)
        .map(|(v, p)| {
            let h1 = v.bounds.row_min.floor().clamp(0.0, last_row) as usize;
            let h2 = v.bounds.row_max.ceil().clamp(0.0, last_row) as usize;
            (h1, h2, *p)
        })
        .collect();
    let map = build_height_map(&detections, h)?;
    let map = refine(&map, backend)?;
    let rows: Vec<usize> = verts
        .iter()
        .map(|v| v.centroid_3d.1.row.round().clamp(0.0, last_row) as usize)
        .collect();
    let seq = beam_decode(&map, &rows, label.beam_width, label.skip_penalty)?;
    if seq.fallback_argmax {
        warn!("no valid level sequence; labels are per-vertebra argmax");
    }
    if seq.skipped_levels > 0 {
        info!("{} level(s) skipped between detections", seq.skipped_levels);
    }
    Ok(DetectionReport {
        vertebrae: verts
            .iter()
            .zip(&seq.labels)
            .map(|(v, &l)| VertebraRecord::new(l, v))
            .collect(),
        ivvs: Vec::new(),
    })
}

/// Locate the disc volume between each consecutive pair of reported levels
/// and grade those from S1-L5 to L1-T12. Other pairs are listed ungraded.
pub fn run_grading(
    volume: &Volume,
    report: &DetectionReport,
    backend: &dyn ModelBackend,
    cfg: &PipelineConfig,
) -> Result<DetectionReport, PipelineError> {
    if cfg.grading.lumbar_only && cfg.mode != Mode::Lumbar {
        return Err(PipelineError::GradingRequiresLumbar);
    }
    let verts: Vec<(Level, Vertebra3D)> = report
        .vertebrae
        .iter()
        .filter_map(|r| r.to_vertebra().map(|v| (r.level, v)))
        .collect();
    let mut pairs = Vec::new();
    for lower in &verts {
        let Some(up_level) = lower.0.above() else { continue };
        if let Some(upper) = verts.iter().find(|(l, _)| *l == up_level) {
            pairs.push((upper, lower));
        }
    }
    if !pairs.iter().any(|(_, lower)| GRADED_LOWER_LEVELS.contains(&lower.0)) {
        return Err(PipelineError::NoGradablePairs);
    }
    let records = try_map(cfg.execution, &pairs, |((ul, uv), (ll, lv))| -> Result<_, PipelineError> {
        let mut spec = match locate_ivv(uv, lv) {
            Ok(spec) => spec,
            Err(e) => {
                warn!("skipping {ul}-{ll}: {e}");
                return Ok(None);
            }
        };
        spec.level_pair = Some((*ul, *ll));
        let grading = if GRADED_LOWER_LEVELS.contains(ll) {
            let ivv = extract_ivv_volume(volume, &spec);
            debug_assert_eq!(ivv.dim(), IVV_DIMS);
            let raw = backend.grade(&GradingInput {
                spec: &spec,
                volume: ivv.view(),
            })?;
            Some(GradingScores::from_raw(&raw)?)
        } else {
            None
        };
        Ok(Some(IvvRecord::new(*ul, *ll, &spec, grading)))
    })?;
    let mut out = report.clone();
    out.ivvs = records.into_iter().flatten().collect();
    Ok(out)
}
