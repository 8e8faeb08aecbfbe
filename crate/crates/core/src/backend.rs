//! Model backends: the detection, appearance, grading and refinement models
//! the pipeline calls, plus two implementations that need no ML runtime.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use log::debug;
use ndarray::{Array2, Array3, ArrayView2, ArrayView3};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::decode::Vertebra3D;
use crate::geometry::{contains, Point};
use crate::grading::GradingScores;
use crate::ivv::IVVSpec;
use crate::level::{HeightProbabilityMap, Level, Refine, NUM_CLASSES};
use crate::patch::PatchSpec;
use crate::target::{render_target_clipped, RenderParams, VBAnnotation};
use crate::tensor_io::{encode_tensor, read_tensor, write_tensor, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("backend output has shape {found:?}, expected {expected:?}")]
    ShapeMismatch { expected: Vec<usize>, found: Vec<usize> },
    #[error("refined map row {row} sums to {sum}")]
    NormalizationViolated { row: usize, sum: f64 },
    #[error("{what} is not a probability distribution (sum {sum})")]
    InvalidDistribution { what: String, sum: f64 },
    #[error("no stored tensor at {0}")]
    MissingTensor(PathBuf),
    #[error("tensor file: {0}")]
    Tensor(#[from] TensorError),
    #[error("backend failed: {0}")]
    Failed(String),
}

/// One resampled patch to run detection on.
pub struct PatchInput<'a> {
    pub slice_index: usize,
    /// Where the patch came from in the slice.
    pub spec: &'a PatchSpec,
    /// `out_px × out_px` intensities.
    pub pixels: ArrayView2<'a, f64>,
}

/// Context crop around one vertebra for the appearance model.
pub struct AppearanceInput<'a> {
    pub vertebra: &'a Vertebra3D,
    /// `16 × 224 × 224`.
    pub volume: ArrayView3<'a, f64>,
}

/// One intervertebral volume for the grading model.
pub struct GradingInput<'a> {
    pub spec: &'a IVVSpec,
    /// `9 × 112 × 224`.
    pub volume: ArrayView3<'a, f64>,
}

/// The four models of the pipeline. Outputs are shape- and
/// normalisation-checked by the caller.
pub trait ModelBackend: Refine + Sync {
    /// 13-channel landmark tensor at the patch's resolution.
    fn detect(&self, input: &PatchInput) -> Result<Array3<f64>, BackendError>;
    /// 23 level probabilities, S1 first.
    fn appearance(&self, input: &AppearanceInput) -> Result<Vec<f64>, BackendError>;
    /// Flat grading vector, see [`GradingScores::from_raw`].
    fn grade(&self, input: &GradingInput) -> Result<Vec<f64>, BackendError>;
}

/// An annotated vertebral body with its level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelledAnnotation {
    pub level: Level,
    /// TL, TR, BR, BL in slice pixels.
    pub corners: [Point; 4],
}

/// Per-slice annotations of a scan, as written next to synthetic series.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub slices: BTreeMap<usize, Vec<LabelledAnnotation>>,
}

impl GroundTruth {
    pub fn read(path: &Path) -> Result<Self, BackendError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| BackendError::Failed(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| BackendError::Failed(format!("{}: {e}", path.display())))
    }

    pub fn write(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self).expect("ground truth serialises"))
    }
}

/// A perfect model built from ground truth: detection renders the target in
/// the patch frame, appearance is one-hot on the matched level and grading
/// is uniform.
pub struct OracleBackend {
    truth: BTreeMap<usize, Vec<(Level, VBAnnotation)>>,
    params: RenderParams,
}

impl OracleBackend {
    pub fn new(truth: &GroundTruth, params: RenderParams) -> Result<Self, BackendError> {
        let mut map = BTreeMap::new();
        for (&slice, anns) in &truth.slices {
            let v = anns
                .iter()
                .map(|a| {
                    VBAnnotation::new(a.corners)
                        .map(|ann| (a.level, ann))
                        .map_err(|e| BackendError::Failed(format!("slice {slice}: {e}")))
                })
                .collect::<Result<Vec<_>, _>>()?;
            map.insert(slice, v);
        }
        Ok(Self { truth: map, params })
    }

    fn level_at(&self, slice: usize, p: Point) -> Option<Level> {
        self.truth
            .get(&slice)?
            .iter()
            .find(|(_, ann)| contains(&ann.corners, p))
            .map(|(level, _)| *level)
    }
}

impl Refine for OracleBackend {}

impl ModelBackend for OracleBackend {
    fn detect(&self, input: &PatchInput) -> Result<Array3<f64>, BackendError> {
        let out = input.pixels.dim();
        let scale = input.spec.scale(out);
        let origin = (input.spec.origin.0 as f64, input.spec.origin.1 as f64);
        let anns: Vec<VBAnnotation> = self
            .truth
            .get(&input.slice_index)
            .map(|v| v.iter().map(|(_, a)| a.transformed(origin, scale)).collect())
            .unwrap_or_default();
        Ok(render_target_clipped(&anns, out, self.params).to_channels())
    }

    fn appearance(&self, input: &AppearanceInput) -> Result<Vec<f64>, BackendError> {
        let central = input.vertebra.central_polygon();
        let level = self.level_at(central.slice_index, central.centroid);
        let class = level.map(|l| match l {
            Level::S2 => 0,
            Level::C2 => NUM_CLASSES - 1,
            l => l.class().expect("anchor levels handled"),
        });
        Ok(match class {
            Some(c) => (0..NUM_CLASSES).map(|i| if i == c { 1.0 } else { 0.0 }).collect(),
            None => {
                debug!("no ground truth under vertebra at {:?}", central.centroid);
                vec![1.0 / NUM_CLASSES as f64; NUM_CLASSES]
            }
        })
    }

    fn grade(&self, _input: &GradingInput) -> Result<Vec<f64>, BackendError> {
        Ok(GradingScores::uniform_raw())
    }
}

/// Content hash of a tensor's exchange encoding; names stored outputs.
pub fn tensor_key(t: &Tensor) -> String {
    hex::encode(Sha256::digest(encode_tensor(t)))
}

fn tensor_from_view<D: ndarray::Dimension>(a: ndarray::ArrayView<f64, D>) -> Tensor {
    Tensor::from_f64(a.shape().to_vec(), a.iter().copied()).expect("shape matches data")
}

/// Reads model outputs computed elsewhere. Each call hashes its input tensor
/// and loads `<root>/<model>/<key>.tnsr`, where model is `detect`,
/// `appearance`, `grade` or `refine`. With recording enabled, inputs without
/// a stored output are written to `<root>/<model>/<key>.input.tnsr` so they
/// can be run offline. A missing refinement output means identity.
pub struct FilesBackend {
    root: PathBuf,
    record_inputs: bool,
}

impl FilesBackend {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self {
            root: root.into(),
            record_inputs: false,
        }
    }

    pub fn with_recording(mut self, on: bool) -> Self {
        self.record_inputs = on;
        self
    }

    pub fn output_path(&self, model: &str, input: &Tensor) -> PathBuf {
        self.root.join(model).join(format!("{}.tnsr", tensor_key(input)))
    }

    fn lookup(&self, model: &str, input: Tensor) -> Result<Option<Tensor>, BackendError> {
        let path = self.output_path(model, &input);
        if path.exists() {
            return Ok(Some(read_tensor(&path)?));
        }
        if self.record_inputs {
            let dir = self.root.join(model);
            std::fs::create_dir_all(&dir).map_err(TensorError::Io)?;
            write_tensor(&dir.join(format!("{}.input.tnsr", tensor_key(&input))), &input)?;
        }
        debug!("no stored output at {}", path.display());
        Ok(None)
    }

    fn require(&self, model: &str, input: Tensor) -> Result<Tensor, BackendError> {
        let path = self.output_path(model, &input);
        self.lookup(model, input)?.ok_or(BackendError::MissingTensor(path))
    }
}

impl Refine for FilesBackend {
    fn refine_map(&self, map: &HeightProbabilityMap) -> Result<Array2<f64>, BackendError> {
        match self.lookup("refine", tensor_from_view(map.values.view()))? {
            None => Ok(map.values.clone()),
            Some(t) => match t.shape[..] {
                [h, c] => Ok(Array2::from_shape_vec((h, c), t.to_f64()).expect("checked by decoder")),
                _ => Err(BackendError::ShapeMismatch {
                    expected: map.values.shape().to_vec(),
                    found: t.shape,
                }),
            },
        }
    }
}

impl ModelBackend for FilesBackend {
    fn detect(&self, input: &PatchInput) -> Result<Array3<f64>, BackendError> {
        let t = self.require("detect", tensor_from_view(input.pixels))?;
        match t.shape[..] {
            [c, h, w] => Ok(Array3::from_shape_vec((c, h, w), t.to_f64()).expect("checked by decoder")),
            _ => Err(BackendError::ShapeMismatch {
                expected: vec![crate::target::CHANNELS, input.pixels.dim().0, input.pixels.dim().1],
                found: t.shape,
            }),
        }
    }

    fn appearance(&self, input: &AppearanceInput) -> Result<Vec<f64>, BackendError> {
        Ok(self.require("appearance", tensor_from_view(input.volume))?.to_f64())
    }

    fn grade(&self, input: &GradingInput) -> Result<Vec<f64>, BackendError> {
        Ok(self.require("grade", tensor_from_view(input.volume))?.to_f64())
    }
}
