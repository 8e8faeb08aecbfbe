use ndarray::{Array2, Array3, ArrayView};

use spine_core::backend::{
    AppearanceInput, BackendError, FilesBackend, GradingInput, ModelBackend, OracleBackend, PatchInput,
};
use spine_core::config::{Mode, PipelineConfig};
use spine_core::exec::Execution;
use spine_core::level::{HeightProbabilityMap, Level, Refine, NUM_CLASSES};
use spine_core::pipeline::{run_detection_pipeline, run_grading, PipelineError};
use spine_core::report::{report_to_json, DetectionReport};
use spine_core::synth::{self, SyntheticScan};
use spine_core::target::CHANNELS;
use spine_core::tensor_io::{read_tensor, write_tensor, Tensor};

fn lumbar() -> (SyntheticScan, PipelineConfig, OracleBackend) {
    let scan = synth::lumbar(3);
    let cfg = PipelineConfig::for_mode(Mode::Lumbar);
    let oracle = OracleBackend::new(&scan.truth, cfg.render).unwrap();
    (scan, cfg, oracle)
}

const LUMBAR_LEVELS: [Level; 6] = [Level::S1, Level::L5, Level::L4, Level::L3, Level::L2, Level::L1];

/// Returns zeros of a configurable detection shape and a configurable
/// appearance vector.
struct Stub {
    detect_shape: Option<(usize, usize, usize)>,
}

impl Refine for Stub {}

impl ModelBackend for Stub {
    fn detect(&self, input: &PatchInput) -> Result<Array3<f64>, BackendError> {
        let (h, w) = input.pixels.dim();
        Ok(Array3::zeros(self.detect_shape.unwrap_or((CHANNELS, h, w))))
    }
    fn appearance(&self, _: &AppearanceInput) -> Result<Vec<f64>, BackendError> {
        Ok(vec![1.0 / NUM_CLASSES as f64; NUM_CLASSES])
    }
    fn grade(&self, _: &GradingInput) -> Result<Vec<f64>, BackendError> {
        Err(BackendError::Failed("stub".into()))
    }
}

/// Oracle detection with an appearance output that does not sum to one.
struct HalfAppearance<'a>(&'a OracleBackend);

impl Refine for HalfAppearance<'_> {}

impl ModelBackend for HalfAppearance<'_> {
    fn detect(&self, input: &PatchInput) -> Result<Array3<f64>, BackendError> {
        self.0.detect(input)
    }
    fn appearance(&self, input: &AppearanceInput) -> Result<Vec<f64>, BackendError> {
        Ok(self.0.appearance(input)?.iter().map(|p| p * 0.5).collect())
    }
    fn grade(&self, input: &GradingInput) -> Result<Vec<f64>, BackendError> {
        self.0.grade(input)
    }
}

fn tensor<D: ndarray::Dimension>(a: ArrayView<f64, D>) -> Tensor {
    Tensor::from_f64(a.shape().to_vec(), a.iter().copied()).unwrap()
}

/// Runs the oracle and stores every output where a `FilesBackend` rooted at
/// the same directory will look for it. Returns the f32-rounded values so a
/// replay sees exactly the same numbers.
struct Recorder<'a> {
    oracle: &'a OracleBackend,
    files: FilesBackend,
}

impl Recorder<'_> {
    fn store(&self, model: &str, input: Tensor, output: Tensor) -> Vec<f64> {
        let path = self.files.output_path(model, &input);
        // Same input must mean same output, or replay is ill-posed.
        if path.exists() {
            assert_eq!(read_tensor(&path).unwrap(), output, "conflicting outputs for {}", path.display());
        }
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        write_tensor(&path, &output).unwrap();
        output.to_f64()
    }
}

impl Refine for Recorder<'_> {}

impl ModelBackend for Recorder<'_> {
    fn detect(&self, input: &PatchInput) -> Result<Array3<f64>, BackendError> {
        let y = self.oracle.detect(input)?;
        let v = self.store("detect", tensor(input.pixels), tensor(y.view()));
        Ok(Array3::from_shape_vec(y.dim(), v).unwrap())
    }
    fn appearance(&self, input: &AppearanceInput) -> Result<Vec<f64>, BackendError> {
        let p = self.oracle.appearance(input)?;
        Ok(self.store("appearance", tensor(input.volume), Tensor::from_f64(vec![p.len()], p).unwrap()))
    }
    fn grade(&self, input: &GradingInput) -> Result<Vec<f64>, BackendError> {
        let g = self.oracle.grade(input)?;
        Ok(self.store("grade", tensor(input.volume), Tensor::from_f64(vec![g.len()], g).unwrap()))
    }
}

#[test]
fn lumbar_scan_is_detected_and_graded() {
    let (scan, cfg, oracle) = lumbar();
    let report = run_detection_pipeline(&scan.volume, &oracle, &cfg).unwrap();
    let levels: Vec<Level> = report.vertebrae.iter().map(|v| v.level).collect();
    assert_eq!(levels, LUMBAR_LEVELS);
    assert!(report.vertebrae.windows(2).all(|w| w[0].centroid[1] > w[1].centroid[1]));
    assert!(report.ivvs.is_empty());

    let graded = run_grading(&scan.volume, &report, &oracle, &cfg).unwrap();
    assert_eq!(graded.vertebrae, report.vertebrae);
    assert_eq!(graded.ivvs.len(), 5);
    for ivv in &graded.ivvs {
        let [upper, lower] = ivv.level_pair;
        assert_eq!(lower.above(), Some(upper));
        assert!(report.vertebrae.iter().any(|v| v.level == upper));
        assert!(report.vertebrae.iter().any(|v| v.level == lower));
        assert!(ivv.grading.is_some());
        assert!((ivv.width_px - 2.0 * ivv.height_px).abs() < 1e-6);
    }
}

#[test]
fn execution_strategies_agree() {
    let (scan, mut cfg, oracle) = lumbar();
    cfg.execution = Execution::Sequential;
    let seq = run_detection_pipeline(&scan.volume, &oracle, &cfg).unwrap();
    let seq = run_grading(&scan.volume, &seq, &oracle, &cfg).unwrap();
    cfg.execution = Execution::Parallel;
    let par = run_detection_pipeline(&scan.volume, &oracle, &cfg).unwrap();
    let par = run_grading(&scan.volume, &par, &oracle, &cfg).unwrap();
    assert_eq!(report_to_json(&seq), report_to_json(&par));
}

#[test]
fn silent_backend_gives_empty_report() {
    let (scan, cfg, _) = lumbar();
    let report = run_detection_pipeline(&scan.volume, &Stub { detect_shape: None }, &cfg).unwrap();
    assert_eq!(report, DetectionReport::default());
}

#[test]
fn wrong_detection_shape_is_a_backend_violation() {
    let (scan, cfg, _) = lumbar();
    let err = run_detection_pipeline(&scan.volume, &Stub { detect_shape: Some((12, 224, 224)) }, &cfg).unwrap_err();
    assert!(err.is_backend_violation());
    match err {
        PipelineError::Backend(BackendError::ShapeMismatch { expected, found }) => {
            assert_eq!(expected, vec![CHANNELS, cfg.out_px, cfg.out_px]);
            assert_eq!(found, vec![12, 224, 224]);
        }
        other => panic!("unexpected error {other:?}"),
    }
}

#[test]
fn unnormalised_appearance_is_rejected() {
    let (scan, cfg, oracle) = lumbar();
    let err = run_detection_pipeline(&scan.volume, &HalfAppearance(&oracle), &cfg).unwrap_err();
    assert!(err.is_backend_violation());
    assert!(matches!(err, PipelineError::Backend(BackendError::InvalidDistribution { sum, .. }) if (sum - 0.5).abs() < 1e-9));
}

#[test]
fn grading_needs_a_pair() {
    let (scan, cfg, oracle) = lumbar();
    let report = run_detection_pipeline(&scan.volume, &oracle, &cfg).unwrap();
    let single = DetectionReport { vertebrae: report.vertebrae[..1].to_vec(), ivvs: Vec::new() };
    assert!(matches!(run_grading(&scan.volume, &single, &oracle, &cfg), Err(PipelineError::NoGradablePairs)));

    let mut whole = PipelineConfig::for_mode(Mode::WholeSpine);
    whole.grading.lumbar_only = true;
    assert!(matches!(run_grading(&scan.volume, &report, &oracle, &whole), Err(PipelineError::GradingRequiresLumbar)));
}

#[test]
fn stored_outputs_replay_identically() {
    let (mut scan, cfg, oracle) = lumbar();
    // The oracle looks at annotations rather than pixels, so identical
    // background patches would get different outputs. Texture makes every
    // input unique, as it would be for a model that only sees pixels.
    scan.volume.data.indexed_iter_mut().for_each(|((k, r, c), v)| {
        let mut x = ((k as u64) << 40 | (r as u64) << 20 | c as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        x ^= x >> 29;
        *v += (x % 1000) as f64 * 1e-3;
    });
    let dir = tempfile::tempdir().unwrap();
    let recorder = Recorder { oracle: &oracle, files: FilesBackend::new(dir.path()) };
    let live = run_detection_pipeline(&scan.volume, &recorder, &cfg).unwrap();
    let live = run_grading(&scan.volume, &live, &recorder, &cfg).unwrap();

    let files = FilesBackend::new(dir.path());
    let replay = run_detection_pipeline(&scan.volume, &files, &cfg).unwrap();
    let replay = run_grading(&scan.volume, &replay, &files, &cfg).unwrap();
    assert_eq!(report_to_json(&live), report_to_json(&replay));
}

#[test]
fn missing_outputs_are_recorded() {
    let (scan, cfg, _) = lumbar();
    let dir = tempfile::tempdir().unwrap();
    let files = FilesBackend::new(dir.path()).with_recording(true);
    let err = run_detection_pipeline(&scan.volume, &files, &cfg).unwrap_err();
    assert!(matches!(err, PipelineError::Backend(BackendError::MissingTensor(_))));
    let recorded = std::fs::read_dir(dir.path().join("detect")).unwrap().count();
    assert!(recorded >= 1);
}

#[test]
fn refined_map_must_stay_normalised() {
    struct Skewed<'a>(&'a OracleBackend);
    impl Refine for Skewed<'_> {
        fn refine_map(&self, map: &HeightProbabilityMap) -> Result<Array2<f64>, BackendError> {
            Ok(map.values.mapv(|v| v * 2.0))
        }
    }
    impl ModelBackend for Skewed<'_> {
        fn detect(&self, input: &PatchInput) -> Result<Array3<f64>, BackendError> {
            self.0.detect(input)
        }
        fn appearance(&self, input: &AppearanceInput) -> Result<Vec<f64>, BackendError> {
            self.0.appearance(input)
        }
        fn grade(&self, input: &GradingInput) -> Result<Vec<f64>, BackendError> {
            self.0.grade(input)
        }
    }
    let (scan, cfg, oracle) = lumbar();
    let err = run_detection_pipeline(&scan.volume, &Skewed(&oracle), &cfg).unwrap_err();
    assert!(err.is_backend_violation(), "{err:?}");
}
