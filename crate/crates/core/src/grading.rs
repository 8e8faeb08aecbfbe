//! Per-disc grading scores.

use serde::{Deserialize, Serialize};

use crate::backend::BackendError;

/// Length of the flat grading vector a backend returns: every group below in
/// declaration order except `ccs_binary`, which is derived.
pub const RAW_GRADES_LEN: usize = 5 + 4 + 4 + 8 * 2;
const GROUP_TOL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradingScores {
    pub pfirrmann: [f64; 5],
    pub disc_narrowing: [f64; 4],
    pub ccs_multiclass: [f64; 4],
    /// `[p1, p2 + p3 + p4]` of `ccs_multiclass`.
    pub ccs_binary: [f64; 2],
    pub endplate_upper: [f64; 2],
    pub endplate_lower: [f64; 2],
    pub marrow_upper: [f64; 2],
    pub marrow_lower: [f64; 2],
    pub foraminal_left: [f64; 2],
    pub foraminal_right: [f64; 2],
    pub spondylolisthesis: [f64; 2],
    pub herniation: [f64; 2],
}

fn group<const N: usize>(raw: &[f64], at: &mut usize, name: &str) -> Result<[f64; N], BackendError> {
    let mut out = [0.0; N];
    out.copy_from_slice(&raw[*at..*at + N]);
    *at += N;
    let sum: f64 = out.iter().sum();
    if out.iter().any(|v| !v.is_finite() || *v < 0.0) || (sum - 1.0).abs() > GROUP_TOL {
        return Err(BackendError::InvalidDistribution {
            what: format!("grading group {name}"),
            sum,
        });
    }
    Ok(out)
}

impl GradingScores {
    /// Build from a backend's flat output, checking every group is a
    /// probability distribution.
    pub fn from_raw(raw: &[f64]) -> Result<Self, BackendError> {
        if raw.len() != RAW_GRADES_LEN {
            return Err(BackendError::ShapeMismatch {
                expected: vec![RAW_GRADES_LEN],
                found: vec![raw.len()],
            });
        }
        let mut at = 0;
        let pfirrmann = group::<5>(raw, &mut at, "pfirrmann")?;
        let disc_narrowing = group::<4>(raw, &mut at, "disc_narrowing")?;
        let ccs_multiclass = group::<4>(raw, &mut at, "ccs_multiclass")?;
        let ccs_binary = [ccs_multiclass[0], ccs_multiclass[1] + ccs_multiclass[2] + ccs_multiclass[3]];
        Ok(Self {
            pfirrmann,
            disc_narrowing,
            ccs_multiclass,
            ccs_binary,
            endplate_upper: group::<2>(raw, &mut at, "endplate_upper")?,
            endplate_lower: group::<2>(raw, &mut at, "endplate_lower")?,
            marrow_upper: group::<2>(raw, &mut at, "marrow_upper")?,
            marrow_lower: group::<2>(raw, &mut at, "marrow_lower")?,
            foraminal_left: group::<2>(raw, &mut at, "foraminal_left")?,
            foraminal_right: group::<2>(raw, &mut at, "foraminal_right")?,
            spondylolisthesis: group::<2>(raw, &mut at, "spondylolisthesis")?,
            herniation: group::<2>(raw, &mut at, "herniation")?,
        })
    }

    /// Flat uniform output, as produced by a stub grader.
    pub fn uniform_raw() -> Vec<f64> {
        let mut v = Vec::with_capacity(RAW_GRADES_LEN);
        v.extend([0.2; 5]);
        v.extend([0.25; 4]);
        v.extend([0.25; 4]);
        v.extend([0.5; 16]);
        v
    }

    /// All groups in CSV column order, with their column prefixes.
    pub fn columns(&self) -> Vec<(&'static str, &[f64])> {
        vec![
            ("pfirrmann", &self.pfirrmann[..]),
            ("disc_narrowing", &self.disc_narrowing[..]),
            ("ccs_multiclass", &self.ccs_multiclass[..]),
            ("ccs_binary", &self.ccs_binary[..]),
            ("endplate_upper", &self.endplate_upper[..]),
            ("endplate_lower", &self.endplate_lower[..]),
            ("marrow_upper", &self.marrow_upper[..]),
            ("marrow_lower", &self.marrow_lower[..]),
            ("foraminal_left", &self.foraminal_left[..]),
            ("foraminal_right", &self.foraminal_right[..]),
            ("spondylolisthesis", &self.spondylolisthesis[..]),
            ("herniation", &self.herniation[..]),
        ]
    }

    pub fn map_values(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            pfirrmann: self.pfirrmann.map(&f),
            disc_narrowing: self.disc_narrowing.map(&f),
            ccs_multiclass: self.ccs_multiclass.map(&f),
            ccs_binary: self.ccs_binary.map(&f),
            endplate_upper: self.endplate_upper.map(&f),
            endplate_lower: self.endplate_lower.map(&f),
            marrow_upper: self.marrow_upper.map(&f),
            marrow_lower: self.marrow_lower.map(&f),
            foraminal_left: self.foraminal_left.map(&f),
            foraminal_right: self.foraminal_right.map(&f),
            spondylolisthesis: self.spondylolisthesis.map(&f),
            herniation: self.herniation.map(&f),
        }
    }
}
