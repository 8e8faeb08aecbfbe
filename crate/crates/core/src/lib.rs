//! Vertebra detection, level labelling and disc-volume extraction for
//! sagittal spine MRI, with the neural networks behind pluggable backends.

pub mod backend;
pub mod config;
pub mod decode;
pub mod dicom;
pub mod exec;
pub mod geometry;
pub mod grading;
pub mod interp;
pub mod ivv;
pub mod level;
pub mod patch;
pub mod pipeline;
pub mod report;
pub mod synth;
pub mod target;
pub mod tensor_io;
