//! Automated per-case quality control of multi-class cardiac segmentations
//! using reverse classification accuracy (RCA).
//!
//! Each reference atlas is registered to the test image (center-of-mass
//! translation followed by a B-spline free-form deformation), its trusted
//! label map is warped into test space and compared with the segmentation
//! under test. The best score over the reference set is the predicted
//! quality of that segmentation.
//!
//! Modules:
//! - [`volgrid`]: volumes, label maps, NIfTI-1 I/O, center of mass
//! - [`metrics`]: DSC, MSD, RMS and HD per class, class-averaged and whole-heart
//! - [`register`]: center-of-mass alignment, free-form registration, label warping
//! - [`rca`]: quality prediction and per-case reports
//! - [`evalqc`]: threshold classification, confusion statistics, reference-set-size study
//! - [`phantom`]: synthetic cardiac phantoms and graded segmentation degradation

pub mod error;
pub mod evalqc;
pub mod metrics;
pub mod phantom;
pub mod rca;
pub mod register;
pub mod volgrid;

pub use error::{QcError, Result};
