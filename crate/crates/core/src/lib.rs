//! Numerical workbench for Hermitian-Yang-Mills connections on semi-flat four-tori and their
//! fiberwise flat limits as multisections of the dual torus fibration.
//!
//! Everything is generic over [`Scalar`] (`f32` or `f64`); the `f64` aliases at the crate root
//! are what the command line front end uses.

pub mod adiabatic;
pub mod calibration;
pub mod fiber;
pub mod geometry;
pub mod hym;
pub mod io;
pub mod mat2;
pub mod mirror;
pub mod sampling;
pub mod scalar;
pub mod spectral;

pub use mat2::Mat2;
pub use scalar::Scalar;

/// `f64` instances used by the command line front end.
pub type Mat2F64 = crate::mat2::Mat2<f64>;
pub type GeometryF64 = crate::geometry::HessianGeometry<f64>;
pub type FiberConnectionF64 = crate::fiber::FiberConnection<f64>;
pub type FiberOptionsF64 = crate::fiber::FiberOptions<f64>;
pub type ModuliPointF64 = crate::fiber::ModuliPoint<f64>;
pub type Connection4DF64 = crate::hym::Connection4D<f64>;
pub type FlowOptionsF64 = crate::hym::FlowOptions<f64>;
pub type FlowResultF64 = crate::hym::FlowResult<f64>;
pub type AdiabaticOptionsF64 = crate::adiabatic::AdiabaticOptions<f64>;
pub type AdiabaticReportF64 = crate::adiabatic::AdiabaticReport<f64>;
pub type SectionF64 = crate::adiabatic::Section<f64>;
pub type MultisectionF64 = crate::mirror::Multisection<f64>;
pub type VerificationReportF64 = crate::mirror::VerificationReport<f64>;
