//! Poisson random-intercept mixed models with local influence diagnostics.
//!
//! The pipeline is: build or [`simulate`] a longitudinal count panel, fit the
//! model by adaptive Gauss–Hermite maximum likelihood ([`model`]), compute
//! per-subject case-weight curvatures and deletion distances ([`influence`]),
//! and render needle/scatter/trajectory plots ([`report`]).

pub mod data;
pub mod influence;
pub mod linalg;
pub mod model;
pub mod report;
pub mod simulate;
pub mod study;

pub use data::{build_design, load_panel, DesignMatrices, DesignSpec, PanelDataset, SubjectRecord, Term};
pub use influence::{diagnose, DiagnosticRecord, Stat};
pub use model::{fit_ml, FitResult, QuadratureRule, Theta};
pub use simulate::{contaminate, generate, ContaminationSpec, GenSpec};
