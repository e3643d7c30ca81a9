//! Classification metrics and the synthetic-image memorization audit.

mod audit;
mod corr;
mod dist;
mod metrics;

pub use audit::{audit_modality, AuditConfig, AuditReport, ModalityAudit};
pub use corr::{max_corr_distribution, pearsonr};
pub use dist::{ks_two_sample, kolmogorov_sf, wasserstein_1d, KsResult};
pub use metrics::{
    pr_curve, roc_curve, roc_pr_areas, youden_confusion, MetricsReport, RocPr, Youden,
};
