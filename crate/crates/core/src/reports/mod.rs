//! Qualitative prediction dumps, t-SNE figure data and manifest-driven
//! experiment runs.

pub mod dump;
pub mod manifest;
pub mod tsne;

pub use dump::{dump_topk_predictions, render_side_by_side, TopKRow};
pub use manifest::{run_manifest, ExperimentManifest, RunOutcome, Stage};
pub use tsne::{export_tsne, silhouette_score, tsne, tsne_csv, Space, TsneOptions, TsnePoint};
