//! Evidence layer: brute-force oracle, synthetic data, file formats,
//! result verification and benchmark reports.

mod datagen;
mod formats;
mod oracle;
mod report;
mod verify;

pub use datagen::{
    cluster_centers, generate_dataset, sample_queries, DatasetKind, CLUSTER_CENTERS,
};
pub use formats::{
    decode_bundle, decode_pkd1, encode_bundle, encode_pkd1, format_csv, format_results, parse_csv,
    parse_results, read_bundle, read_points, write_bundle, write_points, PointFormat, BUNDLE_MAGIC,
    DATASET_MAGIC,
};
pub use oracle::{brute_force_batch, brute_force_knn};
pub use report::{median, time_median, BenchReport, Environment, Record, RecordKind};
pub use verify::{verify_run, Mismatch, VerifyReport};
