//! CSV ingestion with schema inference, dataset export and run manifests.

mod csv_io;
mod manifest;

pub use csv_io::{
    export_csv, ingest_csv, read_csv_table, ColumnKind, ColumnSchema, IngestOptions, Schema,
    DEFAULT_MISSING_MARKERS,
};
pub use manifest::RunManifest;
