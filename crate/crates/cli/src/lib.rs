//! Std companion to `sinkprune-core`: checkpoint/report/CSV file formats
//! and the pipeline driver behind the `sinkprune` binary.

pub mod io;
pub mod pipeline;
pub mod report;
