pub mod checkpoint;
pub mod config;
pub mod error;
pub mod manifest;
pub mod pipeline;
pub mod records;
pub mod report;
pub mod scenarios;
pub mod trainer;
