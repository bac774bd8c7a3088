//! Malicious parameter construction and reconstruction.

pub mod conv;
pub mod fc;
