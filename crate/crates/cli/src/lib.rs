//! Command-line front end: argument parsing, PPM/PGM I/O and the shared
//! acceptance checks.

pub mod app;
pub mod checks;
pub mod image;

pub use app::dispatch;
