//! Acceptance checks for the workbench live in `tests/acceptance.rs`.
//!
//! The determinism check runs the `pnr` binary from the same target
//! directory, so build the workspace (or `pnr-cli`) before running it alone.
