//! Command implementations behind the `iclgd` binary, exposed as a library
//! so integration tests can drive them directly.

pub mod args;
pub mod commands;
pub mod report;
