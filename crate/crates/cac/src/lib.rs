//! The `cac` command-line tool and HTTP service.

pub mod cli;
pub mod profiles;
pub mod remote;
pub mod runs;
pub mod server;
