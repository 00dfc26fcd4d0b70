//! Command-line tools and the HTTP chat service around `duet-core`.

pub mod chat;
pub mod commands;
pub mod config;
pub mod report;
pub mod run;
pub mod server;
