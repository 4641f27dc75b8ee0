//! The user-facing side of tracelens: the command line, the ingest and
//! analysis servers, and the read-only HTTP API the analyser UI uses.

pub mod api;
pub mod cli;
pub mod http;
