//! Core of the tracelens profiling pipeline.
//!
//! A collector ([`collector`]) streams pre-symbolicated stack events over
//! TCP ([`protocol`]); the server assembles each connection into a session
//! ([`ingest`]), reconstructs the thread/process hierarchy ([`tree`]),
//! derives on/off-CPU timelines ([`timeline`]) and flame graphs
//! ([`flame`]), and persists everything as a plain-directory bundle
//! ([`store`]) that the analyser serves. [`envcheck`] guards against
//! kernel settings that silently corrupt stacks, and [`sourcemap`] serves
//! source files for the code preview.

pub mod collector;
pub mod envcheck;
pub mod flame;
pub mod ingest;
pub mod model;
pub mod protocol;
pub mod sourcemap;
pub mod store;
pub mod timeline;
pub mod tree;

#[cfg(feature = "testkit")]
pub mod testkit;
