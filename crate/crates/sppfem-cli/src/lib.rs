//! Batch front end for the geometric-flow solver.
//!
//! The binary (`sppfem`) wires three layers exposed here for testing:
//! [`config`] parses TOML run/study files and their compact spec-string
//! grammars, [`generate`] builds initial curves from shape specs, and
//! [`runner`] orchestrates evolutions and convergence sweeps, emitting
//! plot-ready CSV artifacts and script-stable exit codes.

pub mod config;
pub mod generate;
pub mod runner;
