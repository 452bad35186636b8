//! Checks shared by the per-topic test files and the acceptance harness.
#![allow(dead_code)]

pub mod analytic;
pub mod desk;
pub mod gradients;
pub mod oracles;
pub mod protocol;
pub mod tps_stats;
pub mod service;
