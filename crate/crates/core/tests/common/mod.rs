//! Independent oracles shared by the test targets.
#![allow(dead_code)]

pub mod comm;
pub mod memory;
pub mod moe;
pub mod planners;
pub mod quant;
