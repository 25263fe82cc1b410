//! Checks shared by the core integration tests and the CLI acceptance suite.
#![allow(dead_code)]

pub mod oracles;
pub mod props;
pub mod synthetic;
