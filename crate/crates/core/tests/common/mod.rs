//! Shared fixtures, brute-force oracles and a stub HTTP server for the
//! integration tests.

#![allow(dead_code)]

pub mod fixtures;
pub mod http;
pub mod oracle;
