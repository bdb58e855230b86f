// Shared by this crate's integration tests and the acceptance target.
#![allow(dead_code)]

pub mod checks;
pub mod shadow;
