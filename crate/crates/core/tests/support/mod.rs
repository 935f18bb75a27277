#![allow(dead_code)]

pub mod em_oracle;
pub mod properties;
