#![allow(dead_code)]

pub mod decode;
pub mod gradients;
pub mod metrics;
