#![allow(dead_code)]

pub mod nets;
pub mod reference;
