#![allow(dead_code)]

pub mod decoder_sim;
pub mod gradcheck;
