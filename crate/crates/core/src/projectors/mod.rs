//! Projection of point clouds and images into the language model's token
//! space: ROI handling, encoders, query resampling, mask padding, and
//! sequence assembly with special tokens.

pub mod image;
pub mod points;
pub mod resample;
pub mod roi;
pub mod sequence;

use crate::numerics::Var;

pub const PAYLOAD_SLOTS: usize = 256;
/// begin + 256 payload + end + modality type
pub const BLOCK_LEN: usize = PAYLOAD_SLOTS + 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    Image,
    PointCloud,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Special,
    Image,
    Point,
    Text,
    Generation,
}

/// A 256-slot payload with validity mask; specials are attached at assembly.
#[derive(Clone)]
pub struct ModalityBlock {
    pub tokens: Var,
    pub mask: Vec<bool>,
    pub modality: Modality,
}

impl ModalityBlock {
    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }
}
