//! Synthetic scene, render, caption, and dataset generation.

pub mod caption;
pub mod dataset;
pub mod render;
pub mod scene;
