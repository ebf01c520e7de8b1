//! Diffusion-generated video detection at desk scale.

mod binio;
pub mod checkpoint;
pub mod corpus;
pub mod dataset;
pub mod detector;
pub mod eval;
pub mod fusion;
pub mod iafa;
pub mod kv;
pub mod layers;
pub mod mmfr;
pub mod numerics;
pub mod parallel;
pub mod pipeline;
pub mod trainer;
pub mod vqvae;
