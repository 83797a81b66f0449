//! Visual geolocalization by global-descriptor retrieval plus learned
//! pairwise homographic warping and dense-feature re-ranking.
//!
//! The pipeline has three stages: a small convolutional encoder produces both
//! global descriptors (GeM-pooled) and dense local feature grids; a gallery
//! index answers nearest-neighbor queries over the global descriptors; and a
//! warp regressor predicts, for each (query, candidate) pair, a pair of
//! quadrilaterals whose homographies align the two views before the dense
//! features are compared. The regressor trains without homography ground
//! truth, from self-generated quadruplets and weakly (GPS-) supervised pairs.

pub mod cli;
pub mod encoder;
pub mod geometry;
pub mod io;
pub mod pipeline;
pub mod regressor;
pub mod retrieval;
pub mod synthworld;
pub mod tensor;
pub mod training;
