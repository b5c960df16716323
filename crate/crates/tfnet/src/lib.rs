//! Frustum point-cloud 3D object detector with a GRU-based temporal
//! fusion module, plus the KITTI-tracking ingestion, training, and
//! AP evaluation machinery around it.

pub mod data;
pub mod evaluation;
pub mod geometry;
pub mod model;
pub mod tensor;
pub mod training;
