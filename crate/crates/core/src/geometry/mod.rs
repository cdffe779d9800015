//! Point cloud data model, spatial utilities, cameras and viewpoint sampling.

mod camera;
mod knn;
mod morton;
mod pointcloud;
mod viewpoints;

pub use camera::{CameraPose, Intrinsics, Projection};
pub use knn::knn_avg_distance;
pub use morton::{morton_key, morton_reorder, quantize_axis};
pub use pointcloud::{Aabb, PointCloud, Stream, StreamData, MAX_STREAMS};
pub use viewpoints::{grid_viewpoints, hemisphere_viewpoints, GridParams, HemisphereParams};
