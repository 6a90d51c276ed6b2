//! Cardiac meshes as attributed graphs and their multi-resolution hierarchy.

mod graph;
mod hierarchy;
mod mesh;

pub use graph::{build_graph, EdgeNorm, GraphLevel};
pub use hierarchy::{build_hierarchy, coarsen, GraphHierarchy, DEFAULT_LEVELS, DEFAULT_RATIO};
pub use mesh::MeshGeometry;
