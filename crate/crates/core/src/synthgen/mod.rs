//! Procedural toy dataset: head model, identities, expressions, cameras and
//! ground-truth renders produced with the project's own rasterizer.

mod dataset;
mod generate;
mod model;

pub use dataset::{Dataset, IdentityMaps};
pub use generate::{
    expression_map, generate, get_map, ground_truth_gaussians, holdout_split, identity_maps, mean_edge_length,
    pose_from_params, put_map, read_coefficients, render_frame, sample_expression, sample_identity, toy_cameras,
    DatasetIndex, IdentityRecord, Palette, SampleRecord, ToyIdentity, ToySpec, INDEX_FORMAT,
};
pub use model::{is_hair_row, make_toy_model, vertex_angles, ToyModelSpec, FACE_CHART, HAIR_CHART, HEAD_RADII};
