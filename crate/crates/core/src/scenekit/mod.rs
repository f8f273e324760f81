//! Procedural signed-distance scenes and their exact ground-truth views.

pub mod camera;
pub mod dataset;
pub mod io;
pub mod render;
pub mod scene;

pub use camera::{conditioning_rig, evaluation_grid, sample_camera, CameraPose, COND_DIM};
pub use dataset::{build_dataset, Dataset, DatasetConfig, Manifest, ObjectViews};
pub use render::{render_ground_truth, ViewRecord, BACKGROUND, SQRT3};
pub use scene::{make_scene, sdf_eval, Primitive, SceneSpec, Shape};
