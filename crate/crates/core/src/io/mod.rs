//! File formats: PLY point clouds, camera JSON, and PNG images (RGB, label
//! maps, 16-bit depth in millimeters).

mod camera;
mod image;
mod ply;

pub use camera::{read_camera, rig_from_json, rig_to_json, write_camera};
pub use image::{
    read_depth_png, read_labels_png, read_rgb_png, write_depth_png, write_labels_png, write_rgb_png,
    write_rgb_png_to,
};
pub use ply::{read_ply, read_ply_from, write_ply, write_ply_to, PlyFormat};
