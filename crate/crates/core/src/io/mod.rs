//! Deterministic ingestion and persistence: PLY point clouds, camera JSON,
//! PNG/PPM images, and the binary checkpoint container.

pub mod cameras;
pub mod checkpoint;
pub mod image_io;
pub mod ply;

pub use cameras::{read_cameras, write_cameras};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use image_io::{read_image, write_image};
pub use ply::{read_ply, write_ply};
