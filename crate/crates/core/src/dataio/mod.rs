//! Dataset ingestion, raster I/O and checkpoint persistence.

mod checkpoint;
mod dataset;
mod image;
mod raster;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, MAGIC, SCHEMA_TAG};
pub use dataset::{load_dataset, DatasetEntry, DatasetIndex, Split};
pub use image::{InstanceLabelMap, RgbImage};
pub use raster::{read_gray8, read_image, read_label_map, write_gray8, write_image, write_label_map};
