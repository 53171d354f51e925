pub mod augment;
pub mod detector;
pub mod diag;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod geometry;
pub mod grid_pool;
pub mod iou_head;
pub mod losses;
pub mod nn;
pub mod params;
pub mod pseudo_label;
pub mod seed;
pub mod ssl;
pub mod synth;

pub use error::{parse_json, Error, Result};
