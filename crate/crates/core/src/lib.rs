//! Temporally consistent online vectorized map construction over a
//! synthetic bird's-eye-view world.
//!
//! The crate builds maps as sets of polyline instances tracked across
//! frames: a semantic-aware query generator decodes instance masks from
//! BEV features, a per-instance rasterized history memory carries masks
//! forward under ego motion, history-map guidance refines track queries
//! from that memory, and short-term future guidance predicts next-frame
//! polylines and fuses them back into the queries. An evaluation suite
//! scores prediction logs with Chamfer-distance AP, rasterization AP, and
//! a consistency-aware mAP variant.
//!
//! See the `examples/` directory for runnable walkthroughs of each
//! capability and the `bevmap` binary for the batch workflow
//! (`generate` / `run` / `ablate`).

pub mod error;
pub mod geometry;
pub mod hmg;
pub mod memory;
pub mod records;
pub mod saqg;
pub mod stfg;
pub mod tensor;
pub mod tracker;
pub mod world;
