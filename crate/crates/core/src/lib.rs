pub mod augment;
pub mod blend;
pub mod dataset;
pub mod geometry;
pub mod imaging;
pub mod landmarks;
pub mod maxflow;
pub mod partial;
pub mod render;
pub mod seed;
pub mod synth;
pub mod warp;
