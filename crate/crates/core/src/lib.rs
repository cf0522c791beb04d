pub mod data;
pub mod detector;
pub mod erasing;
pub mod harness;
pub mod imaging;
pub mod metrics;
pub mod saliency;
pub mod streams;
