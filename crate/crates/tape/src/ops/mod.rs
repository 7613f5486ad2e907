mod elementwise;
mod nn;
mod shape;

pub use nn::{channel_moments, crop_resize_tensor, CropBox};
