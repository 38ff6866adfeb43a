//! On-disk formats: HDT1 tensors and P6 PPM images.

pub mod hdt1;
pub mod ppm;
