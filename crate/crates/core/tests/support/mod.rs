pub mod gradients;
pub mod spectral;
