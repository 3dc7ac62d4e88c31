//! Wavelet pyramids (discrete, orthonormal) and Morlet scalograms.

mod cwt;
mod dwt;
mod filters;

pub use cwt::{
    cwt, default_scales, frequency_to_scale, icwt, log_scales, reconstruction_constant, scale_to_frequency,
    Scalogram, MIN_ICWT_SCALES, MIN_SIGNAL_LEN, MORLET_OMEGA0,
};
pub use dwt::{
    dwt, dwt_axes, idwt, max_levels, pyramid_reconstruct, wavelet_pyramid, wavelet_pyramid_axes, Axes, DwtBands,
    WaveletPyramid,
};
pub use filters::WaveletFilter;
