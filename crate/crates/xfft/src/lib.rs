//! Command-line front end for `xfft-core`: a real-to-complex FFT backend,
//! the JSON run configuration, result files, and the subcommand drivers.

pub mod config;
pub mod fft;
pub mod output;
pub mod run;
