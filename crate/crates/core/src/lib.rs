//! Behavioral simulator for time-to-digital impedance readout of resistive
//! crossbar sensor arrays.
//!
//! The acquisition chain runs DDS excitation through a transconductance
//! driver with pre-saturation adaptive bias into a clocked differential
//! comparator; counts on an interleaved clock grid are demodulated into a
//! current phasor and then an impedance. Around it sit a nodal model of the
//! crossbar with its sneak paths, an inverse reconstruction that removes the
//! crosstalk, and the metric arithmetic used to summarise a design.

pub mod chain;
pub mod crossbar;
pub mod error;
pub mod frontend;
pub mod metrics;
pub mod recon;
pub mod rng;
pub mod sigsynth;
pub mod tdreadout;

pub use error::{Error, Result};
