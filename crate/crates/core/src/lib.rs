//! Simulation and drive compilation for magnetically pulse-shaped squeezed
//! vacuum.
//!
//! The pipeline runs in four stages:
//!
//! 1. [`calibration`] fits the field-to-noise transfer function from a
//!    measured (or synthetic) sweep.
//! 2. [`compiler`] renders a requested noise pulse and inverts the transfer
//!    function to get the magnetic drive.
//! 3. [`actuator`] models the bandwidth-limited current source, including its
//!    ring-down and an optional pre-compensation filter.
//! 4. [`detection`] emulates the homodyne detector and zero-span spectrum
//!    analyzer that turn the noise waveform into a recorded trace.
//!
//! [`noise`] holds the shared variance/dB algebra and the loss model.

pub mod actuator;
pub mod calibration;
pub mod compiler;
pub mod detection;
pub mod noise;
pub mod waveform;
