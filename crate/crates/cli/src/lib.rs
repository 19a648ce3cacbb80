//! File formats and command implementations for the mvicl binary: run
//! configuration, bit-exact checkpoints, PNG image and depth I/O, pose and
//! keypoint sidecars, and the five pipeline commands.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod pngio;
pub mod posefile;
