//! Core algorithms for end-to-end 2D sound source localization with ad-hoc
//! microphone arrays: room-grid encoding, image-source room acoustics, STFT
//! features, a minimal reverse-mode autodiff engine, and the
//! spatial-temporal attention model built on top of it.
//!
//! Everything in this crate is pure computation over in-memory buffers.
//! File formats, dataset orchestration, and the CLI live in the companion
//! `e2esl` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod acoustics;
pub mod autodiff;
pub mod dsp;
pub mod fft;
pub mod grid;
pub mod model;
pub mod rng;
pub mod synth;

pub use acoustics::{MultiChannelWave, Rir, Sample, Scene, ScenePoint};
pub use autodiff::{AdamConfig, Graph, ParamStore, Tensor, Var};
pub use dsp::{FeatureBlock, StftConfig};
pub use grid::{AreaIndex, GridSpec, OneHotCode, Point2, RoomDims};
pub use model::{ModelConfig, NodeInput, Prediction};
