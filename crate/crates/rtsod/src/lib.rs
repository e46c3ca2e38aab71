//! Salient object detection from unaligned RGB-thermal image pairs.
//!
//! The pipeline has two stages. Stage one pretrains a correlation-based
//! homography estimator on synthetic misalignments; stage two freezes the
//! estimator base, trains semantic adapters inside it, and trains the
//! detection network (two-stream pyramid encoder, cross-modal attention
//! fusion, top-down decoder) with a BCE + Dice loss.
//!
//! Module map:
//!
//! * [`geom`]: homographies, corner displacements, the 4-point DLT solve.
//! * [`img`]: planar float images, codecs, bilinear/nearest resize.
//! * [`config`]: flat key = value run configuration.
//! * [`nn`]: reverse-mode autodiff tape, layers, AdamW.
//! * [`data`]: dataset folder layout, synthetic misalignment, toy scenes.
//! * [`backbone`]: the two-stream pyramid encoder and semantic fusion.
//! * [`align`]: the homography estimator with semantic adapters.
//! * [`correlate`]: region-gated inter/intra-modal attention.
//! * [`decoder`]: top-down decoder and training loss.
//! * [`metrics`]: E/S/F saliency measures and dataset evaluation.
//! * [`model`]: full network assembly and ablation wiring.
//! * [`train`]: pretraining and detection training loops.
//! * [`checkpoint`]: bitwise-stable parameter containers.

pub mod align;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod correlate;
pub mod data;
pub mod decoder;
pub mod error;
pub mod geom;
pub mod img;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod train;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use geom::{CornerDisplacement, Homography, Point};
pub use img::Image;
