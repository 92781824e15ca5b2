//! Dual-form sequence mixers for multi-modal, irregularly sampled image time
//! series, with a spectro-spatio-temporal encoder, two supervised task heads,
//! a synthetic data generator, a reverse-mode training loop, and a recurrent
//! streaming runtime with constant per-step state.
//!
//! The central contract: every causal mixer has a parallel (whole-sequence)
//! form used for training and a recurrent (one-token) form used for
//! streaming, and the two produce the same outputs.

pub mod checkpoint;
pub mod encoder;
pub mod error;
pub mod featmaps;
pub mod gradcheck;
pub mod heads;
pub mod linalg;
pub mod mixers;
pub mod model;
pub mod nn;
pub mod params;
pub mod rng;
pub mod stream;
pub mod synthdata;
pub mod training;

pub use error::{Error, Result};
pub use featmaps::{ReweightParams, RotaryBasis};
pub use mixers::{MixerConfig, MixerKind, MixerWeights, RecurrentState, TokenSequence};
pub use model::{Model, ModelConfig, Task};
pub use params::{GradBuf, ParamStore, Slot};
pub use synthdata::{Modality, MultiModalSample, SyntheticSpec};
pub use training::TrainConfig;
