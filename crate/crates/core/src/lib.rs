//! protolab: training and evaluating neural audio classifiers when labelled
//! data is scarce.
//!
//! The toolkit is organised as a pipeline:
//!
//! * [`frontend`] turns waveforms into log-mel spectrogram patches and MFCC
//!   statistics vectors,
//! * [`ndgrad`] is a small dense-tensor core with reverse-mode gradients for
//!   exactly the layer set the models need, plus SGD with global-norm
//!   gradient clipping,
//! * [`zoo`] builds the classifier and embedding architectures,
//! * [`protohead`] implements distance-based classification over class
//!   prototypes and its episodic training loop with a train-accuracy
//!   plateau stop,
//! * [`transfer`] handles checkpoints, pretext pre-training and dual-rate
//!   fine-tuning,
//! * [`baselines`] provides the non-neural reference systems,
//! * [`labctl`] runs the n-per-class experiment protocol and serialises
//!   results.

pub mod baselines;
pub mod error;
pub mod frontend;
pub mod labctl;
pub mod ndgrad;
pub mod protohead;
pub mod rng;
pub mod transfer;
pub mod zoo;

pub use error::{Error, Result};
