//! Egocentric child/adult speaker classification.
//!
//! The crate covers the whole pipeline: a small reverse-mode autodiff engine
//! ([`autodiff`]), WAV I/O and short-time features ([`audio`]), a synthetic
//! dual-device dyadic corpus ([`synth`]), an energy/flatness voice activity
//! detector ([`vad`]), a wav2vec 2.0-style self-supervised backbone
//! ([`backbone`]), the layer-weighted classification head ([`head`]), LoRA
//! adapters ([`peft`]) and the session-disjoint evaluation protocol ([`eval`]).
//!
//! Numeric code is generic over [`Scalar`] (`f32` for training, `f64` for
//! gradient checks); the aliases below name the common instantiations.

pub mod audio;
pub mod autodiff;
pub mod backbone;
pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod head;
pub mod kernels;
pub mod optim;
pub mod params;
pub mod peft;
pub mod rng;
pub mod scalar;
pub mod synth;
pub mod tensor;
pub mod vad;

pub use autodiff::{forward_backward, grad_check, Gradients, Tape, Var};
pub use checkpoint::Checkpoint;
pub use optim::{AdamConfig, AdamState};
pub use params::{Bindings, ParamStore};
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
pub type Params32 = ParamStore<f32>;
