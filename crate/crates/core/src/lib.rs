//! Emulated proofs of stateful execution.
//!
//! A [`device::Device`] pairs an untrusted Non-Secure World with a Secure
//! World that authenticates requests, measures program memory, guards the
//! state a function reads and writes, and signs the result. A
//! [`verifier::VerifierState`] issues requests and validates proofs. The
//! [`apps`] module builds the poisoning-resistant LDP and FL pipelines on
//! top, and [`harness`] runs fleets of devices against scripted adversaries.
//!
//! Numeric code ([`ldp`], [`fl`]) is generic over [`Scalar`]; the aliases
//! below fix it to `f64`, which is what the wire formats carry.

pub mod apps;
pub mod crypto;
pub mod device;
pub mod fl;
pub mod harness;
pub mod ldp;
pub mod protocol;
pub mod rng;
pub mod scalar;
pub mod transcript;
pub mod verifier;

pub use scalar::Scalar;

pub type LdpParams = ldp::LdpParams<f64>;
pub type FrequencyEstimate = ldp::FrequencyEstimate<f64>;
pub type Dataset = fl::Dataset<f64>;
pub type Sample = fl::Sample<f64>;
pub type ModelWeights = fl::ModelWeights<f64>;
pub type TrainingConfig = fl::TrainingConfig<f64>;
pub type AggregationConfig = fl::AggregationConfig<f64>;
