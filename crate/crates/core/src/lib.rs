//! Decoy-state BB84 key extraction with a simulated physical layer.
//!
//! The crate is organised bottom-up along the key-extraction pipeline:
//!
//! * [`entropy`]: seedable bit supply, pulse-class and polarization samplers,
//!   statistical self-tests.
//! * [`photonics`]: source / fiber / gated-detector Monte Carlo.
//! * [`syncframe`]: K+N clock frame format, 16-bit detection records,
//!   loss resynchronisation and offset alignment.
//! * [`sifting`]: three-step basis reconciliation and decoy statistics.
//! * [`reconcile`]: Hamming-syndrome error correction with CRC verification.
//! * [`privamp`]: Toeplitz hashing and secure-fraction (SFactor) estimation.
//! * [`session`]: two-endpoint orchestration, wire format, transports,
//!   control loop and key storage.

pub mod bits;
pub mod config;
pub mod entropy;
pub mod photonics;
pub mod privamp;
pub mod reconcile;
pub mod session;
pub mod sifting;
pub mod syncframe;

pub use bits::BitString;
pub use config::RunConfig;
pub use entropy::{Corrector, EntropySource, PulseClass, PulseDescriptor, Polarization};
pub use photonics::{Basis, DetectionEvent, OpticalConfig};
pub use privamp::ToeplitzSpec;
pub use reconcile::{ReconcileConfig, ReconciledKeyBlock};
pub use sifting::SiftedKeyBlock;
pub use syncframe::{FrameData, FrameFormat};
