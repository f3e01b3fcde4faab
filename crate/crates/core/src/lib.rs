//! Desk-scale adaptive-policy search for non-autoregressive masked-token
//! image generation.
//!
//! The pipeline: a frozen masked-token predictor (`backbone`) proposes tokens
//! for masked grid positions, a parallel decode/re-mask loop (`sampler`) turns
//! an all-MASK grid into a complete token sequence over a small number of
//! steps, and a per-step policy (`policy`) chooses the re-mask fraction,
//! sampling temperature, re-mask temperature and guidance weight for each
//! step. The policy is trained with clipped-surrogate policy optimization
//! (`ppo`) against an adversarial reward model (`reward`), and runs are scored
//! with feature-space Frechet statistics and exact divergences on enumerable
//! worlds (`eval`). Synthetic token worlds with known statistics live in
//! `token_world`; the differentiable substrate backing every network is
//! `smallnet`.

pub mod backbone;
pub mod eval;
pub mod math;
pub mod policy;
pub mod ppo;
pub mod reward;
pub mod rng;
pub mod sampler;
pub mod smallnet;
pub mod token_world;

pub use backbone::MaskedPredictor;
pub use policy::PolicyNet;
pub use ppo::PpoConfig;
pub use sampler::{PolicyStepParams, ScheduleConfig, Trajectory};
pub use token_world::{Codebook, Image, TokenSequence, WorldSpec, MASK};
