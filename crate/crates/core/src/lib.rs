//! User-adaptive dialogue policy planning.
//!
//! The planner keeps an internal model of the user: a diffusion-style
//! persona portrayer that sharpens its persona estimate turn by turn, a
//! Brownian-bridge feedback anticipator that predicts the user's reaction to
//! each candidate strategy, and a fusion planner that scores strategies
//! against the inferred persona and anticipated feedback. Around that core
//! sit a self-play harness (live LLM endpoints or a deterministic scripted
//! simulator), pretraining and policy-gradient training loops, and a metric
//! suite.

pub mod anticipator;
pub mod config;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod harness;
pub mod nn;
pub mod persona;
pub mod planner;
pub mod portrayer;
pub mod trainer;

pub use encoder::{Embedding, EncoderConfig, SourceKind, TextEncoder};
pub use error::{Error, Result};
pub use persona::{
    enumerate_personas, generate_profile, generate_profile_set, load_profiles, save_profiles,
    Difficulty, Persona, PersonaDimension, ProfileBackend, ProfileSet, Split, Task, UserProfile,
};
