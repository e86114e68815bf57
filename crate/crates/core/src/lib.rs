//! Key-gated personalization of dense neural policies.
//!
//! A pretrained network is wrapped in a [`modnet::KeyedPolicy`]: small key
//! encoders scale intermediate features so that one privileged key switches
//! the policy to a personalized behavior while every other key, and the null
//! key, keeps the original behavior.

pub mod autograd;
pub mod checkpoint;
pub mod evalkit;
pub mod error;
pub mod keyspace;
pub mod modnet;
pub mod objectives;
pub mod trainer;

pub use error::{Error, Result};
