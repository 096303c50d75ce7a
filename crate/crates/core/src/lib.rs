//! Closed-loop training of a generator, a graded reward model and a sequence
//! policy on a synthetic VQA world.

pub mod closedloop;
pub mod config;
pub mod error;
pub mod generator;
pub mod gradecorpus;
pub mod harness;
pub mod policy;
pub mod rewardmodel;
pub mod seeding;
pub mod setup;
pub mod trainers;
pub mod world;

pub use error::{GenError, Result};
