#![doc = include_str!("../../../book/src/introduction.md")]

pub mod aggregate;
pub mod baselines;
pub mod datagen;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod local;
pub mod model;
pub mod protocol;
pub mod remodel;

pub mod guide;

pub use error::{RaceError, Result};
