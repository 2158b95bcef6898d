//! Placeholder guide module.
