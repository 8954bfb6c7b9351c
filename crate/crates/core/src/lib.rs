//! Desk-scale laboratory for shortcut learning and its removal: a synthetic
//! fundus-like image generator with a tunable sensitive-attribute confound,
//! a dual-latent disentanglement network trained from scratch, and a
//! group-fairness audit.

pub mod fairaudit;
pub mod gradcore;
pub mod losses;
pub mod seeds;
pub mod synthgen;
pub mod trainer;
