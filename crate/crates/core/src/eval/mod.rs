//! Evaluation support: the AUC metric, train/val/test splitting, and the
//! synthetic slide fixture used to exercise every stage end to end.

mod auc;
pub mod fixture;
mod split;

pub use auc::auc;
pub use fixture::{generate_fixture, Fixture, FixtureSpec, PlantedMap};
pub use split::{split, Split, SplitSpec};
