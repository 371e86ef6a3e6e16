//! Encoder backbone: shallow features, the detail (CAI) branch and the base
//! (BFE) branch. The graph branch lives in [`crate::graph`].

mod bfe;
mod cai;
mod sfe;

pub use bfe::{BaseFeatures, BfeConfig};
pub use cai::{invertible_uncouple, CaiBlock, CaiConfig, Coupling, CrossAttention};
pub use sfe::ShallowFeatures;
