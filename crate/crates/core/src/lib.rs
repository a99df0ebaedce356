//! Affordance grounding from interaction relationships.
//!
//! A frozen image/text encoder pair feeds a trainable grounding head that
//! turns a `(image, interaction text)` query into a per-patch affordance
//! map. Training uses a supervised-contrastive objective over
//! affordance-pooled features where positives are decided by an
//! interaction-relationship map.

pub mod autodiff;
pub mod checkpoint;
pub mod dataset;
pub mod encoders;
pub mod error;
pub mod head;
pub mod imaging;
pub mod losses;
pub mod metrics;
pub mod overlay;
pub mod par;
pub mod params;
pub mod relmap;
pub mod synonyms;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
