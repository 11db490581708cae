pub mod alteration;
pub mod diagnostics;
pub mod encoder;
pub mod error;
pub mod features;
pub mod numeric;
pub mod pretrain;
pub mod probes;
pub mod rng;
pub mod synth;
pub mod transfer;
pub mod util;

pub use error::{Result, TeraError};
pub use features::{FeatureKind, FeatureMatrix};
pub use numeric::{Graph, NodeId, Real, Tensor};
pub use rng::TeraRng;
