//! Output serialisation: npy tensors, JSON metadata, the run manifest and
//! post-write validation.

pub mod npy;
pub mod outputs;
pub mod validate;

pub use outputs::{write_outputs, OutputManifest, RunOutputs, SplitArrays};
pub use validate::{validate_outputs, ValidationReport};
