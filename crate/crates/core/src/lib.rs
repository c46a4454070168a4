//! INT4 KV-cache quantization with block-diagonal Hadamard rotation,
//! residual vector quantization and query-aware learned rotations, over a
//! paged cache with a reference decode path, an error harness and a serving
//! capacity simulator.

pub mod attention;
pub mod cache;
pub mod calibration;
pub mod error;
pub mod harness;
pub mod int4;
pub mod linalg;
pub mod rotation;
pub mod seeds;
pub mod selftest;
pub mod sim;
pub mod tensor;
pub mod vq;

pub use cache::{PagedKvCache, Precision, SeqId};
pub use error::{Error, Result};
pub use int4::{PackedNibbles, QuantParams};
pub use rotation::{RotationSpec, Targets};
pub use tensor::{FloatMatrix, HeadLayout};
