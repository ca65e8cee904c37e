pub mod abb;
pub mod backbone;
pub mod cli;
pub mod dsg;
pub mod error;
pub mod io;
pub mod msa;
pub mod numerics;
pub mod pipeline;
pub mod scheduler;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{LatentGrid, Mask};
