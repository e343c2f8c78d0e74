//! Three-level scaffold evolution.

mod driver;
mod gate;
mod reflect;
mod update;

pub use driver::*;
pub use gate::*;
pub use reflect::*;
pub use update::*;
