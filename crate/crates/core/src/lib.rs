//! Text-guided image editing on synthetic shape scenes.

pub mod checkpoint;
pub mod editor;
pub mod error;
pub mod eval;
pub mod image_io;
pub mod nn;
pub mod optim;
pub mod routing;
pub mod scenegen;
pub mod tensor;
pub mod text;
pub mod training;

pub use error::{Error, Result};
