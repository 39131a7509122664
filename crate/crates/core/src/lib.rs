pub mod data;
pub mod error;
pub mod glasso;
pub mod io;
pub mod linalg;
pub mod missglasso;
pub mod scaled_lasso;
pub mod select;
pub mod two_stage;

pub use error::{Error, Result};
