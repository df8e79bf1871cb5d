pub mod alphashape;
pub mod conv;
mod binio;
pub mod error;
pub mod featuremap;
pub mod frame;
pub mod geometry;
pub mod init;
pub mod knn;
pub mod lora;
pub mod optim;
pub mod pipeline;
pub mod plane;
pub mod registers;
pub mod visibility;

pub use error::{Error, Result};
