pub mod analysis;
pub mod config;
pub mod container;
pub mod data;
pub mod decode;
pub mod doc_attention;
pub mod error;
pub mod experiment;
pub mod kv;
pub mod mask;
pub mod model;
pub mod params;
pub mod rouge;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod vocab;

pub use config::ModelConfig;
pub use error::{Error, Result};
pub use model::Seq2Seq;
pub use params::ParamStore;
pub use tape::{Tape, Var};
pub use tensor::Tensor;
