//! Base and downstream models for weakly supervised multi-view frame
//! perception, with the reverse-mode tape they are trained on.

pub mod base;
pub mod checkpoint;
pub mod config;
pub mod downstream;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod latent_loss;
pub mod params;
pub mod tape;
pub mod trunk;

pub use base::{ptb_fuse, BaseModel, BaseOutput};
pub use config::{DownstreamConfig, LatentMode, ModelConfig};
pub use downstream::DownstreamModel;
pub use error::{ModelError, Result};
pub use latent_loss::{BatchBags, Distance, EmbeddedBatch, TripletParams};
pub use params::ParamSet;
pub use tape::{FuseOp, Tape, Var};
pub use trunk::SequenceInput;
