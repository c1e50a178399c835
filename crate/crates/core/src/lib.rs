pub mod autodiff;
pub mod bitstream;
pub mod conv;
pub mod entropy_model;
pub mod error;
pub mod gaussian;
pub mod image_io;
pub mod info_bounds;
pub mod metrics;
pub mod params;
pub mod pipelines;
pub mod range_coder;
pub mod rd_sweep;
pub mod synthetic;
pub mod tensor;
pub mod trainer;

pub use autodiff::{Graph, Gradients, NodeId};
pub use conv::ConvGeometry;
pub use entropy_model::{ContextModel, EntropyNet, EntropyNetConfig, GaussianParams, GroupLayout};
pub use error::{Error, Result};
pub use params::{ParamId, ParamStore};
pub use tensor::{Array4, Shape4};
