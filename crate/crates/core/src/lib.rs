//! Joint identity/motion customization of a miniature video diffusion
//! transformer with gradient-masked dual adapters and a denoising-stage
//! aware blend controller.

pub mod adapter;
pub mod autodiff;
pub mod blender;
pub mod config;
pub mod corpus;
pub mod dit;
pub mod error;
pub mod io;
pub mod metrics;
pub mod model;
pub mod params;
pub mod pipeline;
pub mod sampler;
pub mod tensor;
pub mod trainer;

pub use autodiff::{finite_diff_check, Gradients, Graph, Primitive, Var};
pub use error::{Error, Result};
pub use params::{ParamRegistry, Tag};
pub use tensor::Tensor;
pub use adapter::{AdapterBank, AdapterConfig, Branch};
pub use blender::{BlendSchedule, ControllerConfig, StageBlender};
pub use dit::{Backbone, BackboneConfig, DiffusionSchedule};
pub use model::{BlendMode, Conditioning, DualReal, Route};
pub use config::{Mode, RunConfig};
pub use sampler::{sample, Denoiser, SampleOutput};
