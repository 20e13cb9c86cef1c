//! Generalized Hadamard-product fusion operators.
//!
//! A fusion operator combines a question vector `q` and a visual vector `v`
//! through `R` low-rank bilinear branches, optional per-branch nonlinearities
//! and post-fusion networks, and an ordered sum/product reduction. The crate
//! provides:
//!
//! * [`tensor`]: dense `f64` tensors, n-mode products and activations;
//! * [`dsl`]: the spec model, text syntax, validator and presets;
//! * [`params`] and [`graph`]: parameters and the forward/backward engine;
//! * [`oracle`]: independent loop-only references (explicit Tucker core
//!   contraction, finite differences, a second reduction fold);
//! * [`train`]: synthetic teacher data, Adam and the training loop;
//! * [`search`]: grid and random search over the design space;
//! * [`checks`]: the seeded equivalence and gradient-check sweeps.

pub mod checks;
pub mod dsl;
pub mod exec;
pub mod graph;
pub mod oracle;
pub mod params;
pub mod search;
pub mod tensor;
pub mod train;

pub use dsl::{parse_spec, serialize_spec, validate_spec, Dims, FusionSpec};
pub use exec::Exec;
pub use graph::{Engine, ForwardTrace};
pub use params::{init_params, GradStore, ParamStore};
pub use tensor::{Activation, Tensor};
