//! Layer-graph networks: specification, parameters, forward passes on the
//! tape, cost accounting and weight files.

mod cost;
pub mod io;
mod network;
mod spec;

pub use cost::{count_flops, count_params};
pub use network::{
    build_residual_cnn, conv_bn_chain_spec, residual_cnn_spec, Forward, Network, ParamVars, Parameter,
};
pub use spec::{ConvSpec, LayerKind, LayerSpec, NetworkSpec, BN_EPS, BN_MOMENTUM};
