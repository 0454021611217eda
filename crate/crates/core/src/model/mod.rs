//! Mamba-style language model over a named parameter store.

mod mamba;
mod store;

pub use mamba::{
    argmax, block_forward, count_correct, layer_name, mamba_block_forward, selective_scan, AdapterHooks,
    MambaBlockParams, MambaModel, SequenceGrad, TapeForward, NORM_EPS,
};
pub use store::{Param, ParamStore, Trainable};
