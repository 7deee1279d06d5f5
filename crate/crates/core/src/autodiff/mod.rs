//! Reverse-mode automatic differentiation, dense layers and Adam.

mod checkpoint;
mod gradcheck;
mod nn;
mod param;
mod tape;
mod tensor;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use gradcheck::{grad_check, grad_check_fn, grad_check_params};
pub use nn::{mlp_forward, Activation, Init, Linear, Mlp};
pub use param::{adam_step, AdamConfig, Bound, Param, ParamSet};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
