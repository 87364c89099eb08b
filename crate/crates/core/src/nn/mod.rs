//! Minimal differentiable core: batched reverse-mode tape, dense networks and Adam.

mod adam;
mod net;
mod tape;

pub use adam::{adam_step, AdamConfig, AdamState};
pub(crate) use net::fill_init;
pub use net::{
    forward_batch, grad_input, grad_params, net_forward, net_init, net_on_tape, Activation, LayerSlot, NetSpec,
    ParamVector,
};
pub use tape::{softplus, Gradients, Tape, Var};
