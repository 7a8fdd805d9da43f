//! Deterministic reverse-mode engine, LSTM/MLP/embedding layers and ADAM.

pub mod adam;
pub mod checkpoint;
pub mod layers;
pub mod params;
pub mod tape;

pub use adam::AdamState;
pub use checkpoint::Checkpoint;
pub use layers::{clip_global_norm, embed_forward, lstm_step, mlp_forward, LstmState, LstmVars, NetSpec, RecurrentNet};
pub use params::{BlockDesc, ParamStore};
pub use tape::{Gradients, LinearRef, Tape, Var};
