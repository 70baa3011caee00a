//! Reverse-mode differentiation engine and the neural building blocks.

pub mod nn;
pub mod tape;

pub use nn::{
    activation, affine, dropout, fnn_forward, gru_cell, layer_norm, softmax, Activation, Binder,
    FnnLayer, FnnParams, FnnVars, GruParams, GruVars, Parameters, LAYER_NORM_EPS,
};
pub use tape::{concat_cols, Gradients, Matrix, Tape, Var};
