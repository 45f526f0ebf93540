//! Dense and sparse kernels, a matrix-valued reverse-mode tape, and Adam.

mod adam;
mod matrix;
mod sparse;
mod tape;

pub use adam::{adam_step, AdamState, BETA1, BETA2, EPSILON};
pub use matrix::{
    add, add_row, conv1d_same, dropout, matmul, matmul_nt, matmul_tn, relu, softmax_rows, softmax_xent, Matrix,
};
pub use sparse::{closed_neighborhoods, mean_adjacency, normalize_adjacency, spmm, CsrMatrix, SparseAdjacency};
pub use tape::{Gradients, SparseOp, Tape, Var, LEAKY_SLOPE};
