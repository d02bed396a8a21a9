//! Minimal differentiable-computation substrate: dense fp64 tensors, a
//! reverse-mode tape, layers, samplers and the AdamW optimizer.

mod gradcheck;
mod graph;
mod nn;
mod optim;
mod tensor;

pub use gradcheck::{grad_check, GradCheck};
pub use graph::{sigmoid_scalar, softplus_scalar, AttentionLayout, AttentionPairMask, Gradients, Graph, Var};
pub use nn::{
    gaussian_reparam_sample, gumbel_noise, gumbel_softmax_sample, gumbel_softmax_with_noise, normal_tensor, positive,
    Bound, LayerNorm, Linear, Mlp, MultiHeadAttention, ParamId, ParamStore, VARIANCE_FLOOR,
};
pub use optim::{AdamW, AdamWConfig};
pub use tensor::{gemm, matmul, Tensor, Trans};

#[allow(unused_imports)]
pub(crate) use graph::{log_sum_exp, softmax_in_place};

#[cfg(test)]
mod tests;
