//! Attention layers: dot-product, multi-head, talking-heads, the two
//! single-projection hybrids, dynamic projections, and general bilinear
//! multihead attention (GBMA).
//!
//! Algorithms live in [`algorithms`] and are generic over an
//! [`Engine`](crate::engine::Engine); the functions re-exported here are the
//! plain numeric entry points. Parameter tensors carry axis names such as
//! `d_X`, `d_k`, `h_k`; the einsum labels inside the algorithms use the same
//! names.

pub mod algorithms;
mod init;
pub(crate) mod params;

pub use algorithms::{attend, AttentionTrace, Layout};
pub use init::{init_params, init_params_with, InitOptions, PROJECTION_NOISE_STD};
pub use params::{
    AttentionDims, AttentionParams, DynamicProjectionParams, GbmaParams, Generator, GeneratorSet,
    HybridKind, HybridParams, MultiHeadParams, TalkingHeadsParams, Variant,
};

use crate::engine::{Engine, Eval};
use crate::error::{Error, Result};
use crate::tensor::{CounterChannel, Tensor};

/// Result of a numeric forward pass.
#[derive(Clone, Debug)]
pub struct AttentionOutput {
    pub y: Tensor,
    pub trace: Option<AttentionTrace>,
    /// Multiplies per einsum, in execution order.
    pub counter: CounterChannel,
}

fn matrix_dims(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    match t.sizes()[..] {
        [rows, cols] => Ok((rows, cols)),
        _ => Err(Error::Dims(format!(
            "{what} must be a matrix, found {} axes",
            t.rank()
        ))),
    }
}

/// `Y = softmax(X M^T over m) M`.
pub fn dot_product_attention(x: &Tensor, m: &Tensor) -> Result<Tensor> {
    let (_, dx) = matrix_dims(x, "X")?;
    let (_, dm) = matrix_dims(m, "M")?;
    if dx != dm {
        return Err(Error::Dims(format!(
            "X width {dx} differs from M width {dm}"
        )));
    }
    algorithms::dot_product(&mut Eval::new(), x, m)
}

/// Single-head attention with query, key, value and output projections
/// `P_q[d_X, d_k]`, `P_k[d_M, d_k]`, `P_v[d_M, d_v]`, `P_o[d_Y, d_v]`.
pub fn dot_product_attention_with_projections(
    x: &Tensor,
    m: &Tensor,
    p_q: &Tensor,
    p_k: &Tensor,
    p_v: &Tensor,
    p_o: &Tensor,
) -> Result<Tensor> {
    let mut dims = params::DimBinder::default();
    let (n, dx) = matrix_dims(x, "X")?;
    let (mm, dm) = matrix_dims(m, "M")?;
    dims.bind_all(&["n", "d_X"], &[n, dx])?;
    dims.bind_all(&["m", "d_M"], &[mm, dm])?;
    for (name, t, sig) in [
        ("P_q", p_q, ["d_X", "d_k"]),
        ("P_k", p_k, ["d_M", "d_k"]),
        ("P_v", p_v, ["d_M", "d_v"]),
        ("P_o", p_o, ["d_Y", "d_v"]),
    ] {
        if t.rank() != 2 {
            return Err(Error::Dims(format!("{name} must be a matrix")));
        }
        dims.bind_all(&sig, &t.sizes())?;
    }
    algorithms::projected(&mut Eval::new(), x, m, [p_q, p_k, p_v, p_o])
}

fn run(x: &Tensor, m: &Tensor, params: &AttentionParams, trace: bool) -> Result<AttentionOutput> {
    let (n, _) = matrix_dims(x, "X")?;
    let (mm, _) = matrix_dims(m, "M")?;
    let dims = params.dims(n, mm)?;
    if x.sizes()[1] != dims.d_x || m.sizes()[1] != dims.d_m {
        return Err(Error::Dims(format!(
            "input widths ({}, {}) do not match parameters (d_X={}, d_M={})",
            x.sizes()[1],
            m.sizes()[1],
            dims.d_x,
            dims.d_m
        )));
    }
    let mut eval = Eval::new();
    let t = attend(&mut eval, Layout::default(), x, m, params)?;
    Ok(AttentionOutput {
        y: t.y.clone(),
        trace: trace.then_some(t),
        counter: eval.counter,
    })
}

pub fn multi_head_attention(
    x: &Tensor,
    m: &Tensor,
    params: &MultiHeadParams,
    trace: bool,
) -> Result<AttentionOutput> {
    run(x, m, &AttentionParams::MultiHead(params.clone()), trace)
}

pub fn talking_heads_attention(
    x: &Tensor,
    m: &Tensor,
    params: &TalkingHeadsParams,
    trace: bool,
) -> Result<AttentionOutput> {
    run(x, m, &AttentionParams::TalkingHeads(params.clone()), trace)
}

/// Talking-heads attention with one of the two head projections replaced by
/// the identity.
pub fn hybrid_attention(
    x: &Tensor,
    m: &Tensor,
    params: &HybridParams,
    trace: bool,
) -> Result<AttentionOutput> {
    run(x, m, &AttentionParams::Hybrid(params.clone()), trace)
}

pub fn dynamic_projection_attention(
    x: &Tensor,
    m: &Tensor,
    params: &DynamicProjectionParams,
    trace: bool,
) -> Result<AttentionOutput> {
    run(x, m, &AttentionParams::Dynamic(params.clone()), trace)
}

pub fn gbma(x: &Tensor, m: &Tensor, params: &GbmaParams, trace: bool) -> Result<AttentionOutput> {
    run(x, m, &AttentionParams::Gbma(params.clone()), trace)
}

/// Any variant, dispatched on the parameter record.
pub fn attention(
    x: &Tensor,
    m: &Tensor,
    params: &AttentionParams,
    trace: bool,
) -> Result<AttentionOutput> {
    run(x, m, params, trace)
}

/// Multi-head attention written as two multi-way einsums.
pub fn multi_head_attention_concise(
    x: &Tensor,
    m: &Tensor,
    params: &MultiHeadParams,
) -> Result<Tensor> {
    AttentionParams::MultiHead(params.clone()).dims(x.sizes()[0], m.sizes()[0])?;
    algorithms::multi_head_concise(&mut Eval::new(), x, m, params)
}

/// Talking-heads attention written as two multi-way einsums.
pub fn talking_heads_attention_concise(
    x: &Tensor,
    m: &Tensor,
    params: &TalkingHeadsParams,
) -> Result<Tensor> {
    AttentionParams::TalkingHeads(params.clone()).dims(x.sizes()[0], m.sizes()[0])?;
    algorithms::talking_heads_concise(&mut Eval::new(), x, m, params)
}

/// Collapses a factored layer into GBMA parameters:
/// `P = P_q . P_k (. P_l)` and `Q = P_v . P_o (. P_w)`.
///
/// Hybrids factor with the identity in place of the missing projection.
/// Dynamic projections depend on the inputs and have no fixed factoring.
pub fn factor_to_gbma(params: &AttentionParams) -> Result<GbmaParams> {
    params.dims(1, 1)?;
    let mut e = Eval::new();
    let (p, q) = match params {
        AttentionParams::MultiHead(p) => (
            e.einsum(
                "gbma-P",
                &[
                    (&p.p_q, &["d_X", "d_k", "h"]),
                    (&p.p_k, &["d_M", "d_k", "h"]),
                ],
                &["d_X", "d_M", "h"],
            )?,
            e.einsum(
                "gbma-Q",
                &[
                    (&p.p_v, &["d_M", "d_v", "h"]),
                    (&p.p_o, &["d_Y", "d_v", "h"]),
                ],
                &["d_M", "d_Y", "h"],
            )?,
        ),
        AttentionParams::TalkingHeads(p) => factor_talking_heads(
            &mut e,
            [&p.p_q, &p.p_k, &p.p_v, &p.p_o],
            Some(&p.p_l),
            Some(&p.p_w),
        )?,
        AttentionParams::Hybrid(p) => {
            let four = [&p.p_q, &p.p_k, &p.p_v, &p.p_o];
            match p.kind {
                HybridKind::LogitsOnly => {
                    factor_talking_heads(&mut e, four, Some(&p.projection), None)?
                }
                HybridKind::WeightsOnly => {
                    factor_talking_heads(&mut e, four, None, Some(&p.projection))?
                }
            }
        }
        AttentionParams::Gbma(p) => (p.p.clone(), p.q.clone()),
        AttentionParams::Dynamic(_) => {
            return Err(Error::Dims(
                "dynamic projections depend on the inputs and cannot be factored into GBMA".into(),
            ))
        }
    };
    Ok(GbmaParams { p, q })
}

fn factor_talking_heads(
    e: &mut Eval,
    [p_q, p_k, p_v, p_o]: [&Tensor; 4],
    p_l: Option<&Tensor>,
    p_w: Option<&Tensor>,
) -> Result<(Tensor, Tensor)> {
    let p = match p_l {
        Some(p_l) => e.einsum(
            "gbma-P",
            &[
                (p_q, &["d_X", "d_k", "h_k"]),
                (p_k, &["d_M", "d_k", "h_k"]),
                (p_l, &["h_k", "h"]),
            ],
            &["d_X", "d_M", "h"],
        )?,
        None => e.einsum(
            "gbma-P",
            &[(p_q, &["d_X", "d_k", "h"]), (p_k, &["d_M", "d_k", "h"])],
            &["d_X", "d_M", "h"],
        )?,
    };
    let q = match p_w {
        Some(p_w) => e.einsum(
            "gbma-Q",
            &[
                (p_v, &["d_M", "d_v", "h_v"]),
                (p_o, &["d_Y", "d_v", "h_v"]),
                (p_w, &["h", "h_v"]),
            ],
            &["d_M", "d_Y", "h"],
        )?,
        None => e.einsum(
            "gbma-Q",
            &[(p_v, &["d_M", "d_v", "h"]), (p_o, &["d_Y", "d_v", "h"])],
            &["d_M", "d_Y", "h"],
        )?,
    };
    Ok((p, q))
}

#[cfg(test)]
mod tests;
