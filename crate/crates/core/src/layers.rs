//! Equivariant layer zoo: lifting convolution, regular group convolution,
//! symmetry-breaking weights, and vector/scalar readouts, each fused with a
//! time convolution.
//!
//! The group contraction and the time convolution share one kernel tensor:
//! both are realized by expanding the group-structured kernel into an
//! ordinary 1D convolution over enlarged channel axes.

use std::rc::Rc;

use crate::autodiff::{Graph, NodeId};
use crate::autodiff::Tensor;
use crate::dihedral::{GroupElement, GROUP_ORDER};
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Lifting layer: `v [C_in, 4, 4, T]`, `k [C_out, C_in, 4, 4, K_t]`,
/// output `[C_out, 8, T']` on the group.
///
/// Realizes `V~_sigma = sum_{r,s} K(sigma^-1 e_s, sigma^-1 e_r) V_rs`
/// jointly with the time convolution.
pub fn lift<F: Real>(
    g: &mut Graph<F>,
    v: NodeId,
    k: NodeId,
    stride: usize,
    pad: usize,
) -> Result<NodeId> {
    let vs = g.shape(v).to_vec();
    let ks = g.shape(k).to_vec();
    if vs.len() != 4 || vs[1] != 4 || vs[2] != 4 {
        return Err(Error::Shape(format!("lift: input {:?}", vs)));
    }
    if ks.len() != 5 || ks[2] != 4 || ks[3] != 4 || ks[1] != vs[0] {
        return Err(Error::Shape(format!("lift: kernel {:?}", ks)));
    }
    let (c_in, t_len) = (vs[0], vs[3]);
    let (c_out, k_t) = (ks[0], ks[4]);

    // Expand: K''[co*8+sig][ci*16 + r*4+s][kt] = K[co][ci][p(r)][p(s)][kt]
    // with p the corner permutation of sigma^-1.
    let mut map = Vec::with_capacity(c_out * 8 * c_in * 16 * k_t);
    for co in 0..c_out {
        for sigma in GroupElement::all() {
            let p = sigma.inverse().corner_perm();
            for ci in 0..c_in {
                for r in 0..4 {
                    for s in 0..4 {
                        let src_base = (((co * c_in + ci) * 4 + p[r]) * 4 + p[s]) * k_t;
                        for kt in 0..k_t {
                            map.push(src_base + kt);
                        }
                    }
                }
            }
        }
    }
    let expanded = g.index_map(k, Rc::new(map), &[c_out * 8, c_in * 16, k_t])?;
    let flat_in = g.reshape(v, &[c_in * 16, t_len])?;
    let conv = g.conv1d(flat_in, expanded, stride, pad)?;
    let t_out = g.shape(conv)[1];
    g.reshape(conv, &[c_out, 8, t_out])
}

/// Regular group convolution: `f [C_in, 8, T]`, `k [C_out, C_in, 8, K_t]`,
/// output `[C_out, 8, T']`.
///
/// Realizes `V^_sigma = sum_pi K(sigma^-1 pi) V~_pi` fused with the time
/// convolution.
pub fn group_conv<F: Real>(
    g: &mut Graph<F>,
    f: NodeId,
    k: NodeId,
    stride: usize,
    pad: usize,
) -> Result<NodeId> {
    let fs = g.shape(f).to_vec();
    let ks = g.shape(k).to_vec();
    if fs.len() != 3 || fs[1] != GROUP_ORDER {
        return Err(Error::Shape(format!("group_conv: input {:?}", fs)));
    }
    if ks.len() != 4 || ks[2] != GROUP_ORDER || ks[1] != fs[0] {
        return Err(Error::Shape(format!("group_conv: kernel {:?}", ks)));
    }
    let (c_in, t_len) = (fs[0], fs[2]);
    let (c_out, k_t) = (ks[0], ks[3]);

    // K''[co*8+sig][ci*8+pi][kt] = K[co][ci][sig^-1 . pi][kt]
    let mut map = Vec::with_capacity(c_out * 8 * c_in * 8 * k_t);
    for co in 0..c_out {
        for sigma in GroupElement::all() {
            let sig_inv = sigma.inverse();
            for ci in 0..c_in {
                for pi in GroupElement::all() {
                    let idx = sig_inv.compose(pi).index();
                    let src_base = ((co * c_in + ci) * 8 + idx) * k_t;
                    for kt in 0..k_t {
                        map.push(src_base + kt);
                    }
                }
            }
        }
    }
    let expanded = g.index_map(k, Rc::new(map), &[c_out * 8, c_in * 8, k_t])?;
    let flat_in = g.reshape(f, &[c_in * 8, t_len])?;
    let conv = g.conv1d(flat_in, expanded, stride, pad)?;
    let t_out = g.shape(conv)[1];
    g.reshape(conv, &[c_out, 8, t_out])
}

/// Symmetry-breaking weights `omega = 8 * softmax(raw / 8)` from the eight
/// raw trainable parameters. At raw = 0 this is exactly all-ones.
pub fn symmetry_weights<F: Real>(g: &mut Graph<F>, raw: NodeId) -> Result<NodeId> {
    if g.shape(raw) != [GROUP_ORDER] {
        return Err(Error::Shape(format!(
            "symmetry_weights: expected [8], got {:?}",
            g.shape(raw)
        )));
    }
    let scaled = g.scale(raw, F::of(1.0 / 8.0));
    let soft = g.softmax(scaled)?;
    Ok(g.scale(soft, F::of(8.0)))
}

/// Multiply a group-indexed tensor by `omega` along its group axis.
pub fn apply_symmetry_weights<F: Real>(
    g: &mut Graph<F>,
    f: NodeId,
    omega: NodeId,
    group_axis: usize,
) -> Result<NodeId> {
    g.mul_axis(f, omega, group_axis)
}

/// Approximately equivariant group convolution: `omega(sigma)` scales the
/// output of [`group_conv`] per group index. Reduces to the exact layer when
/// the raw weights are zero.
pub fn approx_group_conv<F: Real>(
    g: &mut Graph<F>,
    f: NodeId,
    k: NodeId,
    omega: NodeId,
    stride: usize,
    pad: usize,
) -> Result<NodeId> {
    let out = group_conv(g, f, k, stride, pad)?;
    apply_symmetry_weights(g, out, omega, 1)
}

/// Contraction matrix for the vector readout, flattened to `[2, 16]` over
/// the (channel j, group sigma) input layout.
fn vector_head_matrix<F: Real>() -> Tensor<F> {
    let mut data = vec![F::zero(); 2 * 16];
    for sigma in GroupElement::all() {
        let rot = sigma.vector_matrix::<F>();
        for i in 0..2 {
            for j in 0..2 {
                data[i * 16 + j * 8 + sigma.index()] = rot[i][j];
            }
        }
    }
    Tensor::new(vec![2, 16], data).expect("static shape")
}

/// Vector readout `v^i = sum_sigma sum_j R^ij_sigma V^j_sigma` from a
/// `[2, 8]` feature; output transforms in the vector representation.
pub fn vector_head<F: Real>(g: &mut Graph<F>, f: NodeId) -> Result<NodeId> {
    let fs = g.shape(f).to_vec();
    if fs != [2, GROUP_ORDER] {
        return Err(Error::Shape(format!(
            "vector_head: expected channel axis of size 2 as [2, 8], got {:?}",
            fs
        )));
    }
    let m = g.constant(vector_head_matrix());
    let col = g.reshape(f, &[16, 1])?;
    let v = g.matmul(m, col)?;
    g.reshape(v, &[2])
}

/// Scalar readout: mean-pool over the group index then dense to one logit;
/// invariant under the regular action.
pub fn scalar_head<F: Real>(
    g: &mut Graph<F>,
    f: NodeId,
    w: NodeId,
    b: NodeId,
) -> Result<NodeId> {
    let fs = g.shape(f).to_vec();
    if fs.len() != 2 || fs[1] != GROUP_ORDER {
        return Err(Error::Shape(format!(
            "scalar_head: expected [C, 8], got {:?}",
            fs
        )));
    }
    let pooled = g.mean_axis(f, 1)?;
    let col = g.reshape(pooled, &[fs[0], 1])?;
    let y = g.matmul(w, col)?;
    let y = g.reshape(y, &[1])?;
    g.add_bias(y, b)
}

/// Non-trainable averaging kernel matching a group convolution of the given
/// geometry; used by skip connections to downsample their input.
pub fn average_group_kernel<F: Real>(c_out: usize, c_in: usize, k_t: usize) -> Tensor<F> {
    Tensor::full(
        &[c_out * 8, c_in * 8, k_t],
        F::of(1.0 / (c_in * 8 * k_t) as f64),
    )
}

/// Non-trainable averaging kernel for ordinary convolutions.
pub fn average_kernel<F: Real>(c_out: usize, c_in: usize, k_t: usize) -> Tensor<F> {
    Tensor::full(&[c_out, c_in, k_t], F::of(1.0 / (c_in * k_t) as f64))
}
