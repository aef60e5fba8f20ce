//! Meta learner: adaptation layer `h = relu(W_h e + b_h)` followed by the
//! scalar output `p = sigmoid(w_o · h + b_o)`.
//!
//! The objective code is generic over [`Real`] and works on a flat parameter
//! vector, so inner updates are plain vector arithmetic and running it on
//! dual numbers gives exact Hessian-vector products.

use crate::error::{Error, Result};
use crate::losses::{bce_from_logit, mmd_with_grad, KernelSpec};
use crate::real::Real;
use crate::rng::StreamRng;
use crate::tensor::Tensor;

use super::normal_tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadDims {
    pub embed: usize,
    pub hidden: usize,
}

impl HeadDims {
    /// Length of the flat parameter vector `[W_h, b_h, w_o, b_o]`.
    pub fn flat_len(&self) -> usize {
        self.hidden * self.embed + 2 * self.hidden + 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetaLearnerParams {
    /// `[hidden, embed]`
    pub hidden_weight: Tensor,
    pub hidden_bias: Tensor,
    /// `[hidden]`
    pub out_weight: Tensor,
    /// `[1]`
    pub out_bias: Tensor,
}

impl MetaLearnerParams {
    pub fn init(dims: HeadDims, rng: &mut StreamRng) -> Self {
        MetaLearnerParams {
            hidden_weight: normal_tensor(&[dims.hidden, dims.embed], (2.0 / dims.embed as f64).sqrt(), rng),
            hidden_bias: Tensor::zeros(&[dims.hidden]),
            out_weight: normal_tensor(&[dims.hidden], (1.0 / dims.hidden as f64).sqrt(), rng),
            out_bias: Tensor::zeros(&[1]),
        }
    }

    pub fn zeros(dims: HeadDims) -> Self {
        MetaLearnerParams {
            hidden_weight: Tensor::zeros(&[dims.hidden, dims.embed]),
            hidden_bias: Tensor::zeros(&[dims.hidden]),
            out_weight: Tensor::zeros(&[dims.hidden]),
            out_bias: Tensor::zeros(&[1]),
        }
    }

    pub fn dims(&self) -> HeadDims {
        HeadDims {
            hidden: self.hidden_weight.shape[0],
            embed: self.hidden_weight.shape[1],
        }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.dims().flat_len());
        v.extend_from_slice(&self.hidden_weight.data);
        v.extend_from_slice(&self.hidden_bias.data);
        v.extend_from_slice(&self.out_weight.data);
        v.extend_from_slice(&self.out_bias.data);
        v
    }

    pub fn from_flat(dims: HeadDims, flat: &[f64]) -> Result<Self> {
        if flat.len() != dims.flat_len() {
            return Err(Error::shape("meta learner parameters", dims.flat_len(), flat.len()));
        }
        let (hw, rest) = flat.split_at(dims.hidden * dims.embed);
        let (hb, rest) = rest.split_at(dims.hidden);
        let (ow, ob) = rest.split_at(dims.hidden);
        Ok(MetaLearnerParams {
            hidden_weight: Tensor::from_vec(&[dims.hidden, dims.embed], hw.to_vec()),
            hidden_bias: Tensor::from_vec(&[dims.hidden], hb.to_vec()),
            out_weight: Tensor::from_vec(&[dims.hidden], ow.to_vec()),
            out_bias: Tensor::from_vec(&[1], ob.to_vec()),
        })
    }
}

struct FlatView<'a, T> {
    hidden_weight: &'a [T],
    hidden_bias: &'a [T],
    out_weight: &'a [T],
    out_bias: T,
}

fn view<T: Real>(theta: &[T], dims: HeadDims) -> FlatView<'_, T> {
    let (hw, rest) = theta.split_at(dims.hidden * dims.embed);
    let (hb, rest) = rest.split_at(dims.hidden);
    let (ow, ob) = rest.split_at(dims.hidden);
    FlatView {
        hidden_weight: hw,
        hidden_bias: hb,
        out_weight: ow,
        out_bias: ob[0],
    }
}

/// Forward for one embedding: `(h, pre-activation, logit)`.
fn forward_one<T: Real>(v: &FlatView<'_, T>, dims: HeadDims, emb: &[T]) -> (Vec<T>, Vec<T>, T) {
    let mut pre = Vec::with_capacity(dims.hidden);
    let mut h = Vec::with_capacity(dims.hidden);
    let mut z = v.out_bias;
    for k in 0..dims.hidden {
        let row = &v.hidden_weight[k * dims.embed..(k + 1) * dims.embed];
        let mut a = v.hidden_bias[k];
        for (w, e) in row.iter().zip(emb) {
            a += *w * *e;
        }
        pre.push(a);
        let r = a.relu();
        z += v.out_weight[k] * r;
        h.push(r);
    }
    (h, pre, z)
}

/// Adaptation features and probabilities for a batch of embeddings
/// (`b × embed`, row-major).
pub fn head_forward(
    params: &MetaLearnerParams,
    embeddings: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let dims = params.dims();
    if embeddings.len() % dims.embed != 0 {
        return Err(Error::shape(
            "meta_learner_forward",
            format!("b x {}", dims.embed),
            embeddings.len(),
        ));
    }
    let flat = params.to_flat();
    let v = view(&flat, dims);
    let mut hs = Vec::new();
    let mut ps = Vec::new();
    for e in embeddings.chunks_exact(dims.embed) {
        let (h, _, z) = forward_one(&v, dims, e);
        hs.extend(h);
        ps.push(z.sigmoid());
    }
    Ok((hs, ps))
}

/// Value and gradients of `w_cls · L_cls + w_mmd · L_mmd` on one batch.
#[derive(Debug, Clone)]
pub struct HeadEval<T> {
    pub loss: T,
    pub cls: T,
    pub mmd: T,
    pub grad_theta: Vec<T>,
    /// `b × embed`
    pub grad_embedding: Vec<T>,
    /// Adaptation features `b × hidden`.
    pub hidden: Vec<T>,
    pub prob: Vec<T>,
}

#[allow(clippy::too_many_arguments)]
pub fn head_objective<T: Real>(
    theta: &[T],
    dims: HeadDims,
    embeddings: &[T],
    labels: &[u8],
    prior: &[f64],
    kernel: &KernelSpec,
    w_cls: f64,
    w_mmd: f64,
) -> HeadEval<T> {
    let b = labels.len();
    debug_assert_eq!(theta.len(), dims.flat_len());
    debug_assert_eq!(embeddings.len(), b * dims.embed);
    debug_assert_eq!(prior.len(), b * dims.hidden);
    let v = view(theta, dims);

    let mut hidden = Vec::with_capacity(b * dims.hidden);
    let mut pre_all = Vec::with_capacity(b * dims.hidden);
    let mut dz = Vec::with_capacity(b);
    let mut prob = Vec::with_capacity(b);
    let mut cls = T::zero();
    let inv_b = 1.0 / b as f64;
    for (e, &y) in embeddings.chunks_exact(dims.embed).zip(labels) {
        let (h, pre, z) = forward_one(&v, dims, e);
        let (l, g) = bce_from_logit(z, y);
        cls += l;
        dz.push(g.scale(inv_b));
        prob.push(z.sigmoid());
        hidden.extend(h);
        pre_all.extend(pre);
    }
    let cls = cls.scale(inv_b);

    let (mmd, dmmd) = if w_mmd != 0.0 {
        mmd_with_grad(&hidden, prior, dims.hidden, kernel)
    } else {
        (
            mmd_with_grad(&hidden, prior, dims.hidden, kernel).0,
            vec![T::zero(); hidden.len()],
        )
    };

    let mut grad_theta = vec![T::zero(); dims.flat_len()];
    let mut grad_embedding = vec![T::zero(); embeddings.len()];
    let hw_len = dims.hidden * dims.embed;
    let ow_off = hw_len + dims.hidden;
    let ob_off = ow_off + dims.hidden;
    for i in 0..b {
        let dzi = dz[i].scale(w_cls);
        grad_theta[ob_off] += dzi;
        let e = &embeddings[i * dims.embed..(i + 1) * dims.embed];
        let ge = &mut grad_embedding[i * dims.embed..(i + 1) * dims.embed];
        for k in 0..dims.hidden {
            let idx = i * dims.hidden + k;
            grad_theta[ow_off + k] += dzi * hidden[idx];
            if pre_all[idx].value() <= 0.0 {
                continue;
            }
            let dh = dzi * v.out_weight[k] + dmmd[idx].scale(w_mmd);
            grad_theta[hw_len + k] += dh;
            let row = &mut grad_theta[k * dims.embed..(k + 1) * dims.embed];
            for (g, x) in row.iter_mut().zip(e) {
                *g += dh * *x;
            }
            let wrow = &v.hidden_weight[k * dims.embed..(k + 1) * dims.embed];
            for (g, w) in ge.iter_mut().zip(wrow) {
                *g += dh * *w;
            }
        }
    }
    HeadEval {
        loss: cls.scale(w_cls) + mmd.scale(w_mmd),
        cls,
        mmd,
        grad_theta,
        grad_embedding,
        hidden,
        prob,
    }
}
