//! One meta-optimization step.
//!
//! For an episode with meta-train batches `B_i` and meta-test batch `B_t` the
//! objective is
//!
//! ```text
//! J = λ_dep·Dep(B_t) + Σ_i [ L_i(θ_E, θ_M) + L_t(θ_E, θ_i') + λ_p Σ_j P_j(B_i) + λ_dep·Dep(B_i) ]
//! L_i = λ_cls·Cls(B_i) + λ_m·MMD(B_i),   θ_i' = θ_M − α ∇_{θ_M} L_i
//! ```
//!
//! θ_M, θ_E and θ_D all descend `∇J`; terms that do not depend on a block
//! contribute nothing to its gradient, which reproduces the three separate
//! update rules. The first-order variant drops the dependence of `θ_i'` on
//! `θ_M` and `θ_E` beyond the identity. The exact variant obtains the
//! Hessian-vector products it needs from dual numbers.

use std::fmt;

use serde::Serialize;

use crate::data_synth::Sample;
use crate::domain_repr::entropy_loss_from_logit;
use crate::error::{Error, Result};
use crate::losses::{depth_loss_grad, KernelSpec};
use crate::model::{
    depth_backward, depth_forward, extractor_backward, extractor_forward, head_forward,
    head_objective, DepthCache, ExtractorTrace, MetaLearnerParams, ModelConfig, ModelParams,
    ModelState,
};
use crate::real::Dual;

use super::episode::Episode;
use super::HyperParams;

/// Per-term values of one episode's objective. Sums run over the meta-train
/// domains, as in the objective itself.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub cls: f64,
    pub mmd: f64,
    /// Meta-train and meta-test depth losses together.
    pub dep: f64,
    pub lp: [f64; 3],
    /// `Σ_i λ_cls·Cls(B_t; θ_i') + λ_m·MMD(B_t; θ_i')`.
    pub meta_test: f64,
    pub total: f64,
}

impl fmt::Display for LossBreakdown {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "cls={} mmd={} dep={} lp=[{}, {}, {}] meta_test={} total={}",
            self.cls, self.mmd, self.dep, self.lp[0], self.lp[1], self.lp[2], self.meta_test, self.total
        )
    }
}

/// Kernels used by the MMD terms of one episode; bandwidths are constants of
/// the gradient.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EpisodeKernels {
    pub train: Vec<KernelSpec>,
    /// One per inner-updated meta learner.
    pub test: Vec<KernelSpec>,
}

#[derive(Debug, Clone)]
pub struct MetaGradients {
    pub grads: ModelParams,
    pub losses: LossBreakdown,
    pub kernels: EpisodeKernels,
    /// `θ_i' − θ_M` per meta-train domain.
    pub deltas: Vec<Vec<f64>>,
}

/// `θ' = θ − α g` on a copy.
pub fn inner_update(theta: &[f64], grad: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if theta.len() != grad.len() {
        return Err(Error::shape("inner_update", theta.len(), grad.len()));
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite {
            context: "inner_update",
            detail: format!("gradient coordinate {i} is {}", grad[i]),
        });
    }
    Ok(theta.iter().zip(grad).map(|(t, g)| t - alpha * g).collect())
}

pub(crate) struct BatchPass {
    pub traces: Vec<ExtractorTrace>,
    pub embeddings: Vec<f64>,
    pub labels: Vec<u8>,
    pub depth: Vec<(Vec<f64>, DepthCache)>,
    pub depth_targets: Vec<f64>,
}

pub(crate) fn forward_batch(
    params: &ModelParams,
    cfg: &ModelConfig,
    samples: &[Sample],
    idx: &[usize],
) -> Result<BatchPass> {
    let mut pass = BatchPass {
        traces: Vec::with_capacity(idx.len()),
        embeddings: Vec::with_capacity(idx.len() * cfg.embedding_width()),
        labels: Vec::with_capacity(idx.len()),
        depth: Vec::with_capacity(idx.len()),
        depth_targets: Vec::new(),
    };
    for &i in idx {
        let s = samples
            .get(i)
            .ok_or_else(|| Error::shape("batch index", format!("< {}", samples.len()), i))?;
        let trace = extractor_forward(&params.extractor, cfg, &s.image)?;
        pass.depth.push(depth_forward(&params.depth, cfg, trace.blocks[1].f_plus())?);
        pass.embeddings.extend_from_slice(&trace.embedding);
        pass.labels.push(s.label);
        pass.depth_targets.extend(s.depth.iter().map(|&v| v as f64));
        pass.traces.push(trace);
    }
    Ok(pass)
}

impl BatchPass {
    fn depth_loss(&self, map_len: usize) -> Result<(f64, Vec<f64>)> {
        let preds: Vec<f64> = self.depth.iter().flat_map(|(p, _)| p.iter().copied()).collect();
        depth_loss_grad(&preds, &self.depth_targets, map_len)
    }

    /// Batch-mean entropy loss of each block with its logit gradients.
    fn entropy(&self, hyper: &HyperParams, form: crate::domain_repr::EntropyForm) -> ([f64; 3], Vec<[f64; 3]>) {
        let b = self.traces.len() as f64;
        let mut lp = [0.0; 3];
        let mut grads = Vec::with_capacity(self.traces.len());
        for t in &self.traces {
            let mut g = [0.0; 3];
            for (j, blk) in t.blocks.iter().enumerate() {
                let (l, dl) = entropy_loss_from_logit(blk.entropy_logit, form);
                lp[j] += l / b;
                g[j] = hyper.lambda_p * dl / b;
            }
            grads.push(g);
        }
        (lp, grads)
    }
}

fn backward_batch(
    params: &ModelParams,
    cfg: &ModelConfig,
    pass: &BatchPass,
    d_emb: &[f64],
    d_depth: &[f64],
    depth_weight: f64,
    d_entropy: Option<&[[f64; 3]]>,
    grads: &mut ModelParams,
) {
    let e = cfg.embedding_width();
    let map_len = cfg.depth_size.0 * cfg.depth_size.1;
    for (s, trace) in pass.traces.iter().enumerate() {
        let d_fplus2 = if depth_weight != 0.0 {
            let dout: Vec<f64> = d_depth[s * map_len..(s + 1) * map_len]
                .iter()
                .map(|g| g * depth_weight)
                .collect();
            Some(depth_backward(&params.depth, &pass.depth[s].1, &dout, &mut grads.depth))
        } else {
            None
        };
        let d_ent = d_entropy.map_or([0.0; 3], |g| g[s]);
        extractor_backward(
            &params.extractor,
            trace,
            &d_emb[s * e..(s + 1) * e],
            [None, d_fplus2.as_ref(), None],
            d_ent,
            &mut grads.extractor,
        );
    }
}

/// Backward of the depth term on a pooled batch; the entropy losses are
/// reported but not trained.
pub(crate) fn pooled_backward(
    params: &ModelParams,
    cfg: &ModelConfig,
    hyper: &HyperParams,
    pass: &BatchPass,
    d_emb: &[f64],
    grads: &mut ModelParams,
) -> Result<LossBreakdown> {
    let map_len = cfg.depth_size.0 * cfg.depth_size.1;
    let (dep, d_depth) = pass.depth_loss(map_len)?;
    let (lp, _) = pass.entropy(hyper, cfg.entropy_form);
    backward_batch(params, cfg, pass, d_emb, &d_depth, hyper.lambda_dep, None, grads);
    Ok(LossBreakdown {
        dep,
        lp,
        ..LossBreakdown::default()
    })
}

fn resolve_kernel(
    hyper: &HyperParams,
    theta: &[f64],
    cfg: &ModelConfig,
    embeddings: &[f64],
    prior: &[f64],
) -> Result<KernelSpec> {
    let dims = cfg.head_dims();
    let meta = MetaLearnerParams::from_flat(dims, theta)?;
    let (h, _) = head_forward(&meta, embeddings)?;
    hyper.kernel.resolve(&h, prior, dims.hidden)
}

fn check_episode(ep: &Episode, b: usize, hidden: usize) -> Result<()> {
    if ep.train_batches.is_empty() || ep.train_batches.len() != ep.train_priors.len() {
        return Err(Error::Config(format!(
            "episode has {} meta-train batches and {} prior draws",
            ep.train_batches.len(),
            ep.train_priors.len()
        )));
    }
    for (bi, pr) in ep.train_batches.iter().zip(&ep.train_priors).chain([(&ep.test_batch, &ep.test_prior)]) {
        if bi.len() != b || pr.len() != b * hidden {
            return Err(Error::shape("episode batch", format!("{b} samples, {} prior values", b * hidden), format!("{} samples, {} prior values", bi.len(), pr.len())));
        }
    }
    Ok(())
}

/// Gradients of the episode objective w.r.t. all parameters.
///
/// `frozen` fixes the MMD kernels (used when checking against finite
/// differences); otherwise they follow `hyper.kernel`.
pub fn episode_gradients(
    params: &ModelParams,
    cfg: &ModelConfig,
    hyper: &HyperParams,
    samples: &[Sample],
    ep: &Episode,
    frozen: Option<&EpisodeKernels>,
) -> Result<MetaGradients> {
    let dims = cfg.head_dims();
    let b = ep.test_batch.len();
    check_episode(ep, b, dims.hidden)?;
    let map_len = cfg.depth_size.0 * cfg.depth_size.1;
    let theta = params.meta.to_flat();
    let mut grads = params.zeros_like();
    let mut g_theta = vec![0.0; theta.len()];
    let mut losses = LossBreakdown::default();
    let mut kernels = EpisodeKernels::default();
    let mut deltas = Vec::new();

    let train: Vec<BatchPass> = ep
        .train_batches
        .iter()
        .map(|bi| forward_batch(params, cfg, samples, bi))
        .collect::<Result<_>>()?;
    let test = forward_batch(params, cfg, samples, &ep.test_batch)?;
    let mut d_emb_test = vec![0.0; test.embeddings.len()];

    for (i, pass) in train.iter().enumerate() {
        let prior = &ep.train_priors[i];
        let kernel = match frozen {
            Some(k) => k.train[i].clone(),
            None => resolve_kernel(hyper, &theta, cfg, &pass.embeddings, prior)?,
        };
        let ev = head_objective::<f64>(
            &theta, dims, &pass.embeddings, &pass.labels, prior, &kernel, hyper.lambda_cls, hyper.lambda_m,
        );
        let theta_i = inner_update(&theta, &ev.grad_theta, hyper.alpha)?;

        let kernel_t = match frozen {
            Some(k) => k.test[i].clone(),
            None => resolve_kernel(hyper, &theta_i, cfg, &test.embeddings, &ep.test_prior)?,
        };
        let ev_t = head_objective::<f64>(
            &theta_i, dims, &test.embeddings, &test.labels, &ep.test_prior, &kernel_t, hyper.lambda_cls, hyper.lambda_m,
        );
        let g_prime = &ev_t.grad_theta;
        let mut d_emb = ev.grad_embedding.clone();
        for ((g, a), c) in g_theta.iter_mut().zip(&ev.grad_theta).zip(g_prime) {
            *g += a + c;
        }
        if !hyper.first_order {
            // Tangent of ∇L_i along g' gives H·g' for θ_M and the mixed
            // second derivative for the embeddings.
            let theta_d: Vec<Dual> = theta.iter().zip(g_prime).map(|(&t, &g)| Dual::new(t, g)).collect();
            let emb_d: Vec<Dual> = pass.embeddings.iter().map(|&e| Dual::new(e, 0.0)).collect();
            let ev_d = head_objective::<Dual>(
                &theta_d, dims, &emb_d, &pass.labels, prior, &kernel, hyper.lambda_cls, hyper.lambda_m,
            );
            for (g, hv) in g_theta.iter_mut().zip(&ev_d.grad_theta) {
                *g -= hyper.alpha * hv.du;
            }
            for (g, hv) in d_emb.iter_mut().zip(&ev_d.grad_embedding) {
                *g -= hyper.alpha * hv.du;
            }
        }
        for (g, v) in d_emb_test.iter_mut().zip(&ev_t.grad_embedding) {
            *g += v;
        }

        let (dep, d_depth) = pass.depth_loss(map_len)?;
        let (lp, d_ent) = pass.entropy(hyper, cfg.entropy_form);
        backward_batch(params, cfg, pass, &d_emb, &d_depth, hyper.lambda_dep, Some(&d_ent), &mut grads);

        losses.cls += ev.cls;
        losses.mmd += ev.mmd;
        losses.dep += dep;
        for j in 0..3 {
            losses.lp[j] += lp[j];
        }
        losses.meta_test += ev_t.loss;
        losses.total += ev.loss + ev_t.loss + hyper.lambda_p * lp.iter().sum::<f64>() + hyper.lambda_dep * dep;
        kernels.train.push(kernel);
        kernels.test.push(kernel_t);
        deltas.push(theta_i.iter().zip(&theta).map(|(a, b)| a - b).collect());
    }
    let (dep_t, d_depth_t) = test.depth_loss(map_len)?;
    backward_batch(params, cfg, &test, &d_emb_test, &d_depth_t, hyper.lambda_dep, None, &mut grads);
    losses.dep += dep_t;
    losses.total += hyper.lambda_dep * dep_t;
    grads.meta = MetaLearnerParams::from_flat(dims, &g_theta)?;

    if !losses.total.is_finite() {
        return Err(Error::NonFinite {
            context: "meta_step",
            detail: losses.to_string(),
        });
    }
    if !grads.is_finite() {
        return Err(Error::NonFinite {
            context: "meta_step gradients",
            detail: losses.to_string(),
        });
    }
    Ok(MetaGradients {
        grads,
        losses,
        kernels,
        deltas,
    })
}

/// Value of the episode objective with fixed kernels. With `frozen_deltas`
/// the inner step is the given constant instead of `−α ∇L_i`.
pub fn episode_objective(
    params: &ModelParams,
    cfg: &ModelConfig,
    hyper: &HyperParams,
    samples: &[Sample],
    ep: &Episode,
    kernels: &EpisodeKernels,
    frozen_deltas: Option<&[Vec<f64>]>,
) -> Result<LossBreakdown> {
    let dims = cfg.head_dims();
    check_episode(ep, ep.test_batch.len(), dims.hidden)?;
    let map_len = cfg.depth_size.0 * cfg.depth_size.1;
    let theta = params.meta.to_flat();
    let test = forward_batch(params, cfg, samples, &ep.test_batch)?;
    let mut losses = LossBreakdown::default();
    for (i, bi) in ep.train_batches.iter().enumerate() {
        let pass = forward_batch(params, cfg, samples, bi)?;
        let prior = &ep.train_priors[i];
        let ev = head_objective::<f64>(
            &theta, dims, &pass.embeddings, &pass.labels, prior, &kernels.train[i], hyper.lambda_cls, hyper.lambda_m,
        );
        let theta_i = match frozen_deltas {
            Some(d) => theta.iter().zip(&d[i]).map(|(t, d)| t + d).collect(),
            None => inner_update(&theta, &ev.grad_theta, hyper.alpha)?,
        };
        let ev_t = head_objective::<f64>(
            &theta_i, dims, &test.embeddings, &test.labels, &ep.test_prior, &kernels.test[i], hyper.lambda_cls, hyper.lambda_m,
        );
        let (dep, _) = pass.depth_loss(map_len)?;
        let (lp, _) = pass.entropy(hyper, cfg.entropy_form);
        losses.cls += ev.cls;
        losses.mmd += ev.mmd;
        losses.dep += dep;
        for j in 0..3 {
            losses.lp[j] += lp[j];
        }
        losses.meta_test += ev_t.loss;
        losses.total += ev.loss + ev_t.loss + hyper.lambda_p * lp.iter().sum::<f64>() + hyper.lambda_dep * dep;
    }
    let (dep_t, _) = test.depth_loss(map_len)?;
    losses.dep += dep_t;
    losses.total += hyper.lambda_dep * dep_t;
    Ok(losses)
}

/// Adam over every parameter tensor.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: ModelParams,
    v: ModelParams,
}

impl Adam {
    pub fn new(params: &ModelParams, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update and snaps the parameters to f32 precision so that
    /// checkpoints reproduce the in-memory state exactly.
    pub fn step(&mut self, params: &mut ModelParams, grads: &ModelParams) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let gs = grads.tensors();
        for (((p, (_, g)), m), v) in params
            .tensors_mut()
            .into_iter()
            .zip(gs)
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut())
        {
            for k in 0..p.data.len() {
                let gk = g.data[k];
                m.data[k] = self.beta1 * m.data[k] + (1.0 - self.beta1) * gk;
                v.data[k] = self.beta2 * v.data[k] + (1.0 - self.beta2) * gk * gk;
                let mh = m.data[k] / c1;
                let vh = v.data[k] / c2;
                p.data[k] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        params.snap_f32();
    }
}

/// Computes the episode gradients and applies one Adam update.
pub fn meta_step(
    state: &mut ModelState,
    adam: &mut Adam,
    hyper: &HyperParams,
    samples: &[Sample],
    ep: &Episode,
) -> Result<LossBreakdown> {
    let mg = episode_gradients(&state.params, &state.config, hyper, samples, ep, None)?;
    adam.step(&mut state.params, &mg.grads);
    state.step += 1;
    Ok(mg.losses)
}
