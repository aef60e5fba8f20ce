//! Central finite-difference checks shared by the gradient and acceptance
//! targets.

use std::time::Instant;

use d2am::data_synth::Sample;
use d2am::meta_trainer::{episode_gradients, episode_objective, Episode, HyperParams, KernelPolicy};
use d2am::model::{ModelConfig, ModelParams, ModelState};

use super::{coords, rel_err, tiny_dataset, tiny_episode, tiny_model};

pub const STEP: f64 = 1e-5;
pub const TOL: f64 = 1e-4;
// Denominator floor: gradients that are structurally zero (conv biases ahead of
// instance norm) are compared in absolute terms, to 1e-9.
pub const FLOOR: f64 = 1e-5;
pub const PER_TENSOR: usize = 20;

pub struct Case {
    pub name: &'static str,
    pub hyper: HyperParams,
    /// Freeze the inner step (first-order rule) when differencing.
    pub freeze_inner: bool,
}

pub fn weights(cls: f64, mmd: f64, p: f64, dep: f64) -> HyperParams {
    HyperParams {
        alpha: 0.2,
        lambda_cls: cls,
        lambda_m: mmd,
        lambda_p: p,
        lambda_dep: dep,
        kernel: KernelPolicy::Median,
        ..HyperParams::default()
    }
}

pub fn check(case: &Case, cfg: &ModelConfig, state: &ModelState, samples: &[Sample], ep: &Episode) -> (usize, f64) {
    let mg = episode_gradients(&state.params, cfg, &case.hyper, samples, ep, None).unwrap();
    let deltas = mg.deltas.clone();
    let frozen = case.freeze_inner.then_some(deltas.as_slice());
    let objective = |p: &ModelParams| {
        episode_objective(p, cfg, &case.hyper, samples, ep, &mg.kernels, frozen)
            .unwrap()
            .total
    };
    let base = objective(&state.params);
    assert!((base - mg.losses.total).abs() < 1e-10, "{}: objective mismatch", case.name);

    let names: Vec<String> = state.params.tensors().into_iter().map(|(n, _)| n).collect();
    let analytic: Vec<Vec<f64>> = mg.grads.tensors().into_iter().map(|(_, t)| t.data.clone()).collect();
    let mut checked = 0;
    let mut worst = 0.0f64;
    let mut params = state.params.clone();
    for (ti, name) in names.iter().enumerate() {
        let len = analytic[ti].len();
        let picks = coords(len, PER_TENSOR);
        assert!(picks.len() >= PER_TENSOR.min(len));
        for k in picks {
            let orig = params.tensors_mut()[ti].data[k];
            params.tensors_mut()[ti].data[k] = orig + STEP;
            let up = objective(&params);
            params.tensors_mut()[ti].data[k] = orig - STEP;
            let down = objective(&params);
            params.tensors_mut()[ti].data[k] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            let e = rel_err(analytic[ti][k], numeric, FLOOR);
            assert!(
                e < TOL,
                "{}: {name}[{k}] analytic {} numeric {numeric} rel {e} (one-sided {} / {})",
                case.name,
                analytic[ti][k],
                (up - base) / STEP,
                (base - down) / STEP
            );
            worst = worst.max(e);
            checked += 1;
        }
    }
    (checked, worst)
}

pub struct CaseReport {
    pub name: &'static str,
    pub coordinates: usize,
    pub min_per_tensor: usize,
    pub worst: f64,
}

pub struct SuiteReport {
    pub cases: Vec<CaseReport>,
    pub seconds: f64,
}

/// Every loss term alone with the inner step frozen, then the composed
/// objective under both meta-gradient rules.
pub fn run_suite() -> SuiteReport {
    let t0 = Instant::now();
    let cfg = tiny_model();
    let ds = tiny_dataset(6, 3);
    // Initialization chosen so no checked coordinate sits within one step of a
    // ReLU kink; at a kink the one-sided differences disagree.
    let state = ModelState::new(cfg.clone(), 12).unwrap();
    let ep = tiny_episode(&ds, 4, cfg.adaptation_width, 5);

    let exact = HyperParams {
        first_order: false,
        ..weights(1.0, 0.5, 0.7, 0.3)
    };
    let cases = [
        Case { name: "classification", hyper: weights(1.0, 0.0, 0.0, 0.0), freeze_inner: true },
        Case { name: "mmd", hyper: weights(0.0, 1.0, 0.0, 0.0), freeze_inner: true },
        Case { name: "depth", hyper: weights(0.0, 0.0, 0.0, 1.0), freeze_inner: true },
        Case { name: "entropy", hyper: weights(0.0, 0.0, 1.0, 0.0), freeze_inner: true },
        Case { name: "composed first-order", hyper: weights(1.0, 0.5, 0.7, 0.3), freeze_inner: true },
        Case { name: "composed exact", hyper: exact, freeze_inner: false },
    ];
    let min_per_tensor = state
        .params
        .tensors()
        .iter()
        .map(|(_, t)| t.len().min(PER_TENSOR))
        .min()
        .unwrap_or(0);
    let reports = cases
        .iter()
        .map(|case| {
            let (coordinates, worst) = check(case, &cfg, &state, &ds.source, &ep);
            CaseReport { name: case.name, coordinates, min_per_tensor, worst }
        })
        .collect();
    SuiteReport { cases: reports, seconds: t0.elapsed().as_secs_f64() }
}
