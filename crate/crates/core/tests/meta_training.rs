//! Episode construction, the inner update and the outer meta-step.

mod common;

use common::{tiny_dataset, tiny_model};
use d2am::losses::draw_prior;
use d2am::meta_trainer::{
    domain_members, episode_gradients, episode_objective, erm_gradients, inner_update, meta_step, sample_episode,
    train, Adam, Episode, HyperParams,
};
use d2am::model::{MetaLearnerParams, ModelParams, ModelState};
use d2am::rng::{stream, Stream};

fn latent_members(ds: &d2am::Dataset, k: usize) -> Vec<Vec<usize>> {
    let labels: Vec<usize> = ds.source.iter().map(|s| s.latent_domain + 1).collect();
    domain_members(&labels, k).unwrap()
}

#[test]
fn each_domain_is_held_out_a_third_of_the_time() {
    let members = vec![vec![0, 1], vec![2, 3], vec![4, 5]];
    let mut counts = [0usize; 3];
    for step in 0..3000 {
        let ep = sample_episode(&members, 2, 4, 9, 1, step).unwrap();
        assert_eq!(ep.meta_train_domains.len(), 2);
        assert!(!ep.meta_train_domains.contains(&ep.meta_test_domain));
        counts[ep.meta_test_domain - 1] += 1;
    }
    for c in counts {
        let f = c as f64 / 3000.0;
        assert!((f - 1.0 / 3.0).abs() <= 0.03, "held-out frequency {f}");
    }
}

#[test]
fn two_domains_give_one_train_and_one_test_domain() {
    let members = vec![vec![0, 1, 2], vec![3]];
    let ep = sample_episode(&members, 3, 4, 1, 1, 0).unwrap();
    assert_eq!(ep.meta_train_domains.len(), 1);
    assert_eq!(ep.train_batches[0].len(), 3);
    assert_eq!(ep.test_batch.len(), 3);
}

#[test]
fn inner_update_on_scalar_quadratic() {
    // L = θ²/2 at θ = 1 has gradient 1.
    let out = inner_update(&[1.0], &[1.0], 0.1).unwrap();
    assert!((out[0] - 0.9).abs() < 1e-15);
    assert_eq!(inner_update(&[0.3, -2.0], &[0.0, 0.0], 0.5).unwrap(), vec![0.3, -2.0]);
    assert!(inner_update(&[1.0], &[f64::NAN], 0.1).is_err());
    assert!(inner_update(&[1.0, 2.0], &[1.0], 0.1).is_err());
}

#[test]
fn inner_update_descends_a_quadratic() {
    let c = [0.5, -1.0, 2.0];
    let loss = |t: &[f64]| 0.5 * t.iter().zip(&c).map(|(x, c)| (x - c) * (x - c)).sum::<f64>();
    let theta = [3.0, 1.0, -1.0];
    let grad: Vec<f64> = theta.iter().zip(&c).map(|(x, c)| x - c).collect();
    for alpha in [1e-3, 1e-2, 0.1] {
        assert!(loss(&inner_update(&theta, &grad, alpha).unwrap()) < loss(&theta));
    }
}

fn add(a: &ModelParams, b: &ModelParams) -> ModelParams {
    let mut out = a.clone();
    for (o, (_, t)) in out.tensors_mut().into_iter().zip(b.tensors()) {
        o.data.iter_mut().zip(&t.data).for_each(|(x, y)| *x += y);
    }
    out
}

fn max_abs_diff(a: &ModelParams, b: &ModelParams) -> f64 {
    a.tensors()
        .iter()
        .zip(b.tensors())
        .flat_map(|((_, x), (_, y))| x.data.iter().zip(&y.data).map(|(p, q)| (p - q).abs()).collect::<Vec<_>>())
        .fold(0.0, f64::max)
}

#[test]
fn plain_classification_episode_is_two_chained_cross_entropy_gradients() {
    let cfg = tiny_model();
    let ds = tiny_dataset(8, 4);
    let state = ModelState::new(cfg.clone(), 2).unwrap();
    let hyper = HyperParams {
        k: 2,
        alpha: 0.05,
        lambda_m: 0.0,
        lambda_p: 0.0,
        lambda_dep: 0.0,
        ..HyperParams::default()
    };
    let mut rng = stream(0, Stream::Prior, &[1]);
    let b1: Vec<usize> = (0..4).collect();
    let bt: Vec<usize> = (8..12).collect();
    let p1 = draw_prior(&mut rng, 4, cfg.adaptation_width);
    let pt = draw_prior(&mut rng, 4, cfg.adaptation_width);
    let ep = Episode {
        meta_train_domains: vec![1],
        meta_test_domain: 2,
        train_batches: vec![b1.clone()],
        test_batch: bt.clone(),
        train_priors: vec![p1.clone()],
        test_prior: pt.clone(),
    };
    let got = episode_gradients(&state.params, &cfg, &hyper, &ds.source, &ep, None).unwrap();

    let (g1, _) = erm_gradients(&state.params, &cfg, &hyper, &ds.source, &b1, &p1).unwrap();
    let adapted = inner_update(&state.params.meta.to_flat(), &g1.meta.to_flat(), hyper.alpha).unwrap();
    let mut shifted = state.params.clone();
    shifted.meta = MetaLearnerParams::from_flat(cfg.head_dims(), &adapted).unwrap();
    let (gt, _) = erm_gradients(&shifted, &cfg, &hyper, &ds.source, &bt, &pt).unwrap();
    let want = add(&g1, &gt);
    let diff = max_abs_diff(&got.grads, &want);
    assert!(diff < 1e-10, "max difference {diff}");
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let cfg = tiny_model();
    let ds = tiny_dataset(8, 4);
    let mut state = ModelState::new(cfg.clone(), 3).unwrap();
    let before = state.params.clone();
    let mut adam = Adam::new(&state.params, 0.0);
    let hyper = HyperParams::default();
    let ep = sample_episode(&latent_members(&ds, 3), 4, cfg.adaptation_width, 0, 1, 0).unwrap();
    meta_step(&mut state, &mut adam, &hyper, &ds.source, &ep).unwrap();
    assert_eq!(state.params, before);
    assert_eq!(state.step, 1);
}

#[test]
fn loss_weights_switch_their_terms() {
    let cfg = tiny_model();
    let ds = tiny_dataset(8, 4);
    let state = ModelState::new(cfg.clone(), 3).unwrap();
    let ep = sample_episode(&latent_members(&ds, 3), 4, cfg.adaptation_width, 0, 1, 0).unwrap();
    let base = HyperParams::default();
    let full = episode_gradients(&state.params, &cfg, &base, &ds.source, &ep, None).unwrap();
    let no_p = HyperParams { lambda_p: 0.0, ..base.clone() };
    let g = episode_gradients(&state.params, &cfg, &no_p, &ds.source, &ep, None).unwrap();
    // The entropy heads only receive gradient from the entropy loss.
    assert!(g.grads.extractor.blocks.iter().all(|b| b.drlm.wp.data.iter().all(|&v| v == 0.0)));
    assert!(full.grads.extractor.blocks.iter().any(|b| b.drlm.wp.data.iter().any(|&v| v != 0.0)));
    assert_eq!(g.losses.lp, full.losses.lp);

    let no_m = HyperParams { lambda_m: 0.0, ..base.clone() };
    let g = episode_gradients(&state.params, &cfg, &no_m, &ds.source, &ep, None).unwrap();
    assert_ne!(g.grads.meta, full.grads.meta);
    // The depth head only sees the depth loss.
    assert_eq!(g.grads.depth, full.grads.depth);
    let no_dep = HyperParams { lambda_dep: 0.0, ..base };
    let g = episode_gradients(&state.params, &cfg, &no_dep, &ds.source, &ep, None).unwrap();
    assert!(g.grads.depth.conv1_weight.data.iter().all(|&v| v == 0.0));
}

#[test]
fn fifty_meta_steps_reduce_the_objective() {
    let cfg = tiny_model();
    let ds = tiny_dataset(16, 6);
    let members = latent_members(&ds, 3);
    let hyper = HyperParams { beta: 1e-2, batch_size: 8, ..HyperParams::default() };
    let mut state = ModelState::new(cfg.clone(), 5).unwrap();
    // Fixed evaluation episodes, kernels taken at the starting point.
    let eval: Vec<Episode> = (0..4)
        .map(|i| sample_episode(&members, 8, cfg.adaptation_width, 99, 0, i).unwrap())
        .collect();
    let kernels: Vec<_> = eval
        .iter()
        .map(|ep| episode_gradients(&state.params, &cfg, &hyper, &ds.source, ep, None).unwrap().kernels)
        .collect();
    let objective = |p: &ModelParams| -> f64 {
        eval.iter()
            .zip(&kernels)
            .map(|(ep, k)| episode_objective(p, &cfg, &hyper, &ds.source, ep, k, None).unwrap().total)
            .sum::<f64>()
            / eval.len() as f64
    };
    let start = objective(&state.params);
    let mut adam = Adam::new(&state.params, hyper.beta);
    for step in 0..50 {
        let ep = sample_episode(&members, 8, cfg.adaptation_width, 1, 1, step).unwrap();
        meta_step(&mut state, &mut adam, &hyper, &ds.source, &ep).unwrap();
    }
    let end = objective(&state.params);
    println!("objective {start:.4} -> {end:.4}");
    assert!((start - end) / start.abs() >= 0.2, "objective {start} -> {end}");
}

#[test]
fn training_is_deterministic() {
    let cfg = tiny_model();
    let ds = tiny_dataset(12, 7);
    let hyper = HyperParams { epochs: 2, batch_size: 4, beta: 1e-3, ..HyperParams::default() };
    let a = train(&ds, cfg.clone(), &hyper, None).unwrap();
    let b = train(&ds, cfg, &hyper, None).unwrap();
    assert_eq!(a.state, b.state);
    assert_eq!(a.history, b.history);
    assert_eq!(a.iterations.len(), b.iterations.len());
    assert!(a.iterations.iter().zip(&b.iterations).all(|(x, y)| x.losses == y.losses));
}
