//! Episodic meta-training over pseudo domains.

mod episode;
mod step;

pub use episode::{domain_members, sample_episode, sample_pool_batch, split_meta_domains, Episode};
pub use step::{
    episode_gradients, episode_objective, inner_update, meta_step, Adam, EpisodeKernels,
    LossBreakdown, MetaGradients,
};

use std::fs;
use std::io::Write as _;
use std::path::Path;

use log::info;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::clustering::{
    assign_pseudo_domains, choose_k, nmi, ClusterAssignment, KMeansConfig, ReferenceExtractor,
};
use crate::data_synth::{Dataset, Sample, LIVE, SPOOF};
use crate::domain_repr::{domain_feature, ZScore, STATS_EPS};
use crate::error::{Error, Result};
use crate::harness::inter_domain_mmd;
use crate::losses::{draw_prior, KernelSpec};
use crate::model::{
    extractor_forward, head_forward, head_objective, save_checkpoint, ModelConfig, ModelParams,
    ModelState,
};
use crate::rng::{stream, Stream};
use step::forward_batch;

/// Bandwidth choice for the MMD terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum KernelPolicy {
    /// `{0.5, 1, 2} ×` median pairwise squared distance, per batch.
    #[default]
    Median,
    /// Fixed σ² values.
    Fixed(Vec<f64>),
}

impl KernelPolicy {
    pub fn resolve(&self, h: &[f64], prior: &[f64], dim: usize) -> Result<KernelSpec> {
        match self {
            KernelPolicy::Median => Ok(KernelSpec::median_heuristic(h, prior, dim)),
            KernelPolicy::Fixed(b) => KernelSpec::new(b.clone()),
        }
    }
}

/// Where each epoch's domain labels come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DomainSource {
    /// Clustering on domain features (the method itself).
    #[default]
    Clustered,
    /// The generator's latent domains.
    GroundTruth,
    /// Uniform random labels redrawn every epoch.
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    #[default]
    Meta,
    /// Pooled minibatches, classification and depth losses only.
    Erm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HyperParams {
    /// Inner (meta-train) learning rate.
    pub alpha: f64,
    /// Outer Adam learning rate.
    pub beta: f64,
    pub lambda_p: f64,
    pub lambda_m: f64,
    pub lambda_dep: f64,
    pub lambda_cls: f64,
    /// Number of pseudo domains.
    pub k: usize,
    /// Pick `k` by silhouette over 2..=5 on the first clustering pass.
    pub auto_k: bool,
    pub batch_size: usize,
    pub epochs: usize,
    /// Overrides `⌈n / (k·b)⌉`.
    pub iterations_per_epoch: Option<usize>,
    pub first_order: bool,
    pub seed: u64,
    /// Fraction of source samples held back to pick the decision threshold.
    pub val_fraction: f64,
    pub kernel: KernelPolicy,
    pub domains: DomainSource,
    /// Cluster on the low-attention half of the channels only.
    pub select_channels: bool,
    pub mode: TrainMode,
    /// Per-epoch NMI and inter-domain MMD reporting.
    pub diagnostics: bool,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            alpha: 1e-3,
            beta: 1e-4,
            lambda_p: 0.1,
            lambda_m: 0.05,
            lambda_dep: 1.0,
            lambda_cls: 1.0,
            k: 3,
            auto_k: false,
            batch_size: 32,
            epochs: 20,
            iterations_per_epoch: None,
            first_order: true,
            seed: 0,
            val_fraction: 0.1,
            kernel: KernelPolicy::Median,
            domains: DomainSource::Clustered,
            select_channels: true,
            mode: TrainMode::Meta,
            diagnostics: true,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: &str| Err(Error::Config(format!("{field} {why}")));
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return bad("alpha", "must be positive");
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return bad("beta", "must be positive");
        }
        for (name, v) in [
            ("lambda_p", self.lambda_p),
            ("lambda_m", self.lambda_m),
            ("lambda_dep", self.lambda_dep),
            ("lambda_cls", self.lambda_cls),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(name, "must be non-negative");
            }
        }
        if self.k < 2 {
            return bad("k", "must be at least 2");
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch_size and epochs", "must be positive");
        }
        if self.iterations_per_epoch == Some(0) {
            return bad("iterations_per_epoch", "must be positive");
        }
        if !(0.0..0.5).contains(&self.val_fraction) {
            return bad("val_fraction", "must lie in [0, 0.5)");
        }
        if let KernelPolicy::Fixed(b) = &self.kernel {
            KernelSpec::new(b.clone())?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationLog {
    /// Global meta-step, 1-based.
    pub iteration: u64,
    pub epoch: usize,
    /// 0 for the pooled baseline.
    pub meta_test_domain: usize,
    pub losses: LossBreakdown,
}

pub const TRAIN_LOG_HEADER: &str =
    "iteration,epoch,meta_test_domain,l_cls,l_mmd,l_dep,l_p1,l_p2,l_p3,l_meta_test,total";

impl IterationLog {
    pub fn csv_row(&self) -> String {
        let l = &self.losses;
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.iteration, self.epoch, self.meta_test_domain, l.cls, l.mmd, l.dep, l.lp[0], l.lp[1], l.lp[2], l.meta_test, l.total
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub k: usize,
    pub nmi_gt: Option<f64>,
    pub nmi_prev: Option<f64>,
    /// Fraction of samples whose label differs from the previous epoch.
    pub changed_fraction: Option<f64>,
    pub fallback_fired: bool,
    pub domain_sizes: Vec<usize>,
    pub inter_mmd_pseudo: Option<f64>,
    pub inter_mmd_gt: Option<f64>,
    pub inertia_pos: Option<f64>,
    pub inertia_neg: Option<f64>,
    pub mean_total_loss: f64,
    pub seconds: f64,
}

pub const EPOCHS_HEADER: &str = "epoch,k,nmi_gt,nmi_prev,changed_fraction,fallback_fired,domain_sizes,inter_mmd_pseudo,inter_mmd_gt,inertia_pos,inertia_neg,mean_total_loss,seconds";

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}

impl EpochSummary {
    pub fn csv_row(&self) -> String {
        let sizes: Vec<String> = self.domain_sizes.iter().map(usize::to_string).collect();
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{:.3}",
            self.epoch,
            self.k,
            opt(self.nmi_gt),
            opt(self.nmi_prev),
            opt(self.changed_fraction),
            self.fallback_fired,
            sizes.join(";"),
            opt(self.inter_mmd_pseudo),
            opt(self.inter_mmd_gt),
            opt(self.inertia_pos),
            opt(self.inertia_neg),
            self.mean_total_loss,
            self.seconds
        )
    }
}

/// Stratified split of the source samples into (train, validation) indices.
pub fn validation_split(source: &[Sample], fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = stream(seed, Stream::Split, &[]);
    let mut train = Vec::new();
    let mut val = Vec::new();
    for class in [LIVE, SPOOF] {
        let mut idx: Vec<usize> = (0..source.len()).filter(|&i| source[i].label == class).collect();
        idx.shuffle(&mut rng);
        let n_val = (idx.len() as f64 * fraction).round() as usize;
        val.extend_from_slice(&idx[..n_val]);
        train.extend_from_slice(&idx[n_val..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

/// Up to `cap` evenly spaced members of each group.
fn thin(groups: Vec<Vec<usize>>, cap: usize) -> Vec<Vec<usize>> {
    groups
        .into_iter()
        .map(|g| {
            if g.len() <= cap {
                g
            } else {
                (0..cap).map(|j| g[j * g.len() / cap]).collect()
            }
        })
        .collect()
}

const DIAGNOSTIC_CAP: usize = 256;

/// Mean off-diagonal inter-domain MMD of embeddings under a labeling.
fn partition_mmd(embeddings: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let mut groups = vec![Vec::new(); k];
    for (i, &l) in labels.iter().enumerate() {
        groups[l].push(i);
    }
    let groups: Vec<Vec<usize>> = thin(groups.into_iter().filter(|g| !g.is_empty()).collect(), DIAGNOSTIC_CAP);
    let sets: Vec<Vec<Vec<f64>>> = groups
        .iter()
        .map(|g| g.iter().map(|&i| embeddings[i].clone()).collect())
        .collect();
    Ok(inter_domain_mmd(&sets)?.mean_off_diagonal)
}

/// Training state across epochs.
pub struct Trainer<'a> {
    pub hyper: HyperParams,
    pub state: ModelState,
    adam: Adam,
    source: &'a [Sample],
    train_idx: Vec<usize>,
    val_idx: Vec<usize>,
    reference: ReferenceExtractor,
    kmeans: KMeansConfig,
    k: usize,
    assignment: Option<ClusterAssignment>,
    pub history: Vec<ClusterAssignment>,
    pub iterations: Vec<IterationLog>,
    pub epochs: Vec<EpochSummary>,
}

impl<'a> Trainer<'a> {
    pub fn new(dataset: &'a Dataset, config: ModelConfig, hyper: HyperParams) -> Result<Self> {
        hyper.validate()?;
        config.validate()?;
        if config.image_size != dataset.spec.image_size || config.depth_size != dataset.spec.depth_size {
            return Err(Error::Config(format!(
                "model expects {:?} images and {:?} depth maps, dataset has {:?} and {:?}",
                config.image_size, config.depth_size, dataset.spec.image_size, dataset.spec.depth_size
            )));
        }
        let state = ModelState::new(config.clone(), hyper.seed)?;
        let adam = Adam::new(&state.params, hyper.beta);
        let (train_idx, val_idx) = validation_split(&dataset.source, hyper.val_fraction, hyper.seed);
        let k = match hyper.domains {
            DomainSource::GroundTruth => dataset.spec.num_latent_domains,
            _ => hyper.k,
        };
        if train_idx.len() < 2 * k {
            return Err(Error::Config(format!(
                "{} training samples cannot fill {k} domains",
                train_idx.len()
            )));
        }
        let reference = ReferenceExtractor::new(config, hyper.seed)?;
        Ok(Trainer {
            hyper,
            state,
            adam,
            source: &dataset.source,
            train_idx,
            val_idx,
            reference,
            kmeans: KMeansConfig::default(),
            k,
            assignment: None,
            history: Vec::new(),
            iterations: Vec::new(),
            epochs: Vec::new(),
        })
    }

    pub fn train_indices(&self) -> &[usize] {
        &self.train_idx
    }

    pub fn val_indices(&self) -> &[usize] {
        &self.val_idx
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn current_assignment(&self) -> Option<&ClusterAssignment> {
        self.assignment.as_ref()
    }

    fn classes(&self) -> Vec<u8> {
        self.train_idx.iter().map(|&i| self.source[i].label).collect()
    }

    fn latent(&self) -> Vec<usize> {
        self.train_idx.iter().map(|&i| self.source[i].latent_domain).collect()
    }

    /// Domain features (and model embeddings) of the training samples.
    fn features(&self, from_reference: bool, want_embeddings: bool) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let select = self.hyper.select_channels;
        let mut df = Vec::with_capacity(self.train_idx.len());
        let mut emb = Vec::new();
        for &i in &self.train_idx {
            let image = &self.source[i].image;
            if from_reference {
                df.push(self.reference.domain_feature(image, select)?);
                if want_embeddings {
                    emb.push(extractor_forward(&self.state.params.extractor, &self.state.config, image)?.embedding);
                }
            } else {
                let trace = extractor_forward(&self.state.params.extractor, &self.state.config, image)?;
                df.push(domain_feature(&trace, STATS_EPS, select)?);
                if want_embeddings {
                    emb.push(trace.embedding);
                }
            }
        }
        Ok((df, emb))
    }

    fn embeddings(&self) -> Result<Vec<Vec<f64>>> {
        self.train_idx
            .iter()
            .map(|&i| Ok(extractor_forward(&self.state.params.extractor, &self.state.config, &self.source[i].image)?.embedding))
            .collect()
    }

    /// The first-epoch clustering on reference-extractor features, computed
    /// without touching the trainer. Uses the configured `k` as is.
    pub fn bootstrap_assignment(&self) -> Result<ClusterAssignment> {
        let (df, _) = self.features(true, false)?;
        let z = ZScore::fit(&df)?.apply_all(&df);
        assign_pseudo_domains(&self.classes(), &z, self.k, None, 1, self.hyper.seed, &self.kmeans)
    }

    /// Refreshes the pseudo domains for `epoch`; returns the embeddings used
    /// for diagnostics when they were computed along the way.
    fn assign_domains(&mut self, epoch: usize) -> Result<Option<Vec<Vec<f64>>>> {
        let classes = self.classes();
        let n = classes.len();
        let diag = self.hyper.diagnostics;
        let (assignment, emb) = match self.hyper.domains {
            DomainSource::Clustered => {
                let first = self.assignment.is_none();
                let (df, emb) = self.features(first, diag)?;
                let z = ZScore::fit(&df)?.apply_all(&df);
                if first && self.hyper.auto_k {
                    self.k = choose_k(&z, &[2, 3, 4, 5], self.hyper.seed, &self.kmeans)?;
                    info!("pre-clustering chose k = {}", self.k);
                }
                let a = assign_pseudo_domains(
                    &classes,
                    &z,
                    self.k,
                    self.assignment.as_ref(),
                    epoch,
                    self.hyper.seed,
                    &self.kmeans,
                )?;
                (a, diag.then_some(emb))
            }
            DomainSource::GroundTruth => {
                let labels = self.latent().into_iter().map(|d| d + 1).collect();
                (plain_assignment(epoch, self.k, labels), None)
            }
            DomainSource::Random => {
                let mut rng = stream(self.hyper.seed, Stream::RandomDomains, &[epoch as u64]);
                let labels = (0..n).map(|_| rng.random_range(1..=self.k)).collect();
                (plain_assignment(epoch, self.k, labels), None)
            }
        };
        self.assignment = Some(assignment);
        Ok(emb)
    }

    /// One pass of pseudo-domain assignment followed by the epoch's meta-steps.
    pub fn train_epoch(&mut self) -> Result<&EpochSummary> {
        let t0 = std::time::Instant::now();
        let epoch = self.state.epoch + 1;
        let prev = self.assignment.clone();
        let meta = self.hyper.mode == TrainMode::Meta;
        let mut emb = None;
        if meta {
            emb = self.assign_domains(epoch)?;
        }

        let mut summary = EpochSummary {
            epoch,
            k: self.k,
            nmi_gt: None,
            nmi_prev: None,
            changed_fraction: None,
            fallback_fired: false,
            domain_sizes: Vec::new(),
            inter_mmd_pseudo: None,
            inter_mmd_gt: None,
            inertia_pos: None,
            inertia_neg: None,
            mean_total_loss: 0.0,
            seconds: 0.0,
        };
        if let Some(a) = &self.assignment {
            let latent = self.latent();
            summary.nmi_gt = Some(nmi(&a.labels, &latent)?);
            if let Some(p) = &prev {
                summary.nmi_prev = Some(nmi(&a.labels, &p.labels)?);
                let changed = a.labels.iter().zip(&p.labels).filter(|(x, y)| x != y).count();
                summary.changed_fraction = Some(changed as f64 / a.labels.len() as f64);
            }
            summary.fallback_fired = a.fallback_fired;
            summary.domain_sizes = a.domain_sizes();
            if self.hyper.domains == DomainSource::Clustered {
                summary.inertia_pos = Some(a.inertia_pos);
                summary.inertia_neg = Some(a.inertia_neg);
            }
            if self.hyper.diagnostics {
                let emb = match emb.take() {
                    Some(e) => e,
                    None => self.embeddings()?,
                };
                summary.inter_mmd_pseudo = Some(partition_mmd(&emb, &a.zero_based())?);
                summary.inter_mmd_gt = Some(partition_mmd(&emb, &latent)?);
            }
            self.history.push(a.clone());
        }

        let b = self.hyper.batch_size;
        let iters = self
            .hyper
            .iterations_per_epoch
            .unwrap_or_else(|| self.train_idx.len().div_ceil(self.k * b));
        let members: Option<Vec<Vec<usize>>> = match &self.assignment {
            Some(a) if meta => Some(
                domain_members(&a.labels, self.k)?
                    .into_iter()
                    .map(|m| m.into_iter().map(|j| self.train_idx[j]).collect())
                    .collect(),
            ),
            _ => None,
        };
        let hidden = self.state.config.adaptation_width;
        let mut total = 0.0;
        for _ in 0..iters {
            let step = self.state.step;
            let (domain, losses) = match &members {
                Some(m) => {
                    let ep = sample_episode(m, b, hidden, self.hyper.seed, epoch, step)?;
                    let l = meta_step(&mut self.state, &mut self.adam, &self.hyper, self.source, &ep)?;
                    (ep.meta_test_domain, l)
                }
                None => {
                    let batch = sample_pool_batch(&self.train_idx, self.k * b, self.hyper.seed, epoch, step);
                    let l = erm_step(&mut self.state, &mut self.adam, &self.hyper, self.source, &batch)?;
                    (0, l)
                }
            };
            total += losses.total;
            self.iterations.push(IterationLog {
                iteration: self.state.step,
                epoch,
                meta_test_domain: domain,
                losses,
            });
        }
        self.state.epoch = epoch;
        summary.mean_total_loss = total / iters as f64;
        summary.seconds = t0.elapsed().as_secs_f64();
        info!(
            "epoch {epoch}: loss {:.4} nmi_gt {} nmi_prev {} ({:.1}s)",
            summary.mean_total_loss,
            opt(summary.nmi_gt),
            opt(summary.nmi_prev),
            summary.seconds
        );
        self.epochs.push(summary);
        Ok(self.epochs.last().expect("just pushed"))
    }
}

fn plain_assignment(epoch: usize, k: usize, labels: Vec<usize>) -> ClusterAssignment {
    ClusterAssignment {
        epoch,
        k,
        labels,
        inertia_pos: 0.0,
        inertia_neg: 0.0,
        match_pos: (0..k).collect(),
        match_neg: (0..k).collect(),
        fallback_fired: false,
    }
}

/// Gradients of `λ_cls·Cls + λ_dep·Dep` on one pooled batch.
pub fn erm_gradients(
    params: &ModelParams,
    cfg: &ModelConfig,
    hyper: &HyperParams,
    samples: &[Sample],
    batch: &[usize],
    prior: &[f64],
) -> Result<(ModelParams, LossBreakdown)> {
    let dims = cfg.head_dims();
    let pass = forward_batch(params, cfg, samples, batch)?;
    let theta = params.meta.to_flat();
    let meta = crate::model::MetaLearnerParams::from_flat(dims, &theta)?;
    let (h, _) = head_forward(&meta, &pass.embeddings)?;
    let kernel = hyper.kernel.resolve(&h, prior, dims.hidden)?;
    let ev = head_objective::<f64>(&theta, dims, &pass.embeddings, &pass.labels, prior, &kernel, hyper.lambda_cls, 0.0);
    let mut grads = params.zeros_like();
    let losses = step::pooled_backward(params, cfg, hyper, &pass, &ev.grad_embedding, &mut grads)?;
    grads.meta = crate::model::MetaLearnerParams::from_flat(dims, &ev.grad_theta)?;
    let mut losses = losses;
    losses.cls = ev.cls;
    losses.mmd = ev.mmd;
    losses.total = ev.loss + hyper.lambda_dep * losses.dep;
    if !losses.total.is_finite() || !grads.is_finite() {
        return Err(Error::NonFinite {
            context: "erm_step",
            detail: losses.to_string(),
        });
    }
    Ok((grads, losses))
}

fn erm_step(
    state: &mut ModelState,
    adam: &mut Adam,
    hyper: &HyperParams,
    samples: &[Sample],
    batch: &[usize],
) -> Result<LossBreakdown> {
    let mut prior_rng = stream(state.seed, Stream::Prior, &[state.epoch as u64 + 1, state.step]);
    let prior = draw_prior(&mut prior_rng, batch.len(), state.config.adaptation_width);
    let (grads, losses) = erm_gradients(&state.params, &state.config, hyper, samples, batch, &prior)?;
    adam.step(&mut state.params, &grads);
    state.step += 1;
    Ok(losses)
}

/// Everything a finished run produced.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: ModelState,
    pub iterations: Vec<IterationLog>,
    pub epochs: Vec<EpochSummary>,
    pub history: Vec<ClusterAssignment>,
    pub train_idx: Vec<usize>,
    pub val_idx: Vec<usize>,
    pub k: usize,
}

/// Metadata stored next to every checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub hyper: HyperParams,
    pub dataset_seed: u64,
    pub k: usize,
    /// Source sample ids reserved for threshold selection.
    pub val_ids: Vec<usize>,
}

pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const CLUSTERS_FILE: &str = "clusters.csv";
pub const EPOCHS_FILE: &str = "epochs.csv";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const FINAL_DIR: &str = "final";

fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Runs all epochs. With `out`, writes a checkpoint per epoch plus the final
/// model, `train_log.csv`, `epochs.csv` and `clusters.csv`.
pub fn train(dataset: &Dataset, config: ModelConfig, hyper: &HyperParams, out: Option<&Path>) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(dataset, config, hyper.clone())?;
    if let Some(dir) = out {
        fs::create_dir_all(dir.join(CHECKPOINT_DIR)).map_err(|e| Error::io(dir, e))?;
    }
    let meta = |t: &Trainer<'_>| RunMeta {
        hyper: t.hyper.clone(),
        dataset_seed: dataset.spec.seed,
        k: t.k,
        val_ids: t.val_idx.iter().map(|&i| dataset.source[i].id).collect(),
    };
    for _ in 0..hyper.epochs {
        trainer.train_epoch()?;
        if let Some(dir) = out {
            let ckpt = dir.join(CHECKPOINT_DIR).join(format!("epoch_{:03}", trainer.state.epoch));
            save_checkpoint(&trainer.state, &ckpt, Some(serde_json::to_value(meta(&trainer))?))?;
        }
    }
    if let Some(dir) = out {
        save_checkpoint(&trainer.state, &dir.join(FINAL_DIR), Some(serde_json::to_value(meta(&trainer))?))?;
        let mut log = String::from(TRAIN_LOG_HEADER);
        log.push('\n');
        for it in &trainer.iterations {
            log.push_str(&it.csv_row());
            log.push('\n');
        }
        write_text(&dir.join(TRAIN_LOG_FILE), &log)?;
        let mut ep = String::from(EPOCHS_HEADER);
        ep.push('\n');
        for e in &trainer.epochs {
            ep.push_str(&e.csv_row());
            ep.push('\n');
        }
        write_text(&dir.join(EPOCHS_FILE), &ep)?;
        write_text(&dir.join(CLUSTERS_FILE), &clusters_csv(dataset, &trainer.train_idx, &trainer.history))?;
    }
    Ok(TrainOutcome {
        k: trainer.k,
        state: trainer.state,
        iterations: trainer.iterations,
        epochs: trainer.epochs,
        history: trainer.history,
        train_idx: trainer.train_idx,
        val_idx: trainer.val_idx,
    })
}

pub const CLUSTERS_HEADER: &str = "epoch,sample_id,label,latent_domain,pseudo_domain";

/// Long-format per-epoch labels.
pub fn clusters_csv(dataset: &Dataset, train_idx: &[usize], history: &[ClusterAssignment]) -> String {
    let mut s = String::from(CLUSTERS_HEADER);
    s.push('\n');
    for a in history {
        for (&i, &l) in train_idx.iter().zip(&a.labels) {
            let smp = &dataset.source[i];
            s.push_str(&format!("{},{},{},{},{}\n", a.epoch, smp.id, smp.label, smp.latent_domain, l));
        }
    }
    s
}
