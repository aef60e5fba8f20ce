//! Evaluation metrics, domain-gap diagnostics and ablation wiring.
//!
//! Scores are the meta learner's live probability, so "live" is the positive
//! class: FAR is the fraction of spoof samples scored at or above the
//! threshold, FRR the fraction of live samples scored below it.

use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::data_synth::{Dataset, Sample, LIVE, SPOOF};
use crate::error::{Error, Result};
use crate::losses::KernelSpec;
use crate::meta_trainer::{train, DomainSource, HyperParams, TrainMode, TrainOutcome};
use crate::model::{extractor_forward, head_forward, ModelConfig, ModelState};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub far: f64,
    pub tpr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Roc {
    /// From (0, 0) to (1, 1), one point per distinct score.
    pub points: Vec<RocPoint>,
    pub auc: f64,
}

fn class_counts(scores: &[f64], labels: &[u8]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::Metric(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Metric("scores must be finite".into()));
    }
    let live = labels.iter().filter(|&&y| y == LIVE).count();
    let spoof = labels.iter().filter(|&&y| y == SPOOF).count();
    if live + spoof != labels.len() {
        return Err(Error::Metric("labels must be 0 (spoof) or 1 (live)".into()));
    }
    if live == 0 || spoof == 0 {
        return Err(Error::Metric("both classes must be present".into()));
    }
    Ok((live, spoof))
}

/// ROC by sweeping every distinct score as a threshold, AUC by the
/// trapezoid rule. Tied scores move together, so ties earn half credit.
pub fn roc_and_auc(scores: &[f64], labels: &[u8]) -> Result<Roc> {
    let (n_live, n_spoof) = class_counts(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![RocPoint { far: 0.0, tpr: 0.0 }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] == LIVE {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            far: fp as f64 / n_spoof as f64,
            tpr: tp as f64 / n_live as f64,
        });
    }
    let auc = points
        .windows(2)
        .map(|w| (w[1].far - w[0].far) * (w[1].tpr + w[0].tpr) / 2.0)
        .sum();
    Ok(Roc { points, auc })
}

/// `(FAR, FRR)` at `threshold`.
pub fn error_rates(scores: &[f64], labels: &[u8], threshold: f64) -> Result<(f64, f64)> {
    let (n_live, n_spoof) = class_counts(scores, labels)?;
    let mut fa = 0;
    let mut fr = 0;
    for (&s, &y) in scores.iter().zip(labels) {
        if y == SPOOF && s >= threshold {
            fa += 1;
        }
        if y == LIVE && s < threshold {
            fr += 1;
        }
    }
    Ok((fa as f64 / n_spoof as f64, fr as f64 / n_live as f64))
}

/// Half total error rate `(FAR + FRR) / 2` at `threshold`.
pub fn hter(scores: &[f64], labels: &[u8], threshold: f64) -> Result<f64> {
    let (far, frr) = error_rates(scores, labels, threshold)?;
    Ok(0.5 * (far + frr))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Eer {
    pub threshold: f64,
    pub far: f64,
    pub frr: f64,
    /// `(far + frr) / 2` at the chosen threshold.
    pub eer: f64,
}

/// Threshold where FAR and FRR are closest; ties prefer the lower error, then
/// the lower threshold. Thresholds sit halfway between adjacent distinct
/// scores, so a perfectly separated split gets the middle of the gap rather
/// than its edge.
pub fn eer_threshold(scores: &[f64], labels: &[u8]) -> Result<Eer> {
    let (n_live, n_spoof) = class_counts(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Ascending sweep: at threshold t = order[i]'s score, everything below
    // t is rejected.
    let mut live_below = 0usize;
    let mut spoof_below = 0usize;
    let mut best: Option<Eer> = None;
    let mut prev: Option<f64> = None;
    let mut i = 0;
    while i < order.len() {
        let t = scores[order[i]];
        let threshold = match prev {
            Some(p) if 0.5 * (p + t) > p => 0.5 * (p + t),
            _ => t,
        };
        let far = (n_spoof - spoof_below) as f64 / n_spoof as f64;
        let frr = live_below as f64 / n_live as f64;
        let cand = Eer {
            threshold,
            far,
            frr,
            eer: 0.5 * (far + frr),
        };
        let better = match &best {
            None => true,
            Some(b) => {
                let (dc, db) = ((cand.far - cand.frr).abs(), (b.far - b.frr).abs());
                dc < db || (dc == db && cand.eer < b.eer)
            }
        };
        if better {
            best = Some(cand);
        }
        while i < order.len() && scores[order[i]] == t {
            if labels[order[i]] == LIVE {
                live_below += 1;
            } else {
                spoof_below += 1;
            }
            i += 1;
        }
        prev = Some(t);
    }
    Ok(best.expect("non-empty scores"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainScores {
    pub domain: usize,
    pub count: usize,
    pub mean_live_score: Option<f64>,
    pub mean_spoof_score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub auc: f64,
    pub hter: f64,
    pub far: f64,
    pub frr: f64,
    /// Picked on the source validation split.
    pub eer_threshold: f64,
    pub val_eer: f64,
    pub n_test: usize,
    pub roc: Vec<RocPoint>,
    pub per_domain: Vec<DomainScores>,
}

/// Live probability for each sample.
pub fn score_samples(state: &ModelState, samples: &[&Sample]) -> Result<Vec<f64>> {
    let mut emb = Vec::with_capacity(samples.len() * state.config.embedding_width());
    for s in samples {
        emb.extend(extractor_forward(&state.params.extractor, &state.config, &s.image)?.embedding);
    }
    Ok(head_forward(&state.params.meta, &emb)?.1)
}

/// Domain features and embeddings of `samples` under a trained extractor.
pub fn model_domain_features(
    state: &ModelState,
    samples: &[&Sample],
    select: bool,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let mut df = Vec::with_capacity(samples.len());
    let mut emb = Vec::with_capacity(samples.len());
    for s in samples {
        let trace = extractor_forward(&state.params.extractor, &state.config, &s.image)?;
        df.push(crate::domain_repr::domain_feature(&trace, crate::domain_repr::STATS_EPS, select)?);
        emb.push(trace.embedding);
    }
    Ok((df, emb))
}

fn per_domain(samples: &[&Sample], scores: &[f64]) -> Vec<DomainScores> {
    let mut domains: Vec<usize> = samples.iter().map(|s| s.latent_domain).collect();
    domains.sort_unstable();
    domains.dedup();
    domains
        .into_iter()
        .map(|d| {
            let mean = |class: u8| {
                let v: Vec<f64> = samples
                    .iter()
                    .zip(scores)
                    .filter(|(s, _)| s.latent_domain == d && s.label == class)
                    .map(|(_, &x)| x)
                    .collect();
                (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
            };
            DomainScores {
                domain: d,
                count: samples.iter().filter(|s| s.latent_domain == d).count(),
                mean_live_score: mean(LIVE),
                mean_spoof_score: mean(SPOOF),
            }
        })
        .collect()
}

/// Held-out metrics with the threshold taken from the validation samples.
pub fn evaluate(state: &ModelState, val: &[&Sample], test: &[&Sample]) -> Result<MetricsReport> {
    if val.is_empty() || test.is_empty() {
        return Err(Error::Metric("validation and test sets must be non-empty".into()));
    }
    let val_scores = score_samples(state, val)?;
    let val_labels: Vec<u8> = val.iter().map(|s| s.label).collect();
    let eer = eer_threshold(&val_scores, &val_labels)?;
    let scores = score_samples(state, test)?;
    let labels: Vec<u8> = test.iter().map(|s| s.label).collect();
    let roc = roc_and_auc(&scores, &labels)?;
    let (far, frr) = error_rates(&scores, &labels, eer.threshold)?;
    Ok(MetricsReport {
        auc: roc.auc,
        hter: 0.5 * (far + frr),
        far,
        frr,
        eer_threshold: eer.threshold,
        val_eer: eer.eer,
        n_test: test.len(),
        roc: roc.points,
        per_domain: per_domain(test, &scores),
    })
}

/// Looks up validation samples by id and evaluates on the held-out split.
pub fn evaluate_dataset(state: &ModelState, dataset: &Dataset, val_ids: &[usize]) -> Result<MetricsReport> {
    let val: Vec<&Sample> = val_ids
        .iter()
        .map(|&id| {
            dataset
                .source
                .iter()
                .find(|s| s.id == id)
                .ok_or_else(|| Error::Metric(format!("validation sample {id} not in dataset")))
        })
        .collect::<Result<_>>()?;
    let test: Vec<&Sample> = dataset.held_out.iter().collect();
    if test.is_empty() {
        return Err(Error::Metric("dataset has no held-out domain".into()));
    }
    evaluate(state, &val, &test)
}

pub fn roc_csv(points: &[RocPoint]) -> String {
    let mut s = String::from("far,tpr\n");
    for p in points {
        s.push_str(&format!("{},{}\n", p.far, p.tpr));
    }
    s
}

/// Biased squared MMD between two point sets of possibly different sizes.
pub fn mmd_between(a: &[Vec<f64>], b: &[Vec<f64>], kernel: &KernelSpec) -> f64 {
    let mean_k = |x: &[Vec<f64>], y: &[Vec<f64>]| {
        let mut s = 0.0;
        for p in x {
            for q in y {
                s += kernel.eval(p, q);
            }
        }
        s / (x.len() * y.len()) as f64
    };
    (mean_k(a, a) + mean_k(b, b) - 2.0 * mean_k(a, b)).max(0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MmdMatrix {
    /// Symmetric, zero diagonal; NaN for skipped pairs.
    pub matrix: Vec<Vec<f64>>,
    pub mean_off_diagonal: f64,
}

/// Pairwise domain gaps. Each pair uses the median-heuristic kernel of its
/// merged sample; pairs involving a singleton domain are skipped.
pub fn inter_domain_mmd(domains: &[Vec<Vec<f64>>]) -> Result<MmdMatrix> {
    let k = domains.len();
    if k < 2 {
        return Err(Error::Metric(format!("need at least 2 domains, got {k}")));
    }
    let dim = domains.iter().flatten().map(Vec::len).next().unwrap_or(0);
    if domains.iter().flatten().any(|p| p.len() != dim) {
        return Err(Error::Metric("embedding dimensions differ".into()));
    }
    let mut matrix = vec![vec![0.0; k]; k];
    let mut total = 0.0;
    let mut pairs = 0;
    for i in 0..k {
        for j in i + 1..k {
            if domains[i].len() < 2 || domains[j].len() < 2 {
                warn!("skipping MMD between domains {i} and {j}: singleton or empty domain");
                matrix[i][j] = f64::NAN;
                matrix[j][i] = f64::NAN;
                continue;
            }
            let fa: Vec<f64> = domains[i].iter().flatten().copied().collect();
            let fb: Vec<f64> = domains[j].iter().flatten().copied().collect();
            let kernel = KernelSpec::median_heuristic(&fa, &fb, dim);
            let m = mmd_between(&domains[i], &domains[j], &kernel);
            matrix[i][j] = m;
            matrix[j][i] = m;
            total += m;
            pairs += 1;
        }
    }
    let mean_off_diagonal = if pairs > 0 { total / pairs as f64 } else { f64::NAN };
    Ok(MmdMatrix {
        matrix,
        mean_off_diagonal,
    })
}

/// Training variants compared against the full method.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationVariant {
    Full,
    GtDomains,
    WoDomains,
    WoSelect,
    WoLp,
    WoMmd,
    Erm,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 7] = [
        AblationVariant::Full,
        AblationVariant::GtDomains,
        AblationVariant::WoDomains,
        AblationVariant::WoSelect,
        AblationVariant::WoLp,
        AblationVariant::WoMmd,
        AblationVariant::Erm,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            AblationVariant::Full => "full",
            AblationVariant::GtDomains => "gt_domains",
            AblationVariant::WoDomains => "wo_domains",
            AblationVariant::WoSelect => "wo_select",
            AblationVariant::WoLp => "wo_lp",
            AblationVariant::WoMmd => "wo_mmd",
            AblationVariant::Erm => "erm",
        }
    }

    pub fn parse(tag: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.tag() == tag)
            .ok_or_else(|| {
                let tags: Vec<&str> = Self::ALL.iter().map(|v| v.tag()).collect();
                Error::Config(format!("unknown variant {tag:?}; expected one of {}", tags.join(", ")))
            })
    }

    /// The hyperparameters this variant trains with.
    pub fn apply(self, base: &HyperParams) -> HyperParams {
        let mut h = base.clone();
        match self {
            AblationVariant::Full => {}
            AblationVariant::GtDomains => h.domains = DomainSource::GroundTruth,
            AblationVariant::WoDomains => h.domains = DomainSource::Random,
            AblationVariant::WoSelect => h.select_channels = false,
            AblationVariant::WoLp => h.lambda_p = 0.0,
            AblationVariant::WoMmd => h.lambda_m = 0.0,
            AblationVariant::Erm => h.mode = TrainMode::Erm,
        }
        h
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationConfig {
    pub variant: AblationVariant,
    /// Replaces the number of pseudo domains.
    pub k: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct AblationResult {
    pub variant: AblationVariant,
    pub metrics: MetricsReport,
    pub outcome: TrainOutcome,
}

/// Trains one variant and evaluates it on the held-out domain.
pub fn run_ablation(
    config: &AblationConfig,
    dataset: &Dataset,
    model: &ModelConfig,
    base: &HyperParams,
    out: Option<&Path>,
) -> Result<AblationResult> {
    let mut hyper = config.variant.apply(base);
    if let Some(k) = config.k {
        hyper.k = k;
    }
    let outcome = train(dataset, model.clone(), &hyper, out)?;
    let val: Vec<&Sample> = outcome.val_idx.iter().map(|&i| &dataset.source[i]).collect();
    let test: Vec<&Sample> = dataset.held_out.iter().collect();
    let metrics = evaluate(&outcome.state, &val, &test)?;
    Ok(AblationResult {
        variant: config.variant,
        metrics,
        outcome,
    })
}
