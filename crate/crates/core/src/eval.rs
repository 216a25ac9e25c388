//! Latent-space evaluation and the ablation experiments: retrieval and
//! alignment metrics, strategy comparison, inference-step sweep, eta sweep,
//! lambda sweep, and diversity spread.
//!
//! Proxy note: image-space quality scores need real images and raters, so
//! every harness here measures latent-space proxies instead — forced-choice
//! retrieval over the noise-free concept bank (chance = 1/num_concepts),
//! cosine alignment to the ground-truth vision embedding, latent MSE, and a
//! diversity spread over independent noise draws. Reports carry this note.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::diffusion::{sample_loop, NoiseSchedule};
use crate::grad::{cosine, Real, Tensor};
use crate::prior::{PriorConfig, PriorNetwork};
use crate::rng::{derive, stream};
use crate::train::{train_run, MetricsRow, Strategy, TrainConfig};
use crate::world::{DatasetSplit, PairSample, Part, World};
use crate::{Error, Result};

// ---- metric primitives ------------------------------------------------------

/// Fraction of rows whose highest-cosine candidate is the truth index.
/// Ties break toward the lowest candidate index.
pub fn retrieval_top1<F: Real>(
    predictions: &Tensor<F>,
    candidates: &Tensor<F>,
    truth: &[usize],
) -> Result<f64> {
    if predictions.cols() != candidates.cols() {
        return Err(Error::Shape(format!(
            "retrieval_top1: prediction width {} vs candidate width {}",
            predictions.cols(),
            candidates.cols()
        )));
    }
    if truth.len() != predictions.rows() {
        return Err(Error::Shape(format!(
            "retrieval_top1: {} truth indices for {} predictions",
            truth.len(),
            predictions.rows()
        )));
    }
    for &t in truth {
        if t >= candidates.rows() {
            return Err(Error::Config(format!(
                "retrieval_top1: truth index {t} out of range for {} candidates",
                candidates.rows()
            )));
        }
    }
    if predictions.rows() == 0 {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for r in 0..predictions.rows() {
        let row = predictions.row(r);
        let mut best = 0usize;
        let mut best_cos = f64::NEG_INFINITY;
        for c in 0..candidates.rows() {
            let s = cosine(row, candidates.row(c));
            if s > best_cos {
                best_cos = s;
                best = c;
            }
        }
        if best == truth[r] {
            hits += 1;
        }
    }
    Ok(hits as f64 / predictions.rows() as f64)
}

/// Batch mean of per-row cosine similarity.
pub fn mean_cosine<F: Real>(predictions: &Tensor<F>, targets: &Tensor<F>) -> Result<f64> {
    if predictions.shape() != targets.shape() {
        return Err(Error::Shape(format!(
            "mean_cosine: {:?} vs {:?}",
            predictions.shape(),
            targets.shape()
        )));
    }
    let n = predictions.rows();
    if n == 0 {
        return Ok(0.0);
    }
    let total: f64 = (0..n).map(|r| cosine(predictions.row(r), targets.row(r))).sum();
    Ok(total / n as f64)
}

/// Batch mean of per-row squared error summed over dimensions.
pub fn latent_mse<F: Real>(predictions: &Tensor<F>, targets: &Tensor<F>) -> Result<f64> {
    if predictions.shape() != targets.shape() {
        return Err(Error::Shape(format!(
            "latent_mse: {:?} vs {:?}",
            predictions.shape(),
            targets.shape()
        )));
    }
    let n = predictions.rows();
    if n == 0 {
        return Ok(0.0);
    }
    let mut total = 0.0f64;
    for (p, t) in predictions.data().iter().zip(targets.data()) {
        let d = p.as_f64() - t.as_f64();
        total += d * d;
    }
    Ok(total / n as f64)
}

/// Mean over prompts of the average pairwise `1 - cosine` among predictions
/// from `k_draws` independent noise draws. Zero when the predictor ignores
/// its noise input.
pub fn diversity_spread<F: Real>(
    net: &PriorNetwork<F>,
    z_y: &Tensor<F>,
    k_draws: usize,
    seed: u64,
) -> Result<f64> {
    diversity_spread_with(
        |eps| net.forward_prior_plain(eps, z_y),
        z_y.rows(),
        z_y.cols(),
        k_draws,
        seed,
    )
}

/// Diversity spread for an arbitrary noise-to-prediction map (used directly
/// by tests and by the diffusion-sampler variant below).
pub fn diversity_spread_with<F: Real>(
    predict: impl Fn(&Tensor<F>) -> Result<Tensor<F>>,
    prompts: usize,
    dim: usize,
    k_draws: usize,
    seed: u64,
) -> Result<f64> {
    if k_draws < 2 {
        return Err(Error::Config(format!("diversity_spread: k_draws {k_draws} < 2")));
    }
    let mut draws = Vec::with_capacity(k_draws);
    for j in 0..k_draws {
        let mut rng = derive(&[seed, stream::DIVERSITY, j as u64]);
        let eps = Tensor::randn(prompts, dim, 1.0, &mut rng);
        draws.push(predict(&eps)?);
    }
    Ok(pairwise_spread(&draws))
}

/// Average pairwise `1 - cosine` per prompt across a set of prediction draws.
pub fn pairwise_spread<F: Real>(draws: &[Tensor<F>]) -> f64 {
    let k = draws.len();
    let prompts = draws[0].rows();
    if prompts == 0 || k < 2 {
        return 0.0;
    }
    let mut total = 0.0f64;
    for p in 0..prompts {
        let mut s = 0.0f64;
        let mut pairs = 0usize;
        for a in 0..k {
            for b in (a + 1)..k {
                s += 1.0 - cosine(draws[a].row(p), draws[b].row(p));
                pairs += 1;
            }
        }
        total += s / pairs as f64;
    }
    total / prompts as f64
}

// ---- per-cell evaluation ----------------------------------------------------

/// Sampler settings for evaluating diffusion checkpoints.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerOptions {
    pub inference_steps: usize,
    pub guidance: f64,
    pub eta: f64,
}

impl Default for SamplerOptions {
    fn default() -> Self {
        Self { inference_steps: 25, guidance: 4.0, eta: 1.0 }
    }
}

fn default_diversity_draws() -> usize {
    8
}
fn default_diversity_prompts() -> usize {
    32
}

/// Evaluation settings shared by the harnesses and the CLI.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    #[serde(flatten)]
    pub sampler: SamplerOptions,
    #[serde(default = "default_diversity_draws")]
    pub diversity_draws: usize,
    /// Use a zero noise token instead of seeded draws for the
    /// time-independent models.
    #[serde(default)]
    pub deterministic_eps: bool,
    #[serde(default = "default_diversity_prompts")]
    pub diversity_prompts: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            sampler: SamplerOptions::default(),
            diversity_draws: default_diversity_draws(),
            deterministic_eps: false,
            diversity_prompts: default_diversity_prompts(),
        }
    }
}

/// All latent metrics for one (checkpoint, split) pair.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitMetrics {
    pub top1_seen: f64,
    pub top1_holdout: f64,
    pub mean_cosine: f64,
    pub latent_mse: f64,
    pub diversity_spread: f64,
}

/// Predictions of a net for a batch of prompts; diffusion nets run the full
/// guided sampler, time-independent nets one forward with a seeded (or zero)
/// noise token.
pub fn predict_batch<F: Real>(
    net: &PriorNetwork<F>,
    z_y: &Tensor<F>,
    opts: &EvalOptions,
    schedule: Option<&NoiseSchedule>,
    seed: u64,
) -> Result<Tensor<F>> {
    if net.config().time_conditioned {
        let schedule = schedule
            .ok_or_else(|| Error::Config("diffusion evaluation requires a schedule".into()))?;
        sample_loop(
            net,
            schedule,
            z_y,
            opts.sampler.inference_steps,
            opts.sampler.guidance,
            opts.sampler.eta,
            seed,
        )
    } else {
        let eps = if opts.deterministic_eps {
            Tensor::zeros(z_y.rows(), z_y.cols())
        } else {
            let mut rng = derive(&[seed, stream::EVAL]);
            Tensor::randn(z_y.rows(), z_y.cols(), 1.0, &mut rng)
        };
        net.forward_prior_plain(&eps, z_y)
    }
}

fn prompts_and_truth<F: Real>(samples: &[PairSample]) -> (Tensor<F>, Vec<usize>) {
    let refs: Vec<&PairSample> = samples.iter().collect();
    let (z_y, _) = crate::train::batch_tensors::<F>(&refs);
    (z_y, samples.iter().map(|s| s.concept_index).collect())
}

fn gt_targets<F: Real>(world: &World, samples: &[PairSample]) -> Result<Tensor<F>> {
    let mut gt = Tensor::zeros(samples.len(), world.embed_dim());
    for (r, s) in samples.iter().enumerate() {
        for (o, &v) in gt.row_mut(r).iter_mut().zip(&world.gt_vision_embedding(&s.concept)?) {
            *o = F::from_f64(v);
        }
    }
    Ok(gt)
}

/// Evaluate a trained network: retrieval on both eval parts against the
/// noise-free candidate bank; cosine/MSE to ground truth and diversity
/// spread on the `focus` part (seen or holdout).
pub fn evaluate_net<F: Real>(
    net: &PriorNetwork<F>,
    world: &World,
    split: &DatasetSplit,
    opts: &EvalOptions,
    schedule: Option<&NoiseSchedule>,
    seed: u64,
    focus: Part,
) -> Result<SplitMetrics> {
    if focus == Part::Train {
        return Err(Error::Config("evaluate_net: focus must be an eval part".into()));
    }
    let bank = world.candidate_bank()?.map(F::from_f64);
    let (zy_seen, truth_seen) = prompts_and_truth::<F>(&split.eval_seen);
    let (zy_hold, truth_hold) = prompts_and_truth::<F>(&split.eval_holdout);
    let preds_seen = predict_batch(net, &zy_seen, opts, schedule, seed)?;
    let preds_hold = predict_batch(net, &zy_hold, opts, schedule, seed.wrapping_add(1))?;

    let (focus_preds, focus_zy, focus_samples) = match focus {
        Part::EvalSeen => (&preds_seen, &zy_seen, &split.eval_seen),
        _ => (&preds_hold, &zy_hold, &split.eval_holdout),
    };
    let gt = gt_targets::<F>(world, focus_samples)?;
    let diversity = diversity_for(net, focus_zy, opts, schedule, seed)?;
    let metrics = SplitMetrics {
        top1_seen: retrieval_top1(&preds_seen, &bank, &truth_seen)?,
        top1_holdout: retrieval_top1(&preds_hold, &bank, &truth_hold)?,
        mean_cosine: mean_cosine(focus_preds, &gt)?,
        latent_mse: latent_mse(focus_preds, &gt)?,
        diversity_spread: diversity,
    };
    validate_metrics(&metrics)?;
    Ok(metrics)
}

/// Diversity over the first `diversity_prompts` holdout prompts: noise-token
/// draws for time-independent nets, independent sampler runs for diffusion.
fn diversity_for<F: Real>(
    net: &PriorNetwork<F>,
    zy_hold: &Tensor<F>,
    opts: &EvalOptions,
    schedule: Option<&NoiseSchedule>,
    seed: u64,
) -> Result<f64> {
    let n = zy_hold.rows().min(opts.diversity_prompts);
    if n == 0 || opts.diversity_draws < 2 {
        return Ok(0.0);
    }
    let mut prompts = Tensor::zeros(n, zy_hold.cols());
    for r in 0..n {
        prompts.row_mut(r).copy_from_slice(zy_hold.row(r));
    }
    if net.config().time_conditioned {
        let schedule = schedule
            .ok_or_else(|| Error::Config("diffusion evaluation requires a schedule".into()))?;
        let draws: Vec<Tensor<F>> = (0..opts.diversity_draws)
            .map(|j| {
                let draw_seed = rand::Rng::gen::<u64>(&mut derive(&[seed, stream::DIVERSITY, j as u64]));
                sample_loop(
                    net,
                    schedule,
                    &prompts,
                    opts.sampler.inference_steps,
                    opts.sampler.guidance,
                    opts.sampler.eta,
                    draw_seed,
                )
            })
            .collect::<Result<_>>()?;
        Ok(pairwise_spread(&draws))
    } else {
        diversity_spread(net, &prompts, opts.diversity_draws, seed)
    }
}

fn validate_metrics(m: &SplitMetrics) -> Result<()> {
    let in_unit = |x: f64| (0.0..=1.0).contains(&x);
    if !in_unit(m.top1_seen) || !in_unit(m.top1_holdout) {
        return Err(Error::Config(format!("top1 rate out of range: {m:?}")));
    }
    if !(-1.0 - 1e-6..=1.0 + 1e-6).contains(&m.mean_cosine) {
        return Err(Error::Config(format!("mean_cosine out of range: {m:?}")));
    }
    if m.latent_mse < 0.0 || m.diversity_spread < 0.0 {
        return Err(Error::Config(format!("negative mse or diversity: {m:?}")));
    }
    Ok(())
}

// ---- report records ---------------------------------------------------------

/// One report row: metrics for a (strategy, ablation cell, seed) triple.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub strategy: String,
    pub cell: String,
    /// Seed as text; aggregate rows use "mean".
    pub seed: String,
    pub top1_seen: f64,
    pub top1_holdout: f64,
    pub mean_cosine: f64,
    pub latent_mse: f64,
    pub diversity_spread: f64,
    pub seconds: f64,
    /// FNV-1a 64 hash of the canonical JSON of the producing config.
    pub config_hash: String,
}

pub const REPORT_HEADER: &str =
    "strategy,cell,seed,top1_seen,top1_holdout,mean_cosine,latent_mse,diversity_spread,seconds";

pub const REPORT_NOTE: &str = "latent-space proxies substituted for image-space \
preference and composition scores: forced-choice retrieval over the noise-free \
concept bank, cosine/MSE to ground-truth vision embeddings, diversity spread \
over independent noise draws";

/// A set of records plus the configs that produced them.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct MetricsReport {
    pub records: Vec<MetricsRecord>,
    /// Keyed `strategy|cell|seed` -> full cell config.
    pub configs: BTreeMap<String, serde_json::Value>,
}

impl MetricsReport {
    fn key(r: &MetricsRecord) -> String {
        format!("{}|{}|{}", r.strategy, r.cell, r.seed)
    }

    pub fn push(&mut self, record: MetricsRecord, config: serde_json::Value) {
        self.configs.insert(Self::key(&record), config);
        self.records.push(record);
    }

    pub fn extend(&mut self, other: MetricsReport) {
        self.configs.extend(other.configs);
        self.records.extend(other.records);
    }

    /// Append one aggregate row per (strategy, cell) with metric means.
    pub fn append_means(&mut self) {
        let mut groups: BTreeMap<(String, String), Vec<MetricsRecord>> = BTreeMap::new();
        for r in &self.records {
            if r.seed == "mean" {
                continue;
            }
            groups.entry((r.strategy.clone(), r.cell.clone())).or_default().push(r.clone());
        }
        for ((strategy, cell), rows) in groups {
            if rows.len() < 2 {
                continue;
            }
            let n = rows.len() as f64;
            let mean = |f: fn(&MetricsRecord) -> f64| rows.iter().map(f).sum::<f64>() / n;
            let record = MetricsRecord {
                strategy,
                cell,
                seed: "mean".into(),
                top1_seen: mean(|r| r.top1_seen),
                top1_holdout: mean(|r| r.top1_holdout),
                mean_cosine: mean(|r| r.mean_cosine),
                latent_mse: mean(|r| r.latent_mse),
                diversity_spread: mean(|r| r.diversity_spread),
                seconds: mean(|r| r.seconds),
                config_hash: rows[0].config_hash.clone(),
            };
            let config = self
                .configs
                .get(&Self::key(&rows[0]))
                .cloned()
                .unwrap_or(serde_json::Value::Null);
            self.push(record, config);
        }
    }

    pub fn mean_of(&self, strategy: &str, cell: &str, f: impl Fn(&MetricsRecord) -> f64) -> f64 {
        let rows: Vec<&MetricsRecord> = self
            .records
            .iter()
            .filter(|r| r.strategy == strategy && r.cell == cell && r.seed != "mean")
            .collect();
        rows.iter().map(|r| f(r)).sum::<f64>() / rows.len().max(1) as f64
    }
}

/// Write the CSV (with a proxy-substitution comment line above the header)
/// and a JSON sidecar embedding every config; `read_report` reproduces the
/// record set exactly.
pub fn write_report(report: &MetricsReport, path: &Path) -> Result<()> {
    let mut out = String::new();
    out.push_str(&format!("# {REPORT_NOTE}\n"));
    out.push_str(REPORT_HEADER);
    out.push('\n');
    for r in &report.records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.strategy,
            r.cell,
            r.seed,
            r.top1_seen,
            r.top1_holdout,
            r.mean_cosine,
            r.latent_mse,
            r.diversity_spread,
            r.seconds
        ));
    }
    std::fs::write(path, out)?;

    let sidecar: BTreeMap<String, serde_json::Value> = report
        .records
        .iter()
        .map(|r| {
            let key = MetricsReport::key(r);
            let config = report.configs.get(&key).cloned().unwrap_or(serde_json::Value::Null);
            (key, json!({ "config_hash": r.config_hash, "config": config }))
        })
        .collect();
    let doc = json!({ "note": REPORT_NOTE, "cells": sidecar });
    let mut f = std::fs::File::create(sidecar_path(path))?;
    writeln!(f, "{}", serde_json::to_string_pretty(&doc)?)?;
    Ok(())
}

pub fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    std::path::PathBuf::from(s)
}

/// Parse a report written by [`write_report`].
pub fn read_report(path: &Path) -> Result<MetricsReport> {
    let text = std::fs::read_to_string(path)?;
    let sidecar: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(sidecar_path(path))?)?;
    let cells = sidecar
        .get("cells")
        .and_then(|c| c.as_object())
        .ok_or_else(|| Error::Config("report sidecar missing 'cells'".into()))?;

    let mut report = MetricsReport::default();
    for line in text.lines() {
        if line.starts_with('#') || line.is_empty() || line == REPORT_HEADER {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 9 {
            return Err(Error::Config(format!("malformed report row: {line}")));
        }
        let num = |i: usize| -> Result<f64> {
            fields[i]
                .parse::<f64>()
                .map_err(|e| Error::Config(format!("bad number '{}' in report: {e}", fields[i])))
        };
        let mut record = MetricsRecord {
            strategy: fields[0].to_string(),
            cell: fields[1].to_string(),
            seed: fields[2].to_string(),
            top1_seen: num(3)?,
            top1_holdout: num(4)?,
            mean_cosine: num(5)?,
            latent_mse: num(6)?,
            diversity_spread: num(7)?,
            seconds: num(8)?,
            config_hash: String::new(),
        };
        let key = MetricsReport::key(&record);
        let cell = cells
            .get(&key)
            .ok_or_else(|| Error::Config(format!("report sidecar missing cell '{key}'")))?;
        record.config_hash = cell
            .get("config_hash")
            .and_then(|h| h.as_str())
            .unwrap_or_default()
            .to_string();
        let config = cell.get("config").cloned().unwrap_or(serde_json::Value::Null);
        report.push(record, config);
    }
    Ok(report)
}

fn hash_config(config: &serde_json::Value) -> String {
    format!("{:016x}", crate::fnv1a64(config.to_string().as_bytes()))
}

// ---- harnesses ---------------------------------------------------------------

/// Loop cells with an optional thread count from `PRIORLAB_PARALLEL`
/// (default 1). Cells are independent seeded jobs, so the result does not
/// depend on the thread count.
fn run_cells<T: Send>(cells: Vec<Box<dyn FnOnce() -> Result<T> + Send + '_>>) -> Result<Vec<T>> {
    let threads: usize = std::env::var("PRIORLAB_PARALLEL")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(1);
    if threads <= 1 || cells.len() <= 1 {
        return cells.into_iter().map(|c| c()).collect();
    }
    use std::sync::Mutex;
    let queue: Mutex<Vec<(usize, Box<dyn FnOnce() -> Result<T> + Send + '_>)>> =
        Mutex::new(cells.into_iter().enumerate().rev().collect());
    let slots: Vec<Mutex<Option<Result<T>>>> = {
        let n = queue.lock().unwrap().len();
        (0..n).map(|_| Mutex::new(None)).collect()
    };
    std::thread::scope(|scope| {
        for _ in 0..threads {
            scope.spawn(|| loop {
                let job = queue.lock().unwrap().pop();
                let Some((i, f)) = job else { break };
                *slots[i].lock().unwrap() = Some(f());
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().expect("cell lock poisoned").expect("cell result missing"))
        .collect()
}

fn cell_config_json(
    world: &World,
    prior: &PriorConfig,
    train: Option<&TrainConfig>,
    opts: &EvalOptions,
    cell: &str,
    seed: u64,
) -> serde_json::Value {
    json!({
        "world": world.spec(),
        "prior": prior,
        "train": train,
        "eval": opts,
        "cell": cell,
        "seed": seed,
    })
}

/// Evaluate a trained diffusion checkpoint at several inference step counts.
/// Cells sharing a seed share the same initial latent (the first draw of the
/// sampler stream).
pub fn ablate_prior_steps<F: Real>(
    net: &PriorNetwork<F>,
    world: &World,
    split: &DatasetSplit,
    schedule: &NoiseSchedule,
    steps_list: &[usize],
    guidance: f64,
    eta: f64,
    base_opts: &EvalOptions,
    seeds: &[u64],
) -> Result<MetricsReport> {
    let mut report = MetricsReport::default();
    for &steps in steps_list {
        let mut opts = base_opts.clone();
        opts.sampler = SamplerOptions { inference_steps: steps, guidance, eta };
        let cell = format!("steps={steps}");
        for &seed in seeds {
            let started = Instant::now();
            let m = evaluate_net(net, world, split, &opts, Some(schedule), seed, Part::EvalHoldout)?;
            let config = cell_config_json(world, net.config(), None, &opts, &cell, seed);
            report.push(
                record_from("diffusion", &cell, seed, m, started, &config),
                config,
            );
        }
    }
    Ok(report)
}

/// Evaluate a trained diffusion checkpoint across eta values at fixed steps.
pub fn ablate_eta<F: Real>(
    net: &PriorNetwork<F>,
    world: &World,
    split: &DatasetSplit,
    schedule: &NoiseSchedule,
    eta_list: &[f64],
    base_opts: &EvalOptions,
    seeds: &[u64],
) -> Result<MetricsReport> {
    let mut report = MetricsReport::default();
    for &eta in eta_list {
        let mut opts = base_opts.clone();
        opts.sampler.eta = eta;
        let cell = format!("eta={eta}");
        for &seed in seeds {
            let started = Instant::now();
            let m = evaluate_net(net, world, split, &opts, Some(schedule), seed, Part::EvalHoldout)?;
            let config = cell_config_json(world, net.config(), None, &opts, &cell, seed);
            report.push(record_from("diffusion", &cell, seed, m, started, &config), config);
        }
    }
    Ok(report)
}

/// Train one combined-objective model per lambda with shared seeds and
/// evaluate each; `lambda = 0` reproduces the projection strategy bitwise.
#[allow(clippy::too_many_arguments)]
pub fn ablate_lambda(
    world: &World,
    split: &DatasetSplit,
    prior: &PriorConfig,
    train_template: &TrainConfig,
    lambda_list: &[f64],
    opts: &EvalOptions,
    seeds: &[u64],
) -> Result<MetricsReport> {
    let mut cells: Vec<Box<dyn FnOnce() -> Result<(MetricsRecord, serde_json::Value)> + Send>> =
        Vec::new();
    for &lambda in lambda_list {
        for &seed in seeds {
            let cell = format!("lambda={lambda}");
            let mut config = train_template.clone();
            config.strategy = Strategy::Eclipse;
            config.loss.lambda = lambda;
            config.seed = seed;
            let opts = opts.clone();
            cells.push(Box::new(move || {
                let started = Instant::now();
                let run = train_run::<f32>(world, split, prior, &config, None, |_| {})?;
                let m = evaluate_net(&run.net, world, split, &opts, None, seed, Part::EvalHoldout)?;
                let cfg = cell_config_json(world, prior, Some(&config), &opts, &cell, seed);
                Ok((record_from("eclipse", &cell, seed, m, started, &cfg), cfg))
            }));
        }
    }
    let mut report = MetricsReport::default();
    for (record, config) in run_cells(cells)? {
        report.push(record, config);
    }
    Ok(report)
}

/// Train all three strategies with matched budgets and seeds; one row per
/// (strategy, seed) plus per-strategy means.
#[allow(clippy::too_many_arguments)]
pub fn compare_strategies(
    world: &World,
    split: &DatasetSplit,
    prior_plain: &PriorConfig,
    prior_time: &PriorConfig,
    train_template: &TrainConfig,
    schedule: &NoiseSchedule,
    opts: &EvalOptions,
    seeds: &[u64],
) -> Result<MetricsReport> {
    let mut cells: Vec<Box<dyn FnOnce() -> Result<(MetricsRecord, serde_json::Value)> + Send>> =
        Vec::new();
    for &strategy in &[Strategy::Projection, Strategy::Diffusion, Strategy::Eclipse] {
        for &seed in seeds {
            let prior =
                if strategy.time_conditioned() { prior_time.clone() } else { prior_plain.clone() };
            let mut config = train_template.clone();
            config.strategy = strategy;
            config.seed = seed;
            let opts = opts.clone();
            let schedule = schedule.clone();
            cells.push(Box::new(move || {
                let started = Instant::now();
                let sched_opt =
                    if strategy.time_conditioned() { Some(&schedule) } else { None };
                let run = train_run::<f32>(world, split, &prior, &config, sched_opt, |_| {})?;
                let m = evaluate_net(&run.net, world, split, &opts, sched_opt, seed, Part::EvalHoldout)?;
                let cfg = cell_config_json(world, &prior, Some(&config), &opts, "final", seed);
                Ok((record_from(strategy.name(), "final", seed, m, started, &cfg), cfg))
            }));
        }
    }
    let mut report = MetricsReport::default();
    for (record, config) in run_cells(cells)? {
        report.push(record, config);
    }
    report.append_means();
    Ok(report)
}

fn record_from(
    strategy: &str,
    cell: &str,
    seed: u64,
    m: SplitMetrics,
    started: Instant,
    config: &serde_json::Value,
) -> MetricsRecord {
    MetricsRecord {
        strategy: strategy.to_string(),
        cell: cell.to_string(),
        seed: seed.to_string(),
        top1_seen: m.top1_seen,
        top1_holdout: m.top1_holdout,
        mean_cosine: m.mean_cosine,
        latent_mse: m.latent_mse,
        diversity_spread: m.diversity_spread,
        seconds: started.elapsed().as_secs_f64(),
        config_hash: hash_config(config),
    }
}

/// Last-row convenience for training logs.
pub fn final_row(log: &[MetricsRow]) -> Option<&MetricsRow> {
    log.last()
}
