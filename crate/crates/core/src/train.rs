//! End-to-end training for one strategy: batching, condition dropout, loss,
//! reverse-mode gradients, Adam with bias correction, cosine warm-restart
//! learning rate, and periodic evaluation logging.
//!
//! Every stochastic draw of step `s` comes from a stream derived from
//! `(seed, TRAIN_STEP, s)` in a fixed order (batch indices, then timesteps /
//! noise / dropout mask as the strategy requires), so runs are bitwise
//! reproducible and a resumed run continues exactly where the original
//! would have.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{cfg_predict, NoiseSchedule};
use crate::eval::{mean_cosine, retrieval_top1};
use crate::grad::{Real, Tape, Tensor};
use crate::objectives::{diffusion_prior_loss, eclipse_loss, LossConfig};
use crate::prior::{init_params, PriorConfig, PriorNetwork};
use crate::rng::{derive, stream};
use crate::world::{DatasetSplit, PairSample, World};
use crate::{Error, Result};

/// The three prior-learning strategies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Projection,
    Diffusion,
    Eclipse,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::Projection => "projection",
            Strategy::Diffusion => "diffusion",
            Strategy::Eclipse => "eclipse",
        }
    }

    pub fn time_conditioned(self) -> bool {
        matches!(self, Strategy::Diffusion)
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "projection" => Ok(Strategy::Projection),
            "diffusion" => Ok(Strategy::Diffusion),
            "eclipse" => Ok(Strategy::Eclipse),
            other => Err(Error::Config(format!(
                "unknown strategy '{other}' (expected projection|diffusion|eclipse)"
            ))),
        }
    }
}

fn default_t_mult() -> u64 {
    1
}
fn default_min_lr() -> f64 {
    1e-6
}

/// Cosine-annealing warm-restart settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SchedulerConfig {
    pub t0: u64,
    #[serde(default = "default_t_mult")]
    pub t_mult: u64,
    #[serde(default = "default_min_lr")]
    pub min_lr: f64,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self { t0: 1000, t_mult: 1, min_lr: 1e-6 }
    }
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: default_beta1(), beta2: default_beta2(), eps: default_adam_eps() }
    }
}

fn default_base_lr() -> f64 {
    5e-5
}
fn default_cond_dropout() -> f64 {
    0.10
}
fn default_eval_every() -> u64 {
    200
}

/// Everything one training run needs beyond the architecture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub strategy: Strategy,
    pub iterations: u64,
    pub batch_size: usize,
    #[serde(default = "default_base_lr")]
    pub base_lr: f64,
    #[serde(default)]
    pub loss: LossConfig,
    /// Probability of replacing a condition row by the null embedding;
    /// consumed by the diffusion strategy only.
    #[serde(default = "default_cond_dropout")]
    pub cond_dropout_prob: f64,
    #[serde(default)]
    pub scheduler: SchedulerConfig,
    #[serde(default)]
    pub adam: AdamConfig,
    pub seed: u64,
    #[serde(default = "default_eval_every")]
    pub eval_every: u64,
    /// Global-norm gradient clip; disabled by default.
    #[serde(default)]
    pub grad_clip: Option<f64>,
}

impl TrainConfig {
    /// Minute-scale defaults for the desk world. The learning rate is raised
    /// above the full-scale recipe so a 3000-step run converges on CPU.
    pub fn desk(strategy: Strategy, seed: u64) -> Self {
        Self {
            strategy,
            iterations: 3000,
            batch_size: 64,
            base_lr: 1e-3,
            loss: LossConfig::default(),
            cond_dropout_prob: 0.10,
            scheduler: SchedulerConfig::default(),
            adam: AdamConfig::default(),
            seed,
            eval_every: 200,
            grad_clip: None,
        }
    }

    /// The full-scale recipe: batch 256, lr 5e-5.
    pub fn paper(strategy: Strategy, seed: u64) -> Self {
        Self {
            strategy,
            iterations: 60_000,
            batch_size: 256,
            base_lr: 5e-5,
            loss: LossConfig::default(),
            cond_dropout_prob: 0.10,
            scheduler: SchedulerConfig { t0: 10_000, t_mult: 1, min_lr: 1e-6 },
            adam: AdamConfig::default(),
            seed,
            eval_every: 1000,
            grad_clip: None,
        }
    }

    pub fn validate(&self, prior: &PriorConfig) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.base_lr <= 0.0 {
            return Err(Error::Config("base_lr must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.cond_dropout_prob) {
            return Err(Error::Config("cond_dropout_prob must be in [0, 1]".into()));
        }
        if self.scheduler.t0 == 0 || self.scheduler.t_mult == 0 {
            return Err(Error::Config("scheduler t0 and t_mult must be positive".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be positive".into()));
        }
        self.loss.validate()?;
        if self.strategy.time_conditioned() != prior.time_conditioned {
            return Err(Error::Config(format!(
                "strategy {} requires time_conditioned = {}, prior config has {}",
                self.strategy.name(),
                self.strategy.time_conditioned(),
                prior.time_conditioned
            )));
        }
        Ok(())
    }
}

/// Adam moment buffers plus the update counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<F: Real> {
    pub t: u64,
    pub m: Vec<Tensor<F>>,
    pub v: Vec<Tensor<F>>,
}

impl<F: Real> AdamState<F> {
    pub fn new_like(tensors: &[Tensor<F>]) -> Self {
        let zeros: Vec<Tensor<F>> =
            tensors.iter().map(|t| Tensor::zeros(t.rows(), t.cols())).collect();
        Self { t: 0, m: zeros.clone(), v: zeros }
    }
}

/// One Adam update with bias correction over a parameter list.
pub fn adam_step<F: Real>(
    params: &mut [Tensor<F>],
    grads: &[Tensor<F>],
    state: &mut AdamState<F>,
    lr: f64,
    config: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Shape(format!(
            "adam_step: {} params, {} grads, {} moment buffers",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.t += 1;
    let b1 = F::from_f64(config.beta1);
    let b2 = F::from_f64(config.beta2);
    let one_m_b1 = F::from_f64(1.0 - config.beta1);
    let one_m_b2 = F::from_f64(1.0 - config.beta2);
    let c1 = F::from_f64(1.0 / (1.0 - config.beta1.powi(state.t as i32)));
    let c2 = F::from_f64(1.0 / (1.0 - config.beta2.powi(state.t as i32)));
    let lr_f = F::from_f64(lr);
    let eps = F::from_f64(config.eps);
    for ((p, g), (m, v)) in
        params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        if p.shape() != g.shape() {
            return Err(Error::Shape(format!(
                "adam_step: param {:?} vs grad {:?}",
                p.shape(),
                g.shape()
            )));
        }
        for ((pv, &gv), (mv, vv)) in
            p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut().iter_mut().zip(v.data_mut()))
        {
            *mv = b1 * *mv + one_m_b1 * gv;
            *vv = b2 * *vv + one_m_b2 * gv * gv;
            let mhat = *mv * c1;
            let vhat = *vv * c2;
            *pv = *pv - lr_f * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Cosine-annealed learning rate with warm restarts: cycles of length
/// `t0, t0*t_mult, t0*t_mult^2, ...`; the rate is exactly `base_lr` at every
/// cycle start and decays toward `min_lr` along a half cosine.
pub fn warm_restart_lr(step: u64, base_lr: f64, t0: u64, t_mult: u64, min_lr: f64) -> f64 {
    let (mut pos, mut len) = (step, t0);
    if t_mult == 1 {
        pos = step % t0;
    } else {
        while pos >= len {
            pos -= len;
            len *= t_mult;
        }
    }
    if pos == 0 {
        return base_lr;
    }
    let frac = pos as f64 / len as f64;
    min_lr + (base_lr - min_lr) * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// Independent Bernoulli(prob) row mask from the seeded generator.
pub fn condition_dropout_mask(batch_size: usize, prob: f64, rng: &mut ChaCha8Rng) -> Vec<bool> {
    (0..batch_size).map(|_| rng.gen::<f64>() < prob).collect()
}

/// One logged metrics row; written as CSV by the caller.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_proj: f64,
    pub loss_cls: f64,
    pub eval_top1_seen: f64,
    pub eval_top1_holdout: f64,
    /// Mean cosine between holdout predictions and the noise-free
    /// ground-truth vision embedding of each prompt's concept.
    pub eval_cosine: f64,
}

pub const METRICS_HEADER: &str =
    "step,lr,loss_total,loss_proj,loss_cls,eval_top1_seen,eval_top1_holdout,eval_cosine";

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.step,
            self.lr,
            self.loss_total,
            self.loss_proj,
            self.loss_cls,
            self.eval_top1_seen,
            self.eval_top1_holdout,
            self.eval_cosine
        )
    }
}

/// Mutable training state carried across steps (and checkpoints).
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<F: Real> {
    pub step: u64,
    pub adam: AdamState<F>,
}

/// Result of a training run.
pub struct TrainRun<F: Real> {
    pub net: PriorNetwork<F>,
    pub state: TrainState<F>,
    pub log: Vec<MetricsRow>,
}

/// Train a freshly initialized network for `config.iterations` steps.
/// `schedule` is required for (and only consumed by) the diffusion strategy.
/// `on_row` observes each metrics row as it is produced.
pub fn train_run<F: Real>(
    world: &World,
    split: &DatasetSplit,
    prior_config: &PriorConfig,
    config: &TrainConfig,
    schedule: Option<&NoiseSchedule>,
    on_row: impl FnMut(&MetricsRow),
) -> Result<TrainRun<F>> {
    config.validate(prior_config)?;
    let mut net: PriorNetwork<F> = init_params(prior_config, config.seed)?;
    let mut state = TrainState { step: 0, adam: AdamState::new_like(net.tensors()) };
    let log = train_loop(&mut net, &mut state, world, split, config, schedule, on_row)?;
    Ok(TrainRun { net, state, log })
}

/// Continue a run from checkpointed state up to `config.iterations`;
/// step-for-step identical to the uninterrupted run.
pub fn resume_run<F: Real>(
    net: &mut PriorNetwork<F>,
    state: &mut TrainState<F>,
    world: &World,
    split: &DatasetSplit,
    config: &TrainConfig,
    schedule: Option<&NoiseSchedule>,
    on_row: impl FnMut(&MetricsRow),
) -> Result<Vec<MetricsRow>> {
    config.validate(net.config())?;
    train_loop(net, state, world, split, config, schedule, on_row)
}

fn train_loop<F: Real>(
    net: &mut PriorNetwork<F>,
    state: &mut TrainState<F>,
    world: &World,
    split: &DatasetSplit,
    config: &TrainConfig,
    schedule: Option<&NoiseSchedule>,
    mut on_row: impl FnMut(&MetricsRow),
) -> Result<Vec<MetricsRow>> {
    if split.train.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    let schedule = match config.strategy {
        Strategy::Diffusion => {
            let s = schedule.ok_or_else(|| {
                Error::Config("diffusion strategy requires a noise schedule".into())
            })?;
            if s.t_max() != net.config().max_timesteps {
                return Err(Error::Config(format!(
                    "schedule T {} does not match prior max_timesteps {}",
                    s.t_max(),
                    net.config().max_timesteps
                )));
            }
            Some(s)
        }
        _ => None,
    };

    let bank = world.candidate_bank()?.map(F::from_f64);
    let mut log = Vec::new();
    while state.step < config.iterations {
        let step = state.step + 1;
        let mut rng = derive(&[config.seed, stream::TRAIN_STEP, step]);
        let batch = split.train_batch(config.batch_size, &mut rng)?;
        let (z_y, z_x) = batch_tensors::<F>(&batch);
        let n = batch.len();
        let d = net.config().embed_dim;

        let mut tape: Tape<F> = Tape::new();
        let binding = net.bind(&mut tape, true);
        let (total, proj, cls) = match config.strategy {
            Strategy::Projection | Strategy::Eclipse => {
                let eps = Tensor::randn(n, d, 1.0, &mut rng);
                let eps = tape.constant(eps);
                let zy = tape.constant(z_y);
                let zx = tape.constant(z_x);
                let pred = if net.config().dropout > 0.0 {
                    binding.forward_prior_train(&mut tape, eps, zy, &mut rng)?
                } else {
                    binding.forward_prior(&mut tape, eps, zy)?
                };
                let parts = eclipse_loss(&mut tape, pred, zx, zy, &config.loss)?;
                // The projection objective is the lambda = 0 degenerate case
                // of the combined loss; backward never visits the contrastive
                // subgraph when it is outside the total, so the projection
                // and lambda = 0 trajectories match bitwise.
                let total = match config.strategy {
                    Strategy::Projection => parts.proj,
                    _ => parts.total,
                };
                (total, tape.scalar(parts.proj)?, tape.scalar(parts.cls)?)
            }
            Strategy::Diffusion => {
                let sched = schedule.expect("validated above");
                let t: Vec<usize> = (0..n).map(|_| rng.gen_range(1..=sched.t_max())).collect();
                let eps = Tensor::randn(n, d, 1.0, &mut rng);
                let mask = condition_dropout_mask(n, config.cond_dropout_prob, &mut rng);
                let zy = tape.constant(z_y);
                let zy_dropped = binding.apply_condition_dropout(&mut tape, zy, &mask)?;
                let loss =
                    diffusion_prior_loss(&mut tape, &binding, sched, &z_x, zy_dropped, &t, &eps)?;
                (loss, tape.scalar(loss)?, 0.0)
            }
        };

        let loss_total = tape.scalar(total)?;
        if !loss_total.is_finite() {
            return Err(Error::NonFinite {
                step,
                detail: format!(
                    "strategy {}, loss_total {loss_total}, proj {proj}, cls {cls}",
                    config.strategy.name()
                ),
            });
        }
        tape.backward(total)?;
        let mut grads: Vec<Tensor<F>> = binding
            .vars()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                tape.grad(v).cloned().unwrap_or_else(|| {
                    let (r, c) = net.tensors()[i].shape();
                    Tensor::zeros(r, c)
                })
            })
            .collect();
        if let Some(clip) = config.grad_clip {
            clip_global_norm(&mut grads, clip);
        }
        let lr = warm_restart_lr(
            state.step,
            config.base_lr,
            config.scheduler.t0,
            config.scheduler.t_mult,
            config.scheduler.min_lr,
        );
        adam_step(net.tensors_mut(), &grads, &mut state.adam, lr, &config.adam)?;
        state.step = step;

        if step % config.eval_every == 0 || step == config.iterations {
            let (seen, holdout, cosine) = quick_eval(net, world, split, &bank, config, step)?;
            let row = MetricsRow {
                step,
                lr,
                loss_total,
                loss_proj: proj,
                loss_cls: cls,
                eval_top1_seen: seen,
                eval_top1_holdout: holdout,
                eval_cosine: cosine,
            };
            on_row(&row);
            log.push(row);
        }
    }
    Ok(log)
}

/// Assemble `(z_y, z_x)` batch tensors at the training precision.
pub fn batch_tensors<F: Real>(batch: &[&PairSample]) -> (Tensor<F>, Tensor<F>) {
    let n = batch.len();
    let d = batch[0].z_y.len();
    let mut z_y = Tensor::zeros(n, d);
    let mut z_x = Tensor::zeros(n, d);
    for (r, s) in batch.iter().enumerate() {
        for (o, &v) in z_y.row_mut(r).iter_mut().zip(&s.z_y) {
            *o = F::from_f64(v);
        }
        for (o, &v) in z_x.row_mut(r).iter_mut().zip(&s.z_x) {
            *o = F::from_f64(v);
        }
    }
    (z_y, z_x)
}

fn clip_global_norm<F: Real>(grads: &mut [Tensor<F>], max_norm: f64) {
    let total: f64 = grads.iter().map(|g| g.frobenius_norm().powi(2)).sum();
    let norm = total.sqrt();
    if norm > max_norm {
        let scale = F::from_f64(max_norm / norm);
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v = *v * scale;
            }
        }
    }
}

/// Cheap evaluation for the training log: the time-independent strategies
/// predict with a seeded noise token; the diffusion strategy uses a single
/// conditional forward from a seeded latent at `t = T`. Full-sampler
/// evaluation lives in the eval harness.
fn quick_eval<F: Real>(
    net: &PriorNetwork<F>,
    world: &World,
    split: &DatasetSplit,
    bank: &Tensor<F>,
    config: &TrainConfig,
    step: u64,
) -> Result<(f64, f64, f64)> {
    let mut rng = derive(&[config.seed, stream::EVAL, step]);
    let predict = |samples: &[PairSample],
                   rng: &mut ChaCha8Rng|
     -> Result<(Tensor<F>, Vec<usize>)> {
        let refs: Vec<&PairSample> = samples.iter().collect();
        let (z_y, _) = batch_tensors::<F>(&refs);
        let truth = samples.iter().map(|s| s.concept_index).collect();
        let latent = Tensor::randn(samples.len(), net.config().embed_dim, 1.0, rng);
        let preds = if net.config().time_conditioned {
            let t = vec![net.config().max_timesteps; samples.len()];
            cfg_predict(net, &latent, &t, &z_y, 1.0)?
        } else {
            net.forward_prior_plain(&latent, &z_y)?
        };
        Ok((preds, truth))
    };

    let (preds_seen, truth_seen) = predict(&split.eval_seen, &mut rng)?;
    let (preds_hold, truth_hold) = predict(&split.eval_holdout, &mut rng)?;
    let top1_seen = retrieval_top1(&preds_seen, bank, &truth_seen)?;
    let top1_hold = retrieval_top1(&preds_hold, bank, &truth_hold)?;
    let mut gt = Tensor::zeros(split.eval_holdout.len(), world.embed_dim());
    for (r, s) in split.eval_holdout.iter().enumerate() {
        let g = world.gt_vision_embedding(&s.concept)?;
        for (o, &v) in gt.row_mut(r).iter_mut().zip(&g) {
            *o = F::from_f64(v);
        }
    }
    let cosine = mean_cosine(&preds_hold, &gt)?;
    Ok((top1_seen, top1_hold, cosine))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{build_world, make_dataset, WorldSpec};

    #[test]
    fn adam_zero_gradient_leaves_params_unchanged() {
        let mut params = vec![Tensor::from_vec(1, 2, vec![0.5f64, -1.0]).unwrap()];
        let grads = vec![Tensor::zeros(1, 2)];
        let mut state = AdamState::new_like(&params);
        let before = params[0].clone();
        adam_step(&mut params, &grads, &mut state, 0.1, &AdamConfig::default()).unwrap();
        assert_eq!(params[0], before);
        assert_eq!(state.t, 1);
    }

    #[test]
    fn adam_single_step_matches_hand_arithmetic() {
        // One scalar parameter, one step from m = v = 0 with gradient g:
        // m = (1-b1) g, v = (1-b2) g^2, mhat = g, vhat = g^2,
        // update = -lr * g / (|g| + eps).
        let g = 0.5f64;
        let lr = 0.1f64;
        let cfg = AdamConfig::default();
        let mut params = vec![Tensor::from_vec(1, 1, vec![1.0f64]).unwrap()];
        let grads = vec![Tensor::from_vec(1, 1, vec![g]).unwrap()];
        let mut state = AdamState::new_like(&params);
        adam_step(&mut params, &grads, &mut state, lr, &cfg).unwrap();
        let m = (1.0 - cfg.beta1) * g;
        let v = (1.0 - cfg.beta2) * g * g;
        let mhat = m / (1.0 - cfg.beta1);
        let vhat = v / (1.0 - cfg.beta2);
        let want = 1.0 - lr * mhat / (vhat.sqrt() + cfg.eps);
        assert!((params[0].data()[0] - want).abs() < 1e-12);
    }

    #[test]
    fn adam_is_deterministic_from_identical_state() {
        let cfg = AdamConfig::default();
        let run = || {
            let mut params = vec![Tensor::from_vec(2, 2, vec![1.0f32, -2.0, 0.5, 3.0]).unwrap()];
            let grads = vec![Tensor::from_vec(2, 2, vec![0.1f32, 0.2, -0.3, 0.4]).unwrap()];
            let mut state = AdamState::new_like(&params);
            adam_step(&mut params, &grads, &mut state, 0.01, &cfg).unwrap();
            adam_step(&mut params, &grads, &mut state, 0.01, &cfg).unwrap();
            (params, state)
        };
        let (p1, s1) = run();
        let (p2, s2) = run();
        assert_eq!(p1, p2);
        assert_eq!(s1, s2);
    }

    #[test]
    fn warm_restart_lr_cycle_structure() {
        let base = 1e-3;
        assert_eq!(warm_restart_lr(0, base, 100, 1, 0.0), base);
        assert_eq!(warm_restart_lr(100, base, 100, 1, 0.0), base);
        assert_eq!(warm_restart_lr(200, base, 100, 1, 0.0), base);
        // Half way through a cycle with min_lr = 0: base/2.
        let mid = warm_restart_lr(50, base, 100, 1, 0.0);
        assert!((mid - base / 2.0).abs() < 1e-12);
        // Growing cycles: t0=10, t_mult=2 -> cycle starts at 0, 10, 30, 70.
        for start in [0u64, 10, 30, 70] {
            assert_eq!(warm_restart_lr(start, base, 10, 2, 0.0), base);
        }
        assert!(warm_restart_lr(29, base, 10, 2, 0.0) < base);
    }

    #[test]
    fn condition_dropout_mask_edge_rates() {
        let mut rng = derive(&[1, 1]);
        assert!(condition_dropout_mask(64, 0.0, &mut rng).iter().all(|&m| !m));
        assert!(condition_dropout_mask(64, 1.0, &mut rng).iter().all(|&m| m));
    }

    #[test]
    fn condition_dropout_mask_empirical_rate() {
        // 100k draws within 3 standard errors of the target rate.
        let prob = 0.1f64;
        let n = 100_000usize;
        let mut rng = derive(&[2, 2]);
        let hits = condition_dropout_mask(n, prob, &mut rng).iter().filter(|&&m| m).count() as f64;
        let rate = hits / n as f64;
        let se = (prob * (1.0 - prob) / n as f64).sqrt();
        assert!((rate - prob).abs() < 3.0 * se, "rate {rate}, se {se}");
    }

    fn tiny_setup() -> (World, DatasetSplit) {
        let world = build_world(&WorldSpec::desk(3)).unwrap();
        let split = make_dataset(&world, 200, 40, 30, 5).unwrap();
        (world, split)
    }

    #[test]
    fn zero_iterations_returns_initialized_network() {
        let (world, split) = tiny_setup();
        let prior = PriorConfig::desk(false);
        let mut cfg = TrainConfig::desk(Strategy::Projection, 1);
        cfg.iterations = 0;
        let run: TrainRun<f32> = train_run(&world, &split, &prior, &cfg, None, |_| {}).unwrap();
        let fresh: PriorNetwork<f32> = init_params(&prior, 1).unwrap();
        assert_eq!(run.net, fresh);
        assert!(run.log.is_empty());
    }

    #[test]
    fn same_seed_same_checkpoint_bitwise() {
        let (world, split) = tiny_setup();
        let prior = PriorConfig::desk(false);
        let mut cfg = TrainConfig::desk(Strategy::Eclipse, 7);
        cfg.iterations = 25;
        cfg.eval_every = 25;
        let a: TrainRun<f32> = train_run(&world, &split, &prior, &cfg, None, |_| {}).unwrap();
        let b: TrainRun<f32> = train_run(&world, &split, &prior, &cfg, None, |_| {}).unwrap();
        assert_eq!(a.net, b.net);
        assert_eq!(a.state.adam.m, b.state.adam.m);
        assert_eq!(a.log, b.log);
    }

    #[test]
    fn eclipse_lambda_zero_matches_projection_trajectory_bitwise() {
        let (world, split) = tiny_setup();
        let prior = PriorConfig::desk(false);
        let mut proj_cfg = TrainConfig::desk(Strategy::Projection, 11);
        proj_cfg.iterations = 100;
        proj_cfg.eval_every = 50;
        let mut ecl_cfg = proj_cfg.clone();
        ecl_cfg.strategy = Strategy::Eclipse;
        ecl_cfg.loss.lambda = 0.0;
        let a: TrainRun<f32> = train_run(&world, &split, &prior, &proj_cfg, None, |_| {}).unwrap();
        let b: TrainRun<f32> = train_run(&world, &split, &prior, &ecl_cfg, None, |_| {}).unwrap();
        assert_eq!(a.net, b.net, "parameter trajectories diverged");
    }

    #[test]
    fn strategy_prior_mismatch_is_rejected() {
        let (world, split) = tiny_setup();
        let prior = PriorConfig::desk(true);
        let cfg = TrainConfig::desk(Strategy::Projection, 1);
        let r: Result<TrainRun<f32>> = train_run(&world, &split, &prior, &cfg, None, |_| {});
        assert!(r.is_err());
    }

    #[test]
    fn diffusion_requires_matching_schedule() {
        let (world, split) = tiny_setup();
        let prior = PriorConfig::desk(true);
        let mut cfg = TrainConfig::desk(Strategy::Diffusion, 1);
        cfg.iterations = 2;
        let r: Result<TrainRun<f32>> = train_run(&world, &split, &prior, &cfg, None, |_| {});
        assert!(r.is_err(), "missing schedule must be rejected");
        let bad = NoiseSchedule::default_linear(50).unwrap();
        let r: Result<TrainRun<f32>> = train_run(&world, &split, &prior, &cfg, Some(&bad), |_| {});
        assert!(r.is_err(), "mismatched schedule length must be rejected");
    }

    #[test]
    fn diffusion_smoke_runs_and_logs() {
        let (world, split) = tiny_setup();
        let prior = PriorConfig::desk(true);
        let mut cfg = TrainConfig::desk(Strategy::Diffusion, 2);
        cfg.iterations = 30;
        cfg.eval_every = 10;
        let schedule = NoiseSchedule::default_linear(1000).unwrap();
        let mut rows = 0;
        let run: TrainRun<f32> =
            train_run(&world, &split, &prior, &cfg, Some(&schedule), |_| rows += 1).unwrap();
        assert_eq!(run.log.len(), 3);
        assert_eq!(rows, 3);
        assert!(run.net.all_finite());
        assert!(run.log.iter().all(|r| r.loss_total.is_finite()));
    }

    #[test]
    fn training_loss_decreases_smoke() {
        let (world, split) = tiny_setup();
        let prior = PriorConfig::desk(false);
        let mut cfg = TrainConfig::desk(Strategy::Eclipse, 13);
        cfg.iterations = 400;
        cfg.eval_every = 20;
        let run: TrainRun<f32> = train_run(&world, &split, &prior, &cfg, None, |_| {}).unwrap();
        let first = run.log.first().unwrap().loss_total;
        let last = run.log.last().unwrap().loss_total;
        assert!(last < first, "loss did not decrease: {first} -> {last}");
    }
}
