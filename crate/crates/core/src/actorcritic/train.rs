use std::fmt;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::critic::{q_loss_and_grad, target_update, CriticPair};
use super::replay::{ReplayBuffer, Transition};
use crate::diffcore::{AdamConfig, OptimState};
use crate::envs::{DemoDataset, EnvSpec, Episode};
use crate::error::{Error, Result};
use crate::klreg::{policy_loss_and_grad, pretrain_loss_and_grad};
use crate::policies::{OnlinePolicy, RefPolicy};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub gamma: f64,
    pub tau: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub batch_size: usize,
    /// KL temperature α.
    pub alpha: f64,
    pub total_steps: usize,
    pub grad_steps_per_env_step: usize,
    pub pretrain: bool,
    pub pretrain_epochs: usize,
    pub pretrain_batch_size: usize,
    pub hidden: Vec<usize>,
    pub buffer_capacity: usize,
    /// Environment steps per epoch; evaluation runs at the end of each.
    pub eval_interval: usize,
    pub eval_episodes: usize,
    pub checkpoint_every: usize,
    pub squash: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            gamma: 0.99,
            tau: 0.005,
            actor_lr: 3e-4,
            critic_lr: 3e-4,
            batch_size: 256,
            alpha: 1.0,
            total_steps: 30_000,
            grad_steps_per_env_step: 1,
            pretrain: true,
            pretrain_epochs: 400,
            pretrain_batch_size: 256,
            hidden: vec![256, 256],
            buffer_capacity: 1_000_000,
            eval_interval: 1000,
            eval_episodes: 10,
            checkpoint_every: 10,
            squash: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: &str| Err(Error::Domain(format!("train.{field} {why}")));
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad("gamma", "must lie in (0, 1)");
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad("tau", "must lie in (0, 1]");
        }
        if !(self.actor_lr.is_finite() && self.actor_lr > 0.0) {
            return bad("actor_lr", "must be positive");
        }
        if !(self.critic_lr.is_finite() && self.critic_lr > 0.0) {
            return bad("critic_lr", "must be positive");
        }
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return bad("alpha", "must be non-negative");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1");
        }
        if self.batch_size > self.buffer_capacity {
            return bad("batch_size", "must not exceed buffer_capacity");
        }
        if self.pretrain_batch_size == 0 {
            return bad("pretrain_batch_size", "must be at least 1");
        }
        if self.hidden.contains(&0) {
            return bad("hidden", "widths must be positive");
        }
        if self.eval_interval == 0 {
            return bad("eval_interval", "must be at least 1");
        }
        if self.checkpoint_every == 0 {
            return bad("checkpoint_every", "must be at least 1");
        }
        Ok(())
    }
}

/// One row per epoch of environment interaction. Gradient and loss columns
/// are means over the epoch's gradient steps (NaN when there were none).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub env_steps: usize,
    pub mean_return: f64,
    pub success_rate: f64,
    pub kl_mean: f64,
    pub policy_grad_l2: f64,
    pub policy_grad_mean_abs: f64,
    pub q_grad_mean_abs: f64,
    pub policy_loss: f64,
    pub q_loss: f64,
}

pub const METRICS_HEADER: &str =
    "epoch,env_steps,mean_return,success_rate,kl_mean,policy_grad_l2,policy_grad_mean_abs,q_grad_mean_abs,policy_loss,q_loss";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainRow {
    pub epoch: usize,
    pub kl_mean: f64,
    pub grad_l2: f64,
    pub grad_mean_abs: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub mean_return: f64,
    pub success_rate: f64,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub label: String,
    pub epoch: usize,
    pub env_steps: usize,
    pub policy: OnlinePolicy,
}

#[derive(Clone, Debug)]
pub struct RunArtifacts {
    pub metrics: Vec<MetricsRow>,
    pub pretrain: Vec<PretrainRow>,
    /// Evaluation of the policy after pretraining, before any environment step.
    pub initial_eval: Option<EvalResult>,
    pub online: OnlinePolicy,
    pub critics: CriticPair,
    pub checkpoints: Vec<Checkpoint>,
}

/// A failed run: the epoch it failed in, the cause, and everything recorded
/// up to that point (`None` when setup itself failed).
#[derive(Debug)]
pub struct TrainError {
    pub epoch: usize,
    pub source: Error,
    pub partial: Option<Box<RunArtifacts>>,
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "training failed in epoch {}: {}", self.epoch, self.source)
    }
}

impl std::error::Error for TrainError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.source)
    }
}

/// Deterministic-mode rollouts from starts drawn with `rng`.
pub fn evaluate<R: Rng + ?Sized>(
    env: &EnvSpec,
    policy: &OnlinePolicy,
    episodes: usize,
    rng: &mut R,
) -> Result<EvalResult> {
    if episodes == 0 {
        return Ok(EvalResult {
            mean_return: f64::NAN,
            success_rate: f64::NAN,
        });
    }
    let mut ret = 0.0;
    let mut wins = 0;
    for _ in 0..episodes {
        let mut ep = Episode::start(env, rng);
        while !ep.finished() {
            let a = policy.act_deterministic(ep.state())?;
            ep.step(env, &a)?;
        }
        ret += ep.episode_return();
        wins += usize::from(ep.success());
    }
    Ok(EvalResult {
        mean_return: ret / episodes as f64,
        success_rate: wins as f64 / episodes as f64,
    })
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

#[derive(Default)]
struct EpochAccumulator {
    steps: usize,
    kl: f64,
    pg_l2: f64,
    pg_abs: f64,
    q_abs: f64,
    p_loss: f64,
    q_loss: f64,
}

impl EpochAccumulator {
    fn mean(&self, v: f64) -> f64 {
        if self.steps == 0 {
            f64::NAN
        } else {
            v / self.steps as f64
        }
    }
}

struct Trainer<'a> {
    config: &'a TrainConfig,
    env: &'a EnvSpec,
    reference: &'a RefPolicy,
    online: OnlinePolicy,
    critics: CriticPair,
    actor_opt: OptimState,
    critic_opts: [OptimState; 2],
    metrics: Vec<MetricsRow>,
    pretrain: Vec<PretrainRow>,
    initial_eval: Option<EvalResult>,
    checkpoints: Vec<Checkpoint>,
}

impl Trainer<'_> {
    fn artifacts(self) -> RunArtifacts {
        RunArtifacts {
            metrics: self.metrics,
            pretrain: self.pretrain,
            initial_eval: self.initial_eval,
            online: self.online,
            critics: self.critics,
            checkpoints: self.checkpoints,
        }
    }

    fn checkpoint(&mut self, label: impl Into<String>, epoch: usize, env_steps: usize) {
        self.checkpoints.push(Checkpoint {
            label: label.into(),
            epoch,
            env_steps,
            policy: self.online.clone(),
        });
    }

    fn run_pretraining(&mut self, demos: &DemoDataset, rng: &mut ChaCha8Rng) -> Result<()> {
        let states = demos.states().transpose();
        let mut order: Vec<usize> = (0..demos.len()).collect();
        for epoch in 0..self.config.pretrain_epochs {
            order.shuffle(rng);
            let (mut kl, mut l2, mut abs, mut n) = (0.0, 0.0, 0.0, 0);
            for chunk in order.chunks(self.config.pretrain_batch_size) {
                let s = DMatrix::from_fn(states.nrows(), chunk.len(), |r, c| states[(r, chunk[c])]);
                let step = pretrain_loss_and_grad(&self.online, self.reference, &s, rng)?;
                self.actor_opt.step(self.online.net_mut(), &step.grads)?;
                kl += step.diagnostics.kl_mean;
                l2 += step.diagnostics.grad_l2;
                abs += step.diagnostics.grad_mean_abs;
                n += 1;
            }
            let n = n as f64;
            self.pretrain.push(PretrainRow {
                epoch,
                kl_mean: kl / n,
                grad_l2: l2 / n,
                grad_mean_abs: abs / n,
            });
        }
        Ok(())
    }

    fn gradient_step(
        &mut self,
        buffer: &ReplayBuffer,
        rng: &mut ChaCha8Rng,
        acc: &mut EpochAccumulator,
    ) -> Result<()> {
        let cfg = self.config;
        let batch = buffer.sample(cfg.batch_size, rng)?;
        let q = q_loss_and_grad(&self.critics, &self.online, self.reference, &batch, cfg.gamma, cfg.alpha, rng)?;
        for i in 0..2 {
            self.critic_opts[i].step(&mut self.critics.live[i], &q.grads[i])?;
        }
        let p = policy_loss_and_grad(&self.online, self.reference, &self.critics, &batch.states, cfg.alpha, rng)?;
        self.actor_opt.step(self.online.net_mut(), &p.grads)?;
        target_update(&mut self.critics, cfg.tau)?;
        acc.steps += 1;
        acc.kl += p.diagnostics.kl_mean;
        acc.pg_l2 += p.diagnostics.grad_l2;
        acc.pg_abs += p.diagnostics.grad_mean_abs;
        acc.q_abs += q.diagnostics.grad_mean_abs;
        acc.p_loss += p.loss;
        acc.q_loss += q.loss;
        Ok(())
    }
}

/// Pretraining toward the reference on demo states, then interleaved
/// environment and gradient steps.
pub fn train(
    config: &TrainConfig,
    env: &EnvSpec,
    reference: &RefPolicy,
    demos: Option<&DemoDataset>,
) -> std::result::Result<RunArtifacts, TrainError> {
    let mut init_rng = stream(config.seed, 0);
    let mut setup = || -> Result<(OnlinePolicy, CriticPair)> {
        config.validate()?;
        env.validate()?;
        if reference.state_dim() != env.state_dim() || reference.action_dim() != env.action_dim() {
            return Err(Error::dim("reference policy action", env.action_dim(), reference.action_dim()));
        }
        let online = OnlinePolicy::for_env(env, &config.hidden, config.squash, &mut init_rng)?;
        let critics = CriticPair::new(env.state_dim(), env.action_dim(), &config.hidden, &mut init_rng)?;
        Ok((online, critics))
    };
    let (online, critics) = setup().map_err(|source| TrainError {
        epoch: 0,
        source,
        partial: None,
    })?;
    let mut t = Trainer {
        config,
        env,
        reference,
        actor_opt: OptimState::for_params(AdamConfig::with_lr(config.actor_lr), online.net()),
        critic_opts: [
            OptimState::for_params(AdamConfig::with_lr(config.critic_lr), &critics.live[0]),
            OptimState::for_params(AdamConfig::with_lr(config.critic_lr), &critics.live[1]),
        ],
        online,
        critics,
        metrics: vec![],
        pretrain: vec![],
        initial_eval: None,
        checkpoints: vec![],
    };
    let mut epoch = 0;
    match run(&mut t, demos, &mut epoch) {
        Ok(()) => Ok(t.artifacts()),
        Err(source) => Err(TrainError {
            epoch,
            source,
            partial: Some(Box::new(t.artifacts())),
        }),
    }
}

fn run(t: &mut Trainer<'_>, demos: Option<&DemoDataset>, epoch: &mut usize) -> Result<()> {
    let cfg = t.config;
    let env = t.env;
    t.checkpoint("start", 0, 0);
    let mut pre_rng = stream(cfg.seed, 1);
    if cfg.pretrain && cfg.pretrain_epochs > 0 {
        let demos = demos.ok_or_else(|| Error::Domain("pretraining needs demonstrations".into()))?;
        if demos.is_empty() {
            return Err(Error::Domain("pretraining needs a non-empty demonstration set".into()));
        }
        if demos.state_dim() != env.state_dim() {
            return Err(Error::dim("demo state width", env.state_dim(), demos.state_dim()));
        }
        t.run_pretraining(demos, &mut pre_rng)?;
        t.checkpoint("pretrained", 0, 0);
    }
    let mut eval_rng = stream(cfg.seed, 4);
    t.initial_eval = Some(evaluate(env, &t.online, cfg.eval_episodes, &mut eval_rng)?);

    let mut env_rng = stream(cfg.seed, 2);
    let mut grad_rng = stream(cfg.seed, 3);
    let mut buffer = ReplayBuffer::new(cfg.buffer_capacity, env.state_dim(), env.action_dim())?;
    let mut ep = Episode::start(env, &mut env_rng);
    let mut acc = EpochAccumulator::default();
    for step in 0..cfg.total_steps {
        *epoch = step / cfg.eval_interval + 1;
        if ep.finished() {
            ep = Episode::start(env, &mut env_rng);
        }
        let s = ep.state().to_vec();
        let a = t.online.act(&s, &mut env_rng)?;
        let out = ep.step(env, &a)?;
        buffer.push(Transition {
            state: s,
            action: a,
            reward: out.reward,
            next_state: out.next_state,
            terminal: out.terminal,
        })?;
        if buffer.len() >= cfg.batch_size {
            for _ in 0..cfg.grad_steps_per_env_step {
                t.gradient_step(&buffer, &mut grad_rng, &mut acc)?;
            }
        }
        let done = step + 1;
        if done % cfg.eval_interval == 0 || done == cfg.total_steps {
            let ev = evaluate(env, &t.online, cfg.eval_episodes, &mut eval_rng)?;
            t.metrics.push(MetricsRow {
                epoch: *epoch,
                env_steps: done,
                mean_return: ev.mean_return,
                success_rate: ev.success_rate,
                kl_mean: acc.mean(acc.kl),
                policy_grad_l2: acc.mean(acc.pg_l2),
                policy_grad_mean_abs: acc.mean(acc.pg_abs),
                q_grad_mean_abs: acc.mean(acc.q_abs),
                policy_loss: acc.mean(acc.p_loss),
                q_loss: acc.mean(acc.q_loss),
            });
            acc = EpochAccumulator::default();
            if *epoch % cfg.checkpoint_every == 0 && done != cfg.total_steps {
                t.checkpoint(format!("epoch-{}", *epoch), *epoch, done);
            }
        }
    }
    let last_epoch = t.metrics.last().map_or(0, |m| m.epoch);
    t.checkpoint("end", last_epoch, cfg.total_steps);
    Ok(())
}

fn fmt_float(v: f64) -> String {
    format!("{v:.8e}")
}

pub fn write_metrics_csv(rows: &[MetricsRow], path: &Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "{METRICS_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{}",
            r.epoch,
            r.env_steps,
            fmt_float(r.mean_return),
            fmt_float(r.success_rate),
            fmt_float(r.kl_mean),
            fmt_float(r.policy_grad_l2),
            fmt_float(r.policy_grad_mean_abs),
            fmt_float(r.q_grad_mean_abs),
            fmt_float(r.policy_loss),
            fmt_float(r.q_loss),
        )?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_pretrain_csv(rows: &[PretrainRow], path: &Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "epoch,kl_mean,grad_l2,grad_mean_abs")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{}",
            r.epoch,
            fmt_float(r.kl_mean),
            fmt_float(r.grad_l2),
            fmt_float(r.grad_mean_abs)
        )?;
    }
    w.flush()?;
    Ok(())
}
