//! Optimization of the bridging network under the three supervision strategies.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::OaGrid;
use crate::error::{Error, Result};
use crate::features::{spec_augment, AugmentPolicy, FeatureMatrix};
use crate::model::{BridgingNet, ForwardOutput, ModelConfig, Parameters};
use crate::supervision::{loss_pq_grad, loss_ri_grad};

/// Which supervision drives training and how ω is chosen at inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Perceptual-quality targets only.
    Pq,
    /// Recognition-information (WER vector) targets only.
    Ri,
    /// Mean of both losses.
    Combined,
}

impl Strategy {
    pub fn needs_pq(self) -> bool {
        matches!(self, Strategy::Pq | Strategy::Combined)
    }

    pub fn needs_wers(self) -> bool {
        matches!(self, Strategy::Ri | Strategy::Combined)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Pq => "pq",
            Strategy::Ri => "ri",
            Strategy::Combined => "combined",
        })
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pq" => Ok(Strategy::Pq),
            "ri" => Ok(Strategy::Ri),
            "combined" => Ok(Strategy::Combined),
            other => Err(Error::Config(format!("unknown strategy {other:?} (pq, ri, combined)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub strategy: Strategy,
    pub lr_peak: f64,
    /// Length of the linear warmup, in optimizer steps.
    pub warmup_steps: usize,
    pub max_epochs: usize,
    /// Global L2 norm the gradient is clipped to.
    pub clip_norm: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// OA grid step.
    pub k: f64,
    pub spec_augment: bool,
    pub augment: AugmentPolicy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Combined,
            lr_peak: 0.0005,
            warmup_steps: 1000,
            max_epochs: 45,
            clip_norm: 10.0,
            batch_size: 16,
            seed: 0,
            k: 0.1,
            spec_augment: true,
            augment: AugmentPolicy::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.lr_peak > 0.0 && self.lr_peak.is_finite()) {
            return bad("lr_peak must be positive");
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip_norm must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be positive");
        }
        OaGrid::new(self.k).map(|_| ())
    }
}

/// Linear ramp from 0 to `lr_peak` over `warmup_steps`, then constant.
pub fn lr_schedule(step: usize, cfg: &TrainConfig) -> f64 {
    if cfg.warmup_steps == 0 || step >= cfg.warmup_steps {
        cfg.lr_peak
    } else {
        cfg.lr_peak * step as f64 / cfg.warmup_steps as f64
    }
}

/// Scales `grads` so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_gradients(grads: &mut Parameters, max_norm: f64) -> Result<f64> {
    let norm = grads.l2_norm();
    if !norm.is_finite() {
        return Err(Error::NonFinite(format!("gradient norm {norm}")));
    }
    if norm > max_norm {
        grads.scale(max_norm / norm);
    }
    Ok(norm)
}

/// Adaptive moment estimation.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(n_params: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut Parameters, grads: &Parameters, lr: f64) -> Result<()> {
        let g = grads.flatten();
        if g.len() != self.m.len() {
            return Err(Error::Shape(format!("optimizer holds {} moments, gradient has {}", self.m.len(), g.len())));
        }
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        for ((m, v), g) in self.m.iter_mut().zip(&mut self.v).zip(&g) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
        }
        if lr == 0.0 {
            return Ok(());
        }
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let mut p = params.flatten();
        for ((p, m), v) in p.iter_mut().zip(&self.m).zip(&self.v) {
            *p -= lr * (m / c1) / ((v / c2).sqrt() + self.eps);
        }
        params.assign_flat(&p)
    }
}

/// Chooses ω from a network output: the quality head for `pq` and
/// `combined`, the grid coefficient at the smallest logit for `ri` (ties go
/// to the larger ω).
pub fn select_omega(out: &ForwardOutput, strategy: Strategy, grid: &OaGrid) -> Result<f64> {
    match strategy {
        Strategy::Pq | Strategy::Combined => Ok(out.omega_hat),
        Strategy::Ri => {
            if out.logits.len() != grid.len() {
                return Err(Error::Shape(format!(
                    "{} logits for a grid of {} coefficients",
                    out.logits.len(),
                    grid.len()
                )));
            }
            let mut best = 0;
            for (i, &v) in out.logits.iter().enumerate() {
                if v < out.logits[best] {
                    best = i;
                }
            }
            Ok(grid.at_descending(best))
        }
    }
}

/// Features and supervision for one training utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainExample {
    pub utt_id: String,
    pub noisy: FeatureMatrix,
    pub enhanced: FeatureMatrix,
    pub pq_target: Option<f64>,
    /// WER vector in descending-OA order.
    pub wers: Option<Vec<f64>>,
}

/// Fails with the ids of examples lacking a target required by `strategy`.
pub fn check_targets(examples: &[TrainExample], strategy: Strategy) -> Result<()> {
    let missing: Vec<String> = examples
        .iter()
        .filter(|e| (strategy.needs_pq() && e.pq_target.is_none()) || (strategy.needs_wers() && e.wers.is_none()))
        .map(|e| e.utt_id.clone())
        .collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(Error::MissingCache(missing))
    }
}

/// Strategy loss of one output and its partial derivatives `(dω̂, dlogits)`.
pub fn strategy_loss(out: &ForwardOutput, ex: &TrainExample, strategy: Strategy) -> Result<(f64, f64, Vec<f64>)> {
    let missing = || Error::MissingCache(vec![ex.utt_id.clone()]);
    let pq = if strategy.needs_pq() {
        Some(loss_pq_grad(out.omega_hat, ex.pq_target.ok_or_else(missing)?))
    } else {
        None
    };
    let ri = if strategy.needs_wers() {
        Some(loss_ri_grad(&out.logits, ex.wers.as_deref().ok_or_else(missing)?)?)
    } else {
        None
    };
    let zeros = || vec![0.0; out.logits.len()];
    Ok(match (pq, ri) {
        (Some((l, d)), None) => (l, d, zeros()),
        (None, Some((l, g))) => (l, 0.0, g),
        (Some((lp, dp)), Some((lr, g))) => ((lp + lr) / 2.0, dp / 2.0, g.into_iter().map(|v| v / 2.0).collect()),
        (None, None) => unreachable!("every strategy uses a loss"),
    })
}

/// Loss and parameter gradient for one example. `augment` carries the
/// masking policy and the seeds for the noisy and enhanced streams.
pub fn example_loss_grad(
    net: &BridgingNet,
    ex: &TrainExample,
    strategy: Strategy,
    augment: Option<(&AugmentPolicy, u64, u64)>,
) -> Result<(f64, Parameters)> {
    let (noisy, enhanced) = match augment {
        Some((policy, s1, s2)) => (spec_augment(&ex.noisy, policy, s1), spec_augment(&ex.enhanced, policy, s2)),
        None => (ex.noisy.clone(), ex.enhanced.clone()),
    };
    let (out, trace) = net.forward_trace(&noisy, &enhanced)?;
    let (loss, d_omega, d_logits) = strategy_loss(&out, ex, strategy)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("loss for {}", ex.utt_id)));
    }
    let mut grad = Parameters::zeros(&net.cfg);
    net.backward(&trace, d_omega, &d_logits, &mut grad);
    Ok((loss, grad))
}

/// Mean un-augmented strategy loss over `examples`.
pub fn evaluate_loss(net: &BridgingNet, examples: &[TrainExample], strategy: Strategy) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::invalid("no examples to evaluate"));
    }
    let losses = examples
        .par_iter()
        .map(|ex| {
            let out = net.forward(&ex.noisy, &ex.enhanced)?;
            Ok(strategy_loss(&out, ex, strategy)?.0)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// One line of the metrics log. Step lines leave `val_loss` empty; the line
/// closing an epoch carries the epoch's mean training loss and the
/// validation loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsEntry {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub val_loss: Option<f64>,
    /// Global gradient norm before clipping (step lines only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grad_norm: Option<f64>,
    /// Global gradient norm actually applied (step lines only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clipped_norm: Option<f64>,
}

pub fn write_metrics_log(path: impl AsRef<Path>, log: &[MetricsEntry]) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for entry in log {
        let line = serde_json::to_string(entry)?;
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the lowest validation loss.
    pub best: BridgingNet,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    /// Parameters after the last epoch.
    pub last: BridgingNet,
    pub log: Vec<MetricsEntry>,
}

/// Trains a freshly initialized network on `train`, selecting the epoch with
/// the lowest loss on `val` (or on `train` when `val` is empty).
pub fn train(
    train_set: &[TrainExample],
    val_set: &[TrainExample],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    let net = BridgingNet::init(model_cfg.clone(), cfg.seed)?;
    train_from(net, train_set, val_set, cfg)
}

/// Continues training `net`.
pub fn train_from(
    mut net: BridgingNet,
    train_set: &[TrainExample],
    val_set: &[TrainExample],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    check_targets(train_set, cfg.strategy)?;
    check_targets(val_set, cfg.strategy)?;
    let grid = OaGrid::new(cfg.k)?;
    if cfg.strategy.needs_wers() && net.cfg.logits_dim != grid.len() {
        return Err(Error::Config(format!(
            "logits_dim {} does not match the grid length {}",
            net.cfg.logits_dim,
            grid.len()
        )));
    }
    if let Some(ex) = train_set
        .iter()
        .chain(val_set)
        .find(|e| e.wers.as_ref().is_some_and(|w| w.len() != net.cfg.logits_dim) && cfg.strategy.needs_wers())
    {
        return Err(Error::Shape(format!("WER vector of {} has the wrong length", ex.utt_id)));
    }

    let mut adam = Adam::new(net.params.n_params());
    let mut log = Vec::new();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut step = 0usize;
    let mut best: Option<(f64, usize, Parameters)> = None;

    for epoch in 1..=cfg.max_epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            step += 1;
            let results = batch
                .par_iter()
                .map(|&i| {
                    let ex = &train_set[i];
                    let augment = cfg.spec_augment.then(|| {
                        let base = mix_seed(cfg.seed, epoch as u64, i as u64);
                        (&cfg.augment, base, base ^ 0x5bd1_e995)
                    });
                    example_loss_grad(&net, ex, cfg.strategy, augment)
                        .map_err(|e| match e {
                            Error::NonFinite(m) => Error::NonFinite(format!("{m} (step {step})")),
                            other => other,
                        })
                })
                .collect::<Vec<_>>();
            // Summed in batch order so the result does not depend on scheduling.
            let mut grad = Parameters::zeros(&net.cfg);
            let mut loss = 0.0;
            for r in results {
                let (l, g) = r?;
                loss += l;
                grad.add_assign(&g);
            }
            let inv = 1.0 / batch.len() as f64;
            loss *= inv;
            grad.scale(inv);
            let grad_norm = clip_gradients(&mut grad, cfg.clip_norm).map_err(|e| {
                let ids: Vec<&str> = batch.iter().map(|&i| train_set[i].utt_id.as_str()).collect();
                Error::NonFinite(format!("{e} at step {step}, batch [{}]", ids.join(", ")))
            })?;
            let lr = lr_schedule(step, cfg);
            adam.step(&mut net.params, &grad, lr)?;
            if !net.params.all_finite() {
                return Err(Error::NonFinite(format!("parameters after step {step}")));
            }
            epoch_loss += loss * batch.len() as f64;
            log.push(MetricsEntry {
                step,
                epoch,
                lr,
                loss,
                val_loss: None,
                grad_norm: Some(grad_norm),
                clipped_norm: Some(grad.l2_norm()),
            });
        }
        let val_loss = if val_set.is_empty() {
            evaluate_loss(&net, train_set, cfg.strategy)?
        } else {
            evaluate_loss(&net, val_set, cfg.strategy)?
        };
        log::info!("epoch {epoch}: train loss {:.6}, val loss {val_loss:.6}", epoch_loss / train_set.len() as f64);
        log.push(MetricsEntry {
            step,
            epoch,
            lr: lr_schedule(step, cfg),
            loss: epoch_loss / train_set.len() as f64,
            val_loss: Some(val_loss),
            grad_norm: None,
            clipped_norm: None,
        });
        if best.as_ref().is_none_or(|b| val_loss < b.0) {
            best = Some((val_loss, epoch, net.params.clone()));
        }
    }

    let (best_val_loss, best_epoch, params) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        best: BridgingNet::new(net.cfg.clone(), params)?,
        best_epoch,
        best_val_loss,
        last: net,
        log,
    })
}

fn mix_seed(seed: u64, epoch: u64, index: u64) -> u64 {
    let mut x = seed ^ epoch.wrapping_mul(0xd6e8_feb8_6659_fd93) ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    x ^= x >> 32;
    x = x.wrapping_mul(0xd6e8_feb8_6659_fd93);
    x ^ (x >> 32)
}
