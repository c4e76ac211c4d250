//! Training objective, Adam, and a single optimization step.

use alloc::string::String;
use alloc::vec::Vec;

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::gumbel::NoiseSource;
use crate::model::{forward_train, LeapModel, LeapParams, SkipControl};
use crate::tape::{Tape, Var};
use crate::tensor::{argmax, Tensor};

/// Schedule-training settings for the plain-LSTM baseline.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ScheduleConfig {
    pub enabled: bool,
    pub r_m: f64,
    pub beta: f64,
    /// Index assigned to the first epoch, 0 or 1.
    pub index_base: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            enabled: false,
            r_m: 0.45,
            beta: 0.15,
            index_base: 0,
        }
    }
}

impl ScheduleConfig {
    /// Deletion probability for the 0-based epoch counter `epoch`.
    pub fn probability(&self, epoch: usize) -> f64 {
        if !self.enabled {
            return 0.0;
        }
        crate::data::mask_probability(self.r_m, self.beta, epoch + self.index_base)
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainConfig {
    /// Weight of the skip-rate penalty.
    pub lambda: f64,
    /// Desired skip rate.
    pub r_target: f64,
    /// Gumbel-softmax temperature, held constant.
    pub tau: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without dev improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    /// Global gradient-norm clip; off when `None`.
    pub clip_norm: Option<f64>,
    pub schedule: ScheduleConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 1.0,
            r_target: 0.6,
            tau: 0.1,
            lr: 0.001,
            batch_size: 32,
            max_epochs: 10,
            patience: 2,
            seed: 0,
            clip_norm: None,
            schedule: ScheduleConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let checks: [(&'static str, f64, bool); 8] = [
            ("lambda", self.lambda, self.lambda >= 0.0),
            ("r_target", self.r_target, (0.0..=1.0).contains(&self.r_target)),
            ("tau", self.tau, self.tau > 0.0),
            ("lr", self.lr, self.lr > 0.0),
            ("batch_size", self.batch_size as f64, self.batch_size >= 1),
            ("r_m", self.schedule.r_m, (0.0..=1.0).contains(&self.schedule.r_m)),
            ("beta", self.schedule.beta, self.schedule.beta >= 0.0),
            ("index_base", self.schedule.index_base as f64, self.schedule.index_base <= 1),
        ];
        for (name, value, ok) in checks {
            if !ok {
                return Err(Error::Parameter { name, value });
            }
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::Parameter {
                    name: "clip_norm",
                    value: c,
                });
            }
        }
        Ok(())
    }
}

/// Handles of the assembled loss.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub classifier: Var,
    pub penalty: Option<Var>,
}

/// `cross_entropy + lambda * (r_target - r)^2`; the penalty is omitted when
/// there is no skip rate.
pub fn assemble_loss(
    tape: &mut Tape<'_>,
    probs: Var,
    labels: &[usize],
    skip_rate: Option<Var>,
    lambda: f64,
    r_target: f64,
) -> Result<LossVars> {
    let classifier = tape.cross_entropy(probs, labels)?;
    match skip_rate {
        Some(r) => {
            let gap = tape.affine(r, -1.0, r_target);
            let sq = tape.square(gap);
            let penalty = tape.affine(sq, lambda, 0.0);
            let total = tape.add(classifier, penalty)?;
            Ok(LossVars {
                total,
                classifier,
                penalty: Some(penalty),
            })
        }
        None => Ok(LossVars {
            total: classifier,
            classifier,
            penalty: None,
        }),
    }
}

/// `lambda * (r_target - r)^2`.
pub fn penalty(lambda: f64, r_target: f64, r: f64) -> f64 {
    let gap = r_target - r;
    lambda * gap * gap
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First and second moments per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AdamState {
    pub first: Vec<Tensor>,
    pub second: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &[&Tensor]) -> Self {
        AdamState {
            first: params.iter().map(|t| Tensor::zeros(t.shape())).collect(),
            second: params.iter().map(|t| Tensor::zeros(t.shape())).collect(),
            step: 0,
        }
    }

    pub fn for_params(params: &LeapParams) -> Self {
        Self::new(&params.tensors())
    }
}

/// Bias-corrected Adam update. Every gradient is checked for finiteness
/// before anything is modified; `names` label the offending group.
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[&Tensor],
    names: &[String],
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first.len() {
        return Err(Error::Shape {
            op: "adam_step",
            lhs: alloc::vec![params.len(), grads.len()],
            rhs: alloc::vec![state.first.len()],
        });
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || state.first[i].shape() != p.shape() {
            return Err(Error::Shape {
                op: "adam_step",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        if !g.all_finite() {
            let group = names.get(i).cloned().unwrap_or_else(|| alloc::format!("#{i}"));
            return Err(Error::NonFinite { group });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - libm::pow(ADAM_BETA1, t as f64);
    let c2 = 1.0 - libm::pow(ADAM_BETA2, t as f64);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.first[i].data_mut();
        let v = state.second[i].data_mut();
        for (((pj, &gj), mj), vj) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
            *mj = ADAM_BETA1 * *mj + (1.0 - ADAM_BETA1) * gj;
            *vj = ADAM_BETA2 * *vj + (1.0 - ADAM_BETA2) * gj * gj;
            let m_hat = *mj / c1;
            let v_hat = *vj / c2;
            *pj -= lr * m_hat / (libm::sqrt(v_hat) + ADAM_EPS);
        }
    }
    Ok(())
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut LeapParams, max_norm: f64) -> f64 {
    let norm = libm::sqrt(grads.tensors().iter().map(|t| t.norm_sq()).sum::<f64>());
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        for t in grads.tensors_mut() {
            t.scale_assign(s);
        }
    }
    norm
}

/// Statistics of one optimization step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub classifier_loss: f64,
    pub penalty: f64,
    /// Soft skip rate of the batch (0 for the plain LSTM).
    pub skip_rate: f64,
    pub correct: usize,
    pub documents: usize,
    pub tokens: usize,
}

/// Loss and parameter gradients for one batch without updating anything.
pub fn loss_and_gradients(
    model: &LeapModel,
    batch: &Batch,
    cfg: &TrainConfig,
    noise: &mut dyn NoiseSource,
) -> Result<(StepStats, LeapParams)> {
    let control = if model.skipping {
        SkipControl::Gumbel {
            noise,
            tau: cfg.tau,
        }
    } else {
        SkipControl::Disabled
    };
    let mut fwd = forward_train(&model.config, &model.params, batch, control)?;
    let loss = assemble_loss(
        &mut fwd.tape,
        fwd.probs,
        batch.labels(),
        fwd.skip_rate,
        cfg.lambda,
        cfg.r_target,
    )?;
    let grads = fwd.tape.backward(loss.total)?;
    let probs = fwd.tape.value(fwd.probs);
    let correct = batch
        .labels()
        .iter()
        .enumerate()
        .filter(|(b, &label)| argmax(probs.row(*b)) == label)
        .count();
    let stats = StepStats {
        loss: fwd.tape.value(loss.total).data()[0],
        classifier_loss: fwd.tape.value(loss.classifier).data()[0],
        penalty: loss.penalty.map_or(0.0, |p| fwd.tape.value(p).data()[0]),
        skip_rate: fwd.skip_rate_value(),
        correct,
        documents: batch.size(),
        tokens: batch.token_count(),
    };
    let grads = fwd.vars.gradients(&model.params, &grads);
    Ok((stats, grads))
}

/// Forward, backward, optional clipping, and one Adam update.
pub fn train_step(
    model: &mut LeapModel,
    state: &mut AdamState,
    batch: &Batch,
    cfg: &TrainConfig,
    noise: &mut dyn NoiseSource,
) -> Result<StepStats> {
    let (stats, mut grads) = loss_and_gradients(model, batch, cfg, noise)?;
    if !stats.loss.is_finite() {
        return Err(Error::NonFinite {
            group: String::from("loss"),
        });
    }
    if let Some(max_norm) = cfg.clip_norm {
        clip_grad_norm(&mut grads, max_norm);
    }
    let names = model.params.group_names();
    let grad_refs = grads.tensors();
    let mut param_refs = model.params.tensors_mut();
    adam_step(&mut param_refs, &grad_refs, &names, state, cfg.lr)?;
    Ok(stats)
}
