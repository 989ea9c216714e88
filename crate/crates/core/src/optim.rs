//! Training mathematics: decoupled-weight-decay Adam and the warmup plus
//! cosine-annealing learning-rate schedule.
//!
//! The loss function lives with the other differentiable ops; see
//! [`crate::tensor::label_smoothed_ce`].

use crate::nn::NamedParams;
use crate::tensor::Scalar;

#[derive(Debug, thiserror::Error)]
pub enum OptimError {
    #[error("hyperparameter {name} = {value} is out of range")]
    BadHyper { name: &'static str, value: f64 },
    #[error("warmup_steps {warmup_steps} must be smaller than total_steps {total_steps}")]
    BadWarmup {
        warmup_steps: u64,
        total_steps: u64,
    },
    #[error("min_lr {min_lr} must not exceed base_lr {base_lr}")]
    BadLrRange { min_lr: f64, base_lr: f64 },
    #[error("parameter {name} has no gradient; run backward before stepping")]
    MissingGrad { name: String },
    #[error("non-finite gradient in parameter {name}; step rejected")]
    NonFiniteGrad { name: String },
    #[error("optimizer state does not match parameters: expected {expected}, found {actual}")]
    StateMismatch { expected: String, actual: String },
}

/// AdamW hyperparameters. Defaults: lr 0.001, betas (0.9, 0.999), eps 1e-8,
/// weight decay 0.05.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWHyper {
    fn default() -> Self {
        AdamWHyper {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

impl AdamWHyper {
    pub fn validate(&self) -> Result<(), OptimError> {
        let checks: [(&'static str, f64, bool); 5] = [
            ("lr", self.lr, self.lr > 0.0 && self.lr.is_finite()),
            ("beta1", self.beta1, (0.0..1.0).contains(&self.beta1)),
            ("beta2", self.beta2, (0.0..1.0).contains(&self.beta2)),
            ("eps", self.eps, self.eps > 0.0 && self.eps.is_finite()),
            (
                "weight_decay",
                self.weight_decay,
                self.weight_decay >= 0.0 && self.weight_decay.is_finite(),
            ),
        ];
        for (name, value, ok) in checks {
            if !ok {
                return Err(OptimError::BadHyper { name, value });
            }
        }
        Ok(())
    }
}

/// Per-step learning-rate schedule: a linear ramp from `warmup_start_lr` to
/// `base_lr` over `warmup_steps`, then cosine annealing down to `min_lr` at
/// `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Schedule {
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub base_lr: f64,
    pub min_lr: f64,
    pub warmup_start_lr: f64,
}

impl Schedule {
    /// Conventional constants around a step budget: base_lr 0.001, floor and
    /// warmup start 1e-6.
    pub fn with_steps(warmup_steps: u64, total_steps: u64) -> Self {
        Schedule {
            warmup_steps,
            total_steps,
            base_lr: 0.001,
            min_lr: 1e-6,
            warmup_start_lr: 1e-6,
        }
    }

    pub fn validate(&self) -> Result<(), OptimError> {
        if self.warmup_steps >= self.total_steps {
            return Err(OptimError::BadWarmup {
                warmup_steps: self.warmup_steps,
                total_steps: self.total_steps,
            });
        }
        if !(self.min_lr <= self.base_lr) {
            return Err(OptimError::BadLrRange {
                min_lr: self.min_lr,
                base_lr: self.base_lr,
            });
        }
        for (name, value) in [
            ("base_lr", self.base_lr),
            ("min_lr", self.min_lr),
            ("warmup_start_lr", self.warmup_start_lr),
        ] {
            if !(value >= 0.0 && value.is_finite()) {
                return Err(OptimError::BadHyper { name, value });
            }
        }
        Ok(())
    }

    /// Learning rate at `step`; defined for 0 <= step <= total_steps and
    /// clamped to the floor beyond.
    pub fn lr_at(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            let t = step as f64 / self.warmup_steps as f64;
            return self.warmup_start_lr + (self.base_lr - self.warmup_start_lr) * t;
        }
        let span = (self.total_steps - self.warmup_steps) as f64;
        let progress = ((step - self.warmup_steps) as f64 / span).min(1.0);
        self.min_lr
            + 0.5 * (self.base_lr - self.min_lr) * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

struct Moment<E: Scalar> {
    name: String,
    m: Vec<E>,
    v: Vec<E>,
}

/// First/second moment buffers plus step counter, aligned with a parameter
/// registry by name and order.
pub struct OptState<E: Scalar> {
    step: u64,
    moments: Vec<Moment<E>>,
}

impl<E: Scalar> OptState<E> {
    pub fn new(params: &NamedParams<E>) -> Self {
        OptState {
            step: 0,
            moments: params
                .iter()
                .map(|(name, p)| Moment {
                    name: name.clone(),
                    m: vec![E::zero(); p.numel()],
                    v: vec![E::zero(); p.numel()],
                })
                .collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Moment buffers in parameter order, for checkpointing.
    pub fn entries(&self) -> impl Iterator<Item = (&str, &[E], &[E])> {
        self.moments
            .iter()
            .map(|mom| (mom.name.as_str(), &mom.m[..], &mom.v[..]))
    }

    /// Rebuild from checkpointed buffers. Alignment with the parameter
    /// registry is enforced on the next [`adamw_step`].
    pub fn from_entries(step: u64, entries: Vec<(String, Vec<E>, Vec<E>)>) -> Self {
        OptState {
            step,
            moments: entries
                .into_iter()
                .map(|(name, m, v)| Moment { name, m, v })
                .collect(),
        }
    }
}

/// One AdamW update over every parameter: bias-corrected Adam on the
/// gradients plus decoupled decay `theta -= lr_t * wd * theta`. Gradients
/// are read from the tensors' accumulated grads; the caller zeroes them.
/// A non-finite gradient anywhere rejects the whole step without mutating
/// parameters or state. `lr_t` may be zero (a schedule can start there);
/// the step then advances moments but leaves parameters bit-identical.
pub fn adamw_step<E: Scalar>(
    params: &NamedParams<E>,
    state: &mut OptState<E>,
    hyper: &AdamWHyper,
    lr_t: f64,
) -> Result<(), OptimError> {
    hyper.validate()?;
    if !(lr_t >= 0.0 && lr_t.is_finite()) {
        return Err(OptimError::BadHyper {
            name: "lr_t",
            value: lr_t,
        });
    }
    if params.len() != state.moments.len() {
        return Err(OptimError::StateMismatch {
            expected: format!("{} parameters", params.len()),
            actual: format!("{} moment buffers", state.moments.len()),
        });
    }
    let mut grads = Vec::with_capacity(params.len());
    for ((name, p), mom) in params.iter().zip(&state.moments) {
        if mom.name != *name || mom.m.len() != p.numel() {
            return Err(OptimError::StateMismatch {
                expected: format!("{name} ({} elements)", p.numel()),
                actual: format!("{} ({} elements)", mom.name, mom.m.len()),
            });
        }
        let g = p.grad().ok_or_else(|| OptimError::MissingGrad {
            name: name.clone(),
        })?;
        if g.iter().any(|v| !v.is_finite()) {
            return Err(OptimError::NonFiniteGrad { name: name.clone() });
        }
        grads.push(g);
    }

    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - hyper.beta1.powi(t);
    let bc2 = 1.0 - hyper.beta2.powi(t);
    for (((_, p), mom), g) in params.iter().zip(&mut state.moments).zip(&grads) {
        let mut theta = p.to_vec();
        for i in 0..theta.len() {
            let gi = g[i].as_f64();
            let m = hyper.beta1 * mom.m[i].as_f64() + (1.0 - hyper.beta1) * gi;
            let v = hyper.beta2 * mom.v[i].as_f64() + (1.0 - hyper.beta2) * gi * gi;
            mom.m[i] = E::from_f64(m);
            mom.v[i] = E::from_f64(v);
            let update = (m / bc1) / ((v / bc2).sqrt() + hyper.eps)
                + hyper.weight_decay * theta[i].as_f64();
            theta[i] = E::from_f64(theta[i].as_f64() - lr_t * update);
        }
        // lr_t = 0 must leave parameters bit-identical; `x - 0.0 * u` flips
        // the sign of a negative-zero theta when u < 0, so skip the write.
        if lr_t != 0.0 {
            p.set_data(&theta);
        }
    }
    Ok(())
}
