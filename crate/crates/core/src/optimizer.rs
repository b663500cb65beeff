//! AdamW with decoupled weight decay, and the iteration-based LR schedule.
//!
//! One step at learning rate `lr_t`:
//!
//! ```text
//! m <- b1 m + (1 - b1) g
//! v <- b2 v + (1 - b2) g^2
//! theta <- theta - lr_t * ( m/(1-b1^t) / (sqrt(v/(1-b2^t)) + eps) + wd * theta )
//! ```
//!
//! Decay is applied to every tensor and never enters `m` or `v`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Parameters;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWHyper {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWHyper {
    fn default() -> Self {
        AdamWHyper {
            lr: 1e-4,
            weight_decay: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamWHyper {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.weight_decay >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("invalid AdamW hyper-parameters {self:?}")))
        }
    }
}

/// First/second moments mirroring the parameter tensors, plus the step count.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new<P: Parameters>(params: &P) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.data.len()]).collect();
        OptimizerState {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

pub fn adamw_step<P: Parameters>(
    params: &mut P,
    grads: &P,
    state: &mut OptimizerState,
    hyper: &AdamWHyper,
    lr_t: f64,
) -> Result<()> {
    // lr_t = 0 is legal: the first warmup step still advances the moments.
    if !(lr_t >= 0.0 && lr_t.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "learning rate {lr_t} must be non-negative"
        )));
    }
    let grads = grads.tensors();
    let shapes: Vec<usize> = params.tensors().iter().map(|t| t.data.len()).collect();
    if grads.len() != shapes.len() || state.m.len() != shapes.len() || state.v.len() != shapes.len() {
        return Err(Error::dim("optimizer tensor count", shapes.len(), grads.len()));
    }
    for ((g, &len), (m, v)) in grads.iter().zip(&shapes).zip(state.m.iter().zip(&state.v)) {
        if g.data.len() != len || m.len() != len || v.len() != len {
            return Err(Error::ShapeMismatch {
                name: g.name.to_string(),
                expected: vec![len],
                found: vec![g.data.len()],
            });
        }
        if !g.data.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFiniteGradient {
                tensor: g.name.to_string(),
            });
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - hyper.beta1.powi(t);
    let bc2 = 1.0 - hyper.beta2.powi(t);
    for (((_, theta), g), (m, v)) in params
        .tensors_mut()
        .into_iter()
        .zip(&grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        for i in 0..theta.len() {
            let gi = g.data[i];
            m[i] = hyper.beta1 * m[i] + (1.0 - hyper.beta1) * gi;
            v[i] = hyper.beta2 * v[i] + (1.0 - hyper.beta2) * gi * gi;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            theta[i] -= lr_t * (m_hat / (v_hat.sqrt() + hyper.eps) + hyper.weight_decay * theta[i]);
        }
    }
    Ok(())
}

pub const DEFAULT_WARMUP_FRACTION: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Schedule {
    Constant,
    /// Linear ramp from 0 over `floor(warmup_fraction * total)` iterations,
    /// then half-cosine decay towards 0.
    WarmupCosine {
        warmup_fraction: f64,
    },
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule::WarmupCosine {
            warmup_fraction: DEFAULT_WARMUP_FRACTION,
        }
    }
}

impl Schedule {
    pub fn warmup_iters(&self, total: usize) -> usize {
        match *self {
            Schedule::Constant => 0,
            Schedule::WarmupCosine { warmup_fraction } => (warmup_fraction * total as f64).floor() as usize,
        }
    }
}

pub fn lr_at(schedule: &Schedule, base_lr: f64, iter: usize, total: usize) -> Result<f64> {
    if iter >= total {
        return Err(Error::InvalidConfig(format!(
            "iteration {iter} outside schedule of {total}"
        )));
    }
    Ok(match schedule {
        Schedule::Constant => base_lr,
        Schedule::WarmupCosine { .. } => {
            let warmup = schedule.warmup_iters(total);
            if iter < warmup {
                base_lr * iter as f64 / warmup as f64
            } else {
                let progress = (iter - warmup) as f64 / (total - warmup) as f64;
                base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
            }
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Tensor;

    #[derive(Clone)]
    struct Flat(Vec<f64>);

    impl Parameters for Flat {
        fn tensors(&self) -> Vec<Tensor<'_>> {
            vec![Tensor {
                name: "theta",
                shape: vec![self.0.len()],
                data: &self.0,
            }]
        }

        fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
            vec![("theta", &mut self.0[..])]
        }
    }

    fn hyper(lr: f64, wd: f64) -> AdamWHyper {
        AdamWHyper {
            lr,
            weight_decay: wd,
            ..AdamWHyper::default()
        }
    }

    #[test]
    fn zero_gradient_without_decay_is_identity() {
        let mut p = Flat(vec![1.0, -2.0, 3.5]);
        let mut s = OptimizerState::new(&p);
        for _ in 0..5 {
            adamw_step(&mut p, &Flat(vec![0.0; 3]), &mut s, &hyper(0.1, 0.0), 0.1).unwrap();
        }
        assert_eq!(p.0, vec![1.0, -2.0, 3.5]);
        assert_eq!(s.step, 5);
    }

    #[test]
    fn first_step_closed_form() {
        let mut p = Flat(vec![1.0]);
        let mut s = OptimizerState::new(&p);
        adamw_step(&mut p, &Flat(vec![1.0]), &mut s, &hyper(0.1, 0.0), 0.1).unwrap();
        assert!((p.0[0] - (1.0 - 0.1 / (1.0 + 1e-8))).abs() < 1e-12);
        assert!((p.0[0] - 0.9000000009).abs() < 1e-9);
    }

    #[test]
    fn decay_acts_at_zero_gradient() {
        let mut p = Flat(vec![1.0]);
        let mut s = OptimizerState::new(&p);
        adamw_step(&mut p, &Flat(vec![0.0]), &mut s, &hyper(0.1, 0.01), 0.1).unwrap();
        assert!((p.0[0] - 0.999).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_names_tensor_and_leaves_state() {
        let mut p = Flat(vec![1.0]);
        let mut s = OptimizerState::new(&p);
        let err = adamw_step(&mut p, &Flat(vec![f64::NAN]), &mut s, &hyper(0.1, 0.0), 0.1).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient { ref tensor } if tensor == "theta"));
        assert_eq!(s.step, 0);
        assert_eq!(p.0, vec![1.0]);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = Flat(vec![1.0, 2.0]);
        let mut s = OptimizerState::new(&p);
        assert!(adamw_step(&mut p, &Flat(vec![0.0]), &mut s, &hyper(0.1, 0.0), 0.1).is_err());
        assert!(adamw_step(&mut p, &Flat(vec![0.0; 2]), &mut s, &hyper(0.1, 0.0), -1.0).is_err());
    }

    #[test]
    fn schedule_endpoints() {
        let s = Schedule::default();
        let total = 1000;
        assert_eq!(lr_at(&s, 1e-4, 0, total).unwrap(), 0.0);
        assert_eq!(lr_at(&s, 1e-4, 50, total).unwrap(), 1e-4);
        // Cosine phase spans 50..1000, midpoint 525.
        assert!((lr_at(&s, 1e-4, 525, total).unwrap() - 5e-5).abs() < 1e-18);
        assert!(lr_at(&s, 1e-4, 1000, total).is_err());
        assert_eq!(lr_at(&Schedule::Constant, 3e-3, 7, 10).unwrap(), 3e-3);
    }

    #[test]
    fn schedule_is_monotone_after_warmup() {
        let s = Schedule::default();
        let total = 2532;
        let w = s.warmup_iters(total);
        assert_eq!(w, 126);
        let lrs: Vec<f64> = (0..total).map(|i| lr_at(&s, 1e-4, i, total).unwrap()).collect();
        assert!(lrs[..=w].windows(2).all(|p| p[0] <= p[1]));
        assert!(lrs[w..].windows(2).all(|p| p[0] >= p[1]));
        assert!(lrs.iter().all(|&l| l > 0.0 || l == lrs[0]));
    }
}
