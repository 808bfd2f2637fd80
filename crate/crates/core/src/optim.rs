//! AdamW with decoupled weight decay and the warmup-cosine learning rate
//! schedule.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Learning rate at `step` of `total_steps`: linear from 0 to `peak_lr`
/// over the warmup span, then cosine decay to 0.
pub fn lr_at(step: usize, total_steps: usize, peak_lr: f64, warmup_fraction: f64) -> Result<f64> {
    if step >= total_steps {
        return Err(Error::Schedule(format!(
            "step {step} outside schedule of {total_steps} steps"
        )));
    }
    let warmup = ((total_steps as f64) * warmup_fraction).round() as usize;
    if step < warmup {
        return Ok(peak_lr * step as f64 / warmup as f64);
    }
    let span = (total_steps - warmup) as f64;
    let progress = (step - warmup) as f64 / span;
    Ok(peak_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

#[derive(Debug, Clone, Copy)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.1,
        }
    }
}

struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// AdamW state keyed by parameter slot (the stable visit order).
pub struct AdamW {
    cfg: AdamWConfig,
    slots: Vec<Option<Moments>>,
    t: u64,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, slots: usize) -> Self {
        AdamW {
            cfg,
            slots: (0..slots).map(|_| None).collect(),
        t: 0,
        }
    }

    /// Advance the global step counter (bias correction uses it).
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    /// Update one parameter in place. Decoupled weight decay shrinks the
    /// parameter before the adaptive update; `decay` is off for biases,
    /// gains and scalars. A non-finite gradient aborts the step.
    pub fn step_param(
        &mut self,
        slot: usize,
        tensor: &mut Tensor,
        grad: &[f64],
        lr: f64,
        decay: bool,
    ) -> Result<()> {
        if grad.len() != tensor.numel() {
            return Err(Error::ShapeMismatch {
                op: "adamw_step",
                left: tensor.shape.clone(),
                right: vec![grad.len()],
            });
        }
        if !grad.iter().all(|g| g.is_finite()) {
            return Err(Error::Diverged(format!(
                "non-finite gradient in parameter slot {slot}"
            )));
        }
        let moments = self.slots[slot].get_or_insert_with(|| Moments {
            m: vec![0.0; grad.len()],
            v: vec![0.0; grad.len()],
        });
        let (b1, b2, eps) = (self.cfg.beta1, self.cfg.beta2, self.cfg.eps);
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        let wd = if decay { self.cfg.weight_decay } else { 0.0 };
        for (((p, &g), m), v) in tensor
            .data
            .iter_mut()
            .zip(grad)
            .zip(moments.m.iter_mut())
            .zip(moments.v.iter_mut())
        {
            *p -= lr * wd * *p;
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_schedule_boundaries() {
        let total = 2048;
        let peak = 5e-4;
        let frac = 0.05;
        assert_eq!(lr_at(0, total, peak, frac).unwrap(), 0.0);
        let warmup = ((total as f64) * frac).round() as usize;
        assert!((lr_at(warmup, total, peak, frac).unwrap() - peak).abs() < 1e-18);
        // midpoint of the decay span
        let mid = warmup + (total - warmup) / 2;
        let lr = lr_at(mid, total, peak, frac).unwrap();
        assert!((lr - peak / 2.0).abs() < peak * 1e-3);
        assert!(lr_at(total, total, peak, frac).is_err());
    }

    #[test]
    fn warmup_is_linear() {
        let lr1 = lr_at(10, 1000, 1e-3, 0.1).unwrap();
        let lr2 = lr_at(20, 1000, 1e-3, 0.1).unwrap();
        assert!((lr2 - 2.0 * lr1).abs() < 1e-15);
    }

    #[test]
    fn zero_grad_without_decay_leaves_params() {
        let mut opt = AdamW::new(
            AdamWConfig {
                weight_decay: 0.0,
                ..Default::default()
            },
            1,
        );
        let mut p = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        opt.begin_step();
        opt.step_param(0, &mut p, &[0.0, 0.0, 0.0], 1e-3, true).unwrap();
        assert_eq!(p.data, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut opt = AdamW::new(
            AdamWConfig {
                weight_decay: 0.0,
                ..Default::default()
            },
            1,
        );
        let mut p = Tensor::new(vec![2], vec![0.0, 0.0]).unwrap();
        let lr = 1e-2;
        opt.begin_step();
        opt.step_param(0, &mut p, &[0.37, -5.1], lr, false).unwrap();
        // bias-corrected first step: update = lr * g / (|g| + eps) ~ lr*sign
        assert!((p.data[0] + lr).abs() < lr * 1e-6);
        assert!((p.data[1] - lr).abs() < lr * 1e-6);
    }

    #[test]
    fn decoupled_decay_shrinks_multiplicatively() {
        let mut opt = AdamW::new(
            AdamWConfig {
                weight_decay: 0.1,
                ..Default::default()
            },
            1,
        );
        let mut p = Tensor::new(vec![2], vec![2.0, -4.0]).unwrap();
        let lr = 1e-2;
        opt.begin_step();
        opt.step_param(0, &mut p, &[0.0, 0.0], lr, true).unwrap();
        assert!((p.data[0] - 2.0 * (1.0 - lr * 0.1)).abs() < 1e-15);
        assert!((p.data[1] + 4.0 * (1.0 - lr * 0.1)).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut opt = AdamW::new(AdamWConfig::default(), 1);
        let mut p = Tensor::new(vec![1], vec![1.0]).unwrap();
        opt.begin_step();
        assert!(matches!(
            opt.step_param(0, &mut p, &[f64::NAN], 1e-3, true),
            Err(Error::Diverged(_))
        ));
        assert_eq!(p.data, vec![1.0]);
    }
}
