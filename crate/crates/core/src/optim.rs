//! AdamW with a polynomial learning-rate schedule.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// `base_lr * (1 - step/total)^power`.
pub fn poly_lr(step: usize, total: usize, base_lr: f64, power: f64) -> f64 {
    let step = step.min(total);
    base_lr * (1.0 - step as f64 / total as f64).powf(power)
}

#[derive(Debug, Clone)]
pub struct OptimState<T> {
    pub first_moment: Vec<Tensor<T>>,
    pub second_moment: Vec<Tensor<T>>,
    pub step: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub total_iters: usize,
    pub poly_power: f64,
}

impl<T: Real> OptimState<T> {
    pub fn new(
        param_shapes: &[&[usize]],
        base_lr: f64,
        weight_decay: f64,
        total_iters: usize,
        poly_power: f64,
    ) -> Result<Self> {
        if !(base_lr > 0.0) || weight_decay < 0.0 || total_iters == 0 || !(poly_power > 0.0) {
            return Err(Error::config(format!(
                "optimizer needs lr > 0, wd >= 0, iters > 0, power > 0 \
                 (got {base_lr}, {weight_decay}, {total_iters}, {poly_power})"
            )));
        }
        let zeros: Vec<Tensor<T>> = param_shapes.iter().map(|s| Tensor::zeros(s)).collect();
        Ok(OptimState {
            second_moment: zeros.clone(),
            first_moment: zeros,
            step: 0,
            base_lr,
            weight_decay,
            total_iters,
            poly_power,
        })
    }

    /// Learning rate the next call to [`adamw_step`] will use.
    pub fn current_lr(&self) -> f64 {
        poly_lr(self.step, self.total_iters, self.base_lr, self.poly_power)
    }
}

/// One decoupled-weight-decay Adam update. Returns the learning rate used.
pub fn adamw_step<T: Real>(
    params: &mut [Tensor<T>],
    grads: &[Tensor<T>],
    st: &mut OptimState<T>,
    names: Option<&[String]>,
) -> Result<f64> {
    if params.len() != grads.len() || params.len() != st.first_moment.len() {
        return Err(Error::dim(format!(
            "{} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            st.first_moment.len()
        )));
    }
    if st.step >= st.total_iters {
        return Err(Error::config(format!(
            "optimizer already ran its {} iterations",
            st.total_iters
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        let label = names
            .and_then(|n| n.get(i).cloned())
            .unwrap_or_else(|| format!("#{i}"));
        if p.shape() != g.shape() || p.shape() != st.first_moment[i].shape() {
            return Err(Error::dim(format!(
                "param {label}: shape {:?}, grad {:?}",
                p.shape(),
                g.shape()
            )));
        }
        if let Some(pos) = g.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite gradient in param {label} at coordinate {pos} (step {})",
                st.step
            )));
        }
    }

    let lr = st.current_lr();
    let t = (st.step + 1) as i32;
    let bc1 = 1.0 - BETA1.powi(t);
    let bc2 = 1.0 - BETA2.powi(t);
    let (b1, b2) = (T::from_f64(BETA1), T::from_f64(BETA2));
    let (ob1, ob2) = (T::from_f64(1.0 - BETA1), T::from_f64(1.0 - BETA2));
    let decay = T::from_f64(1.0 - lr * st.weight_decay);
    let step_size = T::from_f64(lr / bc1);
    let inv_sqrt_bc2 = T::from_f64(1.0 / bc2.sqrt());
    let eps = T::from_f64(ADAM_EPS);

    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = st.first_moment[i].data_mut();
        let v = st.second_moment[i].data_mut();
        for (((pv, &gv), mv), vv) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *mv = b1 * *mv + ob1 * gv;
            *vv = b2 * *vv + ob2 * gv * gv;
            *pv *= decay;
            *pv -= step_size * *mv / (vv.sqrt() * inv_sqrt_bc2 + eps);
        }
    }
    st.step += 1;
    Ok(lr)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state(lr: f64, wd: f64) -> OptimState<f64> {
        OptimState::new(&[&[1]], lr, wd, 10, 1.0).unwrap()
    }

    #[test]
    fn poly_endpoints_and_midpoint() {
        assert_eq!(poly_lr(0, 100, 6e-5, 1.0), 6e-5);
        assert_eq!(poly_lr(100, 100, 6e-5, 1.0), 0.0);
        assert!((poly_lr(50, 100, 6e-5, 1.0) - 3e-5).abs() < 1e-20);
    }

    #[test]
    fn zero_gradient_without_decay_leaves_params() {
        let mut st = state(0.1, 0.0);
        let mut p = vec![Tensor::scalar(0.7)];
        adamw_step(&mut p, &[Tensor::scalar(0.0)], &mut st, None).unwrap();
        assert_eq!(p[0].data()[0], 0.7);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn unit_gradient_moves_by_lr() {
        // bias-corrected m̂ = v̂ = 1 → update = lr * 1 / (1 + eps)
        let mut st = OptimState::new(&[&[1]], 0.1, 0.0, 10, 1.0).unwrap();
        let mut p = vec![Tensor::scalar(1.0)];
        adamw_step(&mut p, &[Tensor::scalar(1.0)], &mut st, None).unwrap();
        let expected: f64 = 1.0 - 0.1 / (1.0 + 1e-8);
        assert!((p[0].data()[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn decay_is_decoupled() {
        let mut st = state(0.1, 0.01);
        let mut p = vec![Tensor::scalar(2.0)];
        adamw_step(&mut p, &[Tensor::scalar(0.0)], &mut st, None).unwrap();
        assert!((p[0].data()[0] - (2.0 - 0.1 * 0.01 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn nan_gradient_aborts_with_name() {
        let mut st = state(0.1, 0.0);
        let mut p = vec![Tensor::scalar(1.0)];
        let names = vec!["enc.w".to_string()];
        let err =
            adamw_step(&mut p, &[Tensor::scalar(f64::NAN)], &mut st, Some(&names)).unwrap_err();
        assert!(err.to_string().contains("enc.w"));
        assert_eq!(st.step, 0);
    }

    #[test]
    fn refuses_to_step_past_budget() {
        let mut st = OptimState::<f64>::new(&[&[1]], 0.1, 0.0, 1, 1.0).unwrap();
        let mut p = vec![Tensor::scalar(1.0)];
        adamw_step(&mut p, &[Tensor::scalar(1.0)], &mut st, None).unwrap();
        assert!(adamw_step(&mut p, &[Tensor::scalar(1.0)], &mut st, None).is_err());
    }
}
