use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use super::scalar::Real;
use crate::error::{ClanError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(ClanError::Config(format!("invalid Adam settings {self:?}")))
        }
    }
}

/// First and second moment estimates plus the step count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct AdamState<T: Real> {
    pub m: Vec<Array2<T>>,
    pub v: Vec<Array2<T>>,
    pub step: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &[Array2<T>]) -> Self {
        let zeros = || params.iter().map(|p| Array2::zeros(p.dim())).collect();
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step<T: Real>(
    params: &mut [Array2<T>],
    grads: &[Array2<T>],
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() || params.len() != state.v.len() {
        return Err(ClanError::Shape(format!(
            "adam: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.dim() != g.dim() || p.dim() != state.m[i].dim() || p.dim() != state.v[i].dim() {
            return Err(ClanError::Shape(format!("adam: tensor {i} shape {:?} vs grad {:?}", p.dim(), g.dim())));
        }
    }
    state.step += 1;
    let t = state.step as f64;
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let (c1, c2) = (T::one() - b1, T::one() - b2);
    let step_size = T::of(cfg.lr / (1.0 - cfg.beta1.powf(t)));
    let bias2 = T::of(1.0 - cfg.beta2.powf(t));
    let eps = T::of(cfg.eps);
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
            *m = b1 * *m + c1 * g;
            *v = b2 * *v + c2 * g * g;
            *p -= step_size * *m / ((*v / bias2).sqrt() + eps);
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut p = vec![array![[1.0f64, -2.0, 0.5]]];
        let g = vec![array![[0.3, -4.0, 1e-3]]];
        let mut st = AdamState::new(&p);
        let cfg = AdamConfig::default();
        adam_step(&mut p, &g, &mut st, &cfg).unwrap();
        let expect = [1.0 - 3e-4, -2.0 + 3e-4, 0.5 - 3e-4];
        for (a, e) in p[0].iter().zip(expect) {
            assert!((a - e).abs() < 1e-8, "{a} vs {e}");
        }
        assert_eq!(st.step, 1);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![array![[1.0f32, 2.0]]];
        let g = vec![array![[0.0f32, 0.0]]];
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &g, &mut st, &AdamConfig::default()).unwrap();
        adam_step(&mut p, &g, &mut st, &AdamConfig::default()).unwrap();
        assert_eq!(p[0], array![[1.0f32, 2.0]]);
        assert_eq!(st.step, 2);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut p = vec![array![[1.0f64, 2.0]]];
        let g = vec![array![[0.0f64]]];
        let mut st = AdamState::new(&p);
        assert!(matches!(
            adam_step(&mut p, &g, &mut st, &AdamConfig::default()),
            Err(ClanError::Shape(_))
        ));
    }
}
