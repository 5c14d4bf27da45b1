use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::MultiHeadModel;

/// SGD with classical momentum: `v <- momentum * v + g; theta <- theta - lr * v`.
#[derive(Debug, Clone)]
pub struct SgdMomentum {
    lr: f64,
    momentum: f64,
    velocity: Vec<Tensor>,
}

impl SgdMomentum {
    pub const DEFAULT_LR: f64 = 1e-4;
    pub const DEFAULT_MOMENTUM: f64 = 0.9;

    pub fn new(lr: f64, momentum: f64) -> Result<Self> {
        if !(lr > 0.0) {
            return Err(Error::InvalidArgument(format!("learning rate {lr} must be positive")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::InvalidArgument(format!("momentum {momentum} outside [0, 1)")));
        }
        Ok(Self {
            lr,
            momentum,
            velocity: Vec::new(),
        })
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    /// Applies one update. Parameters of a frozen trunk are left untouched.
    pub fn step(&mut self, model: &mut MultiHeadModel, grads: &[Tensor]) -> Result<()> {
        let frozen: Vec<bool> = (0..grads.len())
            .map(|i| model.trunk_frozen() && model.is_trunk_param(i))
            .collect();
        let mut params = model.params_mut();
        if grads.len() != params.len() {
            return Err(Error::Shape(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        if self.velocity.len() != params.len()
            || self.velocity.iter().zip(&params).any(|(v, p)| v.shape() != p.shape())
        {
            self.velocity = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        }
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if frozen[i] {
                continue;
            }
            if g.shape() != p.shape() {
                return Err(Error::Shape(format!("gradient {i} has shape {:?}", g.shape())));
            }
            let v = &mut self.velocity[i];
            for ((pv, vv), gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *vv = self.momentum * *vv + gv;
                *pv -= self.lr * *vv;
            }
        }
        Ok(())
    }
}

impl Default for SgdMomentum {
    fn default() -> Self {
        Self::new(Self::DEFAULT_LR, Self::DEFAULT_MOMENTUM).expect("defaults are valid")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelSpec;

    fn constant_grads(m: &MultiHeadModel, value: f64) -> Vec<Tensor> {
        m.params()
            .iter()
            .map(|p| Tensor::new(p.shape().to_vec(), vec![value; p.len()]).unwrap())
            .collect()
    }

    #[test]
    fn defaults_match_reference_training() {
        let opt = SgdMomentum::default();
        assert_eq!(opt.lr(), 1e-4);
        assert_eq!(opt.momentum(), 0.9);
        assert!(SgdMomentum::new(0.0, 0.9).is_err());
        assert!(SgdMomentum::new(-1.0, 0.9).is_err());
    }

    #[test]
    fn zero_momentum_is_plain_descent() {
        let mut m = MultiHeadModel::new(ModelSpec::affect(3, vec![4], 0)).unwrap();
        let before: Vec<Vec<f64>> = m.params().iter().map(|p| p.data().to_vec()).collect();
        let g = constant_grads(&m, 0.5);
        let mut opt = SgdMomentum::new(0.1, 0.0).unwrap();
        opt.step(&mut m, &g).unwrap();
        opt.step(&mut m, &g).unwrap();
        for (p, b) in m.params().iter().zip(&before) {
            for (v, w) in p.data().iter().zip(b) {
                assert!((v - (w - 0.1)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn two_momentum_steps_displace_by_2_point_9_g() {
        let mut m = MultiHeadModel::new(ModelSpec::affect(3, vec![4], 0)).unwrap();
        let before: Vec<Vec<f64>> = m.params().iter().map(|p| p.data().to_vec()).collect();
        let g = constant_grads(&m, 0.25);
        let mut opt = SgdMomentum::new(1.0, 0.9).unwrap();
        opt.step(&mut m, &g).unwrap();
        opt.step(&mut m, &g).unwrap();
        for (p, b) in m.params().iter().zip(&before) {
            for (v, w) in p.data().iter().zip(b) {
                assert!((w - v - 0.25 * 2.9).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn frozen_trunk_is_not_updated() {
        let mut m = MultiHeadModel::new(ModelSpec::affect(3, vec![4], 0)).unwrap();
        m.replace_head("compound", 11, true, 5).unwrap();
        let before = m.clone();
        let g = constant_grads(&m, 1.0);
        let mut opt = SgdMomentum::new(0.1, 0.9).unwrap();
        opt.step(&mut m, &g).unwrap();
        let (a, b) = (m.params(), before.params());
        for i in 0..a.len() {
            assert_eq!(a[i] == b[i], m.is_trunk_param(i));
        }
    }
}
