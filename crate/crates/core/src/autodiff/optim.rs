use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// SGD with heavy-ball momentum and L2 weight decay:
/// `v <- momentum * v + (g + weight_decay * p)`, `p <- p - lr * v`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdMomentum {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl SgdMomentum {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::invalid(format!("learning rate must be positive, got {lr}")));
        }
        if !(0.0..1.0).contains(&momentum) || weight_decay < 0.0 {
            return Err(Error::invalid(format!(
                "momentum must be in [0, 1) and weight decay >= 0 (got {momentum}, {weight_decay})"
            )));
        }
        Ok(Self {
            lr,
            momentum,
            weight_decay,
        })
    }

    /// Zeroed velocity buffers shaped like `params`.
    pub fn init_velocity<S: Scalar>(params: &[&Tensor<S>]) -> Vec<Tensor<S>> {
        params.iter().map(|p| Tensor::zeros(p.shape())).collect()
    }

    pub fn step<S: Scalar>(
        &self,
        params: &mut [&mut Tensor<S>],
        grads: &[Tensor<S>],
        velocity: &mut [Tensor<S>],
    ) -> Result<()> {
        if params.len() != grads.len() || params.len() != velocity.len() {
            return Err(Error::shape(
                "sgd_momentum_step",
                format!("{} params, {} grads, {} velocities", params.len(), grads.len(), velocity.len()),
            ));
        }
        for (i, ((p, g), v)) in params.iter().zip(grads).zip(velocity.iter()).enumerate() {
            if p.shape() != g.shape() || p.shape() != v.shape() {
                return Err(Error::shape(
                    "sgd_momentum_step",
                    format!("entry {i}: param {:?}, grad {:?}, velocity {:?}", p.shape(), g.shape(), v.shape()),
                ));
            }
        }
        let lr = S::lit(self.lr);
        let mu = S::lit(self.momentum);
        let wd = S::lit(self.weight_decay);
        for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
            for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vv = mu * *vv + (gv + wd * *pv);
                *pv -= lr * *vv;
            }
        }
        Ok(())
    }
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<S: Scalar>(grads: &mut [Tensor<S>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|&x| x.as_f64() * x.as_f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        let k = S::lit(max_norm / norm);
        for g in grads.iter_mut() {
            for x in g.data_mut() {
                *x *= k;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64]) -> Tensor<f64> {
        Tensor::row(v.to_vec()).unwrap()
    }

    #[test]
    fn plain_sgd() {
        let opt = SgdMomentum::new(0.5, 0.0, 0.0).unwrap();
        let mut p = t(&[1.0, 2.0]);
        let mut v = vec![Tensor::zeros(p.shape())];
        opt.step(&mut [&mut p], &[t(&[0.2, -0.4])], &mut v).unwrap();
        assert_eq!(p.data(), &[0.9, 2.2]);
    }

    #[test]
    fn zero_grad_is_fixed_point() {
        let opt = SgdMomentum::new(0.1, 0.9, 0.0).unwrap();
        let mut p = t(&[1.0, -3.0]);
        let mut v = vec![Tensor::zeros(p.shape())];
        opt.step(&mut [&mut p], &[t(&[0.0, 0.0])], &mut v).unwrap();
        assert_eq!(p.data(), &[1.0, -3.0]);
    }

    #[test]
    fn momentum_unrolls_to_2_9_g() {
        // v1 = g, v2 = 0.9 g + g; displacement = v1 + v2 = 2.9 g at lr 1
        let opt = SgdMomentum::new(1.0, 0.9, 0.0).unwrap();
        let g = t(&[1.0, -2.0]);
        let mut p = t(&[0.0, 0.0]);
        let mut v = vec![Tensor::zeros(p.shape())];
        for _ in 0..2 {
            opt.step(&mut [&mut p], std::slice::from_ref(&g), &mut v).unwrap();
        }
        assert!((p.data()[0] + 2.9).abs() < 1e-12);
        assert!((p.data()[1] - 5.8).abs() < 1e-12);
    }

    #[test]
    fn weight_decay_pulls_toward_zero() {
        let opt = SgdMomentum::new(0.1, 0.0, 0.5).unwrap();
        let mut p = t(&[2.0]);
        let mut v = vec![Tensor::zeros(p.shape())];
        opt.step(&mut [&mut p], &[t(&[0.0])], &mut v).unwrap();
        assert!((p.data()[0] - 1.9).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let opt = SgdMomentum::new(0.1, 0.9, 0.0).unwrap();
        let mut p = t(&[1.0, 2.0]);
        let mut v = vec![Tensor::zeros(&[1, 3])];
        assert!(opt.step(&mut [&mut p], &[t(&[0.0, 0.0])], &mut v).is_err());
        assert!(SgdMomentum::new(0.0, 0.9, 0.0).is_err());
    }
}
