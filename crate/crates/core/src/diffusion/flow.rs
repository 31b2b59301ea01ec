//! Rectified flow: straight noising paths, constant velocity targets and an
//! explicit Euler integrator from noise (`t = 1`) to data (`t = 0`).

use candle_core::{DType, Device, Tensor};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{EdenError, Result};

/// A latent at path time `t`.
#[derive(Debug, Clone)]
pub struct NoisedLatent {
    pub x_t: Tensor,
    pub t: f64,
}

fn check_t(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(EdenError::InvalidArgument(format!(
            "t = {t} outside [0, 1]"
        )));
    }
    Ok(())
}

fn check_same(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(EdenError::shape(a.dims(), b.dims()));
    }
    Ok(())
}

/// `x_t = (1 - t) x0 + t eps`.
pub fn forward_sample(x0: &Tensor, eps: &Tensor, t: f64) -> Result<NoisedLatent> {
    check_t(t)?;
    check_same(x0, eps)?;
    let x_t = if t == 0.0 {
        x0.clone()
    } else if t == 1.0 {
        eps.clone()
    } else {
        ((x0 * (1.0 - t))? + (eps * t)?)?
    };
    Ok(NoisedLatent { x_t, t })
}

/// Batched variant with one `t` per leading-axis item.
pub fn forward_sample_batch(x0: &Tensor, eps: &Tensor, t: &[f64]) -> Result<Tensor> {
    check_same(x0, eps)?;
    let b = x0.dims()[0];
    if t.len() != b {
        return Err(EdenError::shape(b, t.len()));
    }
    for &v in t {
        check_t(v)?;
    }
    let mut shape = vec![1; x0.rank()];
    shape[0] = b;
    let tt = Tensor::from_slice(t, shape.as_slice(), x0.device())?.to_dtype(x0.dtype())?;
    let one_minus = (1.0 - &tt)?;
    Ok((x0.broadcast_mul(&one_minus)? + eps.broadcast_mul(&tt)?)?)
}

/// `d x_t / dt = eps - x0`, independent of `t`.
pub fn velocity_target(x0: &Tensor, eps: &Tensor) -> Result<Tensor> {
    check_same(x0, eps)?;
    Ok((eps - x0)?)
}

/// Mean squared error against the straight-path velocity.
pub fn flow_loss(v_pred: &Tensor, x0: &Tensor, eps: &Tensor) -> Result<Tensor> {
    let target = velocity_target(x0, eps)?;
    check_same(v_pred, &target)?;
    Ok((v_pred - target)?.sqr()?.mean_all()?)
}

pub trait VelocityField {
    fn velocity(&self, x: &Tensor, t: f64) -> Result<Tensor>;
}

impl<F: Fn(&Tensor, f64) -> Result<Tensor>> VelocityField for F {
    fn velocity(&self, x: &Tensor, t: f64) -> Result<Tensor> {
        self(x, t)
    }
}

/// Explicit Euler from `t = 1` to `t = 0` in `steps` uniform steps:
/// `t_i = 1 - i / steps`, `x <- x - v(x, t_i) / steps`. Zero steps return `noise`.
pub fn euler_integrate(noise: &Tensor, steps: usize, field: &dyn VelocityField) -> Result<Tensor> {
    let mut x = noise.clone();
    let dt = 1.0 / steps.max(1) as f64;
    for i in 0..steps {
        let t = 1.0 - i as f64 / steps as f64;
        let v = field.velocity(&x, t)?;
        check_same(&v, &x)?;
        x = (x - (v * dt)?)?;
    }
    Ok(x)
}

pub fn standard_normal(
    shape: &[usize],
    rng: &mut impl Rng,
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    Ok(Tensor::from_vec(v, shape, device)?.to_dtype(dtype)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(v: &[f64]) -> Tensor {
        Tensor::from_slice(v, v.len(), &Device::Cpu).unwrap()
    }

    fn vals(x: &Tensor) -> Vec<f64> {
        x.flatten_all().unwrap().to_vec1().unwrap()
    }

    fn s(x: Tensor) -> f64 {
        x.to_vec0().unwrap()
    }

    #[test]
    fn forward_sample_cases() {
        let x0 = t(&[0.3, -1.0]);
        let e = t(&[2.0, 0.7]);
        assert_eq!(vals(&forward_sample(&x0, &e, 0.0).unwrap().x_t), vals(&x0));
        assert_eq!(vals(&forward_sample(&x0, &e, 1.0).unwrap().x_t), vals(&e));
        let mid = forward_sample(&t(&[0.0]), &t(&[2.0]), 0.5).unwrap();
        assert_eq!(vals(&mid.x_t), vec![1.0]);
        assert!(forward_sample(&x0, &e, 1.5).is_err());
        assert!(forward_sample(&x0, &t(&[1.0]), 0.5).is_err());
    }

    #[test]
    fn velocity_and_loss_cases() {
        let a = t(&[0.5, -0.5]);
        assert_eq!(vals(&velocity_target(&a, &a).unwrap()), vec![0.0, 0.0]);
        assert_eq!(
            vals(&velocity_target(&t(&[1.0]), &t(&[0.0])).unwrap()),
            vec![-1.0]
        );
        let x0 = t(&[0.2, 0.4]);
        let e = t(&[1.0, -1.0]);
        let exact = velocity_target(&x0, &e).unwrap();
        assert_eq!(s(flow_loss(&exact, &x0, &e).unwrap()), 0.0);
        assert_eq!(
            s(flow_loss(&t(&[0.0]), &t(&[0.0]), &t(&[1.0])).unwrap()),
            1.0
        );
        let v = t(&[0.3, 0.1]);
        let l1 = s(flow_loss(&v, &x0, &e).unwrap());
        let l2 = s(flow_loss(&v.neg().unwrap(), &x0.neg().unwrap(), &e.neg().unwrap()).unwrap());
        assert!((l1 - l2).abs() < 1e-15);
    }

    #[test]
    fn euler_with_true_velocity_is_exact() {
        let x0 = t(&[0.25, -1.5, 3.0]);
        let e = t(&[-0.7, 0.1, 2.2]);
        let v = velocity_target(&x0, &e).unwrap();
        let field = |_: &Tensor, _: f64| -> Result<Tensor> { Ok(v.clone()) };
        for steps in [1, 2, 3, 50] {
            let out = euler_integrate(&e, steps, &field).unwrap();
            for (a, b) in vals(&out).iter().zip(vals(&x0)) {
                assert!((a - b).abs() <= 1e-12, "steps {steps}");
            }
        }
        assert_eq!(vals(&euler_integrate(&e, 0, &field).unwrap()), vals(&e));
    }

    #[test]
    fn euler_visits_expected_times() {
        let seen = std::cell::RefCell::new(Vec::new());
        let field = |x: &Tensor, tt: f64| -> Result<Tensor> {
            seen.borrow_mut().push(tt);
            Ok(x.zeros_like()?)
        };
        euler_integrate(&t(&[0.0]), 4, &field).unwrap();
        assert_eq!(*seen.borrow(), vec![1.0, 0.75, 0.5, 0.25]);
    }

    proptest! {
        #[test]
        fn forward_sample_is_affine(
            a in -5.0f64..5.0, b in -5.0f64..5.0, c in -5.0f64..5.0, d in -5.0f64..5.0,
            tt in 0.0f64..=1.0, w in -2.0f64..2.0,
        ) {
            // f(w u + (1-w) v) = w f(u) + (1-w) f(v) for (x0, eps) pairs u, v
            let f = |x0: f64, e: f64| vals(&forward_sample(&t(&[x0]), &t(&[e]), tt).unwrap().x_t)[0];
            let lhs = f(w * a + (1.0 - w) * c, w * b + (1.0 - w) * d);
            let rhs = w * f(a, b) + (1.0 - w) * f(c, d);
            prop_assert!((lhs - rhs).abs() < 1e-9);
        }
    }
}
