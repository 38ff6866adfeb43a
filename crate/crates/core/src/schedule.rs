//! DDPM noise schedule and the forward (noising) process.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub struct NoiseSchedule {
    pub total_steps: usize,
    /// beta_t for t = 1..=T (index t-1).
    pub betas: Vec<f64>,
    /// alpha_bar_t for t = 0..=T (index t), with alpha_bar_0 = 1.
    pub alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(total_steps: usize, beta_start: f64, beta_end: f64) -> Self {
        let betas: Vec<f64> = (0..total_steps)
            .map(|i| {
                if total_steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (total_steps - 1) as f64
                }
            })
            .collect();
        let mut alpha_bar = Vec::with_capacity(total_steps + 1);
        alpha_bar.push(1.0);
        let mut acc = 1.0;
        for &b in &betas {
            acc *= 1.0 - b;
            alpha_bar.push(acc);
        }
        NoiseSchedule {
            total_steps,
            betas,
            alpha_bar,
        }
    }

    pub fn check(&self) -> Result<()> {
        let ok_betas = self.betas.iter().all(|&b| b > 0.0 && b < 1.0)
            && self.betas.windows(2).all(|w| w[0] < w[1]);
        let ok_abar = self
            .alpha_bar
            .windows(2)
            .all(|w| w[1] < w[0] && w[1] > 0.0 && w[1] < 1.0);
        if !ok_betas || !ok_abar {
            return Err(Error::Contract(
                "noise schedule must have increasing betas in (0,1) and strictly decreasing alpha_bar in (0,1)".into(),
            ));
        }
        Ok(())
    }
}

/// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps, for t in 1..=T.
pub fn forward_diffuse<E: Element>(
    x0: &Tensor<E>,
    t: usize,
    eps: &Tensor<E>,
    sched: &NoiseSchedule,
) -> Result<Tensor<E>> {
    if t == 0 || t > sched.total_steps {
        return Err(Error::Contract(format!(
            "diffusion step {t} outside 1..={}",
            sched.total_steps
        )));
    }
    if x0.shape() != eps.shape() {
        return Err(Error::Dim {
            op: "forward_diffuse",
            lhs: x0.shape().to_vec(),
            rhs: eps.shape().to_vec(),
        });
    }
    let abar = sched.alpha_bar[t];
    let a = E::from_f64(abar.sqrt());
    let b = E::from_f64((1.0 - abar).sqrt());
    let data = x0
        .data()
        .iter()
        .zip(eps.data().iter())
        .map(|(x, e)| a * *x + b * *e)
        .collect();
    Tensor::from_vec(x0.shape().to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::DetRng;

    #[test]
    fn schedule_invariants_hold() {
        let s = NoiseSchedule::linear(1000, 1e-4, 2e-2);
        s.check().unwrap();
        assert_eq!(s.alpha_bar.len(), 1001);
        assert!((s.alpha_bar[0] - 1.0).abs() < 1e-15);
        assert!(s.alpha_bar[1000] < 1e-3);
    }

    #[test]
    fn limits_of_forward_diffuse() {
        // abar ~= 1 at tiny t keeps x0; abar -> 0 at T yields eps
        let s = NoiseSchedule::linear(1000, 1e-4, 2e-2);
        let mut rng = DetRng::new(5);
        let x0: Tensor<f64> = rng.uniform_tensor(vec![8], -1.0, 1.0);
        let eps: Tensor<f64> = rng.normal_tensor(vec![8], 1.0);
        let x1 = forward_diffuse(&x0, 1, &eps, &s).unwrap();
        for (a, b) in x1.data().iter().zip(x0.data().iter()) {
            assert!((a - b).abs() < 0.02);
        }
        let xt = forward_diffuse(&x0, 1000, &eps, &s).unwrap();
        for (a, b) in xt.data().iter().zip(eps.data().iter()) {
            assert!((a - b).abs() < 0.05);
        }
    }

    #[test]
    fn random_midpoint_matches_scalar_recomputation() {
        let s = NoiseSchedule::linear(1000, 1e-4, 2e-2);
        let mut rng = DetRng::new(6);
        let x0: Tensor<f64> = rng.uniform_tensor(vec![16], -1.0, 1.0);
        let eps: Tensor<f64> = rng.normal_tensor(vec![16], 1.0);
        let t = 500;
        let xt = forward_diffuse(&x0, t, &eps, &s).unwrap();
        let abar = s.alpha_bar[t];
        for i in 0..16 {
            let expect = abar.sqrt() * x0.data()[i] + (1.0 - abar).sqrt() * eps.data()[i];
            assert!((xt.data()[i] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn out_of_range_t_is_contract_error() {
        let s = NoiseSchedule::linear(10, 1e-4, 2e-2);
        let x0 = Tensor::<f64>::zeros(vec![2]);
        assert!(forward_diffuse(&x0, 0, &x0.clone(), &s).is_err());
        assert!(forward_diffuse(&x0, 11, &x0.clone(), &s).is_err());
    }
}
