use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Linear noise schedule `sigma(t) = t` on `[0, sigma_max]`, discretized
/// into `steps` uniform intervals from `sigma_max` down to zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub sigma_max: f64,
    pub steps: usize,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        NoiseSchedule {
            sigma_max: 3.0,
            steps: 200,
        }
    }
}

impl NoiseSchedule {
    pub fn new(sigma_max: f64, steps: usize) -> Result<Self> {
        if !(sigma_max.is_finite() && sigma_max > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "sigma_max {sigma_max} must be positive"
            )));
        }
        if steps == 0 {
            return Err(Error::InvalidParameter(
                "schedule needs at least one step".into(),
            ));
        }
        Ok(NoiseSchedule { sigma_max, steps })
    }

    pub fn sigma(&self, t: f64) -> f64 {
        t
    }

    /// `t_i = sigma_max * (1 - i / steps)` for `i` in `0..=steps`.
    pub fn timestep(&self, i: usize) -> f64 {
        self.sigma_max * (1.0 - i as f64 / self.steps as f64)
    }

    pub fn timesteps(&self) -> Vec<f64> {
        (0..=self.steps).map(|i| self.timestep(i)).collect()
    }

    pub fn check(&self, t: f64) -> Result<()> {
        if !(t.is_finite() && (0.0..=self.sigma_max).contains(&t)) {
            return Err(Error::InvalidTimestep {
                t,
                max: self.sigma_max,
            });
        }
        Ok(())
    }

    /// `z_t = x + sigma(t) * eps`.
    pub fn forward_noise(&self, x: &Tensor, t: f64, eps: &Tensor) -> Result<Tensor> {
        self.check(t)?;
        if x.shape() != eps.shape() {
            return Err(Error::shape("forward_noise", x.shape(), eps.shape()));
        }
        let s = self.sigma(t);
        let data = x
            .data()
            .iter()
            .zip(eps.data())
            .map(|(a, e)| a + s * e)
            .collect();
        Tensor::checked("forward_noise", x.shape().to_vec(), data)
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn discretization_endpoints() {
        let s = NoiseSchedule::new(3.0, 10).unwrap();
        assert_eq!(s.timestep(0), 3.0);
        assert_eq!(s.timestep(10), 0.0);
        assert_eq!(s.sigma(0.0), 0.0);
        let ts = s.timesteps();
        assert!(ts.windows(2).all(|w| w[0] > w[1]));
    }

    #[test]
    fn forward_noise_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = NoiseSchedule::default();
        let x = Tensor::randn(&[4, 2], &mut rng);
        let e = Tensor::randn(&[4, 2], &mut rng);
        assert!(s.forward_noise(&x, 0.0, &e).unwrap().bit_eq(&x));
        assert!(s
            .forward_noise(&x, 1.7, &Tensor::zeros(&[4, 2]))
            .unwrap()
            .bit_eq(&x));
        let z = s.forward_noise(&Tensor::zeros(&[4, 2]), 3.0, &e).unwrap();
        assert!(z.bit_eq(&e.scale(3.0).unwrap()));
        assert!(s.forward_noise(&x, 1.0, &Tensor::zeros(&[2, 4])).is_err());
        assert!(s.forward_noise(&x, 3.1, &e).is_err());
    }

    proptest! {
        #[test]
        fn perfect_denoising_recovers_clean_sample(seed in any::<u64>(), t in 0.0f64..=3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = NoiseSchedule::default();
            let x = Tensor::randn(&[6, 2], &mut rng);
            let e = Tensor::randn(&[6, 2], &mut rng);
            let z = s.forward_noise(&x, t, &e).unwrap();
            // (x + s*e) - s*e is not exactly x in binary floating point; the
            // recovery is exact up to the two roundings involved.
            let sig = s.sigma(t);
            let rec = z.sub(&e.scale(sig).unwrap()).unwrap();
            for ((r, xv), ev) in rec.data().iter().zip(x.data()).zip(e.data()) {
                let bound = 2.0 * f64::EPSILON * (xv.abs() + (sig * ev).abs());
                prop_assert!((r - xv).abs() <= bound);
            }
        }
    }
}
