use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Isotropic Gaussian mixture with a shared component scale.
#[derive(Clone, Debug, PartialEq)]
pub struct GmmSpec {
    means: Vec<Vec<f64>>,
    scale: f64,
    weights: Vec<f64>,
}

impl GmmSpec {
    pub fn new(means: Vec<Vec<f64>>, scale: f64, weights: Vec<f64>) -> Result<Self> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if means.is_empty() || means.len() != weights.len() {
            return bad(format!(
                "{} means vs {} weights",
                means.len(),
                weights.len()
            ));
        }
        let dim = means[0].len();
        if dim == 0
            || means
                .iter()
                .any(|m| m.len() != dim || m.iter().any(|v| !v.is_finite()))
        {
            return bad("component means must share a positive dimension".into());
        }
        if !(scale.is_finite() && scale >= 0.0) {
            return bad(format!("component scale {scale} must be non-negative"));
        }
        if weights.iter().any(|&w| !(w > 0.0 && w.is_finite())) {
            return bad("mixture weights must be positive".into());
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return bad(format!("mixture weights sum to {total}, not 1"));
        }
        Ok(GmmSpec {
            means,
            scale,
            weights,
        })
    }

    /// `k` equal-weight components evenly spaced on a circle in the plane.
    pub fn ring(k: usize, radius: f64, scale: f64) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidParameter(
                "ring needs at least one component".into(),
            ));
        }
        let means = (0..k)
            .map(|i| {
                let a = 2.0 * std::f64::consts::PI * i as f64 / k as f64;
                vec![radius * a.cos(), radius * a.sin()]
            })
            .collect();
        GmmSpec::new(means, scale, vec![1.0 / k as f64; k])
    }

    /// The default planar task: 8 components on the unit circle, scale 0.05.
    pub fn default_ring() -> Self {
        GmmSpec::ring(8, 1.0, 0.05).expect("valid")
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn num_components(&self) -> usize {
        self.means.len()
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Single-component mixture for component `i`.
    pub fn component(&self, i: usize) -> Result<GmmSpec> {
        let m = self.means.get(i).ok_or(Error::DimensionOutOfRange {
            dim: i,
            extent: self.means.len(),
        })?;
        GmmSpec::new(vec![m.clone()], self.scale, vec![1.0])
    }

    pub fn sample_component_index<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                return i;
            }
        }
        self.weights.len() - 1
    }

    pub fn sample_from<R: Rng + ?Sized>(&self, i: usize, rng: &mut R) -> Vec<f64> {
        self.means[i]
            .iter()
            .map(|m| m + self.scale * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let i = self.sample_component_index(rng);
        self.sample_from(i, rng)
    }

    /// `E[x | z]` for `z = x + sigma * eps`, `x` drawn from the mixture.
    pub fn posterior_mean_sigma(&self, z: &[f64], sigma: f64) -> Vec<f64> {
        let s2 = self.scale * self.scale;
        let v = s2 + sigma * sigma;
        let logits: Vec<f64> = self
            .means
            .iter()
            .zip(&self.weights)
            .map(|(m, w)| {
                let d2: f64 = z.iter().zip(m).map(|(a, b)| (a - b) * (a - b)).sum();
                w.ln() - d2 / (2.0 * v)
            })
            .collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let resp: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = resp.iter().sum();
        let shrink = s2 / v;
        let mut out = vec![0.0; z.len()];
        for (r, m) in resp.iter().zip(&self.means) {
            let p = r / total;
            for ((o, zi), mi) in out.iter_mut().zip(z).zip(m) {
                *o += p * (mi + shrink * (zi - mi));
            }
        }
        out
    }

    /// Noise prediction matching the posterior mean: `(z - E[x|z]) / sigma`.
    pub fn noise_prediction_sigma(&self, z: &[f64], sigma: f64) -> Vec<f64> {
        let mean = self.posterior_mean_sigma(z, sigma);
        z.iter().zip(mean).map(|(a, m)| (a - m) / sigma).collect()
    }
}

/// Analytic `E[x | z_t]` under the linear schedule (`sigma(t) = t`).
pub fn gmm_posterior_mean(z: &[f64], t: f64, gmm: &GmmSpec) -> Result<Vec<f64>> {
    if !(t > 0.0 && t.is_finite()) {
        return Err(Error::InvalidTimestep {
            t,
            max: f64::INFINITY,
        });
    }
    if z.len() != gmm.dim() {
        return Err(Error::shape("gmm_posterior_mean", &[z.len()], &[gmm.dim()]));
    }
    Ok(gmm.posterior_mean_sigma(z, t))
}
