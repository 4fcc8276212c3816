use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// A token "carries" a dimension when its magnitude there exceeds this many
/// times the global median magnitude of the state.
pub const KAPPA_TOK: f64 = 10.0;

/// Per-dimension magnitude statistics of one `[tokens, C]` hidden state, or
/// an average of several.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationStats {
    pub mean_abs: Vec<f64>,
    pub max_abs: Vec<f64>,
    /// Fraction of tokens whose magnitude exceeds `KAPPA_TOK` times the global median.
    pub token_coverage: Vec<f64>,
    pub median_of_means: f64,
    /// The three largest entries of `mean_abs`, descending (padded with 0 when `C < 3`).
    pub top: [f64; 3],
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

impl ActivationStats {
    /// Statistics of a single hidden state `z: [tokens, C]`.
    pub fn compute(z: &Tensor) -> Result<Self> {
        Self::compute_with(z, KAPPA_TOK)
    }

    pub fn compute_with(z: &Tensor, kappa_tok: f64) -> Result<Self> {
        let s = z.shape();
        if s.len() != 2 {
            return Err(Error::shape("compute_stats", s, &[0, 0]));
        }
        let (tokens, c) = (s[0], s[1]);
        if tokens == 0 || c == 0 {
            return Err(Error::Empty("activation trace"));
        }
        let abs: Vec<f64> = z.data().iter().map(|v| v.abs()).collect();
        let threshold = kappa_tok * median(&abs);
        let mut mean_abs = vec![0.0; c];
        let mut max_abs = vec![0.0f64; c];
        let mut covered = vec![0usize; c];
        for row in abs.chunks_exact(c) {
            for (d, &a) in row.iter().enumerate() {
                mean_abs[d] += a;
                max_abs[d] = max_abs[d].max(a);
                if a > threshold {
                    covered[d] += 1;
                }
            }
        }
        mean_abs.iter_mut().for_each(|m| *m /= tokens as f64);
        let token_coverage = covered.iter().map(|&n| n as f64 / tokens as f64).collect();
        Ok(Self::finish(mean_abs, max_abs, token_coverage))
    }

    fn finish(mean_abs: Vec<f64>, max_abs: Vec<f64>, token_coverage: Vec<f64>) -> Self {
        let median_of_means = median(&mean_abs);
        let mut sorted = mean_abs.clone();
        sorted.sort_by(|a, b| b.total_cmp(a));
        let mut top = [0.0; 3];
        for (slot, v) in top.iter_mut().zip(&sorted) {
            *slot = *v;
        }
        ActivationStats {
            mean_abs,
            max_abs,
            token_coverage,
            median_of_means,
            top,
        }
    }

    /// Elementwise average of the per-dimension vectors; the scalar summaries
    /// are recomputed from the averaged `mean_abs`.
    pub fn average(items: &[ActivationStats]) -> Result<Self> {
        let first = items.first().ok_or(Error::Empty("activation statistics"))?;
        let c = first.mean_abs.len();
        if let Some(bad) = items.iter().find(|s| s.mean_abs.len() != c) {
            return Err(Error::shape("average_stats", &[bad.mean_abs.len()], &[c]));
        }
        let n = items.len() as f64;
        let avg = |f: fn(&ActivationStats) -> &Vec<f64>| -> Vec<f64> {
            let mut out = vec![0.0; c];
            for s in items {
                out.iter_mut().zip(f(s)).for_each(|(o, v)| *o += v);
            }
            out.iter_mut().for_each(|o| *o /= n);
            out
        };
        Ok(Self::finish(
            avg(|s| &s.mean_abs),
            avg(|s| &s.max_abs),
            avg(|s| &s.token_coverage),
        ))
    }

    pub fn width(&self) -> usize {
        self.mean_abs.len()
    }

    /// `top1 / median_of_means`.
    pub fn top_ratio(&self) -> f64 {
        self.top[0] / self.median_of_means
    }

    /// Mean of `mean_abs` over `dims`.
    pub fn mean_over(&self, dims: &BTreeSet<usize>) -> Result<f64> {
        if dims.is_empty() {
            return Err(Error::Empty("dimension set"));
        }
        let mut acc = 0.0;
        for &d in dims {
            let v = self.mean_abs.get(d).ok_or(Error::DimensionOutOfRange {
                dim: d,
                extent: self.width(),
            })?;
            acc += v;
        }
        Ok(acc / dims.len() as f64)
    }
}

/// Thresholds for flagging a dimension as massive.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DetectParams {
    /// Required ratio of a dimension's mean magnitude to the median over dimensions.
    pub kappa: f64,
    /// Required token coverage.
    pub rho: f64,
}

impl Default for DetectParams {
    fn default() -> Self {
        DetectParams {
            kappa: 30.0,
            rho: 0.9,
        }
    }
}

impl DetectParams {
    pub fn new(kappa: f64, rho: f64) -> Result<Self> {
        let p = DetectParams { kappa, rho };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.kappa > 1.0 && self.kappa.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "kappa {} must exceed 1",
                self.kappa
            )));
        }
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "rho {} must lie in (0, 1]",
                self.rho
            )));
        }
        Ok(())
    }
}

/// `{ d : mean_abs[d] > kappa * median_of_means and coverage[d] >= rho }`.
pub fn detect_ma(stats: &ActivationStats, params: DetectParams) -> BTreeSet<usize> {
    let bar = params.kappa * stats.median_of_means;
    stats
        .mean_abs
        .iter()
        .zip(&stats.token_coverage)
        .enumerate()
        .filter(|(_, (&m, &cov))| m > bar && cov >= params.rho)
        .map(|(d, _)| d)
        .collect()
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn planted(tokens: usize, c: usize, d: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let signs = Tensor::randn(&[tokens, c], &mut rng);
        let data = signs
            .data()
            .iter()
            .enumerate()
            .map(|(i, s)| s.signum() * if i % c == d { 100.0 } else { 1.0 })
            .collect();
        Tensor::new(vec![tokens, c], data).unwrap()
    }

    #[test]
    fn constant_state() {
        let s = ActivationStats::compute(&Tensor::full(&[4, 4], 1.0)).unwrap();
        assert_eq!(s.mean_abs, vec![1.0; 4]);
        assert_eq!(s.median_of_means, 1.0);
        // No entry exceeds ten times the median, so nothing is covered.
        assert_eq!(s.token_coverage, vec![0.0; 4]);
        let loose = ActivationStats::compute_with(&Tensor::full(&[4, 4], 1.0), 0.5).unwrap();
        assert_eq!(loose.token_coverage, vec![1.0; 4]);
    }

    #[test]
    fn planted_outlier_is_the_only_detection() {
        let z = planted(16, 64, 11, 0);
        let s = ActivationStats::compute(&z).unwrap();
        assert_eq!(s.mean_abs[11], 100.0);
        assert_eq!(s.median_of_means, 1.0);
        assert_eq!(s.top, [100.0, 1.0, 1.0]);
        // Brute force over the set definition.
        let expected: BTreeSet<usize> = (0..64)
            .filter(|&d| s.mean_abs[d] > 30.0 && s.token_coverage[d] >= 0.9)
            .collect();
        let found = detect_ma(&s, DetectParams::default());
        assert_eq!(found, expected);
        assert_eq!(found, BTreeSet::from([11]));
    }

    #[test]
    fn gaussian_state_has_no_massive_dims() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let z = Tensor::randn(&[16, 64], &mut rng);
        let s = ActivationStats::compute(&z).unwrap();
        assert!(detect_ma(&s, DetectParams::default()).is_empty());
    }

    #[test]
    fn gaussian_median_of_means_near_half_normal_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z = Tensor::randn(&[256, 64], &mut rng);
        let s = ActivationStats::compute(&z).unwrap();
        let expect = (2.0 / std::f64::consts::PI).sqrt();
        assert!((s.median_of_means / expect - 1.0).abs() < 0.2);
        assert!(s.mean_abs.iter().zip(&s.max_abs).all(|(m, x)| m <= x));
    }

    #[test]
    fn empty_and_bad_params() {
        assert!(matches!(
            ActivationStats::compute(&Tensor::zeros(&[4])),
            Err(Error::ShapeMismatch { .. })
        ));
        assert!(DetectParams::new(1.0, 0.5).is_err());
        assert!(DetectParams::new(30.0, 0.0).is_err());
        assert!(DetectParams::new(30.0, 1.0).is_ok());
        assert!(ActivationStats::average(&[]).is_err());
    }

    #[test]
    fn average_of_copies_is_identity() {
        let s = ActivationStats::compute(&planted(8, 16, 3, 1)).unwrap();
        assert_eq!(
            ActivationStats::average(&[s.clone(), s.clone()]).unwrap(),
            s
        );
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(20))]
        #[test]
        fn detection_is_scale_invariant(seed in any::<u64>(), d in 0usize..32, k in 0.0f64..6.0) {
            let z = planted(12, 32, d, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
            let noise = Tensor::randn(&[12, 32], &mut rng).scale(3.0).unwrap();
            let z = z.add(&noise).unwrap();
            let scale = 10f64.powf(k - 3.0);
            let base = detect_ma(&ActivationStats::compute(&z).unwrap(), DetectParams::default());
            let scaled = z.scale(scale).unwrap();
            let other = detect_ma(&ActivationStats::compute(&scaled).unwrap(), DetectParams::default());
            prop_assert_eq!(base, other);
        }
    }
}
