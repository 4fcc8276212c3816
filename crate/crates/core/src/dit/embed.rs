use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Longest period of the sinusoid ladder, in scaled time units.
const MAX_PERIOD: f64 = 10_000.0;

/// Scaled timesteps span `[0, TIME_SCALE]` over the schedule range.
pub const TIME_SCALE: f64 = 1000.0;

/// Sinusoidal encoding of `t`, interleaved as `[sin f0, cos f0, sin f1, cos f1, ...]`.
///
/// `t` is first rescaled by `TIME_SCALE / sigma_max`; frequencies are
/// log-spaced from 1 down to `1 / MAX_PERIOD`.
pub fn timestep_embedding(t: f64, dim: usize, sigma_max: f64) -> Result<Tensor> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(Error::OddDimension(dim));
    }
    let half = dim / 2;
    let ts = t * TIME_SCALE / sigma_max;
    let mut out = Vec::with_capacity(dim);
    for i in 0..half {
        let freq = (-MAX_PERIOD.ln() * i as f64 / half as f64).exp();
        let phase = ts * freq;
        out.push(phase.sin());
        out.push(phase.cos());
    }
    Tensor::new(vec![dim], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_phase() {
        let e = timestep_embedding(0.0, 8, 3.0).unwrap();
        for pair in e.data().chunks(2) {
            assert_eq!(pair, [0.0, 1.0]);
        }
    }

    #[test]
    fn deterministic() {
        let a = timestep_embedding(1.234, 32, 3.0).unwrap();
        let b = timestep_embedding(1.234, 32, 3.0).unwrap();
        assert!(a.bit_eq(&b));
    }

    #[test]
    fn odd_dim_rejected() {
        assert!(matches!(
            timestep_embedding(0.5, 7, 3.0),
            Err(Error::OddDimension(7))
        ));
    }

    #[test]
    fn distinct_times_are_far_apart() {
        let dim = 32;
        let a = timestep_embedding(0.1, dim, 3.0).unwrap();
        let b = timestep_embedding(0.9, dim, 3.0).unwrap();
        let dist = a.sub(&b).unwrap().l2_norm();
        assert!(dist > 0.1 * (dim as f64).sqrt(), "{dist}");
    }
}
