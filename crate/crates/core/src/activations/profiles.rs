use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::activations::{detect_ma, ActivationStats, DetectParams};
use crate::diffusion::GmmSpec;
use crate::dit::{regress_modulation, timestep_embedding, DitWeights, HiddenTrace};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Inputs used to probe a model: `z_t = x + t * eps` with `x` drawn from
/// `data` and `eps ~ N(0, I)`. The same `(x, eps)` pairs are reused for every
/// timestep and condition, so differences between probes come from `(t, c)` alone.
#[derive(Clone, Debug, PartialEq)]
pub struct Probe {
    pub data: GmmSpec,
    pub draws: usize,
    pub seed: u64,
}

impl Default for Probe {
    fn default() -> Self {
        Probe {
            data: GmmSpec::default_ring(),
            draws: 64,
            seed: 0,
        }
    }
}

impl Probe {
    pub fn new(draws: usize, seed: u64) -> Self {
        Probe {
            draws,
            seed,
            ..Probe::default()
        }
    }

    /// Clean samples and noise, each `[draws, tokens, dim]`.
    fn base(&self, tokens: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        if self.draws == 0 {
            return Err(Error::Empty("probe draws"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let dim = self.data.dim();
        let mut x = Vec::with_capacity(self.draws * tokens * dim);
        for _ in 0..self.draws * tokens {
            x.extend(self.data.sample(&mut rng));
        }
        let eps = Tensor::randn(&[self.draws, tokens, dim], &mut rng).into_data();
        Ok((x, eps))
    }

    /// Forward traces of every draw at `(t, c)`.
    pub fn traces(&self, w: &DitWeights, t: f64, c: usize) -> Result<Vec<HiddenTrace>> {
        let (tok, dim) = (w.config.tokens(), w.config.data_dim);
        if dim != self.data.dim() {
            return Err(Error::shape("probe", &[self.data.dim()], &[dim]));
        }
        let (x, eps) = self.base(tok)?;
        let z = x.iter().zip(&eps).map(|(a, e)| a + t * e).collect();
        let z = Tensor::checked("probe", vec![self.draws, tok, dim], z)?;
        let n = self.draws;
        let out = w.forward_batch(&z, &vec![t; n], &vec![c; n], None, true)?;
        Ok(out.traces.expect("traces requested"))
    }

    /// Per-block statistics at `(t, c)`, averaged over draws. Index 0 is block 1.
    pub fn block_stats(&self, w: &DitWeights, t: f64, c: usize) -> Result<Vec<ActivationStats>> {
        let traces = self.traces(w, t, c)?;
        per_block(&[traces], w.config.num_blocks)
    }
}

fn per_block(groups: &[Vec<HiddenTrace>], blocks: usize) -> Result<Vec<ActivationStats>> {
    (0..blocks)
        .map(|k| {
            let stats = groups
                .iter()
                .flatten()
                .map(|tr| ActivationStats::compute(&tr.blocks[k].hidden))
                .collect::<Result<Vec<_>>>()?;
            ActivationStats::average(&stats)
        })
        .collect()
}

/// Detected massive-activation dimensions per block, with the settings that
/// produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct MaProfile {
    /// `dims[k]` is the set for block `k + 1`.
    pub dims: Vec<BTreeSet<usize>>,
    pub params: DetectParams,
    pub timesteps: Vec<f64>,
    pub conditions: Vec<usize>,
    pub draws: usize,
}

impl MaProfile {
    /// Profile with the same explicit set at every block, for callers that
    /// already know the dimensions.
    pub fn uniform(blocks: usize, dims: BTreeSet<usize>) -> Self {
        MaProfile {
            dims: vec![dims; blocks],
            params: DetectParams::default(),
            timesteps: Vec::new(),
            conditions: Vec::new(),
            draws: 0,
        }
    }

    /// Set at 1-based `depth`.
    pub fn at(&self, depth: usize) -> Result<&BTreeSet<usize>> {
        depth
            .checked_sub(1)
            .and_then(|k| self.dims.get(k))
            .ok_or(Error::DimensionOutOfRange {
                dim: depth,
                extent: self.dims.len(),
            })
    }
}

fn check_grid(w: &DitWeights, ts: &[f64], cs: &[usize]) -> Result<()> {
    if ts.is_empty() {
        return Err(Error::Empty("timestep grid"));
    }
    if cs.is_empty() {
        return Err(Error::Empty("condition set"));
    }
    for &t in ts {
        if !(t.is_finite() && (0.0..=w.config.sigma_max).contains(&t)) {
            return Err(Error::InvalidTimestep {
                t,
                max: w.config.sigma_max,
            });
        }
    }
    Ok(())
}

fn pooled_stats(
    w: &DitWeights,
    probe: &Probe,
    ts: &[f64],
    cs: &[usize],
) -> Result<Vec<ActivationStats>> {
    check_grid(w, ts, cs)?;
    let mut groups = Vec::with_capacity(ts.len() * cs.len());
    for &t in ts {
        for &c in cs {
            groups.push(probe.traces(w, t, c)?);
        }
    }
    per_block(&groups, w.config.num_blocks)
}

/// Runs detection on statistics pooled over every `(t, c)` pair in the grid.
pub fn ma_profile(
    w: &DitWeights,
    probe: &Probe,
    ts: &[f64],
    cs: &[usize],
    params: DetectParams,
) -> Result<MaProfile> {
    params.validate()?;
    let stats = pooled_stats(w, probe, ts, cs)?;
    Ok(MaProfile {
        dims: stats.iter().map(|s| detect_ma(s, params)).collect(),
        params,
        timesteps: ts.to_vec(),
        conditions: cs.to_vec(),
        draws: probe.draws,
    })
}

/// Magnitude summary of one block.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerRow {
    pub depth: usize,
    pub top: [f64; 3],
    pub median: f64,
}

impl LayerRow {
    pub fn ratio(&self) -> f64 {
        self.top[0] / self.median
    }
}

/// Top-3 and median per-dimension magnitudes at every block, pooled over the grid.
pub fn layer_profile(
    w: &DitWeights,
    probe: &Probe,
    ts: &[f64],
    cs: &[usize],
) -> Result<Vec<LayerRow>> {
    let stats = pooled_stats(w, probe, ts, cs)?;
    Ok(stats
        .iter()
        .enumerate()
        .map(|(k, s)| LayerRow {
            depth: k + 1,
            top: s.top,
            median: s.median_of_means,
        })
        .collect())
}

/// Mean magnitude over the profile's dimensions at `depth`, for each `t`.
pub fn timestep_sweep(
    w: &DitWeights,
    probe: &Probe,
    ts: &[f64],
    c: usize,
    profile: &MaProfile,
    depth: usize,
) -> Result<Vec<(f64, f64)>> {
    check_grid(w, ts, &[c])?;
    let dims = profile.at(depth)?;
    if dims.is_empty() {
        return Err(Error::Empty(
            "massive-activation profile at the requested depth",
        ));
    }
    ts.iter()
        .map(|&t| Ok((t, probe.block_stats(w, t, c)?[depth - 1].mean_over(dims)?)))
        .collect()
}

/// Per-condition magnitudes over the profile's dimensions and their relative spread.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionReport {
    pub values: Vec<(usize, f64)>,
    /// `(max - min) / mean` of the values.
    pub spread: f64,
}

pub fn condition_invariance(
    w: &DitWeights,
    probe: &Probe,
    t: f64,
    cs: &[usize],
    profile: &MaProfile,
    depth: usize,
) -> Result<ConditionReport> {
    if cs.len() < 2 {
        return Err(Error::InvalidParameter(format!(
            "condition invariance needs at least 2 conditions, got {}",
            cs.len()
        )));
    }
    check_grid(w, &[t], cs)?;
    let dims = profile.at(depth)?;
    if dims.is_empty() {
        return Err(Error::Empty(
            "massive-activation profile at the requested depth",
        ));
    }
    let values = cs
        .iter()
        .map(|&c| Ok((c, probe.block_stats(w, t, c)?[depth - 1].mean_over(dims)?)))
        .collect::<Result<Vec<_>>>()?;
    let v: Vec<f64> = values.iter().map(|p| p.1).collect();
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = v.iter().copied().fold(f64::INFINITY, f64::min);
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    let spread = if max == min { 0.0 } else { (max - min) / mean };
    Ok(ConditionReport { values, spread })
}

/// Residual gate magnitudes of one block.
#[derive(Clone, Debug, PartialEq)]
pub struct AlphaRow {
    pub depth: usize,
    /// `|alpha|` of the feedforward branch, per dimension.
    pub ff: Vec<f64>,
    /// `|alpha|` of the attention branch, per dimension.
    pub attn: Vec<f64>,
    /// Argmax of `ff` (lowest index on ties).
    pub argmax: usize,
}

pub fn alpha_profile(w: &DitWeights, t: f64, c: usize) -> Result<Vec<AlphaRow>> {
    let cfg = &w.config;
    check_grid(w, &[t], &[c])?;
    let te = timestep_embedding(t, cfg.t_embed_dim, cfg.sigma_max)?;
    let ce = w.class_embedding(c)?;
    (1..=cfg.num_blocks)
        .map(|depth| {
            let (attn, ff) = regress_modulation(&te, &ce, w.block(depth))?;
            let abs = |m: &Tensor| m.data().iter().map(|v| v.abs()).collect::<Vec<_>>();
            let ff = abs(&ff.alpha);
            let argmax = ff
                .iter()
                .enumerate()
                .fold(0, |best, (i, v)| if *v > ff[best] { i } else { best });
            Ok(AlphaRow {
                depth,
                ff,
                attn: abs(&attn.alpha),
                argmax,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;
    use crate::dit::{planted_spike, DitConfig, SpikeShape, SpikeSpec};

    fn grid() -> Vec<f64> {
        (0..10).map(|i| 0.15 + 0.3 * i as f64).collect()
    }

    fn small_probe() -> Probe {
        Probe::new(8, 3)
    }

    #[test]
    fn planted_spike_layer_profile() {
        let w = planted_spike(DitConfig::default(), SpikeSpec::new(3, 9, 100.0), 0).unwrap();
        let rows = layer_profile(&w, &small_probe(), &[1.0], &[0, 8]).unwrap();
        assert_eq!(rows.len(), 6);
        for r in &rows {
            assert_eq!(r.ratio() >= 30.0, r.depth >= 3, "{r:?}");
        }
    }

    #[test]
    fn identity_blocks_keep_the_ratio() {
        let w = DitWeights::init(DitConfig::default(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let rows = layer_profile(&w, &small_probe(), &[1.0], &[0]).unwrap();
        assert!(rows
            .iter()
            .all(|r| r.top == rows[0].top && r.median == rows[0].median));
    }

    #[test]
    fn decreasing_spike_sweep_and_single_point() {
        let spec = SpikeSpec::new(2, 4, 100.0).with_shape(SpikeShape::DecreasingInT);
        let w = planted_spike(DitConfig::default(), spec, 4).unwrap();
        let profile = MaProfile::uniform(6, BTreeSet::from([4]));
        let vals = timestep_sweep(&w, &small_probe(), &grid(), 0, &profile, 2).unwrap();
        assert!(vals.windows(2).all(|p| p[1].1 < p[0].1), "{vals:?}");
        let one = timestep_sweep(&w, &small_probe(), &[1.2], 0, &profile, 2).unwrap();
        let direct = small_probe().block_stats(&w, 1.2, 0).unwrap()[1].mean_abs[4];
        assert_eq!(one, vec![(1.2, direct)]);
    }

    #[test]
    fn constant_spike_is_flat_in_t() {
        let w = planted_spike(DitConfig::default(), SpikeSpec::new(2, 4, 100.0), 4).unwrap();
        let profile = MaProfile::uniform(6, BTreeSet::from([4]));
        let vals = timestep_sweep(&w, &small_probe(), &grid(), 0, &profile, 2).unwrap();
        let mean = vals.iter().map(|v| v.1).sum::<f64>() / vals.len() as f64;
        assert!(
            vals.iter().all(|v| (v.1 / mean - 1.0).abs() < 0.05),
            "{vals:?}"
        );
    }

    #[test]
    fn condition_spread() {
        let profile = MaProfile::uniform(6, BTreeSet::from([1]));
        let cs: Vec<usize> = (0..9).collect();
        let flat = planted_spike(DitConfig::default(), SpikeSpec::new(2, 1, 100.0), 5).unwrap();
        let r = condition_invariance(&flat, &small_probe(), 1.0, &cs, &profile, 2).unwrap();
        assert_eq!(r.spread, 0.0);

        let spec = SpikeSpec::new(2, 1, 100.0).with_shape(SpikeShape::ConditionDependent);
        let dep = planted_spike(DitConfig::default(), spec, 5).unwrap();
        let r = condition_invariance(&dep, &small_probe(), 1.0, &cs, &profile, 2).unwrap();
        assert!(r.spread > 0.5, "{r:?}");

        let rev: Vec<usize> = cs.iter().rev().copied().collect();
        let back = condition_invariance(&dep, &small_probe(), 1.0, &rev, &profile, 2).unwrap();
        for (c, v) in &r.values {
            assert_eq!(back.values.iter().find(|p| p.0 == *c).unwrap().1, *v);
        }
        assert!(condition_invariance(&dep, &small_probe(), 1.0, &[0], &profile, 2).is_err());
    }

    #[test]
    fn alpha_profile_agrees_with_detection() {
        let w = planted_spike(DitConfig::default(), SpikeSpec::new(4, 17, 100.0), 6).unwrap();
        let rows = alpha_profile(&w, 1.5, 2).unwrap();
        assert_eq!(rows[3].argmax, 17);
        let p = ma_profile(&w, &small_probe(), &[1.5], &[2], DetectParams::default()).unwrap();
        assert_eq!(p.at(4).unwrap(), &BTreeSet::from([rows[3].argmax]));

        let zero =
            DitWeights::init(DitConfig::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        for r in alpha_profile(&zero, 0.7, 0).unwrap() {
            assert!(r.ff.iter().chain(&r.attn).all(|&v| v == 0.0));
        }
    }

    #[test]
    fn empty_profile_is_an_error() {
        let w = planted_spike(DitConfig::default(), SpikeSpec::new(2, 4, 100.0), 4).unwrap();
        let profile = MaProfile::uniform(6, BTreeSet::new());
        assert!(timestep_sweep(&w, &small_probe(), &[1.0], 0, &profile, 2).is_err());
        assert!(timestep_sweep(&w, &small_probe(), &[], 0, &profile, 2).is_err());
    }
}
