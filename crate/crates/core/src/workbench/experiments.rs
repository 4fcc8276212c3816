//! Experiment drivers behind the `malab` subcommands. Each driver computes
//! every artifact in memory and returns them; [`Outcome::commit`] writes them
//! in one pass at the end.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::activations::{
    alpha_profile, condition_invariance, layer_profile, ma_profile, timestep_sweep, MaProfile,
    Probe,
};
use crate::diffusion::{euler_sample, train, GmmSpec, TrainConfig};
use crate::dit::DitWeights;
use crate::error::{Error, Result};
use crate::guidance::{build_guided_denoiser, GuidanceMode};
use crate::intervention::{intervention_report, InterventionInput, InterventionSpec};
use crate::numerics::Tensor;
use crate::workbench::checkpoint::{decode_checkpoint, encode_checkpoint};
use crate::workbench::config::ExperimentConfig;
use crate::workbench::csv::{format_sig9, read_csv, Cell, Table};
use crate::workbench::metrics::{detail_energy_samples, sliced_w2};
use crate::workbench::ppm::{encode_ppm, tile, Image};

/// Projections used by every sliced-W2 evaluation.
pub const W2_PROJECTIONS: usize = 64;
pub const CHECKPOINT_FILE: &str = "model.ckpt";

/// Command-line overrides applied on top of a parsed config.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub mode: Option<GuidanceMode>,
    pub lambda: Option<f64>,
    pub w: Option<f64>,
    pub m: Option<usize>,
}

/// A config with overrides folded in.
#[derive(Clone, Debug)]
pub struct Context {
    pub config: ExperimentConfig,
    pub out: PathBuf,
    pub seed: u64,
}

impl Context {
    pub fn new(mut config: ExperimentConfig, o: &Overrides) -> Result<Self> {
        if let Some(mode) = o.mode {
            config.guidance.mode = mode;
        }
        let g = &mut config.guidance;
        for (name, v) in [("lambda", o.lambda), ("w", o.w)] {
            if let Some(v) = v {
                if !(v.is_finite() && v >= 0.0) {
                    return Err(Error::InvalidParameter(format!(
                        "--{name} {v} must be >= 0"
                    )));
                }
            }
        }
        match g.mode {
            GuidanceMode::Cfg => g.cfg_lambda = o.lambda.unwrap_or(g.cfg_lambda),
            GuidanceMode::Dg => g.dg_w = o.w.unwrap_or(g.dg_w),
            GuidanceMode::CfgDg => {
                g.cfg_dg_lambda = o.lambda.unwrap_or(g.cfg_dg_lambda);
                g.cfg_dg_w = o.w.unwrap_or(g.cfg_dg_w);
            }
            GuidanceMode::Cond => {}
        }
        if let Some(m) = o.m {
            if m == 0 || m > config.model.blocks {
                return Err(Error::InvalidParameter(format!(
                    "--m {m} outside 1..={}",
                    config.model.blocks
                )));
            }
            g.m = m;
        }
        let seed = o.seed.unwrap_or(config.run.seed);
        let out = o
            .out
            .clone()
            .unwrap_or_else(|| config.run.output_dir.clone());
        Ok(Context { config, out, seed })
    }

    pub fn data(&self) -> Result<GmmSpec> {
        if self.config.model.data_dim != 2 {
            return Err(Error::InvalidParameter(
                "the mixture task is planar: model.data_dim must be 2".into(),
            ));
        }
        GmmSpec::ring(self.config.model.classes - 1, 1.0, 0.05)
    }

    fn checkpoint_path(&self) -> PathBuf {
        self.config
            .run
            .checkpoint
            .clone()
            .unwrap_or_else(|| self.out.join(CHECKPOINT_FILE))
    }

    pub fn load_weights(&self) -> Result<DitWeights> {
        let path = self.checkpoint_path();
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let w = decode_checkpoint(&bytes)?;
        if w.config != self.config.dit_config()? {
            return Err(Error::InvalidParameter(format!(
                "{}: checkpoint architecture differs from the config's model section",
                path.display()
            )));
        }
        Ok(w)
    }

    fn probe(&self) -> Result<Probe> {
        Ok(Probe {
            data: self.data()?,
            draws: self.config.run.draws,
            seed: self.seed,
        })
    }

    /// Ten timesteps at the centres of equal slices of the schedule range.
    pub fn analysis_grid(&self) -> Vec<f64> {
        let s = self.config.schedule.sigma_max;
        (0..10).map(|i| (i as f64 + 0.5) * s / 10.0).collect()
    }
}

/// Artifacts produced by one driver plus human-readable log lines.
#[derive(Clone, Debug, Default)]
pub struct Outcome {
    pub files: Vec<(String, Vec<u8>)>,
    pub messages: Vec<String>,
}

impl Outcome {
    fn table(&mut self, file: &str, t: &Table) -> Result<()> {
        self.files
            .push((file.to_string(), t.render()?.into_bytes()));
        Ok(())
    }

    fn log(&mut self, msg: impl Into<String>) {
        self.messages.push(msg.into());
    }

    pub fn file(&self, name: &str) -> Option<&[u8]> {
        self.files
            .iter()
            .find(|f| f.0 == name)
            .map(|f| f.1.as_slice())
    }

    /// Writes every artifact under `dir`, creating it if needed.
    pub fn commit(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.files
            .iter()
            .map(|(name, bytes)| {
                let p = dir.join(name);
                std::fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
                Ok(p)
            })
            .collect()
    }
}

pub fn run_train(ctx: &Context) -> Result<Outcome> {
    let cfg = ctx.config.dit_config()?;
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed);
    let w = DitWeights::init(cfg, &mut rng)?;
    let tc = TrainConfig {
        steps: ctx.config.run.train_steps,
        batch: ctx.config.run.batch,
        lr: ctx.config.run.lr,
        seed: ctx.seed,
        ..TrainConfig::default()
    };
    let (w, losses) = train(
        w,
        ctx.config.noise_schedule()?,
        &ctx.data()?,
        &tc,
        &mut rng,
        |_, _| {},
    )?;
    let mut out = Outcome::default();
    let mut t = Table::new("loss", &["step", "loss"]);
    for (i, l) in losses.iter().enumerate() {
        t.push(vec![i.into(), (*l).into()])?;
    }
    out.table("loss.csv", &t)?;
    out.files
        .push((CHECKPOINT_FILE.to_string(), encode_checkpoint(&w)));
    let k = losses.len().min(100);
    let head = losses[..k].iter().sum::<f64>() / k as f64;
    let tail = losses[losses.len() - k..].iter().sum::<f64>() / k as f64;
    out.log(format!(
        "trained {} steps: leading mean loss {}, trailing {}",
        losses.len(),
        format_sig9(head),
        format_sig9(tail)
    ));
    Ok(out)
}

/// Detection over the analysis grid and every condition id.
pub fn detect_profile(ctx: &Context, w: &DitWeights) -> Result<MaProfile> {
    let cs: Vec<usize> = (0..w.config.num_classes).collect();
    ma_profile(
        w,
        &ctx.probe()?,
        &ctx.analysis_grid(),
        &cs,
        ctx.config.detect_params()?,
    )
}

/// The dimensions a run disrupts, and where they came from. When nothing is
/// detected at the chosen depth the single largest dimension there is used.
pub fn resolve_disruption(
    ctx: &Context,
    w: &DitWeights,
    profile: &MaProfile,
) -> Result<(InterventionSpec, MaProfile, &'static str)> {
    let m = ctx.config.guidance.m;
    if let Some(d) = &ctx.config.guidance.dims {
        return Ok((
            InterventionSpec::explicit(m, d.clone()),
            profile.clone(),
            "explicit",
        ));
    }
    if !profile.at(m)?.is_empty() {
        return Ok((
            InterventionSpec::ma_detected(m),
            profile.clone(),
            "detected",
        ));
    }
    let rows = layer_stats_at(ctx, w, m)?;
    let top = argmax(&rows);
    let mut p = profile.clone();
    p.dims[m - 1] = BTreeSet::from([top]);
    Ok((InterventionSpec::ma_detected(m), p, "top1-fallback"))
}

fn layer_stats_at(ctx: &Context, w: &DitWeights, depth: usize) -> Result<Vec<f64>> {
    let probe = ctx.probe()?;
    let stats = probe.block_stats(
        w,
        ctx.config.schedule.sigma_max / 2.0,
        w.config.null_class(),
    )?;
    Ok(stats[depth - 1].mean_abs.clone())
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold(0, |b, (i, x)| if *x > v[b] { i } else { b })
}

fn dims_text(d: &BTreeSet<usize>) -> String {
    d.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn run_analyze(ctx: &Context) -> Result<Outcome> {
    let w = ctx.load_weights()?;
    let probe = ctx.probe()?;
    let grid = ctx.analysis_grid();
    let cs: Vec<usize> = (0..w.config.num_classes).collect();
    let mut out = Outcome::default();

    let rows = layer_profile(&w, &probe, &grid, &cs)?;
    let mut t = Table::new(
        "layer_profile",
        &[
            "depth",
            "top1",
            "top2",
            "top3",
            "median",
            "top1_over_median",
        ],
    );
    for r in &rows {
        t.push(vec![
            r.depth.into(),
            r.top[0].into(),
            r.top[1].into(),
            r.top[2].into(),
            r.median.into(),
            r.ratio().into(),
        ])?;
    }
    out.table("layer_profile.csv", &t)?;

    let profile = detect_profile(ctx, &w)?;
    let mut t = Table::new("ma_sets", &["depth", "count", "dims", "kappa", "rho"]);
    for (k, d) in profile.dims.iter().enumerate() {
        t.push(vec![
            (k + 1).into(),
            d.len().into(),
            dims_text(d).into(),
            profile.params.kappa.into(),
            profile.params.rho.into(),
        ])?;
    }
    out.table("ma_sets.csv", &t)?;

    let mid = ctx.config.schedule.sigma_max / 2.0;
    let alphas = alpha_profile(&w, mid, 0)?;
    let mut t = Table::new(
        "alpha_profile",
        &["depth", "dim", "alpha_ff_abs", "alpha_attn_abs"],
    );
    for r in &alphas {
        for (d, (f, a)) in r.ff.iter().zip(&r.attn).enumerate() {
            t.push(vec![r.depth.into(), d.into(), (*f).into(), (*a).into()])?;
        }
    }
    out.table("alpha_profile.csv", &t)?;
    let mut t = Table::new("alpha_argmax", &["depth", "argmax", "alpha_ff_abs"]);
    for r in &alphas {
        t.push(vec![r.depth.into(), r.argmax.into(), r.ff[r.argmax].into()])?;
    }
    out.table("alpha_argmax.csv", &t)?;

    let (_, tracked, source) = resolve_disruption(ctx, &w, &profile)?;
    let m = ctx.config.guidance.m;
    let dims = tracked.at(m)?.clone();
    let sweep = timestep_sweep(&w, &probe, &grid, 0, &tracked, m)?;
    let mut t = Table::new(
        "timestep_sweep",
        &["t", "magnitude", "depth", "dims", "dims_source"],
    );
    for (ti, v) in &sweep {
        t.push(vec![
            (*ti).into(),
            (*v).into(),
            m.into(),
            dims_text(&dims).into(),
            source.into(),
        ])?;
    }
    out.table("timestep_sweep.csv", &t)?;

    let real: Vec<usize> = w.config.real_classes().collect();
    let inv = condition_invariance(&w, &probe, mid, &real, &tracked, m)?;
    let mut t = Table::new(
        "condition_invariance",
        &["condition", "magnitude", "spread"],
    );
    for (c, v) in &inv.values {
        t.push(vec![(*c).into(), (*v).into(), inv.spread.into()])?;
    }
    out.table("condition_invariance.csv", &t)?;
    out.log(format!(
        "depth {m}: tracking dims [{}] ({source}); condition spread {}",
        dims_text(&dims),
        format_sig9(inv.spread)
    ));
    Ok(out)
}

/// Sliced-W2 and detail energy of one guided sampling run.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleMetrics {
    pub mode: GuidanceMode,
    pub lambda: f64,
    pub w: f64,
    pub sliced_w2: f64,
    pub detail_energy: f64,
    pub passes_per_step: f64,
}

struct SampleRun {
    metrics: SampleMetrics,
    /// Per class, `[samples, tokens, dim]`.
    samples: Vec<(usize, Tensor)>,
}

fn sample_mode(
    ctx: &Context,
    w: &DitWeights,
    profile: &MaProfile,
    mode: GuidanceMode,
    spec_override: Option<(f64, f64, usize)>,
) -> Result<SampleRun> {
    let mut spec = ctx.config.guidance_spec(mode);
    let mut profile = profile.clone();
    if mode.uses_dg() {
        let mut c = ctx.clone();
        if let Some((_, _, m)) = spec_override {
            c.config.guidance.m = m;
        }
        let (iv, p, _) = resolve_disruption(&c, w, &profile)?;
        spec.intervention = Some(iv);
        profile = p;
    }
    if let Some((lambda, wv, _)) = spec_override {
        spec.lambda = lambda;
        spec.w = wv;
    }
    let g = build_guided_denoiser(w, &spec, &profile)?;
    let sched = ctx.config.noise_schedule()?;
    let data = ctx.data()?;
    let cfg = &w.config;
    let n = ctx.config.run.samples;
    let mut samples = Vec::new();
    let (mut w2, mut de) = (0.0, 0.0);
    let classes: Vec<usize> = cfg.real_classes().collect();
    for &c in &classes {
        let seed = ctx.seed.wrapping_add(c as u64);
        let s = euler_sample(&g, &sched, [cfg.tokens(), cfg.data_dim], c, seed, n)?;
        let pts = s.reshape(&[n * cfg.tokens(), cfg.data_dim])?;
        let comp = data.component(c)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let refs: Vec<f64> = (0..n * cfg.tokens())
            .flat_map(|_| comp.sample(&mut rng))
            .collect();
        let refs = Tensor::new(pts.shape().to_vec(), refs)?;
        w2 += sliced_w2(&pts, &refs, W2_PROJECTIONS, seed)?;
        de += detail_energy_samples(&s, cfg.grid_h, cfg.grid_w)?;
        samples.push((c, s));
    }
    let k = classes.len() as f64;
    let calls = (classes.len() * sched.steps) as f64;
    Ok(SampleRun {
        metrics: SampleMetrics {
            mode,
            lambda: spec.lambda,
            w: spec.w,
            sliced_w2: w2 / k,
            detail_energy: de / k,
            passes_per_step: g.passes() as f64 / calls,
        },
        samples,
    })
}

fn metrics_row(m: &SampleMetrics) -> Vec<Cell> {
    vec![
        m.mode.to_string().into(),
        m.lambda.into(),
        m.w.into(),
        m.sliced_w2.into(),
        m.detail_energy.into(),
        m.passes_per_step.into(),
    ]
}

const METRIC_HEADER: [&str; 6] = [
    "mode",
    "lambda",
    "w",
    "sliced_w2",
    "detail_energy",
    "passes_per_step",
];

/// Maps a planar sample field to an image: x to red, y to green.
fn field_image(sample: &[f64], h: usize, w: usize) -> Result<Image> {
    let to01 = |v: f64| ((v + 1.5) / 3.0).clamp(0.0, 1.0);
    let rgb = sample
        .chunks_exact(2)
        .map(|p| [to01(p[0]), to01(p[1]), 0.5])
        .collect();
    Image::new(w, h, rgb)
}

pub fn run_sample(ctx: &Context) -> Result<Outcome> {
    let w = ctx.load_weights()?;
    let mode = ctx.config.guidance.mode;
    let profile = if mode.uses_dg() {
        detect_profile(ctx, &w)?
    } else {
        MaProfile::uniform(w.config.num_blocks, BTreeSet::new())
    };
    let run = sample_mode(ctx, &w, &profile, mode, None)?;
    let cfg = &w.config;
    let mut out = Outcome::default();
    let mut t = Table::new("samples", &["class", "sample", "token", "x", "y"]);
    let mut tiles = Vec::new();
    for (c, s) in &run.samples {
        for (i, sample) in s
            .data()
            .chunks_exact(cfg.tokens() * cfg.data_dim)
            .enumerate()
        {
            for (tok, p) in sample.chunks_exact(cfg.data_dim).enumerate() {
                t.push(vec![
                    (*c).into(),
                    i.into(),
                    tok.into(),
                    p[0].into(),
                    p[1].into(),
                ])?;
            }
            if i < 8 {
                tiles.push(field_image(sample, cfg.grid_h, cfg.grid_w)?);
            }
        }
    }
    let tag = file_tag(mode);
    out.table(&format!("samples_{tag}.csv"), &t)?;
    out.files.push((
        format!("samples_{tag}.ppm"),
        encode_ppm(&tile(&tiles, 8, 1)?),
    ));
    let mut m = Table::new("sample_metrics", &METRIC_HEADER);
    m.push(metrics_row(&run.metrics))?;
    out.table(&format!("sample_metrics_{tag}.csv"), &m)?;
    out.log(format!(
        "mode {mode}: {} forward passes per sampler step; sliced-W2 {}, detail energy {}",
        format_sig9(run.metrics.passes_per_step),
        format_sig9(run.metrics.sliced_w2),
        format_sig9(run.metrics.detail_energy)
    ));
    Ok(out)
}

fn file_tag(mode: GuidanceMode) -> String {
    mode.to_string().replace('+', "_")
}

/// Probe points spread across the analysis grid and the real classes.
fn intervention_inputs(
    ctx: &Context,
    w: &DitWeights,
    count: usize,
) -> Result<Vec<InterventionInput>> {
    let data = ctx.data()?;
    let cfg = &w.config;
    let grid = ctx.analysis_grid();
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed);
    (0..count)
        .map(|i| {
            let t = grid[i % grid.len()];
            let c = i % (cfg.num_classes - 1);
            let comp = data.component(c)?;
            let x: Vec<f64> = (0..cfg.tokens())
                .flat_map(|_| comp.sample(&mut rng))
                .collect();
            let eps = Tensor::randn(&[cfg.tokens(), cfg.data_dim], &mut rng);
            let z = x.iter().zip(eps.data()).map(|(a, e)| a + t * e).collect();
            Ok(InterventionInput {
                z: Tensor::new(vec![cfg.tokens(), cfg.data_dim], z)?,
                t,
                c,
            })
        })
        .collect()
}

pub fn run_intervene(ctx: &Context) -> Result<Outcome> {
    let w = ctx.load_weights()?;
    let profile = detect_profile(ctx, &w)?;
    let (_, tracked, source) = resolve_disruption(ctx, &w, &profile)?;
    let m = ctx.config.guidance.m;
    let inputs = intervention_inputs(ctx, &w, 20)?;
    let arms = intervention_report(&w, m, &tracked, ctx.seed, &inputs)?;
    let mut header = vec![
        "arm",
        "depth",
        "dims",
        "dims_source",
        "mean_l2",
        "median_l2",
    ];
    let chans: Vec<String> = (0..w.config.data_dim)
        .map(|c| format!("mean_abs_delta_ch{c}"))
        .collect();
    header.extend(chans.iter().map(String::as_str));
    let mut t = Table::new("intervention", &header);
    let mut out = Outcome::default();
    for a in &arms {
        let mut row: Vec<Cell> = vec![
            a.arm.as_str().into(),
            m.into(),
            dims_text(&a.dims).into(),
            source.into(),
            a.mean_l2.into(),
            a.median_l2.into(),
        ];
        row.extend(a.per_channel.iter().map(|&v| Cell::Num(v)));
        t.push(row)?;
        out.log(format!(
            "{}: median delta {}",
            a.arm,
            format_sig9(a.median_l2)
        ));
    }
    out.table("intervention.csv", &t)?;
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepParam {
    Depth,
    Lambda,
    W,
}

impl std::str::FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "m" => Ok(SweepParam::Depth),
            "lambda" => Ok(SweepParam::Lambda),
            "w" => Ok(SweepParam::W),
            other => Err(Error::InvalidParameter(format!(
                "unknown sweep parameter {other:?} (m, lambda, w)"
            ))),
        }
    }
}

/// Parses `1..6` (inclusive), `1,2,4` or a single value.
pub fn parse_values(spec: &str) -> Result<Vec<f64>> {
    let bad = || Error::InvalidParameter(format!("cannot parse sweep values {spec:?}"));
    if let Some((a, b)) = spec.split_once("..") {
        let (a, b): (i64, i64) = (
            a.trim().parse().map_err(|_| bad())?,
            b.trim().parse().map_err(|_| bad())?,
        );
        if b < a {
            return Err(bad());
        }
        return Ok((a..=b).map(|v| v as f64).collect());
    }
    let vals = spec
        .split(',')
        .map(|v| v.trim().parse::<f64>().map_err(|_| bad()))
        .collect::<Result<Vec<_>>>()?;
    if vals.is_empty() || vals.iter().any(|v| !v.is_finite()) {
        return Err(bad());
    }
    Ok(vals)
}

/// Sweeps one guidance knob and records the sample metrics at each value.
/// The mode is the configured one, except that a depth sweep with a mode
/// that never disrupts anything uses `cfg+dg`.
pub fn run_sweep(ctx: &Context, param: SweepParam, values: &[f64]) -> Result<Outcome> {
    if values.is_empty() {
        return Err(Error::Empty("sweep values"));
    }
    let w = ctx.load_weights()?;
    let profile = detect_profile(ctx, &w)?;
    let mut mode = ctx.config.guidance.mode;
    if param == SweepParam::Depth && !mode.uses_dg() {
        mode = GuidanceMode::CfgDg;
    }
    let (l0, w0) = ctx.config.scales(mode);
    let mut header = vec!["value"];
    header.extend(METRIC_HEADER);
    let name = match param {
        SweepParam::Depth => "m",
        SweepParam::Lambda => "lambda",
        SweepParam::W => "w",
    };
    let mut t = Table::new(&format!("sweep_{name}"), &header);
    let mut seen = BTreeSet::new();
    for &v in values {
        if !seen.insert(v.to_bits()) {
            return Err(Error::InvalidParameter(format!("sweep value {v} repeated")));
        }
        let knobs = match param {
            SweepParam::Depth => {
                if v.fract() != 0.0 || v < 1.0 || v > w.config.num_blocks as f64 {
                    return Err(Error::InvalidParameter(format!(
                        "depth {v} outside 1..={}",
                        w.config.num_blocks
                    )));
                }
                (l0, w0, v as usize)
            }
            SweepParam::Lambda | SweepParam::W if v < 0.0 => {
                return Err(Error::InvalidParameter(format!(
                    "guidance scale {v} must be >= 0"
                )));
            }
            SweepParam::Lambda => (v, w0, ctx.config.guidance.m),
            SweepParam::W => (l0, v, ctx.config.guidance.m),
        };
        let run = sample_mode(ctx, &w, &profile, mode, Some(knobs))?;
        let mut row: Vec<Cell> = vec![v.into()];
        row.extend(metrics_row(&run.metrics));
        t.push(row)?;
    }
    let mut out = Outcome::default();
    out.table(&format!("sweep_{name}.csv"), &t)?;
    out.log(format!(
        "swept {name} over {} values in mode {mode}",
        values.len()
    ));
    Ok(out)
}

/// Sample metrics for every guidance mode at the configured scales.
pub fn run_compare(ctx: &Context) -> Result<Outcome> {
    let w = ctx.load_weights()?;
    let profile = detect_profile(ctx, &w)?;
    let mut t = Table::new("guidance_comparison", &METRIC_HEADER);
    for mode in GuidanceMode::ALL {
        t.push(metrics_row(
            &sample_mode(ctx, &w, &profile, mode, None)?.metrics,
        ))?;
    }
    let mut out = Outcome::default();
    out.table("guidance_comparison.csv", &t)?;
    Ok(out)
}

/// Markdown summary of every CSV in the output directory, in name order.
pub fn run_report(ctx: &Context) -> Result<Outcome> {
    let dir = &ctx.out;
    let mut names: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    names.sort();
    let mut md = String::from("# Experiment report\n\n");
    md.push_str(&format!(
        "Seed {}; model {} blocks x {} hidden; {} sampler steps.\n",
        ctx.seed, ctx.config.model.blocks, ctx.config.model.hidden, ctx.config.schedule.steps
    ));
    const MAX_ROWS: usize = 40;
    for p in &names {
        let t = read_csv(p)?;
        let file = p.file_name().and_then(|f| f.to_str()).unwrap_or("?");
        md.push_str(&format!("\n## {} (`{file}`)\n\n", t.name));
        md.push_str(&format!("| {} |\n", t.header.join(" | ")));
        md.push_str(&format!("|{}\n", "---|".repeat(t.header.len())));
        for r in t.rows.iter().take(MAX_ROWS) {
            md.push_str(&format!("| {} |\n", r.join(" | ")));
        }
        if t.rows.len() > MAX_ROWS {
            md.push_str(&format!(
                "\n{} more rows omitted.\n",
                t.rows.len() - MAX_ROWS
            ));
        }
    }
    let mut out = Outcome::default();
    out.files.push(("report.md".to_string(), md.into_bytes()));
    out.log(format!("report binds {} tables", names.len()));
    Ok(out)
}
