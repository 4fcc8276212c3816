//! Line-oriented experiment configuration: `section.key = value`, `#` comments.

use std::collections::{BTreeSet, HashSet};
use std::path::PathBuf;

use crate::activations::DetectParams;
use crate::diffusion::NoiseSchedule;
use crate::dit::DitConfig;
use crate::error::{Error, Result};
use crate::guidance::{GuidanceMode, GuidanceSpec};
use crate::intervention::InterventionSpec;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSection {
    pub name: Option<String>,
    pub blocks: usize,
    pub hidden: usize,
    pub heads: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub data_dim: usize,
    pub classes: usize,
    pub t_embed: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScheduleSection {
    pub sigma_max: f64,
    pub steps: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectionSection {
    pub kappa: f64,
    pub rho: f64,
    pub kappa_tok: f64,
}

/// Guidance scales are kept per mode, mirroring how published settings are
/// tabulated; `mode` selects which pair a run uses.
#[derive(Clone, Debug, PartialEq)]
pub struct GuidanceSection {
    pub mode: GuidanceMode,
    pub cfg_lambda: f64,
    pub dg_w: f64,
    pub cfg_dg_lambda: f64,
    pub cfg_dg_w: f64,
    /// Disrupted depth (1-based).
    pub m: usize,
    /// Explicit disrupted dimensions; when absent the detected set is used.
    pub dims: Option<BTreeSet<usize>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunSection {
    pub seed: u64,
    pub samples: usize,
    pub draws: usize,
    pub train_steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub output_dir: PathBuf,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub model: ModelSection,
    pub schedule: ScheduleSection,
    pub detection: DetectionSection,
    pub guidance: GuidanceSection,
    pub run: RunSection,
}

impl ExperimentConfig {
    pub fn dit_config(&self) -> Result<DitConfig> {
        let m = &self.model;
        let cfg = DitConfig {
            num_blocks: m.blocks,
            hidden_size: m.hidden,
            num_heads: m.heads,
            grid_h: m.grid_h,
            grid_w: m.grid_w,
            data_dim: m.data_dim,
            num_classes: m.classes,
            t_embed_dim: m.t_embed,
            sigma_max: self.schedule.sigma_max,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn noise_schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(self.schedule.sigma_max, self.schedule.steps)
    }

    pub fn detect_params(&self) -> Result<DetectParams> {
        DetectParams::new(self.detection.kappa, self.detection.rho)
    }

    /// `(lambda, w)` configured for `mode`. Unused scales are reported as 0.
    pub fn scales(&self, mode: GuidanceMode) -> (f64, f64) {
        let g = &self.guidance;
        match mode {
            GuidanceMode::Cond => (0.0, 0.0),
            GuidanceMode::Cfg => (g.cfg_lambda, 0.0),
            GuidanceMode::Dg => (0.0, g.dg_w),
            GuidanceMode::CfgDg => (g.cfg_dg_lambda, g.cfg_dg_w),
        }
    }

    pub fn intervention(&self) -> InterventionSpec {
        match &self.guidance.dims {
            Some(d) => InterventionSpec::explicit(self.guidance.m, d.clone()),
            None => InterventionSpec::ma_detected(self.guidance.m),
        }
    }

    pub fn guidance_spec(&self, mode: GuidanceMode) -> GuidanceSpec {
        let (lambda, w) = self.scales(mode);
        GuidanceSpec::new(mode, lambda, w, mode.uses_dg().then(|| self.intervention()))
    }
}

fn err(line: usize, message: impl Into<String>) -> Error {
    Error::Config {
        line,
        message: message.into(),
    }
}

fn parse_num<T: std::str::FromStr>(line: usize, key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| err(line, format!("{key}: cannot parse {v:?}")))
}

fn positive(line: usize, key: &str, v: &str) -> Result<usize> {
    let n: usize = parse_num(line, key, v)?;
    if n == 0 {
        return Err(err(line, format!("{key} must be positive")));
    }
    Ok(n)
}

fn scale(line: usize, key: &str, v: &str) -> Result<f64> {
    let x: f64 = parse_num(line, key, v)?;
    if !(x.is_finite() && x >= 0.0) {
        return Err(err(line, format!("{key} = {x} out of range (need >= 0)")));
    }
    Ok(x)
}

/// Accepts `810`, `154,1446` and `[154, 1446]`.
fn parse_dims(line: usize, v: &str) -> Result<BTreeSet<usize>> {
    let inner = v.trim();
    let inner = match (inner.strip_prefix('['), inner.ends_with(']')) {
        (Some(rest), true) => &rest[..rest.len() - 1],
        (None, false) => inner,
        _ => return Err(err(line, format!("unbalanced brackets in {v:?}"))),
    };
    let mut out = BTreeSet::new();
    for part in inner.split(',').map(str::trim) {
        if part.is_empty() {
            continue;
        }
        if !out.insert(parse_num(line, "guidance.dims", part)?) {
            return Err(err(line, format!("duplicate dimension {part}")));
        }
    }
    Ok(out)
}

#[derive(Default)]
struct Seen {
    keys: HashSet<String>,
    sections: HashSet<String>,
}

/// Parses and validates a configuration. Unknown keys, duplicate keys,
/// out-of-range values and a missing `model` or `schedule` section are errors.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let toy = DitConfig::default();
    let mut model = ModelSection {
        name: None,
        blocks: 0,
        hidden: 0,
        heads: toy.num_heads,
        grid_h: toy.grid_h,
        grid_w: toy.grid_w,
        data_dim: toy.data_dim,
        classes: toy.num_classes,
        t_embed: toy.t_embed_dim,
    };
    let default_sched = NoiseSchedule::default();
    let mut schedule = ScheduleSection {
        sigma_max: default_sched.sigma_max,
        steps: default_sched.steps,
    };
    let dp = DetectParams::default();
    let mut detection = DetectionSection {
        kappa: dp.kappa,
        rho: dp.rho,
        kappa_tok: crate::activations::KAPPA_TOK,
    };
    let mut guidance = GuidanceSection {
        mode: GuidanceMode::CfgDg,
        cfg_lambda: GuidanceSpec::DEFAULT_LAMBDA,
        dg_w: GuidanceSpec::DEFAULT_W,
        cfg_dg_lambda: GuidanceSpec::DEFAULT_LAMBDA,
        cfg_dg_w: GuidanceSpec::DEFAULT_W,
        m: 0,
        dims: None,
    };
    let mut run = RunSection {
        seed: 0,
        samples: 2048,
        draws: 64,
        train_steps: 5000,
        batch: 32,
        lr: 3e-4,
        output_dir: PathBuf::from("out"),
        checkpoint: None,
    };
    let mut seen = Seen::default();
    let mut m_line = 0;
    let mut dims_line = 0;

    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (lhs, value) = content.split_once('=').ok_or_else(|| {
            err(
                line,
                format!("expected `section.key = value`, got {content:?}"),
            )
        })?;
        let (lhs, value) = (lhs.trim(), value.trim());
        let (section, key) = lhs
            .split_once('.')
            .ok_or_else(|| err(line, format!("key {lhs:?} has no section")))?;
        if value.is_empty() {
            return Err(err(line, format!("{lhs} has no value")));
        }
        if !seen.keys.insert(lhs.to_string()) {
            return Err(err(line, format!("duplicate key {lhs}")));
        }
        seen.sections.insert(section.to_string());
        let v = value;
        match (section, key) {
            ("model", "name") => model.name = Some(v.to_string()),
            ("model", "blocks") => model.blocks = positive(line, lhs, v)?,
            ("model", "hidden") => {
                model.hidden = positive(line, lhs, v)?;
                if model.hidden < 2 {
                    return Err(err(line, "model.hidden must be at least 2"));
                }
            }
            ("model", "heads") => model.heads = positive(line, lhs, v)?,
            ("model", "grid_h") => model.grid_h = positive(line, lhs, v)?,
            ("model", "grid_w") => model.grid_w = positive(line, lhs, v)?,
            ("model", "data_dim") => model.data_dim = positive(line, lhs, v)?,
            ("model", "classes") => {
                model.classes = parse_num(line, lhs, v)?;
                if model.classes < 2 {
                    return Err(err(line, "model.classes must be at least 2"));
                }
            }
            ("model", "t_embed") => {
                model.t_embed = positive(line, lhs, v)?;
                if !model.t_embed.is_multiple_of(2) {
                    return Err(err(line, "model.t_embed must be even"));
                }
            }
            ("schedule", "sigma_max") => {
                schedule.sigma_max = parse_num(line, lhs, v)?;
                if !(schedule.sigma_max.is_finite() && schedule.sigma_max > 0.0) {
                    return Err(err(line, format!("{lhs} = {v} out of range (need > 0)")));
                }
            }
            ("schedule", "steps") => schedule.steps = positive(line, lhs, v)?,
            ("detection", "kappa") => {
                detection.kappa = parse_num(line, lhs, v)?;
                if !(detection.kappa.is_finite() && detection.kappa > 1.0) {
                    return Err(err(line, format!("{lhs} = {v} out of range (need > 1)")));
                }
            }
            ("detection", "rho") => {
                detection.rho = parse_num(line, lhs, v)?;
                if !(detection.rho > 0.0 && detection.rho <= 1.0) {
                    return Err(err(line, format!("{lhs} = {v} out of range (need (0, 1])")));
                }
            }
            ("detection", "kappa_tok") => {
                detection.kappa_tok = parse_num(line, lhs, v)?;
                if !(detection.kappa_tok.is_finite() && detection.kappa_tok > 0.0) {
                    return Err(err(line, format!("{lhs} = {v} out of range (need > 0)")));
                }
            }
            ("guidance", "mode") => {
                guidance.mode = v.parse().map_err(|e: Error| err(line, e.to_string()))?;
            }
            ("guidance", "cfg_lambda") => guidance.cfg_lambda = scale(line, lhs, v)?,
            ("guidance", "dg_w") => guidance.dg_w = scale(line, lhs, v)?,
            ("guidance", "cfg_dg_lambda") => guidance.cfg_dg_lambda = scale(line, lhs, v)?,
            ("guidance", "cfg_dg_w") => guidance.cfg_dg_w = scale(line, lhs, v)?,
            ("guidance", "m") => {
                if v.contains(',') || v.contains('[') {
                    return Err(err(line, "only a single disrupted depth is supported"));
                }
                guidance.m = positive(line, lhs, v)?;
                m_line = line;
            }
            ("guidance", "dims") => {
                guidance.dims = Some(parse_dims(line, v)?);
                dims_line = line;
            }
            ("run", "seed") => run.seed = parse_num(line, lhs, v)?,
            ("run", "samples") => run.samples = positive(line, lhs, v)?,
            ("run", "draws") => run.draws = positive(line, lhs, v)?,
            ("run", "train_steps") => run.train_steps = positive(line, lhs, v)?,
            ("run", "batch") => run.batch = positive(line, lhs, v)?,
            ("run", "lr") => {
                run.lr = parse_num(line, lhs, v)?;
                if !(run.lr.is_finite() && run.lr > 0.0) {
                    return Err(err(line, format!("{lhs} = {v} out of range (need > 0)")));
                }
            }
            ("run", "output_dir") => run.output_dir = PathBuf::from(v),
            ("run", "checkpoint") => run.checkpoint = Some(PathBuf::from(v)),
            ("model" | "schedule" | "detection" | "guidance" | "run", _) => {
                return Err(err(line, format!("unknown key {lhs}")));
            }
            _ => return Err(err(line, format!("unknown section {section:?}"))),
        }
    }

    if !seen.sections.contains("model") {
        return Err(Error::MissingSection("model"));
    }
    if !seen.sections.contains("schedule") {
        return Err(Error::MissingSection("schedule"));
    }
    for (key, value) in [
        ("model.blocks", model.blocks),
        ("model.hidden", model.hidden),
    ] {
        if value == 0 {
            return Err(err(0, format!("{key} is required")));
        }
    }
    if guidance.m == 0 {
        guidance.m = model.blocks / 2;
    } else if guidance.m > model.blocks {
        return Err(err(
            m_line,
            format!(
                "guidance.m = {} exceeds model.blocks = {}",
                guidance.m, model.blocks
            ),
        ));
    }
    if let Some(&d) = guidance.dims.as_ref().and_then(|d| d.iter().next_back()) {
        if d >= model.hidden {
            return Err(err(
                dims_line,
                format!("dimension {d} outside [0, {})", model.hidden),
            ));
        }
    }
    Ok(ExperimentConfig {
        model,
        schedule,
        detection,
        guidance,
        run,
    })
}

pub fn load_config(path: &std::path::Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text)
}
