use std::collections::BTreeSet;

use crate::dit::embed::timestep_embedding;
use crate::dit::weights::{BlockParams, DitParams, DitWeights, ModSlot};
use crate::dit::DitConfig;
use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};

pub const LN_EPS: f64 = 1e-6;

/// Zero-mask applied to one block's output.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MaskHook {
    /// 1-based block index.
    pub depth: usize,
    pub dims: BTreeSet<usize>,
}

impl MaskHook {
    pub fn new(depth: usize, dims: BTreeSet<usize>) -> Self {
        MaskHook { depth, dims }
    }

    pub fn validate(&self, cfg: &DitConfig) -> Result<()> {
        if self.depth == 0 || self.depth > cfg.num_blocks {
            return Err(Error::InvalidParameter(format!(
                "intervention depth {} outside [1, {}]",
                self.depth, cfg.num_blocks
            )));
        }
        if let Some(&d) = self.dims.iter().find(|&&d| d >= cfg.hidden_size) {
            return Err(Error::DimensionOutOfRange {
                dim: d,
                extent: cfg.hidden_size,
            });
        }
        Ok(())
    }
}

/// Scale, shift and residual gate for one branch of a block.
#[derive(Clone, Debug, PartialEq)]
pub struct ModulationParams {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub alpha: Tensor,
}

/// Captured state of one block for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockTrace {
    /// Block output hidden state `[tokens, C]` (after any hook).
    pub hidden: Tensor,
    pub alpha_attn: Tensor,
    pub alpha_ff: Tensor,
}

/// Per-sample record of every block's hidden state and residual gates.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenTrace {
    pub t: f64,
    pub condition: usize,
    pub blocks: Vec<BlockTrace>,
}

/// Per-sample embeddings feeding every block's modulation network.
struct Conditioning {
    /// `[B, 2E]` concatenation of timestep and class embeddings.
    cond: Var,
}

fn embed_conditioning(
    g: &mut Graph,
    p: &DitParams<Var>,
    cfg: &DitConfig,
    ts: &[f64],
    cs: &[usize],
) -> Result<Conditioning> {
    let e = cfg.t_embed_dim;
    let mut temb = Vec::with_capacity(ts.len() * e);
    for &t in ts {
        temb.extend_from_slice(timestep_embedding(t, e, cfg.sigma_max)?.data());
    }
    let temb = g.constant(Tensor::from_parts(vec![ts.len(), e], temb));
    let cemb = g.gather_rows(p.class_table, cs)?;
    let cond = g.concat_last(temb, cemb)?;
    Ok(Conditioning { cond })
}

/// Modulation output `[B, 6C]` for one block.
fn modulation(g: &mut Graph, b: &BlockParams<Var>, cond: Var) -> Result<Var> {
    let h = g.linear(cond, b.mod_w1, b.mod_b1)?;
    let h = g.silu(h)?;
    g.linear(h, b.mod_w2, b.mod_b2)
}

fn slot(g: &mut Graph, m: Var, s: ModSlot, c: usize) -> Result<Var> {
    g.slice_last(m, s as usize * c, c)
}

struct BlockOut {
    z: Var,
    alpha_attn: Var,
    alpha_ff: Var,
}

fn block_graph(
    g: &mut Graph,
    b: &BlockParams<Var>,
    cfg: &DitConfig,
    z: Var,
    cond: Var,
    mask: Option<&BTreeSet<usize>>,
) -> Result<BlockOut> {
    let c = cfg.hidden_size;
    let m = modulation(g, b, cond)?;
    let gamma_a = slot(g, m, ModSlot::GammaAttn, c)?;
    let beta_a = slot(g, m, ModSlot::BetaAttn, c)?;
    let alpha_a = slot(g, m, ModSlot::AlphaAttn, c)?;
    let gamma_f = slot(g, m, ModSlot::GammaFf, c)?;
    let beta_f = slot(g, m, ModSlot::BetaFf, c)?;
    let alpha_f = slot(g, m, ModSlot::AlphaFf, c)?;

    let n = g.layer_norm(z, LN_EPS)?;
    let a = g.modulate(n, gamma_a, beta_a)?;
    let q = g.linear(a, b.q_w, b.q_b)?;
    let k = g.linear(a, b.k_w, b.k_b)?;
    let v = g.linear(a, b.v_w, b.v_b)?;
    let o = g.attention(q, k, v, cfg.num_heads)?;
    let o = g.linear(o, b.o_w, b.o_b)?;
    let z = g.gated_residual(z, alpha_a, o)?;

    let n = g.layer_norm(z, LN_EPS)?;
    let f = g.modulate(n, gamma_f, beta_f)?;
    let f = g.linear(f, b.ff_w1, b.ff_b1)?;
    let f = g.silu(f)?;
    let f = g.linear(f, b.ff_w2, b.ff_b2)?;
    let mut z = g.gated_residual(z, alpha_f, f)?;

    if let Some(dims) = mask {
        z = g.mask_columns(z, dims)?;
    }
    Ok(BlockOut {
        z,
        alpha_attn: alpha_a,
        alpha_ff: alpha_f,
    })
}

/// Fixed input preconditioning so the embedding sees unit-scale inputs at every noise level.
pub fn input_scale(t: f64) -> f64 {
    1.0 / (1.0 + t * t).sqrt()
}

/// Graph-level forward pass over a batch `z: [B, tokens, data_dim]`.
/// Returns the noise prediction and, if requested, per-sample traces.
#[allow(clippy::too_many_arguments)]
pub fn forward_graph(
    g: &mut Graph,
    p: &DitParams<Var>,
    cfg: &DitConfig,
    z: &Tensor,
    ts: &[f64],
    cs: &[usize],
    hook: Option<&MaskHook>,
    trace: bool,
) -> Result<(Var, Option<Vec<HiddenTrace>>)> {
    let (tok, d) = (cfg.tokens(), cfg.data_dim);
    let s = z.shape();
    if s.len() != 3 || s[1] != tok || s[2] != d {
        return Err(Error::shape("model_forward", s, &[0, tok, d]));
    }
    let batch = s[0];
    if ts.len() != batch || cs.len() != batch {
        return Err(Error::shape(
            "model_forward",
            &[batch],
            &[ts.len(), cs.len()],
        ));
    }
    for &t in ts {
        cfg.check_timestep(t)?;
    }
    for &c in cs {
        cfg.check_condition(c)?;
    }
    if let Some(h) = hook {
        h.validate(cfg)?;
    }

    let mut scaled = z.data().to_vec();
    for (sample, &t) in scaled.chunks_exact_mut(tok * d).zip(ts) {
        let k = input_scale(t);
        sample.iter_mut().for_each(|v| *v *= k);
    }
    let x = g.constant(Tensor::from_parts(s.to_vec(), scaled));
    let cond = embed_conditioning(g, p, cfg, ts, cs)?.cond;

    let h = g.linear(x, p.embed_w, p.embed_b)?;
    let mut h = g.add_broadcast(h, p.pos)?;

    let mut block_outs = Vec::with_capacity(if trace { cfg.num_blocks } else { 0 });
    for (k, b) in p.blocks.iter().enumerate() {
        let mask = hook.filter(|hk| hk.depth == k + 1).map(|hk| &hk.dims);
        let out = block_graph(g, b, cfg, h, cond, mask)?;
        h = out.z;
        if trace {
            block_outs.push(out);
        }
    }

    let n = g.layer_norm(h, LN_EPS)?;
    let pred = g.linear(n, p.decode_w, p.decode_b)?;

    let traces = trace.then(|| collect_traces(g, cfg, &block_outs, ts, cs));
    Ok((pred, traces))
}

fn collect_traces(
    g: &Graph,
    cfg: &DitConfig,
    outs: &[BlockOut],
    ts: &[f64],
    cs: &[usize],
) -> Vec<HiddenTrace> {
    let (tok, c) = (cfg.tokens(), cfg.hidden_size);
    (0..ts.len())
        .map(|i| HiddenTrace {
            t: ts[i],
            condition: cs[i],
            blocks: outs
                .iter()
                .map(|o| BlockTrace {
                    hidden: Tensor::from_parts(
                        vec![tok, c],
                        g.value(o.z).data()[i * tok * c..(i + 1) * tok * c].to_vec(),
                    ),
                    alpha_attn: Tensor::from_parts(vec![c], g.value(o.alpha_attn).row(i).to_vec()),
                    alpha_ff: Tensor::from_parts(vec![c], g.value(o.alpha_ff).row(i).to_vec()),
                })
                .collect(),
        })
        .collect()
}

/// Result of a batched inference call.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `[B, tokens, data_dim]` noise predictions.
    pub prediction: Tensor,
    pub traces: Option<Vec<HiddenTrace>>,
}

impl DitWeights {
    /// Batched inference with per-sample timesteps and condition ids.
    pub fn forward_batch(
        &self,
        z: &Tensor,
        ts: &[f64],
        cs: &[usize],
        hook: Option<&MaskHook>,
        trace: bool,
    ) -> Result<ForwardOutput> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let (pred, traces) = forward_graph(&mut g, &p, &self.config, z, ts, cs, hook, trace)?;
        Ok(ForwardOutput {
            prediction: g.value(pred).clone(),
            traces,
        })
    }

    /// Single-sample denoiser `D(z_t, t, c)` on `z: [tokens, data_dim]`.
    pub fn model_forward(
        &self,
        z: &Tensor,
        t: f64,
        c: usize,
        trace: bool,
        hook: Option<&MaskHook>,
    ) -> Result<(Tensor, Option<HiddenTrace>)> {
        let (tok, d) = (self.config.tokens(), self.config.data_dim);
        if z.shape() != [tok, d] {
            return Err(Error::shape("model_forward", z.shape(), &[tok, d]));
        }
        let zb = z.reshape(&[1, tok, d])?;
        let out = self.forward_batch(&zb, &[t], &[c], hook, trace)?;
        let pred = out.prediction.reshape(&[tok, d])?;
        Ok((pred, out.traces.and_then(|mut v| v.pop())))
    }

    /// Class embedding row for `c`.
    pub fn class_embedding(&self, c: usize) -> Result<Tensor> {
        self.config.check_condition(c)?;
        Tensor::new(
            vec![self.config.t_embed_dim],
            self.params.class_table.row(c).to_vec(),
        )
    }
}

/// Runs one block's modulation network on explicit embeddings.
/// Returns (attention-branch, feedforward-branch) parameters.
pub fn regress_modulation(
    t_emb: &Tensor,
    c_emb: &Tensor,
    block: &BlockParams<Tensor>,
) -> Result<(ModulationParams, ModulationParams)> {
    let in_dim = block.mod_w1.shape()[0];
    if t_emb.len() + c_emb.len() != in_dim {
        return Err(Error::shape(
            "regress_modulation",
            &[t_emb.len(), c_emb.len()],
            block.mod_w1.shape(),
        ));
    }
    let c = block.mod_b1.len();
    let mut g = Graph::new();
    let te = g.constant(t_emb.reshape(&[1, t_emb.len()])?);
    let ce = g.constant(c_emb.reshape(&[1, c_emb.len()])?);
    let cond = g.concat_last(te, ce)?;
    let bp = bind_block(&mut g, block);
    let m = modulation(&mut g, &bp, cond)?;
    let m = g.value(m).data();
    let take = |s: ModSlot| Tensor::from_parts(vec![c], m[s as usize * c..][..c].to_vec());
    Ok((
        ModulationParams {
            gamma: take(ModSlot::GammaAttn),
            beta: take(ModSlot::BetaAttn),
            alpha: take(ModSlot::AlphaAttn),
        },
        ModulationParams {
            gamma: take(ModSlot::GammaFf),
            beta: take(ModSlot::BetaFf),
            alpha: take(ModSlot::AlphaFf),
        },
    ))
}

fn bind_block(g: &mut Graph, b: &BlockParams<Tensor>) -> BlockParams<Var> {
    let mut c = |t: &Tensor| g.constant(t.clone());
    BlockParams {
        mod_w1: c(&b.mod_w1),
        mod_b1: c(&b.mod_b1),
        mod_w2: c(&b.mod_w2),
        mod_b2: c(&b.mod_b2),
        q_w: c(&b.q_w),
        q_b: c(&b.q_b),
        k_w: c(&b.k_w),
        k_b: c(&b.k_b),
        v_w: c(&b.v_w),
        v_b: c(&b.v_b),
        o_w: c(&b.o_w),
        o_b: c(&b.o_b),
        ff_w1: c(&b.ff_w1),
        ff_b1: c(&b.ff_b1),
        ff_w2: c(&b.ff_w2),
        ff_b2: c(&b.ff_b2),
    }
}

/// `(1 + gamma) * layer_norm(z) + beta` per token, `z: [tokens, C]`.
pub fn adaln_apply(z: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
    let s = z.shape();
    if s.len() != 2 || gamma.shape() != [s[1]] || beta.shape() != [s[1]] {
        return Err(Error::shape("adaln_apply", s, gamma.shape()));
    }
    let mut g = Graph::new();
    let zv = g.constant(z.reshape(&[1, s[0], s[1]])?);
    let gv = g.constant(gamma.reshape(&[1, s[1]])?);
    let bv = g.constant(beta.reshape(&[1, s[1]])?);
    let n = g.layer_norm(zv, LN_EPS)?;
    let out = g.modulate(n, gv, bv)?;
    g.value(out).reshape(s)
}

/// One block on a single sample `z: [tokens, C]`, with explicit embeddings.
pub fn block_forward(
    cfg: &DitConfig,
    z: &Tensor,
    t_emb: &Tensor,
    c_emb: &Tensor,
    block: &BlockParams<Tensor>,
    mask: Option<&BTreeSet<usize>>,
) -> Result<Tensor> {
    let s = z.shape();
    if s.len() != 2 || s[1] != cfg.hidden_size {
        return Err(Error::shape(
            "block_forward",
            s,
            &[cfg.tokens(), cfg.hidden_size],
        ));
    }
    if t_emb.len() + c_emb.len() != block.mod_w1.shape()[0] {
        return Err(Error::shape(
            "block_forward",
            &[t_emb.len(), c_emb.len()],
            block.mod_w1.shape(),
        ));
    }
    let mut g = Graph::new();
    let zv = g.constant(z.reshape(&[1, s[0], s[1]])?);
    let te = g.constant(t_emb.reshape(&[1, t_emb.len()])?);
    let ce = g.constant(c_emb.reshape(&[1, c_emb.len()])?);
    let cond = g.concat_last(te, ce)?;
    let bp = bind_block(&mut g, block);
    let out = block_graph(&mut g, &bp, cfg, zv, cond, mask)?;
    g.value(out.z).reshape(s)
}
