//! Depth-matched guidance: hint stacks, residual+FiLM injection, the soft
//! energy budget, the cosine time schedule, and gated cross-attention
//! between ROI-derived latents and U-Net features.

use crate::adapter::PyramidVals;
use crate::autodiff::{Graph, Val};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::params::{Binder, LrGroup, ParamId, ParamStore};
use crate::rng::DetRng;
use crate::tensor::{Element, Tensor};

pub struct HintBranch {
    /// Per scale: two 3x3 convs (d -> d) and a 1x1 projection (d -> block width).
    pub conv1_w: ParamId,
    pub conv1_b: ParamId,
    pub conv2_w: ParamId,
    pub conv2_b: ParamId,
    pub proj_w: ParamId,
    pub proj_b: ParamId,
    /// Heads on the normalized hint: residual (A), FiLM scale and shift.
    /// All 1x1, zero-initialized so guidance starts as a no-op.
    pub a_w: ParamId,
    pub a_b: ParamId,
    pub gamma_w: ParamId,
    pub gamma_b: ParamId,
    pub beta_w: ParamId,
    pub beta_b: ParamId,
}

pub struct MhlaBlock {
    /// Shared projector from pooled pyramid tokens (d_s) to the block width.
    pub proj_w: ParamId,
    pub proj_b: ParamId,
    /// Per head: query/key/value/output projections.
    pub heads: Vec<HeadParams>,
    pub gate_raw: ParamId,
}

pub struct HeadParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
}

pub struct GuidanceModel {
    pub hints: Vec<HintBranch>,
    pub mhla: Vec<MhlaBlock>,
}

pub fn init_guidance<E: Element>(
    cfg: &RunConfig,
    store: &mut ParamStore<E>,
    rng: &mut DetRng,
) -> GuidanceModel {
    let mut hints = Vec::new();
    let mut mhla = Vec::new();
    for si in 0..cfg.scales.len() {
        let d = cfg.channels_per_scale[si];
        let c = cfg.unet_widths[si];
        let conv_std = (2.0 / (d as f64 * 9.0)).sqrt();
        hints.push(HintBranch {
            conv1_w: store.register(
                format!("guidance.hint.s{si}.conv1.w"),
                rng.normal_tensor(vec![d, d, 3, 3], conv_std),
                LrGroup::Guidance,
            ),
            conv1_b: store.register(
                format!("guidance.hint.s{si}.conv1.b"),
                Tensor::zeros(vec![d]),
                LrGroup::Guidance,
            ),
            conv2_w: store.register(
                format!("guidance.hint.s{si}.conv2.w"),
                rng.normal_tensor(vec![d, d, 3, 3], conv_std),
                LrGroup::Guidance,
            ),
            conv2_b: store.register(
                format!("guidance.hint.s{si}.conv2.b"),
                Tensor::zeros(vec![d]),
                LrGroup::Guidance,
            ),
            proj_w: store.register(
                format!("guidance.hint.s{si}.proj.w"),
                rng.normal_tensor(vec![c, d], (2.0 / d as f64).sqrt()),
                LrGroup::Guidance,
            ),
            proj_b: store.register(
                format!("guidance.hint.s{si}.proj.b"),
                Tensor::zeros(vec![c]),
                LrGroup::Guidance,
            ),
            a_w: store.register(
                format!("guidance.hint.s{si}.a.w"),
                Tensor::zeros(vec![c, c]),
                LrGroup::Guidance,
            ),
            a_b: store.register(
                format!("guidance.hint.s{si}.a.b"),
                Tensor::zeros(vec![c]),
                LrGroup::Guidance,
            ),
            gamma_w: store.register(
                format!("guidance.hint.s{si}.gamma.w"),
                Tensor::zeros(vec![c, c]),
                LrGroup::Guidance,
            ),
            gamma_b: store.register(
                format!("guidance.hint.s{si}.gamma.b"),
                Tensor::zeros(vec![c]),
                LrGroup::Guidance,
            ),
            beta_w: store.register(
                format!("guidance.hint.s{si}.beta.w"),
                Tensor::zeros(vec![c, c]),
                LrGroup::Guidance,
            ),
            beta_b: store.register(
                format!("guidance.hint.s{si}.beta.b"),
                Tensor::zeros(vec![c]),
                LrGroup::Guidance,
            ),
        });

        let dk = c / cfg.guidance.heads;
        let proj_std = (1.0 / d as f64).sqrt();
        let head_std = (1.0 / c as f64).sqrt();
        let heads = (0..cfg.guidance.heads)
            .map(|hi| HeadParams {
                wq: store.register(
                    format!("guidance.mhla.s{si}.h{hi}.wq"),
                    rng.normal_tensor(vec![c, dk], head_std),
                    LrGroup::Guidance,
                ),
                wk: store.register(
                    format!("guidance.mhla.s{si}.h{hi}.wk"),
                    rng.normal_tensor(vec![c, dk], head_std),
                    LrGroup::Guidance,
                ),
                wv: store.register(
                    format!("guidance.mhla.s{si}.h{hi}.wv"),
                    rng.normal_tensor(vec![c, dk], head_std),
                    LrGroup::Guidance,
                ),
                wo: store.register(
                    format!("guidance.mhla.s{si}.h{hi}.wo"),
                    rng.normal_tensor(vec![dk, c], (1.0 / dk as f64).sqrt()),
                    LrGroup::Guidance,
                ),
            })
            .collect();
        mhla.push(MhlaBlock {
            proj_w: store.register(
                format!("guidance.mhla.s{si}.proj.w"),
                rng.normal_tensor(vec![d, c], proj_std),
                LrGroup::Guidance,
            ),
            proj_b: store.register(
                format!("guidance.mhla.s{si}.proj.b"),
                Tensor::zeros(vec![c]),
                LrGroup::Guidance,
            ),
            heads,
            // small initial gate keeps early training near the FiLM-only path
            gate_raw: store.register(
                format!("guidance.mhla.s{si}.gate"),
                Tensor::full(vec![1], E::from_f64(-2.0)),
                LrGroup::Guidance,
            ),
        });
    }
    GuidanceModel { hints, mhla }
}

/// Per-(record, scale) hint products.
pub struct HintVals {
    /// Normalized hint (block width channels at the wired resolution).
    pub xi: Val,
    /// A_s(xi): the residual head output.
    pub a_map: Val,
    /// tanh-bounded FiLM scale.
    pub gamma: Val,
    pub beta: Val,
    /// mean |A_s(xi)|, detached.
    pub energy: f64,
}

/// xi_s = standardize(G(Xi_s)); heads A/gamma/beta are 1x1 on the hint.
pub fn make_hint<E: Element>(
    g: &mut Graph<E>,
    store: &ParamStore<E>,
    binder: &mut Binder,
    branch: &HintBranch,
    xi_s: Val,
    gamma_bound: f64,
) -> Result<HintVals> {
    let w1 = binder.bind(g, store, branch.conv1_w);
    let b1 = binder.bind(g, store, branch.conv1_b);
    let h = g.conv2d_3x3(xi_s, w1, b1)?;
    let h = g.silu(h)?;
    let w2 = binder.bind(g, store, branch.conv2_w);
    let b2 = binder.bind(g, store, branch.conv2_b);
    let h = g.conv2d_3x3(h, w2, b2)?;
    let h = g.silu(h)?;
    let pw = binder.bind(g, store, branch.proj_w);
    let pb = binder.bind(g, store, branch.proj_b);
    let raw = g.conv2d_1x1(h, pw, pb)?;
    let xi = g.standardize(raw, 1e-6)?;

    let aw = binder.bind(g, store, branch.a_w);
    let ab = binder.bind(g, store, branch.a_b);
    let a_map = g.conv2d_1x1(xi, aw, ab)?;
    let gw = binder.bind(g, store, branch.gamma_w);
    let gb = binder.bind(g, store, branch.gamma_b);
    let gamma_raw = g.conv2d_1x1(xi, gw, gb)?;
    let gamma_t = g.tanh(gamma_raw)?;
    let gamma = g.scalar_mul(gamma_t, gamma_bound)?;
    let bw = binder.bind(g, store, branch.beta_w);
    let bb = binder.bind(g, store, branch.beta_b);
    let beta = g.conv2d_1x1(xi, bw, bb)?;

    let a_data = g.value(a_map);
    let energy =
        a_data.iter().map(|v| v.to_f64().abs()).sum::<f64>() / a_data.len() as f64;
    Ok(HintVals {
        xi,
        a_map,
        gamma,
        beta,
        energy,
    })
}

/// Residual + FiLM fusion. lambda == 0 returns the activation unchanged.
pub fn film_inject<E: Element>(
    g: &mut Graph<E>,
    h: Val,
    hint: &HintVals,
    lambda: f64,
) -> Result<Val> {
    if lambda == 0.0 {
        return Ok(h);
    }
    let scaled = g.mul(hint.gamma, h)?;
    let t = g.add(hint.a_map, scaled)?;
    let t = g.add(t, hint.beta)?;
    let t = g.scalar_mul(t, lambda)?;
    g.add(h, t)
}

/// Cosine guidance schedule over diffusion time.
pub fn lambda_schedule(lambda_max: f64, rho: f64, t: f64, total: f64) -> f64 {
    let frac = (t / total).clamp(0.0, 1.0);
    let base = 0.5 * (1.0 + (std::f64::consts::PI * frac).cos());
    lambda_max * base.powf(rho)
}

/// Rescale strengths so total injected energy stays within the soft budget.
/// Ratios between strengths are preserved.
pub fn budget_rescale(strengths: &[f64], energies: &[f64], eta: f64) -> Result<Vec<f64>> {
    if eta <= 0.0 {
        return Err(Error::Config(format!("budget eta must be > 0, got {eta}")));
    }
    debug_assert_eq!(strengths.len(), energies.len());
    let total: f64 = strengths
        .iter()
        .zip(energies.iter())
        .map(|(l, e)| l * e)
        .sum();
    if total <= eta {
        return Ok(strengths.to_vec());
    }
    let scale = eta / total;
    Ok(strengths.iter().map(|l| l * scale).collect())
}

/// Pool the kept group maps to coarse tokens, project to the block width.
/// Returns None when no group map is available (adapter bypassed).
pub fn roi_tokens<E: Element>(
    g: &mut Graph<E>,
    store: &ParamStore<E>,
    binder: &mut Binder,
    block: &MhlaBlock,
    pyr: &PyramidVals,
    si: usize,
    scale: usize,
) -> Result<Option<Val>> {
    let mut group_tokens = Vec::new();
    for gi in 0..3 {
        let Some(map) = pyr.xi_group[si][gi] else {
            continue;
        };
        let mut cur = map;
        let mut size = scale;
        while size > 4 {
            cur = g.avg_pool2(cur)?;
            size /= 2;
        }
        let d = g.shape(cur)[0];
        let flat = g.reshape(cur, vec![d, size * size])?;
        group_tokens.push(g.transpose2d(flat)?);
    }
    if group_tokens.is_empty() {
        return Ok(None);
    }
    let tokens = g.concat_channels(&group_tokens)?;
    let pw = binder.bind(g, store, block.proj_w);
    let pb = binder.bind(g, store, block.proj_b);
    Ok(Some(g.linear(tokens, pw, pb)?))
}

/// Gated cross-attention: queries from the activation map, keys/values from
/// the ROI tokens. A zero gate is a bitwise identity.
pub fn mhla_attend<E: Element>(
    g: &mut Graph<E>,
    store: &ParamStore<E>,
    binder: &mut Binder,
    block: &MhlaBlock,
    h: Val,
    tokens: Val,
    gate: Val,
) -> Result<Val> {
    if g.scalar_value(gate) == E::ZERO {
        return Ok(h);
    }
    let shape = g.shape(h).to_vec();
    let (c, hh, ww) = (shape[0], shape[1], shape[2]);
    let flat = g.reshape(h, vec![c, hh * ww])?;
    let htok = g.transpose2d(flat)?;
    let mut out: Option<Val> = None;
    for head in &block.heads {
        let wq = binder.bind(g, store, head.wq);
        let wk = binder.bind(g, store, head.wk);
        let wv = binder.bind(g, store, head.wv);
        let wo = binder.bind(g, store, head.wo);
        let dk = g.shape(wq)[1];
        let q = g.matmul(htok, wq)?;
        let k = g.matmul(tokens, wk)?;
        let v = g.matmul(tokens, wv)?;
        let kt = g.transpose2d(k)?;
        let scores = g.matmul(q, kt)?;
        let scaled = g.scalar_mul(scores, 1.0 / (dk as f64).sqrt())?;
        let attn = g.softmax(scaled)?;
        let ctx = g.matmul(attn, v)?;
        let contrib = g.matmul(ctx, wo)?;
        out = Some(match out {
            Some(acc) => g.add(acc, contrib)?,
            None => contrib,
        });
    }
    let out_tok = out.expect("at least one head");
    let back = g.transpose2d(out_tok)?;
    let map = g.reshape(back, vec![c, hh, ww])?;
    let gated = g.scale_by(map, gate)?;
    g.add(h, gated)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_closed_forms() {
        let (lmax, t_total) = (0.8, 1000.0);
        for &rho in &[0.5, 1.0, 2.0] {
            assert!((lambda_schedule(lmax, rho, 0.0, t_total) - lmax).abs() < 1e-12);
            assert!(lambda_schedule(lmax, rho, t_total, t_total).abs() < 1e-12);
            let mid = lambda_schedule(lmax, rho, t_total / 2.0, t_total);
            assert!((mid - lmax * 0.5f64.powf(rho)).abs() < 1e-12);
        }
        // clip saturates outside [0, T]
        assert!((lambda_schedule(0.7, 1.0, -5.0, 10.0) - 0.7).abs() < 1e-12);
        assert!(lambda_schedule(0.7, 1.0, 25.0, 10.0).abs() < 1e-12);
    }

    #[test]
    fn schedule_monotone_nonincreasing() {
        for &rho in &[0.25, 0.5, 1.0, 1.7, 3.0] {
            let mut prev = f64::INFINITY;
            for i in 0..=1000 {
                let v = lambda_schedule(1.0, rho, i as f64, 1000.0);
                assert!(v <= prev + 1e-15, "rho {rho}: not nonincreasing at {i}");
                prev = v;
            }
        }
    }

    #[test]
    fn budget_identity_below_and_uniform_rescale_above() {
        let strengths = vec![0.8, 0.6, 0.5, 0.5];
        let energies = vec![0.1, 0.1, 0.1, 0.1];
        let out = budget_rescale(&strengths, &energies, 10.0).unwrap();
        assert_eq!(out, strengths);

        // B = 2 eta -> every strength halved
        let b: f64 = strengths
            .iter()
            .zip(energies.iter())
            .map(|(l, e)| l * e)
            .sum();
        let out = budget_rescale(&strengths, &energies, b / 2.0).unwrap();
        for (o, s) in out.iter().zip(strengths.iter()) {
            assert!((o - s / 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn budget_requires_positive_eta() {
        assert!(budget_rescale(&[0.5], &[1.0], 0.0).is_err());
    }
}
