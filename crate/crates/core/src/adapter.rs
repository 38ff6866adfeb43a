//! ROI adapter: scale-space mask pyramid, per-(ROI, scale) gating,
//! per-group channel mixing, and the nonnegative group aggregation that
//! produces the cortical pyramid, plus its regularizers.

use crate::autodiff::{kernels, Graph, Val};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::params::{Binder, LrGroup, ParamId, ParamStore};
use crate::rng::DetRng;
use crate::roi::SubjectRecord;
use crate::tensor::{Element, Tensor};

/// Which ROI groups stay active in the aggregation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GroupMask(pub [bool; 3]);

impl GroupMask {
    pub fn all() -> Self {
        GroupMask([true; 3])
    }

    pub fn from_tags(tags: &str) -> Result<Self> {
        let mut keep = [false; 3];
        for c in tags.chars() {
            match c {
                'e' => keep[0] = true,
                'm' => keep[1] = true,
                'l' => keep[2] = true,
                other => {
                    return Err(Error::Config(format!(
                        "unknown group tag {other:?} in {tags:?}"
                    )))
                }
            }
        }
        if keep.iter().all(|k| !k) {
            return Err(Error::Config("group keep-set must be nonempty".to_string()));
        }
        Ok(GroupMask(keep))
    }
}

/// Per-record constants: the blurred/downsampled mask stacks and the
/// amplitude vector. Everything here is data, not parameters.
pub struct RecordCond<E: Element> {
    /// Per scale: `[R_total, s, s]` mask stack.
    pub masks: Vec<Tensor<E>>,
    /// `[R_total]` amplitudes in group order.
    pub amplitudes: Vec<E>,
    /// (start, len) per group in ROI order.
    pub spans: [(usize, usize); 3],
    pub label: usize,
    /// [3, H, W] stimulus in [0,1].
    pub stimulus: Tensor<E>,
}

/// Blur, downsample and clip one binary mask to every scale.
/// The blur width scales inversely with resolution: sigma0 * (s_max / s).
pub fn build_scale_space<E: Element>(
    mask: &Tensor<f32>,
    scales: &[usize],
    sigma0: f64,
    bandpass: bool,
) -> Result<Vec<Tensor<E>>> {
    let (h, w) = (mask.shape()[0], mask.shape()[1]);
    let top = *scales.last().expect("nonempty scales");
    if h != top || w != top {
        return Err(Error::Dim {
            op: "build_scale_space",
            lhs: vec![h, w],
            rhs: vec![top, top],
        });
    }
    if mask.data().iter().all(|&v| v == 0.0) {
        return Err(Error::DegenerateRoi("empty mask in scale space".to_string()));
    }
    let base: Vec<E> = mask.data().iter().map(|&v| E::from_f64(v as f64)).collect();
    let mut out = Vec::with_capacity(scales.len());
    for (si, &s) in scales.iter().enumerate() {
        let sigma = sigma0 * (top as f64 / s as f64);
        let interior = si > 0 && si + 1 < scales.len();
        let blurred = if bandpass && interior {
            let narrow = kernels::blur_fwd(&base, 1, top, top, sigma);
            let wide = kernels::blur_fwd(&base, 1, top, top, 2.0 * sigma);
            narrow
                .iter()
                .zip(wide.iter())
                .map(|(a, b)| *a - *b)
                .collect()
        } else {
            kernels::blur_fwd(&base, 1, top, top, sigma)
        };
        let mut cur = blurred;
        let mut cur_size = top;
        while cur_size > s {
            cur = kernels::avg_pool2_fwd(&cur, 1, cur_size, cur_size);
            cur_size /= 2;
        }
        for v in cur.iter_mut() {
            *v = (*v).max(E::ZERO).min(E::ONE);
        }
        out.push(Tensor::from_vec(vec![s, s], cur)?);
    }
    Ok(out)
}

/// Precompute the per-record conditioning constants.
pub fn build_record_cond<E: Element>(rec: &SubjectRecord, cfg: &RunConfig) -> Result<RecordCond<E>> {
    let spans = rec.group_spans()?;
    let r_total = rec.rois.len();
    let mut per_scale: Vec<Vec<E>> = cfg.scales.iter().map(|_| Vec::new()).collect();
    for roi in &rec.rois {
        let maps = build_scale_space::<E>(&roi.mask, &cfg.scales, cfg.sigma0, cfg.bandpass)?;
        for (si, m) in maps.into_iter().enumerate() {
            per_scale[si].extend_from_slice(m.data());
        }
    }
    let masks = per_scale
        .into_iter()
        .zip(cfg.scales.iter())
        .map(|(data, &s)| Tensor::from_vec(vec![r_total, s, s], data))
        .collect::<Result<Vec<_>>>()?;
    Ok(RecordCond {
        masks,
        amplitudes: rec
            .rois
            .iter()
            .map(|r| E::from_f64(r.amplitude as f64))
            .collect(),
        spans,
        label: rec.label,
        stimulus: rec.stimulus.cast(),
    })
}

/// Parameter handles for the adapter.
pub struct AdapterModel {
    /// Per scale: raw gate logits `[R_total]`; gates are sigmoid(raw).
    pub gates_raw: Vec<ParamId>,
    /// Per scale: raw alpha `[3]`; coefficients are softplus(raw).
    pub alpha_raw: Vec<ParamId>,
    /// Per scale, per group: 1x1 mixer (conv R_g -> d_s, silu, conv d_s -> d_s).
    pub mixers: Vec<Vec<MixerParams>>,
    /// Depth prior rows per scale (sums to 1 over groups).
    pub prior: Vec<[f64; 3]>,
}

pub struct MixerParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

/// prior(g, s) = softmax_g( -|rank(g) - rank(s)| ) with early matched to the
/// shallowest (largest) scale and late to the deepest.
pub fn depth_prior(n_scales: usize) -> Vec<[f64; 3]> {
    let top_rank = (n_scales - 1) as f64;
    let group_rank = [0.0, top_rank / 2.0, top_rank];
    (0..n_scales)
        .map(|si| {
            // ascending scales: si = 0 is deepest -> rank n-1
            let srank = (n_scales - 1 - si) as f64;
            let logits: Vec<f64> = group_rank.iter().map(|gr| -(gr - srank).abs()).collect();
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
            let z: f64 = exps.iter().sum();
            [exps[0] / z, exps[1] / z, exps[2] / z]
        })
        .collect()
}

pub fn init_adapter<E: Element>(
    cfg: &RunConfig,
    store: &mut ParamStore<E>,
    rng: &mut DetRng,
) -> AdapterModel {
    let r_total = cfg.layout.roi_count();
    let group_sizes = [
        cfg.layout.early_count(),
        cfg.layout.mid_count,
        cfg.layout.categories,
    ];
    // softplus(raw) = 1/3  =>  raw = ln(e^{1/3} - 1)
    let alpha0 = ((1.0f64 / 3.0).exp() - 1.0).ln();
    let mut gates_raw = Vec::new();
    let mut alpha_raw = Vec::new();
    let mut mixers = Vec::new();
    for (si, _) in cfg.scales.iter().enumerate() {
        gates_raw.push(store.register(
            format!("adapter.gates.s{si}"),
            Tensor::zeros(vec![r_total]),
            LrGroup::Guidance,
        ));
        alpha_raw.push(store.register(
            format!("adapter.alpha.s{si}"),
            Tensor::full(vec![3], E::from_f64(alpha0)),
            LrGroup::Guidance,
        ));
        let d = cfg.channels_per_scale[si];
        let mut row = Vec::new();
        for (gi, &rg) in group_sizes.iter().enumerate() {
            let std1 = (2.0 / rg as f64).sqrt();
            let std2 = (2.0 / d as f64).sqrt();
            row.push(MixerParams {
                w1: store.register(
                    format!("adapter.mixer.s{si}.g{gi}.w1"),
                    rng.normal_tensor(vec![d, rg], std1),
                    LrGroup::Guidance,
                ),
                b1: store.register(
                    format!("adapter.mixer.s{si}.g{gi}.b1"),
                    Tensor::zeros(vec![d]),
                    LrGroup::Guidance,
                ),
                w2: store.register(
                    format!("adapter.mixer.s{si}.g{gi}.w2"),
                    rng.normal_tensor(vec![d, d], std2),
                    LrGroup::Guidance,
                ),
                b2: store.register(
                    format!("adapter.mixer.s{si}.g{gi}.b2"),
                    Tensor::zeros(vec![d]),
                    LrGroup::Guidance,
                ),
            });
        }
        mixers.push(row);
    }
    AdapterModel {
        gates_raw,
        alpha_raw,
        mixers,
        prior: depth_prior(cfg.scales.len()),
    }
}

/// Forward products of the adapter for one record.
pub struct PyramidVals {
    /// Per scale: aggregated map (d_s, s, s).
    pub xi: Vec<Val>,
    /// Per scale, per group: mixed group map; None when the adapter is
    /// bypassed or the group is ablated.
    pub xi_group: Vec<[Option<Val>; 3]>,
    /// Per scale: masked softplus alpha vector `[3]`.
    pub alphas: Vec<Option<Val>>,
    /// Per scale: sigmoid gate vector `[R_total]`.
    pub gates: Vec<Option<Val>>,
}

/// Run the adapter on one record's conditioning constants.
///
/// With `cfg.variant.adapter == false` the gates/mixers/aggregation are
/// bypassed: each scale's map is the amplitude-weighted mean of the mask
/// stack, replicated across d_s channels (the "ControlNet-only" variant).
pub fn adapter_forward<E: Element>(
    g: &mut Graph<E>,
    store: &ParamStore<E>,
    binder: &mut Binder,
    model: &AdapterModel,
    cond: &RecordCond<E>,
    cfg: &RunConfig,
    keep: GroupMask,
) -> Result<PyramidVals> {
    let n = cfg.scales.len();
    let r_total = cond.amplitudes.len();
    let mut xi = Vec::with_capacity(n);
    let mut xi_group = Vec::with_capacity(n);
    let mut alphas = Vec::with_capacity(n);
    let mut gates = Vec::with_capacity(n);

    for si in 0..n {
        let s = cfg.scales[si];
        let mask_stack = g.constant(cond.masks[si].clone());
        if !cfg.variant.adapter {
            // raw fused map, channel-replicated
            let mut fused = Tensor::<E>::zeros(vec![1, s, s]);
            let plane = s * s;
            for r in 0..r_total {
                let a = cond.amplitudes[r];
                let src = &cond.masks[si].data()[r * plane..(r + 1) * plane];
                for (dst, v) in fused.data_mut().iter_mut().zip(src.iter()) {
                    *dst += a * *v;
                }
            }
            let inv = E::from_f64(1.0 / r_total as f64);
            for v in fused.data_mut() {
                *v *= inv;
            }
            let one = g.constant(fused);
            let d = cfg.channels_per_scale[si];
            let rep = g.concat_channels(&vec![one; d])?;
            xi.push(rep);
            xi_group.push([None, None, None]);
            alphas.push(None);
            gates.push(None);
            continue;
        }

        let w_raw = binder.bind(g, store, model.gates_raw[si]);
        let w = g.sigmoid(w_raw)?;
        let a_raw = binder.bind(g, store, model.alpha_raw[si]);
        let a_sp = g.softplus(a_raw)?;
        let keep_mask: Vec<E> = keep
            .0
            .iter()
            .map(|&k| if k { E::ONE } else { E::ZERO })
            .collect();
        let keep_const = g.constant(Tensor::from_vec(vec![3], keep_mask)?);
        let alpha = g.mul(a_sp, keep_const)?;

        let mut groups: [Option<Val>; 3] = [None, None, None];
        let mut terms: Vec<Val> = Vec::new();
        for gi in 0..3 {
            let (start, len) = cond.spans[gi];
            if len == 0 {
                return Err(Error::Wiring(format!("group {gi} has no ROIs")));
            }
            if !keep.0[gi] {
                continue;
            }
            // scaled maps c_{r,s} = w_{r,s} * a_r * m_{r,s}
            let mut scaled = Vec::with_capacity(len);
            for r in start..start + len {
                let m_r = g.slice_rows(mask_stack, r, 1)?;
                let w_r = g.slice_rows(w, r, 1)?;
                let gated = g.scale_by(m_r, w_r)?;
                let c_r = g.scalar_mul(gated, cond.amplitudes[r].to_f64())?;
                scaled.push(c_r);
            }
            let stack = g.concat_channels(&scaled)?;
            let mix = &model.mixers[si][gi];
            let w1 = binder.bind(g, store, mix.w1);
            let b1 = binder.bind(g, store, mix.b1);
            let w2 = binder.bind(g, store, mix.w2);
            let b2 = binder.bind(g, store, mix.b2);
            let h1 = g.conv2d_1x1(stack, w1, b1)?;
            let h1 = g.silu(h1)?;
            let xi_g = g.conv2d_1x1(h1, w2, b2)?;
            groups[gi] = Some(xi_g);
            let alpha_g = g.slice_rows(alpha, gi, 1)?;
            terms.push(g.scale_by(xi_g, alpha_g)?);
        }
        let mut total = terms[0];
        for t in &terms[1..] {
            total = g.add(total, *t)?;
        }
        xi.push(total);
        xi_group.push(groups);
        alphas.push(Some(alpha));
        gates.push(Some(w));
    }
    Ok(PyramidVals {
        xi,
        xi_group,
        alphas,
        gates,
    })
}

/// Adapter regularizer: l2 on alpha + KL(group gate mass || depth prior)
/// + optional TV on the aggregated maps. Returns a scalar node.
pub fn adapter_regularizers<E: Element>(
    g: &mut Graph<E>,
    model: &AdapterModel,
    pyr: &PyramidVals,
    cond: &RecordCond<E>,
    cfg: &RunConfig,
) -> Result<Val> {
    let mut total = g.constant(Tensor::scalar(E::ZERO));
    if !cfg.variant.adapter {
        return Ok(total);
    }
    for si in 0..cfg.scales.len() {
        if cfg.reg.l2_alpha > 0.0 {
            if let Some(alpha) = pyr.alphas[si] {
                let sq = g.mul(alpha, alpha)?;
                let s = g.sum(sq)?;
                let term = g.scalar_mul(s, cfg.reg.l2_alpha)?;
                total = g.add(total, term)?;
            }
        }
        if cfg.reg.kl_gates > 0.0 {
            if let Some(w) = pyr.gates[si] {
                let prior = model.prior[si];
                let mut mass = Vec::with_capacity(3);
                for gi in 0..3 {
                    let (start, len) = cond.spans[gi];
                    let slice = g.slice_rows(w, start, len)?;
                    mass.push(g.sum(slice)?);
                }
                let m01 = g.add(mass[0], mass[1])?;
                let m_tot = g.add(m01, mass[2])?;
                let mut kl = g.constant(Tensor::scalar(E::ZERO));
                for gi in 0..3 {
                    let p = g.div(mass[gi], m_tot)?;
                    let logp = g.log(p)?;
                    let log_prior = g.constant(Tensor::scalar(E::from_f64(prior[gi].ln())));
                    let diff = g.sub(logp, log_prior)?;
                    let term = g.mul(p, diff)?;
                    kl = g.add(kl, term)?;
                }
                let weighted = g.scalar_mul(kl, cfg.reg.kl_gates)?;
                total = g.add(total, weighted)?;
            }
        }
        if cfg.reg.tv > 0.0 {
            let tv = g.tv2d(pyr.xi[si])?;
            let term = g.scalar_mul(tv, cfg.reg.tv)?;
            total = g.add(total, term)?;
        }
    }
    Ok(total)
}

/// Optional L1 sparsity penalty over the pyramid maps (mean absolute value
/// per scale, summed over scales).
pub fn sparsity_penalty<E: Element>(
    g: &mut Graph<E>,
    pyr: &PyramidVals,
    weight: f64,
) -> Result<Val> {
    let mut total = g.constant(Tensor::scalar(E::ZERO));
    if weight == 0.0 {
        return Ok(total);
    }
    for &xi in &pyr.xi {
        let l1 = g.l1_norm(xi)?;
        let n = g.value(xi).len() as f64;
        let term = g.scalar_mul(l1, weight / n)?;
        total = g.add(total, term)?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use crate::synth::synth_record;

    fn small_cfg() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.validate().unwrap();
        cfg
    }

    #[test]
    fn all_ones_mask_stays_ones_at_every_scale() {
        let cfg = small_cfg();
        let mask = Tensor::<f32>::full(vec![64, 64], 1.0);
        let maps = build_scale_space::<f64>(&mask, &cfg.scales, 0.8, false).unwrap();
        for m in maps {
            for &v in m.data() {
                assert!((v - 1.0).abs() < 1e-9, "expected 1.0, got {v}");
            }
        }
    }

    #[test]
    fn bandpass_of_constant_is_zero_at_interior_scales() {
        let cfg = small_cfg();
        let mask = Tensor::<f32>::full(vec![64, 64], 1.0);
        let maps = build_scale_space::<f64>(&mask, &cfg.scales, 0.8, true).unwrap();
        // ascending scales: indices 1 and 2 are interior
        for si in [1usize, 2] {
            for &v in maps[si].data() {
                assert!(v.abs() < 1e-9);
            }
        }
        for &v in maps[3].data() {
            assert!((v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn single_pixel_mass_preserved_at_interior() {
        let cfg = small_cfg();
        let mut m = vec![0.0f32; 64 * 64];
        m[32 * 64 + 32] = 1.0;
        let mask = Tensor::from_vec(vec![64, 64], m).unwrap();
        let maps = build_scale_space::<f64>(&mask, &cfg.scales, 0.5, false).unwrap();
        for (si, &s) in cfg.scales.iter().enumerate() {
            let factor = (64 / s) as f64;
            let mass: f64 = maps[si].data().iter().sum::<f64>() * factor * factor;
            assert!(
                (mass - 1.0).abs() < 0.02,
                "scale {s}: mass {mass} deviates more than 2%"
            );
        }
    }

    #[test]
    fn empty_mask_is_degenerate() {
        let cfg = small_cfg();
        let mask = Tensor::<f32>::zeros(vec![64, 64]);
        assert!(matches!(
            build_scale_space::<f64>(&mask, &cfg.scales, 0.5, false),
            Err(Error::DegenerateRoi(_))
        ));
    }

    #[test]
    fn prior_rows_sum_to_one_and_bias_matches_depth() {
        let prior = depth_prior(4);
        for row in &prior {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        // deepest scale (index 0) favors late; shallowest favors early
        assert!(prior[0][2] > prior[0][0]);
        assert!(prior[3][0] > prior[3][2]);
    }

    #[test]
    fn aggregation_bounds_hold() {
        let cfg = small_cfg();
        let rec = synth_record(3, 0, &cfg.layout);
        let cond = build_record_cond::<f64>(&rec, &cfg).unwrap();
        let mut store = ParamStore::new();
        let mut rng = DetRng::new(1);
        let model = init_adapter(&cfg, &mut store, &mut rng);
        let mut g = Graph::new();
        let mut binder = Binder::new();
        let pyr = adapter_forward(
            &mut g,
            &store,
            &mut binder,
            &model,
            &cond,
            &cfg,
            GroupMask::all(),
        )
        .unwrap();
        for si in 0..cfg.scales.len() {
            let alpha = pyr.alphas[si].unwrap();
            for &a in g.value(alpha) {
                assert!(a >= 0.0);
            }
            let gates = pyr.gates[si].unwrap();
            for &w in g.value(gates) {
                assert!((0.0..=1.0).contains(&w));
            }
        }
    }
}
