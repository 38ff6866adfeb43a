//! Toy latent-diffusion U-Net with one encoder/decoder block per pyramid
//! scale. Guidance is injected right after each wired block on both paths.
//!
//! Level indexing follows the config's ascending `scales`: index 0 is the
//! deepest (coarsest) level, the last index the shallowest. The input and
//! output convs belong to the shallowest blocks, the middle block and the
//! timestep embedding belong to no wired depth and stay frozen in both
//! training stages.

use crate::autodiff::{Graph, Val};
use crate::config::RunConfig;
use crate::error::Result;
use crate::guidance::{film_inject, mhla_attend, GuidanceModel, HintVals};
use crate::params::{Binder, LrGroup, ParamId, ParamStore};
use crate::rng::DetRng;
use crate::tensor::{Element, Tensor};

pub const TIME_EMBED_BASE: usize = 32;
pub const TIME_EMBED_DIM: usize = 64;

pub struct ResBlockParams {
    pub conv1_w: ParamId,
    pub conv1_b: ParamId,
    pub temb_w: ParamId,
    pub temb_b: ParamId,
    pub conv2_w: ParamId,
    pub conv2_b: ParamId,
}

pub struct EncLevel {
    /// 1x1 channel change applied after pooling into this level
    /// (absent at the shallowest level).
    pub chconv: Option<(ParamId, ParamId)>,
    pub res: ResBlockParams,
}

pub struct DecLevel {
    /// 1x1 merge после skip concatenation.
    pub merge_w: ParamId,
    pub merge_b: ParamId,
    pub res: ResBlockParams,
}

pub struct UNetModel {
    pub in_w: ParamId,
    pub in_b: ParamId,
    pub enc: Vec<EncLevel>,
    pub mid: ResBlockParams,
    pub dec: Vec<DecLevel>,
    pub out_w: ParamId,
    pub out_b: ParamId,
    pub temb1_w: ParamId,
    pub temb1_b: ParamId,
    pub temb2_w: ParamId,
    pub temb2_b: ParamId,
}

fn res_block<E: Element>(
    store: &mut ParamStore<E>,
    rng: &mut DetRng,
    prefix: &str,
    width: usize,
) -> ResBlockParams {
    let conv_std = (2.0 / (width as f64 * 9.0)).sqrt();
    ResBlockParams {
        conv1_w: store.register(
            format!("{prefix}.conv1.w"),
            rng.normal_tensor(vec![width, width, 3, 3], conv_std),
            LrGroup::Backbone,
        ),
        conv1_b: store.register(
            format!("{prefix}.conv1.b"),
            Tensor::zeros(vec![width]),
            LrGroup::Backbone,
        ),
        temb_w: store.register(
            format!("{prefix}.temb.w"),
            rng.normal_tensor(vec![TIME_EMBED_DIM, width], (1.0 / TIME_EMBED_DIM as f64).sqrt()),
            LrGroup::Backbone,
        ),
        temb_b: store.register(
            format!("{prefix}.temb.b"),
            Tensor::zeros(vec![width]),
            LrGroup::Backbone,
        ),
        // zero-init: each residual block starts as the identity, so the
        // frozen random backbone does not scramble injected guidance
        conv2_w: store.register(
            format!("{prefix}.conv2.w"),
            Tensor::zeros(vec![width, width]),
            LrGroup::Backbone,
        ),
        conv2_b: store.register(
            format!("{prefix}.conv2.b"),
            Tensor::zeros(vec![width]),
            LrGroup::Backbone,
        ),
    }
}

pub fn init_unet<E: Element>(
    cfg: &RunConfig,
    store: &mut ParamStore<E>,
    rng: &mut DetRng,
) -> UNetModel {
    let n = cfg.scales.len();
    let shallow = n - 1;
    let w_shallow = cfg.unet_widths[shallow];
    let lc = cfg.latent_channels;
    let in_w = store.register(
        format!("unet.enc{shallow}.in.w"),
        rng.normal_tensor(vec![w_shallow, lc, 3, 3], (2.0 / (lc as f64 * 9.0)).sqrt()),
        LrGroup::Backbone,
    );
    let in_b = store.register(
        format!("unet.enc{shallow}.in.b"),
        Tensor::zeros(vec![w_shallow]),
        LrGroup::Backbone,
    );
    let mut enc = Vec::with_capacity(n);
    for si in 0..n {
        let width = cfg.unet_widths[si];
        let chconv = if si < shallow {
            let from = cfg.unet_widths[si + 1];
            Some((
                store.register(
                    format!("unet.enc{si}.ch.w"),
                    rng.normal_tensor(vec![width, from], (2.0 / from as f64).sqrt()),
                    LrGroup::Backbone,
                ),
                store.register(
                    format!("unet.enc{si}.ch.b"),
                    Tensor::zeros(vec![width]),
                    LrGroup::Backbone,
                ),
            ))
        } else {
            None
        };
        enc.push(EncLevel {
            chconv,
            res: res_block(store, rng, &format!("unet.enc{si}.res"), width),
        });
    }
    let mid = res_block(store, rng, "unet.mid.res", cfg.unet_widths[0]);
    let mut dec = Vec::with_capacity(n);
    for si in 0..n {
        let width = cfg.unet_widths[si];
        let carry = if si == 0 {
            cfg.unet_widths[0]
        } else {
            cfg.unet_widths[si - 1]
        };
        let merge_in = carry + width;
        dec.push(DecLevel {
            merge_w: store.register(
                format!("unet.dec{si}.merge.w"),
                rng.normal_tensor(vec![width, merge_in], (2.0 / merge_in as f64).sqrt()),
                LrGroup::Backbone,
            ),
            merge_b: store.register(
                format!("unet.dec{si}.merge.b"),
                Tensor::zeros(vec![width]),
                LrGroup::Backbone,
            ),
            res: res_block(store, rng, &format!("unet.dec{si}.res"), width),
        });
    }
    let out_w = store.register(
        format!("unet.dec{shallow}.out.w"),
        rng.normal_tensor(
            vec![lc, w_shallow, 3, 3],
            (1.0 / (w_shallow as f64 * 9.0)).sqrt(),
        ),
        LrGroup::Backbone,
    );
    let out_b = store.register(
        format!("unet.dec{shallow}.out.b"),
        Tensor::zeros(vec![lc]),
        LrGroup::Backbone,
    );
    let temb1_w = store.register(
        "unet.temb.l1.w",
        rng.normal_tensor(
            vec![TIME_EMBED_BASE, TIME_EMBED_DIM],
            (2.0 / TIME_EMBED_BASE as f64).sqrt(),
        ),
        LrGroup::Backbone,
    );
    let temb1_b = store.register(
        "unet.temb.l1.b",
        Tensor::zeros(vec![TIME_EMBED_DIM]),
        LrGroup::Backbone,
    );
    let temb2_w = store.register(
        "unet.temb.l2.w",
        rng.normal_tensor(
            vec![TIME_EMBED_DIM, TIME_EMBED_DIM],
            (2.0 / TIME_EMBED_DIM as f64).sqrt(),
        ),
        LrGroup::Backbone,
    );
    let temb2_b = store.register(
        "unet.temb.l2.b",
        Tensor::zeros(vec![TIME_EMBED_DIM]),
        LrGroup::Backbone,
    );
    UNetModel {
        in_w,
        in_b,
        enc,
        mid,
        dec,
        out_w,
        out_b,
        temb1_w,
        temb1_b,
        temb2_w,
        temb2_b,
    }
}

/// Sinusoidal features of a timestep, `[1, TIME_EMBED_BASE]`.
pub fn time_features<E: Element>(t: usize) -> Tensor<E> {
    let half = TIME_EMBED_BASE / 2;
    let mut data = Vec::with_capacity(TIME_EMBED_BASE);
    for i in 0..half {
        let omega = (-(10000.0f64.ln()) * i as f64 / (half - 1) as f64).exp();
        data.push(E::from_f64((t as f64 * omega).sin()));
    }
    for i in 0..half {
        let omega = (-(10000.0f64.ln()) * i as f64 / (half - 1) as f64).exp();
        data.push(E::from_f64((t as f64 * omega).cos()));
    }
    Tensor::from_vec(vec![1, TIME_EMBED_BASE], data).expect("time features")
}

/// Per-scale injection inputs for one denoising evaluation.
pub struct Injections<'a> {
    /// Per scale index.
    pub hints: &'a [Option<HintVals>],
    pub tokens: &'a [Option<Val>],
    /// Scheduled and budget-rescaled strengths.
    pub lambdas: &'a [f64],
    /// MHLA gate node per scale; None skips attention.
    pub gates: &'a [Option<Val>],
    pub film_first: bool,
}

#[allow(clippy::too_many_arguments)]
fn inject<E: Element>(
    g: &mut Graph<E>,
    store: &ParamStore<E>,
    binder: &mut Binder,
    gmodel: &GuidanceModel,
    inj: &Injections,
    h: Val,
    si: usize,
) -> Result<Val> {
    let film = |g: &mut Graph<E>, h: Val| -> Result<Val> {
        match &inj.hints[si] {
            Some(hint) => film_inject(g, h, hint, inj.lambdas[si]),
            None => Ok(h),
        }
    };
    let attn = |g: &mut Graph<E>, binder: &mut Binder, h: Val| -> Result<Val> {
        match (inj.tokens[si], inj.gates[si]) {
            (Some(tok), Some(gate)) => {
                mhla_attend(g, store, binder, &gmodel.mhla[si], h, tok, gate)
            }
            _ => Ok(h),
        }
    };
    if inj.film_first {
        let h = film(g, h)?;
        attn(g, binder, h)
    } else {
        let h = attn(g, binder, h)?;
        film(g, h)
    }
}

fn res_forward<E: Element>(
    g: &mut Graph<E>,
    store: &ParamStore<E>,
    binder: &mut Binder,
    block: &ResBlockParams,
    h: Val,
    temb: Val,
) -> Result<Val> {
    let n = g.layer_norm_channels(h, 1e-5)?;
    let a = g.silu(n)?;
    let w1 = binder.bind(g, store, block.conv1_w);
    let b1 = binder.bind(g, store, block.conv1_b);
    let a = g.conv2d_3x3(a, w1, b1)?;
    let tw = binder.bind(g, store, block.temb_w);
    let tb = binder.bind(g, store, block.temb_b);
    let tproj = g.linear(temb, tw, tb)?;
    let width = g.shape(tproj)[1];
    let tvec = g.reshape(tproj, vec![width])?;
    let a = g.bias_channels(a, tvec)?;
    let a = g.silu(a)?;
    let w2 = binder.bind(g, store, block.conv2_w);
    let b2 = binder.bind(g, store, block.conv2_b);
    let a = g.conv2d_1x1(a, w2, b2)?;
    g.add(h, a)
}

/// Full denoiser evaluation: predicts the noise from `x_t`, `t`, and the
/// injected conditioning.
#[allow(clippy::too_many_arguments)]
pub fn unet_forward<E: Element>(
    g: &mut Graph<E>,
    store: &ParamStore<E>,
    binder: &mut Binder,
    model: &UNetModel,
    gmodel: &GuidanceModel,
    inj: &Injections,
    x: Val,
    t: usize,
) -> Result<Val> {
    let n = model.enc.len();
    let shallow = n - 1;

    let tfeat = g.constant(time_features::<E>(t));
    let t1w = binder.bind(g, store, model.temb1_w);
    let t1b = binder.bind(g, store, model.temb1_b);
    let temb = g.linear(tfeat, t1w, t1b)?;
    let temb = g.silu(temb)?;
    let t2w = binder.bind(g, store, model.temb2_w);
    let t2b = binder.bind(g, store, model.temb2_b);
    let temb = g.linear(temb, t2w, t2b)?;

    let iw = binder.bind(g, store, model.in_w);
    let ib = binder.bind(g, store, model.in_b);
    let mut h = g.conv2d_3x3(x, iw, ib)?;

    let mut skips: Vec<Val> = Vec::with_capacity(n);
    for si in (0..n).rev() {
        if si != shallow {
            h = g.avg_pool2(h)?;
            let (cw, cb) = model.enc[si].chconv.as_ref().expect("chconv below top");
            let cwv = binder.bind(g, store, *cw);
            let cbv = binder.bind(g, store, *cb);
            h = g.conv2d_1x1(h, cwv, cbv)?;
        }
        h = res_forward(g, store, binder, &model.enc[si].res, h, temb)?;
        h = inject(g, store, binder, gmodel, inj, h, si)?;
        skips.push(h);
    }

    h = res_forward(g, store, binder, &model.mid, h, temb)?;

    for si in 0..n {
        let skip = skips.pop().expect("one skip per level");
        let cat = g.concat_channels(&[h, skip])?;
        let mw = binder.bind(g, store, model.dec[si].merge_w);
        let mb = binder.bind(g, store, model.dec[si].merge_b);
        h = g.conv2d_1x1(cat, mw, mb)?;
        h = res_forward(g, store, binder, &model.dec[si].res, h, temb)?;
        h = inject(g, store, binder, gmodel, inj, h, si)?;
        if si != shallow {
            h = g.nearest_upsample2(h)?;
        }
    }

    let ow = binder.bind(g, store, model.out_w);
    let ob = binder.bind(g, store, model.out_b);
    g.conv2d_3x3(h, ow, ob)
}

/// RGB -> latent: the three channels plus a luminance channel, affinely
/// mapped to [-1, 1]. Fixed (untrained) and invertible through the first
/// three channels.
pub fn lift<E: Element>(img: &Tensor<E>) -> Tensor<E> {
    let s = img.shape();
    let plane = s[1] * s[2];
    let d = img.data();
    let mut out = Vec::with_capacity(4 * plane);
    let two = E::from_f64(2.0);
    for c in 0..3 {
        for p in 0..plane {
            out.push(two * d[c * plane + p] - E::ONE);
        }
    }
    for p in 0..plane {
        let luma = E::from_f64(0.299) * d[p]
            + E::from_f64(0.587) * d[plane + p]
            + E::from_f64(0.114) * d[2 * plane + p];
        out.push(two * luma - E::ONE);
    }
    Tensor::from_vec(vec![4, s[1], s[2]], out).expect("lift shape")
}

/// Latent -> RGB in [0, 1] (drops the luminance channel).
pub fn unlift<E: Element>(latent: &Tensor<E>) -> Tensor<E> {
    let s = latent.shape();
    let plane = s[1] * s[2];
    let half = E::from_f64(0.5);
    let data: Vec<E> = latent.data()[..3 * plane]
        .iter()
        .map(|&v| ((v + E::ONE) * half).max(E::ZERO).min(E::ONE))
        .collect();
    Tensor::from_vec(vec![3, s[1], s[2]], data).expect("unlift shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lift_unlift_round_trips() {
        let mut rng = DetRng::new(3);
        let img: Tensor<f64> = rng.uniform_tensor(vec![3, 8, 8], 0.0, 1.0);
        let lat = lift(&img);
        assert_eq!(lat.shape(), &[4, 8, 8]);
        for &v in lat.data() {
            assert!((-1.0..=1.0).contains(&v));
        }
        let back = unlift(&lat);
        for (a, b) in img.data().iter().zip(back.data().iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn time_features_are_bounded_and_distinct() {
        let a = time_features::<f64>(1);
        let b = time_features::<f64>(900);
        assert!(a.data().iter().all(|v| v.abs() <= 1.0));
        assert_ne!(a.data(), b.data());
    }
}
