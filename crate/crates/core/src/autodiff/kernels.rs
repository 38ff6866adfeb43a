//! Forward/adjoint array kernels behind the graph ops.
//!
//! Layout conventions: feature maps are `[C, H, W]` row-major, matrices are
//! `[rows, cols]`. The hot loops (convs, matmul) are written as
//! scalar-times-contiguous-row accumulations so the compiler can vectorize
//! them; everything runs on one thread.

use crate::tensor::Element;

#[inline]
fn axpy<E: Element>(acc: &mut [E], k: E, row: &[E]) {
    for (o, i) in acc.iter_mut().zip(row.iter()) {
        *o += k * *i;
    }
}

#[inline]
fn dot<E: Element>(a: &[E], b: &[E]) -> E {
    let mut s = E::ZERO;
    for (x, y) in a.iter().zip(b.iter()) {
        s += *x * *y;
    }
    s
}

// ── 3x3 conv, zero padding, stride 1 ───────────────────────────────

/// One kernel row applied as a 3-tap stencil: `out[x] += ka*r[x-1] + kb*r[x] + kc*r[x+1]`
/// with zero padding at the row ends.
#[inline]
fn stencil_row<E: Element>(out: &mut [E], row: &[E], ka: E, kb: E, kc: E) {
    let w = out.len();
    if w == 1 {
        out[0] += kb * row[0];
        return;
    }
    out[0] += kb * row[0] + kc * row[1];
    for (o, win) in out[1..w - 1].iter_mut().zip(row.windows(3)) {
        *o += ka * win[0] + kb * win[1] + kc * win[2];
    }
    out[w - 1] += ka * row[w - 2] + kb * row[w - 1];
}

pub fn conv3x3_fwd<E: Element>(
    x: &[E],
    cin: usize,
    h: usize,
    w: usize,
    wgt: &[E],
    bias: &[E],
    cout: usize,
) -> Vec<E> {
    let plane = h * w;
    let mut y = vec![E::ZERO; cout * plane];
    for co in 0..cout {
        let yplane = &mut y[co * plane..(co + 1) * plane];
        yplane.fill(bias[co]);
        for ci in 0..cin {
            let xplane = &x[ci * plane..(ci + 1) * plane];
            let wk = &wgt[(co * cin + ci) * 9..(co * cin + ci) * 9 + 9];
            for ky in 0..3usize {
                let dy = ky as isize - 1;
                let (ka, kb, kc) = (wk[ky * 3], wk[ky * 3 + 1], wk[ky * 3 + 2]);
                for yy in 0..h {
                    let iy = yy as isize + dy;
                    if iy < 0 || iy as usize >= h {
                        continue;
                    }
                    let iy = iy as usize;
                    stencil_row(
                        &mut yplane[yy * w..(yy + 1) * w],
                        &xplane[iy * w..(iy + 1) * w],
                        ka,
                        kb,
                        kc,
                    );
                }
            }
        }
    }
    y
}

pub fn conv3x3_bwd_input<E: Element>(
    gy: &[E],
    cin: usize,
    h: usize,
    w: usize,
    wgt: &[E],
    cout: usize,
) -> Vec<E> {
    let plane = h * w;
    let mut dx = vec![E::ZERO; cin * plane];
    for co in 0..cout {
        let gplane = &gy[co * plane..(co + 1) * plane];
        for ci in 0..cin {
            let dxplane = &mut dx[ci * plane..(ci + 1) * plane];
            let wk = &wgt[(co * cin + ci) * 9..(co * cin + ci) * 9 + 9];
            // transpose of the forward: flipped kernel, swapped shift.
            for ky in 0..3usize {
                let dy = ky as isize - 1;
                let (ka, kb, kc) = (wk[ky * 3], wk[ky * 3 + 1], wk[ky * 3 + 2]);
                for yy in 0..h {
                    let iy = yy as isize + dy;
                    if iy < 0 || iy as usize >= h {
                        continue;
                    }
                    let iy = iy as usize;
                    // forward wrote out[yy] from in[iy]; adjoint writes dx[iy]
                    // from gy[yy] with horizontally flipped taps.
                    stencil_row(
                        &mut dxplane[iy * w..(iy + 1) * w],
                        &gplane[yy * w..(yy + 1) * w],
                        kc,
                        kb,
                        ka,
                    );
                }
            }
        }
    }
    dx
}

/// Three horizontal correlation dots in one pass:
/// returns (Σ g[x]·r[x-1], Σ g[x]·r[x], Σ g[x]·r[x+1]) under zero padding.
#[inline]
fn stencil_dots<E: Element>(g: &[E], row: &[E]) -> (E, E, E) {
    let w = g.len();
    let mut da = E::ZERO;
    let mut db = E::ZERO;
    let mut dc = E::ZERO;
    if w == 1 {
        return (E::ZERO, g[0] * row[0], E::ZERO);
    }
    db += g[0] * row[0];
    dc += g[0] * row[1];
    for (gi, win) in g[1..w - 1].iter().zip(row.windows(3)) {
        da += *gi * win[0];
        db += *gi * win[1];
        dc += *gi * win[2];
    }
    da += g[w - 1] * row[w - 2];
    db += g[w - 1] * row[w - 1];
    (da, db, dc)
}

pub fn conv3x3_bwd_weight<E: Element>(
    x: &[E],
    cin: usize,
    h: usize,
    w: usize,
    gy: &[E],
    cout: usize,
) -> Vec<E> {
    let plane = h * w;
    let mut dw = vec![E::ZERO; cout * cin * 9];
    for co in 0..cout {
        let gplane = &gy[co * plane..(co + 1) * plane];
        for ci in 0..cin {
            let xplane = &x[ci * plane..(ci + 1) * plane];
            let wbase = (co * cin + ci) * 9;
            for ky in 0..3usize {
                let dy = ky as isize - 1;
                let mut acc = (E::ZERO, E::ZERO, E::ZERO);
                for yy in 0..h {
                    let iy = yy as isize + dy;
                    if iy < 0 || iy as usize >= h {
                        continue;
                    }
                    let iy = iy as usize;
                    let (da, db, dc) =
                        stencil_dots(&gplane[yy * w..(yy + 1) * w], &xplane[iy * w..(iy + 1) * w]);
                    acc.0 += da;
                    acc.1 += db;
                    acc.2 += dc;
                }
                dw[wbase + ky * 3] = acc.0;
                dw[wbase + ky * 3 + 1] = acc.1;
                dw[wbase + ky * 3 + 2] = acc.2;
            }
        }
    }
    dw
}

pub fn bwd_bias_channels<E: Element>(gy: &[E], cout: usize, plane: usize) -> Vec<E> {
    (0..cout)
        .map(|co| {
            let mut s = E::ZERO;
            for v in &gy[co * plane..(co + 1) * plane] {
                s += *v;
            }
            s
        })
        .collect()
}

// ── 1x1 conv ────────────────────────────────────────────────────────

pub fn conv1x1_fwd<E: Element>(
    x: &[E],
    cin: usize,
    plane: usize,
    wgt: &[E],
    bias: &[E],
    cout: usize,
) -> Vec<E> {
    let mut y = vec![E::ZERO; cout * plane];
    for co in 0..cout {
        let yplane = &mut y[co * plane..(co + 1) * plane];
        yplane.fill(bias[co]);
        for ci in 0..cin {
            axpy(yplane, wgt[co * cin + ci], &x[ci * plane..(ci + 1) * plane]);
        }
    }
    y
}

pub fn conv1x1_bwd_input<E: Element>(
    gy: &[E],
    cin: usize,
    plane: usize,
    wgt: &[E],
    cout: usize,
) -> Vec<E> {
    let mut dx = vec![E::ZERO; cin * plane];
    for co in 0..cout {
        let gplane = &gy[co * plane..(co + 1) * plane];
        for ci in 0..cin {
            axpy(
                &mut dx[ci * plane..(ci + 1) * plane],
                wgt[co * cin + ci],
                gplane,
            );
        }
    }
    dx
}

pub fn conv1x1_bwd_weight<E: Element>(
    x: &[E],
    cin: usize,
    plane: usize,
    gy: &[E],
    cout: usize,
) -> Vec<E> {
    let mut dw = vec![E::ZERO; cout * cin];
    for co in 0..cout {
        let gplane = &gy[co * plane..(co + 1) * plane];
        for ci in 0..cin {
            dw[co * cin + ci] = dot(gplane, &x[ci * plane..(ci + 1) * plane]);
        }
    }
    dw
}

// ── matmul ──────────────────────────────────────────────────────────

pub fn matmul_fwd<E: Element>(a: &[E], b: &[E], n: usize, k: usize, m: usize) -> Vec<E> {
    let mut y = vec![E::ZERO; n * m];
    for i in 0..n {
        let yrow = &mut y[i * m..(i + 1) * m];
        for p in 0..k {
            axpy(yrow, a[i * k + p], &b[p * m..(p + 1) * m]);
        }
    }
    y
}

/// dA = gY · Bᵀ
pub fn matmul_bwd_a<E: Element>(gy: &[E], b: &[E], n: usize, k: usize, m: usize) -> Vec<E> {
    let mut da = vec![E::ZERO; n * k];
    for i in 0..n {
        let grow = &gy[i * m..(i + 1) * m];
        for p in 0..k {
            da[i * k + p] = dot(grow, &b[p * m..(p + 1) * m]);
        }
    }
    da
}

/// dB = Aᵀ · gY
pub fn matmul_bwd_b<E: Element>(gy: &[E], a: &[E], n: usize, k: usize, m: usize) -> Vec<E> {
    let mut db = vec![E::ZERO; k * m];
    for i in 0..n {
        let grow = &gy[i * m..(i + 1) * m];
        for p in 0..k {
            axpy(&mut db[p * m..(p + 1) * m], a[i * k + p], grow);
        }
    }
    db
}

pub fn transpose2d<E: Element>(x: &[E], rows: usize, cols: usize) -> Vec<E> {
    let mut y = vec![E::ZERO; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            y[c * rows + r] = x[r * cols + c];
        }
    }
    y
}

// ── pooling / resampling ────────────────────────────────────────────

pub fn avg_pool2_fwd<E: Element>(x: &[E], c: usize, h: usize, w: usize) -> Vec<E> {
    let (oh, ow) = (h / 2, w / 2);
    let quarter = E::from_f64(0.25);
    let mut y = vec![E::ZERO; c * oh * ow];
    for ch in 0..c {
        let xp = &x[ch * h * w..(ch + 1) * h * w];
        let yp = &mut y[ch * oh * ow..(ch + 1) * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let i = 2 * oy * w + 2 * ox;
                yp[oy * ow + ox] = (xp[i] + xp[i + 1] + xp[i + w] + xp[i + w + 1]) * quarter;
            }
        }
    }
    y
}

pub fn avg_pool2_bwd<E: Element>(gy: &[E], c: usize, h: usize, w: usize) -> Vec<E> {
    let (oh, ow) = (h / 2, w / 2);
    let quarter = E::from_f64(0.25);
    let mut dx = vec![E::ZERO; c * h * w];
    for ch in 0..c {
        let gp = &gy[ch * oh * ow..(ch + 1) * oh * ow];
        let dp = &mut dx[ch * h * w..(ch + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let g = gp[oy * ow + ox] * quarter;
                let i = 2 * oy * w + 2 * ox;
                dp[i] += g;
                dp[i + 1] += g;
                dp[i + w] += g;
                dp[i + w + 1] += g;
            }
        }
    }
    dx
}

pub fn upsample2_fwd<E: Element>(x: &[E], c: usize, h: usize, w: usize) -> Vec<E> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut y = vec![E::ZERO; c * oh * ow];
    for ch in 0..c {
        let xp = &x[ch * h * w..(ch + 1) * h * w];
        let yp = &mut y[ch * oh * ow..(ch + 1) * oh * ow];
        for iy in 0..h {
            for ix in 0..w {
                let v = xp[iy * w + ix];
                let o = 2 * iy * ow + 2 * ix;
                yp[o] = v;
                yp[o + 1] = v;
                yp[o + ow] = v;
                yp[o + ow + 1] = v;
            }
        }
    }
    y
}

pub fn upsample2_bwd<E: Element>(gy: &[E], c: usize, h: usize, w: usize) -> Vec<E> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut dx = vec![E::ZERO; c * h * w];
    for ch in 0..c {
        let gp = &gy[ch * oh * ow..(ch + 1) * oh * ow];
        let dp = &mut dx[ch * h * w..(ch + 1) * h * w];
        for iy in 0..h {
            for ix in 0..w {
                let o = 2 * iy * ow + 2 * ix;
                dp[iy * w + ix] = gp[o] + gp[o + 1] + gp[o + ow] + gp[o + ow + 1];
            }
        }
    }
    dx
}

// ── gaussian blur (separable, border-renormalized) ──────────────────
//
// Border renormalization keeps blur-of-constant exactly constant, which the
// scale-space construction relies on; interior pixels see the plain
// normalized kernel, so mass is preserved away from edges.

pub fn gaussian_taps(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as usize;
    let mut taps: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-0.5 * (d / sigma) * (d / sigma)).exp()
        })
        .collect();
    let sum: f64 = taps.iter().sum();
    for t in taps.iter_mut() {
        *t /= sum;
    }
    taps
}

/// In-bounds tap mass for each index along an axis of length `n`.
fn tap_denoms(taps: &[f64], n: usize) -> Vec<f64> {
    let radius = taps.len() / 2;
    (0..n)
        .map(|i| {
            let mut s = 0.0;
            for (j, t) in taps.iter().enumerate() {
                let p = i as isize + j as isize - radius as isize;
                if p >= 0 && (p as usize) < n {
                    s += t;
                }
            }
            s
        })
        .collect()
}

fn blur_axis<E: Element>(
    x: &[E],
    c: usize,
    h: usize,
    w: usize,
    taps: &[f64],
    horizontal: bool,
    renormalize: bool,
) -> Vec<E> {
    let radius = (taps.len() / 2) as isize;
    let n = if horizontal { w } else { h };
    let denoms = tap_denoms(taps, n);
    let mut y = vec![E::ZERO; c * h * w];
    for ch in 0..c {
        let xp = &x[ch * h * w..(ch + 1) * h * w];
        let yp = &mut y[ch * h * w..(ch + 1) * h * w];
        for yy in 0..h {
            for xx in 0..w {
                let i = if horizontal { xx } else { yy };
                let mut acc = 0.0f64;
                for (j, t) in taps.iter().enumerate() {
                    let p = i as isize + j as isize - radius;
                    if p >= 0 && (p as usize) < n {
                        let src = if horizontal {
                            xp[yy * w + p as usize]
                        } else {
                            xp[p as usize * w + xx]
                        };
                        acc += t * src.to_f64();
                    }
                }
                if renormalize {
                    acc /= denoms[i];
                }
                yp[yy * w + xx] = E::from_f64(acc);
            }
        }
    }
    y
}

pub fn blur_fwd<E: Element>(x: &[E], c: usize, h: usize, w: usize, sigma: f64) -> Vec<E> {
    let taps = gaussian_taps(sigma);
    let tmp = blur_axis(x, c, h, w, &taps, true, true);
    blur_axis(&tmp, c, h, w, &taps, false, true)
}

/// Adjoint of `blur_fwd`: divide by the per-position renormalization mass,
/// then correlate with the (symmetric) kernel without renormalizing.
pub fn blur_adjoint<E: Element>(gy: &[E], c: usize, h: usize, w: usize, sigma: f64) -> Vec<E> {
    let taps = gaussian_taps(sigma);
    let denoms_v = tap_denoms(&taps, h);
    let denoms_h = tap_denoms(&taps, w);
    // Adjoint of the vertical pass first (it ran last in the forward).
    let mut g = gy.to_vec();
    for ch in 0..c {
        let gp = &mut g[ch * h * w..(ch + 1) * h * w];
        for yy in 0..h {
            let d = E::from_f64(denoms_v[yy]);
            for xx in 0..w {
                gp[yy * w + xx] /= d;
            }
        }
    }
    let g = blur_axis(&g, c, h, w, &taps, false, false);
    let mut g2 = g;
    for ch in 0..c {
        let gp = &mut g2[ch * h * w..(ch + 1) * h * w];
        for yy in 0..h {
            for xx in 0..w {
                gp[yy * w + xx] /= E::from_f64(denoms_h[xx]);
            }
        }
    }
    blur_axis(&g2, c, h, w, &taps, true, false)
}

// ── softmax over the last axis ──────────────────────────────────────

pub fn softmax_fwd<E: Element>(x: &[E], last: usize) -> Vec<E> {
    let rows = x.len() / last;
    let mut y = vec![E::ZERO; x.len()];
    for r in 0..rows {
        let xr = &x[r * last..(r + 1) * last];
        let yr = &mut y[r * last..(r + 1) * last];
        let mut mx = xr[0];
        for v in xr.iter() {
            mx = mx.max(*v);
        }
        let mut sum = E::ZERO;
        for (o, v) in yr.iter_mut().zip(xr.iter()) {
            *o = (*v - mx).exp();
            sum += *o;
        }
        for o in yr.iter_mut() {
            *o /= sum;
        }
    }
    y
}

pub fn softmax_bwd<E: Element>(y: &[E], gy: &[E], last: usize) -> Vec<E> {
    let rows = y.len() / last;
    let mut dx = vec![E::ZERO; y.len()];
    for r in 0..rows {
        let yr = &y[r * last..(r + 1) * last];
        let gr = &gy[r * last..(r + 1) * last];
        let s = dot(yr, gr);
        for ((d, y_i), g_i) in dx[r * last..(r + 1) * last]
            .iter_mut()
            .zip(yr.iter())
            .zip(gr.iter())
        {
            *d = *y_i * (*g_i - s);
        }
    }
    dx
}

// ── per-position channel layer norm ─────────────────────────────────

pub fn layer_norm_channels_fwd<E: Element>(x: &[E], c: usize, plane: usize, eps: f64) -> Vec<E> {
    let mut y = vec![E::ZERO; x.len()];
    let n = E::from_f64(c as f64);
    for p in 0..plane {
        let mut mu = E::ZERO;
        for ch in 0..c {
            mu += x[ch * plane + p];
        }
        mu /= n;
        let mut var = E::ZERO;
        for ch in 0..c {
            let d = x[ch * plane + p] - mu;
            var += d * d;
        }
        var /= n;
        let inv = E::ONE / (var + E::from_f64(eps)).sqrt();
        for ch in 0..c {
            y[ch * plane + p] = (x[ch * plane + p] - mu) * inv;
        }
    }
    y
}

pub fn layer_norm_channels_bwd<E: Element>(
    x: &[E],
    gy: &[E],
    c: usize,
    plane: usize,
    eps: f64,
) -> Vec<E> {
    let mut dx = vec![E::ZERO; x.len()];
    let n = E::from_f64(c as f64);
    for p in 0..plane {
        let mut mu = E::ZERO;
        for ch in 0..c {
            mu += x[ch * plane + p];
        }
        mu /= n;
        let mut var = E::ZERO;
        for ch in 0..c {
            let d = x[ch * plane + p] - mu;
            var += d * d;
        }
        var /= n;
        let inv = E::ONE / (var + E::from_f64(eps)).sqrt();
        let mut gmean = E::ZERO;
        let mut gx_mean = E::ZERO;
        for ch in 0..c {
            let xh = (x[ch * plane + p] - mu) * inv;
            let g = gy[ch * plane + p];
            gmean += g;
            gx_mean += g * xh;
        }
        gmean /= n;
        gx_mean /= n;
        for ch in 0..c {
            let xh = (x[ch * plane + p] - mu) * inv;
            dx[ch * plane + p] = inv * (gy[ch * plane + p] - gmean - xh * gx_mean);
        }
    }
    dx
}

// ── total variation (anisotropic L1, mean-normalized) ───────────────

pub fn tv2d_fwd<E: Element>(x: &[E], c: usize, h: usize, w: usize) -> E {
    let mut acc = E::ZERO;
    for ch in 0..c {
        let xp = &x[ch * h * w..(ch + 1) * h * w];
        for yy in 0..h {
            for xx in 0..w {
                if xx + 1 < w {
                    acc += (xp[yy * w + xx + 1] - xp[yy * w + xx]).abs();
                }
                if yy + 1 < h {
                    acc += (xp[(yy + 1) * w + xx] - xp[yy * w + xx]).abs();
                }
            }
        }
    }
    acc / E::from_f64((c * h * w) as f64)
}

pub fn tv2d_bwd<E: Element>(x: &[E], g: E, c: usize, h: usize, w: usize) -> Vec<E> {
    let mut dx = vec![E::ZERO; x.len()];
    let scale = g / E::from_f64((c * h * w) as f64);
    for ch in 0..c {
        let base = ch * h * w;
        for yy in 0..h {
            for xx in 0..w {
                if xx + 1 < w {
                    let d = x[base + yy * w + xx + 1] - x[base + yy * w + xx];
                    let s = sign(d) * scale;
                    dx[base + yy * w + xx + 1] += s;
                    dx[base + yy * w + xx] -= s;
                }
                if yy + 1 < h {
                    let d = x[base + (yy + 1) * w + xx] - x[base + yy * w + xx];
                    let s = sign(d) * scale;
                    dx[base + (yy + 1) * w + xx] += s;
                    dx[base + yy * w + xx] -= s;
                }
            }
        }
    }
    dx
}

#[inline]
fn sign<E: Element>(v: E) -> E {
    if v > E::ZERO {
        E::ONE
    } else if v < E::ZERO {
        -E::ONE
    } else {
        E::ZERO
    }
}
