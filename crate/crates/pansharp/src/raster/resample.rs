//! Separable Keys bicubic resampling (a = -0.5), pixel-center aligned,
//! clamp-replicated borders. Shared by the raster ops and the tensor
//! engine (which also needs the adjoint passes for backpropagation).

/// Keys cubic kernel value at offset `t`, a = -0.5.
fn keys(t: f64) -> f64 {
    let t = t.abs();
    if t <= 1.0 {
        (1.5 * t - 2.5) * t * t + 1.0
    } else if t < 2.0 {
        ((-0.5 * t + 2.5) * t - 4.0) * t + 2.0
    } else {
        0.0
    }
}

/// Four source taps and weights feeding one destination sample.
#[derive(Clone, Copy)]
pub(crate) struct Taps {
    pub idx: [usize; 4],
    pub w: [f64; 4],
}

/// Source mapping: src = (dst + 0.5) * (src_len / dst_len) - 0.5,
/// taps clamped to the valid range.
pub(crate) fn taps_for(dst: usize, src_len: usize, dst_len: usize) -> Taps {
    let scale = src_len as f64 / dst_len as f64;
    let src = (dst as f64 + 0.5) * scale - 0.5;
    let base = src.floor();
    let f = src - base;
    let base = base as isize;
    let clamp = |i: isize| i.clamp(0, src_len as isize - 1) as usize;
    Taps {
        idx: [clamp(base - 1), clamp(base), clamp(base + 1), clamp(base + 2)],
        w: [keys(1.0 + f), keys(f), keys(1.0 - f), keys(2.0 - f)],
    }
}

/// Blend anchored on the second tap: the weights sum to 1, so constant
/// signals reproduce bit-exactly and the identity resize is a copy.
#[inline]
fn blend(v0: f64, v1: f64, v2: f64, v3: f64, w: &[f64; 4]) -> f64 {
    v1 + w[0] * (v0 - v1) + w[2] * (v2 - v1) + w[3] * (v3 - v1)
}

/// Resample a row-major (w x h) plane along x to width `new_w`.
pub(crate) fn resample_width(src: &[f64], w: usize, h: usize, new_w: usize) -> Vec<f64> {
    let taps: Vec<Taps> = (0..new_w).map(|x| taps_for(x, w, new_w)).collect();
    let mut out = vec![0.0; new_w * h];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        let dst = &mut out[y * new_w..(y + 1) * new_w];
        for (x, t) in taps.iter().enumerate() {
            dst[x] = blend(row[t.idx[0]], row[t.idx[1]], row[t.idx[2]], row[t.idx[3]], &t.w);
        }
    }
    out
}

/// Resample a row-major (w x h) plane along y to height `new_h`.
pub(crate) fn resample_height(src: &[f64], w: usize, h: usize, new_h: usize) -> Vec<f64> {
    let mut out = vec![0.0; w * new_h];
    for y in 0..new_h {
        let t = taps_for(y, h, new_h);
        let r0 = &src[t.idx[0] * w..t.idx[0] * w + w];
        let r1 = &src[t.idx[1] * w..t.idx[1] * w + w];
        let r2 = &src[t.idx[2] * w..t.idx[2] * w + w];
        let r3 = &src[t.idx[3] * w..t.idx[3] * w + w];
        let dst = &mut out[y * w..(y + 1) * w];
        for x in 0..w {
            dst[x] = blend(r0[x], r1[x], r2[x], r3[x], &t.w);
        }
    }
    out
}

/// Full separable resample: width pass first, then height.
pub(crate) fn resample_plane(
    src: &[f64],
    w: usize,
    h: usize,
    new_w: usize,
    new_h: usize,
) -> Vec<f64> {
    let tmp = resample_width(src, w, h, new_w);
    resample_height(&tmp, new_w, h, new_h)
}

/// Transpose of `resample_width` as a linear map on plane values.
pub(crate) fn resample_width_adjoint(
    g_out: &[f64],
    w: usize,
    h: usize,
    new_w: usize,
) -> Vec<f64> {
    let taps: Vec<Taps> = (0..new_w).map(|x| taps_for(x, w, new_w)).collect();
    let mut g_in = vec![0.0; w * h];
    for y in 0..h {
        let grow = &g_out[y * new_w..(y + 1) * new_w];
        let dst = &mut g_in[y * w..(y + 1) * w];
        for (x, t) in taps.iter().enumerate() {
            let g = grow[x];
            // the anchored blend weights the second tap with 1 - w0 - w2 - w3
            let w1 = 1.0 - t.w[0] - t.w[2] - t.w[3];
            dst[t.idx[0]] += t.w[0] * g;
            dst[t.idx[1]] += w1 * g;
            dst[t.idx[2]] += t.w[2] * g;
            dst[t.idx[3]] += t.w[3] * g;
        }
    }
    g_in
}

/// Transpose of `resample_height` as a linear map on plane values.
pub(crate) fn resample_height_adjoint(
    g_out: &[f64],
    w: usize,
    h: usize,
    new_h: usize,
) -> Vec<f64> {
    let mut g_in = vec![0.0; w * h];
    for y in 0..new_h {
        let t = taps_for(y, h, new_h);
        let w1 = 1.0 - t.w[0] - t.w[2] - t.w[3];
        let grow = &g_out[y * w..(y + 1) * w];
        for x in 0..w {
            let g = grow[x];
            g_in[t.idx[0] * w + x] += t.w[0] * g;
            g_in[t.idx[1] * w + x] += w1 * g;
            g_in[t.idx[2] * w + x] += t.w[2] * g;
            g_in[t.idx[3] * w + x] += t.w[3] * g;
        }
    }
    g_in
}

/// Transpose of `resample_plane`: forward is H(W(x)), so the adjoint is
/// W^T(H^T(g)).
pub(crate) fn resample_plane_adjoint(
    g_out: &[f64],
    w: usize,
    h: usize,
    new_w: usize,
    new_h: usize,
) -> Vec<f64> {
    let g_tmp = resample_height_adjoint(g_out, new_w, h, new_h);
    resample_width_adjoint(&g_tmp, w, h, new_w)
}
