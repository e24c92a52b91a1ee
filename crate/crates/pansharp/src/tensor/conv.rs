//! Direct-loop 2D cross-correlation kernels (forward plus the three
//! backward passes). Stride-1 inner loops run over contiguous slices so
//! the compiler can vectorize them.

use super::Shape;

fn out_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (input + 2 * padding - kernel) / stride + 1
}

/// Range of output positions whose tap `k` lands inside the input axis.
fn valid_range(out_len: usize, in_len: usize, k: usize, stride: usize, padding: usize) -> (usize, usize) {
    // in = out*stride + k - padding, constrained to [0, in_len)
    let lo = if k >= padding {
        0
    } else {
        (padding - k).div_ceil(stride)
    };
    let hi_in = in_len as isize - 1 - k as isize + padding as isize;
    if hi_in < 0 {
        return (0, 0);
    }
    let hi = ((hi_in as usize) / stride + 1).min(out_len);
    (lo.min(hi), hi)
}

pub(super) fn forward(
    input: &[f64],
    ish: Shape,
    weight: &[f64],
    wsh: Shape,
    bias: &[f64],
    stride: usize,
    padding: usize,
) -> (Vec<f64>, Shape) {
    let (oc, ic, kh, kw) = (wsh.n, wsh.c, wsh.h, wsh.w);
    let oh = out_extent(ish.h, kh, stride, padding);
    let ow = out_extent(ish.w, kw, stride, padding);
    let osh = Shape::new(ish.n, oc, oh, ow);
    let mut out = vec![0.0; osh.numel()];
    for n in 0..ish.n {
        for o in 0..oc {
            let out_plane = &mut out[(n * oc + o) * oh * ow..(n * oc + o + 1) * oh * ow];
            out_plane.fill(bias[o]);
            for c in 0..ic {
                let in_plane = &input[(n * ic + c) * ish.h * ish.w..(n * ic + c + 1) * ish.h * ish.w];
                for ky in 0..kh {
                    let (oy_lo, oy_hi) = valid_range(oh, ish.h, ky, stride, padding);
                    for kx in 0..kw {
                        let wv = weight[((o * ic + c) * kh + ky) * kw + kx];
                        let (ox_lo, ox_hi) = valid_range(ow, ish.w, kx, stride, padding);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        for oy in oy_lo..oy_hi {
                            let iy = oy * stride + ky - padding;
                            let src_base = iy * ish.w + ox_lo * stride + kx - padding;
                            let dst = &mut out_plane[oy * ow + ox_lo..oy * ow + ox_hi];
                            if stride == 1 {
                                let src = &in_plane[src_base..src_base + (ox_hi - ox_lo)];
                                for (d, s) in dst.iter_mut().zip(src) {
                                    *d += wv * s;
                                }
                            } else {
                                for (i, d) in dst.iter_mut().enumerate() {
                                    *d += wv * in_plane[src_base + i * stride];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (out, osh)
}

#[allow(clippy::too_many_arguments)]
pub(super) fn backward(
    g_out: &[f64],
    osh: Shape,
    input: &[f64],
    ish: Shape,
    weight: &[f64],
    wsh: Shape,
    stride: usize,
    padding: usize,
    need_input: bool,
    need_weight: bool,
    need_bias: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>, Option<Vec<f64>>) {
    let (oc, ic, kh, kw) = (wsh.n, wsh.c, wsh.h, wsh.w);
    let (oh, ow) = (osh.h, osh.w);

    let g_bias = need_bias.then(|| {
        let mut gb = vec![0.0; oc];
        for n in 0..osh.n {
            for o in 0..oc {
                gb[o] += g_out[(n * oc + o) * oh * ow..(n * oc + o + 1) * oh * ow]
                    .iter()
                    .sum::<f64>();
            }
        }
        gb
    });

    let mut g_input = need_input.then(|| vec![0.0; ish.numel()]);
    let mut g_weight = need_weight.then(|| vec![0.0; wsh.numel()]);

    if g_input.is_some() || g_weight.is_some() {
        for n in 0..osh.n {
            for o in 0..oc {
                let g_plane = &g_out[(n * oc + o) * oh * ow..(n * oc + o + 1) * oh * ow];
                for c in 0..ic {
                    let plane_base = (n * ic + c) * ish.h * ish.w;
                    for ky in 0..kh {
                        let (oy_lo, oy_hi) = valid_range(oh, ish.h, ky, stride, padding);
                        for kx in 0..kw {
                            let (ox_lo, ox_hi) = valid_range(ow, ish.w, kx, stride, padding);
                            if ox_lo >= ox_hi || oy_lo >= oy_hi {
                                continue;
                            }
                            let wv = weight[((o * ic + c) * kh + ky) * kw + kx];
                            let mut wacc = 0.0;
                            for oy in oy_lo..oy_hi {
                                let iy = oy * stride + ky - padding;
                                let src_base = plane_base + iy * ish.w + ox_lo * stride + kx - padding;
                                let grow = &g_plane[oy * ow + ox_lo..oy * ow + ox_hi];
                                if let Some(gi) = g_input.as_deref_mut() {
                                    if stride == 1 {
                                        let dst = &mut gi[src_base..src_base + grow.len()];
                                        for (d, g) in dst.iter_mut().zip(grow) {
                                            *d += wv * g;
                                        }
                                    } else {
                                        for (i, g) in grow.iter().enumerate() {
                                            gi[src_base + i * stride] += wv * g;
                                        }
                                    }
                                }
                                if g_weight.is_some() {
                                    if stride == 1 {
                                        let src = &input[src_base..src_base + grow.len()];
                                        for (s, g) in src.iter().zip(grow) {
                                            wacc += s * g;
                                        }
                                    } else {
                                        for (i, g) in grow.iter().enumerate() {
                                            wacc += input[src_base + i * stride] * g;
                                        }
                                    }
                                }
                            }
                            if let Some(gw) = g_weight.as_deref_mut() {
                                gw[((o * ic + c) * kh + ky) * kw + kx] += wacc;
                            }
                        }
                    }
                }
            }
        }
    }
    (g_input, g_weight, g_bias)
}
