//! Slice-level forward and backward kernels for the spatial ops.
//!
//! Layout is NCHW throughout. Convolutions accumulate row by row so the
//! inner loop runs over contiguous memory when the stride is 1.

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn out_len(&self) -> usize {
        self.n * self.cout * self.oh * self.ow
    }
}

/// Output indices `lo..hi` whose source coordinate `o*stride + k - pad` lies in `0..len`.
fn valid_range(k: usize, pad: usize, stride: usize, len: usize, out: usize) -> (usize, usize) {
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    if len + pad <= k {
        return (0, 0);
    }
    let hi = ((len - 1 + pad - k) / stride + 1).min(out);
    (lo.min(hi), hi)
}

pub(crate) fn conv2d_forward(g: &ConvGeom, input: &[f64], weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let plane_in = g.h * g.w;
    let plane_out = g.oh * g.ow;
    let mut out = vec![0.0; g.out_len()];
    for n in 0..g.n {
        for o in 0..g.cout {
            let out_plane = &mut out[(n * g.cout + o) * plane_out..][..plane_out];
            out_plane.iter_mut().for_each(|v| *v = bias[o]);
            for c in 0..g.cin {
                let in_plane = &input[(n * g.cin + c) * plane_in..][..plane_in];
                for ky in 0..g.kh {
                    let (oy_lo, oy_hi) = valid_range(ky, g.pad, g.stride, g.h, g.oh);
                    for kx in 0..g.kw {
                        let wv = weight[((o * g.cin + c) * g.kh + ky) * g.kw + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let (ox_lo, ox_hi) = valid_range(kx, g.pad, g.stride, g.w, g.ow);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        for oy in oy_lo..oy_hi {
                            let iy = oy * g.stride + ky - g.pad;
                            let orow = &mut out_plane[oy * g.ow + ox_lo..oy * g.ow + ox_hi];
                            let ix0 = ox_lo * g.stride + kx - g.pad;
                            if g.stride == 1 {
                                let irow = &in_plane[iy * g.w + ix0..][..orow.len()];
                                for (a, &b) in orow.iter_mut().zip(irow) {
                                    *a += wv * b;
                                }
                            } else {
                                let irow = &in_plane[iy * g.w..];
                                for (j, a) in orow.iter_mut().enumerate() {
                                    *a += wv * irow[ix0 + j * g.stride];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Accumulates gradients for whichever of input, weight and bias are requested.
pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    input: &[f64],
    weight: &[f64],
    gout: &[f64],
    mut gin: Option<&mut [f64]>,
    mut gw: Option<&mut [f64]>,
    mut gb: Option<&mut [f64]>,
) {
    let plane_in = g.h * g.w;
    let plane_out = g.oh * g.ow;
    for n in 0..g.n {
        for o in 0..g.cout {
            let gplane = &gout[(n * g.cout + o) * plane_out..][..plane_out];
            if let Some(gb) = gb.as_deref_mut() {
                gb[o] += gplane.iter().sum::<f64>();
            }
            for c in 0..g.cin {
                let in_off = (n * g.cin + c) * plane_in;
                for ky in 0..g.kh {
                    let (oy_lo, oy_hi) = valid_range(ky, g.pad, g.stride, g.h, g.oh);
                    for kx in 0..g.kw {
                        let (ox_lo, ox_hi) = valid_range(kx, g.pad, g.stride, g.w, g.ow);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        let widx = ((o * g.cin + c) * g.kh + ky) * g.kw + kx;
                        let wv = weight[widx];
                        let ix0 = ox_lo * g.stride + kx - g.pad;
                        let len = ox_hi - ox_lo;
                        let mut acc = 0.0;
                        for oy in oy_lo..oy_hi {
                            let iy = oy * g.stride + ky - g.pad;
                            let grow = &gplane[oy * g.ow + ox_lo..][..len];
                            let row_start = in_off + iy * g.w;
                            if g.stride == 1 {
                                if gw.is_some() {
                                    let irow = &input[row_start + ix0..][..len];
                                    acc += grow.iter().zip(irow).map(|(a, b)| a * b).sum::<f64>();
                                }
                                if let Some(gin) = gin.as_deref_mut() {
                                    let irow = &mut gin[row_start + ix0..][..len];
                                    for (a, &b) in irow.iter_mut().zip(grow) {
                                        *a += wv * b;
                                    }
                                }
                            } else {
                                for (j, &gv) in grow.iter().enumerate() {
                                    let ii = row_start + ix0 + j * g.stride;
                                    if gw.is_some() {
                                        acc += gv * input[ii];
                                    }
                                    if let Some(gin) = gin.as_deref_mut() {
                                        gin[ii] += wv * gv;
                                    }
                                }
                            }
                        }
                        if let Some(gw) = gw.as_deref_mut() {
                            gw[widx] += acc;
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn avg_pool_forward(
    input: &[f64],
    planes: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
) -> (Vec<f64>, usize, usize) {
    let oh = (h - k) / stride + 1;
    let ow = (w - k) / stride + 1;
    let norm = 1.0 / (k * k) as f64;
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        let ip = &input[p * h * w..][..h * w];
        let op = &mut out[p * oh * ow..][..oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut s = 0.0;
                for dy in 0..k {
                    let row = &ip[(oy * stride + dy) * w + ox * stride..][..k];
                    s += row.iter().sum::<f64>();
                }
                op[oy * ow + ox] = s * norm;
            }
        }
    }
    (out, oh, ow)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn avg_pool_backward(
    gout: &[f64],
    gin: &mut [f64],
    planes: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    oh: usize,
    ow: usize,
) {
    let norm = 1.0 / (k * k) as f64;
    for p in 0..planes {
        let gp = &gout[p * oh * ow..][..oh * ow];
        let ip = &mut gin[p * h * w..][..h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let v = gp[oy * ow + ox] * norm;
                for dy in 0..k {
                    let row = &mut ip[(oy * stride + dy) * w + ox * stride..][..k];
                    row.iter_mut().for_each(|a| *a += v);
                }
            }
        }
    }
}

/// Source coordinate, lower neighbour index, upper neighbour index and upper weight
/// for each output position under align-corners sampling.
fn align_corners_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    (0..dst)
        .map(|o| {
            if dst == 1 || src == 1 {
                return (0, 0, 0.0);
            }
            let pos = o as f64 * (src - 1) as f64 / (dst - 1) as f64;
            let lo = (pos.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}

pub(crate) fn resize_forward(
    input: &[f64],
    planes: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let ty = align_corners_taps(h, oh);
    let tx = align_corners_taps(w, ow);
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        let ip = &input[p * h * w..][..h * w];
        let op = &mut out[p * oh * ow..][..oh * ow];
        for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                let top = ip[y0 * w + x0] * (1.0 - wx) + ip[y0 * w + x1] * wx;
                let bot = ip[y1 * w + x0] * (1.0 - wx) + ip[y1 * w + x1] * wx;
                op[oy * ow + ox] = top * (1.0 - wy) + bot * wy;
            }
        }
    }
    out
}

pub(crate) fn resize_backward(
    gout: &[f64],
    gin: &mut [f64],
    planes: usize,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
) {
    let ty = align_corners_taps(h, oh);
    let tx = align_corners_taps(w, ow);
    for p in 0..planes {
        let gp = &gout[p * oh * ow..][..oh * ow];
        let ip = &mut gin[p * h * w..][..h * w];
        for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                let g = gp[oy * ow + ox];
                ip[y0 * w + x0] += g * (1.0 - wy) * (1.0 - wx);
                ip[y0 * w + x1] += g * (1.0 - wy) * wx;
                ip[y1 * w + x0] += g * wy * (1.0 - wx);
                ip[y1 * w + x1] += g * wy * wx;
            }
        }
    }
}
