//! Dense forward/backward kernels for the spatial ops. Everything is
//! row-major `[channels, height, width]`; inner loops run over contiguous
//! slices so the compiler can vectorize them.

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
}

impl ConvGeom {
    fn plane(&self) -> usize {
        self.height * self.width
    }
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Zero-padded planes of width `width + 2p`. In this layout every kernel tap
/// is a single contiguous slice offset, so each (channel pair, tap) becomes
/// one long axpy or dot instead of one per row.
struct Padded {
    wp: usize,
    /// Length of the window covering every valid output position.
    span: usize,
    plane: usize,
}

impl Padded {
    fn new(g: &ConvGeom) -> Self {
        let p = g.kernel / 2;
        let wp = g.width + 2 * p;
        Padded {
            wp,
            span: (g.height - 1) * wp + g.width,
            plane: (g.height + 2 * p) * wp,
        }
    }

    fn pad(&self, g: &ConvGeom, channels: usize, data: &[f64]) -> Vec<f64> {
        let p = g.kernel / 2;
        let mut out = vec![0.0; channels * self.plane];
        for c in 0..channels {
            for y in 0..g.height {
                let src = &data[(c * g.height + y) * g.width..][..g.width];
                out[c * self.plane + (y + p) * self.wp + p..][..g.width].copy_from_slice(src);
            }
        }
        out
    }

    /// Output-shaped planes (row stride `wp`, no halo) with zeros in the gap columns.
    fn spread(&self, g: &ConvGeom, channels: usize, data: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; channels * self.span];
        for c in 0..channels {
            for y in 0..g.height {
                let src = &data[(c * g.height + y) * g.width..][..g.width];
                out[c * self.span + y * self.wp..][..g.width].copy_from_slice(src);
            }
        }
        out
    }

    fn gather(&self, g: &ConvGeom, channels: usize, data: &[f64], stride: usize, offset: usize) -> Vec<f64> {
        let mut out = vec![0.0; channels * g.height * g.width];
        for c in 0..channels {
            for y in 0..g.height {
                let src = &data[c * stride + offset + y * self.wp..][..g.width];
                out[(c * g.height + y) * g.width..][..g.width].copy_from_slice(src);
            }
        }
        out
    }
}

/// `out[j] += Σ_t w[t] * src[offs[t] + j]` over the whole of `out`.
#[inline(always)]
fn acc_taps<const T: usize>(out: &mut [f64], src: &[f64], offs: &[usize; T], w: &[f64; T]) {
    let n = out.len();
    let s: [&[f64]; T] = std::array::from_fn(|t| &src[offs[t]..offs[t] + n]);
    for j in 0..n {
        let mut a = out[j];
        for t in 0..T {
            a += w[t] * s[t][j];
        }
        out[j] = a;
    }
}

/// `[Σ_j g[j] * src[offs[t] + j] for t]`.
#[inline(always)]
fn dot_taps<const T: usize>(g: &[f64], src: &[f64], offs: &[usize; T]) -> [f64; T] {
    let n = g.len();
    let s: [&[f64]; T] = std::array::from_fn(|t| &src[offs[t]..offs[t] + n]);
    let mut acc = [0.0; T];
    for j in 0..n {
        let gj = g[j];
        for t in 0..T {
            acc[t] += gj * s[t][j];
        }
    }
    acc
}

/// Correlates each (out channel, in channel) pair: `out[co] += Σ_ci Σ_t
/// w[co, ci, t] * src[ci][offs[t] + j]`. `w` is laid out `[cout, cin, T]`.
#[allow(clippy::too_many_arguments)]
fn correlate<const T: usize>(
    out: &mut [f64],
    out_len: usize,
    cout: usize,
    src: &[f64],
    src_len: usize,
    cin: usize,
    offs: &[usize; T],
    w: impl Fn(usize, usize) -> [f64; T],
) {
    for co in 0..cout {
        let o = &mut out[co * out_len..(co + 1) * out_len];
        for ci in 0..cin {
            let wt = w(co, ci);
            if wt.iter().all(|v| *v == 0.0) {
                continue;
            }
            acc_taps(o, &src[ci * src_len..(ci + 1) * src_len], offs, &wt);
        }
    }
}

fn tap_offsets<const T: usize>(k: usize, wp: usize) -> [usize; T] {
    std::array::from_fn(|t| (t / k) * wp + t % k)
}

pub(crate) fn conv2d_forward(
    g: ConvGeom,
    input: &[f64],
    weight: &[f64],
    bias: Option<&[f64]>,
) -> Vec<f64> {
    match g.kernel {
        1 => conv_forward_k::<1>(g, input, weight, bias),
        3 => conv_forward_k::<9>(g, input, weight, bias),
        k => panic!("unsupported kernel size {k}"),
    }
}

fn conv_forward_k<const T: usize>(g: ConvGeom, input: &[f64], weight: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let pd = Padded::new(&g);
    let mut out = vec![0.0; g.cout * pd.span];
    if let Some(b) = bias {
        for (co, o) in out.chunks_exact_mut(pd.span).enumerate() {
            o.fill(b[co]);
        }
    }
    let offs = tap_offsets::<T>(g.kernel, pd.wp);
    if T == 1 {
        let w = |co: usize, ci: usize| std::array::from_fn(|_| weight[co * g.cin + ci]);
        correlate::<T>(&mut out, pd.span, g.cout, input, pd.span, g.cin, &offs, w);
        return out;
    }
    let src = pd.pad(&g, g.cin, input);
    let w = |co: usize, ci: usize| std::array::from_fn(|t| weight[(co * g.cin + ci) * T + t]);
    correlate::<T>(&mut out, pd.span, g.cout, &src, pd.plane, g.cin, &offs, w);
    pd.gather(&g, g.cout, &out, pd.span, 0)
}

/// Returns (d input, d weight, d bias).
pub(crate) fn conv2d_backward(
    g: ConvGeom,
    input: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    need_input: bool,
    need_weight: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>, Vec<f64>) {
    match g.kernel {
        1 => conv_backward_k::<1>(g, input, weight, grad_out, need_input, need_weight),
        3 => conv_backward_k::<9>(g, input, weight, grad_out, need_input, need_weight),
        k => panic!("unsupported kernel size {k}"),
    }
}

fn conv_backward_k<const T: usize>(
    g: ConvGeom,
    input: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    need_input: bool,
    need_weight: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>, Vec<f64>) {
    let plane = g.plane();
    let k = g.kernel;
    let pd = Padded::new(&g);
    let gb: Vec<f64> = (0..g.cout)
        .map(|co| grad_out[co * plane..(co + 1) * plane].iter().sum())
        .collect();
    let halo = (k - 1) * pd.wp + (k - 1);
    let fwd = tap_offsets::<T>(k, pd.wp);

    // Input gradient: correlate the haloed output gradient with the flipped
    // kernel, producing the padded input plane directly.
    let gin = need_input.then(|| {
        let ext_len = pd.plane + halo;
        let mut ext = vec![0.0; g.cout * ext_len];
        for co in 0..g.cout {
            for y in 0..g.height {
                let src = &grad_out[(co * g.height + y) * g.width..][..g.width];
                ext[co * ext_len + halo + y * pd.wp..][..g.width].copy_from_slice(src);
            }
        }
        let rev: [usize; T] = std::array::from_fn(|t| halo - fwd[t]);
        let mut gp = vec![0.0; g.cin * pd.plane];
        // Swap roles: input channels are the outputs of this correlation.
        correlate::<T>(&mut gp, pd.plane, g.cin, &ext, ext_len, g.cout, &rev, |ci, co| {
            std::array::from_fn(|t| weight[(co * g.cin + ci) * T + t])
        });
        let p = k / 2;
        if T == 1 {
            gp
        } else {
            pd.gather(&g, g.cin, &gp, pd.plane, p * pd.wp + p)
        }
    });

    let gw = need_weight.then(|| {
        let go = if T == 1 { grad_out.to_vec() } else { pd.spread(&g, g.cout, grad_out) };
        let src = if T == 1 { input.to_vec() } else { pd.pad(&g, g.cin, input) };
        let src_len = if T == 1 { plane } else { pd.plane };
        let mut gw = vec![0.0; weight.len()];
        for co in 0..g.cout {
            let go_c = &go[co * pd.span..(co + 1) * pd.span];
            for ci in 0..g.cin {
                let d = dot_taps(go_c, &src[ci * src_len..(ci + 1) * src_len], &fwd);
                gw[(co * g.cin + ci) * T..][..T].copy_from_slice(&d);
            }
        }
        gw
    });
    (gin, gw, gb)
}

/// Returns pooled values and, per output element, the flat index of the winning input.
pub(crate) fn max_pool2_forward(c: usize, h: usize, w: usize, input: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut arg = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let base = ch * h * w;
        for y in 0..oh {
            for x in 0..ow {
                let mut best = base + 2 * y * w + 2 * x;
                for idx in [
                    base + 2 * y * w + 2 * x + 1,
                    base + (2 * y + 1) * w + 2 * x,
                    base + (2 * y + 1) * w + 2 * x + 1,
                ] {
                    // strict comparison keeps the first maximum in scan order
                    if input[idx] > input[best] {
                        best = idx;
                    }
                }
                out.push(input[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

pub(crate) fn upsample2_forward(c: usize, h: usize, w: usize, input: &[f64]) -> Vec<f64> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for y in 0..oh {
            let src = &input[ch * h * w + (y / 2) * w..ch * h * w + (y / 2 + 1) * w];
            let dst = &mut out[ch * oh * ow + y * ow..ch * oh * ow + (y + 1) * ow];
            for (x, d) in dst.iter_mut().enumerate() {
                *d = src[x / 2];
            }
        }
    }
    out
}

/// Adjoint of [`upsample2_forward`]: `grad` has the upsampled shape `[c, 2h, 2w]`.
pub(crate) fn upsample2_backward(c: usize, h: usize, w: usize, grad: &[f64]) -> Vec<f64> {
    let ow = 2 * w;
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..2 * h {
            let row = &grad[ch * 4 * h * w + y * ow..ch * 4 * h * w + (y + 1) * ow];
            let dst = &mut out[ch * h * w + (y / 2) * w..ch * h * w + (y / 2 + 1) * w];
            for (x, g) in row.iter().enumerate() {
                dst[x / 2] += g;
            }
        }
    }
    out
}

pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            axpy(a[i * k + p], &b[p * n..(p + 1) * n], row);
        }
    }
    out
}

pub(crate) fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct six-loop convolution with explicit bounds checks.
    fn conv_naive(g: ConvGeom, input: &[f64], weight: &[f64], bias: &[f64]) -> Vec<f64> {
        let p = (g.kernel / 2) as isize;
        let mut out = vec![0.0; g.cout * g.height * g.width];
        for co in 0..g.cout {
            for y in 0..g.height as isize {
                for x in 0..g.width as isize {
                    let mut s = bias[co];
                    for ci in 0..g.cin {
                        for dy in 0..g.kernel as isize {
                            for dx in 0..g.kernel as isize {
                                let (sy, sx) = (y + dy - p, x + dx - p);
                                if sy < 0 || sx < 0 || sy >= g.height as isize || sx >= g.width as isize {
                                    continue;
                                }
                                let wi = ((co * g.cin + ci) * g.kernel + dy as usize) * g.kernel + dx as usize;
                                let ii = (ci * g.height + sy as usize) * g.width + sx as usize;
                                s += weight[wi] * input[ii];
                            }
                        }
                    }
                    out[(co * g.height + y as usize) * g.width + x as usize] = s;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive() {
        let g = ConvGeom { cin: 2, cout: 3, height: 5, width: 4, kernel: 3 };
        let input: Vec<f64> = (0..40).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let weight: Vec<f64> = (0..54).map(|i| ((i * 5) % 9) as f64 * 0.1 - 0.4).collect();
        let bias = vec![0.5, -1.0, 0.25];
        let fast = conv2d_forward(g, &input, &weight, Some(&bias));
        let slow = conv_naive(g, &input, &weight, &bias);
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn upsample_backward_is_adjoint() {
        let x: Vec<f64> = (0..12).map(|i| i as f64 * 0.3 - 1.0).collect();
        let y: Vec<f64> = (0..48).map(|i| ((i * 3) % 7) as f64).collect();
        let ux = upsample2_forward(3, 2, 2, &x);
        let lhs: f64 = ux.iter().zip(&y).map(|(a, b)| a * b).sum();
        let uty = upsample2_backward(3, 2, 2, &y);
        let rhs: f64 = x.iter().zip(&uty).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn max_pool_picks_window_maximum() {
        let x = vec![1.0, 5.0, 2.0, 0.0, 3.0, 4.0, -1.0, 7.0];
        let (out, arg) = max_pool2_forward(1, 2, 4, &x);
        assert_eq!(out, vec![5.0, 7.0]);
        assert_eq!(arg, vec![1, 7]);
    }
}
