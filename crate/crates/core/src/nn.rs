//! Dense kernels on channel-major `(C, H, W)` buffers with explicit
//! backward passes.

/// `c[m×n] = beta·c + a[m×k]·b[k×n]` with arbitrary strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the caller passes slices whose extents cover the strided
    // accesses; every call site below uses dense row- or column-major views
    // whose sizes are asserted.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Unfolds 3×3 neighbourhoods (zero padding 1) into a `(c·9, h·w)` matrix.
pub fn im2col(input: &[f64], channels: usize, h: usize, w: usize) -> Vec<f64> {
    assert_eq!(input.len(), channels * h * w);
    let hw = h * w;
    let mut cols = vec![0.0; channels * 9 * hw];
    for c in 0..channels {
        let plane = &input[c * hw..(c + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[(c * 9 + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &plane[sy as usize * w..][..w];
                    let dst = &mut row[y * w..][..w];
                    match kx {
                        0 => dst[1..].copy_from_slice(&src[..w - 1]),
                        1 => dst.copy_from_slice(src),
                        _ => dst[..w - 1].copy_from_slice(&src[1..]),
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters a `(c·9, h·w)` matrix back onto the input.
pub fn col2im(cols: &[f64], channels: usize, h: usize, w: usize) -> Vec<f64> {
    let hw = h * w;
    assert_eq!(cols.len(), channels * 9 * hw);
    let mut out = vec![0.0; channels * hw];
    for c in 0..channels {
        let plane = &mut out[c * hw..(c + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[(c * 9 + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[sy as usize * w..][..w];
                    let src = &row[y * w..][..w];
                    match kx {
                        0 => dst[..w - 1]
                            .iter_mut()
                            .zip(&src[1..])
                            .for_each(|(d, s)| *d += s),
                        1 => dst.iter_mut().zip(src).for_each(|(d, s)| *d += s),
                        _ => dst[1..]
                            .iter_mut()
                            .zip(&src[..w - 1])
                            .for_each(|(d, s)| *d += s),
                    }
                }
            }
        }
    }
    out
}

/// 3×3 convolution, stride 1, zero padding 1. `weight` is `(c_out, c_in·9)`.
/// Returns the output and the unfolded input needed by the backward pass.
pub fn conv3x3_forward(
    input: &[f64],
    weight: &[f64],
    bias: &[f64],
    c_in: usize,
    c_out: usize,
    h: usize,
    w: usize,
) -> (Vec<f64>, Vec<f64>) {
    let hw = h * w;
    let k = c_in * 9;
    assert_eq!(weight.len(), c_out * k);
    assert_eq!(bias.len(), c_out);
    let cols = im2col(input, c_in, h, w);
    let mut out = vec![0.0; c_out * hw];
    for (o, &b) in bias.iter().enumerate() {
        out[o * hw..(o + 1) * hw].fill(b);
    }
    gemm(
        c_out,
        k,
        hw,
        weight,
        (k as isize, 1),
        &cols,
        (hw as isize, 1),
        1.0,
        &mut out,
    );
    (out, cols)
}

pub struct ConvGrads {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub input: Option<Vec<f64>>,
}

pub fn conv3x3_backward(
    grad_out: &[f64],
    cols: &[f64],
    weight: &[f64],
    c_in: usize,
    c_out: usize,
    h: usize,
    w: usize,
    need_input: bool,
) -> ConvGrads {
    let hw = h * w;
    let k = c_in * 9;
    assert_eq!(grad_out.len(), c_out * hw);
    assert_eq!(cols.len(), k * hw);
    let mut gw = vec![0.0; c_out * k];
    // dW = dOut · colsᵀ
    gemm(
        c_out,
        hw,
        k,
        grad_out,
        (hw as isize, 1),
        cols,
        (1, hw as isize),
        0.0,
        &mut gw,
    );
    let gb = (0..c_out)
        .map(|o| grad_out[o * hw..(o + 1) * hw].iter().sum())
        .collect();
    let input = need_input.then(|| {
        let mut gcols = vec![0.0; k * hw];
        // dcols = Wᵀ · dOut
        gemm(
            k,
            c_out,
            hw,
            weight,
            (1, k as isize),
            grad_out,
            (hw as isize, 1),
            0.0,
            &mut gcols,
        );
        col2im(&gcols, c_in, h, w)
    });
    ConvGrads {
        weight: gw,
        bias: gb,
        input,
    }
}

pub fn relu_inplace(x: &mut [f64]) {
    for v in x {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Zeroes `grad` wherever the forward output was not positive.
pub fn relu_backward_inplace(grad: &mut [f64], output: &[f64]) {
    for (g, &o) in grad.iter_mut().zip(output) {
        if o <= 0.0 {
            *g = 0.0;
        }
    }
}

/// 2×2 average pooling, stride 2.
pub fn avg_pool2(input: &[f64], channels: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; channels * oh * ow];
    for c in 0..channels {
        let src = &input[c * h * w..];
        let dst = &mut out[c * oh * ow..];
        for y in 0..oh {
            for x in 0..ow {
                let i = 2 * y * w + 2 * x;
                dst[y * ow + x] = 0.25 * (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]);
            }
        }
    }
    out
}

pub fn avg_pool2_backward(grad_out: &[f64], channels: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; channels * h * w];
    for c in 0..channels {
        let src = &grad_out[c * oh * ow..];
        let dst = &mut out[c * h * w..];
        for y in 0..oh {
            for x in 0..ow {
                let g = 0.25 * src[y * ow + x];
                let i = 2 * y * w + 2 * x;
                dst[i] = g;
                dst[i + 1] = g;
                dst[i + w] = g;
                dst[i + w + 1] = g;
            }
        }
    }
    out
}

/// Nearest-neighbour 2× upsampling from `(h, w)` to `(2h, 2w)`.
pub fn upsample2(input: &[f64], channels: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0; channels * oh * ow];
    for c in 0..channels {
        let src = &input[c * h * w..];
        let dst = &mut out[c * oh * ow..];
        for y in 0..oh {
            for x in 0..ow {
                dst[y * ow + x] = src[(y / 2) * w + x / 2];
            }
        }
    }
    out
}

/// Adjoint of [`upsample2`]; `h, w` are the low-resolution dims.
pub fn upsample2_backward(grad_out: &[f64], channels: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0; channels * h * w];
    for c in 0..channels {
        let src = &grad_out[c * oh * ow..];
        let dst = &mut out[c * h * w..];
        for y in 0..oh {
            for x in 0..ow {
                dst[(y / 2) * w + x / 2] += src[y * ow + x];
            }
        }
    }
    out
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// `y = W·x + b` for a row-major `(out, in)` matrix.
pub fn affine(weight: &[f64], bias: &[f64], x: &[f64]) -> Vec<f64> {
    let n_in = x.len();
    bias.iter()
        .enumerate()
        .map(|(o, &b)| {
            b + weight[o * n_in..(o + 1) * n_in]
                .iter()
                .zip(x)
                .map(|(w, v)| w * v)
                .sum::<f64>()
        })
        .collect()
}
