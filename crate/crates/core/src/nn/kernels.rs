//! Forward and backward kernels for the layers used by the denoiser.
//!
//! All kernels run single-threaded with a fixed summation order, so results
//! are bitwise reproducible.

use super::Tensor;

/// `c = alpha * a·b + beta * c` on strided row-major views.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    beta: f32,
    c: &mut [f32],
    rsc: usize,
) {
    assert!(m == 0 || k == 0 || a.len() > (m - 1) * rsa + (k - 1) * csa);
    assert!(k == 0 || n == 0 || b.len() > (k - 1) * rsb + (n - 1) * csb);
    assert!(rsc >= n && (m == 0 || n == 0 || c.len() >= (m - 1) * rsc + n));
    // SAFETY: bounds of all three operands checked above.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            1,
        );
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvSpec {
    pub fn out_size(&self, len: usize) -> usize {
        (len + 2 * self.pad - self.kernel) / self.stride + 1
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfolds one sample `[c, h, w]` into `[c·k·k, ho·wo]` with zero padding.
fn im2col(x: &[f32], c: usize, h: usize, w: usize, spec: ConvSpec, col: &mut [f32]) {
    let (ho, wo) = (spec.out_size(h), spec.out_size(w));
    let k = spec.kernel;
    let mut row = 0;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let out = &mut col[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * spec.stride + ky) as isize - spec.pad as isize;
                    let dst = &mut out[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    if spec.stride == 1 {
                        // Output columns [lo, hi) read src[ox + kx - pad].
                        let shift = kx as isize - spec.pad as isize;
                        let lo = (-shift).clamp(0, wo as isize) as usize;
                        let hi = (w as isize - shift).clamp(lo as isize, wo as isize) as usize;
                        dst[..lo].fill(0.0);
                        dst[lo..hi].copy_from_slice(&src[(lo as isize + shift) as usize..(hi as isize + shift) as usize]);
                        dst[hi..].fill(0.0);
                        continue;
                    }
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * spec.stride + kx) as isize - spec.pad as isize;
                        *d = if ix < 0 || ix >= w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into `[c, h, w]`.
fn col2im(col: &[f32], c: usize, h: usize, w: usize, spec: ConvSpec, x: &mut [f32]) {
    let (ho, wo) = (spec.out_size(h), spec.out_size(w));
    let k = spec.kernel;
    let mut row = 0;
    for ci in 0..c {
        let plane = &mut x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let src = &col[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * spec.stride + ky) as isize - spec.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    if spec.stride == 1 {
                        let shift = kx as isize - spec.pad as isize;
                        let lo = (-shift).clamp(0, wo as isize) as usize;
                        let hi = (w as isize - shift).clamp(lo as isize, wo as isize) as usize;
                        let d = &mut dst[(lo as isize + shift) as usize..(hi as isize + shift) as usize];
                        for (a, b) in d.iter_mut().zip(&src[oy * wo + lo..oy * wo + hi]) {
                            *a += b;
                        }
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * spec.stride + kx) as isize - spec.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// 2-D convolution. `weight` is `[cout, cin, k, k]`, `bias` is `[cout, 1, 1, 1]`.
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, spec: ConvSpec) -> Tensor {
    let [n, cin, h, w] = x.shape();
    let cout = weight.n();
    assert_eq!(weight.c(), cin, "conv input channels");
    assert_eq!(weight.h(), spec.kernel);
    let (ho, wo) = (spec.out_size(h), spec.out_size(w));
    let kk = cin * spec.kernel * spec.kernel;
    let mut y = Tensor::zeros([n, cout, ho, wo]);
    let mut col = if spec.is_pointwise() { Vec::new() } else { vec![0.0; kk * ho * wo] };
    for s in 0..n {
        let xs = x.sample(s);
        let cols: &[f32] = if spec.is_pointwise() {
            xs
        } else {
            im2col(xs, cin, h, w, spec, &mut col);
            &col
        };
        let ys = y.sample_mut(s);
        if let Some(b) = bias {
            for (co, plane) in ys.chunks_mut(ho * wo).enumerate() {
                plane.fill(b.data()[co]);
            }
        }
        gemm(cout, kk, ho * wo, weight.data(), (kk, 1), cols, (ho * wo, 1), 1.0, ys, ho * wo);
    }
    y
}

/// Gradients of [`conv2d`] with respect to input, weight and bias.
pub fn conv2d_backward(
    x: &Tensor,
    weight: &Tensor,
    dy: &Tensor,
    spec: ConvSpec,
    need_dx: bool,
) -> (Option<Tensor>, Tensor, Tensor) {
    let [n, cin, h, w] = x.shape();
    let cout = weight.n();
    let (ho, wo) = (dy.h(), dy.w());
    let kk = cin * spec.kernel * spec.kernel;
    let mut dw = Tensor::zeros(weight.shape());
    let mut db = Tensor::zeros([cout, 1, 1, 1]);
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    let mut col = if spec.is_pointwise() { Vec::new() } else { vec![0.0; kk * ho * wo] };
    let mut dcol = vec![0.0; kk * ho * wo];
    for s in 0..n {
        let dys = dy.sample(s);
        for (co, plane) in dys.chunks(ho * wo).enumerate() {
            db.data_mut()[co] += plane.iter().sum::<f32>();
        }
        let xs = x.sample(s);
        let cols: &[f32] = if spec.is_pointwise() {
            xs
        } else {
            im2col(xs, cin, h, w, spec, &mut col);
            &col
        };
        // dW += dY · colsᵀ
        gemm(cout, ho * wo, kk, dys, (ho * wo, 1), cols, (1, ho * wo), 1.0, dw.data_mut(), kk);
        if let Some(dx) = dx.as_mut() {
            // dcol = Wᵀ · dY
            if spec.is_pointwise() {
                gemm(kk, cout, ho * wo, weight.data(), (1, kk), dys, (ho * wo, 1), 1.0, dx.sample_mut(s), ho * wo);
            } else {
                gemm(kk, cout, ho * wo, weight.data(), (1, kk), dys, (ho * wo, 1), 0.0, &mut dcol, ho * wo);
                col2im(&dcol, cin, h, w, spec, dx.sample_mut(s));
            }
        }
    }
    (dx, dw, db)
}

#[inline]
fn reflect(i: isize, len: usize) -> usize {
    let len = len as isize;
    if len == 1 {
        return 0;
    }
    let r = if i < 0 {
        -i
    } else if i >= len {
        2 * len - 2 - i
    } else {
        i
    };
    r as usize
}

/// Per-channel 3×3 convolution with reflect padding.
/// `weight` is `[c, 1, 3, 3]`, `bias` is `[c, 1, 1, 1]`.
pub fn depthwise3(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Tensor {
    let [n, c, h, w] = x.shape();
    assert_eq!(weight.shape(), [c, 1, 3, 3], "depthwise weight shape");
    let mut y = Tensor::zeros(x.shape());
    for s in 0..n {
        for ch in 0..c {
            let k = &weight.data()[ch * 9..ch * 9 + 9];
            let b = bias.data()[ch];
            let off = (s * c + ch) * h * w;
            let xp = &x.data()[off..off + h * w];
            let yp = &mut y.data_mut()[off..off + h * w];
            for i in 0..h {
                for j in 0..w {
                    let mut acc = b;
                    for ky in 0..3 {
                        let ii = reflect(i as isize + ky as isize - 1, h);
                        for kx in 0..3 {
                            let jj = reflect(j as isize + kx as isize - 1, w);
                            acc += k[ky * 3 + kx] * xp[ii * w + jj];
                        }
                    }
                    yp[i * w + j] = acc;
                }
            }
        }
    }
    y
}

pub fn depthwise3_backward(x: &Tensor, weight: &Tensor, dy: &Tensor) -> (Tensor, Tensor, Tensor) {
    let [n, c, h, w] = x.shape();
    let mut dx = Tensor::zeros(x.shape());
    let mut dw = Tensor::zeros(weight.shape());
    let mut db = Tensor::zeros([c, 1, 1, 1]);
    for s in 0..n {
        for ch in 0..c {
            let off = (s * c + ch) * h * w;
            let xp = &x.data()[off..off + h * w];
            let dyp = &dy.data()[off..off + h * w];
            let k: [f32; 9] = weight.data()[ch * 9..ch * 9 + 9].try_into().unwrap();
            let mut gk = [0.0f32; 9];
            let mut gb = 0.0f32;
            let dxp = &mut dx.data_mut()[off..off + h * w];
            for i in 0..h {
                for j in 0..w {
                    let g = dyp[i * w + j];
                    gb += g;
                    for ky in 0..3 {
                        let ii = reflect(i as isize + ky as isize - 1, h);
                        for kx in 0..3 {
                            let jj = reflect(j as isize + kx as isize - 1, w);
                            gk[ky * 3 + kx] += g * xp[ii * w + jj];
                            dxp[ii * w + jj] += g * k[ky * 3 + kx];
                        }
                    }
                }
            }
            for (a, b) in dw.data_mut()[ch * 9..ch * 9 + 9].iter_mut().zip(gk) {
                *a += b;
            }
            db.data_mut()[ch] += gb;
        }
    }
    (dx, dw, db)
}

/// Single-level orthonormal Haar analysis of every channel.
///
/// `[n, c, h, w]` maps to `[n, 4c, h/2, w/2]` with the four subbands stored
/// as consecutive channel blocks in the order LL, LH, HL, HH. For the 2×2
/// block `[[a, b], [c, d]]` (rows top to bottom):
/// `LL = (a+b+c+d)/2`, `LH = (a+b-c-d)/2` (row differences, i.e. vertical
/// frequency), `HL = (a-b+c-d)/2` (column differences), `HH = (a-b-c+d)/2`.
pub fn haar_forward(x: &Tensor) -> Tensor {
    let [n, c, h, w] = x.shape();
    assert!(h % 2 == 0 && w % 2 == 0, "haar transform needs even sides");
    let (h2, w2) = (h / 2, w / 2);
    let mut y = Tensor::zeros([n, 4 * c, h2, w2]);
    let band = c * h2 * w2;
    for s in 0..n {
        let xs = x.sample(s);
        let ys = y.sample_mut(s);
        for ch in 0..c {
            let xp = &xs[ch * h * w..(ch + 1) * h * w];
            for i in 0..h2 {
                for j in 0..w2 {
                    let a = xp[2 * i * w + 2 * j];
                    let b = xp[2 * i * w + 2 * j + 1];
                    let cc = xp[(2 * i + 1) * w + 2 * j];
                    let d = xp[(2 * i + 1) * w + 2 * j + 1];
                    let o = ch * h2 * w2 + i * w2 + j;
                    ys[o] = 0.5 * ((a + b) + (cc + d));
                    ys[band + o] = 0.5 * ((a + b) - (cc + d));
                    ys[2 * band + o] = 0.5 * ((a - b) + (cc - d));
                    ys[3 * band + o] = 0.5 * ((a - b) - (cc - d));
                }
            }
        }
    }
    y
}

/// Inverse of [`haar_forward`] (also its adjoint, the transform being orthonormal).
pub fn haar_inverse(s: &Tensor) -> Tensor {
    let [n, c4, h2, w2] = s.shape();
    assert!(c4 % 4 == 0, "subband tensor needs 4·c channels");
    let c = c4 / 4;
    let (h, w) = (2 * h2, 2 * w2);
    let mut y = Tensor::zeros([n, c, h, w]);
    let band = c * h2 * w2;
    for smp in 0..n {
        let ss = s.sample(smp);
        let ys = y.sample_mut(smp);
        for ch in 0..c {
            let yp = &mut ys[ch * h * w..(ch + 1) * h * w];
            for i in 0..h2 {
                for j in 0..w2 {
                    let o = ch * h2 * w2 + i * w2 + j;
                    let (ll, lh, hl, hh) = (ss[o], ss[band + o], ss[2 * band + o], ss[3 * band + o]);
                    yp[2 * i * w + 2 * j] = 0.5 * ((ll + lh) + (hl + hh));
                    yp[2 * i * w + 2 * j + 1] = 0.5 * ((ll + lh) - (hl + hh));
                    yp[(2 * i + 1) * w + 2 * j] = 0.5 * ((ll - lh) + (hl - hh));
                    yp[(2 * i + 1) * w + 2 * j + 1] = 0.5 * ((ll - lh) - (hl - hh));
                }
            }
        }
    }
    y
}

pub const GROUP_NORM_EPS: f32 = 1e-5;

/// Group normalisation; returns the output and per-(sample, group)
/// `(mean, 1/std)` statistics for the backward pass.
pub fn group_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, groups: usize) -> (Tensor, Vec<(f32, f32)>) {
    let [n, c, h, w] = x.shape();
    assert_eq!(c % groups, 0, "channels {c} not divisible into {groups} groups");
    let per = c / groups * h * w;
    let hw = h * w;
    let mut y = Tensor::zeros(x.shape());
    let mut stats = Vec::with_capacity(n * groups);
    for s in 0..n {
        let xs = x.sample(s);
        let ys = y.sample_mut(s);
        for g in 0..groups {
            let chunk = &xs[g * per..(g + 1) * per];
            let mean = (chunk.iter().map(|&v| v as f64).sum::<f64>() / per as f64) as f32;
            let var = (chunk.iter().map(|&v| ((v - mean) as f64).powi(2)).sum::<f64>() / per as f64) as f32;
            let inv = 1.0 / (var + GROUP_NORM_EPS).sqrt();
            stats.push((mean, inv));
            for (k, (yo, &xi)) in ys[g * per..(g + 1) * per].iter_mut().zip(chunk).enumerate() {
                let ch = g * (c / groups) + k / hw;
                *yo = (xi - mean) * inv * gamma.data()[ch] + beta.data()[ch];
            }
        }
    }
    (y, stats)
}

pub fn group_norm_backward(
    x: &Tensor,
    gamma: &Tensor,
    stats: &[(f32, f32)],
    groups: usize,
    dy: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let [n, c, h, w] = x.shape();
    let per = c / groups * h * w;
    let hw = h * w;
    let cpg = c / groups;
    let mut dx = Tensor::zeros(x.shape());
    let mut dgamma = Tensor::zeros(gamma.shape());
    let mut dbeta = Tensor::zeros(gamma.shape());
    for s in 0..n {
        let xs = x.sample(s);
        let dys = dy.sample(s);
        let dxs = dx.sample_mut(s);
        for g in 0..groups {
            let (mean, inv) = stats[s * groups + g];
            let mut sum_dxhat = 0.0f64;
            let mut sum_dxhat_xhat = 0.0f64;
            for k in 0..per {
                let idx = g * per + k;
                let ch = g * cpg + k / hw;
                let xhat = (xs[idx] - mean) * inv;
                let dxhat = dys[idx] * gamma.data()[ch];
                sum_dxhat += dxhat as f64;
                sum_dxhat_xhat += (dxhat * xhat) as f64;
                dgamma.data_mut()[ch] += dys[idx] * xhat;
                dbeta.data_mut()[ch] += dys[idx];
            }
            let m1 = (sum_dxhat / per as f64) as f32;
            let m2 = (sum_dxhat_xhat / per as f64) as f32;
            for k in 0..per {
                let idx = g * per + k;
                let ch = g * cpg + k / hw;
                let xhat = (xs[idx] - mean) * inv;
                let dxhat = dys[idx] * gamma.data()[ch];
                dxs[idx] = inv * (dxhat - m1 - xhat * m2);
            }
        }
    }
    (dx, dgamma, dbeta)
}
