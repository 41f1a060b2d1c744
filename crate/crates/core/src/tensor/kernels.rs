//! Raw buffer kernels shared by the forward and backward passes.

use super::Real;

/// `out[m×n] (+)= a[m×k] · b[k×n]`
pub fn mm_nn(a: &[Real], b: &[Real], out: &mut [Real], m: usize, k: usize, n: usize, acc: bool) {
    if !acc {
        out[..m * n].fill(0.0);
    }
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m×n] (+)= a[m×k] · b[n×k]ᵀ`
pub fn mm_nt(a: &[Real], b: &[Real], out: &mut [Real], m: usize, k: usize, n: usize, acc: bool) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let dot: Real = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
            if acc {
                out[i * n + j] += dot;
            } else {
                out[i * n + j] = dot;
            }
        }
    }
}

/// `out[m×n] (+)= a[k×m]ᵀ · b[k×n]`
pub fn mm_tn(a: &[Real], b: &[Real], out: &mut [Real], m: usize, k: usize, n: usize, acc: bool) {
    if !acc {
        out[..m * n].fill(0.0);
    }
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            let row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// Geometry of a 3D (transposed) convolution over `[B, C, F, H, W]` inputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv3dGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    pub output: [usize; 3],
}

impl Conv3dGeom {
    fn in_len(&self) -> usize {
        self.input.iter().product()
    }

    fn out_len(&self) -> usize {
        self.output.iter().product()
    }

    fn k_len(&self) -> usize {
        self.kernel.iter().product()
    }
}

/// Input position read by output position `o` through kernel offset `k`
/// along one axis, or `None` when it falls in the zero padding.
#[inline]
fn src_index(o: usize, k: usize, stride: usize, pad: usize, len: usize) -> Option<usize> {
    let pos = (o * stride + k) as isize - pad as isize;
    (pos >= 0 && (pos as usize) < len).then_some(pos as usize)
}

fn im2col(x: &[Real], g: &Conv3dGeom, cols: &mut [Real]) {
    let [fi, hi, wi] = g.input;
    let [kf, kh, kw] = g.kernel;
    let [fo, ho, wo] = g.output;
    let olen = g.out_len();
    let mut row = 0;
    for c in 0..g.in_ch {
        let xc = &x[c * g.in_len()..(c + 1) * g.in_len()];
        for a in 0..kf {
            for b in 0..kh {
                for d in 0..kw {
                    let dst = &mut cols[row * olen..(row + 1) * olen];
                    let mut p = 0;
                    for of in 0..fo {
                        let sf = src_index(of, a, g.stride[0], g.pad[0], fi);
                        for oh in 0..ho {
                            let sh = src_index(oh, b, g.stride[1], g.pad[1], hi);
                            for ow in 0..wo {
                                let sw = src_index(ow, d, g.stride[2], g.pad[2], wi);
                                dst[p] = match (sf, sh, sw) {
                                    (Some(f), Some(h), Some(w)) => xc[(f * hi + h) * wi + w],
                                    _ => 0.0,
                                };
                                p += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

fn col2im(cols: &[Real], g: &Conv3dGeom, dx: &mut [Real]) {
    let [fi, hi, wi] = g.input;
    let [kf, kh, kw] = g.kernel;
    let [fo, ho, wo] = g.output;
    let olen = g.out_len();
    let mut row = 0;
    for c in 0..g.in_ch {
        let dxc = &mut dx[c * g.in_len()..(c + 1) * g.in_len()];
        for a in 0..kf {
            for b in 0..kh {
                for d in 0..kw {
                    let src = &cols[row * olen..(row + 1) * olen];
                    let mut p = 0;
                    for of in 0..fo {
                        let sf = src_index(of, a, g.stride[0], g.pad[0], fi);
                        for oh in 0..ho {
                            let sh = src_index(oh, b, g.stride[1], g.pad[1], hi);
                            for ow in 0..wo {
                                let sw = src_index(ow, d, g.stride[2], g.pad[2], wi);
                                if let (Some(f), Some(h), Some(w)) = (sf, sh, sw) {
                                    dxc[(f * hi + h) * wi + w] += src[p];
                                }
                                p += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Cross-correlation forward pass. `w` is `[O, C, kf, kh, kw]`.
pub fn conv3d_forward(x: &[Real], w: &[Real], bias: Option<&[Real]>, g: &Conv3dGeom) -> Vec<Real> {
    let kdim = g.in_ch * g.k_len();
    let olen = g.out_len();
    let mut cols = vec![0.0; kdim * olen];
    let mut out = vec![0.0; g.batch * g.out_ch * olen];
    for bi in 0..g.batch {
        let xb = &x[bi * g.in_ch * g.in_len()..(bi + 1) * g.in_ch * g.in_len()];
        im2col(xb, g, &mut cols);
        let ob = &mut out[bi * g.out_ch * olen..(bi + 1) * g.out_ch * olen];
        mm_nn(w, &cols, ob, g.out_ch, kdim, olen, false);
        if let Some(bias) = bias {
            for (o, &bv) in bias.iter().enumerate() {
                ob[o * olen..(o + 1) * olen].iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    out
}

/// Gradients of [`conv3d_forward`] with respect to input and kernel.
pub fn conv3d_backward(
    x: &[Real],
    w: &[Real],
    dy: &[Real],
    g: &Conv3dGeom,
    want_dx: bool,
    want_dw: bool,
) -> (Option<Vec<Real>>, Option<Vec<Real>>) {
    let kdim = g.in_ch * g.k_len();
    let olen = g.out_len();
    let mut cols = vec![0.0; kdim * olen];
    let mut dx = want_dx.then(|| vec![0.0; x.len()]);
    let mut dw = want_dw.then(|| vec![0.0; w.len()]);
    for bi in 0..g.batch {
        let dyb = &dy[bi * g.out_ch * olen..(bi + 1) * g.out_ch * olen];
        if let Some(dw) = dw.as_mut() {
            let xb = &x[bi * g.in_ch * g.in_len()..(bi + 1) * g.in_ch * g.in_len()];
            im2col(xb, g, &mut cols);
            mm_nt(dyb, &cols, dw, g.out_ch, olen, kdim, true);
        }
        if let Some(dx) = dx.as_mut() {
            mm_tn(w, dyb, &mut cols, kdim, g.out_ch, olen, false);
            let dxb = &mut dx[bi * g.in_ch * g.in_len()..(bi + 1) * g.in_ch * g.in_len()];
            col2im(&cols, g, dxb);
        }
    }
    (dx, dw)
}

/// Transposed convolution, the adjoint of [`conv3d_forward`] with the
/// roles of input and output swapped. `w` is `[C_in, C_out, kf, kh, kw]`;
/// `g.input` is the (small) input extent and `g.output` the upsampled one.
pub fn conv_transpose3d_forward(x: &[Real], w: &[Real], bias: Option<&[Real]>, g: &Conv3dGeom) -> Vec<Real> {
    let mut out = vec![0.0; g.batch * g.out_ch * g.out_len()];
    scatter_transposed(g, |bi, ci, ii, co, oi, wi| {
        out[(bi * g.out_ch + co) * g.out_len() + oi] += x[(bi * g.in_ch + ci) * g.in_len() + ii] * w[wi];
    });
    if let Some(bias) = bias {
        for bi in 0..g.batch {
            for (co, &bv) in bias.iter().enumerate() {
                let base = (bi * g.out_ch + co) * g.out_len();
                out[base..base + g.out_len()].iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    out
}

pub fn conv_transpose3d_backward(
    x: &[Real],
    w: &[Real],
    dy: &[Real],
    g: &Conv3dGeom,
) -> (Vec<Real>, Vec<Real>) {
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; w.len()];
    scatter_transposed(g, |bi, ci, ii, co, oi, wi| {
        let up = dy[(bi * g.out_ch + co) * g.out_len() + oi];
        dx[(bi * g.in_ch + ci) * g.in_len() + ii] += up * w[wi];
        dw[wi] += up * x[(bi * g.in_ch + ci) * g.in_len() + ii];
    });
    (dx, dw)
}

/// Visits every (input element, kernel tap) pair of a transposed
/// convolution that lands inside the output, passing flat indices
/// `(batch, c_in, input_offset, c_out, output_offset, weight_offset)`.
fn scatter_transposed(g: &Conv3dGeom, mut visit: impl FnMut(usize, usize, usize, usize, usize, usize)) {
    let [fi, hi, wi] = g.input;
    let [kf, kh, kw] = g.kernel;
    let [fo, ho, wo] = g.output;
    let place = |i: usize, k: usize, axis: usize, len: usize| -> Option<usize> {
        let pos = (i * g.stride[axis] + k) as isize - g.pad[axis] as isize;
        (pos >= 0 && (pos as usize) < len).then_some(pos as usize)
    };
    for bi in 0..g.batch {
        for ci in 0..g.in_ch {
            for f in 0..fi {
                for h in 0..hi {
                    for x in 0..wi {
                        let ii = (f * hi + h) * wi + x;
                        for co in 0..g.out_ch {
                            for a in 0..kf {
                                let Some(of) = place(f, a, 0, fo) else { continue };
                                for b in 0..kh {
                                    let Some(oh) = place(h, b, 1, ho) else { continue };
                                    for d in 0..kw {
                                        let Some(ow) = place(x, d, 2, wo) else { continue };
                                        let oi = (of * ho + oh) * wo + ow;
                                        let widx = (((ci * g.out_ch + co) * kf + a) * kh + b) * kw + d;
                                        visit(bi, ci, ii, co, oi, widx);
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}
